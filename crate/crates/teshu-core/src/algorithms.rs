//! The shipped shuffle algorithms, embedded from `templates/` so the library
//! works without a filesystem and the files stay the single source of truth.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::template::Template;

pub const VANILLA_PUSH: &str = include_str!("../../../templates/vanilla_push.tshu");
pub const VANILLA_PULL: &str = include_str!("../../../templates/vanilla_pull.tshu");
pub const COORDINATED: &str = include_str!("../../../templates/coordinated.tshu");
pub const BRUCK: &str = include_str!("../../../templates/bruck.tshu");
pub const TWO_LEVEL: &str = include_str!("../../../templates/two_level.tshu");
pub const NETWORK_AWARE: &str = include_str!("../../../templates/network_aware.tshu");

fn must_parse(text: &str) -> Template {
    Template::parse(text).expect("shipped template parses")
}

pub fn vanilla_push() -> Template {
    must_parse(VANILLA_PUSH)
}

pub fn vanilla_pull() -> Template {
    must_parse(VANILLA_PULL)
}

pub fn coordinated() -> Template {
    must_parse(COORDINATED)
}

pub fn bruck() -> Template {
    must_parse(BRUCK)
}

pub fn two_level() -> Template {
    must_parse(TWO_LEVEL)
}

pub fn network_aware() -> Template {
    must_parse(NETWORK_AWARE)
}

pub const BUILTIN_IDS: [&str; 6] = [
    "vanilla_push",
    "vanilla_pull",
    "coordinated",
    "bruck",
    "two_level",
    "network_aware",
];

/// Look up a shipped template by id.
pub fn builtin(id: &str) -> Result<Template> {
    match id {
        "vanilla_push" => Ok(vanilla_push()),
        "vanilla_pull" => Ok(vanilla_pull()),
        "coordinated" => Ok(coordinated()),
        "bruck" => Ok(bruck()),
        "two_level" => Ok(two_level()),
        "network_aware" => Ok(network_aware()),
        other => Err(crate::error::Error::InvalidArgument(alloc::format!(
            "unknown template id '{other}'"
        ))),
    }
}

pub fn all_builtins() -> Vec<Template> {
    BUILTIN_IDS.iter().map(|id| builtin(id).expect("builtin id")).collect()
}

/// The source text for a builtin id, for installing into a manager.
pub fn builtin_text(id: &str) -> Result<String> {
    builtin(id)?;
    Ok(String::from(match id {
        "vanilla_push" => VANILLA_PUSH,
        "vanilla_pull" => VANILLA_PULL,
        "coordinated" => COORDINATED,
        "bruck" => BRUCK,
        "two_level" => TWO_LEVEL,
        _ => NETWORK_AWARE,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_match_file_contents() {
        for id in BUILTIN_IDS {
            assert_eq!(builtin(id).unwrap().id, id);
        }
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn primitive_coverage() {
        // Every primitive appears in at least one shipped algorithm, and the
        // adaptive one exercises the full set.
        let na = network_aware();
        for p in ["SEND", "RECV", "PART", "COMB", "SAMP"] {
            assert!(na.primitives().contains(p), "network_aware missing {p}");
        }
        assert!(vanilla_pull().primitives().contains("FETCH"));
        assert!(coordinated().primitives().contains("FETCH"));
    }

    #[test]
    fn combiner_requirements() {
        assert!(network_aware().requires_combiner());
        assert!(!vanilla_push().requires_combiner());
        assert!(!vanilla_pull().requires_combiner());
        assert!(!coordinated().requires_combiner());
        assert!(!bruck().requires_combiner());
        assert!(!two_level().requires_combiner());
    }

    #[test]
    fn parameter_sets() {
        let na = network_aware().params();
        assert!(na.contains("$RATE") && na.contains("$FIND_NBR") && na.contains("$COMPUTE_EFF_COST"));
        assert!(coordinated().params().contains("$RING_SCHEDULE"));
        assert!(bruck().params().contains("$BRUCK_SCHEDULE"));
        assert!(two_level().params().contains("$GROUP_SIZE"));
        assert!(vanilla_push().params().is_empty());
        assert!(vanilla_pull().params().is_empty());
    }

    #[test]
    fn text_round_trips() {
        for t in all_builtins() {
            assert_eq!(Template::parse(&t.to_text()).unwrap(), t);
        }
    }
}
