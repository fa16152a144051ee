//! Deterministic workload generation: synthetic key distributions plus
//! tab-separated key/value files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use teshu_core::hash::{mix_seed, SplitMix64};
use teshu_core::message::{Message, MessageBuffer};
use teshu_core::topology::WorkerId;
use teshu_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadKind {
    /// Round-robin over the key space: every key occurs the same number of
    /// times globally, giving an exactly controlled duplication factor.
    Uniform { key_space: u64 },
    /// Zipf-distributed key ranks with the given exponent.
    Zipf { key_space: u64, exponent: f64 },
    /// Letter counting: keys are the 26 letters, values are ones.
    LetterCount,
    /// Tab-separated `key<TAB>integer` lines, split round-robin over srcs.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub messages_per_worker: u64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            WorkloadKind::Zipf { exponent, key_space } => {
                if *exponent <= 0.0 {
                    return Err(Error::InvalidArgument("zipf exponent must be > 0".into()));
                }
                if *key_space == 0 {
                    return Err(Error::InvalidArgument("key space must be > 0".into()));
                }
            }
            WorkloadKind::Uniform { key_space } => {
                if *key_space == 0 {
                    return Err(Error::InvalidArgument("key space must be > 0".into()));
                }
            }
            WorkloadKind::File(path) => {
                if !path.is_file() {
                    return Err(Error::InvalidArgument(format!(
                        "workload file not readable: {}",
                        path.display()
                    )));
                }
            }
            WorkloadKind::LetterCount => {}
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl fmt::Display for WorkloadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            WorkloadKind::Uniform { key_space } => {
                write!(f, "uniform:keys={key_space},n={}", self.messages_per_worker)
            }
            WorkloadKind::Zipf { key_space, exponent } => {
                write!(f, "zipf:keys={key_space},s={exponent},n={}", self.messages_per_worker)
            }
            WorkloadKind::LetterCount => write!(f, "letters:n={}", self.messages_per_worker),
            WorkloadKind::File(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Spec syntax: `uniform:keys=N,n=M` | `zipf:keys=N,s=F,n=M` | `letters:n=M`
/// | a path to a `key<TAB>value` file.
impl FromStr for WorkloadSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind_name, args) = match s.split_once(':') {
            Some(parts) => parts,
            None => {
                return Ok(WorkloadSpec {
                    kind: WorkloadKind::File(PathBuf::from(s)),
                    messages_per_worker: 0,
                    seed: 0,
                })
            }
        };
        if !matches!(kind_name, "uniform" | "zipf" | "letters") {
            // e.g. "C:\data" style paths; treat anything unknown as a path
            return Ok(WorkloadSpec {
                kind: WorkloadKind::File(PathBuf::from(s)),
                messages_per_worker: 0,
                seed: 0,
            });
        }
        let mut keys = None;
        let mut n = None;
        let mut exponent = 1.1f64;
        for kv in args.split(',').filter(|a| !a.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad workload argument '{kv}'")))?;
            match k {
                "keys" => keys = Some(v.parse().map_err(|_| bad_num(kv))?),
                "n" => n = Some(v.parse().map_err(|_| bad_num(kv))?),
                "s" => exponent = v.parse().map_err(|_| bad_num(kv))?,
                other => return Err(Error::Parse(format!("unknown workload argument '{other}'"))),
            }
        }
        let n = n.ok_or_else(|| Error::Parse("workload spec needs n=<messages per worker>".into()))?;
        let kind = match kind_name {
            "uniform" => WorkloadKind::Uniform {
                key_space: keys.ok_or_else(|| Error::Parse("uniform needs keys=<count>".into()))?,
            },
            "zipf" => WorkloadKind::Zipf {
                key_space: keys.ok_or_else(|| Error::Parse("zipf needs keys=<count>".into()))?,
                exponent,
            },
            _ => WorkloadKind::LetterCount,
        };
        let spec = WorkloadSpec { kind, messages_per_worker: n, seed: 0 };
        spec.validate()?;
        Ok(spec)
    }
}

fn bad_num(kv: &str) -> Error {
    Error::Parse(format!("bad numeric workload argument '{kv}'"))
}

fn key_name(idx: u64) -> Vec<u8> {
    format!("k{idx:08}").into_bytes()
}

/// Generate `srcs[pos]`'s buffer; deterministic per (spec, seed, position).
pub fn generate(spec: &WorkloadSpec, srcs: &[WorkerId], worker: WorkerId) -> Result<MessageBuffer> {
    spec.validate()?;
    let pos = srcs
        .iter()
        .position(|&w| w == worker)
        .ok_or_else(|| Error::InvalidArgument(format!("{worker} is not a source")))? as u64;
    let n = spec.messages_per_worker;
    let mut buf = MessageBuffer::new();
    match &spec.kind {
        WorkloadKind::Uniform { key_space } => {
            // Global round-robin: message i of source position p carries key
            // (p*n + i) mod keys, so global per-key counts differ by at most
            // one and are exactly equal when srcs*n divides evenly.
            for i in 0..n {
                buf.push(Message::counted(key_name((pos * n + i) % key_space), 1)?);
            }
        }
        WorkloadKind::Zipf { key_space, exponent } => {
            let cdf = zipf_cdf(*key_space, *exponent);
            let mut rng = SplitMix64::new(mix_seed(&[spec.seed, 0x7a697066, pos]));
            for _ in 0..n {
                let u = rng.next_f64();
                let rank = cdf.partition_point(|&c| c < u) as u64;
                buf.push(Message::counted(key_name(rank.min(key_space - 1)), 1)?);
            }
        }
        WorkloadKind::LetterCount => {
            let mut rng = SplitMix64::new(mix_seed(&[spec.seed, 0x6c747273, pos]));
            for _ in 0..n {
                let c = b'a' + rng.next_below(26) as u8;
                buf.push(Message::counted(vec![c], 1)?);
            }
        }
        WorkloadKind::File(path) => {
            for (line_no, msg) in read_workload_file(path)?.into_iter().enumerate() {
                if line_no as u64 % srcs.len() as u64 == pos {
                    buf.push(msg);
                }
            }
        }
    }
    Ok(buf)
}

/// Generate the whole workload, one buffer per source.
pub fn generate_all(
    spec: &WorkloadSpec,
    srcs: &[WorkerId],
) -> Result<std::collections::BTreeMap<WorkerId, MessageBuffer>> {
    srcs.iter().map(|&w| Ok((w, generate(spec, srcs, w)?))).collect()
}

fn zipf_cdf(key_space: u64, exponent: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (1..=key_space)
        .map(|k| {
            acc += 1.0 / (k as f64).powf(exponent);
            acc
        })
        .collect();
    for c in &mut cdf {
        *c /= acc;
    }
    cdf
}

fn read_workload_file(path: &Path) -> Result<Vec<Message>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut msgs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once('\t').ok_or_else(|| {
            Error::Parse(format!("{}:{}: expected key<TAB>value", path.display(), i + 1))
        })?;
        let value: u64 = value.trim().parse().map_err(|_| {
            Error::Parse(format!("{}:{}: value is not an integer", path.display(), i + 1))
        })?;
        msgs.push(Message::counted(key.as_bytes().to_vec(), value).map_err(|_| {
            Error::Parse(format!("{}:{}: empty key", path.display(), i + 1))
        })?);
    }
    Ok(msgs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::io::Write;

    fn srcs(n: u32) -> Vec<WorkerId> {
        (0..n).map(WorkerId).collect()
    }

    #[test]
    fn spec_parsing() {
        let s: WorkloadSpec = "uniform:keys=100,n=50".parse().unwrap();
        assert_eq!(s.kind, WorkloadKind::Uniform { key_space: 100 });
        assert_eq!(s.messages_per_worker, 50);
        let z: WorkloadSpec = "zipf:keys=10,s=1.5,n=5".parse().unwrap();
        assert!(matches!(z.kind, WorkloadKind::Zipf { key_space: 10, .. }));
        assert!("zipf:keys=10,s=-1,n=5".parse::<WorkloadSpec>().is_err());
        assert!("uniform:n=5".parse::<WorkloadSpec>().is_err());
        let f: WorkloadSpec = "/tmp/does-not-matter.tsv".parse().unwrap();
        assert!(matches!(f.kind, WorkloadKind::File(_)));
    }

    #[test]
    fn zero_messages_give_empty_buffers() {
        let spec: WorkloadSpec = "letters:n=0".parse().unwrap();
        for w in srcs(3) {
            assert!(generate(&spec, &srcs(3), w).unwrap().is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = WorkloadSpec::from_str("zipf:keys=50,s=1.2,n=200").unwrap().with_seed(9);
        let a = generate(&spec, &srcs(4), WorkerId(2)).unwrap();
        let b = generate(&spec, &srcs(4), WorkerId(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_duplication_is_exact() {
        // 4 srcs x 250 messages over 100 keys: every key exactly 10 times.
        let spec = WorkloadSpec::from_str("uniform:keys=100,n=250").unwrap();
        let mut counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for w in srcs(4) {
            for m in &generate(&spec, &srcs(4), w).unwrap() {
                *counts.entry(m.key().to_vec()).or_insert(0) += 1;
            }
        }
        assert_eq!(counts.len(), 100);
        assert!(counts.values().all(|&c| c == 10));
    }

    #[test]
    fn letter_count_oracle() {
        // Every key's combined count equals its draw count.
        let spec = WorkloadSpec::from_str("letters:n=2600").unwrap().with_seed(3);
        let buf = generate(&spec, &srcs(1), WorkerId(0)).unwrap();
        assert_eq!(buf.len(), 2600);
        for m in &buf {
            assert!(m.key().len() == 1 && m.key()[0].is_ascii_lowercase());
        }
    }

    #[test]
    fn zipf_is_skewed() {
        let spec = WorkloadSpec::from_str("zipf:keys=100,s=1.5,n=5000").unwrap().with_seed(1);
        let buf = generate(&spec, &srcs(1), WorkerId(0)).unwrap();
        let top = buf.iter().filter(|m| m.key() == b"k00000000").count();
        let tail = buf.iter().filter(|m| m.key() == b"k00000099").count();
        assert!(top > 20 * (tail + 1), "rank 0 ({top}) not dominant over rank 99 ({tail})");
    }

    #[test]
    fn file_workload_round_robin_with_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wl.tsv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "apple\t3").unwrap();
        writeln!(f, "pear\t4").unwrap();
        writeln!(f, "apple\t1").unwrap();
        drop(f);
        let spec = WorkloadSpec {
            kind: WorkloadKind::File(path.clone()),
            messages_per_worker: 0,
            seed: 0,
        };
        let a = generate(&spec, &srcs(2), WorkerId(0)).unwrap();
        let b = generate(&spec, &srcs(2), WorkerId(1)).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 1);

        std::fs::write(dir.path().join("bad.tsv"), "no-tab-here\n").unwrap();
        let bad = WorkloadSpec {
            kind: WorkloadKind::File(dir.path().join("bad.tsv")),
            messages_per_worker: 0,
            seed: 0,
        };
        let err = generate(&bad, &srcs(1), WorkerId(0)).unwrap_err();
        assert!(err.to_string().contains(":1:"), "error names the line: {err}");
    }
}
