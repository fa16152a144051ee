//! Cluster layout (workers on servers on racks in a leaf-spine network) and
//! the analytic alpha-beta model that turns bytes moved into modeled seconds.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl core::fmt::Display for $name {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(WorkerId);
id_type!(ServerId);
id_type!(RackId);

/// Communication level between two workers, ordered cheapest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    /// Same worker (a self-send).
    Worker,
    /// Same server, different worker.
    Server,
    /// Same rack, different server.
    Rack,
    /// Different racks, crossing the spine.
    Global,
}

impl Level {
    pub fn trace_letter(self) -> char {
        match self {
            Level::Worker => 'W',
            Level::Server => 'S',
            Level::Rack => 'R',
            Level::Global => 'G',
        }
    }
}

/// Leaf-spine cluster: workers packed densely onto servers, servers onto
/// racks. `failed_spine_links` holds (rack, link-index) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub racks: u32,
    pub servers_per_rack: u32,
    pub workers_per_server: u32,
    /// Inter-rack contention factor; 1.0 means full bisection bandwidth.
    pub oversubscription: f64,
    /// Bytes per second on a server NIC.
    pub nic_bandwidth: f64,
    pub spine_links_per_rack: u32,
    pub failed_spine_links: BTreeSet<(u32, u32)>,
}

impl Topology {
    pub fn new(
        racks: u32,
        servers_per_rack: u32,
        workers_per_server: u32,
        oversubscription: f64,
        nic_bandwidth: f64,
        spine_links_per_rack: u32,
    ) -> Result<Self> {
        let topo = Self {
            racks,
            servers_per_rack,
            workers_per_server,
            oversubscription,
            nic_bandwidth,
            spine_links_per_rack,
            failed_spine_links: BTreeSet::new(),
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.racks < 1 || self.servers_per_rack < 1 || self.workers_per_server < 1 {
            return Err(Error::InvalidArgument("all topology counts must be >= 1".into()));
        }
        if self.spine_links_per_rack < 1 {
            return Err(Error::InvalidArgument("spine_links_per_rack must be >= 1".into()));
        }
        if !(self.oversubscription >= 1.0) {
            return Err(Error::InvalidArgument("oversubscription must be >= 1".into()));
        }
        if !(self.nic_bandwidth > 0.0) {
            return Err(Error::InvalidArgument("nic_bandwidth must be positive".into()));
        }
        for &(rack, link) in &self.failed_spine_links {
            if rack >= self.racks {
                return Err(Error::InvalidArgument(format!("failed link on unknown rack {rack}")));
            }
            if link >= self.spine_links_per_rack {
                return Err(Error::InvalidArgument(format!("failed link index {link} out of range")));
            }
        }
        for rack in 0..self.racks {
            let failures = self.failures_on_rack(rack);
            if failures >= self.spine_links_per_rack {
                return Err(Error::InvalidArgument(format!(
                    "rack {rack} would be fully disconnected ({failures} of {} links failed)",
                    self.spine_links_per_rack
                )));
            }
        }
        Ok(())
    }

    pub fn num_workers(&self) -> u32 {
        self.racks * self.servers_per_rack * self.workers_per_server
    }

    pub fn all_workers(&self) -> Vec<WorkerId> {
        (0..self.num_workers()).map(WorkerId).collect()
    }

    fn check_worker(&self, w: WorkerId) -> Result<()> {
        if w.0 >= self.num_workers() {
            return Err(Error::InvalidArgument(format!("unknown worker id {w}")));
        }
        Ok(())
    }

    pub fn server_of(&self, w: WorkerId) -> Result<ServerId> {
        self.check_worker(w)?;
        Ok(ServerId(w.0 / self.workers_per_server))
    }

    pub fn rack_of(&self, w: WorkerId) -> Result<RackId> {
        Ok(RackId(self.server_of(w)?.0 / self.servers_per_rack))
    }

    pub fn level_of(&self, a: WorkerId, b: WorkerId) -> Result<Level> {
        self.check_worker(a)?;
        self.check_worker(b)?;
        if a == b {
            Ok(Level::Worker)
        } else if self.server_of(a)? == self.server_of(b)? {
            Ok(Level::Server)
        } else if self.rack_of(a)? == self.rack_of(b)? {
            Ok(Level::Rack)
        } else {
            Ok(Level::Global)
        }
    }

    pub fn failures_on_rack(&self, rack: u32) -> u32 {
        self.failed_spine_links.iter().filter(|&&(r, _)| r == rack).count() as u32
    }

    /// Healthy spine capacity of the bottleneck rack, as a fraction.
    pub fn healthy_fraction(&self) -> f64 {
        let worst = (0..self.racks).map(|r| self.failures_on_rack(r)).max().unwrap_or(0);
        f64::from(self.spine_links_per_rack - worst) / f64::from(self.spine_links_per_rack)
    }

    /// A copy of this topology with the given spine links failed.
    pub fn with_failed_links(&self, failed: BTreeSet<(u32, u32)>) -> Result<Self> {
        let mut topo = self.clone();
        topo.failed_spine_links = failed;
        topo.validate()?;
        Ok(topo)
    }
}

/// Per-level transfer-time model: a fixed startup latency per message batch
/// plus bytes over the level's bandwidth. The global level is adjusted for
/// oversubscription and spine-link failures.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    /// Seconds of startup latency per SEND.
    pub alpha: f64,
    pub intra_server_bw: f64,
    pub intra_rack_bw: f64,
    /// Seconds per byte passed through a combiner.
    pub combine_cost_per_byte: f64,
}

impl CostModel {
    pub const DEFAULT_ALPHA: f64 = 10e-6;
    pub const DEFAULT_COMBINE_COST: f64 = 0.2e-9;

    /// Defaults relative to the topology's NIC speed: shared-memory transfers
    /// are cheap but not free (10x the NIC), intra-rack runs at NIC speed.
    pub fn defaults_for(topo: &Topology) -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
            intra_server_bw: 10.0 * topo.nic_bandwidth,
            intra_rack_bw: topo.nic_bandwidth,
            combine_cost_per_byte: Self::DEFAULT_COMBINE_COST,
        }
    }

    /// Effective bandwidth at a level. The global figure folds in link
    /// failures and oversubscription.
    pub fn bandwidth(&self, level: Level, topo: &Topology) -> f64 {
        match level {
            Level::Worker => f64::INFINITY,
            Level::Server => self.intra_server_bw,
            Level::Rack => self.intra_rack_bw,
            Level::Global => topo.nic_bandwidth * topo.healthy_fraction() / topo.oversubscription,
        }
    }

    /// Modeled seconds to move `bytes` at `level`. Self-transfers are free.
    pub fn transfer_time(&self, bytes: f64, level: Level, topo: &Topology) -> f64 {
        match level {
            Level::Worker => 0.0,
            _ => self.alpha + bytes / self.bandwidth(level, topo),
        }
    }

    pub fn combine_time(&self, bytes: f64) -> f64 {
        self.combine_cost_per_byte * bytes
    }

    /// Bandwidths must be ordered cheapest-inside-out.
    pub fn validate(&self, topo: &Topology) -> Result<()> {
        let global = self.bandwidth(Level::Global, topo);
        if !(self.intra_server_bw >= self.intra_rack_bw && self.intra_rack_bw >= global) {
            return Err(Error::InvalidArgument(
                "bandwidths must satisfy intra_server >= intra_rack >= effective inter_rack".into(),
            ));
        }
        Ok(())
    }
}

/// Workers of `scope` on the same server as `w` (including `w`), ascending.
pub fn neighbors_same_server(w: WorkerId, scope: &[WorkerId], topo: &Topology) -> Result<Vec<WorkerId>> {
    neighbors_within(w, scope, topo, Level::Server)
}

/// Workers of `scope` in the same rack as `w` (including `w`), ascending.
pub fn neighbors_same_rack(w: WorkerId, scope: &[WorkerId], topo: &Topology) -> Result<Vec<WorkerId>> {
    neighbors_within(w, scope, topo, Level::Rack)
}

fn neighbors_within(
    w: WorkerId,
    scope: &[WorkerId],
    topo: &Topology,
    max_level: Level,
) -> Result<Vec<WorkerId>> {
    if !scope.contains(&w) {
        return Err(Error::InvalidArgument(format!("worker {w} is not in the given scope")));
    }
    let mut nbrs: Vec<WorkerId> = scope
        .iter()
        .copied()
        .filter_map(|x| match topo.level_of(w, x) {
            Ok(l) if l <= max_level => Some(Ok(x)),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;
    nbrs.sort();
    nbrs.dedup();
    Ok(nbrs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn topo_2x2x2() -> Topology {
        Topology::new(2, 2, 2, 1.0, 1.25e9, 4).unwrap()
    }

    #[test]
    fn dense_enumeration() {
        let t = topo_2x2x2();
        assert_eq!(t.server_of(WorkerId(0)).unwrap(), ServerId(0));
        assert_eq!(t.server_of(WorkerId(1)).unwrap(), ServerId(0));
        assert_eq!(t.server_of(WorkerId(2)).unwrap(), ServerId(1));
        assert_eq!(t.rack_of(WorkerId(3)).unwrap(), RackId(0));
        assert_eq!(t.rack_of(WorkerId(4)).unwrap(), RackId(1));
    }

    #[test]
    fn level_cases() {
        let t = topo_2x2x2();
        assert_eq!(t.level_of(WorkerId(3), WorkerId(3)).unwrap(), Level::Worker);
        assert_eq!(t.level_of(WorkerId(0), WorkerId(1)).unwrap(), Level::Server);
        assert_eq!(t.level_of(WorkerId(0), WorkerId(2)).unwrap(), Level::Rack);
        // First worker of rack 0 vs first worker of rack 1.
        assert_eq!(t.level_of(WorkerId(0), WorkerId(4)).unwrap(), Level::Global);
        assert!(t.level_of(WorkerId(0), WorkerId(99)).is_err());
    }

    #[test]
    fn transfer_time_pure_latency() {
        let t = topo_2x2x2();
        let cm = CostModel::defaults_for(&t);
        assert_eq!(cm.transfer_time(0.0, Level::Server, &t), cm.alpha);
        assert_eq!(cm.transfer_time(1e6, Level::Worker, &t), 0.0);
    }

    #[test]
    fn oversubscription_scales_bandwidth_term() {
        let t1 = topo_2x2x2();
        let mut t10 = t1.clone();
        t10.oversubscription = 10.0;
        let cm = CostModel::defaults_for(&t1);
        let bytes = 1e9;
        let term1 = cm.transfer_time(bytes, Level::Global, &t1) - cm.alpha;
        let term10 = cm.transfer_time(bytes, Level::Global, &t10) - cm.alpha;
        assert!((term10 / term1 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn failed_link_scales_bandwidth_term() {
        // 1 of 4 spine links failed: healthy_fraction 3/4, so the
        // bandwidth term grows by exactly 4/3.
        let healthy = topo_2x2x2();
        let failed = healthy.with_failed_links([(0u32, 0u32)].into_iter().collect()).unwrap();
        let cm = CostModel::defaults_for(&healthy);
        let bytes = 1e9;
        let th = cm.transfer_time(bytes, Level::Global, &healthy) - cm.alpha;
        let tf = cm.transfer_time(bytes, Level::Global, &failed) - cm.alpha;
        assert!((tf / th - 4.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rack_never_fully_disconnects() {
        let t = topo_2x2x2();
        let all: BTreeSet<(u32, u32)> = (0..4).map(|l| (0u32, l)).collect();
        assert!(t.with_failed_links(all).is_err());
    }

    #[test]
    fn neighbor_examples() {
        let t = topo_2x2x2();
        let all = t.all_workers();
        assert_eq!(
            neighbors_same_server(WorkerId(0), &[WorkerId(0)], &t).unwrap(),
            vec![WorkerId(0)]
        );
        assert_eq!(
            neighbors_same_server(WorkerId(0), &all, &t).unwrap(),
            vec![WorkerId(0), WorkerId(1)]
        );
        // Asymmetric scope missing a co-located worker excludes it.
        let scope = vec![WorkerId(0), WorkerId(2), WorkerId(3)];
        assert_eq!(neighbors_same_server(WorkerId(0), &scope, &t).unwrap(), vec![WorkerId(0)]);
        assert_eq!(
            neighbors_same_rack(WorkerId(0), &all, &t).unwrap(),
            vec![WorkerId(0), WorkerId(1), WorkerId(2), WorkerId(3)]
        );
        assert!(neighbors_same_server(WorkerId(0), &[WorkerId(1)], &t).is_err());
    }

    proptest! {
        // server neighbors ⊆ rack neighbors ⊆ scope, and both contain w.
        #[test]
        fn neighbor_nesting(widx in 0u32..8, mask in 1u8..=255) {
            let t = topo_2x2x2();
            let mut scope: Vec<WorkerId> =
                (0..8).filter(|i| mask & (1 << i) != 0).map(WorkerId).collect();
            let w = WorkerId(widx);
            if !scope.contains(&w) {
                scope.push(w);
                scope.sort();
            }
            let s = neighbors_same_server(w, &scope, &t).unwrap();
            let r = neighbors_same_rack(w, &scope, &t).unwrap();
            prop_assert!(s.contains(&w));
            prop_assert!(s.iter().all(|x| r.contains(x)));
            prop_assert!(r.iter().all(|x| scope.contains(x)));
        }

        // transfer_time is monotone in bytes and in level.
        #[test]
        fn transfer_time_monotone(b1 in 0u64..1_000_000, b2 in 0u64..1_000_000, oversub in 1.0f64..16.0) {
            let mut t = topo_2x2x2();
            t.oversubscription = oversub;
            let cm = CostModel::defaults_for(&t);
            let (lo, hi) = (b1.min(b2) as f64, b1.max(b2) as f64);
            for level in [Level::Worker, Level::Server, Level::Rack, Level::Global] {
                prop_assert!(cm.transfer_time(lo, level, &t) <= cm.transfer_time(hi, level, &t));
            }
            let times: Vec<f64> = [Level::Worker, Level::Server, Level::Rack, Level::Global]
                .iter()
                .map(|&l| cm.transfer_time(hi, l, &t))
                .collect();
            prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        }

        // Failing a link never decreases global transfer time.
        #[test]
        fn failures_never_speed_up(rack in 0u32..2, link in 0u32..4, bytes in 0u64..1_000_000) {
            let t = topo_2x2x2();
            let failed = t.with_failed_links([(rack, link)].into_iter().collect()).unwrap();
            let cm = CostModel::defaults_for(&t);
            prop_assert!(
                cm.transfer_time(bytes as f64, Level::Global, &failed)
                    >= cm.transfer_time(bytes as f64, Level::Global, &t)
            );
        }
    }
}
