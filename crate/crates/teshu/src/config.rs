//! JSON topology configuration files.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use teshu_core::topology::Topology;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub racks: u32,
    pub servers_per_rack: u32,
    pub workers_per_server: u32,
    #[serde(default = "default_oversubscription")]
    pub oversubscription: f64,
    /// Bytes per second per NIC.
    #[serde(default = "default_nic_bandwidth")]
    pub nic_bandwidth: f64,
    #[serde(default = "default_spine_links")]
    pub spine_links_per_rack: u32,
    /// `[rack, link]` pairs.
    #[serde(default)]
    pub failed_spine_links: Vec<(u32, u32)>,
}

fn default_oversubscription() -> f64 {
    1.0
}

/// 10 Gbps in bytes per second.
fn default_nic_bandwidth() -> f64 {
    1.25e9
}

fn default_spine_links() -> u32 {
    4
}

impl TopologyConfig {
    pub fn to_topology(&self) -> anyhow::Result<Topology> {
        let mut topo = Topology::new(
            self.racks,
            self.servers_per_rack,
            self.workers_per_server,
            self.oversubscription,
            self.nic_bandwidth,
            self.spine_links_per_rack,
        )?;
        if !self.failed_spine_links.is_empty() {
            let failed: BTreeSet<(u32, u32)> = self.failed_spine_links.iter().copied().collect();
            topo = topo.with_failed_links(failed)?;
        }
        Ok(topo)
    }

    pub fn from_topology(topo: &Topology) -> Self {
        Self {
            racks: topo.racks,
            servers_per_rack: topo.servers_per_rack,
            workers_per_server: topo.workers_per_server,
            oversubscription: topo.oversubscription,
            nic_bandwidth: topo.nic_bandwidth,
            spine_links_per_rack: topo.spine_links_per_rack,
            failed_spine_links: topo.failed_spine_links.iter().copied().collect(),
        }
    }
}

pub fn load_topology(path: &Path) -> anyhow::Result<Topology> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading topology config {}", path.display()))?;
    let cfg: TopologyConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing topology config {}", path.display()))?;
    cfg.to_topology()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let topo = Topology::new(2, 5, 2, 4.0, 1.25e9, 4).unwrap();
        let cfg = TopologyConfig::from_topology(&topo);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: TopologyConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_topology().unwrap(), topo);
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: TopologyConfig =
            serde_json::from_str(r#"{"racks":1,"servers_per_rack":2,"workers_per_server":2}"#)
                .unwrap();
        let topo = cfg.to_topology().unwrap();
        assert_eq!(topo.oversubscription, 1.0);
        assert_eq!(topo.spine_links_per_rack, 4);
    }

    #[test]
    fn invalid_rejected() {
        let cfg: TopologyConfig =
            serde_json::from_str(r#"{"racks":0,"servers_per_rack":2,"workers_per_server":2}"#)
                .unwrap();
        assert!(cfg.to_topology().is_err());
        let missing = load_topology(Path::new("/nonexistent/topo.json"));
        assert!(missing.is_err());
    }
}
