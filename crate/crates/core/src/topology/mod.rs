//! Node/core map, worker planning, dispatch and per-server aggregation.
//!
//! One worker runs per memory node, pinned (best effort) to that node's
//! cores, with one thread fewer than the node has cores unless told
//! otherwise. Detection reads sysfs; a JSON file can stand in for it.

mod affinity;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ThroughputReport;

pub use affinity::{allowed_cores, pin_current_thread};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologySource {
    Detected,
    Configured,
    FallbackSingleNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumaNode {
    pub id: u32,
    pub cores: Vec<usize>,
}

/// Node ids are unique; core lists are non-empty and pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Topology {
    nodes: Vec<NumaNode>,
    source: TopologySource,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    nodes: Vec<NumaNode>,
}

impl Topology {
    pub fn new(nodes: Vec<NumaNode>, source: TopologySource) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Topology("topology has no nodes".into()));
        }
        let mut ids = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for node in &nodes {
            if !ids.insert(node.id) {
                return Err(Error::Topology(format!("node id {} listed twice", node.id)));
            }
            if node.cores.is_empty() {
                return Err(Error::Topology(format!("node {} has no cores", node.id)));
            }
            for &core in &node.cores {
                if !seen.insert(core) {
                    return Err(Error::Topology(format!("core {core} appears more than once")));
                }
            }
        }
        Ok(Self { nodes, source })
    }

    pub fn single_node(cores: Vec<usize>) -> Self {
        let cores = if cores.is_empty() { vec![0] } else { cores };
        Self { nodes: vec![NumaNode { id: 0, cores }], source: TopologySource::FallbackSingleNode }
    }

    /// Parse `{"nodes": [{"id": 0, "cores": [0, 1]}, ...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: TopologyFile =
            serde_json::from_str(text).map_err(|e| Error::Topology(format!("bad topology file: {e}")))?;
        Self::new(file.nodes, TopologySource::Configured)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Topology(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn nodes(&self) -> &[NumaNode] {
        &self.nodes
    }

    pub fn source(&self) -> TopologySource {
        self.source
    }

    pub fn total_cores(&self) -> usize {
        self.nodes.iter().map(|n| n.cores.len()).sum()
    }
}

/// Parse a kernel cpulist such as `0-3,8,10-11`.
pub fn parse_cpulist(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Topology(format!("bad cpulist {text:?}"));
    let mut out = Vec::new();
    for part in text.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if hi < lo {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => out.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

/// Read the node map from `/sys`, falling back to a single node holding
/// every core this process may run on. Never fails.
pub fn detect_topology() -> Topology {
    let allowed = allowed_cores();
    detect_from_sysfs(Path::new("/sys/devices/system/node"), allowed.as_deref())
        .unwrap_or_else(|| Topology::single_node(allowed.unwrap_or_else(fallback_cores)))
}

fn fallback_cores() -> Vec<usize> {
    let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    (0..n).collect()
}

/// Nodes under `root` (`node<N>/cpulist`), restricted to `allowed` cores.
/// Nodes left without cores are dropped; `None` if nothing usable remains.
pub fn detect_from_sysfs(root: &Path, allowed: Option<&[usize]>) -> Option<Topology> {
    let mut nodes = Vec::new();
    for entry in std::fs::read_dir(root).ok()? {
        let entry = entry.ok()?;
        let name = entry.file_name();
        let Some(id) = name.to_str().and_then(|n| n.strip_prefix("node")).and_then(|n| n.parse::<u32>().ok())
        else {
            continue;
        };
        let text = std::fs::read_to_string(entry.path().join("cpulist")).ok()?;
        let mut cores = parse_cpulist(&text).ok()?;
        if let Some(allowed) = allowed {
            cores.retain(|c| allowed.contains(c));
        }
        if !cores.is_empty() {
            nodes.push(NumaNode { id, cores });
        }
    }
    nodes.sort_by_key(|n| n.id);
    Topology::new(nodes, TopologySource::Detected).ok()
}

/// A worker or thread count: derived from the topology, or given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    #[default]
    Auto,
    Count(usize),
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Setting::Auto);
        }
        s.parse()
            .map(Setting::Count)
            .map_err(|_| Error::InvalidConfig(format!("expected \"auto\" or a count, got {s:?}")))
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::Auto => f.write_str("auto"),
            Setting::Count(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub worker_id: usize,
    pub node_id: u32,
    pub cores: Vec<usize>,
    /// `1 ..= cores.len()`.
    pub thread_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerPlan {
    pub workers: Vec<WorkerSpec>,
}

impl WorkerPlan {
    pub fn total_threads(&self) -> usize {
        self.workers.iter().map(|w| w.thread_count).sum()
    }
}

/// One worker per selected node, nodes taken in listed order.
pub fn plan_workers(topology: &Topology, workers: Setting, threads_per_worker: Setting) -> Result<WorkerPlan> {
    let nodes = topology.nodes();
    let count = match workers {
        Setting::Auto => nodes.len(),
        Setting::Count(0) => return Err(Error::InfeasiblePlan("at least one worker is required".into())),
        Setting::Count(n) if n > nodes.len() => {
            return Err(Error::InfeasiblePlan(format!("{n} workers requested but only {} nodes", nodes.len())))
        }
        Setting::Count(n) => n,
    };
    let workers = nodes[..count]
        .iter()
        .enumerate()
        .map(|(worker_id, node)| {
            let cores = node.cores.len();
            let thread_count = match threads_per_worker {
                Setting::Auto => cores.saturating_sub(1).max(1),
                Setting::Count(0) => {
                    return Err(Error::InfeasiblePlan("threads per worker must be at least 1".into()))
                }
                Setting::Count(t) if t > cores => {
                    return Err(Error::InfeasiblePlan(format!(
                        "{t} threads requested but node {} has {cores} cores",
                        node.id
                    )))
                }
                Setting::Count(t) => t,
            };
            Ok(WorkerSpec { worker_id, node_id: node.id, cores: node.cores.clone(), thread_count })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WorkerPlan { workers })
}

/// Index of the worker with the least outstanding work; ties go to the
/// lowest index. `None` only for an empty slice.
pub fn dispatch(outstanding: &[u64]) -> Option<usize> {
    outstanding.iter().enumerate().min_by_key(|&(i, &w)| (w, i)).map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerReport {
    pub workers: Vec<ThroughputReport>,
    pub aggregate: ThroughputReport,
}

/// Sum token counts exactly; rates are the sums over the longest worker
/// wall time.
pub fn aggregate(reports: &[ThroughputReport]) -> ServerReport {
    let processed = reports.iter().map(|r| r.processed_tokens).sum();
    let generated = reports.iter().map(|r| r.generated_tokens).sum();
    let requests = reports.iter().map(|r| r.request_count).sum();
    let wall = reports.iter().map(|r| r.wall_time).fold(0.0, f64::max);
    ServerReport { workers: reports.to_vec(), aggregate: ThroughputReport::new(processed, generated, requests, wall) }
}
