//! Port vocabulary, directed shipping graph, and exact-step reachability.
//!
//! The graph records which port-to-port legs have been observed at least
//! once. Reachability queries answer "which ports can be reached from an
//! origin in exactly `h` legs", which drives the decoder's feasibility
//! masks.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use thiserror::Error;

/// 1-based port index. The sentinel (padding/unknown) token is
/// `vocabulary len + 1` and is never a graph node.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Port(pub u32);

impl fmt::Debug for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Port({})", self.0)
    }
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot build a vocabulary from an empty port list")]
    EmptyVocabulary,
    #[error("port index {0} out of range 1..={1}")]
    PortOutOfRange(u32, u32),
    #[error("reachability step must be >= 1")]
    ZeroStep,
    #[error("malformed graph file: {0}")]
    MalformedGraphFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bijective mapping between port names and dense 1-based indices, plus the
/// sentinel token used for padding and unknown entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortVocabulary {
    names: Vec<String>,
    index: BTreeMap<String, Port>,
}

impl PortVocabulary {
    /// Deduplicates and sorts the given names, then assigns indices
    /// 1..=n in lexicographic order. The sentinel is n+1.
    pub fn build(port_names: &[String]) -> Result<Self, GraphError> {
        let mut names: Vec<String> = port_names.to_vec();
        names.sort();
        names.dedup();
        if names.is_empty() {
            return Err(GraphError::EmptyVocabulary);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), Port(i as u32 + 1)))
            .collect();
        Ok(Self { names, index })
    }

    pub fn len(&self) -> u32 {
        self.names.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn sentinel(&self) -> Port {
        Port(self.len() + 1)
    }

    pub fn index_of(&self, name: &str) -> Option<Port> {
        self.index.get(name).copied()
    }

    pub fn name_of(&self, port: Port) -> Option<&str> {
        if port.0 == 0 || port.0 > self.len() {
            None
        } else {
            Some(&self.names[port.0 as usize - 1])
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, port: Port) -> bool {
        port.0 >= 1 && port.0 <= self.len()
    }

    pub fn write_names<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for n in &self.names {
            writeln!(w, "{n}")?;
        }
        Ok(())
    }

    pub fn read_names<R: BufRead>(r: R) -> Result<Self, GraphError> {
        let mut names = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                names.push(line.trim().to_string());
            }
        }
        Self::build(&names)
    }
}

/// Boolean vector over non-sentinel ports marking the set reachable from
/// `origin` in exactly `step` legs. `bits[k-1]` corresponds to port `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilityMask {
    pub origin: Port,
    pub step: u32,
    pub bits: Vec<bool>,
    /// True when the exact reachable set was empty and the all-ones
    /// fallback was substituted to keep decoding total.
    pub is_fallback: bool,
}

impl ReachabilityMask {
    pub fn contains(&self, port: Port) -> bool {
        port.0 >= 1 && (port.0 as usize) <= self.bits.len() && self.bits[port.0 as usize - 1]
    }

    pub fn ports(&self) -> impl Iterator<Item = Port> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| Port(i as u32 + 1))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Directed port connectivity with cached exact-step reachability.
///
/// Immutable after build; the cache uses interior mutability with
/// idempotent writes, so shared read access is safe.
#[derive(Debug)]
pub struct AdjacencyGraph {
    size: u32,
    edges: Vec<bool>,
    out_neighbors: Vec<Vec<u32>>,
    cache_max_step: u32,
    reach_cache: Mutex<BTreeMap<(u32, u32), Vec<bool>>>,
    skipped_pairs: usize,
}

impl AdjacencyGraph {
    /// Builds the edge set from observed (origin, destination) voyage
    /// pairs. Duplicate pairs are idempotent; pairs touching the sentinel
    /// or out-of-range indices are skipped and counted.
    pub fn build(pairs: &[(Port, Port)], vocab: &PortVocabulary) -> Self {
        let n = vocab.len();
        let mut edges = vec![false; (n as usize) * (n as usize)];
        let mut skipped = 0usize;
        for &(a, b) in pairs {
            if !vocab.contains(a) || !vocab.contains(b) {
                skipped += 1;
                continue;
            }
            edges[(a.0 as usize - 1) * n as usize + (b.0 as usize - 1)] = true;
        }
        if skipped > 0 {
            log::warn!("adjacency build skipped {skipped} pair(s) with sentinel or out-of-range indices");
        }
        let out_neighbors = (0..n as usize)
            .map(|i| {
                (0..n as usize)
                    .filter(|&j| edges[i * n as usize + j])
                    .map(|j| j as u32 + 1)
                    .collect()
            })
            .collect();
        Self {
            size: n,
            edges,
            out_neighbors,
            cache_max_step: 3,
            reach_cache: Mutex::new(BTreeMap::new()),
            skipped_pairs: skipped,
        }
    }

    /// Maximum step for which reachability results are cached.
    pub fn with_cache_max_step(mut self, h: u32) -> Self {
        self.cache_max_step = h;
        self
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn skipped_pairs(&self) -> usize {
        self.skipped_pairs
    }

    pub fn has_edge(&self, from: Port, to: Port) -> bool {
        if from.0 == 0 || from.0 > self.size || to.0 == 0 || to.0 > self.size {
            return false;
        }
        self.edges[(from.0 as usize - 1) * self.size as usize + (to.0 as usize - 1)]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|b| **b).count()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Port, Port)> + '_ {
        let n = self.size as usize;
        self.edges.iter().enumerate().filter(|(_, b)| **b).map(move |(i, _)| {
            let from = i / n;
            let to = i % n;
            (Port(from as u32 + 1), Port(to as u32 + 1))
        })
    }

    /// Ports reachable from `origin` in exactly `h` legs, i.e. endpoints of
    /// length-`h` walks. Computed by repeated frontier expansion over the
    /// out-neighbor lists; results for small `h` are cached.
    pub fn reachable_set(&self, origin: Port, h: u32) -> Result<ReachabilityMask, GraphError> {
        if origin.0 == 0 || origin.0 > self.size {
            return Err(GraphError::PortOutOfRange(origin.0, self.size));
        }
        if h == 0 {
            return Err(GraphError::ZeroStep);
        }
        if h <= self.cache_max_step {
            if let Some(bits) = self.reach_cache.lock().unwrap().get(&(origin.0, h)) {
                return Ok(ReachabilityMask {
                    origin,
                    step: h,
                    bits: bits.clone(),
                    is_fallback: false,
                });
            }
        }
        let bits = self.expand_frontier(origin, h);
        if h <= self.cache_max_step {
            self.reach_cache
                .lock()
                .unwrap()
                .entry((origin.0, h))
                .or_insert_with(|| bits.clone());
        }
        Ok(ReachabilityMask {
            origin,
            step: h,
            bits,
            is_fallback: false,
        })
    }

    /// Decoder-facing mask for step `h`. When the exact reachable set is
    /// empty the full non-sentinel vocabulary is substituted so decoding
    /// stays total; the substitution is flagged and logged.
    pub fn decoding_mask(&self, origin: Port, h: u32) -> Result<ReachabilityMask, GraphError> {
        let mask = self.reachable_set(origin, h)?;
        if mask.is_empty() {
            log::warn!(
                "empty reachable set for origin {} at step {h}; falling back to the full port set",
                origin.0
            );
            return Ok(ReachabilityMask {
                origin,
                step: h,
                bits: vec![true; self.size as usize],
                is_fallback: true,
            });
        }
        Ok(mask)
    }

    fn expand_frontier(&self, origin: Port, h: u32) -> Vec<bool> {
        let n = self.size as usize;
        let mut frontier = vec![false; n];
        frontier[origin.0 as usize - 1] = true;
        let mut next = vec![false; n];
        for _ in 0..h {
            next.iter_mut().for_each(|b| *b = false);
            for i in 0..n {
                if frontier[i] {
                    for &j in &self.out_neighbors[i] {
                        next[j as usize - 1] = true;
                    }
                }
            }
            std::mem::swap(&mut frontier, &mut next);
        }
        frontier
    }

    /// Writes the edge list as `#ports=<n>` followed by one
    /// `origin<TAB>dest` line per edge.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "#ports={}", self.size)?;
        for (a, b) in self.edges() {
            writeln!(w, "{}\t{}", a.0, b.0)?;
        }
        Ok(())
    }

    pub fn read_edge_list<R: BufRead>(r: R) -> Result<Self, GraphError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| GraphError::MalformedGraphFile("empty file".into()))??;
        let n: u32 = header
            .strip_prefix("#ports=")
            .ok_or_else(|| GraphError::MalformedGraphFile(format!("bad header: {header}")))?
            .trim()
            .parse()
            .map_err(|e| GraphError::MalformedGraphFile(format!("bad port count: {e}")))?;
        let mut edges = vec![false; (n as usize) * (n as usize)];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split('\t');
            let a: u32 = it
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| GraphError::MalformedGraphFile(format!("bad edge line: {line}")))?;
            let b: u32 = it
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| GraphError::MalformedGraphFile(format!("bad edge line: {line}")))?;
            if a == 0 || a > n || b == 0 || b > n {
                return Err(GraphError::MalformedGraphFile(format!(
                    "edge {a}->{b} out of range for {n} ports"
                )));
            }
            edges[(a as usize - 1) * n as usize + (b as usize - 1)] = true;
        }
        let out_neighbors = (0..n as usize)
            .map(|i| {
                (0..n as usize)
                    .filter(|&j| edges[i * n as usize + j])
                    .map(|j| j as u32 + 1)
                    .collect()
            })
            .collect();
        Ok(Self {
            size: n,
            edges,
            out_neighbors,
            cache_max_step: 3,
            reach_cache: Mutex::new(BTreeMap::new()),
            skipped_pairs: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let f = std::fs::File::create(path)?;
        self.write_edge_list(std::io::BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let f = std::fs::File::open(path)?;
        Self::read_edge_list(BufReader::new(f))
    }
}
