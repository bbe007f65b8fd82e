//! Historical scenario database: one (prefix, continuation) pair per
//! training segment, bucketed by origin port. Built once from the
//! training split and frozen; later splits are never folded in.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, DatasetSplit, VoyageSegment};
use crate::graph::Port;

/// A stored navigation precedent: the vessel's call chain up to its
/// origin, and the realized next `H` ports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoricalScenario {
    /// Insertion order within the database; ties in retrieval scoring are
    /// broken by ascending id.
    pub id: u64,
    pub origin: Port,
    /// Call chain ending at (and including) the origin. Variable length;
    /// aligned to the query length at retrieval time.
    pub prefix: Vec<Port>,
    /// The ground-truth next `H` ports, sentinel-padded.
    pub continuation: Vec<Port>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HistoryDb {
    scenarios: Vec<HistoricalScenario>,
    buckets: BTreeMap<Port, Vec<usize>>,
    horizon: usize,
}

impl HistoryDb {
    /// Builds the database from the training split only. Segments are laid
    /// down in chronological split order; each vessel's call chain is
    /// accumulated from the origins of its training segments, so a
    /// scenario's prefix covers every call observable up to its origin.
    pub fn build(split: &DatasetSplit) -> Self {
        let horizon = split
            .train
            .first()
            .map(|s| s.future_ports.len())
            .unwrap_or(0);
        let mut chains: BTreeMap<&str, Vec<Port>> = BTreeMap::new();
        let mut scenarios = Vec::with_capacity(split.train.len());
        let mut buckets: BTreeMap<Port, Vec<usize>> = BTreeMap::new();
        for (i, seg) in split.train.iter().enumerate() {
            let chain = chains.entry(seg.imo.as_str()).or_default();
            chain.push(seg.origin);
            let idx = scenarios.len();
            scenarios.push(HistoricalScenario {
                id: i as u64,
                origin: seg.origin,
                prefix: chain.clone(),
                continuation: seg.future_ports.clone(),
            });
            buckets.entry(seg.origin).or_default().push(idx);
        }
        Self {
            scenarios,
            buckets,
            horizon,
        }
    }

    /// The database never grows after build; offering a segment always
    /// fails. This is the guard against leaking validation or test
    /// voyages into retrieval.
    pub fn offer(&mut self, _segment: &VoyageSegment) -> Result<(), DatasetError> {
        Err(DatasetError::HistoryDbFrozen)
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn scenario(&self, idx: usize) -> &HistoricalScenario {
        &self.scenarios[idx]
    }

    /// Scenario indices sharing the given origin port, in insertion order.
    pub fn bucket(&self, origin: Port) -> &[usize] {
        self.buckets.get(&origin).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn scenarios(&self) -> &[HistoricalScenario] {
        &self.scenarios
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", serde_json::to_string(&self.horizon)?)?;
        for s in &self.scenarios {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let horizon: usize = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => 0,
        };
        let mut scenarios = Vec::new();
        let mut buckets: BTreeMap<Port, Vec<usize>> = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: HistoricalScenario = serde_json::from_str(&line)?;
            buckets.entry(s.origin).or_default().push(scenarios.len());
            scenarios.push(s);
        }
        Ok(Self {
            scenarios,
            buckets,
            horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::assemble_chain;
    use crate::dataset::tests::test_vocab;

    fn split_from(chain: &[&str]) -> DatasetSplit {
        let (segs, _) = assemble_chain(chain, 3, 3);
        DatasetSplit {
            train: segs,
            val: vec![],
            test: vec![],
        }
    }

    #[test]
    fn one_scenario_per_train_segment() {
        let vocab = test_vocab();
        let split = split_from(&["A", "B", "C", "D", "E"]);
        let db = HistoryDb::build(&split);
        assert_eq!(db.len(), split.train.len());
        // segment departing C yields a scenario under origin C
        let c = vocab.index_of("C").unwrap();
        let bucket = db.bucket(c);
        assert_eq!(bucket.len(), 1);
        let sc = db.scenario(bucket[0]);
        let names: Vec<_> = sc.prefix.iter().map(|p| vocab.name_of(*p)).collect();
        assert_eq!(names, vec![Some("A"), Some("B"), Some("C")]);
        let cont: Vec<_> = sc.continuation.iter().map(|p| vocab.name_of(*p)).collect();
        assert_eq!(cont, vec![Some("D"), Some("E"), None]);
    }

    #[test]
    fn bucket_accumulates_shared_origins() {
        let split = split_from(&["A", "C", "B", "C", "D"]);
        let db = HistoryDb::build(&split);
        let vocab = test_vocab();
        let c = vocab.index_of("C").unwrap();
        assert_eq!(db.bucket(c).len(), 2);
        // every scenario retrievable through its origin bucket
        for (i, sc) in db.scenarios().iter().enumerate() {
            assert!(db.bucket(sc.origin).contains(&i));
        }
    }

    #[test]
    fn offered_segment_rejected() {
        let split = split_from(&["A", "B", "C", "D"]);
        let mut db = HistoryDb::build(&split);
        let extra = split.train[0].clone();
        assert!(matches!(
            db.offer(&extra),
            Err(DatasetError::HistoryDbFrozen)
        ));
        assert_eq!(db.len(), split.train.len());
    }

    #[test]
    fn save_load_round_trip() {
        let split = split_from(&["A", "B", "C", "D", "E"]);
        let db = HistoryDb::build(&split);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        db.save(&path).unwrap();
        let back = HistoryDb::load(&path).unwrap();
        assert_eq!(db.scenarios(), back.scenarios());
        assert_eq!(db.horizon(), back.horizon());
    }
}
