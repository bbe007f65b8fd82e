//! Per-voyage feature assembly, normalization, chronological splitting,
//! and the JSON-lines segment store.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Port, PortVocabulary};
use crate::segmentation::{AisPoint, PortEpisode, SailingInterval};

pub const KIN_DIM: usize = 6;
pub const DYN_DIM: usize = 5;
pub const STAT_DIM: usize = 5;
/// Continuous columns per modality; the remaining columns hold dense
/// categorical codes that the model embeds.
pub const KIN_CONT: usize = 5;
pub const DYN_CONT: usize = 5;
pub const STAT_CONT: usize = 3;

const CLIP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least 3 segments to split, got {0}")]
    SplitTooSmall(usize),
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
    #[error("history database is frozen; segments cannot be added after build")]
    HistoryDbFrozen,
    #[error("unknown port name `{0}` in segment record")]
    UnknownPort(String),
    #[error("segment record line {0}: {1}")]
    BadRecord(usize, String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One complete inter-port voyage with aligned feature matrices and the
/// history/target port sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct VoyageSegment {
    pub imo: String,
    /// Unix seconds of the first/last point in the sailing interval.
    pub start_time: i64,
    pub end_time: i64,
    /// Departure port (last validated call before this voyage).
    pub origin: Port,
    /// First target port; equals the sentinel when unobserved.
    pub destination: Port,
    /// Per-point kinematics: lat, lon, speed, course, unix time, vessel code.
    pub feature_kin: Vec<[f64; KIN_DIM]>,
    /// Per-point dynamics: speed, draught, heading, course, hours-to-ETA.
    pub feature_dyn: Vec<[f64; DYN_DIM]>,
    /// Static context: length, width, TEU, carrier code, vessel code.
    pub feature_stat: [f64; STAT_DIM],
    /// Validity mask; all-true at assembly, padding appears only in batches.
    pub mask: Vec<bool>,
    /// The K most recent completed calls, sentinel-padded on the left;
    /// the last entry is the origin.
    pub hist_ports: Vec<Port>,
    /// The next H destination ports, sentinel-padded at stream end.
    pub future_ports: Vec<Port>,
}

impl VoyageSegment {
    pub fn len(&self) -> usize {
        self.feature_kin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_kin.is_empty()
    }
}

/// Static vessel attributes from the `imo,length,width,TEU,crrId` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct StaticRow {
    pub imo: String,
    pub length: f64,
    pub width: f64,
    #[serde(rename = "TEU")]
    pub teu: f64,
    #[serde(rename = "crrId")]
    pub crr_id: String,
}

pub fn load_static_csv(path: &Path) -> Result<BTreeMap<String, StaticRow>, DatasetError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.deserialize::<StaticRow>() {
        let rec = rec?;
        out.insert(rec.imo.clone(), rec);
    }
    Ok(out)
}

/// Dense integer codes for vessel and carrier identifiers; 0 is reserved
/// for unknown. Codes are assigned in sorted order so any process that
/// loads the same static table derives the same book.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CodeBook {
    imo_codes: BTreeMap<String, u32>,
    crr_codes: BTreeMap<String, u32>,
}

impl CodeBook {
    pub fn build(statics: &BTreeMap<String, StaticRow>) -> Self {
        let imo_codes = statics
            .keys()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32 + 1))
            .collect();
        let mut crrs: Vec<String> = statics.values().map(|r| r.crr_id.clone()).collect();
        crrs.sort();
        crrs.dedup();
        let crr_codes = crrs
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i as u32 + 1))
            .collect();
        Self { imo_codes, crr_codes }
    }

    pub fn imo_code(&self, imo: &str) -> u32 {
        self.imo_codes.get(imo).copied().unwrap_or(0)
    }

    pub fn crr_code(&self, crr: &str) -> u32 {
        self.crr_codes.get(crr).copied().unwrap_or(0)
    }

    pub fn n_imo(&self) -> usize {
        self.imo_codes.len()
    }

    pub fn n_crr(&self) -> usize {
        self.crr_codes.len()
    }
}

/// Counters for records dropped during assembly.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub segments: usize,
    pub discarded_short: usize,
    pub skipped_no_origin: usize,
    pub skipped_missing_static: usize,
    pub skipped_unknown_port: usize,
}

/// Builds voyage segments for one vessel from its labeled sailing
/// intervals. Intervals shorter than two points are discarded; intervals
/// without a departure port or without a static-table row are skipped and
/// counted.
#[allow(clippy::too_many_arguments)]
pub fn assemble_vessel_segments(
    imo: &str,
    points: &[AisPoint],
    episodes: &[PortEpisode],
    intervals: &[SailingInterval],
    statics: &BTreeMap<String, StaticRow>,
    codes: &CodeBook,
    vocab: &PortVocabulary,
    k: usize,
    horizon: usize,
    report: &mut AssemblyReport,
) -> Vec<VoyageSegment> {
    let sentinel = vocab.sentinel();
    let chain: Vec<Option<Port>> = episodes
        .iter()
        .map(|e| vocab.index_of(&e.port_name))
        .collect();
    let mut out = Vec::new();
    for iv in intervals {
        let span = iv.end_idx - iv.start_idx + 1;
        if span < 2 {
            report.discarded_short += 1;
            continue;
        }
        if iv.pre_port.is_none() {
            report.skipped_no_origin += 1;
            continue;
        }
        let Some(stat) = statics.get(imo) else {
            report.skipped_missing_static += 1;
            continue;
        };
        // index of the episode preceding this interval
        let e = episodes
            .iter()
            .take_while(|ep| ep.end_idx < iv.start_idx)
            .count();
        debug_assert!(e >= 1);
        let Some(origin) = chain[e - 1] else {
            report.skipped_unknown_port += 1;
            continue;
        };
        let hist_ports: Vec<Port> = (0..k)
            .map(|j| {
                let idx = e as isize - k as isize + j as isize;
                if idx >= 0 {
                    chain[idx as usize].unwrap_or(sentinel)
                } else {
                    sentinel
                }
            })
            .collect();
        let future_ports: Vec<Port> = (0..horizon)
            .map(|j| chain.get(e + j).copied().flatten().unwrap_or(sentinel))
            .collect();
        let imo_code = codes.imo_code(imo) as f64;
        let crr_code = codes.crr_code(&stat.crr_id) as f64;
        let pts = &points[iv.start_idx..=iv.end_idx];
        let feature_kin = pts
            .iter()
            .map(|p| {
                [
                    p.lat,
                    p.lon,
                    p.speed,
                    p.course,
                    p.timestamp.timestamp() as f64,
                    imo_code,
                ]
            })
            .collect();
        let feature_dyn = pts
            .iter()
            .map(|p| {
                let eta_rel = p
                    .eta
                    .map(|e| (e - p.timestamp).num_seconds() as f64 / 3600.0)
                    .unwrap_or(0.0);
                [p.speed, p.draught, p.heading, p.course, eta_rel]
            })
            .collect();
        out.push(VoyageSegment {
            imo: imo.to_string(),
            start_time: pts[0].timestamp.timestamp(),
            end_time: pts[pts.len() - 1].timestamp.timestamp(),
            origin,
            destination: future_ports[0],
            feature_kin,
            feature_dyn,
            feature_stat: [stat.length, stat.width, stat.teu, crr_code, imo_code],
            mask: vec![true; span],
            hist_ports,
            future_ports,
        });
        report.segments += 1;
    }
    out
}

/// Per-column mean and standard deviation, train-split only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

impl ColumnStats {
    fn from_values(values: impl Iterator<Item = f64> + Clone) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0;
        for v in values.clone() {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 1.0,
                constant: true,
            };
        }
        let mean = sum / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        Self {
            mean,
            std,
            constant: std <= 0.0 || !std.is_finite(),
        }
    }

    fn apply(&self, v: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            ((v - self.mean) / self.std).clamp(-CLIP, CLIP)
        }
    }

    fn invert(&self, z: f64) -> f64 {
        if self.constant {
            self.mean
        } else {
            z * self.std + self.mean
        }
    }
}

/// Z-score parameters for every continuous feature column.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormalizationStats {
    pub kin: Vec<ColumnStats>,
    pub dyn_: Vec<ColumnStats>,
    pub stat: Vec<ColumnStats>,
}

impl NormalizationStats {
    pub fn compute(train: &[VoyageSegment]) -> Self {
        let kin = (0..KIN_CONT)
            .map(|c| {
                ColumnStats::from_values(
                    train
                        .iter()
                        .flat_map(move |s| s.feature_kin.iter().map(move |row| row[c])),
                )
            })
            .collect();
        let dyn_ = (0..DYN_CONT)
            .map(|c| {
                ColumnStats::from_values(
                    train
                        .iter()
                        .flat_map(move |s| s.feature_dyn.iter().map(move |row| row[c])),
                )
            })
            .collect();
        let stat = (0..STAT_CONT)
            .map(|c| ColumnStats::from_values(train.iter().map(move |s| s.feature_stat[c])))
            .collect();
        Self { kin, dyn_, stat }
    }

    /// Z-scores and clips every continuous column in place; categorical
    /// code columns pass through untouched.
    pub fn normalize(&self, segments: &mut [VoyageSegment]) {
        for s in segments {
            for row in &mut s.feature_kin {
                for c in 0..KIN_CONT {
                    row[c] = self.kin[c].apply(row[c]);
                }
            }
            for row in &mut s.feature_dyn {
                for c in 0..DYN_CONT {
                    row[c] = self.dyn_[c].apply(row[c]);
                }
            }
            for c in 0..STAT_CONT {
                s.feature_stat[c] = self.stat[c].apply(s.feature_stat[c]);
            }
        }
    }

    pub fn normalize_kin_value(&self, col: usize, v: f64) -> f64 {
        self.kin[col].apply(v)
    }

    pub fn denormalize_kin_value(&self, col: usize, z: f64) -> f64 {
        self.kin[col].invert(z)
    }
}

/// Chronologically ordered train/val/test partition.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<VoyageSegment>,
    pub val: Vec<VoyageSegment>,
    pub test: Vec<VoyageSegment>,
}

/// Sorts by start time and cuts `train = first ⌊r0·n⌋`,
/// `val = next ⌊r1·n⌋`, `test = remainder`.
pub fn chronological_split(
    mut segments: Vec<VoyageSegment>,
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit, DatasetError> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(total));
    }
    let n = segments.len();
    if n < 3 {
        return Err(DatasetError::SplitTooSmall(n));
    }
    segments.sort_by(|a, b| {
        a.start_time
            .cmp(&b.start_time)
            .then_with(|| a.imo.cmp(&b.imo))
            .then_with(|| a.end_time.cmp(&b.end_time))
    });
    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_val = (ratios.1 * n as f64).floor() as usize;
    let mut it = segments.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    Ok(DatasetSplit { train, val, test })
}

fn fmt_time(t: i64) -> String {
    Utc.timestamp_opt(t, 0)
        .single()
        .map(|d| d.format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| t.to_string())
}

fn parse_time(s: &str) -> Option<i64> {
    chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .ok()
        .map(|n| n.and_utc().timestamp())
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.timestamp()))
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    imo: String,
    start_time: String,
    end_time: String,
    origin: String,
    destination: Option<String>,
    feature_kin: Vec<[f64; KIN_DIM]>,
    feature_dyn: Vec<[f64; DYN_DIM]>,
    feature_stat: [f64; STAT_DIM],
    hist_ports: Vec<Option<String>>,
    future_ports: Vec<Option<String>>,
}

fn port_to_name(p: Port, vocab: &PortVocabulary) -> Option<String> {
    vocab.name_of(p).map(|s| s.to_string())
}

fn name_to_port(n: &Option<String>, vocab: &PortVocabulary) -> Result<Port, DatasetError> {
    match n {
        None => Ok(vocab.sentinel()),
        Some(name) => vocab
            .index_of(name)
            .ok_or_else(|| DatasetError::UnknownPort(name.clone())),
    }
}

pub fn write_segments_jsonl<W: Write>(
    mut w: W,
    segments: &[VoyageSegment],
    vocab: &PortVocabulary,
) -> Result<(), DatasetError> {
    for s in segments {
        let rec = SegmentRecord {
            imo: s.imo.clone(),
            start_time: fmt_time(s.start_time),
            end_time: fmt_time(s.end_time),
            origin: port_to_name(s.origin, vocab).unwrap_or_default(),
            destination: port_to_name(s.destination, vocab),
            feature_kin: s.feature_kin.clone(),
            feature_dyn: s.feature_dyn.clone(),
            feature_stat: s.feature_stat,
            hist_ports: s.hist_ports.iter().map(|p| port_to_name(*p, vocab)).collect(),
            future_ports: s
                .future_ports
                .iter()
                .map(|p| port_to_name(*p, vocab))
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_segments_jsonl<R: BufRead>(
    r: R,
    vocab: &PortVocabulary,
) -> Result<Vec<VoyageSegment>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord = serde_json::from_str(&line)
            .map_err(|e| DatasetError::BadRecord(i + 1, e.to_string()))?;
        let start_time = parse_time(&rec.start_time).ok_or_else(|| {
            DatasetError::BadRecord(i + 1, format!("bad start_time {}", rec.start_time))
        })?;
        let end_time = parse_time(&rec.end_time)
            .ok_or_else(|| DatasetError::BadRecord(i + 1, format!("bad end_time {}", rec.end_time)))?;
        let len = rec.feature_kin.len();
        out.push(VoyageSegment {
            origin: name_to_port(&Some(rec.origin.clone()), vocab)?,
            destination: name_to_port(&rec.destination, vocab)?,
            hist_ports: rec
                .hist_ports
                .iter()
                .map(|n| name_to_port(n, vocab))
                .collect::<Result<_, _>>()?,
            future_ports: rec
                .future_ports
                .iter()
                .map(|n| name_to_port(n, vocab))
                .collect::<Result<_, _>>()?,
            imo: rec.imo,
            start_time,
            end_time,
            feature_kin: rec.feature_kin,
            feature_dyn: rec.feature_dyn,
            feature_stat: rec.feature_stat,
            mask: vec![true; len],
        });
    }
    Ok(out)
}

pub fn save_segments(
    path: &Path,
    segments: &[VoyageSegment],
    vocab: &PortVocabulary,
) -> Result<(), DatasetError> {
    let f = std::fs::File::create(path)?;
    write_segments_jsonl(std::io::BufWriter::new(f), segments, vocab)
}

pub fn load_segments(path: &Path, vocab: &PortVocabulary) -> Result<Vec<VoyageSegment>, DatasetError> {
    let f = std::fs::File::open(path)?;
    read_segments_jsonl(std::io::BufReader::new(f), vocab)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geo::ZoneType;
    use crate::segmentation::{extract_episodes_from_labels, label_sailing_intervals, ZoneLabel};

    pub(crate) fn test_vocab() -> PortVocabulary {
        PortVocabulary::build(&["A".into(), "B".into(), "C".into(), "D".into(), "E".into()])
            .unwrap()
    }

    fn mk_point(imo: &str, t: i64, lat: f64, lon: f64) -> AisPoint {
        AisPoint {
            imo: imo.into(),
            timestamp: Utc.timestamp_opt(t, 0).unwrap(),
            lat,
            lon,
            speed: 12.0,
            course: 90.0,
            heading: 91.0,
            draught: 9.5,
            destination_text: None,
            eta: Some(Utc.timestamp_opt(t + 7200, 0).unwrap()),
        }
    }

    fn statics_for(imos: &[&str]) -> BTreeMap<String, StaticRow> {
        imos.iter()
            .map(|imo| {
                (
                    imo.to_string(),
                    StaticRow {
                        imo: imo.to_string(),
                        length: 200.0,
                        width: 32.0,
                        teu: 8000.0,
                        crr_id: "CRR1".into(),
                    },
                )
            })
            .collect()
    }

    /// Builds a synthetic labeled stream visiting the given ports in
    /// order with 3-point sailing gaps.
    fn stream_for_chain(chain: &[&str]) -> (Vec<AisPoint>, Vec<ZoneLabel>) {
        let mut points = Vec::new();
        let mut labels: Vec<ZoneLabel> = Vec::new();
        let mut t = 0i64;
        for (i, port) in chain.iter().enumerate() {
            for _ in 0..2 {
                points.push(mk_point("V1", t, 1.0, 2.0));
                labels.push(Some((ZoneType::Berth, port.to_string())));
                t += 3600;
            }
            if i + 1 < chain.len() {
                for j in 0..3 {
                    let drift = (i * 3 + j) as f64 * 0.3;
                    points.push(mk_point("V1", t, 10.0 + drift, 20.0 + drift));
                    labels.push(None);
                    t += 3600;
                }
            }
        }
        (points, labels)
    }

    pub(crate) fn assemble_chain(
        chain: &[&str],
        k: usize,
        h: usize,
    ) -> (Vec<VoyageSegment>, AssemblyReport) {
        let vocab = test_vocab();
        let (points, labels) = stream_for_chain(chain);
        let episodes = extract_episodes_from_labels(&labels);
        let intervals = label_sailing_intervals(points.len(), &episodes).unwrap();
        let statics = statics_for(&["V1"]);
        let codes = CodeBook::build(&statics);
        let mut report = AssemblyReport::default();
        let segs = assemble_vessel_segments(
            "V1", &points, &episodes, &intervals, &statics, &codes, &vocab, k, h, &mut report,
        );
        (segs, report)
    }

    #[test]
    fn five_call_chain_histories_and_targets() {
        let vocab = test_vocab();
        let (segs, _) = assemble_chain(&["A", "B", "C", "D", "E"], 3, 3);
        assert_eq!(segs.len(), 4);
        // segment departing C is the third
        let s = &segs[2];
        assert_eq!(s.origin, vocab.index_of("C").unwrap());
        let names: Vec<_> = s.hist_ports.iter().map(|p| vocab.name_of(*p)).collect();
        assert_eq!(names, vec![Some("A"), Some("B"), Some("C")]);
        let fut: Vec<_> = s.future_ports.iter().map(|p| vocab.name_of(*p)).collect();
        assert_eq!(fut, vec![Some("D"), Some("E"), None]);
        assert_eq!(s.destination, vocab.index_of("D").unwrap());
    }

    #[test]
    fn first_segment_left_padded_with_sentinel() {
        let vocab = test_vocab();
        let (segs, _) = assemble_chain(&["A", "B"], 3, 3);
        assert_eq!(segs.len(), 1);
        let s = &segs[0];
        assert_eq!(s.hist_ports[0], vocab.sentinel());
        assert_eq!(s.hist_ports[1], vocab.sentinel());
        assert_eq!(s.hist_ports[2], vocab.index_of("A").unwrap());
        assert_eq!(s.future_ports[0], vocab.index_of("B").unwrap());
        assert_eq!(s.future_ports[1], vocab.sentinel());
    }

    #[test]
    fn single_point_interval_discarded() {
        let vocab = test_vocab();
        // berth A, 1 sailing point, berth B
        let labels: Vec<ZoneLabel> = vec![
            Some((ZoneType::Berth, "A".into())),
            None,
            Some((ZoneType::Berth, "B".into())),
        ];
        let points: Vec<AisPoint> = (0..3).map(|i| mk_point("V1", i * 3600, 0.0, 0.0)).collect();
        let episodes = extract_episodes_from_labels(&labels);
        let intervals = label_sailing_intervals(points.len(), &episodes).unwrap();
        let statics = statics_for(&["V1"]);
        let codes = CodeBook::build(&statics);
        let mut report = AssemblyReport::default();
        let segs = assemble_vessel_segments(
            "V1", &points, &episodes, &intervals, &statics, &codes, &vocab, 3, 3, &mut report,
        );
        assert!(segs.is_empty());
        assert_eq!(report.discarded_short, 1);
    }

    #[test]
    fn missing_static_row_skips_segment() {
        let vocab = test_vocab();
        let (points, labels) = stream_for_chain(&["A", "B"]);
        let episodes = extract_episodes_from_labels(&labels);
        let intervals = label_sailing_intervals(points.len(), &episodes).unwrap();
        let statics = statics_for(&["OTHER"]);
        let codes = CodeBook::build(&statics);
        let mut report = AssemblyReport::default();
        let segs = assemble_vessel_segments(
            "V1", &points, &episodes, &intervals, &statics, &codes, &vocab, 3, 3, &mut report,
        );
        assert!(segs.is_empty());
        assert_eq!(report.skipped_missing_static, 1);
    }

    #[test]
    fn feature_schema_dimensions() {
        let (segs, _) = assemble_chain(&["A", "B", "C"], 3, 3);
        for s in &segs {
            assert_eq!(s.feature_kin[0].len(), KIN_DIM);
            assert_eq!(s.feature_dyn[0].len(), DYN_DIM);
            assert_eq!(s.feature_stat.len(), STAT_DIM);
            assert_eq!(s.mask.len(), s.len());
            assert!(s.mask.iter().all(|m| *m));
            // eta-relative hours is 2h in the fixture
            assert!((s.feature_dyn[0][4] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_zscore_and_clip() {
        let (mut segs, _) = assemble_chain(&["A", "B", "C", "D", "E"], 3, 3);
        let stats = NormalizationStats::compute(&segs);
        let m = stats.kin[0].mean;
        let sd = stats.kin[0].std;
        assert!(sd > 0.0);
        assert!((stats.normalize_kin_value(0, m + 3.0 * sd) - 3.0).abs() < 1e-9);
        assert_eq!(stats.normalize_kin_value(0, m + 50.0 * sd), CLIP);
        // an outlier arriving after stats were frozen clips to the bound
        segs[0].feature_kin[0][0] = m + 1e6 * sd;
        stats.normalize(&mut segs);
        assert_eq!(segs[0].feature_kin[0][0], CLIP);
        // categorical columns untouched
        assert!(segs[0].feature_kin[0][5] >= 1.0);
    }

    #[test]
    fn constant_column_becomes_zero() {
        let (mut segs, _) = assemble_chain(&["A", "B"], 3, 3);
        for row in segs.iter_mut().flat_map(|s| s.feature_dyn.iter_mut()) {
            row[1] = 9.5;
        }
        let stats = NormalizationStats::compute(&segs);
        assert!(stats.dyn_[1].constant);
        stats.normalize(&mut segs);
        assert!(segs[0].feature_dyn.iter().all(|r| r[1] == 0.0));
    }

    #[test]
    fn normalization_round_trip() {
        let (segs, _) = assemble_chain(&["A", "B", "C", "D"], 3, 3);
        let stats = NormalizationStats::compute(&segs);
        for s in &segs {
            for row in &s.feature_kin {
                for c in 0..KIN_CONT {
                    let z = stats.normalize_kin_value(c, row[c]);
                    if z.abs() < CLIP {
                        let back = stats.denormalize_kin_value(c, z);
                        let denom = row[c].abs().max(1.0);
                        assert!((back - row[c]).abs() / denom < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn split_ratios_and_order() {
        let (mut segs, _) = assemble_chain(&["A", "B", "C", "D", "E"], 3, 3);
        // replicate to 100 segments with shifted times
        let base = segs.clone();
        for i in 1..25 {
            for s in &base {
                let mut s2 = s.clone();
                s2.start_time += i as i64 * 1_000_000;
                s2.end_time += i as i64 * 1_000_000;
                segs.push(s2);
            }
        }
        assert_eq!(segs.len(), 100);
        let split = chronological_split(segs, (0.70, 0.15, 0.15)).unwrap();
        assert_eq!(split.train.len(), 70);
        assert_eq!(split.val.len(), 15);
        assert_eq!(split.test.len(), 15);
        let max_train = split.train.iter().map(|s| s.start_time).max().unwrap();
        let min_val = split.val.iter().map(|s| s.start_time).min().unwrap();
        let min_test = split.test.iter().map(|s| s.start_time).min().unwrap();
        assert!(max_train <= min_val);
        assert!(min_val <= min_test);
    }

    #[test]
    fn split_floor_arithmetic() {
        let (segs, _) = assemble_chain(&["A", "B", "C", "D", "E"], 3, 3);
        let mut all = Vec::new();
        for i in 0..10 {
            let mut s = segs[i % segs.len()].clone();
            s.start_time += i as i64 * 10_000;
            all.push(s);
        }
        let split = chronological_split(all, (0.70, 0.15, 0.15)).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (7, 1, 2)
        );
    }

    #[test]
    fn split_too_small() {
        let (segs, _) = assemble_chain(&["A", "B"], 3, 3);
        assert!(matches!(
            chronological_split(segs, (0.70, 0.15, 0.15)),
            Err(DatasetError::SplitTooSmall(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let vocab = test_vocab();
        let (segs, _) = assemble_chain(&["A", "B", "C", "D"], 3, 3);
        let mut buf = Vec::new();
        write_segments_jsonl(&mut buf, &segs, &vocab).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        // sentinel labels serialize as null, names as strings
        assert!(text.contains("\"origin\":\"A\""));
        assert!(text.contains("null"));
        let back = read_segments_jsonl(&buf[..], &vocab).unwrap();
        assert_eq!(segs, back);
    }
}
