//! Voyage segmentation: classify AIS points against geofences, detect
//! berth-validated port episodes, and label the sailing intervals between
//! them with previous/next port names.

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::Deserialize;
use thiserror::Error;

use crate::geo::{GeofenceSet, ZoneType};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("point {index}: latitude {lat} out of [-90, 90]")]
    BadLatitude { index: usize, lat: f64 },
    #[error("point {index}: longitude {lon} out of [-180, 180]")]
    BadLongitude { index: usize, lon: f64 },
    #[error("episodes overlap: [{0}..{1}] and [{2}..{3}]")]
    OverlappingEpisodes(usize, usize, usize, usize),
    #[error("timestamp parse error at row {row}: {value}")]
    BadTimestamp { row: usize, value: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One AIS report. Fields mirror the raw CSV schema.
#[derive(Debug, Clone)]
pub struct AisPoint {
    pub imo: String,
    pub timestamp: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub speed: f64,
    pub course: f64,
    pub heading: f64,
    pub draught: f64,
    pub destination_text: Option<String>,
    pub eta: Option<DateTime<Utc>>,
}

#[derive(Debug, Deserialize)]
struct AisRow {
    #[serde(rename = "IMO")]
    imo: String,
    timestamp: String,
    latitude: f64,
    longitude: f64,
    speed: f64,
    course: f64,
    heading: f64,
    draught: f64,
    destination: String,
    #[serde(rename = "ETA")]
    eta: String,
}

fn parse_utc(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|d| d.with_timezone(&Utc))
        .or_else(|| {
            chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
                .ok()
                .map(|n| n.and_utc())
        })
}

/// Reads one vessel's AIS CSV, sorts by time, and drops duplicate
/// timestamps (keeping the first). Returns the points and the number of
/// duplicates dropped.
pub fn load_ais_csv(path: &Path) -> Result<(Vec<AisPoint>, usize), SegmentationError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    for (i, rec) in rdr.deserialize::<AisRow>().enumerate() {
        let rec = rec?;
        let ts = parse_utc(&rec.timestamp).ok_or(SegmentationError::BadTimestamp {
            row: i + 2,
            value: rec.timestamp.clone(),
        })?;
        if !(-90.0..=90.0).contains(&rec.latitude) {
            return Err(SegmentationError::BadLatitude {
                index: i,
                lat: rec.latitude,
            });
        }
        if !(-180.0..=180.0).contains(&rec.longitude) {
            return Err(SegmentationError::BadLongitude {
                index: i,
                lon: rec.longitude,
            });
        }
        points.push(AisPoint {
            imo: rec.imo,
            timestamp: ts,
            lat: rec.latitude,
            lon: rec.longitude,
            speed: rec.speed,
            course: rec.course,
            heading: rec.heading,
            draught: rec.draught,
            destination_text: if rec.destination.is_empty() {
                None
            } else {
                Some(rec.destination)
            },
            eta: if rec.eta.is_empty() {
                None
            } else {
                parse_utc(&rec.eta)
            },
        });
    }
    points.sort_by_key(|p| p.timestamp);
    let before = points.len();
    points.dedup_by_key(|p| p.timestamp);
    let dropped = before - points.len();
    Ok((points, dropped))
}

/// Zone classification of one point: the zone type and the owning port.
pub type ZoneLabel = Option<(ZoneType, String)>;

pub fn label_points(points: &[AisPoint], fences: &GeofenceSet) -> Vec<ZoneLabel> {
    points
        .iter()
        .map(|p| fences.locate(p.lon, p.lat).map(|(z, n)| (z, n.to_string())))
        .collect()
}

/// A berth-validated in-port stay. Indices are 0-based and inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortEpisode {
    pub start_idx: usize,
    pub end_idx: usize,
    pub port_name: String,
    pub saw_berth: bool,
}

/// A continuous stretch of points outside all geofences. Indices are
/// 0-based and inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SailingInterval {
    pub start_idx: usize,
    pub end_idx: usize,
    pub pre_port: Option<String>,
    pub next_port: Option<String>,
}

/// Scans zone labels in time order. An episode opens on the first zoned
/// point, keeps the port of that opening point, tracks berth contact, and
/// closes on the first unzoned point. Episodes that never touch a berth
/// are discarded; an episode still open at stream end is emitted only if
/// it saw a berth.
pub fn extract_episodes_from_labels(labels: &[ZoneLabel]) -> Vec<PortEpisode> {
    let mut episodes = Vec::new();
    let mut in_episode = false;
    let mut seen_berth = false;
    let mut start_idx = 0usize;
    let mut cur_port = String::new();
    for (t, label) in labels.iter().enumerate() {
        match label {
            Some((zone, port)) if !in_episode => {
                in_episode = true;
                start_idx = t;
                cur_port = port.clone();
                seen_berth = *zone == ZoneType::Berth;
            }
            Some((zone, _)) => {
                if *zone == ZoneType::Berth {
                    seen_berth = true;
                }
            }
            None if in_episode => {
                if seen_berth {
                    episodes.push(PortEpisode {
                        start_idx,
                        end_idx: t - 1,
                        port_name: cur_port.clone(),
                        saw_berth: true,
                    });
                }
                in_episode = false;
                seen_berth = false;
            }
            None => {}
        }
    }
    if in_episode && seen_berth {
        episodes.push(PortEpisode {
            start_idx,
            end_idx: labels.len() - 1,
            port_name: cur_port,
            saw_berth: true,
        });
    }
    episodes
}

pub fn extract_episodes(points: &[AisPoint], fences: &GeofenceSet) -> Vec<PortEpisode> {
    extract_episodes_from_labels(&label_points(points, fences))
}

/// Complements the episode spans over `[0..stream_len)` and labels each
/// interval with the ports of the adjacent episodes.
pub fn label_sailing_intervals(
    stream_len: usize,
    episodes: &[PortEpisode],
) -> Result<Vec<SailingInterval>, SegmentationError> {
    for w in episodes.windows(2) {
        if w[1].start_idx <= w[0].end_idx {
            return Err(SegmentationError::OverlappingEpisodes(
                w[0].start_idx,
                w[0].end_idx,
                w[1].start_idx,
                w[1].end_idx,
            ));
        }
    }
    let mut intervals = Vec::new();
    let mut cursor = 0usize;
    for (i, ep) in episodes.iter().enumerate() {
        if ep.start_idx > cursor {
            intervals.push(SailingInterval {
                start_idx: cursor,
                end_idx: ep.start_idx - 1,
                pre_port: if i > 0 {
                    Some(episodes[i - 1].port_name.clone())
                } else {
                    None
                },
                next_port: Some(ep.port_name.clone()),
            });
        }
        cursor = ep.end_idx + 1;
    }
    if cursor < stream_len {
        intervals.push(SailingInterval {
            start_idx: cursor,
            end_idx: stream_len - 1,
            pre_port: episodes.last().map(|e| e.port_name.clone()),
            next_port: None,
        });
    }
    Ok(intervals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(zone: ZoneType) -> ZoneLabel {
        Some((zone, "P".to_string()))
    }

    fn zp(zone: ZoneType, port: &str) -> ZoneLabel {
        Some((zone, port.to_string()))
    }

    #[test]
    fn episode_requires_berth_contact() {
        use ZoneType::*;
        let labels = vec![z(Parking), z(Pilot), None];
        assert!(extract_episodes_from_labels(&labels).is_empty());
    }

    #[test]
    fn episode_spans_zoned_run() {
        use ZoneType::*;
        let labels = vec![None, z(Parking), z(Pilot), z(Berth), z(Pilot), None];
        let eps = extract_episodes_from_labels(&labels);
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start_idx, eps[0].end_idx), (1, 4));
        assert!(eps[0].saw_berth);
    }

    #[test]
    fn episode_open_at_stream_end_is_emitted_with_berth() {
        use ZoneType::*;
        let labels = vec![z(Berth), z(Berth)];
        let eps = extract_episodes_from_labels(&labels);
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start_idx, eps[0].end_idx), (0, 1));
    }

    #[test]
    fn episode_keeps_opening_port() {
        use ZoneType::*;
        let labels = vec![zp(Parking, "A"), zp(Berth, "B"), None];
        let eps = extract_episodes_from_labels(&labels);
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].port_name, "A");
    }

    #[test]
    fn intervals_complement_episodes() {
        // episodes at 0-based [2..4] and [8..9] over a 12-point stream
        let eps = vec![
            PortEpisode {
                start_idx: 2,
                end_idx: 4,
                port_name: "A".into(),
                saw_berth: true,
            },
            PortEpisode {
                start_idx: 8,
                end_idx: 9,
                port_name: "B".into(),
                saw_berth: true,
            },
        ];
        let ivs = label_sailing_intervals(12, &eps).unwrap();
        assert_eq!(ivs.len(), 3);
        assert_eq!((ivs[0].start_idx, ivs[0].end_idx), (0, 1));
        assert_eq!(ivs[0].pre_port, None);
        assert_eq!(ivs[0].next_port.as_deref(), Some("A"));
        assert_eq!((ivs[1].start_idx, ivs[1].end_idx), (5, 7));
        assert_eq!(ivs[1].pre_port.as_deref(), Some("A"));
        assert_eq!(ivs[1].next_port.as_deref(), Some("B"));
        assert_eq!((ivs[2].start_idx, ivs[2].end_idx), (10, 11));
        assert_eq!(ivs[2].pre_port.as_deref(), Some("B"));
        assert_eq!(ivs[2].next_port, None);
    }

    #[test]
    fn no_episodes_yields_single_unlabeled_interval() {
        let ivs = label_sailing_intervals(5, &[]).unwrap();
        assert_eq!(ivs.len(), 1);
        assert_eq!((ivs[0].start_idx, ivs[0].end_idx), (0, 4));
        assert_eq!(ivs[0].pre_port, None);
        assert_eq!(ivs[0].next_port, None);
    }

    #[test]
    fn full_coverage_yields_no_intervals() {
        let eps = vec![PortEpisode {
            start_idx: 0,
            end_idx: 4,
            port_name: "A".into(),
            saw_berth: true,
        }];
        assert!(label_sailing_intervals(5, &eps).unwrap().is_empty());
    }

    #[test]
    fn overlapping_episodes_rejected() {
        let eps = vec![
            PortEpisode {
                start_idx: 0,
                end_idx: 4,
                port_name: "A".into(),
                saw_berth: true,
            },
            PortEpisode {
                start_idx: 3,
                end_idx: 6,
                port_name: "B".into(),
                saw_berth: true,
            },
        ];
        assert!(label_sailing_intervals(8, &eps).is_err());
    }

    #[test]
    fn episodes_and_intervals_partition_the_stream() {
        // Intervals are the complement of episodes, so episodes + intervals
        // must tile [0..T) exactly for any zone stream (berth-less zoned
        // runs end up inside sailing intervals).
        use ZoneType::*;
        let mut s = 0xabcdef12345u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        };
        for _ in 0..300 {
            let t = 1 + (next() % 40) as usize;
            let labels: Vec<ZoneLabel> = (0..t)
                .map(|_| match next() % 4 {
                    0 => None,
                    1 => z(Parking),
                    2 => z(Pilot),
                    _ => z(Berth),
                })
                .collect();
            let eps = extract_episodes_from_labels(&labels);
            for e in &eps {
                assert!(e.start_idx <= e.end_idx && e.end_idx < t);
                assert!((e.start_idx..=e.end_idx).any(|i| matches!(labels[i], Some((Berth, _)))));
            }
            // determinism
            assert_eq!(eps, extract_episodes_from_labels(&labels));
            let ivs = label_sailing_intervals(t, &eps).unwrap();
            let mut covered = vec![0u8; t];
            for e in &eps {
                for i in e.start_idx..=e.end_idx {
                    covered[i] += 1;
                }
            }
            for v in &ivs {
                for i in v.start_idx..=v.end_idx {
                    covered[i] += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "not a partition: {labels:?}");
        }
    }
}
