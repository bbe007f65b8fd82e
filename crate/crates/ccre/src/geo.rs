//! Geofence polygons: WKT parsing, validation, and point containment.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("WKT parse error: {0}")]
    Wkt(String),
    #[error("polygon ring must be closed and have at least 4 vertices (got {0})")]
    BadRing(usize),
    #[error("polygon for port {0} crosses the antimeridian; rejected at load time")]
    Antimeridian(u32),
    #[error("unknown zone type `{0}` (expected berth, pilot or parking)")]
    UnknownZone(String),
    #[error("geofence row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<GeoError>,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Functional classification of a geofence, in containment priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ZoneType {
    Berth,
    Pilot,
    Parking,
}

impl ZoneType {
    pub fn parse(s: &str) -> Result<Self, GeoError> {
        let l = s.to_ascii_lowercase();
        if l.contains("berth") {
            Ok(ZoneType::Berth)
        } else if l.contains("pilot") {
            Ok(ZoneType::Pilot)
        } else if l.contains("park") {
            Ok(ZoneType::Parking)
        } else {
            Err(GeoError::UnknownZone(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ZoneType::Berth => "berth",
            ZoneType::Pilot => "pilot",
            ZoneType::Parking => "parking",
        }
    }
}

/// A closed polygon ring of (lon, lat) vertices; first vertex equals last.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring(pub Vec<(f64, f64)>);

impl Ring {
    pub fn validate(&self) -> Result<(), GeoError> {
        let v = &self.0;
        if v.len() < 4 || v.first() != v.last() {
            return Err(GeoError::BadRing(v.len()));
        }
        Ok(())
    }

    fn crosses_antimeridian(&self) -> bool {
        self.0
            .windows(2)
            .any(|w| (w[0].0 - w[1].0).abs() > 180.0)
    }

    /// Ray-casting containment in planar lon/lat coordinates. Points on an
    /// edge or vertex count as inside.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let v = &self.0;
        let mut inside = false;
        for w in v.windows(2) {
            let (x1, y1) = w[0];
            let (x2, y2) = w[1];
            if on_segment(lon, lat, x1, y1, x2, y2) {
                return true;
            }
            if (y1 > lat) != (y2 > lat) {
                let x_int = x1 + (lat - y1) / (y2 - y1) * (x2 - x1);
                if lon < x_int {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn on_segment(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> bool {
    let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
    if cross.abs() > 1e-12 {
        return false;
    }
    px >= x1.min(x2) - 1e-12
        && px <= x1.max(x2) + 1e-12
        && py >= y1.min(y2) - 1e-12
        && py <= y1.max(y2) + 1e-12
}

/// One geofence entry. Multi-polygon WKT rows are split into several
/// entries sharing a port id.
#[derive(Debug, Clone)]
pub struct Geofence {
    pub port_id: u32,
    pub port_name: String,
    pub zone: ZoneType,
    pub polygon: Ring,
}

#[derive(Debug, Clone, Default)]
pub struct GeofenceSet {
    pub entries: Vec<Geofence>,
}

#[derive(Debug, Deserialize)]
struct GeofenceRow {
    #[serde(rename = "portId")]
    port_id: u32,
    geometry: String,
    #[serde(rename = "polygonType")]
    polygon_type: String,
}

impl GeofenceSet {
    /// Loads the geofence CSV (`portId,geometry,polygonType`). Port names
    /// come from the side table keyed by port id; ids without a name entry
    /// fall back to `port-<id>`.
    pub fn load_csv(path: &Path, names: &BTreeMap<u32, String>) -> Result<Self, GeoError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for (i, rec) in rdr.deserialize::<GeofenceRow>().enumerate() {
            let rec = rec?;
            let wrap = |e: GeoError| GeoError::Row {
                row: i + 2,
                source: Box::new(e),
            };
            let zone = ZoneType::parse(&rec.polygon_type).map_err(wrap)?;
            let rings = parse_wkt_polygons(&rec.geometry).map_err(wrap)?;
            let name = names
                .get(&rec.port_id)
                .cloned()
                .unwrap_or_else(|| format!("port-{}", rec.port_id));
            for ring in rings {
                ring.validate().map_err(wrap)?;
                if ring.crosses_antimeridian() {
                    return Err(wrap(GeoError::Antimeridian(rec.port_id)));
                }
                entries.push(Geofence {
                    port_id: rec.port_id,
                    port_name: name.clone(),
                    zone,
                    polygon: ring,
                });
            }
        }
        Ok(Self { entries })
    }

    /// Classifies a point against all fences in priority order
    /// berth > pilot > parking; within one zone class the first loaded
    /// containing fence wins.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(ZoneType, &str)> {
        for zone in [ZoneType::Berth, ZoneType::Pilot, ZoneType::Parking] {
            for f in &self.entries {
                if f.zone == zone && f.polygon.contains(lon, lat) {
                    return Some((zone, &f.port_name));
                }
            }
        }
        None
    }

    pub fn port_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.entries.iter().map(|f| f.port_name.clone()).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Parses `POLYGON((lon lat, ...))` or `MULTIPOLYGON(((...)), ((...)))`
/// exterior rings. Interior rings are not used by port fences and are
/// ignored.
pub fn parse_wkt_polygons(wkt: &str) -> Result<Vec<Ring>, GeoError> {
    let s = wkt.trim();
    let upper = s.to_ascii_uppercase();
    let body = if let Some(rest) = upper.strip_prefix("MULTIPOLYGON") {
        let inner = strip_parens(s, rest)?;
        return split_top_level(inner)
            .into_iter()
            .map(|poly| {
                let rings = split_top_level(poly.trim().trim_start_matches('(').trim_end_matches(')'));
                parse_ring(rings.first().copied().unwrap_or(""))
            })
            .collect();
    } else if let Some(rest) = upper.strip_prefix("POLYGON") {
        strip_parens(s, rest)?
    } else {
        return Err(GeoError::Wkt(format!("expected POLYGON/MULTIPOLYGON: {s}")));
    };
    let rings = split_top_level(body);
    let first = rings
        .first()
        .ok_or_else(|| GeoError::Wkt("polygon has no rings".into()))?;
    Ok(vec![parse_ring(first)?])
}

/// Returns the text between the outermost parentheses following the tag.
fn strip_parens<'a>(original: &'a str, after_tag: &str) -> Result<&'a str, GeoError> {
    let tag_len = original.len() - after_tag.len();
    let rest = original[tag_len..].trim_start();
    if !rest.starts_with('(') || !rest.ends_with(')') {
        return Err(GeoError::Wkt(format!("unbalanced parentheses: {original}")));
    }
    Ok(&rest[1..rest.len() - 1])
}

/// Splits on commas that sit at parenthesis depth zero.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn parse_ring(s: &str) -> Result<Ring, GeoError> {
    let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
    let mut pts = Vec::new();
    for pair in inner.split(',') {
        let mut it = pair.split_whitespace();
        let lon: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| GeoError::Wkt(format!("bad coordinate pair: {pair}")))?;
        let lat: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| GeoError::Wkt(format!("bad coordinate pair: {pair}")))?;
        pts.push((lon, lat));
    }
    Ok(Ring(pts))
}

/// Formats a ring back to WKT `POLYGON((lon lat, ...))`.
pub fn ring_to_wkt(ring: &Ring) -> String {
    let coords: Vec<String> = ring
        .0
        .iter()
        .map(|(lon, lat)| format!("{lon} {lat}"))
        .collect();
    format!("POLYGON(({}))", coords.join(", "))
}
