//! Intersection map assembly (J2735 MAP content as canonical JSON), the
//! human-review report and manual overrides.
//!
//! Node offsets are integer centimeters on the UTM grid. The first node of
//! a lane is relative to the reference point as stored (i.e. after its
//! latitude/longitude are quantized to 1e-7°), later nodes to their
//! predecessor, so decoding is an exact cumulative sum.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Lane, LaneDirection, StopBar};
use crate::georef::{geodetic_to_utm, utm_to_geodetic, GeodeticCoord};
use crate::pcio::UtmZone;

// ---------------------------------------------------------------------------
// Review items

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewCode {
    NoStopBar,
    SingleStopBar,
    FadedMarkings,
    NoMarkingsNarrow,
    DegenerateLane,
    EdgeMissing,
    NoisyImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub severity: Severity,
    pub site_id: u32,
    pub approach: Option<usize>,
    pub branch: Option<u8>,
    pub code: ReviewCode,
    pub message: String,
}

pub fn has_block(items: &[ReviewItem]) -> bool {
    items.iter().any(|i| i.severity == Severity::Block)
}

/// One JSON object per line, fields in declaration order.
pub fn write_review(items: &[ReviewItem], w: &mut impl Write) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn emit_review_report(items: &[ReviewItem], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_review(items, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_review(text: &str) -> Result<Vec<ReviewItem>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

// ---------------------------------------------------------------------------
// Map message

/// Reference point at J2735 resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePoint {
    /// Latitude in units of 1e-7 degree.
    pub lat_e7: i64,
    pub lon_e7: i64,
    /// Elevation in decimeters.
    pub elevation_dm: i64,
}

impl ReferencePoint {
    pub fn from_geodetic(g: &GeodeticCoord) -> Self {
        ReferencePoint {
            lat_e7: (g.latitude * 1e7).round() as i64,
            lon_e7: (g.longitude * 1e7).round() as i64,
            elevation_dm: (g.altitude * 10.0).round() as i64,
        }
    }

    pub fn geodetic(&self) -> GeodeticCoord {
        GeodeticCoord {
            latitude: self.lat_e7 as f64 * 1e-7,
            longitude: self.lon_e7 as f64 * 1e-7,
            altitude: self.elevation_dm as f64 * 0.1,
        }
    }
}

/// Centimeter offset. `wide` marks values beyond the signed 16-bit range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOffset {
    pub dx_cm: i32,
    pub dy_cm: i32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub wide: bool,
}

impl NodeOffset {
    fn new(dx: i64, dy: i64, lane: u32) -> Result<Self> {
        let narrow = |v: i64| (i16::MIN as i64..=i16::MAX as i64).contains(&v);
        let conv = |v: i64| {
            i32::try_from(v).map_err(|_| Error::Encoding {
                lane,
                reason: format!("offset {v} cm exceeds the wide-offset range"),
            })
        };
        Ok(NodeOffset {
            dx_cm: conv(dx)?,
            dy_cm: conv(dy)?,
            wide: !(narrow(dx) && narrow(dy)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneAttribute {
    TurnPocket,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub id: u32,
    pub approach: u32,
    pub direction: LaneDirection,
    pub width_cm: i32,
    pub nodes: Vec<NodeOffset>,
    pub attributes: BTreeSet<LaneAttribute>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopBarRecord {
    pub approach: u32,
    /// Endpoints as centimeter offsets from the reference point.
    pub endpoints: [[i64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionMap {
    pub id: u32,
    pub revision: u32,
    pub reference: ReferencePoint,
    pub zone: UtmZone,
    pub lane_count: usize,
    pub lanes: Vec<LaneRecord>,
    pub stop_bars: Vec<StopBarRecord>,
    pub provenance: Vec<String>,
}

fn to_cm(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

impl IntersectionMap {
    /// UTM position of the quantized reference point.
    pub fn reference_utm(&self) -> Result<Vector2<f64>> {
        let (e, n) = geodetic_to_utm(&self.reference.geodetic(), self.zone)?;
        Ok(Vector2::new(e, n))
    }

    /// World XY of each node of a lane.
    pub fn lane_nodes(&self, lane: &LaneRecord) -> Result<Vec<Vector2<f64>>> {
        let r = self.reference_utm()?;
        let (mut x, mut y) = (0i64, 0i64);
        Ok(lane
            .nodes
            .iter()
            .map(|o| {
                x += o.dx_cm as i64;
                y += o.dy_cm as i64;
                r + Vector2::new(x as f64, y as f64) / 100.0
            })
            .collect())
    }

    pub fn stop_bar_world(&self, rec: &StopBarRecord) -> Result<[Vector2<f64>; 2]> {
        let r = self.reference_utm()?;
        let p = |c: [i64; 2]| r + Vector2::new(c[0] as f64, c[1] as f64) / 100.0;
        Ok([p(rec.endpoints[0]), p(rec.endpoints[1])])
    }

    pub fn validate(&self) -> Result<()> {
        UtmZone::new(self.zone.number, self.zone.north)?;
        if self.lane_count != self.lanes.len() {
            return Err(Error::validation("lane_count", "does not match the lane list"));
        }
        let ids: BTreeSet<u32> = self.lanes.iter().map(|l| l.id).collect();
        if ids.len() != self.lanes.len() {
            return Err(Error::validation("lanes", "lane ids are not unique"));
        }
        for l in &self.lanes {
            if l.width_cm <= 0 {
                return Err(Error::validation(format!("lanes[{}].width_cm", l.id), "must be positive"));
            }
            if l.nodes.len() < 2 {
                return Err(Error::validation(format!("lanes[{}].nodes", l.id), "needs at least two nodes"));
            }
        }
        Ok(())
    }
}

/// Node offsets from world positions, first relative to `reference`.
fn encode_nodes(nodes: &[Vector2<f64>], reference: Vector2<f64>, lane: u32) -> Result<Vec<NodeOffset>> {
    let mut prev = (0i64, 0i64);
    nodes
        .iter()
        .map(|p| {
            let d = p - reference;
            let cur = (to_cm(d.x), to_cm(d.y));
            let off = NodeOffset::new(cur.0 - prev.0, cur.1 - prev.1, lane);
            prev = cur;
            off
        })
        .collect()
}

/// Builds the map for one site. Lanes must already carry unique ids.
pub fn build_map_message(
    site_id: u32,
    center: Vector2<f64>,
    elevation: f64,
    zone: UtmZone,
    lanes: &[Lane],
    stop_bars: &[StopBar],
) -> Result<IntersectionMap> {
    if lanes.is_empty() {
        return Err(Error::validation("lanes", "a map needs at least one lane"));
    }
    let g = utm_to_geodetic(center.x, center.y, zone)?;
    let reference = ReferencePoint::from_geodetic(&GeodeticCoord {
        altitude: elevation,
        ..g
    });
    let mut map = IntersectionMap {
        id: site_id,
        revision: 0,
        reference,
        zone,
        lane_count: lanes.len(),
        lanes: Vec::with_capacity(lanes.len()),
        stop_bars: Vec::new(),
        provenance: Vec::new(),
    };
    let r = map.reference_utm()?;
    for lane in lanes {
        let nodes: Vec<Vector2<f64>> = lane.nodes.iter().map(|n| Vector2::new(n[0], n[1])).collect();
        let mut attributes = BTreeSet::new();
        if lane.turn_pocket {
            attributes.insert(LaneAttribute::TurnPocket);
        }
        map.lanes.push(LaneRecord {
            id: lane.id,
            approach: lane.approach as u32,
            direction: lane.direction,
            width_cm: to_cm(lane.width) as i32,
            nodes: encode_nodes(&nodes, r, lane.id)?,
            attributes,
        });
    }
    map.lanes.sort_by_key(|l| l.id);
    for sb in stop_bars {
        let c = |p: [f64; 2]| [to_cm(p[0] - r.x), to_cm(p[1] - r.y)];
        map.stop_bars.push(StopBarRecord {
            approach: sb.approach as u32,
            endpoints: [c(sb.world[0]), c(sb.world[1])],
        });
    }
    map.stop_bars.sort_by_key(|s| (s.approach, s.endpoints));
    map.validate()?;
    Ok(map)
}

/// Canonical JSON: keys sorted, two-space indent, trailing newline.
pub fn encode_map_json(map: &IntersectionMap) -> String {
    let value = serde_json::to_value(map).expect("map serializes");
    let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
    s.push('\n');
    s
}

pub fn decode_map_json(text: &str) -> Result<IntersectionMap> {
    let map: IntersectionMap = serde_json::from_str(text)?;
    map.validate()?;
    Ok(map)
}

// ---------------------------------------------------------------------------
// Publishing

/// Where a site's products went.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Published {
    pub dir: PathBuf,
    pub quarantined: bool,
}

/// Default quarantine root: a `quarantine` directory next to `out`.
pub fn default_quarantine(out: &Path) -> PathBuf {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parent.join("quarantine")
}

/// Writes `map.json` and `review.ndjson` (plus any `extra` files) to
/// `out/<id>/`, or to `quarantine/<id>/` when any item blocks. A stale copy
/// in the other location is removed.
pub fn publish(
    map: Option<&IntersectionMap>,
    site_id: u32,
    review: &[ReviewItem],
    out: &Path,
    quarantine: &Path,
    extra: &[(&str, String)],
) -> Result<Published> {
    let blocked = has_block(review) || map.is_none();
    let (dir, other) = if blocked {
        (quarantine.join(site_id.to_string()), out.join(site_id.to_string()))
    } else {
        (out.join(site_id.to_string()), quarantine.join(site_id.to_string()))
    };
    if other.exists() {
        std::fs::remove_dir_all(&other).map_err(|e| Error::io(&other, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(map) = map {
        let p = dir.join("map.json");
        std::fs::write(&p, encode_map_json(map)).map_err(|e| Error::io(&p, e))?;
    }
    emit_review_report(review, &dir.join("review.ndjson"))?;
    for (name, body) in extra {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(Published {
        dir,
        quarantined: blocked,
    })
}

// ---------------------------------------------------------------------------
// Overrides

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneOverride {
    pub id: u32,
    #[serde(default)]
    pub width_cm: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopBarOverride {
    pub approach: u32,
    /// World XY endpoints.
    pub endpoints: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub lanes: Vec<LaneOverride>,
    pub stop_bars: Vec<StopBarOverride>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty() && self.stop_bars.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            return Ok(Overrides::default());
        }
        Ok(serde_json::from_str(&text)?)
    }
}

/// Intersection of the line through `p` along `d` with the line through `a`, `b`.
fn line_intersection(p: Vector2<f64>, d: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> Option<Vector2<f64>> {
    let e = b - a;
    let den = d.x * e.y - d.y * e.x;
    if den.abs() < 1e-12 {
        return None;
    }
    let w = a - p;
    let t = (w.x * e.y - w.y * e.x) / den;
    Some(p + d * t)
}

/// Applies overrides. Widths replace extracted ones; a stop bar re-anchors
/// the first node of every ingress lane on its approach (all nodes shift
/// along the lane so spacing is kept). Revision bumps only when something
/// was applied.
pub fn apply_overrides(map: &IntersectionMap, ov: &Overrides) -> Result<IntersectionMap> {
    let mut out = map.clone();
    if ov.is_empty() {
        return Ok(out);
    }
    for lo in &ov.lanes {
        let lane = out
            .lanes
            .iter_mut()
            .find(|l| l.id == lo.id)
            .ok_or_else(|| Error::validation(format!("lanes[id={}]", lo.id), "no such lane"))?;
        if let Some(w) = lo.width_cm {
            if w <= 0 {
                return Err(Error::validation(format!("lanes[id={}].width_cm", lo.id), "must be positive"));
            }
            lane.width_cm = w;
            out.provenance.push(format!("override: lane {} width {} cm", lo.id, w));
        }
    }
    let r = out.reference_utm()?;
    for sb in &ov.stop_bars {
        let a = Vector2::new(sb.endpoints[0][0], sb.endpoints[0][1]);
        let b = Vector2::new(sb.endpoints[1][0], sb.endpoints[1][1]);
        let mut touched = 0;
        for i in 0..out.lanes.len() {
            let lane = &out.lanes[i];
            if lane.approach != sb.approach || lane.direction != LaneDirection::Ingress {
                continue;
            }
            let nodes = out.lane_nodes(lane)?;
            let d = (nodes[1] - nodes[0]).normalize();
            let Some(x) = line_intersection(nodes[0], d, a, b) else {
                continue;
            };
            let shift = d * (x - nodes[0]).dot(&d);
            let moved: Vec<Vector2<f64>> = nodes.iter().map(|n| n + shift).collect();
            let id = lane.id;
            out.lanes[i].nodes = encode_nodes(&moved, r, id)?;
            touched += 1;
        }
        out.stop_bars.retain(|s| s.approach != sb.approach);
        let c = |p: Vector2<f64>| [to_cm(p.x - r.x), to_cm(p.y - r.y)];
        out.stop_bars.push(StopBarRecord {
            approach: sb.approach,
            endpoints: [c(a), c(b)],
        });
        out.provenance
            .push(format!("override: stop bar on approach {} re-anchored {} lane(s)", sb.approach, touched));
    }
    out.stop_bars.sort_by_key(|s| (s.approach, s.endpoints));
    out.revision += 1;
    out.validate()?;
    Ok(out)
}

/// Drops NO_STOP_BAR items resolved by a stop-bar override.
pub fn resolve_review(items: &[ReviewItem], ov: &Overrides) -> Vec<ReviewItem> {
    items
        .iter()
        .filter(|i| {
            !(i.code == ReviewCode::NoStopBar
                && ov.stop_bars.iter().any(|s| Some(s.approach as usize) == i.approach))
        })
        .cloned()
        .collect()
}
