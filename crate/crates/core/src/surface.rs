//! Road/median edge detection and road-surface extraction for one approach.
//!
//! The approach is cut into 1 m swaths perpendicular to a reference line
//! fitted through the trajectory. Each swath's lateral z-mode profile is
//! walked outward from the vehicle position until an elevation jump or a
//! support gap marks an edge. Edge points are cleaned and fit with
//! continuous piecewise lines, and a per-swath polynomial cross-section seeded
//! from the projected trajectory selects the on-road points.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pcio::{PointCloud, PoseSample};
use crate::segment::{ApproachCloud, ApproachPolygon};

// ---------------------------------------------------------------------------
// Reference line and swath frames

/// Smooth reference line along an approach, sampled every meter of axis
/// station starting at the intersection center. Stations are arclength.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLine {
    vertices: Vec<Vector2<f64>>,
    cum: Vec<f64>,
}

impl TrackLine {
    pub fn from_polyline(vertices: Vec<Vector2<f64>>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::validation("track line", "needs at least two vertices"));
        }
        let mut cum = Vec::with_capacity(vertices.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in vertices.windows(2) {
            let d = (w[1] - w[0]).norm();
            if d <= 1e-9 {
                return Err(Error::validation("track line", "repeated vertex"));
            }
            acc += d;
            cum.push(acc);
        }
        Ok(TrackLine { vertices, cum })
    }

    /// Fits the lateral offset of the track (relative to the polygon axis)
    /// as a low-order polynomial of axis station, using samples beyond
    /// `exclusion` from the center, and samples it from station 0 to `s_max`.
    /// Outside the fitted span the offset is held constant.
    pub fn fit(polygon: &ApproachPolygon, track: &[PoseSample], exclusion: f64, s_max: f64) -> Option<Self> {
        let local: Vec<(f64, f64)> = track.iter().map(|p| polygon.local(p.xy())).collect();
        let mut usable: Vec<(f64, f64)> = local.iter().copied().filter(|(s, _)| *s > exclusion).collect();
        if usable.len() < 10 {
            usable = local;
        }
        if usable.is_empty() {
            return None;
        }
        // One mean per 1 m bin so dense and sparse stretches weigh alike.
        let mut bins: std::collections::BTreeMap<i64, (f64, f64, usize)> = Default::default();
        for (s, l) in usable {
            let e = bins.entry(s.floor() as i64).or_insert((0.0, 0.0, 0));
            e.0 += s;
            e.1 += l;
            e.2 += 1;
        }
        let pts: Vec<(f64, f64)> = bins.values().map(|(s, l, n)| (s / *n as f64, l / *n as f64)).collect();
        let s_lo = pts.first().unwrap().0;
        let s_hi = pts.last().unwrap().0;
        let degree = if pts.len() < 3 {
            0
        } else if s_hi - s_lo < 30.0 {
            1
        } else {
            2
        };
        let mid = 0.5 * (s_lo + s_hi);
        let half = (0.5 * (s_hi - s_lo)).max(1.0);
        let ts: Vec<f64> = pts.iter().map(|(s, _)| (s - mid) / half).collect();
        let ls: Vec<f64> = pts.iter().map(|(_, l)| *l).collect();
        let coeffs = lstsq_poly(&ts, &ls, degree)?;
        let lateral = |s: f64| {
            let t = (s.clamp(s_lo, s_hi) - mid) / half;
            poly_eval(&coeffs, t)
        };
        let n = s_max.max(2.0).ceil() as usize;
        let vertices: Vec<Vector2<f64>> = (0..=n).map(|i| polygon.world(i as f64, lateral(i as f64))).collect();
        TrackLine::from_polyline(vertices).ok()
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point and unit tangent at an arclength station (clamped to the line).
    pub fn point_at(&self, station: f64) -> (Vector2<f64>, Vector2<f64>) {
        let s = station.clamp(0.0, self.length());
        let k = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.vertices.len() - 2),
            Err(i) => (i - 1).min(self.vertices.len() - 2),
        };
        let a = self.vertices[k];
        let b = self.vertices[k + 1];
        let seg = self.cum[k + 1] - self.cum[k];
        let tangent = (b - a) / seg;
        (a + tangent * (s - self.cum[k]), tangent)
    }

    pub fn frame(&self, station: f64, length: f64) -> Result<SwathFrame> {
        if !(station >= 0.0 && station < self.length()) {
            return Err(Error::StationRange {
                station,
                length: self.length(),
            });
        }
        let (origin, u) = self.point_at(station);
        Ok(SwathFrame {
            station,
            origin,
            u,
            v: Vector2::new(-u.y, u.x),
            length,
        })
    }
}

/// Local frame of one swath: `u` along the track, `v` its left normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwathFrame {
    pub station: f64,
    pub origin: Vector2<f64>,
    pub u: Vector2<f64>,
    pub v: Vector2<f64>,
    pub length: f64,
}

impl SwathFrame {
    #[inline]
    pub fn local(&self, xy: Vector2<f64>) -> (f64, f64) {
        let d = xy - self.origin;
        (d.dot(&self.u), d.dot(&self.v))
    }

    pub fn world(&self, u: f64, v: f64) -> Vector2<f64> {
        self.origin + self.u * u + self.v * v
    }
}

/// Swath points in local `(u, v, z)` with their index in the approach cloud.
#[derive(Debug, Clone)]
pub struct Swath {
    pub frame: SwathFrame,
    pub points: Vec<[f64; 3]>,
    pub index: Vec<u32>,
}

/// All approach points with local `u` in `[0, length)` of the swath at `station`.
pub fn extract_swath(ac: &ApproachCloud, line: &TrackLine, station: f64, length: f64) -> Result<Swath> {
    let frame = line.frame(station, length)?;
    let mut points = Vec::new();
    let mut index = Vec::new();
    for (i, p) in ac.cloud.points().iter().enumerate() {
        let (u, v) = frame.local(p.xy());
        if (0.0..length).contains(&u) {
            points.push([u, v, p.altitude]);
            index.push(i as u32);
        }
    }
    Ok(Swath { frame, points, index })
}

/// Station-sorted view of an approach cloud for repeated swath queries.
pub struct Swather<'a> {
    ac: &'a ApproachCloud,
    pub line: TrackLine,
    order: Vec<u32>,
    keys: Vec<f64>,
    half_width: f64,
}

impl<'a> Swather<'a> {
    pub fn new(ac: &'a ApproachCloud, line: TrackLine) -> Self {
        let poly = &ac.polygon;
        let mut keyed: Vec<(f64, u32)> = ac
            .cloud
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| (poly.local(p.xy()).0, i as u32))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let half_width = ac
            .cloud
            .points()
            .iter()
            .map(|p| poly.local(p.xy()).1.abs())
            .fold(0.0, f64::max);
        Swather {
            ac,
            line,
            keys: keyed.iter().map(|k| k.0).collect(),
            order: keyed.into_iter().map(|k| k.1).collect(),
            half_width,
        }
    }

    pub fn swath(&self, station: f64, length: f64) -> Result<Swath> {
        let frame = self.line.frame(station, length)?;
        let poly = &self.ac.polygon;
        let (s0, l0) = poly.local(frame.origin);
        // A tilted frame reaches further along the axis at the polygon sides.
        let sin = frame.u.perp(&poly.axis).abs();
        let margin = (self.half_width + l0.abs()) * sin / (1.0 - sin * sin).max(1e-6).sqrt() + 1e-6;
        let lo = self.keys.partition_point(|&k| k < s0 - margin);
        let hi = self.keys.partition_point(|&k| k < s0 + length + margin);
        let pts = self.ac.cloud.points();
        let mut points = Vec::new();
        let mut index = Vec::new();
        for &i in &self.order[lo..hi] {
            let p = &pts[i as usize];
            let (u, v) = frame.local(p.xy());
            if (0.0..length).contains(&u) {
                points.push([u, v, p.altitude]);
                index.push(i);
            }
        }
        // Keep approach order so results do not depend on the sort.
        let mut pairs: Vec<(u32, [f64; 3])> = index.into_iter().zip(points).collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let (index, points) = pairs.into_iter().unzip();
        Ok(Swath { frame, points, index })
    }

    /// Track samples inside the swath as `(v, z)`.
    pub fn track_in(&self, frame: &SwathFrame) -> Vec<(f64, f64)> {
        self.ac
            .track
            .iter()
            .filter_map(|p| {
                let (u, v) = frame.local(p.xy());
                (0.0..frame.length).contains(&u).then_some((v, p.position.z))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Lateral mode profile

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    /// Lateral center of the bin.
    pub y: f64,
    pub z_mode: f64,
    pub support: u32,
}

/// Modal elevation per lateral bin. Bin `i` covers
/// `[(first + i)·w, (first + i + 1)·w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralProfile {
    pub bin_width: f64,
    pub first: i64,
    pub bins: Vec<ProfileBin>,
}

impl LateralProfile {
    pub fn bin_of(&self, y: f64) -> Option<usize> {
        let k = (y / self.bin_width).floor() as i64 - self.first;
        (k >= 0 && (k as usize) < self.bins.len()).then_some(k as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.bins.iter().all(|b| b.support == 0)
    }
}

/// Modal z of a set of elevations on `cell`-sized histogram cells (lowest cell
/// wins ties). Returns the mean of the elevations in the modal cell, so a
/// constant input is reproduced exactly.
pub fn z_mode(zs: &mut [f64], cell: f64) -> Option<f64> {
    if zs.is_empty() {
        return None;
    }
    zs.sort_by(f64::total_cmp);
    let key = |z: f64| (z / cell).floor() as i64;
    let (mut best_start, mut best_len) = (0usize, 0usize);
    let mut start = 0;
    while start < zs.len() {
        let k = key(zs[start]);
        let mut end = start + 1;
        while end < zs.len() && key(zs[end]) == k {
            end += 1;
        }
        if end - start > best_len {
            best_start = start;
            best_len = end - start;
        }
        start = end;
    }
    let run = &zs[best_start..best_start + best_len];
    Some(run.iter().sum::<f64>() / run.len() as f64)
}

pub fn lateral_mode_profile(points: &[[f64; 3]], bin_width: f64, z_cell: f64) -> LateralProfile {
    if points.is_empty() {
        return LateralProfile {
            bin_width,
            first: 0,
            bins: Vec::new(),
        };
    }
    let key = |v: f64| (v / bin_width).floor() as i64;
    let first = points.iter().map(|p| key(p[1])).min().unwrap();
    let last = points.iter().map(|p| key(p[1])).max().unwrap();
    let n = (last - first + 1) as usize;
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); n];
    for p in points {
        per_bin[(key(p[1]) - first) as usize].push(p[2]);
    }
    let bins = per_bin
        .into_iter()
        .enumerate()
        .map(|(i, mut zs)| ProfileBin {
            y: (first + i as i64) as f64 * bin_width + 0.5 * bin_width,
            support: zs.len() as u32,
            z_mode: z_mode(&mut zs, z_cell).unwrap_or(f64::NAN),
        })
        .collect();
    LateralProfile { bin_width, first, bins }
}

// ---------------------------------------------------------------------------
// Edge detection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSide {
    /// Road edge on the +v side.
    Left,
    /// Road edge on the −v side.
    Right,
    /// Median edge facing +v.
    MedianLeft,
    /// Median edge facing −v.
    MedianRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgePoint {
    pub station: f64,
    pub y_offset: f64,
    pub z: f64,
    pub side: EdgeSide,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeParams {
    pub curb_threshold: f64,
    pub gap_bins: usize,
    pub median_min_width: f64,
    pub median_max_width: f64,
    pub return_tolerance: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        EdgeParams::from(&PipelineConfig::default())
    }
}

impl From<&PipelineConfig> for EdgeParams {
    fn from(c: &PipelineConfig) -> Self {
        EdgeParams {
            curb_threshold: c.curb_threshold,
            gap_bins: c.gap_bins,
            median_min_width: c.median_min_width,
            median_max_width: c.median_max_width,
            return_tolerance: c.median_return_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeScan {
    pub edges: Vec<EdgePoint>,
    /// No supported bins near the seed.
    pub low_confidence: bool,
    /// Elevation of the road at the seed.
    pub seed_z: Option<f64>,
}

fn supported(p: &LateralProfile, i: usize) -> bool {
    p.bins[i].support > 0
}

/// Walks the profile outward from `track_y` in both directions. Edge points
/// carry station 0; callers set it.
pub fn detect_edges(profile: &LateralProfile, track_y: f64, params: &EdgeParams) -> EdgeScan {
    let n = profile.bins.len();
    let empty = EdgeScan {
        low_confidence: true,
        ..EdgeScan::default()
    };
    if n == 0 {
        return empty;
    }
    let k = (track_y / profile.bin_width).floor() as i64 - profile.first;
    let Some(start) = (0..=10i64)
        .flat_map(|d| [k - d, k + d])
        .filter(|&i| i >= 0 && i < n as i64)
        .map(|i| i as usize)
        .find(|&i| supported(profile, i))
    else {
        return empty;
    };
    let mut near: Vec<f64> = (start.saturating_sub(5)..(start + 6).min(n))
        .filter(|&i| supported(profile, i))
        .map(|i| profile.bins[i].z_mode)
        .collect();
    near.sort_by(f64::total_cmp);
    let seed_z = near[near.len() / 2];
    let mut edges = Vec::new();
    for dir in [1i64, -1] {
        walk(profile, start, dir, seed_z, params, &mut edges);
    }
    EdgeScan {
        edges,
        low_confidence: false,
        seed_z: Some(seed_z),
    }
}

fn walk(p: &LateralProfile, start: usize, dir: i64, seed_z: f64, params: &EdgeParams, out: &mut Vec<EdgePoint>) {
    let n = p.bins.len() as i64;
    let w = p.bin_width;
    let road_side = if dir > 0 { EdgeSide::Left } else { EdgeSide::Right };
    let edge = |y: f64, z: f64, side: EdgeSide, confidence: f64| EdgePoint {
        station: 0.0,
        y_offset: y,
        z,
        side,
        confidence,
    };
    let mut prev = start as i64;
    let mut gap = 0usize;
    let mut i = prev + dir;
    while i >= 0 && i < n {
        let bin = p.bins[i as usize];
        if bin.support == 0 {
            gap += 1;
            if gap >= params.gap_bins {
                let b = p.bins[prev as usize];
                out.push(edge(b.y + dir as f64 * 0.5 * w, b.z_mode, road_side, 0.5));
                return;
            }
            i += dir;
            continue;
        }
        gap = 0;
        let before = p.bins[prev as usize];
        let dz = bin.z_mode - before.z_mode;
        if dz.abs() > params.curb_threshold {
            let boundary = 0.5 * (before.y + bin.y);
            if dz > 0.0 && (before.z_mode - seed_z).abs() <= params.return_tolerance {
                if let Some((last_raised, back)) = median_run(p, i, dir, seed_z, params) {
                    let far = 0.5 * (p.bins[last_raised as usize].y + p.bins[back as usize].y);
                    let (near_side, far_side) = if dir > 0 {
                        (EdgeSide::MedianRight, EdgeSide::MedianLeft)
                    } else {
                        (EdgeSide::MedianLeft, EdgeSide::MedianRight)
                    };
                    out.push(edge(boundary, before.z_mode, near_side, 1.0));
                    out.push(edge(far, p.bins[back as usize].z_mode, far_side, 1.0));
                    prev = back;
                    i = back + dir;
                    continue;
                }
            }
            out.push(edge(boundary, before.z_mode, road_side, 1.0));
            return;
        }
        prev = i;
        i += dir;
    }
}

/// From the first raised bin `i`, looks for a drop back to road level within
/// the median width limits. Returns (last raised bin, first road bin).
fn median_run(p: &LateralProfile, i: i64, dir: i64, seed_z: f64, params: &EdgeParams) -> Option<(i64, i64)> {
    let n = p.bins.len() as i64;
    let y0 = p.bins[i as usize].y - dir as f64 * 0.5 * p.bin_width;
    let mut last = i;
    let mut gap = 0usize;
    let mut j = i + dir;
    while j >= 0 && j < n {
        let bin = p.bins[j as usize];
        if (bin.y - y0).abs() > params.median_max_width + p.bin_width {
            return None;
        }
        if bin.support == 0 {
            gap += 1;
            if gap >= params.gap_bins {
                return None;
            }
            j += dir;
            continue;
        }
        gap = 0;
        let dz = bin.z_mode - p.bins[last as usize].z_mode;
        if dz < -params.curb_threshold {
            let width = (0.5 * (p.bins[last as usize].y + bin.y) - y0).abs();
            let road_like = (bin.z_mode - seed_z).abs() <= params.return_tolerance;
            return (road_like && width >= params.median_min_width && width <= params.median_max_width)
                .then_some((last, j));
        }
        last = j;
        j += dir;
    }
    None
}

/// Road and median edges of one swath after merging all seeds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SwathEdges {
    pub left: Option<EdgePoint>,
    pub right: Option<EdgePoint>,
    pub median_left: Option<EdgePoint>,
    pub median_right: Option<EdgePoint>,
}

impl SwathEdges {
    /// Outermost road edges across seeds; median edges averaged.
    pub fn merge(scans: &[EdgeScan]) -> Self {
        let all = || scans.iter().flat_map(|s| s.edges.iter());
        let pick = |side: EdgeSide, outer: fn(f64, f64) -> bool| {
            all().filter(|e| e.side == side).fold(None::<EdgePoint>, |best, e| match best {
                Some(b) if !outer(e.y_offset, b.y_offset) => Some(b),
                _ => Some(*e),
            })
        };
        let mean = |side: EdgeSide| {
            let v: Vec<&EdgePoint> = all().filter(|e| e.side == side).collect();
            (!v.is_empty()).then(|| {
                let k = v.len() as f64;
                EdgePoint {
                    y_offset: v.iter().map(|e| e.y_offset).sum::<f64>() / k,
                    z: v.iter().map(|e| e.z).sum::<f64>() / k,
                    confidence: v.iter().map(|e| e.confidence).sum::<f64>() / k,
                    ..*v[0]
                }
            })
        };
        let mut out = SwathEdges {
            left: pick(EdgeSide::Left, |a, b| a > b),
            right: pick(EdgeSide::Right, |a, b| a < b),
            median_left: mean(EdgeSide::MedianLeft),
            median_right: mean(EdgeSide::MedianRight),
        };
        if let (Some(l), Some(r)) = (out.left, out.right) {
            if l.y_offset <= r.y_offset {
                out.left = None;
                out.right = None;
            }
        }
        match (out.median_left, out.median_right) {
            (Some(ml), Some(mr)) if ml.y_offset > mr.y_offset => {}
            _ => {
                out.median_left = None;
                out.median_right = None;
            }
        }
        out
    }

    pub fn points(&self) -> impl Iterator<Item = EdgePoint> + '_ {
        [self.left, self.right, self.median_left, self.median_right].into_iter().flatten()
    }
}

/// Groups track laterals separated by more than 1 m and returns one
/// `(v, z)` seed per group (component-wise medians).
pub fn seed_groups(mut track: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    track.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=track.len() {
        if i == track.len() || track[i].0 - track[i - 1].0 > 1.0 {
            let g = &track[start..i];
            if !g.is_empty() {
                let v = g[g.len() / 2].0;
                let mut zs: Vec<f64> = g.iter().map(|p| p.1).collect();
                zs.sort_by(f64::total_cmp);
                out.push((v, zs[zs.len() / 2]));
            }
            start = i;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Edge curves

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveParams {
    pub outlier_tolerance: f64,
    pub gap_fill: f64,
    pub segment_length: f64,
}

impl From<&PipelineConfig> for CurveParams {
    fn from(c: &PipelineConfig) -> Self {
        CurveParams {
            outlier_tolerance: c.edge_outlier_tolerance,
            gap_fill: c.edge_gap_fill,
            segment_length: c.edge_segment_length,
        }
    }
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams::from(&PipelineConfig::default())
    }
}

/// Continuous piecewise-linear edge, one or more pieces separated by gaps
/// longer than the gap-fill limit.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCurve {
    pub side: EdgeSide,
    /// Station, lateral offset from the reference line, and elevation per vertex.
    pub stations: Vec<f64>,
    pub laterals: Vec<f64>,
    pub heights: Vec<f64>,
    /// World XYZ per vertex.
    pub vertices: Vec<Vector3<f64>>,
    /// Station ranges covered, one per piece; vertex runs follow the same order.
    pub pieces: Vec<(f64, f64)>,
}

impl EdgeCurve {
    pub fn span(&self) -> (f64, f64) {
        (self.pieces.first().unwrap().0, self.pieces.last().unwrap().1)
    }

    /// Lateral offset at a station inside a piece (with `slack` meters of
    /// tolerance at piece ends, where the end value is held).
    pub fn lateral_at(&self, station: f64, slack: f64) -> Option<f64> {
        let piece = self.pieces.iter().position(|&(a, b)| station >= a - slack && station <= b + slack)?;
        let (a, b) = self.pieces[piece];
        let s = station.clamp(a, b);
        let idx: Vec<usize> = (0..self.stations.len())
            .filter(|&i| self.stations[i] >= a - 1e-9 && self.stations[i] <= b + 1e-9)
            .collect();
        let st = |i: usize| self.stations[idx[i]];
        let k = (0..idx.len() - 1).find(|&i| s <= st(i + 1)).unwrap_or(idx.len().saturating_sub(2));
        if idx.len() == 1 {
            return Some(self.laterals[idx[0]]);
        }
        let (s0, s1) = (st(k), st(k + 1));
        let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        Some(self.laterals[idx[k]] * (1.0 - t) + self.laterals[idx[k + 1]] * t)
    }

    /// Median lateral offset over the vertices.
    pub fn median_lateral(&self) -> f64 {
        let mut v = self.laterals.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }
}

fn moving_median(values: &[f64], half: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            let mut w = values[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            w[w.len() / 2]
        })
        .collect()
}

/// Least-squares continuous linear spline through `(x, y)` with the given
/// knots (sorted, covering all x). Returns the value at each knot.
pub fn linear_spline(xs: &[f64], ys: &[f64], knots: &[f64]) -> Option<Vec<f64>> {
    let m = knots.len();
    if m < 2 {
        return None;
    }
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DVector::<f64>::zeros(m);
    for (&x, &y) in xs.iter().zip(ys) {
        let k = knots.partition_point(|&kn| kn <= x).clamp(1, m - 1) - 1;
        let t = ((x - knots[k]) / (knots[k + 1] - knots[k])).clamp(0.0, 1.0);
        let w = [(k, 1.0 - t), (k + 1, t)];
        for &(a, wa) in &w {
            atb[a] += wa * y;
            for &(b, wb) in &w {
                ata[(a, b)] += wa * wb;
            }
        }
    }
    for i in 0..m {
        ata[(i, i)] += 1e-9;
    }
    let sol = ata.cholesky()?.solve(&atb);
    Some(sol.iter().copied().collect())
}

/// Evenly spaced knots no further apart than `seg`.
fn spline_knots(a: f64, b: f64, seg: f64) -> Vec<f64> {
    let m = ((b - a) / seg).ceil().max(1.0) as usize;
    (0..=m).map(|i| a + (b - a) * i as f64 / m as f64).collect()
}

/// Cleans one side's edge points and fits a continuous piecewise-linear
/// curve. `None` (with a reason) when fewer than five points survive.
pub fn fit_edge_curves(
    points: &[EdgePoint],
    side: EdgeSide,
    line: &TrackLine,
    params: &CurveParams,
) -> std::result::Result<EdgeCurve, String> {
    let mut pts: Vec<EdgePoint> = points.iter().filter(|p| p.side == side).copied().collect();
    pts.sort_by(|a, b| a.station.total_cmp(&b.station));
    if pts.len() < 5 {
        return Err(format!("{side:?} edge: only {} points", pts.len()));
    }
    let ys: Vec<f64> = pts.iter().map(|p| p.y_offset).collect();
    let med = moving_median(&ys, 4);
    let pts: Vec<EdgePoint> = pts
        .into_iter()
        .zip(med)
        .filter(|(p, m)| (p.y_offset - m).abs() <= params.outlier_tolerance)
        .map(|(p, _)| p)
        .collect();
    if pts.len() < 5 {
        return Err(format!("{side:?} edge: only {} points after outlier removal", pts.len()));
    }

    // Split into pieces at long gaps; fill short gaps at 1 m.
    let mut pieces: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new()];
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            let q = &pts[i - 1];
            let gap = p.station - q.station;
            // Long gaps and lateral jumps (e.g. the edge stepping out into
            // the intersection box) both start a new piece.
            if gap > params.gap_fill || (p.y_offset - q.y_offset).abs() > params.outlier_tolerance {
                pieces.push(Vec::new());
            } else if gap > 1.5 {
                let steps = gap.floor() as usize;
                for k in 1..steps {
                    let t = k as f64 / steps as f64;
                    pieces.last_mut().unwrap().push((
                        q.station + t * gap,
                        q.y_offset + t * (p.y_offset - q.y_offset),
                        q.z + t * (p.z - q.z),
                    ));
                }
            }
        }
        pieces.last_mut().unwrap().push((p.station, p.y_offset, p.z));
    }

    let mut curve = EdgeCurve {
        side,
        stations: Vec::new(),
        laterals: Vec::new(),
        heights: Vec::new(),
        vertices: Vec::new(),
        pieces: Vec::new(),
    };
    for piece in pieces.iter().filter(|p| p.len() >= 2) {
        let (a, b) = (piece[0].0, piece[piece.len() - 1].0);
        if b - a < 1e-6 {
            continue;
        }
        let knots = spline_knots(a, b, params.segment_length);
        let xs: Vec<f64> = piece.iter().map(|p| p.0).collect();
        let lat = linear_spline(&xs, &piece.iter().map(|p| p.1).collect::<Vec<_>>(), &knots)
            .ok_or_else(|| format!("{side:?} edge: singular fit"))?;
        let zs = linear_spline(&xs, &piece.iter().map(|p| p.2).collect::<Vec<_>>(), &knots)
            .ok_or_else(|| format!("{side:?} edge: singular fit"))?;
        for k in 0..knots.len() {
            let mut emit = |s: f64, l: f64, z: f64| {
                let (o, u) = line.point_at(s);
                let xy = o + Vector2::new(-u.y, u.x) * l;
                curve.stations.push(s);
                curve.laterals.push(l);
                curve.heights.push(z);
                curve.vertices.push(Vector3::new(xy.x, xy.y, z));
            };
            emit(knots[k], lat[k], zs[k]);
            if k + 1 < knots.len() {
                emit(
                    0.5 * (knots[k] + knots[k + 1]),
                    0.5 * (lat[k] + lat[k + 1]),
                    0.5 * (zs[k] + zs[k + 1]),
                );
            }
        }
        curve.pieces.push((a, b));
    }
    if curve.pieces.is_empty() {
        return Err(format!("{side:?} edge: no piece spans more than one point"));
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Polynomial cross-section

pub fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

/// Least-squares polynomial; `None` when rank deficient.
pub fn lstsq_poly(ts: &[f64], ys: &[f64], degree: usize) -> Option<Vec<f64>> {
    let n = ts.len();
    if n <= degree {
        return None;
    }
    let a = DMatrix::from_fn(n, degree + 1, |i, j| ts[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || svd.singular_values.min() < smax * 1e-10 {
        return None;
    }
    let x = svd.solve(&b, smax * 1e-12).ok()?;
    Some(x.iter().copied().collect())
}

/// Cross-section fit of one swath.
#[derive(Debug, Clone, PartialEq)]
pub struct SwathFit {
    pub frame: SwathFrame,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    pub v_mid: f64,
    pub v_half: f64,
    pub right: f64,
    pub left: f64,
    pub median: Option<(f64, f64)>,
    pub seeds: usize,
}

impl SwathFit {
    pub fn eval(&self, v: f64) -> f64 {
        poly_eval(&self.coeffs, (v - self.v_mid) / self.v_half)
    }

    pub fn keeps_lateral(&self, v: f64) -> bool {
        v >= self.right && v <= self.left && !self.median.is_some_and(|(lo, hi)| v > lo && v < hi)
    }
}

/// Fits `z(v)` to the seeds with `v` rescaled to [−1, 1]; falls back to
/// degree 2 when there are too few seeds or the system is rank deficient.
pub fn fit_cross_section(seeds: &[(f64, f64)], right: f64, left: f64, degree: usize) -> Option<(usize, Vec<f64>, f64, f64)> {
    let v_mid = 0.5 * (left + right);
    let v_half = (0.5 * (left - right)).max(1e-3);
    let ts: Vec<f64> = seeds.iter().map(|s| (s.0 - v_mid) / v_half).collect();
    let zs: Vec<f64> = seeds.iter().map(|s| s.1).collect();
    if seeds.len() >= 10 {
        if let Some(c) = lstsq_poly(&ts, &zs, degree) {
            return Some((degree, c, v_mid, v_half));
        }
    }
    for d in [2usize, 1, 0] {
        if let Some(c) = lstsq_poly(&ts, &zs, d) {
            return Some((d, c, v_mid, v_half));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Per-approach driver

#[derive(Debug, Clone)]
pub struct SwathRecord {
    pub frame: SwathFrame,
    pub profile: LateralProfile,
    pub seeds: Vec<(f64, f64)>,
    pub edges: SwathEdges,
    pub low_confidence: bool,
}

/// Edge detections for one approach.
#[derive(Debug, Clone)]
pub struct ApproachEdges {
    pub line: TrackLine,
    pub swaths: Vec<SwathRecord>,
    pub left: Option<EdgeCurve>,
    pub right: Option<EdgeCurve>,
    /// Median (+v face, −v face).
    pub median: Option<(EdgeCurve, EdgeCurve)>,
    pub warnings: Vec<String>,
}

impl ApproachEdges {
    pub fn points(&self) -> Vec<EdgePoint> {
        self.swaths.iter().flat_map(|s| s.edges.points()).collect()
    }
}

/// Runs swath profiling and edge fitting for an approach.
pub fn detect_approach_edges(ac: &ApproachCloud, cfg: &PipelineConfig) -> Option<ApproachEdges> {
    let s_max = ac
        .cloud
        .points()
        .iter()
        .map(|p| ac.polygon.local(p.xy()).0)
        .fold(0.0, f64::max);
    let line = TrackLine::fit(&ac.polygon, &ac.track, cfg.heading_exclusion_radius, s_max)?;
    let swather = Swather::new(ac, line);
    Some(detect_with(&swather, cfg))
}

fn detect_with(swather: &Swather, cfg: &PipelineConfig) -> ApproachEdges {
    let params = EdgeParams::from(cfg);
    let len = cfg.swath_length;
    let count = (swather.line.length() / len).floor() as usize;
    let swaths: Vec<SwathRecord> = (0..count)
        .into_par_iter()
        .filter_map(|i| {
            let station = i as f64 * len;
            let sw = swather.swath(station, len).ok()?;
            if sw.points.is_empty() {
                return None;
            }
            let profile = lateral_mode_profile(&sw.points, cfg.lateral_bin, cfg.z_cell);
            let seeds = seed_groups(swather.track_in(&sw.frame));
            let scans: Vec<EdgeScan> = seeds.iter().map(|s| detect_edges(&profile, s.0, &params)).collect();
            let mut edges = SwathEdges::merge(&scans);
            for e in [&mut edges.left, &mut edges.right, &mut edges.median_left, &mut edges.median_right]
                .into_iter()
                .flatten()
            {
                e.station = station + 0.5 * len;
            }
            Some(SwathRecord {
                frame: sw.frame,
                profile,
                low_confidence: seeds.is_empty() || scans.iter().all(|s| s.low_confidence),
                seeds: seeds.iter().map(|&(v, z)| (v, z - cfg.platform_height)).collect(),
                edges,
            })
        })
        .collect();

    let points: Vec<EdgePoint> = swaths.iter().flat_map(|s| s.edges.points()).collect();
    let cp = CurveParams::from(cfg);
    let mut warnings = Vec::new();
    let line = &swather.line;
    let mut fit = |side| match fit_edge_curves(&points, side, line, &cp) {
        Ok(c) => Some(c),
        Err(w) => {
            warnings.push(w);
            None
        }
    };
    let left = fit(EdgeSide::Left);
    let right = fit(EdgeSide::Right);
    let median_count = points.iter().filter(|p| p.side == EdgeSide::MedianLeft).count();
    let median = if median_count >= 5 {
        match (fit(EdgeSide::MedianLeft), fit(EdgeSide::MedianRight)) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        }
    } else {
        None
    };
    ApproachEdges {
        line: swather.line.clone(),
        swaths,
        left,
        right,
        median,
        warnings,
    }
}

/// On-road points of one approach (S_i^w).
#[derive(Debug, Clone)]
pub struct SurfaceCloud {
    pub approach: usize,
    pub cloud: PointCloud,
    /// Index of each point in the approach cloud.
    pub source_index: Vec<u32>,
    /// Swath fit each point was accepted under.
    pub swath_of: Vec<u32>,
    /// Lateral offset of each point in its swath frame.
    pub lateral: Vec<f64>,
    pub fits: Vec<SwathFit>,
    pub edges: ApproachEdges,
    pub warnings: Vec<String>,
}

impl SurfaceCloud {
    /// Median centerline offset at a station; held constant beyond its span.
    pub fn median_center_at(&self, station: f64) -> Option<f64> {
        let (a, b) = self.edges.median.as_ref()?;
        let clamp = |c: &EdgeCurve| {
            let (lo, hi) = c.span();
            c.lateral_at(station.clamp(lo, hi), f64::INFINITY)
        };
        Some(0.5 * (clamp(a)? + clamp(b)?))
    }

    pub fn station_of(&self, i: usize) -> f64 {
        let f = &self.fits[self.swath_of[i] as usize].frame;
        f.station + 0.5 * f.length
    }
}

/// A swath's fit, its kept `(point index, lateral)` pairs, and whether the degree fell back.
type FittedSwath = (SwathFit, Vec<(u32, f64)>, bool);

/// Extracts on-road points using fitted edges.
pub fn extract_surface(ac: &ApproachCloud, approach: usize, edges: ApproachEdges, cfg: &PipelineConfig) -> SurfaceCloud {
    let swather = Swather::new(ac, edges.line.clone());
    let mut warnings = edges.warnings.clone();
    let (Some(left_c), Some(right_c)) = (&edges.left, &edges.right) else {
        warnings.push("road edge missing; surface skipped".into());
        return SurfaceCloud {
            approach,
            cloud: PointCloud::new(ac.cloud.zone),
            source_index: Vec::new(),
            swath_of: Vec::new(),
            lateral: Vec::new(),
            fits: Vec::new(),
            edges,
            warnings,
        };
    };
    let slack = 0.5 * cfg.swath_length;
    let results: Vec<FittedSwath> = edges
        .swaths
        .par_iter()
        .filter_map(|rec| {
            let mid = rec.frame.station + 0.5 * rec.frame.length;
            let left = left_c.lateral_at(mid, slack)?;
            let right = right_c.lateral_at(mid, slack)?;
            if left <= right {
                return None;
            }
            let median = edges.median.as_ref().and_then(|(ml, mr)| {
                let hi = ml.lateral_at(mid, slack)?;
                let lo = mr.lateral_at(mid, slack)?;
                (hi > lo).then_some((lo, hi))
            });
            let inside = |v: f64| v >= right && v <= left && !median.is_some_and(|(lo, hi)| v > lo && v < hi);

            let mut seeds: Vec<(f64, f64)> = rec.seeds.iter().copied().filter(|s| inside(s.0)).collect();
            let mut ref_z: Vec<f64> = seeds.iter().map(|s| s.1).collect();
            ref_z.sort_by(f64::total_cmp);
            let z_ref = ref_z.get(ref_z.len() / 2).copied().or(edges_z(&rec.edges));
            for b in rec.profile.bins.iter().filter(|b| b.support > 0 && inside(b.y)) {
                if z_ref.is_none_or(|z| (b.z_mode - z).abs() <= cfg.median_return_tolerance) {
                    seeds.push((b.y, b.z_mode));
                }
            }
            for e in rec.edges.points() {
                seeds.push((e.y_offset, e.z));
            }
            let (degree, coeffs, v_mid, v_half) = fit_cross_section(&seeds, right, left, cfg.poly_degree)?;
            let fit = SwathFit {
                frame: rec.frame,
                degree,
                coeffs,
                v_mid,
                v_half,
                right,
                left,
                median,
                seeds: seeds.len(),
            };
            let sw = swather.swath(rec.frame.station, rec.frame.length).ok()?;
            let kept: Vec<(u32, f64)> = sw
                .points
                .iter()
                .zip(&sw.index)
                .filter(|(p, _)| fit.keeps_lateral(p[1]) && (p[2] - fit.eval(p[1])).abs() <= cfg.surface_band)
                .map(|(p, &i)| (i, p[1]))
                .collect();
            Some((fit, kept, degree < cfg.poly_degree))
        })
        .collect();

    let mut fits = Vec::with_capacity(results.len());
    let mut keep: Vec<(u32, u32, f64)> = Vec::new();
    let mut fallbacks = 0;
    for (k, (fit, kept, fell_back)) in results.into_iter().enumerate() {
        fallbacks += fell_back as usize;
        keep.extend(kept.into_iter().map(|(i, v)| (i, k as u32, v)));
        fits.push(fit);
    }
    if fallbacks > 0 {
        warnings.push(format!("{fallbacks} swath(s) fell back to a low-degree cross-section fit"));
    }
    keep.sort_unstable_by_key(|k| k.0);
    let pts = ac.cloud.points();
    let points = keep.iter().map(|k| pts[k.0 as usize]).collect();
    SurfaceCloud {
        approach,
        cloud: PointCloud::from_points_unchecked(ac.cloud.zone, points),
        source_index: keep.iter().map(|k| k.0).collect(),
        swath_of: keep.iter().map(|k| k.1).collect(),
        lateral: keep.iter().map(|k| k.2).collect(),
        fits,
        edges,
        warnings,
    }
}

fn edges_z(e: &SwathEdges) -> Option<f64> {
    let zs: Vec<f64> = e.points().map(|p| p.z).collect();
    (!zs.is_empty()).then(|| zs.iter().sum::<f64>() / zs.len() as f64)
}

/// Edge detection followed by surface extraction.
pub fn process_approach(ac: &ApproachCloud, approach: usize, cfg: &PipelineConfig) -> Option<SurfaceCloud> {
    let edges = detect_approach_edges(ac, cfg)?;
    Some(extract_surface(ac, approach, edges, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcio::{GeoPoint, UtmZone};
    use crate::segment::{build_approach_polygons, ApproachKind, PolygonParams};
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zone() -> UtmZone {
        UtmZone::new(10, true).unwrap()
    }

    fn pose(t: f64, x: f64, y: f64, z: f64) -> PoseSample {
        PoseSample {
            t,
            position: Vector3::new(x, y, z),
            attitude: UnitQuaternion::identity(),
        }
    }

    /// Approach along +x from the origin with the given points and a track at y = 0.
    fn approach(points: Vec<GeoPoint>, axis: Vector2<f64>) -> ApproachCloud {
        let mut polygon = build_approach_polygons(1, &[axis], Vector2::zeros(), 60.0, &PolygonParams {
            inner_offset: 0.0,
            half_width: 25.0,
        })
        .remove(0);
        polygon.kind = ApproachKind::Mixed;
        let track = (0..=1200).map(|i| {
            let p = axis * (i as f64 * 0.05);
            pose(i as f64 * 0.005, p.x, p.y, 2.0)
        });
        ApproachCloud {
            polygon,
            cloud: PointCloud::from_points(zone(), points).unwrap(),
            source_index: Vec::new(),
            track: track.collect(),
        }
    }

    fn straight_line(axis: Vector2<f64>) -> TrackLine {
        TrackLine::from_polyline((0..=60).map(|i| axis * i as f64).collect()).unwrap()
    }

    #[test]
    fn straight_swath_selects_x_window() {
        let pts: Vec<GeoPoint> = (0..400).map(|i| GeoPoint::new(i as f64 * 0.05, (i % 7) as f64 - 3.0, 0.0, 0.1)).collect();
        let ac = approach(pts.clone(), Vector2::x());
        let sw = extract_swath(&ac, &straight_line(Vector2::x()), 10.0, 1.0).unwrap();
        let want: Vec<u32> = (0..400u32).filter(|&i| (10.0..11.0).contains(&(i as f64 * 0.05))).collect();
        assert_eq!(sw.index, want);
        for (p, &i) in sw.points.iter().zip(&sw.index) {
            assert!((p[1] - pts[i as usize].northing).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_swath_selects_same_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<GeoPoint> = (0..3000)
            .map(|_| GeoPoint::new(rng.random_range(0.0..40.0), rng.random_range(-10.0..10.0), 0.0, 0.1))
            .collect();
        let rot = nalgebra::Rotation2::new(30f64.to_radians());
        let turned: Vec<GeoPoint> = pts
            .iter()
            .map(|p| {
                let q = rot * p.xy();
                GeoPoint::new(q.x, q.y, p.altitude, p.intensity)
            })
            .collect();
        let a = extract_swath(&approach(pts, Vector2::x()), &straight_line(Vector2::x()), 17.0, 1.0).unwrap();
        let axis = rot * Vector2::x();
        let b = extract_swath(&approach(turned, axis), &straight_line(axis), 17.0, 1.0).unwrap();
        assert_eq!(a.index, b.index);
    }

    #[test]
    fn swather_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<GeoPoint> = (0..5000)
            .map(|_| GeoPoint::new(rng.random_range(0.0..55.0), rng.random_range(-20.0..20.0), 0.0, 0.1))
            .collect();
        let ac = approach(pts, Vector2::x());
        // Gently curving reference line.
        let line = TrackLine::from_polyline((0..=58).map(|i| Vector2::new(i as f64, 0.002 * (i * i) as f64)).collect()).unwrap();
        let swather = Swather::new(&ac, line.clone());
        for s in [0.0, 7.5, 23.0, 49.0] {
            assert_eq!(swather.swath(s, 1.0).unwrap().index, extract_swath(&ac, &line, s, 1.0).unwrap().index);
        }
    }

    #[test]
    fn station_beyond_track_is_range_error() {
        let ac = approach(vec![GeoPoint::new(1.0, 0.0, 0.0, 0.1)], Vector2::x());
        let err = extract_swath(&ac, &straight_line(Vector2::x()), 75.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::StationRange { .. }));
    }

    #[test]
    fn curved_track_swaths_cover_near_track_points() {
        // Arc of radius 80 m; points within 1 m of it; swaths of 1 m along it.
        let r = 80.0;
        let line = TrackLine::from_polyline(
            (0..=60)
                .map(|i| {
                    let a = i as f64 / r;
                    Vector2::new(r * a.sin(), r - r * a.cos())
                })
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = Vec::new();
        for _ in 0..20_000 {
            let s = rng.random_range(1.0..58.0);
            let l = rng.random_range(-1.0..1.0);
            let (o, u) = line.point_at(s);
            let p = o + Vector2::new(-u.y, u.x) * l;
            pts.push(GeoPoint::new(p.x, p.y, 0.0, 0.1));
        }
        let ac = approach(pts.clone(), Vector2::x());
        let swather = Swather::new(&ac, line.clone());
        let mut hits = vec![0u32; pts.len()];
        for i in 0..(line.length().floor() as usize) {
            for &k in &swather.swath(i as f64, 1.0).unwrap().index {
                hits[k as usize] += 1;
            }
        }
        let once = hits.iter().filter(|&&h| h == 1).count() as f64 / pts.len() as f64;
        assert!(once >= 0.99, "covered exactly once: {once}");
    }

    #[test]
    fn constant_bin_mode_is_exact() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [0.0, 0.01 + i as f64 * 0.001, 1.00]).collect();
        let prof = lateral_mode_profile(&pts, 0.05, 0.02);
        assert_eq!(prof.bins.len(), 1);
        assert_eq!(prof.bins[0].z_mode, 1.00);
        assert_eq!(prof.bins[0].support, 20);
    }

    #[test]
    fn overhang_does_not_move_mode() {
        let mut pts: Vec<[f64; 3]> = (0..10).map(|i| [0.0, 0.02, 0.001 * i as f64]).collect();
        pts.extend((0..3).map(|i| [0.0, 0.02, 1.5 + 0.001 * i as f64]));
        let prof = lateral_mode_profile(&pts, 0.05, 0.02);
        assert!(prof.bins[0].z_mode.abs() < 0.01);
    }

    #[test]
    fn empty_bins_carry_zero_support() {
        let pts = vec![[0.0, 0.01, 0.0], [0.0, 0.26, 0.0]];
        let prof = lateral_mode_profile(&pts, 0.05, 0.02);
        assert_eq!(prof.bins.len(), 6);
        assert!(prof.bins[1..5].iter().all(|b| b.support == 0));
    }

    /// Exhaustive histogram argmax: smallest cell index among the most
    /// populated cells, counted independently of the sort-based scan.
    fn oracle_mode(zs: &[f64], cell: f64) -> f64 {
        let keys: Vec<i64> = zs.iter().map(|z| (z / cell).floor() as i64).collect();
        let lo = *keys.iter().min().unwrap();
        let hi = *keys.iter().max().unwrap();
        let mut best = (0usize, lo);
        for k in lo..=hi {
            let c = keys.iter().filter(|&&q| q == k).count();
            if c > best.0 {
                best = (c, k);
            }
        }
        let inside: Vec<f64> = zs.iter().zip(&keys).filter(|(_, &k)| k == best.1).map(|(z, _)| *z).collect();
        inside.iter().sum::<f64>() / inside.len() as f64
    }

    proptest! {
        #[test]
        fn mode_matches_histogram_oracle(
            a in prop::collection::vec(-0.05f64..0.05, 1..30),
            b in prop::collection::vec(1.0f64..1.6, 0..30),
        ) {
            let mut zs: Vec<f64> = a.iter().chain(&b).copied().collect();
            let want = oracle_mode(&zs, 0.02);
            let got = z_mode(&mut zs, 0.02).unwrap();
            prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    fn profile_from(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> LateralProfile {
        let mut pts = Vec::new();
        let mut y = lo + 0.005;
        while y < hi {
            pts.push([0.0, y, f(y)]);
            y += 0.01;
        }
        lateral_mode_profile(&pts, 0.05, 0.02)
    }

    fn edge_of(scan: &EdgeScan, side: EdgeSide) -> Vec<f64> {
        scan.edges.iter().filter(|e| e.side == side).map(|e| e.y_offset).collect()
    }

    #[test]
    fn curbs_at_seven_meters() {
        let prof = profile_from(|y| if y.abs() <= 7.0 { 0.0 } else { 0.15 }, -12.0, 12.0);
        let scan = detect_edges(&prof, 0.0, &EdgeParams::default());
        let l = edge_of(&scan, EdgeSide::Left);
        let r = edge_of(&scan, EdgeSide::Right);
        assert_eq!((l.len(), r.len()), (1, 1));
        assert!((l[0] - 7.0).abs() <= 0.05 && (r[0] + 7.0).abs() <= 0.05, "{l:?} {r:?}");
    }

    #[test]
    fn raised_median_gives_median_edges() {
        let prof = profile_from(
            |y| if y.abs() > 7.0 || y.abs() <= 1.0 { 0.15 } else { 0.0 },
            -12.0,
            12.0,
        );
        let scan = detect_edges(&prof, 3.5, &EdgeParams::default());
        let ml = edge_of(&scan, EdgeSide::MedianLeft);
        let mr = edge_of(&scan, EdgeSide::MedianRight);
        assert!((ml[0] - 1.0).abs() <= 0.05 && (mr[0] + 1.0).abs() <= 0.05, "{ml:?} {mr:?}");
        assert!((edge_of(&scan, EdgeSide::Left)[0] - 7.0).abs() <= 0.05);
        assert!((edge_of(&scan, EdgeSide::Right)[0] + 7.0).abs() <= 0.05);
    }

    #[test]
    fn support_gap_ends_the_road() {
        let mut pts = Vec::new();
        for i in 0..800 {
            let y = -5.0 + i as f64 * 0.01;
            if y < 2.0 {
                pts.push([0.0, y, 0.0]);
            }
        }
        pts.push([0.0, 4.0, 0.0]);
        let prof = lateral_mode_profile(&pts, 0.05, 0.02);
        let scan = detect_edges(&prof, 0.0, &EdgeParams::default());
        let l = scan.edges.iter().find(|e| e.side == EdgeSide::Left).unwrap();
        assert!((l.y_offset - 2.0).abs() <= 0.05);
        assert_eq!(l.confidence, 0.5);
        // Walking off the end of the profile is open road, not an edge.
        assert!(edge_of(&scan, EdgeSide::Right).is_empty());
    }

    #[test]
    fn unsupported_seed_is_low_confidence() {
        let prof = profile_from(|_| 0.0, 5.0, 6.0);
        let scan = detect_edges(&prof, 0.0, &EdgeParams::default());
        assert!(scan.low_confidence && scan.edges.is_empty());
    }

    fn edge_pts(side: EdgeSide, mut f: impl FnMut(f64) -> f64, n: usize) -> Vec<EdgePoint> {
        (0..n)
            .map(|i| {
                let s = 10.5 + i as f64;
                EdgePoint {
                    station: s,
                    y_offset: f(s),
                    z: 0.0,
                    side,
                    confidence: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn colinear_points_fit_exactly() {
        let line = straight_line(Vector2::x());
        let pts = edge_pts(EdgeSide::Left, |s| 5.0 + 0.02 * s, 40);
        let c = fit_edge_curves(&pts, EdgeSide::Left, &line, &CurveParams::default()).unwrap();
        for p in &pts {
            assert!((c.lateral_at(p.station, 0.0).unwrap() - p.y_offset).abs() < 1e-6);
        }
        for w in c.vertices.windows(2) {
            assert!((w[1] - w[0]).xy().norm() <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn single_outlier_is_removed() {
        let line = straight_line(Vector2::x());
        let mut pts = edge_pts(EdgeSide::Right, |_| -7.0, 50);
        pts[20].y_offset += 3.0;
        let c = fit_edge_curves(&pts, EdgeSide::Right, &line, &CurveParams::default()).unwrap();
        assert!(c.laterals.iter().all(|l| (l + 7.0).abs() < 1e-6));
    }

    #[test]
    fn too_few_points_is_absent() {
        let line = straight_line(Vector2::x());
        let pts = edge_pts(EdgeSide::Left, |_| 3.0, 4);
        assert!(fit_edge_curves(&pts, EdgeSide::Left, &line, &CurveParams::default()).is_err());
    }

    #[test]
    fn noisy_curb_fit_beats_noise() {
        let line = straight_line(Vector2::x());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::Normal::new(0.0, 0.05).unwrap();
        let truth = |s: f64| 6.0 + 0.01 * s;
        let pts = edge_pts(EdgeSide::Left, |s| truth(s) + rng.sample(normal), 45);
        let c = fit_edge_curves(&pts, EdgeSide::Left, &line, &CurveParams::default()).unwrap();
        let rms = (c.stations.iter().zip(&c.laterals).map(|(s, l)| (l - truth(*s)).powi(2)).sum::<f64>() / c.stations.len() as f64).sqrt();
        assert!(rms < 0.05, "rms {rms}");
    }

    #[test]
    fn lateral_step_starts_new_piece() {
        let line = straight_line(Vector2::x());
        let pts = edge_pts(EdgeSide::Right, |s| if s < 17.0 { -11.8 } else { -8.2 }, 50);
        let c = fit_edge_curves(&pts, EdgeSide::Right, &line, &CurveParams::default()).unwrap();
        assert_eq!(c.pieces.len(), 2);
        assert!((c.lateral_at(30.0, 0.0).unwrap() + 8.2).abs() < 1e-6);
        assert!((c.lateral_at(18.0, 0.0).unwrap() + 8.2).abs() < 1e-6);
        assert!((c.lateral_at(12.0, 0.0).unwrap() + 11.8).abs() < 1e-6);
    }

    #[test]
    fn gaps_split_and_fill() {
        let line = straight_line(Vector2::x());
        let mut pts = edge_pts(EdgeSide::Left, |_| 4.0, 10);
        pts.extend(edge_pts(EdgeSide::Left, |_| 4.0, 10).into_iter().map(|mut p| {
            p.station += 25.0;
            p
        }));
        pts.retain(|p| !(p.station > 13.0 && p.station < 18.0));
        let c = fit_edge_curves(&pts, EdgeSide::Left, &line, &CurveParams::default()).unwrap();
        assert_eq!(c.pieces.len(), 2);
        assert!(c.lateral_at(15.0, 0.0).is_some());
        assert!(c.lateral_at(25.0, 0.0).is_none());
    }

    #[test]
    fn polynomial_recovers_quadratic() {
        let seeds: Vec<(f64, f64)> = (0..50).map(|i| {
            let v = -8.0 + i as f64 * 0.3;
            (v, 0.3 - 0.001 * v * v)
        }).collect();
        let (deg, c, m, h) = fit_cross_section(&seeds, -8.0, 7.0, 6).unwrap();
        assert_eq!(deg, 6);
        for v in [-7.5, 0.0, 6.3] {
            assert!((poly_eval(&c, (v - m) / h) - (0.3 - 0.001 * v * v)).abs() < 1e-9);
        }
    }

    #[test]
    fn few_seeds_fall_back_to_quadratic() {
        let seeds: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 0.0)).collect();
        let (deg, ..) = fit_cross_section(&seeds, 0.0, 5.0, 6).unwrap();
        assert_eq!(deg, 2);
    }

    /// Flat road |y| ≤ 7 with curbs, optional car box.
    fn road_scene(with_car: bool) -> (Vec<GeoPoint>, Vec<bool>) {
        let mut pts = Vec::new();
        let mut clutter = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..120_000 {
            let x = rng.random_range(0.0..40.0);
            let y: f64 = rng.random_range(-10.0..10.0);
            let z = if y.abs() <= 7.0 { 0.0 } else { 0.15 };
            pts.push(GeoPoint::new(x, y, z, 0.2));
            clutter.push(false);
        }
        if with_car {
            for _ in 0..3000 {
                pts.push(GeoPoint::new(rng.random_range(20.0..24.5), rng.random_range(2.0..3.8), 1.2, 0.3));
                clutter.push(true);
            }
        }
        (pts, clutter)
    }

    #[test]
    fn planar_road_keeps_all_on_plane_points() {
        let (pts, _) = road_scene(false);
        let ac = approach(pts.clone(), Vector2::x());
        let sc = process_approach(&ac, 0, &PipelineConfig::default()).unwrap();
        assert!(sc.edges.left.is_some() && sc.edges.right.is_some());
        let kept: std::collections::HashSet<u32> = sc.source_index.iter().copied().collect();
        let road: Vec<usize> = (0..pts.len()).filter(|&i| pts[i].northing.abs() < 6.95 && pts[i].easting < 39.0).collect();
        let missing = road.iter().filter(|&&i| !kept.contains(&(i as u32))).count();
        assert_eq!(missing, 0);
        assert!(sc.source_index.iter().all(|&i| pts[i as usize].altitude == 0.0));
    }

    #[test]
    fn parked_car_is_excluded() {
        let (pts, clutter) = road_scene(true);
        let ac = approach(pts, Vector2::x());
        let sc = process_approach(&ac, 0, &PipelineConfig::default()).unwrap();
        assert!(sc.source_index.iter().all(|&i| !clutter[i as usize]));
        for (i, &k) in sc.swath_of.iter().enumerate() {
            let fit = &sc.fits[k as usize];
            assert!((sc.cloud.points()[i].altitude - fit.eval(sc.lateral[i])).abs() <= 0.2);
        }
    }
}
