//! Line extraction from branch masks and the lane-level interpretation:
//! stop-bar selection, the lane-divider decision tree and centerline nodes.
//!
//! Hough lines use integer pixel coordinates: `rho = round(x·cosθ + y·sinθ)`
//! with `θ` in `[0°, 180°)`. Everything downstream works in the approach's
//! local frame (station along the axis, lateral along its left normal).

use std::cmp::Ordering;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::mapmsg::{ReviewCode, ReviewItem, Severity};
use crate::raster::{Mask, RasterGeometry};
use crate::segment::ApproachPolygon;

// ---------------------------------------------------------------------------
// Hough transform

/// Vote counts over `(theta, rho)`, theta-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulator {
    pub n_theta: usize,
    pub rho_offset: i64,
    pub n_rho: usize,
    pub votes: Vec<u32>,
}

impl Accumulator {
    pub fn get(&self, theta_index: usize, rho: i64) -> u32 {
        let r = rho + self.rho_offset;
        if r < 0 || r as usize >= self.n_rho {
            return 0;
        }
        self.votes[theta_index * self.n_rho + r as usize]
    }
}

fn theta_count(theta_step: f64) -> usize {
    (180.0 / theta_step).round() as usize
}

fn trig_table(theta_step: f64) -> Vec<(f64, f64)> {
    (0..theta_count(theta_step))
        .map(|i| {
            let t = (i as f64 * theta_step).to_radians();
            (t.cos(), t.sin())
        })
        .collect()
}

pub fn hough_accumulator(mask: &Mask, theta_step: f64) -> Accumulator {
    let trig = trig_table(theta_step);
    let diag = (((mask.width.max(1) - 1).pow(2) + (mask.height.max(1) - 1).pow(2)) as f64).sqrt().ceil() as i64 + 1;
    let n_rho = (2 * diag + 1) as usize;
    let mut votes = vec![0u32; trig.len() * n_rho];
    for (x, y) in mask.pixels() {
        let (xf, yf) = (x as f64, y as f64);
        for (ti, &(c, s)) in trig.iter().enumerate() {
            let rho = (xf * c + yf * s).round() as i64;
            votes[ti * n_rho + (rho + diag) as usize] += 1;
        }
    }
    Accumulator {
        n_theta: trig.len(),
        rho_offset: diag,
        n_rho,
        votes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakParams {
    pub theta_step: f64,
    /// Minimum votes (at least 1).
    pub threshold: u32,
    pub window_rho: i64,
    pub window_theta: f64,
}

/// Whether two accumulator cells suppress each other. Lines near θ = 0 and
/// θ = 180° are the same family with opposite rho.
pub fn in_window(a: (f64, i64), b: (f64, i64), window_theta: f64, window_rho: i64) -> bool {
    let dt = (a.0 - b.0).abs();
    (dt <= window_theta + 1e-9 && (a.1 - b.1).abs() <= window_rho)
        || (180.0 - dt <= window_theta + 1e-9 && (a.1 + b.1).abs() <= window_rho)
}

/// Greedy non-maximum suppression: cells at or above the threshold are
/// visited by (votes desc, θ asc, ρ asc) and kept unless a kept peak lies
/// within the window. Returns `(theta_index, rho, votes)`, strongest first.
pub fn hough_peaks(acc: &Accumulator, p: &PeakParams) -> Vec<(usize, i64, u32)> {
    let threshold = p.threshold.max(1);
    let mut cells: Vec<(usize, i64, u32)> = Vec::new();
    for ti in 0..acc.n_theta {
        for r in 0..acc.n_rho {
            let v = acc.votes[ti * acc.n_rho + r];
            if v >= threshold {
                cells.push((ti, r as i64 - acc.rho_offset, v));
            }
        }
    }
    cells.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut peaks: Vec<(usize, i64, u32)> = Vec::new();
    for c in cells {
        let here = (c.0 as f64 * p.theta_step, c.1);
        if peaks
            .iter()
            .all(|q| !in_window((q.0 as f64 * p.theta_step, q.1), here, p.window_theta, p.window_rho))
        {
            peaks.push(c);
        }
    }
    peaks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedLine {
    /// Signed normal distance from the image origin, pixels.
    pub rho: i64,
    /// Degrees in [0, 180).
    pub theta: f64,
    pub votes: u32,
    /// Extreme projections onto the line of mask pixels within 1 px of it.
    pub endpoints: [[f64; 2]; 2],
}

pub fn hough_lines(mask: &Mask, p: &PeakParams) -> Vec<DetectedLine> {
    if mask.count() == 0 {
        return Vec::new();
    }
    let acc = hough_accumulator(mask, p.theta_step);
    hough_peaks(&acc, p)
        .into_iter()
        .map(|(ti, rho, votes)| {
            let theta = ti as f64 * p.theta_step;
            let (s, c) = theta.to_radians().sin_cos();
            let (mut t0, mut t1) = (f64::INFINITY, f64::NEG_INFINITY);
            for (x, y) in mask.pixels() {
                let (xf, yf) = (x as f64, y as f64);
                if (xf * c + yf * s - rho as f64).abs() <= 1.0 {
                    let t = -xf * s + yf * c;
                    t0 = t0.min(t);
                    t1 = t1.max(t);
                }
            }
            let foot = |t: f64| [rho as f64 * c - t * s, rho as f64 * s + t * c];
            DetectedLine {
                rho,
                theta,
                votes,
                endpoints: [foot(t0), foot(t1)],
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Refined markings in the approach frame

/// Maps continuous image coordinates (pixel centers at `+0.5`) to
/// approach-local `(station, lateral)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageFrame {
    pub station0: f64,
    pub lateral0: f64,
    pub pixel_size: f64,
}

impl ImageFrame {
    /// The raster must be aligned with the polygon axis.
    pub fn new(geometry: &RasterGeometry, polygon: &ApproachPolygon) -> Self {
        debug_assert!((geometry.axis() - polygon.axis).norm() < 1e-9);
        let (station0, lateral0) = polygon.local(geometry.to_world(0.0, 0.0));
        ImageFrame {
            station0,
            lateral0,
            pixel_size: geometry.pixel_size,
        }
    }

    pub fn local(&self, x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(self.station0 + x * self.pixel_size, self.lateral0 + y * self.pixel_size)
    }
}

/// A painted line after least-squares refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkingLine {
    /// Centroid `(station, lateral)`.
    pub center: [f64; 2],
    /// Unit direction; station component ≥ 0, lateral ≥ 0 when perpendicular.
    pub direction: [f64; 2],
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub length: f64,
    /// Share of the span covered by paint.
    pub duty: f64,
    pub votes: u32,
    pub pixels: usize,
}

impl MarkingLine {
    /// Straight segment with the given duty (used for constructed inputs).
    pub fn segment(start: [f64; 2], end: [f64; 2], duty: f64) -> Self {
        let d = Vector2::new(end[0] - start[0], end[1] - start[1]);
        let length = d.norm();
        let mut u = d / length;
        let (mut a, mut b) = (start, end);
        if u.x < -1e-12 || (u.x.abs() <= 1e-12 && u.y < 0.0) {
            u = -u;
            std::mem::swap(&mut a, &mut b);
        }
        MarkingLine {
            center: [0.5 * (start[0] + end[0]), 0.5 * (start[1] + end[1])],
            direction: [u.x, u.y],
            start: a,
            end: b,
            length,
            duty,
            votes: 0,
            pixels: 0,
        }
    }

    /// Angle between the line and the approach axis, degrees in [0, 90].
    pub fn angle_to_axis(&self) -> f64 {
        self.direction[1].abs().atan2(self.direction[0].abs()).to_degrees()
    }

    /// Station where the (extended) line crosses a lateral offset.
    pub fn station_at(&self, lateral: f64) -> Option<f64> {
        let [ds, dl] = self.direction;
        (dl.abs() > 1e-9).then(|| self.center[0] + (lateral - self.center[1]) * ds / dl)
    }

    pub fn lateral_at(&self, station: f64) -> Option<f64> {
        let [ds, dl] = self.direction;
        (ds.abs() > 1e-9).then(|| self.center[1] + (station - self.center[0]) * dl / ds)
    }

    fn distance_to(&self, p: [f64; 2]) -> f64 {
        let [ds, dl] = self.direction;
        ((p[0] - self.center[0]) * -dl + (p[1] - self.center[1]) * ds).abs()
    }
}

/// Principal axis of a point set: (centroid, unit direction, variance across).
fn pca(points: &[Vector2<f64>]) -> (Vector2<f64>, Vector2<f64>, f64) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let dir = Vector2::new(angle.cos(), angle.sin());
    let across = Vector2::new(-dir.y, dir.x);
    let var = points.iter().map(|p| (p - c).dot(&across).powi(2)).sum::<f64>() / n;
    (c, dir, var)
}

/// Fits a line to the mask pixels around a Hough peak.
pub fn refine_line(mask: &Mask, line: &DetectedLine, frame: &ImageFrame, duty_bin: f64) -> Option<MarkingLine> {
    const GATHER: f64 = 12.0;
    let (s, c) = line.theta.to_radians().sin_cos();
    let near: Vec<Vector2<f64>> = mask
        .pixels()
        .filter(|&(x, y)| (x as f64 * c + y as f64 * s - line.rho as f64).abs() <= GATHER)
        .map(|(x, y)| Vector2::new(x as f64 + 0.5, y as f64 + 0.5))
        .collect();
    if near.len() < 3 {
        return None;
    }
    let (c0, d0, var0) = pca(&near);
    let band = (2.5 * var0.sqrt()).max(1.0);
    let across = Vector2::new(-d0.y, d0.x);
    let kept: Vec<Vector2<f64>> = near.into_iter().filter(|p| (p - c0).dot(&across).abs() <= band).collect();
    if kept.len() < 3 {
        return None;
    }
    let (center, mut dir, _) = pca(&kept);
    if dir.x < -1e-12 || (dir.x.abs() <= 1e-12 && dir.y < 0.0) {
        dir = -dir;
    }
    let mut ts: Vec<f64> = kept.iter().map(|p| (p - center).dot(&dir)).collect();
    ts.sort_by(f64::total_cmp);
    let (t0, t1) = (ts[0], ts[ts.len() - 1]);
    let bin_px = duty_bin / frame.pixel_size;
    let nbins = (((t1 - t0) / bin_px).floor() as usize + 1).max(1);
    let mut occupied = vec![false; nbins];
    for t in &ts {
        occupied[(((t - t0) / bin_px) as usize).min(nbins - 1)] = true;
    }
    let duty = occupied.iter().filter(|&&b| b).count() as f64 / nbins as f64;
    let to_local = |p: Vector2<f64>| {
        let l = frame.local(p.x, p.y);
        [l.x, l.y]
    };
    Some(MarkingLine {
        center: to_local(center),
        direction: [dir.x, dir.y],
        start: to_local(center + dir * t0),
        end: to_local(center + dir * t1),
        length: (t1 - t0) * frame.pixel_size,
        duty,
        votes: line.votes,
        pixels: kept.len(),
    })
}

/// Drops near-duplicates (within 3° and 5 pixels), keeping the best supported.
pub fn dedupe_markings(mut lines: Vec<MarkingLine>, pixel_size: f64) -> Vec<MarkingLine> {
    lines.sort_by(|a, b| {
        b.pixels
            .cmp(&a.pixels)
            .then(a.center[0].total_cmp(&b.center[0]))
            .then(a.center[1].total_cmp(&b.center[1]))
    });
    let mut out: Vec<MarkingLine> = Vec::new();
    for l in lines {
        let dup = out.iter().any(|k| {
            let cos = (k.direction[0] * l.direction[0] + k.direction[1] * l.direction[1]).abs().min(1.0);
            cos.acos().to_degrees() < 3.0 && k.distance_to(l.center) < 5.0 * pixel_size
        });
        if !dup {
            out.push(l);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Stop bar

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopBar {
    pub approach: usize,
    pub branch: u8,
    /// Endpoints in approach-local `(station, lateral)`.
    pub local: [[f64; 2]; 2],
    /// Endpoints in world XY.
    pub world: [[f64; 2]; 2],
    pub confidence: f64,
    pub line: MarkingLine,
}

impl StopBar {
    pub fn midpoint(&self) -> Vector2<f64> {
        Vector2::new(
            0.5 * (self.world[0][0] + self.world[1][0]),
            0.5 * (self.world[0][1] + self.world[1][1]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopBarOutcome {
    None,
    Single,
    Selected,
}

/// Applies the stop-bar rule. `intersection_end` is the station of the
/// intersection-side image edge. Returns the index into `lines`.
///
/// Candidates are near-perpendicular lines spanning enough of the branch.
/// With two or more candidates in the crosswalk window, the pick is the
/// second farthest among the window's members plus the first candidate
/// beyond it (the stop bar behind a crosswalk pair); otherwise the nearest.
pub fn select_stop_bar(
    lines: &[MarkingLine],
    intersection_end: f64,
    branch_width: f64,
    cfg: &PipelineConfig,
) -> (Option<usize>, StopBarOutcome) {
    let mut cands: Vec<usize> = (0..lines.len())
        .filter(|&i| {
            let l = &lines[i];
            l.angle_to_axis() >= 90.0 - cfg.orthogonal_tolerance_deg && l.length >= cfg.stop_bar_min_span * branch_width
        })
        .collect();
    let key = |i: &usize| {
        let l = &lines[*i];
        (l.center[0] - intersection_end, l.center[1], l.length)
    };
    cands.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    });
    match cands.len() {
        0 => return (None, StopBarOutcome::None),
        1 => return (Some(cands[0]), StopBarOutcome::Single),
        _ => {}
    }
    let in_window = cands.iter().take_while(|i| key(i).0 <= cfg.crosswalk_window).count();
    let pick = if in_window >= 2 {
        let considered = (in_window + 1).min(cands.len());
        cands[considered - 2]
    } else {
        cands[0]
    };
    (Some(pick), StopBarOutcome::Selected)
}

// ---------------------------------------------------------------------------
// Lane dividers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Solid,
    Dashed,
    RoadEdge,
    MedianEdge,
    /// Unpainted split declared from width alone.
    Inferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneBoundary {
    pub lateral: f64,
    pub kind: BoundaryKind,
}

/// Lane boundaries of one branch, strictly increasing in lateral offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneEdgeSet {
    pub boundaries: Vec<LaneBoundary>,
}

impl LaneEdgeSet {
    /// `(lower, upper)` boundary pairs.
    pub fn lanes(&self) -> impl Iterator<Item = (LaneBoundary, LaneBoundary)> + '_ {
        self.boundaries.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneParams {
    pub parallel_tolerance_deg: f64,
    pub solid_duty: f64,
    pub dashed_duty: f64,
    pub min_lane_width: f64,
}

impl From<&PipelineConfig> for LaneParams {
    fn from(c: &PipelineConfig) -> Self {
        LaneParams {
            parallel_tolerance_deg: c.parallel_tolerance_deg,
            solid_duty: c.solid_duty,
            dashed_duty: c.dashed_duty,
            min_lane_width: c.min_lane_width,
        }
    }
}

fn lane_budget(bounds: &[f64], min_width: f64) -> i64 {
    bounds
        .windows(2)
        .map(|w| ((w[1] - w[0]) / min_width + 1e-9).floor() as i64 - 1)
        .filter(|&b| b > 0)
        .sum()
}

/// The lane-divider decision tree for one branch bounded by `lo` and `hi`.
/// Returns the boundary set and warnings for rejected dividers.
pub fn detect_lane_dividers(
    lines: &[MarkingLine],
    lo: LaneBoundary,
    hi: LaneBoundary,
    p: &LaneParams,
) -> (LaneEdgeSet, Vec<String>) {
    let width = hi.lateral - lo.lateral;
    let mut warnings = Vec::new();
    if width < 2.0 * p.min_lane_width {
        return (LaneEdgeSet { boundaries: vec![lo, hi] }, warnings);
    }

    let mut cands: Vec<LaneBoundary> = Vec::new();
    for l in lines.iter().filter(|l| l.angle_to_axis() <= p.parallel_tolerance_deg) {
        let kind = if l.duty >= p.solid_duty {
            BoundaryKind::Solid
        } else if l.duty >= p.dashed_duty {
            BoundaryKind::Dashed
        } else {
            continue;
        };
        if l.center[1] <= lo.lateral || l.center[1] >= hi.lateral {
            warnings.push(format!("divider at lateral {:.2} m lies outside the road edges; rejected", l.center[1]));
            continue;
        }
        cands.push(LaneBoundary {
            lateral: l.center[1],
            kind,
        });
    }
    // Solid first, then dashed; each from the road edge inward.
    let road_edges: Vec<f64> = [lo, hi]
        .iter()
        .filter(|b| b.kind == BoundaryKind::RoadEdge)
        .map(|b| b.lateral)
        .collect();
    let depth = |x: f64| {
        if road_edges.is_empty() {
            hi.lateral - x
        } else {
            road_edges.iter().map(|r| (r - x).abs()).fold(f64::INFINITY, f64::min)
        }
    };
    cands.sort_by(|a, b| {
        (a.kind != BoundaryKind::Solid)
            .cmp(&(b.kind != BoundaryKind::Solid))
            .then(depth(a.lateral).total_cmp(&depth(b.lateral)))
            .then(a.lateral.total_cmp(&b.lateral))
    });

    let mut bounds = vec![lo, hi];
    for c in cands {
        let lats: Vec<f64> = bounds.iter().map(|b| b.lateral).collect();
        if lane_budget(&lats, p.min_lane_width) < 1 {
            break;
        }
        let k = bounds.partition_point(|b| b.lateral < c.lateral);
        let (below, above) = (c.lateral - bounds[k - 1].lateral, bounds[k].lateral - c.lateral);
        if below >= p.min_lane_width && above >= p.min_lane_width {
            bounds.insert(k, c);
        }
    }
    if bounds.len() == 2 {
        bounds.insert(
            1,
            LaneBoundary {
                lateral: 0.5 * (lo.lateral + hi.lateral),
                kind: BoundaryKind::Inferred,
            },
        );
    }
    (LaneEdgeSet { boundaries: bounds }, warnings)
}

// ---------------------------------------------------------------------------
// Lanes and centerline nodes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneDirection {
    Ingress,
    Egress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    /// Assigned when the intersection's lanes are collected; 0 until then.
    pub id: u32,
    pub approach: usize,
    pub branch: u8,
    pub direction: LaneDirection,
    /// Centerline lateral offset in the approach frame.
    pub lateral: f64,
    pub width: f64,
    pub stations: Vec<f64>,
    /// World XY of the centerline nodes, from the intersection outward.
    pub nodes: Vec<[f64; 2]>,
    /// Lane between a solid line and the median.
    pub turn_pocket: bool,
}

/// Stations `start, start + D, …` not beyond `end`.
pub fn node_stations(start: f64, end: f64, spacing: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let s = start + k as f64 * spacing;
        if s > end + 1e-9 {
            break;
        }
        out.push(s);
        k += 1;
    }
    out
}

/// One lane per boundary pair. Ingress lanes start on the stop bar when
/// there is one; otherwise lanes start at `start`. Lanes with fewer than
/// two nodes are returned separately.
#[allow(clippy::too_many_arguments)]
pub fn build_centerlines(
    edges: &LaneEdgeSet,
    stop_bar: Option<&MarkingLine>,
    start: f64,
    end: f64,
    spacing: f64,
    polygon: &ApproachPolygon,
    approach: usize,
    branch: u8,
    direction: LaneDirection,
) -> (Vec<Lane>, Vec<Lane>) {
    let mut good = Vec::new();
    let mut degenerate = Vec::new();
    for (a, b) in edges.lanes() {
        let lateral = 0.5 * (a.lateral + b.lateral);
        let s0 = stop_bar.and_then(|l| l.station_at(lateral)).unwrap_or(start);
        let stations = node_stations(s0, end, spacing);
        let nodes = stations
            .iter()
            .map(|&s| {
                let w = polygon.world(s, lateral);
                [w.x, w.y]
            })
            .collect();
        let kinds = [a.kind, b.kind];
        let lane = Lane {
            id: 0,
            approach,
            branch,
            direction,
            lateral,
            width: b.lateral - a.lateral,
            stations,
            nodes,
            turn_pocket: kinds.contains(&BoundaryKind::MedianEdge) && kinds.contains(&BoundaryKind::Solid),
        };
        if lane.nodes.len() >= 2 {
            good.push(lane);
        } else {
            degenerate.push(lane);
        }
    }
    (good, degenerate)
}

// ---------------------------------------------------------------------------
// Per-branch driver

#[derive(Debug, Clone)]
pub struct BranchContext {
    pub site_id: u32,
    pub approach: usize,
    pub branch: u8,
    pub direction: LaneDirection,
    pub polygon: ApproachPolygon,
    pub lo: LaneBoundary,
    pub hi: LaneBoundary,
    /// Station extent of the branch surface.
    pub stations: (f64, f64),
}

impl BranchContext {
    pub fn width(&self) -> f64 {
        self.hi.lateral - self.lo.lateral
    }

    pub fn review(&self, severity: Severity, code: ReviewCode, message: impl Into<String>) -> ReviewItem {
        ReviewItem {
            severity,
            site_id: self.site_id,
            approach: Some(self.approach),
            branch: Some(self.branch),
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchFeatures {
    pub context: BranchContext,
    pub lines: Vec<DetectedLine>,
    pub markings: Vec<MarkingLine>,
    pub stop_bar: Option<StopBar>,
    pub edge_set: LaneEdgeSet,
    pub lanes: Vec<Lane>,
    pub review: Vec<ReviewItem>,
    pub warnings: Vec<String>,
}

/// Lines, stop bar, lane partition and nodes for one branch mask.
pub fn extract_branch_features(
    mask: &Mask,
    geometry: &RasterGeometry,
    ctx: &BranchContext,
    cfg: &PipelineConfig,
) -> BranchFeatures {
    let frame = ImageFrame::new(geometry, &ctx.polygon);
    let width = ctx.width();
    let peaks = PeakParams {
        theta_step: cfg.hough_theta_step,
        threshold: ((cfg.hough_vote_fraction * width / cfg.pixel_size).round() as u32).max(1),
        window_rho: cfg.peak_window_rho as i64,
        window_theta: cfg.peak_window_theta,
    };
    let lines = hough_lines(mask, &peaks);
    let markings = dedupe_markings(
        lines.iter().filter_map(|l| refine_line(mask, l, &frame, 0.25)).collect(),
        cfg.pixel_size,
    );
    let mut review = Vec::new();
    let min2 = 2.0 * cfg.min_lane_width;

    if markings.is_empty() {
        if width >= min2 {
            review.push(ctx.review(
                Severity::Block,
                ReviewCode::FadedMarkings,
                format!("no markings found on a {width:.1} m branch wide enough for several lanes"),
            ));
        } else {
            review.push(ctx.review(
                Severity::Info,
                ReviewCode::NoMarkingsNarrow,
                format!("no markings on a {width:.1} m branch; treated as one lane"),
            ));
        }
    }

    let mut stop_bar = None;
    if ctx.direction == LaneDirection::Ingress {
        let (pick, outcome) = select_stop_bar(&markings, frame.station0, width, cfg);
        match outcome {
            StopBarOutcome::None => review.push(ctx.review(
                Severity::Block,
                ReviewCode::NoStopBar,
                "no stop bar detected; add one manually",
            )),
            StopBarOutcome::Single => review.push(ctx.review(
                Severity::Warning,
                ReviewCode::SingleStopBar,
                "single stop-bar candidate used",
            )),
            StopBarOutcome::Selected => {}
        }
        stop_bar = pick.map(|i| {
            let line = markings[i].clone();
            let w = |p: [f64; 2]| {
                let v = ctx.polygon.world(p[0], p[1]);
                [v.x, v.y]
            };
            StopBar {
                approach: ctx.approach,
                branch: ctx.branch,
                local: [line.start, line.end],
                world: [w(line.start), w(line.end)],
                confidence: (line.length / width).min(1.0),
                line,
            }
        });
    }

    let (edge_set, warnings) = detect_lane_dividers(&markings, ctx.lo, ctx.hi, &LaneParams::from(cfg));
    let (lanes, degenerate) = build_centerlines(
        &edge_set,
        stop_bar.as_ref().map(|s| &s.line),
        ctx.stations.0,
        ctx.stations.1,
        cfg.node_spacing,
        &ctx.polygon,
        ctx.approach,
        ctx.branch,
        ctx.direction,
    );
    for lane in &degenerate {
        review.push(ctx.review(
            Severity::Warning,
            ReviewCode::DegenerateLane,
            format!("lane at lateral {:.2} m has fewer than two nodes; dropped", lane.lateral),
        ));
    }
    for lane in lanes.iter().filter(|l| l.width > cfg.max_lane_width) {
        review.push(ctx.review(
            Severity::Warning,
            ReviewCode::DegenerateLane,
            format!("lane at lateral {:.2} m is {:.2} m wide", lane.lateral, lane.width),
        ));
    }

    BranchFeatures {
        context: ctx.clone(),
        lines,
        markings,
        stop_bar,
        edge_set,
        lanes,
        review,
        warnings,
    }
}

/// Orders by geometry so that sorting is independent of detection order.
pub fn compare_markings(a: &MarkingLine, b: &MarkingLine) -> Ordering {
    a.center[0]
        .total_cmp(&b.center[0])
        .then(a.center[1].total_cmp(&b.center[1]))
        .then(a.length.total_cmp(&b.length))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{build_approach_polygons, PolygonParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(threshold: u32) -> PeakParams {
        PeakParams {
            theta_step: 1.0,
            threshold,
            window_rho: 15,
            window_theta: 5.0,
        }
    }

    #[test]
    fn horizontal_row() {
        let mut m = Mask::new(100, 100);
        for x in 0..100 {
            m.set(x, 50, true);
        }
        let lines = hough_lines(&m, &params(50));
        assert_eq!((lines[0].rho, lines[0].theta), (50, 90.0));
        assert_eq!(lines[0].votes, 100);
        let [a, b] = lines[0].endpoints;
        assert!((a[1] - 50.0).abs() < 1e-9 && (b[1] - 50.0).abs() < 1e-9);
        assert!((a[0] - b[0]).abs() > 98.0);
    }

    #[test]
    fn main_diagonal() {
        let mut m = Mask::new(64, 64);
        for i in 0..64 {
            m.set(i, i, true);
        }
        let lines = hough_lines(&m, &params(30));
        assert_eq!((lines[0].rho, lines[0].theta), (0, 135.0));
    }

    /// Accumulator by direct summation, theta-outer.
    fn brute_accumulator(m: &Mask, step: f64) -> Vec<Vec<(i64, u32)>> {
        let n = (180.0 / step).round() as usize;
        (0..n)
            .map(|ti| {
                let t = (ti as f64 * step).to_radians();
                let mut counts = std::collections::BTreeMap::<i64, u32>::new();
                for y in 0..m.height {
                    for x in 0..m.width {
                        if m.get(x, y) {
                            *counts.entry((x as f64 * t.cos() + y as f64 * t.sin()).round() as i64).or_default() += 1;
                        }
                    }
                }
                counts.into_iter().collect()
            })
            .collect()
    }

    /// Peaks by repeated global argmax with explicit suppression marking.
    fn brute_peaks(acc: &[Vec<(i64, u32)>], p: &PeakParams) -> Vec<(usize, i64, u32)> {
        let mut cells: Vec<(usize, i64, u32, bool)> = Vec::new();
        for (ti, row) in acc.iter().enumerate() {
            for &(r, v) in row {
                if v >= p.threshold.max(1) {
                    cells.push((ti, r, v, true));
                }
            }
        }
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for (i, c) in cells.iter().enumerate() {
                if !c.3 {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let d = &cells[b];
                        if c.2 > d.2 || (c.2 == d.2 && (c.0, c.1) < (d.0, d.1)) {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            let Some(b) = best else { break };
            let peak = (cells[b].0, cells[b].1, cells[b].2);
            out.push(peak);
            for c in cells.iter_mut() {
                let dt = (c.0 as f64 - peak.0 as f64).abs() * p.theta_step;
                if (dt <= p.window_theta && (c.1 - peak.1).abs() <= p.window_rho)
                    || (180.0 - dt <= p.window_theta && (c.1 + peak.1).abs() <= p.window_rho)
                {
                    c.3 = false;
                }
            }
        }
        out
    }

    fn matches_brute(m: &Mask, p: &PeakParams) -> bool {
        let acc = hough_accumulator(m, p.theta_step);
        let brute = brute_accumulator(m, p.theta_step);
        for (ti, row) in brute.iter().enumerate() {
            let total: u32 = row.iter().map(|c| c.1).sum();
            if total != (0..acc.n_rho).map(|r| acc.votes[ti * acc.n_rho + r]).sum::<u32>() {
                return false;
            }
            if row.iter().any(|&(r, v)| acc.get(ti, r) != v) {
                return false;
            }
        }
        hough_peaks(&acc, p) == brute_peaks(&brute, p)
    }

    #[test]
    fn dashed_parallel_lines_match_oracle() {
        let mut m = Mask::new(120, 60);
        for x in 0..120 {
            if x % 20 < 8 {
                for y in [15, 16, 40, 41] {
                    m.set(x, y, true);
                }
            }
        }
        let p = params(30);
        assert!(matches_brute(&m, &p));
        let lines = hough_lines(&m, &p);
        let horizontal: Vec<&DetectedLine> = lines.iter().filter(|l| l.theta == 90.0).collect();
        assert_eq!(horizontal.len(), 2);
        let mut rhos: Vec<i64> = horizontal.iter().map(|l| l.rho).collect();
        rhos.sort();
        assert!((15..=16).contains(&rhos[0]) && (40..=41).contains(&rhos[1]));
    }

    #[test]
    fn random_masks_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..12 {
            let (w, h) = (rng.random_range(4..40), rng.random_range(4..40));
            let mut m = Mask::new(w, h);
            let fill = rng.random_range(0.02..0.3);
            for v in m.data.iter_mut() {
                *v = rng.random_bool(fill);
            }
            let p = PeakParams {
                theta_step: [1.0, 2.0, 3.0][rng.random_range(0..3)],
                threshold: rng.random_range(1..8),
                window_rho: rng.random_range(1..6),
                window_theta: rng.random_range(1.0..8.0),
            };
            assert!(matches_brute(&m, &p));
        }
    }

    #[test]
    fn single_line_grid_top_peak() {
        for theta_deg in (0..180).step_by(7) {
            for rho in [-20i64, 0, 10, 25, 40] {
                let t = (theta_deg as f64).to_radians();
                let mut m = Mask::new(64, 64);
                for y in 0..64 {
                    for x in 0..64 {
                        if (x as f64 * t.cos() + y as f64 * t.sin() - rho as f64).abs() < 0.5 {
                            m.set(x, y, true);
                        }
                    }
                }
                if m.count() < 20 {
                    continue;
                }
                let lines = hough_lines(&m, &params(1));
                let top = &lines[0];
                let dt = (top.theta - theta_deg as f64).abs();
                let ok = (dt <= 1.0 && (top.rho - rho).abs() <= 1) || (dt >= 179.0 && (top.rho + rho).abs() <= 1);
                assert!(ok, "θ={theta_deg} ρ={rho}: got θ={} ρ={}", top.theta, top.rho);
            }
        }
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    fn bar(station: f64, width: f64) -> MarkingLine {
        MarkingLine::segment([station, 0.0], [station, width], 1.0)
    }

    #[test]
    fn crosswalk_rule_picks_second_farthest() {
        let lines = vec![bar(12.0, 10.0), bar(4.0, 10.0), bar(6.0, 10.0)];
        let (pick, outcome) = select_stop_bar(&lines, 0.0, 10.0, &cfg());
        assert_eq!(pick, Some(2));
        assert_eq!(outcome, StopBarOutcome::Selected);
    }

    #[test]
    fn single_and_missing_stop_bar() {
        let near_axis = MarkingLine::segment([5.0, 2.0], [40.0, 2.0], 1.0);
        let short = bar(9.0, 3.0);
        let (pick, outcome) = select_stop_bar(&[near_axis.clone(), bar(13.0, 10.0), short.clone()], 0.0, 10.0, &cfg());
        assert_eq!((pick, outcome), (Some(1), StopBarOutcome::Single));
        let (pick, outcome) = select_stop_bar(&[near_axis, short], 0.0, 10.0, &cfg());
        assert_eq!((pick, outcome), (None, StopBarOutcome::None));
    }

    #[test]
    fn tilted_bar_within_tolerance() {
        let t = 8f64.to_radians();
        let l = MarkingLine::segment([10.0, 0.0], [10.0 + 10.0 * t.sin(), 10.0 * t.cos()], 1.0);
        assert!((l.angle_to_axis() - 82.0).abs() < 1e-9);
        assert_eq!(select_stop_bar(&[l], 0.0, 10.0, &cfg()).1, StopBarOutcome::Single);
        let t = 12f64.to_radians();
        let l = MarkingLine::segment([10.0, 0.0], [10.0 + 10.0 * t.sin(), 10.0 * t.cos()], 1.0);
        assert_eq!(select_stop_bar(&[l], 0.0, 10.0, &cfg()).1, StopBarOutcome::None);
    }

    proptest! {
        #[test]
        fn stop_bar_ignores_input_order(
            stations in prop::collection::vec(0.0f64..30.0, 1..7),
            perm_seed in any::<u64>(),
        ) {
            let lines: Vec<MarkingLine> = stations.iter().map(|&s| bar(s, 9.0)).collect();
            let mut shuffled = lines.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let a = select_stop_bar(&lines, 0.0, 10.0, &cfg());
            let b = select_stop_bar(&shuffled, 0.0, 10.0, &cfg());
            prop_assert_eq!(a.1, b.1);
            prop_assert_eq!(a.0.map(|i| lines[i].center), b.0.map(|i| shuffled[i].center));
        }
    }

    fn road(l: f64) -> LaneBoundary {
        LaneBoundary { lateral: l, kind: BoundaryKind::RoadEdge }
    }

    fn median(l: f64) -> LaneBoundary {
        LaneBoundary { lateral: l, kind: BoundaryKind::MedianEdge }
    }

    fn along(lateral: f64, duty: f64) -> MarkingLine {
        MarkingLine::segment([10.0, lateral], [50.0, lateral], duty)
    }

    fn widths(set: &LaneEdgeSet) -> Vec<f64> {
        set.lanes().map(|(a, b)| ((b.lateral - a.lateral) * 100.0).round() / 100.0).collect()
    }

    #[test]
    fn narrow_branch_is_one_lane() {
        let p = LaneParams::from(&cfg());
        let (set, _) = detect_lane_dividers(&[], road(0.0), road(3.5), &p);
        assert_eq!(widths(&set), vec![3.5]);
    }

    #[test]
    fn unmarked_wide_branch_splits_at_midline() {
        let p = LaneParams::from(&cfg());
        let (set, _) = detect_lane_dividers(&[], road(0.0), road(7.2), &p);
        assert_eq!(widths(&set), vec![3.6, 3.6]);
        assert_eq!(set.boundaries[1].kind, BoundaryKind::Inferred);
    }

    #[test]
    fn turn_pocket_and_two_through_lanes() {
        let p = LaneParams::from(&cfg());
        // Median at 0, road edge at 10.8.
        let lines = vec![along(7.2, 0.4), along(3.6, 1.0)];
        let (set, warn) = detect_lane_dividers(&lines, median(0.0), road(10.8), &p);
        assert!(warn.is_empty());
        assert_eq!(widths(&set), vec![3.6, 3.6, 3.6]);
        let kinds: Vec<BoundaryKind> = set.boundaries.iter().map(|b| b.kind).collect();
        assert_eq!(
            kinds,
            vec![BoundaryKind::MedianEdge, BoundaryKind::Solid, BoundaryKind::Dashed, BoundaryKind::RoadEdge]
        );
        let poly = &build_approach_polygons(1, &[Vector2::x()], Vector2::zeros(), 60.0, &PolygonParams::default())[0];
        let (lanes, _) = build_centerlines(&set, None, 0.0, 20.0, 6.0, poly, 0, 1, LaneDirection::Ingress);
        assert!(lanes[0].turn_pocket && !lanes[1].turn_pocket && !lanes[2].turn_pocket);
    }

    #[test]
    fn dividers_outside_edges_are_rejected() {
        let p = LaneParams::from(&cfg());
        let (set, warn) = detect_lane_dividers(&[along(12.0, 1.0)], road(0.0), road(7.2), &p);
        assert_eq!(warn.len(), 1);
        assert_eq!(set.boundaries.len(), 3);
    }

    #[test]
    fn budget_stops_acceptance() {
        let p = LaneParams::from(&cfg());
        // 6 m fits two lanes at most: only one divider can be accepted.
        let lines = vec![along(3.0, 1.0), along(2.95, 0.5)];
        let (set, _) = detect_lane_dividers(&lines, road(0.0), road(6.0), &p);
        assert_eq!(set.boundaries.len(), 3);
        assert_eq!(set.boundaries[1].kind, BoundaryKind::Solid);
    }

    proptest! {
        #[test]
        fn lane_partition_covers_branch(
            lo in -5.0f64..5.0,
            width in 1.0f64..20.0,
            divs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..6),
        ) {
            let p = LaneParams::from(&cfg());
            let lines: Vec<MarkingLine> = divs.iter().map(|&(f, d)| along(lo + f * width, d)).collect();
            let (set, _) = detect_lane_dividers(&lines, median(lo), road(lo + width), &p);
            let total: f64 = set.lanes().map(|(a, b)| b.lateral - a.lateral).sum();
            prop_assert!((total - width).abs() < 1e-9);
            prop_assert!(set.boundaries.windows(2).all(|w| w[0].lateral < w[1].lateral));
            let first = set.boundaries[0].kind;
            let last = set.boundaries.last().unwrap().kind;
            prop_assert_eq!(first, BoundaryKind::MedianEdge);
            prop_assert_eq!(last, BoundaryKind::RoadEdge);
            if width >= 2.0 * p.min_lane_width {
                prop_assert!(set.lanes().all(|(a, b)| b.lateral - a.lateral >= p.min_lane_width - 1e-9));
            }
        }
    }

    #[test]
    fn centerline_midpoint_and_stations() {
        let poly = &build_approach_polygons(1, &[Vector2::x()], Vector2::zeros(), 60.0, &PolygonParams::default())[0];
        let set = LaneEdgeSet {
            boundaries: vec![road(0.0), road(3.6)],
        };
        let stop = bar(10.0, 3.6);
        let (lanes, _) = build_centerlines(&set, Some(&stop), 0.0, 30.0, 6.0, poly, 0, 1, LaneDirection::Ingress);
        assert_eq!(lanes[0].lateral, 1.8);
        assert_eq!(lanes[0].width, 3.6);
        assert_eq!(lanes[0].stations, vec![10.0, 16.0, 22.0, 28.0]);
        let first = lanes[0].nodes[0];
        assert!((first[0] - 10.0).abs() < 1e-12 && (first[1] - 1.8).abs() < 1e-12);
        assert!(lanes[0].stations.windows(2).all(|w| w[1] > w[0]));

        let (short, degenerate) = build_centerlines(&set, Some(&stop), 0.0, 14.0, 6.0, poly, 0, 1, LaneDirection::Ingress);
        assert!(short.is_empty());
        assert_eq!(degenerate.len(), 1);
    }

    #[test]
    fn node_grid() {
        assert_eq!(node_stations(0.0, 20.0, 6.0), vec![0.0, 6.0, 12.0, 18.0]);
        assert_eq!(node_stations(0.0, 18.0, 6.0), vec![0.0, 6.0, 12.0, 18.0]);
    }

    /// Builds a branch mask with a stop bar and two dividers drawn directly in
    /// pixels, then runs the full branch driver.
    fn painted_branch(scale: f32) -> BranchFeatures {
        use crate::pcio::{GeoPoint, PointCloud, UtmZone};
        use crate::raster::{binarize, rasterize_into, RasterGeometry};
        let poly = build_approach_polygons(3, &[Vector2::new(0.6, 0.8)], Vector2::new(1000.0, 2000.0), 60.0, &PolygonParams::default())
            .remove(0);
        let zone = UtmZone::new(10, true).unwrap();
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Surface from station 5 to 45, lateral 1 to 11.8; paint at 0.8·scale.
        let mut s = 5.0;
        while s < 45.0 {
            let mut l = 1.0;
            while l < 11.8 {
                let (ss, ll) = (s + rng.random_range(0.0..0.02), l + rng.random_range(0.0..0.02));
                let paint = (13.15..13.45).contains(&ss)
                    || ((4.525..4.675).contains(&ll) && ss > 14.5)
                    || ((8.125..8.275).contains(&ll) && ss > 14.5 && (ss - 14.5) % 10.0 < 4.0);
                let w = poly.world(ss, ll);
                pts.push(GeoPoint::new(w.x, w.y, 0.0, if paint { 0.8 * scale } else { 0.2 }));
                l += 0.02;
            }
            s += 0.02;
        }
        let cloud = PointCloud::from_points(zone, pts).unwrap();
        let geometry = RasterGeometry::covering(cloud.points(), 0.03, poly.axis, 100_000_000).unwrap();
        let marks: Vec<GeoPoint> = cloud.points().iter().copied().filter(|p| p.intensity > 0.45).collect();
        let img = rasterize_into(&geometry, &marks);
        let mask = binarize(&img, 0.0);
        let ctx = BranchContext {
            site_id: 3,
            approach: 0,
            branch: 1,
            direction: LaneDirection::Ingress,
            polygon: poly,
            lo: median(1.0),
            hi: road(11.8),
            stations: (5.0, 45.0),
        };
        extract_branch_features(&mask, &geometry, &ctx, &cfg())
    }

    #[test]
    fn branch_driver_on_painted_raster() {
        let f = painted_branch(1.0);
        let sb = f.stop_bar.as_ref().expect("stop bar");
        let mid_station = 0.5 * (sb.local[0][0] + sb.local[1][0]);
        assert!((mid_station - 13.3).abs() < 0.03, "{mid_station}");
        assert_eq!(f.lanes.len(), 3);
        let lat: Vec<f64> = f.lanes.iter().map(|l| l.lateral).collect();
        for (got, want) in lat.iter().zip([2.8, 6.4, 10.0]) {
            assert!((got - want).abs() < 0.03, "{lat:?}");
        }
        assert!(f.lanes[0].turn_pocket);
        assert!(f.review.iter().any(|r| r.code == ReviewCode::SingleStopBar));
        // First node sits on the stop bar.
        for lane in &f.lanes {
            assert!((lane.stations[0] - sb.line.station_at(lane.lateral).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn intensity_scaling_leaves_detections_unchanged() {
        let a = painted_branch(1.0);
        let b = painted_branch(1.2);
        assert_eq!(a.lines, b.lines);
        assert_eq!(a.stop_bar, b.stop_bar);
        assert_eq!(a.lanes, b.lanes);
    }
}
