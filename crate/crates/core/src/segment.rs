//! Intersection clipping and approach partitioning.
//!
//! A site keeps the points and poses within its radius. The clipped
//! trajectory's headings (folded so they point away from the center) are
//! clustered on the circle; each cluster becomes an approach axis and a
//! rectangle along it. Points are copied into every rectangle that contains
//! them; points in none are discarded.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::pcio::{GeoPoint, IntersectionSite, PointCloud, PoseSample, Trajectory, UtmZone};

/// Points and poses of one intersection.
#[derive(Debug, Clone)]
pub struct SiteClip {
    pub site: IntersectionSite,
    pub cloud: PointCloud,
    /// Index of each retained point in the source stream.
    pub source_index: Vec<u64>,
    /// Retained poses in time order (may span several disjoint passes).
    pub track: Vec<PoseSample>,
    /// Size of the discard sets for points and poses.
    pub discarded_points: u64,
    pub discarded_poses: usize,
}

impl SiteClip {
    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty() || self.track.is_empty()
    }
}

#[inline]
fn within(site: &IntersectionSite, xy: Vector2<f64>) -> bool {
    (xy - site.center()).norm_squared() <= site.radius * site.radius
}

/// Accumulates clips for several sites in one pass over a point stream.
pub struct SiteClipper {
    sites: Vec<IntersectionSite>,
    clouds: Vec<Vec<GeoPoint>>,
    indices: Vec<Vec<u64>>,
    seen: u64,
}

impl SiteClipper {
    pub fn new(sites: &[IntersectionSite]) -> Self {
        SiteClipper {
            sites: sites.to_vec(),
            clouds: vec![Vec::new(); sites.len()],
            indices: vec![Vec::new(); sites.len()],
            seen: 0,
        }
    }

    pub fn push(&mut self, p: GeoPoint) {
        let xy = p.xy();
        for (k, site) in self.sites.iter().enumerate() {
            if within(site, xy) {
                self.clouds[k].push(p);
                self.indices[k].push(self.seen);
            }
        }
        self.seen += 1;
    }

    /// Points consumed so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn finish(self, zone: UtmZone, trajectory: &Trajectory) -> Vec<SiteClip> {
        let seen = self.seen;
        self.sites
            .into_iter()
            .zip(self.clouds)
            .zip(self.indices)
            .map(|((site, points), source_index)| {
                let track: Vec<PoseSample> = trajectory
                    .samples()
                    .iter()
                    .filter(|s| within(&site, s.xy()))
                    .copied()
                    .collect();
                SiteClip {
                    discarded_points: seen - points.len() as u64,
                    discarded_poses: trajectory.len() - track.len(),
                    site,
                    cloud: PointCloud::from_points_unchecked(zone, points),
                    source_index,
                    track,
                }
            })
            .collect()
    }
}

/// Keeps points and poses whose planar distance to the site center is at
/// most the site radius.
pub fn clip_to_site(cloud: &PointCloud, trajectory: &Trajectory, site: &IntersectionSite) -> SiteClip {
    let mut clipper = SiteClipper::new(std::slice::from_ref(site));
    for p in cloud.points() {
        clipper.push(*p);
    }
    clipper.finish(cloud.zone, trajectory).pop().expect("one site")
}

/// Re-clips an existing clip; used to check idempotence.
pub fn reclip(clip: &SiteClip) -> SiteClip {
    let mut points = Vec::new();
    let mut source_index = Vec::new();
    for (p, &i) in clip.cloud.points().iter().zip(&clip.source_index) {
        if within(&clip.site, p.xy()) {
            points.push(*p);
            source_index.push(i);
        }
    }
    let track: Vec<PoseSample> = clip.track.iter().filter(|s| within(&clip.site, s.xy())).copied().collect();
    SiteClip {
        site: clip.site,
        discarded_points: clip.discarded_points + (clip.cloud.len() - points.len()) as u64,
        discarded_poses: clip.discarded_poses + (clip.track.len() - track.len()),
        cloud: PointCloud::from_points_unchecked(clip.cloud.zone, points),
        source_index,
        track,
    }
}

// ---------------------------------------------------------------------------
// Approach axes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AxisParams {
    /// Samples closer than this to the center are ignored (turning traffic).
    pub exclusion_radius: f64,
    /// Minimum spacing between the two poses a heading is taken from.
    pub min_step: f64,
    /// Pose pairs farther apart than this are treated as a pass boundary.
    pub max_step: f64,
    /// Single-linkage threshold on the circle, degrees.
    pub linkage_deg: f64,
    /// Minimum share of headings a cluster must hold.
    pub min_cluster_fraction: f64,
}

impl Default for AxisParams {
    fn default() -> Self {
        AxisParams {
            exclusion_radius: 15.0,
            min_step: 0.2,
            max_step: 5.0,
            linkage_deg: 30.0,
            min_cluster_fraction: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisEstimate {
    /// Unit vectors pointing away from the center, sorted by bearing.
    pub axes: Vec<Vector2<f64>>,
    pub warning: Option<String>,
}

fn wrap360(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Math-convention bearing (counter-clockwise from +x), degrees in [0, 360).
pub fn bearing_of(v: Vector2<f64>) -> f64 {
    wrap360(v.y.atan2(v.x).to_degrees())
}

pub fn unit_from_bearing(deg: f64) -> Vector2<f64> {
    let r = deg.to_radians();
    Vector2::new(r.cos(), r.sin())
}

fn circular_mean(deg: &[f64]) -> f64 {
    let (s, c) = deg.iter().fold((0.0, 0.0), |(s, c), d| {
        let r = d.to_radians();
        (s + r.sin(), c + r.cos())
    });
    wrap360(s.atan2(c).to_degrees())
}

/// Single-linkage clustering of bearings on the circle: sorted bearings are
/// split wherever the gap to the next one reaches `linkage_deg`. Returns the
/// circular mean of each cluster holding at least `min_support` members,
/// sorted ascending.
pub fn cluster_bearings(bearings: &[f64], linkage_deg: f64, min_support: usize) -> Vec<f64> {
    if bearings.is_empty() {
        return Vec::new();
    }
    let mut b: Vec<f64> = bearings.iter().map(|&d| wrap360(d)).collect();
    b.sort_by(f64::total_cmp);
    let n = b.len();
    let gap_after = |i: usize| {
        if i + 1 < n {
            b[i + 1] - b[i]
        } else {
            b[0] + 360.0 - b[n - 1]
        }
    };
    let cuts: Vec<usize> = (0..n).filter(|&i| gap_after(i) >= linkage_deg).collect();
    let mut clusters: Vec<Vec<f64>> = Vec::new();
    if cuts.is_empty() {
        clusters.push(b.clone());
    } else {
        // Start right after a cut so no cluster straddles the array end.
        let start = (cuts[0] + 1) % n;
        let mut current = Vec::new();
        for k in 0..n {
            let i = (start + k) % n;
            current.push(b[i]);
            if gap_after(i) >= linkage_deg {
                clusters.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            clusters.push(current);
        }
    }
    let mut means: Vec<f64> = clusters
        .iter()
        .filter(|c| c.len() >= min_support.max(1))
        .map(|c| circular_mean(c))
        .collect();
    means.sort_by(f64::total_cmp);
    means
}

/// Headings of the clipped track folded to point away from the center.
pub fn outward_headings(track: &[PoseSample], center: Vector2<f64>, params: &AxisParams) -> Vec<f64> {
    let mut out = Vec::new();
    let mut anchor: Option<&PoseSample> = None;
    for s in track {
        let Some(a) = anchor else {
            anchor = Some(s);
            continue;
        };
        let step = s.xy() - a.xy();
        let dist = step.norm();
        if dist > params.max_step {
            anchor = Some(s);
            continue;
        }
        if dist < params.min_step {
            continue;
        }
        let mid = (a.xy() + s.xy()) * 0.5;
        let radial = mid - center;
        anchor = Some(s);
        if radial.norm() <= params.exclusion_radius {
            continue;
        }
        let dir = if step.dot(&radial) >= 0.0 { step } else { -step };
        out.push(bearing_of(dir));
    }
    out
}

/// Approach axes from the clipped track. A-T junction yields three, a
/// four-way junction four.
pub fn estimate_approach_axes(track: &[PoseSample], center: Vector2<f64>, params: &AxisParams) -> AxisEstimate {
    let headings = outward_headings(track, center, params);
    let min_support = ((headings.len() as f64 * params.min_cluster_fraction).ceil() as usize).max(3);
    let bearings = cluster_bearings(&headings, params.linkage_deg, min_support);
    let warning = if bearings.len() < 2 {
        Some(format!(
            "degenerate site: {} approach cluster(s) from {} headings",
            bearings.len(),
            headings.len()
        ))
    } else {
        None
    };
    AxisEstimate {
        axes: bearings.into_iter().map(unit_from_bearing).collect(),
        warning,
    }
}

// ---------------------------------------------------------------------------
// Approach polygons

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproachKind {
    Ingress,
    Egress,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolygonParams {
    pub inner_offset: f64,
    pub half_width: f64,
}

impl Default for PolygonParams {
    fn default() -> Self {
        PolygonParams {
            inner_offset: 5.0,
            half_width: 25.0,
        }
    }
}

/// Rectangle covering one road arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproachPolygon {
    pub site_id: u32,
    pub index: usize,
    /// Counter-clockwise vertices.
    pub vertices: [Vector2<f64>; 4],
    /// Unit vector away from the center.
    pub axis: Vector2<f64>,
    pub center: Vector2<f64>,
    pub kind: ApproachKind,
}

impl ApproachPolygon {
    /// Left normal of the axis.
    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.axis.y, self.axis.x)
    }

    /// Point in convex polygon (boundary inclusive).
    pub fn contains(&self, p: Vector2<f64>) -> bool {
        (0..4).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % 4];
            let e = b - a;
            let d = p - a;
            e.x * d.y - e.y * d.x >= 0.0
        })
    }

    /// (station along axis, lateral along left normal) of a world point.
    pub fn local(&self, p: Vector2<f64>) -> (f64, f64) {
        let d = p - self.center;
        (d.dot(&self.axis), d.dot(&self.normal()))
    }

    pub fn world(&self, station: f64, lateral: f64) -> Vector2<f64> {
        self.center + self.axis * station + self.normal() * lateral
    }
}

pub fn build_approach_polygons(
    site_id: u32,
    axes: &[Vector2<f64>],
    center: Vector2<f64>,
    site_radius: f64,
    params: &PolygonParams,
) -> Vec<ApproachPolygon> {
    axes.iter()
        .enumerate()
        .map(|(index, axis)| {
            let axis = axis.normalize();
            let normal = Vector2::new(-axis.y, axis.x);
            let at = |s: f64, l: f64| center + axis * s + normal * l;
            let (inner, outer, hw) = (params.inner_offset, site_radius, params.half_width);
            ApproachPolygon {
                site_id,
                index,
                vertices: [at(inner, -hw), at(outer, -hw), at(outer, hw), at(inner, hw)],
                axis,
                center,
                kind: ApproachKind::Mixed,
            }
        })
        .collect()
}

/// The portion of a site inside one approach polygon.
#[derive(Debug, Clone)]
pub struct ApproachCloud {
    pub polygon: ApproachPolygon,
    pub cloud: PointCloud,
    /// Index of each point in the site clip.
    pub source_index: Vec<u32>,
    pub track: Vec<PoseSample>,
}

fn classify_kind(polygon: &ApproachPolygon, track: &[PoseSample]) -> ApproachKind {
    let (mut inbound, mut outbound) = (0usize, 0usize);
    for w in track.windows(2) {
        let step = w[1].xy() - w[0].xy();
        let n = step.norm();
        if !(1e-6..=5.0).contains(&n) {
            continue;
        }
        if step.dot(&polygon.axis) < 0.0 {
            inbound += 1;
        } else {
            outbound += 1;
        }
    }
    let total = inbound + outbound;
    if total == 0 {
        ApproachKind::Mixed
    } else if outbound * 20 < total {
        ApproachKind::Ingress
    } else if inbound * 20 < total {
        ApproachKind::Egress
    } else {
        ApproachKind::Mixed
    }
}

/// Copies each point into every polygon containing it; returns the
/// approach clouds and the number of points in no polygon.
pub fn assign_points(clip: &SiteClip, polygons: &[ApproachPolygon]) -> (Vec<ApproachCloud>, u64) {
    let mut points: Vec<Vec<GeoPoint>> = vec![Vec::new(); polygons.len()];
    let mut index: Vec<Vec<u32>> = vec![Vec::new(); polygons.len()];
    let mut discarded = 0u64;
    for (i, p) in clip.cloud.points().iter().enumerate() {
        let xy = p.xy();
        let mut hit = false;
        for (k, poly) in polygons.iter().enumerate() {
            if poly.contains(xy) {
                points[k].push(*p);
                index[k].push(i as u32);
                hit = true;
            }
        }
        if !hit {
            discarded += 1;
        }
    }
    let clouds = polygons
        .iter()
        .zip(points)
        .zip(index)
        .map(|((poly, pts), source_index)| {
            let track: Vec<PoseSample> = clip.track.iter().filter(|s| poly.contains(s.xy())).copied().collect();
            let mut polygon = poly.clone();
            polygon.kind = classify_kind(&polygon, &track);
            ApproachCloud {
                polygon,
                cloud: PointCloud::from_points_unchecked(clip.cloud.zone, pts),
                source_index,
                track,
            }
        })
        .collect();
    (clouds, discarded)
}
