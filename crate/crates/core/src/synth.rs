//! Synthetic intersections: declarative scene specs, a LiDAR scene
//! generator with per-point truth labels, and scoring of extraction output
//! against the scene's ground truth.
//!
//! Geometry of one arm, in its frame (`s` outward along the axis, `v` on
//! the left normal): the median is centered on `v = 0`; ingress lanes lie on
//! `+v` (right-hand traffic entering the intersection), egress lanes on
//! `−v`. The central box is a flat square of half-size `B` equal to the
//! widest half-road of any arm; arms run from `B` to the arm length.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::config::ScoreThresholds;
use crate::error::{Error, Result};
use crate::features::{Lane, LaneDirection, StopBar};
use crate::georef::{georectify, Georectifier};
use crate::mapmsg::{build_map_message, IntersectionMap, ReviewCode, ReviewItem};
use crate::pcio::{
    GeoPoint, IntersectionSite, LidarReturn, MountCalibration, PointCloud, PoseSample, Trajectory, UtmZone,
};
use crate::surface::EdgeSide;

// ---------------------------------------------------------------------------
// Spec

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    T,
    X,
}

impl Shape {
    pub fn arms(self) -> usize {
        match self {
            Shape::T => 3,
            Shape::X => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproachSpec {
    pub ingress_lanes: usize,
    pub egress_lanes: usize,
    pub lane_width: f64,
    /// 0 for an undivided road.
    pub median_width: f64,
    /// Distance of the stop-bar centerline from the intersection center;
    /// defaults to 1.5 m past the box.
    pub stop_bar_distance: Option<f64>,
    /// Whether the stop bar is painted at all.
    pub stop_bar: bool,
    pub stop_bar_width: f64,
    pub line_width: f64,
    /// Solid line between the median-side ingress lane and the next.
    pub turn_pocket: bool,
    pub dash_period: f64,
    pub dash_duty: f64,
    pub paint_intensity: f64,
    pub asphalt_intensity: f64,
    /// 0 = fresh paint, 1 = paint indistinguishable from asphalt.
    pub fade: f64,
    pub cars: usize,
}

impl Default for ApproachSpec {
    fn default() -> Self {
        ApproachSpec {
            ingress_lanes: 3,
            egress_lanes: 2,
            lane_width: 3.6,
            median_width: 2.0,
            stop_bar_distance: None,
            stop_bar: true,
            stop_bar_width: 0.3,
            line_width: 0.15,
            turn_pocket: true,
            dash_period: 10.0,
            dash_duty: 0.4,
            paint_intensity: 0.8,
            asphalt_intensity: 0.2,
            fade: 0.0,
            cars: 2,
        }
    }
}

impl ApproachSpec {
    fn half_median(&self) -> f64 {
        0.5 * self.median_width
    }

    /// Lateral of the +v road edge.
    pub fn left_edge(&self) -> f64 {
        self.half_median() + self.ingress_lanes as f64 * self.lane_width
    }

    /// Lateral of the −v road edge.
    pub fn right_edge(&self) -> f64 {
        -(self.half_median() + self.egress_lanes as f64 * self.lane_width)
    }

    fn effective_paint(&self) -> f64 {
        self.asphalt_intensity + (self.paint_intensity - self.asphalt_intensity) * (1.0 - self.fade)
    }

    pub fn ingress_center(&self, j: usize) -> f64 {
        self.half_median() + (j as f64 + 0.5) * self.lane_width
    }

    pub fn egress_center(&self, j: usize) -> f64 {
        -(self.half_median() + (j as f64 + 0.5) * self.lane_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    /// Returns per square meter of road.
    pub density: f64,
    /// Sidewalk and median-top density relative to the road.
    pub off_road_density_ratio: f64,
    pub z_noise: f64,
    pub intensity_noise: f64,
    /// Height of the trajectory reference point above the road.
    pub platform_height: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            density: 600.0,
            off_road_density_ratio: 0.3,
            z_noise: 0.02,
            intensity_noise: 0.05,
            platform_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutterSpec {
    pub length: f64,
    pub width: f64,
    /// Height of the box top above the road.
    pub height: f64,
    /// Lowest sampled point of the side faces above the road.
    pub clearance: f64,
    pub density_ratio: f64,
}

impl Default for ClutterSpec {
    fn default() -> Self {
        ClutterSpec {
            length: 4.5,
            width: 1.8,
            height: 1.5,
            clearance: 0.3,
            density_ratio: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub center: [f64; 2],
    pub zone: UtmZone,
    /// Bearing of the first arm, degrees counter-clockwise from +easting.
    pub rotation_deg: f64,
    pub arm_length: f64,
    pub site_radius: f64,
    pub curb_height: f64,
    pub sidewalk_width: f64,
    /// Drop of the road edges below the crown line.
    pub crown: f64,
    /// Used for every arm unless `approaches` is given.
    pub approach: ApproachSpec,
    /// One entry per arm, overriding `approach`.
    pub approaches: Vec<ApproachSpec>,
    pub sensor: SensorSpec,
    pub clutter: ClutterSpec,
    /// Inbound + outbound traversals per arm.
    pub passes: usize,
    pub speed: f64,
    pub pose_rate: f64,
    pub lever_arm: [f64; 3],
    /// Boresight roll, pitch, yaw in degrees.
    pub boresight_rpy_deg: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            shape: Shape::X,
            center: [576_000.0, 4_144_000.0],
            zone: UtmZone { number: 10, north: true },
            rotation_deg: 0.0,
            arm_length: 65.0,
            site_radius: 60.0,
            curb_height: 0.15,
            sidewalk_width: 3.0,
            crown: 0.10,
            approach: ApproachSpec::default(),
            approaches: Vec::new(),
            sensor: SensorSpec::default(),
            clutter: ClutterSpec::default(),
            passes: 1,
            speed: 10.0,
            pose_rate: 200.0,
            lever_arm: [0.4, 0.0, 0.3],
            boresight_rpy_deg: [0.5, -0.3, 1.0],
        }
    }
}

fn check(ok: bool, field: impl Into<String>, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::validation(field, reason))
    }
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn arm(&self, i: usize) -> &ApproachSpec {
        self.approaches.get(i).unwrap_or(&self.approach)
    }

    /// Half-size of the central box.
    pub fn box_half(&self) -> f64 {
        (0..self.shape.arms())
            .map(|i| {
                let a = self.arm(i);
                a.left_edge().max(-a.right_edge())
            })
            .fold(0.0, f64::max)
    }

    pub fn stop_bar_distance(&self, i: usize) -> f64 {
        self.arm(i).stop_bar_distance.unwrap_or(self.box_half() + 1.5)
    }

    pub fn axis(&self, i: usize) -> Vector2<f64> {
        let b = (self.rotation_deg + 90.0 * i as f64).to_radians();
        Vector2::new(b.cos(), b.sin())
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.center[0], self.center[1])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.approaches.is_empty() {
            check(self.approaches.len() == self.shape.arms(), "approaches", "needs one entry per arm")?;
        }
        let arms: Vec<(String, &ApproachSpec)> = if self.approaches.is_empty() {
            vec![("approach".to_string(), &self.approach)]
        } else {
            self.approaches.iter().enumerate().map(|(i, a)| (format!("approaches[{i}]"), a)).collect()
        };
        for (name, a) in &arms {
            let f = |field: &str| format!("{name}.{field}");
            check((2.5..=4.5).contains(&a.lane_width), f("lane_width"), "must lie in [2.5, 4.5]")?;
            check(a.ingress_lanes >= 1, f("ingress_lanes"), "must be at least 1")?;
            check(a.egress_lanes >= 1, f("egress_lanes"), "must be at least 1")?;
            check((0.0..=8.0).contains(&a.median_width), f("median_width"), "must lie in [0, 8]")?;
            check(a.stop_bar_width > 0.0 && a.stop_bar_width < 1.0, f("stop_bar_width"), "must lie in (0, 1)")?;
            check(a.line_width > 0.0 && a.line_width < 0.5, f("line_width"), "must lie in (0, 0.5)")?;
            check(a.dash_period > 0.0, f("dash_period"), "must be positive")?;
            check(a.dash_duty > 0.0 && a.dash_duty <= 1.0, f("dash_duty"), "must lie in (0, 1]")?;
            for (field, v) in [("paint_intensity", a.paint_intensity), ("asphalt_intensity", a.asphalt_intensity), ("fade", a.fade)] {
                check((0.0..=1.0).contains(&v), f(field), "must lie in [0, 1]")?;
            }
        }
        let b = self.box_half();
        for (i, (name, _)) in arms.iter().enumerate() {
            let sb = self.stop_bar_distance(i);
            check(
                sb >= b + 0.5 && sb <= self.arm_length - 20.0,
                format!("{name}.stop_bar_distance"),
                "must lie between the box edge + 0.5 m and 20 m before the arm end",
            )?;
        }
        check(self.arm_length >= b + 30.0, "arm_length", "arms must extend at least 30 m past the box")?;
        check(
            self.site_radius > b + 20.0 && self.site_radius <= self.arm_length,
            "site_radius",
            "must exceed the box by 20 m and not the arm length",
        )?;
        check(self.curb_height > 0.0, "curb_height", "must be positive")?;
        check(self.sidewalk_width > 0.0, "sidewalk_width", "must be positive")?;
        check(self.crown >= 0.0, "crown", "must be non-negative")?;
        check(self.sensor.density > 0.0, "sensor.density", "must be positive")?;
        check(
            self.sensor.off_road_density_ratio > 0.0 && self.sensor.off_road_density_ratio <= 1.0,
            "sensor.off_road_density_ratio",
            "must lie in (0, 1]",
        )?;
        check(self.sensor.z_noise >= 0.0, "sensor.z_noise", "must be non-negative")?;
        check(self.sensor.intensity_noise >= 0.0, "sensor.intensity_noise", "must be non-negative")?;
        check(self.sensor.platform_height > 0.0, "sensor.platform_height", "must be positive")?;
        check(
            self.clutter.density_ratio > 0.0 && self.clutter.density_ratio <= 1.0,
            "clutter.density_ratio",
            "must lie in (0, 1]",
        )?;
        check(
            self.clutter.height > self.clutter.clearance && self.clutter.clearance >= 0.0,
            "clutter.height",
            "must exceed clutter.clearance",
        )?;
        check(self.passes >= 1, "passes", "must be at least 1")?;
        check(self.speed > 0.0, "speed", "must be positive")?;
        check(self.pose_rate > 0.0, "pose_rate", "must be positive")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Labels

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Label {
    Road = 0,
    Paint = 1,
    /// Curb faces and sidewalks.
    Curb = 2,
    /// Raised median top.
    Median = 3,
    Clutter = 4,
}

impl Label {
    pub fn is_surface(self) -> bool {
        matches!(self, Label::Road | Label::Paint)
    }

    pub fn from_byte(b: u8) -> Option<Label> {
        Some(match b {
            0 => Label::Road,
            1 => Label::Paint,
            2 => Label::Curb,
            3 => Label::Median,
            4 => Label::Clutter,
            _ => return None,
        })
    }
}

pub fn encode_labels(labels: &[Label]) -> Vec<u8> {
    labels.iter().map(|&l| l as u8).collect()
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<Label>> {
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| Label::from_byte(b).ok_or_else(|| Error::validation("labels", format!("byte {i}: unknown label {b}"))))
        .collect()
}

// ---------------------------------------------------------------------------
// Analytic scene geometry

/// Surface element at a plan position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Material {
    Road { z: f64, paint: bool },
    MedianTop { z: f64 },
    Sidewalk { z: f64 },
}

/// Analytic model of a spec; positions are world XY.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub spec: SceneSpec,
    pub center: Vector2<f64>,
    pub box_half: f64,
    axes: Vec<Vector2<f64>>,
}

impl SceneGeometry {
    pub fn new(spec: &SceneSpec) -> Self {
        SceneGeometry {
            spec: spec.clone(),
            center: spec.center(),
            box_half: spec.box_half(),
            axes: (0..spec.shape.arms()).map(|i| spec.axis(i)).collect(),
        }
    }

    pub fn arms(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, i: usize) -> Vector2<f64> {
        self.axes[i]
    }

    /// `(s, v)` of a world point in arm `i`'s frame.
    pub fn local(&self, i: usize, p: Vector2<f64>) -> (f64, f64) {
        let d = p - self.center;
        let u = self.axes[i];
        (d.dot(&u), d.x * -u.y + d.y * u.x)
    }

    pub fn world(&self, i: usize, s: f64, v: f64) -> Vector2<f64> {
        let u = self.axes[i];
        self.center + u * s + Vector2::new(-u.y, u.x) * v
    }

    fn in_box(&self, p: Vector2<f64>, margin: f64) -> bool {
        let (x, y) = self.local(0, p);
        x.abs() <= self.box_half + margin && y.abs() <= self.box_half + margin
    }

    /// Road height on arm `i` (crowned, ramping in over 3 m past the box).
    fn arm_road_z(&self, i: usize, s: f64, v: f64) -> f64 {
        let a = self.spec.arm(i);
        let (l, r) = (a.left_edge(), a.right_edge());
        let mid = 0.5 * (l + r);
        let half = 0.5 * (l - r);
        let ramp = ((s - self.box_half) / 3.0).clamp(0.0, 1.0);
        -self.spec.crown * ramp * ((v - mid) / half).powi(2)
    }

    fn arm_paint(&self, i: usize, s: f64, v: f64) -> bool {
        let a = self.spec.arm(i);
        let sb = self.spec.stop_bar_distance(i);
        let hm = a.half_median();
        if a.stop_bar && (s - sb).abs() <= 0.5 * a.stop_bar_width && v >= hm {
            return true;
        }
        let start = sb + 0.5 * a.stop_bar_width + 1.0;
        if s < start {
            return false;
        }
        let dashed = ((s - start) % a.dash_period) < a.dash_duty * a.dash_period;
        let hw = 0.5 * a.line_width;
        for j in 1..a.ingress_lanes {
            if (v - (hm + j as f64 * a.lane_width)).abs() <= hw {
                return (j == 1 && a.turn_pocket) || dashed;
            }
        }
        for j in 1..a.egress_lanes {
            if (v + (hm + j as f64 * a.lane_width)).abs() <= hw {
                return dashed;
            }
        }
        false
    }

    /// Whether arm `i`'s median covers `(s, v)`.
    fn in_median(&self, i: usize, s: f64, v: f64) -> bool {
        let a = self.spec.arm(i);
        a.median_width > 0.0 && s >= self.median_start() && s <= self.spec.arm_length && v.abs() < a.half_median()
    }

    pub fn median_start(&self) -> f64 {
        self.box_half + 0.5
    }

    /// Material at a plan position, `None` outside the modeled area.
    pub fn material(&self, p: Vector2<f64>) -> Option<Material> {
        let b = self.box_half;
        let len = self.spec.arm_length;
        let h = self.spec.curb_height;
        for i in 0..self.arms() {
            let (s, v) = self.local(i, p);
            let a = self.spec.arm(i);
            if s >= b && s <= len && v >= a.right_edge() && v <= a.left_edge() {
                let z = self.arm_road_z(i, s, v);
                if self.in_median(i, s, v) {
                    return Some(Material::MedianTop { z: z + h });
                }
                return Some(Material::Road {
                    z,
                    paint: self.arm_paint(i, s, v),
                });
            }
        }
        if self.in_box(p, 0.0) {
            return Some(Material::Road { z: 0.0, paint: false });
        }
        let sw = self.spec.sidewalk_width;
        for i in 0..self.arms() {
            let (s, v) = self.local(i, p);
            let a = self.spec.arm(i);
            if s >= b && s <= len && v >= a.right_edge() - sw && v <= a.left_edge() + sw {
                let edge = if v > 0.0 { a.left_edge() } else { a.right_edge() };
                return Some(Material::Sidewalk {
                    z: self.arm_road_z(i, s, edge) + h,
                });
            }
        }
        if self.in_box(p, sw) {
            return Some(Material::Sidewalk { z: h });
        }
        None
    }

    /// Whether a plan position is worth sampling around (with `margin`).
    fn near_scene(&self, p: Vector2<f64>, margin: f64) -> bool {
        let sw = self.spec.sidewalk_width + margin;
        if self.in_box(p, sw) {
            return true;
        }
        (0..self.arms()).any(|i| {
            let (s, v) = self.local(i, p);
            let a = self.spec.arm(i);
            s >= self.box_half - margin && s <= self.spec.arm_length + margin && v >= a.right_edge() - sw && v <= a.left_edge() + sw
        })
    }

    /// Road height at a plan position (box or arm road, else 0).
    pub fn road_z(&self, p: Vector2<f64>) -> f64 {
        match self.material(p) {
            Some(Material::Road { z, .. }) => z,
            Some(Material::MedianTop { z }) | Some(Material::Sidewalk { z }) => z - self.spec.curb_height,
            None => 0.0,
        }
    }

    /// Vertical curb faces as `(a, b, arm)`; `arm` is `None` for box sides.
    fn curb_faces(&self) -> Vec<(Vector2<f64>, Vector2<f64>, Option<usize>)> {
        let b = self.box_half;
        let len = self.spec.arm_length;
        let mut faces = Vec::new();
        for i in 0..self.arms() {
            let a = self.spec.arm(i);
            for edge in [a.left_edge(), a.right_edge()] {
                faces.push((self.world(i, b, edge), self.world(i, len, edge), Some(i)));
            }
            if a.median_width > 0.0 {
                let ms = self.median_start();
                let hm = a.half_median();
                for v in [hm, -hm] {
                    faces.push((self.world(i, ms, v), self.world(i, len, v), Some(i)));
                }
                faces.push((self.world(i, ms, -hm), self.world(i, ms, hm), Some(i)));
            }
        }
        // Box sides not covered by an arm mouth.
        for k in 0..4 {
            let u = self.spec.axis(k);
            let n = Vector2::new(-u.y, u.x);
            let side = |t0: f64, t1: f64| (self.center + u * b + n * t0, self.center + u * b + n * t1, None);
            if k < self.arms() {
                let a = self.spec.arm(k);
                faces.push(side(-b, a.right_edge()));
                faces.push(side(a.left_edge(), b));
            } else {
                faces.push(side(-b, b));
            }
        }
        faces.retain(|f| (f.1 - f.0).norm() > 1e-6);
        faces
    }

    /// Road height at the foot of a curb face.
    fn face_base(&self, arm: Option<usize>, p: Vector2<f64>) -> f64 {
        arm.map_or(0.0, |i| {
            let (s, v) = self.local(i, p);
            self.arm_road_z(i, s, v)
        })
    }
}

// ---------------------------------------------------------------------------
// Ground truth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneTruth {
    pub direction: LaneDirection,
    /// Centerline lateral offset in the arm frame.
    pub lateral: f64,
    pub width: f64,
    pub start_station: f64,
    pub end_station: f64,
    pub turn_pocket: bool,
    /// World XY of the centerline ends.
    pub centerline: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachTruth {
    pub index: usize,
    pub bearing_deg: f64,
    pub axis: [f64; 2],
    pub left_edge: f64,
    pub right_edge: f64,
    /// Lateral extent of the median, if any.
    pub median: Option<[f64; 2]>,
    pub median_start: f64,
    pub stop_bar_station: f64,
    pub stop_bar_painted: bool,
    /// World XY of the stop-bar centerline ends (where it is or would be).
    pub stop_bar: [[f64; 2]; 2],
    /// Paint fade of the arm.
    pub fade: f64,
    pub lanes: Vec<LaneTruth>,
}

impl ApproachTruth {
    pub fn axis(&self) -> Vector2<f64> {
        Vector2::new(self.axis[0], self.axis[1])
    }

    pub fn markings_visible(&self) -> bool {
        self.fade < 0.95
    }

    pub fn stop_bar_midpoint(&self) -> Vector2<f64> {
        Vector2::new(
            0.5 * (self.stop_bar[0][0] + self.stop_bar[1][0]),
            0.5 * (self.stop_bar[0][1] + self.stop_bar[1][1]),
        )
    }

    pub fn lane_count(&self, d: LaneDirection) -> usize {
        self.lanes.iter().filter(|l| l.direction == d).count()
    }

    pub fn edge_lateral(&self, side: EdgeSide) -> Option<f64> {
        match side {
            EdgeSide::Left => Some(self.left_edge),
            EdgeSide::Right => Some(self.right_edge),
            EdgeSide::MedianLeft => self.median.map(|m| m[1]),
            EdgeSide::MedianRight => self.median.map(|m| m[0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub shape: Shape,
    pub zone: UtmZone,
    pub center: [f64; 2],
    pub box_half: f64,
    pub arm_length: f64,
    pub site_radius: f64,
    pub approaches: Vec<ApproachTruth>,
    /// Point count per label.
    pub label_counts: BTreeMap<Label, u64>,
}

impl GroundTruth {
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.center[0], self.center[1])
    }

    /// `(s, v)` of a world point in approach `a`'s frame.
    pub fn local(&self, a: &ApproachTruth, p: Vector2<f64>) -> (f64, f64) {
        let d = p - self.center();
        let u = a.axis();
        (d.dot(&u), d.x * -u.y + d.y * u.x)
    }

    /// Stations over which edges and surface are scored: past the box and
    /// clear of the clip circle.
    pub fn score_window(&self) -> (f64, f64) {
        (self.box_half + 1.0, self.site_radius - 6.0)
    }
}

fn truth_of(geo: &SceneGeometry) -> GroundTruth {
    let spec = &geo.spec;
    let approaches = (0..geo.arms())
        .map(|i| {
            let a = spec.arm(i);
            let sb = spec.stop_bar_distance(i);
            let w = |s: f64, v: f64| {
                let p = geo.world(i, s, v);
                [p.x, p.y]
            };
            let mut lanes = Vec::new();
            for j in 0..a.ingress_lanes {
                let v = a.ingress_center(j);
                lanes.push(LaneTruth {
                    direction: LaneDirection::Ingress,
                    lateral: v,
                    width: a.lane_width,
                    start_station: sb,
                    end_station: spec.arm_length,
                    turn_pocket: j == 0 && a.turn_pocket && a.ingress_lanes > 1 && a.median_width > 0.0,
                    centerline: [w(sb, v), w(spec.arm_length, v)],
                });
            }
            for j in 0..a.egress_lanes {
                let v = a.egress_center(j);
                lanes.push(LaneTruth {
                    direction: LaneDirection::Egress,
                    lateral: v,
                    width: a.lane_width,
                    start_station: geo.box_half,
                    end_station: spec.arm_length,
                    turn_pocket: false,
                    centerline: [w(geo.box_half, v), w(spec.arm_length, v)],
                });
            }
            lanes.sort_by(|x, y| x.lateral.total_cmp(&y.lateral));
            let u = geo.axis(i);
            ApproachTruth {
                index: i,
                bearing_deg: u.y.atan2(u.x).to_degrees().rem_euclid(360.0),
                axis: [u.x, u.y],
                left_edge: a.left_edge(),
                right_edge: a.right_edge(),
                median: (a.median_width > 0.0).then(|| [-a.half_median(), a.half_median()]),
                median_start: geo.median_start(),
                stop_bar_station: sb,
                stop_bar_painted: a.stop_bar,
                stop_bar: [w(sb, a.half_median()), w(sb, a.left_edge())],
                fade: a.fade,
                lanes,
            }
        })
        .collect();
    GroundTruth {
        shape: spec.shape,
        zone: spec.zone,
        center: spec.center,
        box_half: geo.box_half,
        arm_length: spec.arm_length,
        site_radius: spec.site_radius,
        approaches,
        label_counts: BTreeMap::new(),
    }
}

// ---------------------------------------------------------------------------
// Trajectory

/// One straight drive along an arm.
#[derive(Debug, Clone)]
struct Leg {
    arm: usize,
    inbound: bool,
    first: usize,
    count: usize,
    step: f64,
    s_far: f64,
}

fn yaw_quaternion(heading: Vector2<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(0.0, 0.0, heading.y.atan2(heading.x))
}

fn build_trajectory(geo: &SceneGeometry) -> Result<(Trajectory, Vec<Leg>)> {
    let spec = &geo.spec;
    let dt = 1.0 / spec.pose_rate;
    let step = spec.speed * dt;
    let s_far = spec.arm_length - 2.0;
    let count = (s_far / step).ceil() as usize + 1;
    let mut samples: Vec<PoseSample> = Vec::new();
    let mut legs = Vec::new();
    let mut t = 0.0;
    for pass in 0..spec.passes {
        for arm in 0..geo.arms() {
            let a = spec.arm(arm);
            for inbound in [true, false] {
                let v = if inbound {
                    a.ingress_center((a.ingress_lanes / 2 + pass) % a.ingress_lanes)
                } else {
                    a.egress_center((a.egress_lanes / 2 + pass) % a.egress_lanes)
                };
                let u = geo.axis(arm);
                let heading = if inbound { -u } else { u };
                let q = yaw_quaternion(heading);
                legs.push(Leg {
                    arm,
                    inbound,
                    first: samples.len(),
                    count,
                    step: s_far / (count - 1) as f64,
                    s_far,
                });
                for k in 0..count {
                    let frac = k as f64 / (count - 1) as f64;
                    let s = if inbound { s_far * (1.0 - frac) } else { s_far * frac };
                    let xy = geo.world(arm, s, v);
                    let z = geo.road_z(xy) + spec.sensor.platform_height;
                    samples.push(PoseSample {
                        t,
                        position: Vector3::new(xy.x, xy.y, z),
                        attitude: q,
                    });
                    t += dt;
                }
                t += 2.0;
            }
        }
    }
    Ok((Trajectory::new(samples)?, legs))
}

// ---------------------------------------------------------------------------
// Scene generation

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    /// LiDAR-frame returns in time order.
    pub returns: Vec<LidarReturn>,
    pub labels: Vec<Label>,
    pub trajectory: Trajectory,
    pub calibration: MountCalibration,
    pub truth: GroundTruth,
}

impl Scene {
    pub fn site(&self) -> IntersectionSite {
        IntersectionSite::new(1, self.spec.center(), self.spec.site_radius).expect("validated spec")
    }

    /// World-frame cloud via the georectifier.
    pub fn cloud(&self) -> Result<PointCloud> {
        georectify(&self.returns, &self.trajectory, &self.calibration, self.spec.zone)
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    z_noise: Normal<f64>,
    i_noise: Normal<f64>,
}

impl Sampler {
    fn poisson(&mut self, mean: f64) -> usize {
        if mean <= 0.0 {
            return 0;
        }
        Poisson::new(mean).expect("positive mean").sample(&mut self.rng) as usize
    }

    fn intensity(&mut self, base: f64) -> f32 {
        (base + self.i_noise.sample(&mut self.rng)).clamp(0.0, 1.0) as f32
    }

    fn dz(&mut self) -> f64 {
        self.z_noise.sample(&mut self.rng)
    }
}

const CURB_INTENSITY: f64 = 0.3;
const CLUTTER_INTENSITY: f64 = 0.5;

/// Generates a scene. Identical `(spec, seed)` give bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let geo = SceneGeometry::new(spec);
    let mut truth = truth_of(&geo);
    let (trajectory, legs) = build_trajectory(&geo)?;
    let sensor = &spec.sensor;
    let mut smp = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        z_noise: Normal::new(0.0, sensor.z_noise.max(0.0)).map_err(|e| Error::validation("sensor.z_noise", e.to_string()))?,
        i_noise: Normal::new(0.0, sensor.intensity_noise.max(0.0))
            .map_err(|e| Error::validation("sensor.intensity_noise", e.to_string()))?,
    };
    let mut world: Vec<(Vector3<f64>, f32, Label)> = Vec::new();

    // Surfaces: Poisson process on 1 m tiles in the first arm's frame.
    let extent = spec.arm_length + spec.sidewalk_width + 1.0;
    let n = (2.0 * extent).ceil() as i64;
    let u0 = geo.axis(0);
    let n0 = Vector2::new(-u0.y, u0.x);
    for ty in 0..n {
        for tx in 0..n {
            let (x0, y0) = (tx as f64 - extent, ty as f64 - extent);
            let tile_center = geo.center + u0 * (x0 + 0.5) + n0 * (y0 + 0.5);
            if !geo.near_scene(tile_center, 1.5) {
                continue;
            }
            let count = smp.poisson(sensor.density);
            for _ in 0..count {
                let (x, y) = (x0 + smp.rng.random::<f64>(), y0 + smp.rng.random::<f64>());
                let p = geo.center + u0 * x + n0 * y;
                let Some(m) = geo.material(p) else { continue };
                let keep_off_road = smp.rng.random::<f64>() < sensor.off_road_density_ratio;
                let (z, intensity, label) = match m {
                    Material::Road { z, paint } => {
                        let arm = (0..geo.arms())
                            .max_by(|&a, &b| geo.local(a, p).0.total_cmp(&geo.local(b, p).0))
                            .unwrap();
                        let a = spec.arm(arm);
                        if paint {
                            (z, a.effective_paint(), Label::Paint)
                        } else {
                            (z, a.asphalt_intensity, Label::Road)
                        }
                    }
                    Material::MedianTop { z } if keep_off_road => (z, CURB_INTENSITY, Label::Median),
                    Material::Sidewalk { z } if keep_off_road => (z, CURB_INTENSITY, Label::Curb),
                    _ => continue,
                };
                let zz = z + smp.dz();
                let i = smp.intensity(intensity);
                world.push((Vector3::new(p.x, p.y, zz), i, label));
            }
        }
    }

    // Curb faces.
    let face_density = sensor.density * sensor.off_road_density_ratio;
    for (a, b, arm) in geo.curb_faces() {
        let len = (b - a).norm();
        let count = smp.poisson(face_density * len * spec.curb_height);
        for _ in 0..count {
            let t: f64 = smp.rng.random();
            let h = smp.rng.random::<f64>() * spec.curb_height;
            let p = a + (b - a) * t;
            let z = geo.face_base(arm, p) + h + smp.dz();
            let i = smp.intensity(CURB_INTENSITY);
            world.push((Vector3::new(p.x, p.y, z), i, Label::Curb));
        }
    }

    // Parked cars: boxes on the arms' lanes.
    let c = &spec.clutter;
    let car_density = sensor.density * c.density_ratio;
    for arm in 0..geo.arms() {
        let a = spec.arm(arm);
        if a.cars == 0 {
            continue;
        }
        let lo = spec.stop_bar_distance(arm) + 6.0;
        let hi = spec.site_radius - 8.0;
        let slot = (hi - lo) / a.cars as f64;
        for k in 0..a.cars {
            let s = lo + slot * (k as f64 + 0.5) + smp.rng.random_range(-0.2..0.2) * slot;
            let v = if k % 2 == 0 {
                a.ingress_center(a.ingress_lanes - 1)
            } else {
                a.egress_center(a.egress_lanes - 1)
            };
            let base = geo.road_z(geo.world(arm, s, v));
            let (hl, hw) = (0.5 * c.length, 0.5 * c.width);
            // Top.
            let count = smp.poisson(car_density * c.length * c.width);
            for _ in 0..count {
                let ds = smp.rng.random_range(-hl..hl);
                let dv = smp.rng.random_range(-hw..hw);
                let p = geo.world(arm, s + ds, v + dv);
                let z = base + c.height + smp.dz();
                let i = smp.intensity(CLUTTER_INTENSITY);
                world.push((Vector3::new(p.x, p.y, z), i, Label::Clutter));
            }
            // Sides.
            let sides = [
                ((-hl, -hw), (hl, -hw)),
                ((-hl, hw), (hl, hw)),
                ((-hl, -hw), (-hl, hw)),
                ((hl, -hw), (hl, hw)),
            ];
            for ((s0, v0), (s1, v1)) in sides {
                let len = (s1 - s0).hypot(v1 - v0);
                let count = smp.poisson(car_density * len * (c.height - c.clearance));
                for _ in 0..count {
                    let t: f64 = smp.rng.random();
                    let p = geo.world(arm, s + s0 + (s1 - s0) * t, v + v0 + (v1 - v0) * t);
                    let z = base + c.clearance + smp.rng.random::<f64>() * (c.height - c.clearance) + smp.dz();
                    let i = smp.intensity(CLUTTER_INTENSITY);
                    world.push((Vector3::new(p.x, p.y, z), i, Label::Clutter));
                }
            }
        }
    }

    // Timestamp each point on its arm's first inbound leg and express it in
    // the LiDAR frame of that pose.
    let calibration = MountCalibration {
        lever_arm: Vector3::from(spec.lever_arm),
        boresight: UnitQuaternion::from_euler_angles(
            spec.boresight_rpy_deg[0].to_radians(),
            spec.boresight_rpy_deg[1].to_radians(),
            spec.boresight_rpy_deg[2].to_radians(),
        ),
    };
    let samples = trajectory.samples();
    let mut stamped: Vec<(f64, usize)> = world
        .iter()
        .enumerate()
        .map(|(idx, (p, _, _))| {
            let xy = p.xy();
            let arm = (0..geo.arms())
                .max_by(|&a, &b| geo.local(a, xy).0.total_cmp(&geo.local(b, xy).0))
                .unwrap();
            let leg = legs.iter().find(|l| l.arm == arm && l.inbound).expect("inbound leg");
            let s = geo.local(arm, xy).0.clamp(0.0, leg.s_far);
            let k = (((leg.s_far - s) / leg.step).round() as usize).min(leg.count - 1);
            (samples[leg.first + k].t, idx)
        })
        .collect();
    stamped.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut g = Georectifier::new(&trajectory, calibration);
    let mut returns = Vec::with_capacity(stamped.len());
    let mut labels = Vec::with_capacity(stamped.len());
    for (t, idx) in stamped {
        let (p, intensity, label) = world[idx];
        let l = g.invert(&p, t).expect("timestamp inside the trajectory");
        returns.push(LidarReturn {
            x: l.x,
            y: l.y,
            z: l.z,
            intensity,
            timestamp: t,
        });
        labels.push(label);
        *truth.label_counts.entry(label).or_default() += 1;
    }

    Ok(Scene {
        spec: spec.clone(),
        returns,
        labels,
        trajectory,
        calibration,
        truth,
    })
}

// ---------------------------------------------------------------------------
// Scoring

/// Extracted edge polyline in world XY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTrace {
    pub side: EdgeSide,
    pub vertices: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedApproach {
    pub index: usize,
    pub axis: [f64; 2],
    pub edges: Vec<EdgeTrace>,
}

/// What the scorer reads from an extraction run.
#[derive(Debug, Clone, Default)]
pub struct ExtractionProducts {
    pub map: Option<IntersectionMap>,
    pub approaches: Vec<ExtractedApproach>,
    pub review: Vec<ReviewItem>,
    /// Indices (into the scene cloud) of accepted road-surface points.
    pub surface: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachScore {
    pub truth_index: usize,
    pub extracted_index: Option<usize>,
    pub markings_visible: bool,
    /// (true, extracted) lane counts.
    pub ingress_lanes: (usize, usize),
    pub egress_lanes: (usize, usize),
    pub stop_bar_error: Option<f64>,
    pub first_node_error: Option<f64>,
    pub centerline_rms: Option<f64>,
    pub edge_rms: Option<f64>,
    pub warnings_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionScore {
    pub approaches: Vec<ApproachScore>,
    /// Share of scored approaches with both lane counts right.
    pub lane_count_accuracy: f64,
    pub stop_bar_error: Option<f64>,
    pub first_node_error: Option<f64>,
    pub centerline_rms: Option<f64>,
    pub edge_rms: Option<f64>,
    pub surface_precision: Option<f64>,
    pub surface_recall: Option<f64>,
    pub clutter_rejection: Option<f64>,
    pub warnings_ok: bool,
    pub passed: bool,
    pub failures: Vec<String>,
}

fn rms(errors: &[f64]) -> Option<f64> {
    (!errors.is_empty()).then(|| (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

fn max_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    v.fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
}

fn line_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let d = (b - a).normalize();
    let w = p - a;
    (w.x * d.y - w.y * d.x).abs()
}

/// Scores extraction products against truth. `cloud` and `labels` (same
/// order as the scene cloud) enable the surface metrics.
pub fn score_extraction(
    products: &ExtractionProducts,
    truth: &GroundTruth,
    cloud: Option<&[GeoPoint]>,
    labels: Option<&[Label]>,
    thresholds: &ScoreThresholds,
) -> ExtractionScore {
    let (w0, w1) = truth.score_window();
    let mut approaches = Vec::new();
    let mut all_center = Vec::new();
    let mut all_edges = Vec::new();
    let mut failures = Vec::new();

    for at in &truth.approaches {
        let ext = products
            .approaches
            .iter()
            .map(|e| {
                let ax = Vector2::new(e.axis[0], e.axis[1]);
                (e, ax.dot(&at.axis()).clamp(-1.0, 1.0).acos().to_degrees())
            })
            .filter(|(_, ang)| *ang < 10.0)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(e, _)| e);
        let mut sc = ApproachScore {
            truth_index: at.index,
            extracted_index: ext.map(|e| e.index),
            markings_visible: at.markings_visible(),
            ingress_lanes: (at.lane_count(LaneDirection::Ingress), 0),
            egress_lanes: (at.lane_count(LaneDirection::Egress), 0),
            stop_bar_error: None,
            first_node_error: None,
            centerline_rms: None,
            edge_rms: None,
            warnings_ok: true,
        };
        let codes: Vec<ReviewCode> = products
            .review
            .iter()
            .filter(|r| ext.is_some_and(|e| r.approach == Some(e.index)))
            .map(|r| r.code)
            .collect();
        sc.warnings_ok = if at.markings_visible() {
            !codes.contains(&ReviewCode::FadedMarkings) && codes.contains(&ReviewCode::NoStopBar) != at.stop_bar_painted
        } else {
            codes.contains(&ReviewCode::FadedMarkings) && codes.contains(&ReviewCode::NoStopBar)
        };
        let Some(ext) = ext else {
            failures.push(format!("approach {}: not extracted", at.index));
            approaches.push(sc);
            continue;
        };

        // Edges.
        let mut edge_err = Vec::new();
        for trace in &ext.edges {
            let Some(want) = at.edge_lateral(trace.side) else { continue };
            for v in &trace.vertices {
                let (s, l) = truth.local(at, Vector2::new(v[0], v[1]));
                if s >= w0 && s <= w1 {
                    edge_err.push(l - want);
                }
            }
        }
        sc.edge_rms = rms(&edge_err);
        all_edges.extend(edge_err);

        if let Some(map) = &products.map {
            let lanes: Vec<_> = map.lanes.iter().filter(|l| l.approach as usize == ext.index).collect();
            sc.ingress_lanes.1 = lanes.iter().filter(|l| l.direction == LaneDirection::Ingress).count();
            sc.egress_lanes.1 = lanes.iter().filter(|l| l.direction == LaneDirection::Egress).count();

            let bars: Vec<[Vector2<f64>; 2]> = map
                .stop_bars
                .iter()
                .filter(|s| s.approach as usize == ext.index)
                .filter_map(|s| map.stop_bar_world(s).ok())
                .collect();
            let true_mid = at.stop_bar_midpoint();
            sc.stop_bar_error = bars
                .iter()
                .map(|b| ((b[0] + b[1]) * 0.5 - true_mid).norm())
                .min_by(f64::total_cmp);

            let sb_a = Vector2::new(at.stop_bar[0][0], at.stop_bar[0][1]);
            let sb_b = Vector2::new(at.stop_bar[1][0], at.stop_bar[1][1]);
            let mut first = Vec::new();
            let mut center_err = Vec::new();
            for lane in &lanes {
                let Ok(nodes) = map.lane_nodes(lane) else { continue };
                if lane.direction == LaneDirection::Ingress && !bars.is_empty() {
                    first.push(line_distance(nodes[0], sb_a, sb_b));
                }
                let locals: Vec<(f64, f64)> = nodes.iter().map(|n| truth.local(at, *n)).collect();
                let mean_v = locals.iter().map(|l| l.1).sum::<f64>() / locals.len() as f64;
                let Some(tl) = at
                    .lanes
                    .iter()
                    .filter(|t| t.direction == lane.direction)
                    .min_by(|a, b| (a.lateral - mean_v).abs().total_cmp(&(b.lateral - mean_v).abs()))
                else {
                    continue;
                };
                // Truth centerlines are straight: the nearest-station truth
                // point has the lane's lateral offset.
                center_err.extend(locals.iter().map(|l| l.1 - tl.lateral));
            }
            sc.first_node_error = max_of(first.into_iter());
            sc.centerline_rms = rms(&center_err);
            if at.markings_visible() {
                all_center.extend(center_err);
            }
        }

        if at.markings_visible() {
            if sc.ingress_lanes.0 != sc.ingress_lanes.1 || sc.egress_lanes.0 != sc.egress_lanes.1 {
                failures.push(format!(
                    "approach {}: lanes ingress {}/{} egress {}/{} (true/extracted)",
                    at.index, sc.ingress_lanes.0, sc.ingress_lanes.1, sc.egress_lanes.0, sc.egress_lanes.1
                ));
            }
            match sc.stop_bar_error {
                _ if !at.stop_bar_painted => {}
                None => failures.push(format!("approach {}: stop bar missing", at.index)),
                Some(e) if e > thresholds.max_stop_bar_error => {
                    failures.push(format!("approach {}: stop-bar error {e:.3} m", at.index))
                }
                _ => {}
            }
            if let Some(e) = sc.first_node_error.filter(|&e| e > thresholds.max_first_node_error) {
                failures.push(format!("approach {}: first node {e:.3} m off the stop bar", at.index));
            }
        }
        if !sc.warnings_ok {
            failures.push(format!("approach {}: review codes {codes:?} do not match the scene", at.index));
        }
        approaches.push(sc);
    }

    let scored: Vec<&ApproachScore> = approaches.iter().filter(|a| a.markings_visible).collect();
    let lane_count_accuracy = if scored.is_empty() {
        1.0
    } else {
        scored
            .iter()
            .filter(|a| a.ingress_lanes.0 == a.ingress_lanes.1 && a.egress_lanes.0 == a.egress_lanes.1)
            .count() as f64
            / scored.len() as f64
    };
    let stop_bar_error = max_of(scored.iter().filter_map(|a| a.stop_bar_error));
    let first_node_error = max_of(scored.iter().filter_map(|a| a.first_node_error));
    let centerline_rms = rms(&all_center);
    let edge_rms = rms(&all_edges);

    let (mut surface_precision, mut surface_recall, mut clutter_rejection) = (None, None, None);
    if let (Some(surface), Some(cloud), Some(labels)) = (&products.surface, cloud, labels) {
        let mut accepted = vec![false; labels.len()];
        for &i in surface {
            if let Some(a) = accepted.get_mut(i as usize) {
                *a = true;
            }
        }
        let n_acc = accepted.iter().filter(|&&a| a).count();
        let good = accepted.iter().zip(labels).filter(|(a, l)| **a && l.is_surface()).count();
        surface_precision = Some(if n_acc == 0 { 0.0 } else { good as f64 / n_acc as f64 });

        let center = truth.center();
        let (mut region, mut hit, mut clutter, mut clutter_hit) = (0usize, 0usize, 0usize, 0usize);
        for (i, (p, l)) in cloud.iter().zip(labels).enumerate() {
            let xy = p.xy();
            if *l == Label::Clutter && (xy - center).norm() <= truth.site_radius {
                clutter += 1;
                clutter_hit += accepted[i] as usize;
            }
            if l.is_surface() && in_recall_region(truth, xy, w0, w1) {
                region += 1;
                hit += accepted[i] as usize;
            }
        }
        surface_recall = Some(if region == 0 { 0.0 } else { hit as f64 / region as f64 });
        clutter_rejection = Some(if clutter == 0 { 1.0 } else { 1.0 - clutter_hit as f64 / clutter as f64 });
    }

    if lane_count_accuracy < 1.0 {
        failures.push(format!("lane-count accuracy {lane_count_accuracy:.3}"));
    }
    for (name, v, limit) in [
        ("centerline RMS", centerline_rms, thresholds.max_centerline_rms),
        ("edge RMS", edge_rms, thresholds.max_edge_rms),
    ] {
        if let Some(v) = v.filter(|&v| v > limit) {
            failures.push(format!("{name} {v:.3} m exceeds {limit} m"));
        }
    }
    for (name, v, limit) in [
        ("surface recall", surface_recall, thresholds.min_surface_recall),
        ("clutter rejection", clutter_rejection, thresholds.min_clutter_rejection),
    ] {
        if let Some(v) = v.filter(|&v| v < limit) {
            failures.push(format!("{name} {v:.4} below {limit}"));
        }
    }
    let warnings_ok = approaches.iter().all(|a| a.warnings_ok);
    ExtractionScore {
        approaches,
        lane_count_accuracy,
        stop_bar_error,
        first_node_error,
        centerline_rms,
        edge_rms,
        surface_precision,
        surface_recall,
        clutter_rejection,
        warnings_ok,
        passed: failures.is_empty(),
        failures,
    }
}

/// Road inside the score window, 10 cm clear of curb and median faces (edge
/// positions are only resolved to the 5 cm profile bins).
fn in_recall_region(truth: &GroundTruth, p: Vector2<f64>, w0: f64, w1: f64) -> bool {
    const MARGIN: f64 = 0.10;
    truth.approaches.iter().any(|a| {
        let (s, v) = truth.local(a, p);
        s >= w0
            && s <= w1
            && v >= a.right_edge + MARGIN
            && v <= a.left_edge - MARGIN
            && !a.median.is_some_and(|m| v > m[0] - MARGIN && v < m[1] + MARGIN)
    })
}

/// Products of a perfect extraction: truth lanes with nodes every
/// `spacing` meters, truth edges, and every road-surface point.
pub fn perfect_products(truth: &GroundTruth, labels: &[Label], spacing: f64) -> Result<ExtractionProducts> {
    let mut lanes = Vec::new();
    let mut bars = Vec::new();
    let center = truth.center();
    let world = |a: &ApproachTruth, s: f64, v: f64| {
        let u = a.axis();
        let p = center + u * s + Vector2::new(-u.y, u.x) * v;
        [p.x, p.y]
    };
    let mut approaches = Vec::new();
    for a in &truth.approaches {
        let (w0, w1) = truth.score_window();
        for lt in &a.lanes {
            let stations = crate::features::node_stations(lt.start_station, truth.site_radius - 1.0, spacing);
            lanes.push(Lane {
                id: lanes.len() as u32 + 1,
                approach: a.index,
                branch: if lt.direction == LaneDirection::Ingress { 1 } else { 2 },
                direction: lt.direction,
                lateral: lt.lateral,
                width: lt.width,
                nodes: stations.iter().map(|&s| world(a, s, lt.lateral)).collect(),
                stations,
                turn_pocket: lt.turn_pocket,
            });
        }
        let line = crate::features::MarkingLine::segment(
            [a.stop_bar_station, a.median.map_or(0.0, |m| m[1])],
            [a.stop_bar_station, a.left_edge],
            1.0,
        );
        if a.stop_bar_painted {
            bars.push(StopBar {
                approach: a.index,
                branch: 1,
                local: [line.start, line.end],
                world: a.stop_bar,
                confidence: 1.0,
                line,
            });
        }
        let mut edges = Vec::new();
        for side in [EdgeSide::Left, EdgeSide::Right, EdgeSide::MedianLeft, EdgeSide::MedianRight] {
            if let Some(v) = a.edge_lateral(side) {
                edges.push(EdgeTrace {
                    side,
                    vertices: node_grid(w0, w1).map(|s| world(a, s, v)).collect(),
                });
            }
        }
        approaches.push(ExtractedApproach {
            index: a.index,
            axis: a.axis,
            edges,
        });
    }
    let map = build_map_message(1, center, 0.0, truth.zone, &lanes, &bars)?;
    Ok(ExtractionProducts {
        map: Some(map),
        approaches,
        review: Vec::new(),
        surface: Some(
            labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_surface())
                .map(|(i, _)| i as u64)
                .collect(),
        ),
    })
}

fn node_grid(a: f64, b: f64) -> impl Iterator<Item = f64> {
    let n = (b - a).ceil().max(1.0) as usize;
    (0..=n).map(move |k| a + (b - a) * k as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Streaming filler for scale tests

/// An in-memory IMPC1 stream: `prefix` points followed by `filler` points
/// spread uniformly over a square far from any site. Generates bytes on the
/// fly so arbitrarily large clouds cost no memory.
pub struct FillerStream {
    header: Vec<u8>,
    pos: usize,
    prefix: Vec<GeoPoint>,
    next: u64,
    total: u64,
    rng: ChaCha8Rng,
    origin: Vector2<f64>,
    side: f64,
    record: [u8; crate::pcio::RECORD_LEN],
    record_pos: usize,
}

impl FillerStream {
    pub fn new(zone: UtmZone, prefix: Vec<GeoPoint>, filler: u64, origin: Vector2<f64>, side: f64, seed: u64) -> Self {
        let total = prefix.len() as u64 + filler;
        let header = crate::pcio::header_line(total, zone).into_bytes();
        FillerStream {
            header,
            pos: 0,
            prefix,
            next: 0,
            total,
            rng: ChaCha8Rng::seed_from_u64(seed),
            origin,
            side,
            record: [0; crate::pcio::RECORD_LEN],
            record_pos: crate::pcio::RECORD_LEN,
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn fill_record(&mut self) -> bool {
        if self.next >= self.total {
            return false;
        }
        let p = if (self.next as usize) < self.prefix.len() {
            self.prefix[self.next as usize]
        } else {
            let x = self.origin.x + self.rng.random::<f64>() * self.side;
            let y = self.origin.y + self.rng.random::<f64>() * self.side;
            GeoPoint::new(x, y, 0.0, 0.2)
        };
        crate::pcio::encode_record(&p, &mut self.record);
        self.record_pos = 0;
        self.next += 1;
        true
    }
}

impl Read for FillerStream {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        if self.pos < self.header.len() {
            let n = buf.len().min(self.header.len() - self.pos);
            buf[..n].copy_from_slice(&self.header[self.pos..self.pos + n]);
            self.pos += n;
            return Ok(n);
        }
        let mut written = 0;
        while written < buf.len() {
            if self.record_pos == self.record.len() && !self.fill_record() {
                break;
            }
            let n = (buf.len() - written).min(self.record.len() - self.record_pos);
            buf[written..written + n].copy_from_slice(&self.record[self.record_pos..self.record_pos + n]);
            written += n;
            self.record_pos += n;
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            sensor: SensorSpec {
                density: 60.0,
                ..SensorSpec::default()
            },
            ..SceneSpec::default()
        }
    }

    #[test]
    fn lane_width_out_of_range_names_field() {
        let err = SceneSpec::from_json(r#"{"approach": {"lane_width": 5.0}}"#).unwrap_err();
        assert!(err.to_string().starts_with("approach.lane_width"), "{err}");
        let err = SceneSpec::from_json(r#"{"shape": "T", "approaches": [{}, {"lane_width": 2.0}, {}]}"#).unwrap_err();
        assert!(err.to_string().starts_with("approaches[1].lane_width"), "{err}");
        assert!(SceneSpec::from_json(r#"{"shape": "T"}"#).is_ok());
    }

    #[test]
    fn default_geometry() {
        let s = SceneSpec::default();
        assert!((s.box_half() - 11.8).abs() < 1e-12);
        assert!((s.stop_bar_distance(0) - 13.3).abs() < 1e-12);
        let a = s.arm(0);
        assert!((a.left_edge() - 11.8).abs() < 1e-12 && (a.right_edge() + 8.2).abs() < 1e-12);
    }

    #[test]
    fn fade_one_makes_paint_asphalt() {
        let a = ApproachSpec {
            fade: 1.0,
            ..ApproachSpec::default()
        };
        assert_eq!(a.effective_paint(), a.asphalt_intensity);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = small_spec();
        let a = generate_scene(&spec, 5).unwrap();
        let b = generate_scene(&spec, 5).unwrap();
        assert_eq!(a.returns, b.returns);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.truth, b.truth);
        let c = generate_scene(&spec, 6).unwrap();
        assert_ne!(a.returns.len(), 0);
        assert_ne!(a.returns, c.returns);
    }

    #[test]
    fn noise_free_flat_scene_lies_on_surface() {
        let spec = SceneSpec {
            crown: 0.0,
            sensor: SensorSpec {
                density: 40.0,
                z_noise: 0.0,
                intensity_noise: 0.0,
                ..SensorSpec::default()
            },
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, 1).unwrap();
        let cloud = scene.cloud().unwrap();
        let mut n = 0;
        for (p, l) in cloud.points().iter().zip(&scene.labels) {
            if l.is_surface() {
                assert!(p.altitude.abs() < 1e-6, "{}", p.altitude);
                n += 1;
            }
        }
        assert!(n > 1000);
    }

    #[test]
    fn labels_match_generating_primitive() {
        let spec = SceneSpec {
            sensor: SensorSpec {
                density: 40.0,
                z_noise: 0.0,
                intensity_noise: 0.0,
                ..SensorSpec::default()
            },
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, 2).unwrap();
        let geo = SceneGeometry::new(&spec);
        let cloud = scene.cloud().unwrap();
        for (p, &l) in cloud.points().iter().zip(&scene.labels) {
            let m = geo.material(p.xy());
            match l {
                Label::Road => assert!(matches!(m, Some(Material::Road { paint: false, .. }))),
                Label::Paint => {
                    assert!(matches!(m, Some(Material::Road { paint: true, .. })));
                    assert!((p.intensity - 0.8).abs() < 1e-6);
                }
                Label::Median => assert!(matches!(m, Some(Material::MedianTop { .. }))),
                // Cars are rigid boxes over a crowned road.
                Label::Clutter => assert!(p.altitude - geo.road_z(p.xy()) >= spec.clutter.clearance - 0.05),
                Label::Curb => {
                    let z = p.altitude - geo.road_z(p.xy());
                    assert!(z > -1e-6 && z <= spec.curb_height + 1e-6, "{z} {:?} {:?}", geo.local(0, p.xy()), geo.material(p.xy()));
                }
            }
        }
    }

    #[test]
    fn poisson_density_on_patch() {
        let spec = SceneSpec {
            sensor: SensorSpec {
                density: 400.0,
                ..SensorSpec::default()
            },
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, 3).unwrap();
        let cloud = scene.cloud().unwrap();
        let geo = SceneGeometry::new(&spec);
        // 10 x 10 m patch of egress road on arm 0, clear of paint edges and cars.
        let count = cloud
            .points()
            .iter()
            .zip(&scene.labels)
            .filter(|(p, l)| {
                let (s, v) = geo.local(0, p.xy());
                l.is_surface() && (30.0..40.0).contains(&s) && (-8.2..1.8).contains(&v) && !(-1.0..1.0).contains(&v)
            })
            .count();
        // The median (2 m) is excluded, so the road area is 10 x 8 m.
        let expect = 400.0 * 80.0;
        assert!((count as f64 - expect).abs() <= 3.0 * expect.sqrt(), "{count} vs {expect}");
    }

    #[test]
    fn translation_moves_points_and_truth() {
        let spec = small_spec();
        let mut moved = spec.clone();
        moved.center = [spec.center[0] + 1234.5, spec.center[1] - 321.0];
        let a = generate_scene(&spec, 9).unwrap();
        let b = generate_scene(&moved, 9).unwrap();
        assert_eq!(a.labels, b.labels);
        let (ca, cb) = (a.cloud().unwrap(), b.cloud().unwrap());
        for (p, q) in ca.points().iter().zip(cb.points()) {
            assert!((q.easting - p.easting - 1234.5).abs() < 1e-6);
            assert!((q.northing - p.northing + 321.0).abs() < 1e-6);
            assert!((q.altitude - p.altitude).abs() < 1e-6);
        }
        let ta = a.truth.approaches[0].stop_bar_midpoint();
        let tb = b.truth.approaches[0].stop_bar_midpoint();
        assert!((tb - ta - Vector2::new(1234.5, -321.0)).norm() < 1e-6);
    }

    #[test]
    fn perfect_extraction_scores_zero() {
        let scene = generate_scene(&small_spec(), 4).unwrap();
        let cloud = scene.cloud().unwrap();
        let mut products = perfect_products(&scene.truth, &scene.labels, 6.0).unwrap();
        // Perfect review: one single stop-bar warning per approach.
        products.review = (0..4)
            .map(|i| ReviewItem {
                severity: crate::mapmsg::Severity::Warning,
                site_id: 1,
                approach: Some(i),
                branch: Some(1),
                code: ReviewCode::SingleStopBar,
                message: String::new(),
            })
            .collect();
        let s = score_extraction(&products, &scene.truth, Some(cloud.points()), Some(&scene.labels), &ScoreThresholds::default());
        assert!(s.passed, "{:?}", s.failures);
        assert_eq!(s.lane_count_accuracy, 1.0);
        assert!(s.stop_bar_error.unwrap() < 0.01);
        assert!(s.centerline_rms.unwrap() < 0.01);
        assert!(s.first_node_error.unwrap() < 0.01);
        assert!(s.edge_rms.unwrap() < 1e-9);
        assert_eq!(s.surface_precision, Some(1.0));
        assert_eq!(s.surface_recall, Some(1.0));
        assert_eq!(s.clutter_rejection, Some(1.0));
    }

    #[test]
    fn merged_lane_is_counted() {
        let scene = generate_scene(&small_spec(), 4).unwrap();
        let mut products = perfect_products(&scene.truth, &scene.labels, 6.0).unwrap();
        let map = products.map.as_mut().unwrap();
        let drop = map.lanes.iter().position(|l| l.approach == 2 && l.direction == LaneDirection::Ingress).unwrap();
        map.lanes.remove(drop);
        map.lane_count -= 1;
        let s = score_extraction(&products, &scene.truth, None, None, &ScoreThresholds::default());
        assert_eq!(s.approaches[2].ingress_lanes, (3, 2));
        assert!(s.lane_count_accuracy < 1.0 && !s.passed);
    }

    #[test]
    fn lateral_shift_is_reproduced() {
        use rand::Rng;
        let scene = generate_scene(&small_spec(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let delta: f64 = rng.random_range(-0.5..0.5);
            let mut truth = scene.truth.clone();
            for a in &mut truth.approaches {
                for l in &mut a.lanes {
                    l.lateral += delta;
                }
            }
            let products = perfect_products(&truth, &scene.labels, 6.0).unwrap();
            let s = score_extraction(&products, &scene.truth, None, None, &ScoreThresholds::default());
            assert!((s.centerline_rms.unwrap() - delta.abs()).abs() < 0.01, "{delta}");
        }
    }

    #[test]
    fn filler_stream_reads_back() {
        let zone = UtmZone::new(10, true).unwrap();
        let prefix = vec![GeoPoint::new(576_000.0, 4_144_000.0, 1.0, 0.5)];
        let stream = FillerStream::new(zone, prefix.clone(), 999, Vector2::new(500_000.0, 4_000_000.0), 1000.0, 1);
        let reader = crate::pcio::PointReader::new(std::io::BufReader::new(stream)).unwrap();
        assert_eq!(reader.declared_count(), 1000);
        let pts: Vec<GeoPoint> = reader.map(|r| r.unwrap()).collect();
        assert_eq!(pts.len(), 1000);
        assert_eq!(pts[0], prefix[0]);
        assert!(pts[1..].iter().all(|p| p.easting >= 500_000.0 && p.easting <= 501_000.0));
    }
}
