//! Georectification of LiDAR-frame returns and UTM/geodetic conversion.
//!
//! A return `p_l` observed at time `t` maps to the world frame as
//!
//! ```text
//! p_w = pos_B(t) + R_WB(t) * (lever_arm + R_BL * p_l)
//! ```
//!
//! where the pose at `t` is interpolated between the bracketing trajectory
//! samples: position linearly, attitude by slerp along the shortest arc.

mod utm;

pub use utm::{geodetic_to_utm, utm_to_geodetic, GeodeticCoord};

use nalgebra::{UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::pcio::{GeoPoint, LidarReturn, MountCalibration, PointCloud, PoseSample, Trajectory, UtmZone};

/// Spherical linear interpolation on the shortest arc.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa: Vector4<f64> = a.quaternion().coords;
    let mut qb: Vector4<f64> = b.quaternion().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let blended = if dot > 0.9995 {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.acos();
        let sin_theta = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin_theta) + qb * ((s * theta).sin() / sin_theta)
    };
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(blended))
}

fn interpolate(a: &PoseSample, b: &PoseSample, t: f64) -> (Vector3<f64>, UnitQuaternion<f64>) {
    let s = (t - a.t) / (b.t - a.t);
    let position = a.position + (b.position - a.position) * s;
    (position, slerp(&a.attitude, &b.attitude, s))
}

/// Pose at time `t`, or `None` outside the trajectory span. Exact at sample
/// timestamps.
pub fn pose_at(trajectory: &Trajectory, t: f64) -> Option<(Vector3<f64>, UnitQuaternion<f64>)> {
    let samples = trajectory.samples();
    if !(t >= trajectory.start() && t <= trajectory.end()) {
        return None;
    }
    let i = samples.partition_point(|s| s.t <= t);
    let a = &samples[i - 1];
    if a.t == t || i == samples.len() {
        return Some((a.position, a.attitude));
    }
    Some(interpolate(a, &samples[i], t))
}

/// Stateful georectifier that caches the last bracketing interval, so
/// time-ordered returns cost O(1) per lookup.
pub struct Georectifier<'a> {
    trajectory: &'a Trajectory,
    calib: MountCalibration,
    hint: usize,
}

impl<'a> Georectifier<'a> {
    pub fn new(trajectory: &'a Trajectory, calib: MountCalibration) -> Self {
        Georectifier {
            trajectory,
            calib,
            hint: 0,
        }
    }

    fn pose(&mut self, t: f64) -> Option<(Vector3<f64>, UnitQuaternion<f64>)> {
        let samples = self.trajectory.samples();
        let h = self.hint;
        if h + 1 < samples.len() && samples[h].t <= t && t < samples[h + 1].t {
            let a = &samples[h];
            if a.t == t {
                return Some((a.position, a.attitude));
            }
            return Some(interpolate(a, &samples[h + 1], t));
        }
        let pose = pose_at(self.trajectory, t)?;
        self.hint = samples.partition_point(|s| s.t <= t).saturating_sub(1);
        Some(pose)
    }

    pub fn apply(&mut self, index: usize, r: &LidarReturn) -> Result<GeoPoint> {
        let (origin, attitude) = self.pose(r.timestamp).ok_or(Error::OutOfSpan {
            index,
            t: r.timestamp,
            start: self.trajectory.start(),
            end: self.trajectory.end(),
        })?;
        let body = self.calib.lever_arm + self.calib.boresight * r.position();
        let w = origin + attitude * body;
        Ok(GeoPoint::new(w.x, w.y, w.z, r.intensity))
    }

    /// Inverse of [`apply`](Self::apply): the LiDAR-frame coordinates that
    /// land on `world` at time `t`.
    pub fn invert(&mut self, world: &Vector3<f64>, t: f64) -> Option<Vector3<f64>> {
        let (origin, attitude) = self.pose(t)?;
        let body = attitude.inverse() * (world - origin);
        Some(self.calib.boresight.inverse() * (body - self.calib.lever_arm))
    }
}

/// Transforms LiDAR-frame returns into the world frame.
pub fn georectify(
    returns: &[LidarReturn],
    trajectory: &Trajectory,
    calib: &MountCalibration,
    zone: UtmZone,
) -> Result<PointCloud> {
    let mut g = Georectifier::new(trajectory, *calib);
    let mut cloud = PointCloud::with_capacity(zone, returns.len());
    for (i, r) in returns.iter().enumerate() {
        cloud.push(g.apply(i, r)?);
    }
    Ok(cloud)
}
