//! Point-cloud, trajectory and site types, plus their on-disk formats.
//!
//! Point files (`.impc`) are a one-line ASCII header followed by fixed
//! 28-byte little-endian records:
//!
//! ```text
//! IMPC1 <count> <zone>[ <intensity_scale>]\n
//! f64 easting | f64 northing | f64 altitude | f32 intensity
//! ```
//!
//! `<zone>` is a UTM zone such as `10N`. When `<intensity_scale>` is present
//! the stored intensities are raw sensor values and are divided by the scale
//! on ingest; files written by this crate always store normalized values and
//! omit it.
//!
//! Trajectories are CSV with columns `t,easting,northing,altitude,qw,qx,qy,qz`
//! (header row optional). Site files are JSON arrays of
//! `{id, center_e, center_n, radius_m}`.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "IMPC1";
pub const RECORD_LEN: usize = 28;
const MAX_HEADER: usize = 256;

/// UTM zone number plus hemisphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UtmZone {
    pub number: u8,
    pub north: bool,
}

impl UtmZone {
    pub fn new(number: u8, north: bool) -> Result<Self> {
        if !(1..=60).contains(&number) {
            return Err(Error::Domain(format!("zone {number} outside 1..=60")));
        }
        Ok(UtmZone { number, north })
    }

    /// Longitude of the zone's central meridian in degrees.
    pub fn central_meridian(&self) -> f64 {
        f64::from(self.number) * 6.0 - 183.0
    }
}

impl fmt::Display for UtmZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.number, if self.north { 'N' } else { 'S' })
    }
}

impl FromStr for UtmZone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (digits, hemi) = s.split_at(s.len().saturating_sub(1));
        let north = match hemi {
            "N" | "n" => true,
            "S" | "s" => false,
            _ => return Err(Error::Domain(format!("bad zone '{s}', expected e.g. 10N"))),
        };
        let number = digits
            .parse::<u8>()
            .map_err(|_| Error::Domain(format!("bad zone number in '{s}'")))?;
        UtmZone::new(number, north)
    }
}

impl Serialize for UtmZone {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UtmZone {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A raw return in the LiDAR frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarReturn {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f32,
    pub timestamp: f64,
}

impl LidarReturn {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// A georectified return in the projected world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub easting: f64,
    pub northing: f64,
    pub altitude: f64,
    pub intensity: f32,
}

impl GeoPoint {
    pub fn new(easting: f64, northing: f64, altitude: f64, intensity: f32) -> Self {
        GeoPoint {
            easting,
            northing,
            altitude,
            intensity,
        }
    }

    #[inline]
    pub fn xy(&self) -> Vector2<f64> {
        Vector2::new(self.easting, self.northing)
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.easting, self.northing, self.altitude)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.easting.is_finite() && self.northing.is_finite() && self.altitude.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(format!("intensity {} outside [0, 1]", self.intensity));
        }
        Ok(())
    }
}

/// An in-memory point cloud tagged with its UTM zone.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub zone: UtmZone,
    points: Vec<GeoPoint>,
}

impl PointCloud {
    pub fn new(zone: UtmZone) -> Self {
        PointCloud {
            zone,
            points: Vec::new(),
        }
    }

    pub fn with_capacity(zone: UtmZone, capacity: usize) -> Self {
        PointCloud {
            zone,
            points: Vec::with_capacity(capacity),
        }
    }

    /// Builds a cloud, rejecting non-finite points or out-of-range intensity.
    pub fn from_points(zone: UtmZone, points: Vec<GeoPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            p.check().map_err(|reason| Error::InvalidRecord {
                record: i as u64 + 1,
                offset: 0,
                reason,
            })?;
        }
        Ok(PointCloud { zone, points })
    }

    pub(crate) fn from_points_unchecked(zone: UtmZone, points: Vec<GeoPoint>) -> Self {
        PointCloud { zone, points }
    }

    pub fn push(&mut self, p: GeoPoint) {
        debug_assert!(p.check().is_ok());
        self.points.push(p);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<GeoPoint> {
        self.points
    }
}

/// A platform pose: body origin in the world frame and body-to-world attitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
}

impl PoseSample {
    pub fn xy(&self) -> Vector2<f64> {
        self.position.xy()
    }
}

/// Time-ordered platform poses. At least two samples, strictly increasing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<PoseSample>,
}

impl Trajectory {
    pub fn new(samples: Vec<PoseSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Trajectory(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::Trajectory(format!(
                    "non-increasing timestamp row {}",
                    i + 2
                )));
            }
        }
        Ok(Trajectory { samples })
    }

    pub fn samples(&self) -> &[PoseSample] {
        &self.samples
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Constant LiDAR-to-body mounting parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MountCalibration {
    pub lever_arm: Vector3<f64>,
    pub boresight: UnitQuaternion<f64>,
}

impl Default for MountCalibration {
    fn default() -> Self {
        MountCalibration {
            lever_arm: Vector3::zeros(),
            boresight: UnitQuaternion::identity(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationRecord {
    lever_arm: [f64; 3],
    boresight_wxyz: [f64; 4],
}

impl MountCalibration {
    pub fn to_json(&self) -> String {
        let q = self.boresight.quaternion();
        let rec = CalibrationRecord {
            lever_arm: [self.lever_arm.x, self.lever_arm.y, self.lever_arm.z],
            boresight_wxyz: [q.w, q.i, q.j, q.k],
        };
        serde_json::to_string_pretty(&rec).expect("plain struct")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: CalibrationRecord = serde_json::from_str(text)?;
        let [w, x, y, z] = rec.boresight_wxyz;
        Ok(MountCalibration {
            lever_arm: Vector3::from(rec.lever_arm),
            boresight: unit_quaternion(w, x, y, z).ok_or_else(|| {
                Error::validation("boresight_wxyz", "quaternion is not unit norm")
            })?,
        })
    }
}

/// An intersection to extract: center in world XY and clipping radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSite {
    pub id: u32,
    #[serde(rename = "center_e")]
    pub center_e: f64,
    #[serde(rename = "center_n")]
    pub center_n: f64,
    #[serde(rename = "radius_m")]
    pub radius: f64,
}

impl IntersectionSite {
    pub fn new(id: u32, center: Vector2<f64>, radius: f64) -> Result<Self> {
        let site = IntersectionSite {
            id,
            center_e: center.x,
            center_n: center.y,
            radius,
        };
        site.validate()?;
        Ok(site)
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.center_e, self.center_n)
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::validation(
                format!("site {}.radius_m", self.id),
                "must be positive",
            ));
        }
        if !(self.center_e.is_finite() && self.center_n.is_finite()) {
            return Err(Error::validation(
                format!("site {}.center", self.id),
                "must be finite",
            ));
        }
        Ok(())
    }
}

pub(crate) fn unit_quaternion(w: f64, x: f64, y: f64, z: f64) -> Option<UnitQuaternion<f64>> {
    let q = Quaternion::new(w, x, y, z);
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return None;
    }
    Some(UnitQuaternion::from_quaternion(q))
}

// ---------------------------------------------------------------------------
// Point files

/// Streaming reader over an `.impc` point file.
pub struct PointReader<R> {
    inner: BufReader<R>,
    zone: UtmZone,
    count: u64,
    intensity_scale: Option<f64>,
    header_len: u64,
    next: u64,
    done: bool,
}

impl PointReader<File> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        PointReader::new(file)
    }
}

impl<R: Read> PointReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut inner = BufReader::with_capacity(1 << 20, reader);
        let mut header = Vec::with_capacity(64);
        (&mut inner)
            .take(MAX_HEADER as u64)
            .read_until(b'\n', &mut header)
            .map_err(|e| Error::Format {
                offset: 0,
                reason: e.to_string(),
            })?;
        if header.last() != Some(&b'\n') {
            return Err(Error::Format {
                offset: header.len() as u64,
                reason: "header line not terminated".into(),
            });
        }
        let text = std::str::from_utf8(&header[..header.len() - 1]).map_err(|_| Error::Format {
            offset: 0,
            reason: "header is not UTF-8".into(),
        })?;
        let fields: Vec<&str> = text.split_ascii_whitespace().collect();
        let bad = |reason: String| Error::Format { offset: 0, reason };
        if fields.first() != Some(&MAGIC) {
            return Err(bad(format!("expected magic {MAGIC}")));
        }
        if !(3..=4).contains(&fields.len()) {
            return Err(bad(format!(
                "expected 'IMPC1 <count> <zone> [scale]', got {} fields",
                fields.len()
            )));
        }
        let count = fields[1]
            .parse::<u64>()
            .map_err(|_| bad(format!("bad count '{}'", fields[1])))?;
        let zone: UtmZone = fields[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let intensity_scale = match fields.get(3) {
            Some(s) => {
                let v = s
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad intensity scale '{s}'")))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(format!("intensity scale must be positive, got {v}")));
                }
                Some(v)
            }
            None => None,
        };
        Ok(PointReader {
            inner,
            zone,
            count,
            intensity_scale,
            header_len: header.len() as u64,
            next: 0,
            done: false,
        })
    }

    pub fn zone(&self) -> UtmZone {
        self.zone
    }

    /// Record count declared in the header.
    pub fn declared_count(&self) -> u64 {
        self.count
    }

    fn offset_of(&self, record: u64) -> u64 {
        self.header_len + record * RECORD_LEN as u64
    }

    fn read_record(&mut self) -> Result<GeoPoint> {
        let index = self.next;
        let offset = self.offset_of(index);
        let mut buf = [0u8; RECORD_LEN];
        if let Err(e) = self.inner.read_exact(&mut buf) {
            return Err(if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Truncated {
                    record: index + 1,
                    offset,
                }
            } else {
                Error::Format {
                    offset,
                    reason: e.to_string(),
                }
            });
        }
        let f64_at = |i: usize| f64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        let raw = f32::from_le_bytes(buf[24..28].try_into().unwrap());
        let intensity = match self.intensity_scale {
            Some(scale) => (f64::from(raw) / scale) as f32,
            None => raw,
        };
        let p = GeoPoint::new(f64_at(0), f64_at(8), f64_at(16), intensity);
        p.check().map_err(|reason| Error::InvalidRecord {
            record: index + 1,
            offset,
            reason,
        })?;
        Ok(p)
    }
}

impl<R: Read> Iterator for PointReader<R> {
    type Item = Result<GeoPoint>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next == self.count {
            self.done = true;
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(Error::Format {
                    offset: self.offset_of(self.count),
                    reason: "trailing bytes after the declared record count".into(),
                })),
                Err(e) => Some(Err(Error::Format {
                    offset: self.offset_of(self.count),
                    reason: e.to_string(),
                })),
            };
        }
        let item = self.read_record();
        self.next += 1;
        if item.is_err() {
            self.done = true;
        }
        Some(item)
    }
}

/// Reads a whole point file into memory.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let reader = PointReader::open(path)?;
    let zone = reader.zone();
    let capacity = reader.declared_count().min(1 << 26) as usize;
    let mut points = Vec::with_capacity(capacity);
    for p in reader {
        points.push(p?);
    }
    Ok(PointCloud::from_points_unchecked(zone, points))
}

/// Text header of a point file, newline included.
pub fn header_line(count: u64, zone: UtmZone) -> String {
    format!("{MAGIC} {count} {zone}\n")
}

/// Little-endian record layout: easting, northing, altitude (f64), intensity (f32).
pub fn encode_record(p: &GeoPoint, buf: &mut [u8; RECORD_LEN]) {
    buf[0..8].copy_from_slice(&p.easting.to_le_bytes());
    buf[8..16].copy_from_slice(&p.northing.to_le_bytes());
    buf[16..24].copy_from_slice(&p.altitude.to_le_bytes());
    buf[24..28].copy_from_slice(&p.intensity.to_le_bytes());
}

/// Streaming writer; the record count is fixed up front by the header.
pub struct PointWriter<W: Write> {
    inner: BufWriter<W>,
    declared: u64,
    written: u64,
}

impl<W: Write> PointWriter<W> {
    pub fn new(writer: W, count: u64, zone: UtmZone) -> io::Result<Self> {
        let mut inner = BufWriter::with_capacity(1 << 20, writer);
        inner.write_all(header_line(count, zone).as_bytes())?;
        Ok(PointWriter {
            inner,
            declared: count,
            written: 0,
        })
    }

    pub fn write(&mut self, p: &GeoPoint) -> io::Result<()> {
        let mut buf = [0u8; RECORD_LEN];
        encode_record(p, &mut buf);
        self.inner.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        if self.written != self.declared {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!(
                    "header declared {} records but {} were written",
                    self.declared, self.written
                ),
            ));
        }
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error())
    }
}

pub fn write_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = PointWriter::new(file, cloud.len() as u64, cloud.zone).map_err(|e| Error::io(path, e))?;
    for p in cloud.points() {
        w.write(p).map_err(|e| Error::io(path, e))?;
    }
    w.finish().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Trajectory CSV

pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "easting", "northing", "altitude", "qw", "qx", "qy", "qz"];

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(file)
}

pub fn parse_trajectory(reader: impl Read) -> Result<Trajectory> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut samples = Vec::new();
    let mut row = 0usize;
    for (i, rec) in csv.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        row += 1;
        if rec.len() != 8 {
            return Err(Error::Trajectory(format!(
                "row {row}: expected 8 columns, got {}",
                rec.len()
            )));
        }
        let mut v = [0.0f64; 8];
        for (k, field) in rec.iter().enumerate() {
            v[k] = field
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| {
                    Error::Trajectory(format!("row {row}: bad {} '{field}'", TRAJECTORY_HEADER[k]))
                })?;
        }
        let attitude = unit_quaternion(v[4], v[5], v[6], v[7])
            .ok_or_else(|| Error::Trajectory(format!("row {row}: attitude quaternion is not unit norm")))?;
        if let Some(prev) = samples.last().map(|s: &PoseSample| s.t) {
            if !(v[0] > prev) {
                return Err(Error::Trajectory(format!("non-increasing timestamp row {row}")));
            }
        }
        samples.push(PoseSample {
            t: v[0],
            position: Vector3::new(v[1], v[2], v[3]),
            attitude,
        });
    }
    Trajectory::new(samples)
}

pub fn write_trajectory(trajectory: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(TRAJECTORY_HEADER)?;
    for s in trajectory.samples() {
        let q = s.attitude.quaternion();
        w.write_record(
            [s.t, s.position.x, s.position.y, s.position.z, q.w, q.i, q.j, q.k]
                .iter()
                .map(|v| format!("{v:?}")),
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sites

pub fn read_sites(path: impl AsRef<Path>) -> Result<Vec<IntersectionSite>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sites(&text)
}

pub fn parse_sites(text: &str) -> Result<Vec<IntersectionSite>> {
    let sites: Vec<IntersectionSite> = serde_json::from_str(text)?;
    let mut seen = std::collections::BTreeSet::new();
    for s in &sites {
        s.validate()?;
        if !seen.insert(s.id) {
            return Err(Error::validation(format!("site {}", s.id), "duplicate id"));
        }
    }
    Ok(sites)
}

pub fn write_sites(sites: &[IntersectionSite], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(sites)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
