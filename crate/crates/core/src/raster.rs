//! Branch splitting, intensity thresholding, rasterization and binary
//! morphology.
//!
//! Rasters are aligned with the approach: image +x runs away from the
//! intersection along the approach axis, image +y along its left normal.
//! Pixel `(px, py)` covers local `[x0 + px·s, x0 + (px+1)·s) × [y0 + py·s, …)`.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::config::Morphology;
use crate::error::{Error, Result};
use crate::pcio::{GeoPoint, PointCloud};
use crate::surface::SurfaceCloud;

/// One side of an approach surface.
#[derive(Debug, Clone)]
pub struct BranchCloud {
    pub approach: usize,
    /// 1 is the +v side of the median, 2 the −v side.
    pub k: u8,
    pub cloud: PointCloud,
    /// Index of each point in the surface cloud.
    pub source_index: Vec<u32>,
    pub thresholded: bool,
}

/// Splits a surface at its median centerline. Without a median the whole
/// surface is branch 1.
pub fn split_by_median(sc: &SurfaceCloud) -> Vec<BranchCloud> {
    let zone = sc.cloud.zone;
    if sc.edges.median.is_none() {
        return vec![BranchCloud {
            approach: sc.approach,
            k: 1,
            cloud: sc.cloud.clone(),
            source_index: (0..sc.cloud.len() as u32).collect(),
            thresholded: false,
        }];
    }
    let mut sides: [(Vec<GeoPoint>, Vec<u32>); 2] = Default::default();
    for (i, p) in sc.cloud.points().iter().enumerate() {
        let center = sc.median_center_at(sc.station_of(i)).unwrap_or(0.0);
        let side = usize::from(sc.lateral[i] < center);
        sides[side].0.push(*p);
        sides[side].1.push(i as u32);
    }
    sides
        .into_iter()
        .enumerate()
        .map(|(s, (pts, idx))| BranchCloud {
            approach: sc.approach,
            k: s as u8 + 1,
            cloud: PointCloud::from_points_unchecked(zone, pts),
            source_index: idx,
            thresholded: false,
        })
        .collect()
}

/// Keeps points with intensity strictly above `tau`.
pub fn threshold_intensity(bc: &BranchCloud, tau: f32) -> BranchCloud {
    let mut pts = Vec::new();
    let mut idx = Vec::new();
    for (p, &i) in bc.cloud.points().iter().zip(&bc.source_index) {
        if p.intensity > tau {
            pts.push(*p);
            idx.push(i);
        }
    }
    BranchCloud {
        approach: bc.approach,
        k: bc.k,
        cloud: PointCloud::from_points_unchecked(bc.cloud.zone, pts),
        source_index: idx,
        thresholded: true,
    }
}

/// Georeference of an approach-aligned raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterGeometry {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    /// World XY of the outer corner of pixel (0, 0).
    pub origin: [f64; 2],
    /// World direction of image +x.
    pub u_axis: [f64; 2],
}

impl RasterGeometry {
    /// Smallest grid covering `points`, with image +x along `axis`.
    pub fn covering(points: &[GeoPoint], pixel_size: f64, axis: Vector2<f64>, budget: usize) -> Result<Self> {
        let axis = axis.normalize();
        let normal = Vector2::new(-axis.y, axis.x);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            let q = p.xy();
            let (x, y) = (q.dot(&axis), q.dot(&normal));
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Err(Error::validation("raster", "branch has no points"));
        }
        let width = ((x1 - x0) / pixel_size).floor() as usize + 1;
        let height = ((y1 - y0) / pixel_size).floor() as usize + 1;
        if width.saturating_mul(height) > budget {
            return Err(Error::RasterTooLarge { width, height, budget });
        }
        let origin = axis * x0 + normal * y0;
        Ok(RasterGeometry {
            width,
            height,
            pixel_size,
            origin: [origin.x, origin.y],
            u_axis: [axis.x, axis.y],
        })
    }

    pub fn axis(&self) -> Vector2<f64> {
        Vector2::new(self.u_axis[0], self.u_axis[1])
    }

    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.u_axis[1], self.u_axis[0])
    }

    /// Continuous image coordinates (pixels) of a world point.
    pub fn to_image(&self, xy: Vector2<f64>) -> (f64, f64) {
        let d = xy - Vector2::new(self.origin[0], self.origin[1]);
        (d.dot(&self.axis()) / self.pixel_size, d.dot(&self.normal()) / self.pixel_size)
    }

    /// Continuous image coordinates back to world.
    pub fn to_world(&self, px: f64, py: f64) -> Vector2<f64> {
        Vector2::new(self.origin[0], self.origin[1]) + (self.axis() * px + self.normal() * py) * self.pixel_size
    }

    /// Cell containing a world point, if inside the grid.
    pub fn world_to_image(&self, xy: Vector2<f64>) -> Option<(usize, usize)> {
        let (x, y) = self.to_image(xy);
        let (px, py) = (x.floor(), y.floor());
        (px >= 0.0 && py >= 0.0 && (px as usize) < self.width && (py as usize) < self.height)
            .then_some((px as usize, py as usize))
    }

    /// World position of a pixel center.
    pub fn image_to_world(&self, px: i64, py: i64) -> Result<Vector2<f64>> {
        if px < 0 || py < 0 || px as usize >= self.width || py as usize >= self.height {
            return Err(Error::PixelRange {
                px,
                py,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.to_world(px as f64 + 0.5, py as f64 + 0.5))
    }

    /// Pixel index clamped into the grid; points on the far bounding-box
    /// edge land in the last cell.
    fn cell(&self, xy: Vector2<f64>) -> Option<usize> {
        let (x, y) = self.to_image(xy);
        let px = x.floor() as i64;
        let py = y.floor() as i64;
        // Tolerate rounding at the bounding-box faces.
        let px = if px == -1 && x > -1e-6 { 0 } else { px };
        let py = if py == -1 && y > -1e-6 { 0 } else { py };
        (px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height)
            .then(|| py as usize * self.width + px as usize)
    }
}

/// Mean-intensity raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub geometry: RasterGeometry,
    pub values: Vec<f32>,
    pub occupancy: Vec<u32>,
}

impl RasterImage {
    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn value(&self, px: usize, py: usize) -> f32 {
        self.values[py * self.geometry.width + px]
    }

    /// Writes an 8-bit binary PGM (value = round(255·intensity)).
    pub fn write_pgm(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width(), self.height())?;
        let bytes: Vec<u8> = self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)
    }

    /// PGM plus a `.json` sidecar holding the geometry.
    pub fn save_debug(&self, pgm: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(pgm).map_err(|e| Error::io(pgm, e))?);
        self.write_pgm(&mut f).map_err(|e| Error::io(pgm, e))?;
        let side = pgm.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&self.geometry)?).map_err(|e| Error::io(&side, e))
    }
}

/// Mean intensity per cell over `points`, on a grid covering them.
pub fn rasterize(bc: &BranchCloud, pixel_size: f64, axis: Vector2<f64>, budget: usize) -> Result<RasterImage> {
    let geometry = RasterGeometry::covering(bc.cloud.points(), pixel_size, axis, budget)?;
    Ok(rasterize_into(&geometry, bc.cloud.points()))
}

/// Mean intensity per cell on a given grid; points outside it are ignored.
pub fn rasterize_into(geometry: &RasterGeometry, points: &[GeoPoint]) -> RasterImage {
    let n = geometry.width * geometry.height;
    let mut sum = vec![0.0f64; n];
    let mut occupancy = vec![0u32; n];
    for p in points {
        if let Some(c) = geometry.cell(p.xy()) {
            sum[c] += f64::from(p.intensity);
            occupancy[c] += 1;
        }
    }
    let values = sum
        .iter()
        .zip(&occupancy)
        .map(|(s, &c)| if c == 0 { 0.0 } else { (s / f64::from(c)) as f32 })
        .collect();
    RasterImage {
        geometry: *geometry,
        values,
        occupancy,
    }
}

// ---------------------------------------------------------------------------
// Binary masks

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// Iterator over `(x, y)` of set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
    }
}

/// Pixels whose mean value exceeds `level`.
pub fn binarize(img: &RasterImage, level: f32) -> Mask {
    Mask {
        width: img.width(),
        height: img.height(),
        data: img.values.iter().map(|&v| v > level).collect(),
    }
}

/// Square structuring element of side `2·radius + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    radius: usize,
}

impl StructuringElement {
    pub fn square(radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::validation("morph_radius", "must be at least 1"));
        }
        Ok(StructuringElement { radius })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }
}

/// Sliding-window any/all along one axis. Windows are truncated at the
/// image border: pixels outside the image take no part.
fn pass(src: &[bool], width: usize, height: usize, r: usize, horizontal: bool, want_all: bool) -> Vec<bool> {
    let mut out = vec![false; src.len()];
    let (lines, len) = if horizontal { (height, width) } else { (width, height) };
    let idx = |line: usize, i: usize| if horizontal { line * width + i } else { i * width + line };
    for line in 0..lines {
        // Count of set pixels in the current window.
        let mut count = 0usize;
        let mut lo = 0usize;
        let mut hi = 0usize; // exclusive
        for i in 0..len {
            let want_lo = i.saturating_sub(r);
            let want_hi = (i + r + 1).min(len);
            while hi < want_hi {
                count += src[idx(line, hi)] as usize;
                hi += 1;
            }
            while lo < want_lo {
                count -= src[idx(line, lo)] as usize;
                lo += 1;
            }
            out[idx(line, i)] = if want_all { count == hi - lo } else { count > 0 };
        }
    }
    out
}

fn separable(m: &Mask, se: StructuringElement, want_all: bool) -> Mask {
    let rows = pass(&m.data, m.width, m.height, se.radius, true, want_all);
    let data = pass(&rows, m.width, m.height, se.radius, false, want_all);
    Mask {
        width: m.width,
        height: m.height,
        data,
    }
}

/// Minkowski erosion with a square element; the window is clipped to the
/// image, so erosion and dilation are exact complements of each other.
pub fn erode(m: &Mask, se: StructuringElement) -> Mask {
    separable(m, se, true)
}

/// Minkowski dilation with a square element; pixels outside the image are
/// false.
pub fn dilate(m: &Mask, se: StructuringElement) -> Mask {
    separable(m, se, false)
}

pub fn opening(m: &Mask, se: StructuringElement) -> Mask {
    dilate(&erode(m, se), se)
}

pub fn closing(m: &Mask, se: StructuringElement) -> Mask {
    erode(&dilate(m, se), se)
}

pub fn clean(m: &Mask, op: Morphology, se: StructuringElement) -> Mask {
    match op {
        Morphology::None => m.clone(),
        Morphology::Open => opening(m, se),
        Morphology::Close => closing(m, se),
        Morphology::CloseOpen => opening(&closing(m, se), se),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcio::UtmZone;
    use proptest::prelude::*;

    fn zone() -> UtmZone {
        UtmZone::new(10, true).unwrap()
    }

    fn branch(points: Vec<GeoPoint>) -> BranchCloud {
        BranchCloud {
            approach: 0,
            k: 1,
            source_index: (0..points.len() as u32).collect(),
            cloud: PointCloud::from_points(zone(), points).unwrap(),
            thresholded: false,
        }
    }

    #[test]
    fn threshold_boundaries() {
        let bc = branch(vec![
            GeoPoint::new(0.0, 0.0, 0.0, 0.0),
            GeoPoint::new(1.0, 0.0, 0.0, 0.2),
            GeoPoint::new(2.0, 0.0, 0.0, 0.8),
            GeoPoint::new(3.0, 0.0, 0.0, 1.0),
        ]);
        assert_eq!(threshold_intensity(&bc, 0.0).cloud.len(), 3);
        assert_eq!(threshold_intensity(&bc, 1.0).cloud.len(), 0);
        let t = threshold_intensity(&bc, 0.5);
        assert_eq!(t.source_index, vec![2, 3]);
        assert!(t.thresholded);
    }

    #[test]
    fn mean_of_two_points() {
        let bc = branch(vec![GeoPoint::new(0.01, 0.01, 0.0, 0.4), GeoPoint::new(0.02, 0.02, 0.0, 0.8)]);
        let img = rasterize(&bc, 0.03, Vector2::x(), 1000).unwrap();
        assert!((img.value(0, 0) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn floor_rule_column() {
        let bc = branch(vec![GeoPoint::new(0.0, 0.0, 0.0, 0.5), GeoPoint::new(0.031, 0.0, 0.0, 0.7)]);
        let img = rasterize(&bc, 0.03, Vector2::x(), 1000).unwrap();
        assert_eq!(img.geometry.world_to_image(Vector2::new(0.031, 0.0)), Some((1, 0)));
        assert_eq!(img.occupancy[1], 1);
    }

    #[test]
    fn oversize_raster_is_rejected() {
        let bc = branch(vec![GeoPoint::new(0.0, 0.0, 0.0, 0.5), GeoPoint::new(100.0, 100.0, 0.0, 0.7)]);
        assert!(matches!(rasterize(&bc, 0.03, Vector2::x(), 1000), Err(Error::RasterTooLarge { .. })));
    }

    #[test]
    fn pixel_center_round_trip() {
        let pts = vec![GeoPoint::new(500_000.0, 4_000_000.0, 0.0, 0.5), GeoPoint::new(500_003.0, 4_000_002.0, 0.0, 0.5)];
        let axis = Vector2::new(0.6, 0.8);
        let img = rasterize(&branch(pts), 0.03, axis, 1_000_000).unwrap();
        let g = img.geometry;
        let o = Vector2::new(g.origin[0], g.origin[1]);
        let c = g.image_to_world(0, 0).unwrap();
        assert!((c - (o + (g.axis() + g.normal()) * 0.015)).norm() < 1e-9);
        for (px, py) in [(0, 0), (5, 7), (g.width as i64 - 1, g.height as i64 - 1)] {
            let w = g.image_to_world(px, py).unwrap();
            assert_eq!(g.world_to_image(w), Some((px as usize, py as usize)));
        }
        assert!(g.image_to_world(-1, 0).is_err());
        assert!(g.image_to_world(0, g.height as i64).is_err());
    }

    #[test]
    fn binarize_levels() {
        let bc = branch(vec![GeoPoint::new(0.0, 0.0, 0.0, 0.2), GeoPoint::new(0.1, 0.0, 0.0, 0.8)]);
        let img = rasterize(&bc, 0.03, Vector2::x(), 1000).unwrap();
        assert_eq!(binarize(&img, 0.0).count(), 2);
        assert_eq!(binarize(&img, 0.9).count(), 0);
        let m = binarize(&img, 0.5);
        assert_eq!(m.count(), 1);
        assert!(m.get(3, 0));
    }

    #[test]
    fn isolated_pixel_erodes_away() {
        let mut m = Mask::new(9, 9);
        m.set(4, 4, true);
        assert_eq!(erode(&m, StructuringElement::square(1).unwrap()).count(), 0);
    }

    #[test]
    fn full_image_is_dilation_fixed_point() {
        let m = Mask {
            width: 6,
            height: 5,
            data: vec![true; 30],
        };
        for r in 1..4 {
            assert_eq!(dilate(&m, StructuringElement::square(r).unwrap()), m);
        }
    }

    /// Direct 2-D definition, window clipped to the image.
    fn brute(m: &Mask, r: usize, all: bool) -> Mask {
        let mut out = Mask::new(m.width, m.height);
        for y in 0..m.height {
            for x in 0..m.width {
                let mut vals = Vec::new();
                for yy in y.saturating_sub(r)..=(y + r).min(m.height - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(m.width - 1) {
                        vals.push(m.get(xx, yy));
                    }
                }
                out.set(x, y, if all { vals.iter().all(|&v| v) } else { vals.iter().any(|&v| v) });
            }
        }
        out
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..14, 1usize..14).prop_flat_map(|(w, h)| {
            prop::collection::vec(any::<bool>(), w * h).prop_map(move |data| Mask { width: w, height: h, data })
        })
    }

    proptest! {
        #[test]
        fn morphology_laws(m in arb_mask(), r in 1usize..3) {
            let se = StructuringElement::square(r).unwrap();
            let e = erode(&m, se);
            let d = dilate(&m, se);
            prop_assert_eq!(&e, &brute(&m, r, true));
            prop_assert_eq!(&d, &brute(&m, r, false));
            prop_assert!(opening(&m, se).is_subset(&m));
            prop_assert!(m.is_subset(&closing(&m, se)));
            prop_assert_eq!(e.complement(), dilate(&m.complement(), se));
            prop_assert_eq!(opening(&opening(&m, se), se), opening(&m, se));
            prop_assert_eq!(closing(&closing(&m, se), se), closing(&m, se));
        }

        #[test]
        fn morphology_is_monotone(a in arb_mask(), seed in any::<u64>()) {
            // b ⊇ a by setting extra pixels.
            let mut b = a.clone();
            for (i, v) in b.data.iter_mut().enumerate() {
                if (seed >> (i % 64)) & 1 == 1 { *v = true; }
            }
            let se = StructuringElement::square(1).unwrap();
            prop_assert!(erode(&a, se).is_subset(&erode(&b, se)));
            prop_assert!(dilate(&a, se).is_subset(&dilate(&b, se)));
        }

        #[test]
        fn raster_mass_and_mean_bounds(
            pts in prop::collection::vec((0.0f64..2.0, 0.0f64..1.0, 0.0f32..=1.0), 1..200),
            angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let points: Vec<GeoPoint> = pts.iter().map(|&(x, y, i)| GeoPoint::new(x, y, 0.0, i)).collect();
            let axis = Vector2::new(angle.cos(), angle.sin());
            let img = rasterize(&branch(points.clone()), 0.03, axis, 10_000_000).unwrap();
            prop_assert_eq!(img.occupancy.iter().map(|&c| c as usize).sum::<usize>(), points.len());
            let g = img.geometry;
            let mut lo = vec![f32::INFINITY; img.values.len()];
            let mut hi = vec![f32::NEG_INFINITY; img.values.len()];
            for p in &points {
                let c = g.cell(p.xy()).unwrap();
                lo[c] = lo[c].min(p.intensity);
                hi[c] = hi[c].max(p.intensity);
                // Pixel center is within one pixel diagonal of the point.
                let (px, py) = (c % g.width, c / g.width);
                let w = g.image_to_world(px as i64, py as i64).unwrap();
                prop_assert!((w - p.xy()).norm() <= 0.03 * 2f64.sqrt() + 1e-9);
            }
            for (c, &v) in img.values.iter().enumerate() {
                if img.occupancy[c] == 0 {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert!(v >= lo[c] - 1e-6 && v <= hi[c] + 1e-6);
                }
            }
        }
    }

    #[test]
    fn pgm_layout() {
        let bc = branch(vec![GeoPoint::new(0.0, 0.0, 0.0, 1.0), GeoPoint::new(0.05, 0.0, 0.0, 0.5)]);
        let img = rasterize(&bc, 0.03, Vector2::x(), 1000).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert_eq!(&buf[..11], b"P5\n2 1\n255\n");
        assert_eq!(&buf[11..], &[255, 128]);
    }
}
