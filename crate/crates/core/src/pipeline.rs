//! End-to-end extraction for one intersection, plus the streaming clip pass
//! and the side products written next to each map.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use nalgebra::Vector2;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{
    extract_branch_features, BoundaryKind, BranchContext, BranchFeatures, Lane, LaneBoundary, LaneDirection, StopBar,
};
use crate::georef::utm_to_geodetic;
use crate::mapmsg::{build_map_message, IntersectionMap, ReviewCode, ReviewItem, Severity};
use crate::pcio::{GeoPoint, IntersectionSite, PointReader, Trajectory, UtmZone};
use crate::raster::{
    binarize, clean, rasterize_into, split_by_median, threshold_intensity, BranchCloud, RasterGeometry,
    StructuringElement,
};
use crate::segment::{
    assign_points, build_approach_polygons, estimate_approach_axes, ApproachKind, ApproachPolygon, SiteClip,
    SiteClipper,
};
use crate::surface::{process_approach, EdgeCurve, SurfaceCloud};
use crate::synth::{EdgeTrace, ExtractedApproach};

/// Where and what to dump for inspection.
#[derive(Debug, Clone, Default)]
pub struct DebugOptions {
    pub dir: Option<PathBuf>,
    pub rasters: bool,
    pub profiles: bool,
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub k: u8,
    pub geometry: Option<RasterGeometry>,
    pub features: Option<BranchFeatures>,
}

#[derive(Debug, Clone)]
pub struct ApproachOutput {
    pub index: usize,
    pub polygon: ApproachPolygon,
    pub surface: Option<SurfaceCloud>,
    pub branches: Vec<BranchOutput>,
    /// Stream indices of the accepted surface points.
    pub surface_source: Vec<u64>,
}

impl ApproachOutput {
    /// Fitted edges as world polylines.
    pub fn edge_traces(&self) -> Vec<EdgeTrace> {
        let Some(sc) = &self.surface else { return Vec::new() };
        let e = &sc.edges;
        let mut curves: Vec<&EdgeCurve> = e.left.iter().chain(e.right.iter()).collect();
        if let Some((a, b)) = &e.median {
            curves.push(a);
            curves.push(b);
        }
        curves
            .into_iter()
            .map(|c| EdgeTrace {
                side: c.side,
                vertices: c.vertices.iter().map(|v| [v.x, v.y]).collect(),
            })
            .collect()
    }

    pub fn extracted(&self) -> ExtractedApproach {
        ExtractedApproach {
            index: self.index,
            axis: [self.polygon.axis.x, self.polygon.axis.y],
            edges: self.edge_traces(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SiteOutput {
    pub site: IntersectionSite,
    pub map: Option<IntersectionMap>,
    pub review: Vec<ReviewItem>,
    pub approaches: Vec<ApproachOutput>,
    pub lanes: Vec<Lane>,
    pub stop_bars: Vec<StopBar>,
    pub warnings: Vec<String>,
}

impl SiteOutput {
    /// Sorted, de-duplicated stream indices of all accepted surface points.
    pub fn surface_source(&self) -> Vec<u64> {
        let mut all: Vec<u64> = self.approaches.iter().flat_map(|a| a.surface_source.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Streams a point file once, clipping it to every site.
pub fn clip_stream<R: Read>(reader: PointReader<R>, trajectory: &Trajectory, sites: &[IntersectionSite]) -> Result<Vec<SiteClip>> {
    let zone = reader.zone();
    let mut clipper = SiteClipper::new(sites);
    for p in reader {
        clipper.push(p?);
    }
    info!("clipped {} points to {} sites", clipper.seen(), sites.len());
    Ok(clipper.finish(zone, trajectory))
}

/// Lateral of an edge in the polygon frame: median over the longest piece.
fn polygon_lateral(curve: &EdgeCurve, polygon: &ApproachPolygon) -> f64 {
    let (a, b) = curve
        .pieces
        .iter()
        .copied()
        .max_by(|x, y| (x.1 - x.0).total_cmp(&(y.1 - y.0)))
        .expect("curves have a piece");
    let mut lats: Vec<f64> = curve
        .stations
        .iter()
        .zip(&curve.vertices)
        .filter(|(s, _)| **s >= a - 1e-9 && **s <= b + 1e-9)
        .map(|(_, v)| polygon.local(v.xy()).1)
        .collect();
    lats.sort_by(f64::total_cmp);
    lats[lats.len() / 2]
}

fn median_z(points: &[GeoPoint]) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let mut z: Vec<f64> = points.iter().map(|p| p.altitude).collect();
    let mid = z.len() / 2;
    Some(*z.select_nth_unstable_by(mid, f64::total_cmp).1)
}

struct BranchSetup {
    direction: LaneDirection,
    lo: LaneBoundary,
    hi: LaneBoundary,
}

fn branch_setup(sc: &SurfaceCloud, polygon: &ApproachPolygon, k: u8) -> Option<BranchSetup> {
    let e = &sc.edges;
    let lat = |c: &EdgeCurve| polygon_lateral(c, polygon);
    let road = |c: &EdgeCurve| LaneBoundary {
        lateral: lat(c),
        kind: BoundaryKind::RoadEdge,
    };
    let median = |c: &EdgeCurve| LaneBoundary {
        lateral: lat(c),
        kind: BoundaryKind::MedianEdge,
    };
    let (left, right) = (e.left.as_ref()?, e.right.as_ref()?);
    match (&e.median, k) {
        (Some((ml, _)), 1) => Some(BranchSetup {
            direction: LaneDirection::Ingress,
            lo: median(ml),
            hi: road(left),
        }),
        (Some((_, mr)), _) => Some(BranchSetup {
            direction: LaneDirection::Egress,
            lo: road(right),
            hi: median(mr),
        }),
        (None, _) => Some(BranchSetup {
            direction: if polygon.kind == ApproachKind::Egress {
                LaneDirection::Egress
            } else {
                LaneDirection::Ingress
            },
            lo: road(right),
            hi: road(left),
        }),
    }
}

fn review(site: u32, approach: Option<usize>, branch: Option<u8>, severity: Severity, code: ReviewCode, msg: String) -> ReviewItem {
    ReviewItem {
        severity,
        site_id: site,
        approach,
        branch,
        code,
        message: msg,
    }
}

fn process_branch(
    bc: &BranchCloud,
    sc: &SurfaceCloud,
    polygon: &ApproachPolygon,
    cfg: &PipelineConfig,
    dbg: &DebugOptions,
) -> Result<(BranchOutput, Vec<ReviewItem>)> {
    let site = polygon.site_id;
    let mut items = Vec::new();
    let mut out = BranchOutput {
        k: bc.k,
        geometry: None,
        features: None,
    };
    let Some(setup) = branch_setup(sc, polygon, bc.k) else {
        return Ok((out, items));
    };
    if bc.cloud.is_empty() {
        return Ok((out, items));
    }
    let marks = threshold_intensity(bc, cfg.tau as f32);
    let fraction = marks.cloud.len() as f64 / bc.cloud.len() as f64;
    if fraction > cfg.max_marking_fraction {
        items.push(review(
            site,
            Some(polygon.index),
            Some(bc.k),
            Severity::Block,
            ReviewCode::NoisyImage,
            format!("{:.0}% of surface points exceed the intensity threshold", 100.0 * fraction),
        ));
        return Ok((out, items));
    }
    let geometry = RasterGeometry::covering(bc.cloud.points(), cfg.pixel_size, polygon.axis, cfg.pixel_budget)?;
    let img = rasterize_into(&geometry, marks.cloud.points());
    let mask = clean(&binarize(&img, 0.0), cfg.morphology, StructuringElement::square(cfg.morph_radius)?);
    if dbg.rasters {
        if let Some(dir) = &dbg.dir {
            let stem = format!("site{}_a{}_b{}", site, polygon.index, bc.k);
            img.save_debug(&dir.join(format!("{stem}_raster.pgm")))?;
        }
    }
    let stations = bc
        .cloud
        .points()
        .iter()
        .map(|p| polygon.local(p.xy()).0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
    let ctx = BranchContext {
        site_id: site,
        approach: polygon.index,
        branch: bc.k,
        direction: setup.direction,
        polygon: polygon.clone(),
        lo: setup.lo,
        hi: setup.hi,
        stations,
    };
    let f = extract_branch_features(&mask, &geometry, &ctx, cfg);
    debug!(
        "site {site} approach {} branch {}: {} lines, {} markings, {} lanes",
        polygon.index,
        bc.k,
        f.lines.len(),
        f.markings.len(),
        f.lanes.len()
    );
    items.extend(f.review.iter().cloned());
    out.geometry = Some(geometry);
    out.features = Some(f);
    Ok((out, items))
}

fn write_profiles(dir: &Path, site: u32, index: usize, sc: &SurfaceCloud) -> Result<()> {
    let path = dir.join(format!("site{site}_a{index}_profiles.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["station", "lateral", "z_mode", "support"])?;
    for s in &sc.edges.swaths {
        let st = s.frame.station + 0.5 * s.frame.length;
        for b in &s.profile.bins {
            w.write_record([format!("{st:.2}"), format!("{:.3}", b.y), format!("{:.4}", b.z_mode), b.support.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Runs the whole extraction for one clipped site.
pub fn extract_site(clip: &SiteClip, cfg: &PipelineConfig, dbg: &DebugOptions) -> Result<SiteOutput> {
    let site = clip.site;
    let center = site.center();
    let mut review_items = Vec::new();
    let mut warnings = Vec::new();
    if let Some(dir) = &dbg.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let est = estimate_approach_axes(&clip.track, center, &cfg.axis_params());
    warnings.extend(est.warning.clone());
    let polygons = build_approach_polygons(site.id, &est.axes, center, site.radius, &cfg.polygon_params());
    let (clouds, outside) = assign_points(clip, &polygons);
    info!("site {}: {} approaches, {} points outside all polygons", site.id, polygons.len(), outside);

    let surfaces: Vec<Option<SurfaceCloud>> = clouds.par_iter().map(|ac| process_approach(ac, ac.polygon.index, cfg)).collect();

    let mut approaches = Vec::new();
    for (ac, sc) in clouds.iter().zip(surfaces) {
        let polygon = ac.polygon.clone();
        let mut out = ApproachOutput {
            index: polygon.index,
            polygon: polygon.clone(),
            surface: None,
            branches: Vec::new(),
            surface_source: Vec::new(),
        };
        let Some(sc) = sc else {
            warnings.push(format!("approach {}: no trajectory reference line", polygon.index));
            review_items.push(review(
                site.id,
                Some(polygon.index),
                None,
                Severity::Block,
                ReviewCode::EdgeMissing,
                "no usable trajectory through the approach".into(),
            ));
            approaches.push(out);
            continue;
        };
        warnings.extend(sc.warnings.iter().map(|w| format!("approach {}: {w}", polygon.index)));
        if sc.edges.left.is_none() || sc.edges.right.is_none() {
            review_items.push(review(
                site.id,
                Some(polygon.index),
                None,
                Severity::Block,
                ReviewCode::EdgeMissing,
                "road edge not found on one or both sides".into(),
            ));
        }
        if dbg.profiles {
            if let Some(dir) = &dbg.dir {
                write_profiles(dir, site.id, polygon.index, &sc)?;
            }
        }
        out.surface_source = sc
            .source_index
            .iter()
            .map(|&i| clip.source_index[ac.source_index[i as usize] as usize])
            .collect();
        for bc in split_by_median(&sc) {
            let (b, items) = process_branch(&bc, &sc, &polygon, cfg, dbg)?;
            review_items.extend(items);
            out.branches.push(b);
        }
        out.surface = Some(sc);
        approaches.push(out);
    }

    let mut lanes: Vec<Lane> = approaches
        .iter()
        .flat_map(|a| a.branches.iter().filter_map(|b| b.features.as_ref()))
        .flat_map(|f| f.lanes.iter().cloned())
        .collect();
    lanes.sort_by(|a, b| (a.approach, a.branch).cmp(&(b.approach, b.branch)).then(a.lateral.total_cmp(&b.lateral)));
    for (i, l) in lanes.iter_mut().enumerate() {
        l.id = i as u32 + 1;
    }
    let stop_bars: Vec<StopBar> = approaches
        .iter()
        .flat_map(|a| a.branches.iter().filter_map(|b| b.features.as_ref()))
        .filter_map(|f| f.stop_bar.clone())
        .collect();
    for f in approaches.iter().flat_map(|a| a.branches.iter().filter_map(|b| b.features.as_ref())) {
        warnings.extend(f.warnings.iter().cloned());
    }

    let map = if lanes.is_empty() {
        review_items.push(review(
            site.id,
            None,
            None,
            Severity::Block,
            ReviewCode::DegenerateLane,
            "no lanes extracted".into(),
        ));
        None
    } else {
        let surface_pts: Vec<GeoPoint> = approaches
            .iter()
            .filter_map(|a| a.surface.as_ref())
            .flat_map(|s| s.cloud.points().iter().copied())
            .collect();
        let elevation = median_z(&surface_pts).unwrap_or(0.0);
        Some(build_map_message(site.id, center, elevation, clip.cloud.zone, &lanes, &stop_bars)?)
    };
    for w in &warnings {
        warn!("site {}: {w}", site.id);
    }
    Ok(SiteOutput {
        site,
        map,
        review: review_items,
        approaches,
        lanes,
        stop_bars,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Side products

fn lon_lat(xy: Vector2<f64>, zone: UtmZone) -> Result<[f64; 2]> {
    let g = utm_to_geodetic(xy.x, xy.y, zone)?;
    Ok([g.longitude, g.latitude])
}

fn line_feature(coords: &[Vector2<f64>], zone: UtmZone, props: Value) -> Result<Value> {
    let c: Vec<[f64; 2]> = coords.iter().map(|p| lon_lat(*p, zone)).collect::<Result<_>>()?;
    Ok(json!({
        "type": "Feature",
        "geometry": {"type": "LineString", "coordinates": c},
        "properties": props,
    }))
}

/// GeoJSON (WGS84) of lanes, stop bars and road edges for visual review.
pub fn overlay_geojson(out: &SiteOutput, zone: UtmZone) -> Result<String> {
    let mut features = Vec::new();
    for lane in &out.lanes {
        let nodes: Vec<Vector2<f64>> = lane.nodes.iter().map(|n| Vector2::new(n[0], n[1])).collect();
        features.push(line_feature(
            &nodes,
            zone,
            json!({"kind": "lane", "id": lane.id, "approach": lane.approach, "direction": lane.direction,
                   "width_m": lane.width, "turn_pocket": lane.turn_pocket}),
        )?);
    }
    for sb in &out.stop_bars {
        let ends = [Vector2::new(sb.world[0][0], sb.world[0][1]), Vector2::new(sb.world[1][0], sb.world[1][1])];
        features.push(line_feature(
            &ends,
            zone,
            json!({"kind": "stop_bar", "approach": sb.approach, "confidence": sb.confidence}),
        )?);
    }
    for a in &out.approaches {
        for e in a.edge_traces() {
            let v: Vec<Vector2<f64>> = e.vertices.iter().map(|p| Vector2::new(p[0], p[1])).collect();
            features.push(line_feature(&v, zone, json!({"kind": "edge", "approach": a.index, "side": e.side}))?);
        }
    }
    let fc = json!({"type": "FeatureCollection", "features": features});
    Ok(serde_json::to_string_pretty(&fc)? + "\n")
}

#[derive(Serialize)]
struct EdgesReport<'a> {
    site_id: u32,
    approaches: &'a [ExtractedApproach],
}

/// Per-approach axes and edge polylines (what the scorer reads).
pub fn edges_json(out: &SiteOutput) -> String {
    let approaches: Vec<ExtractedApproach> = out.approaches.iter().map(ApproachOutput::extracted).collect();
    serde_json::to_string_pretty(&EdgesReport {
        site_id: out.site.id,
        approaches: &approaches,
    })
    .expect("edges serialize")
        + "\n"
}

pub fn parse_edges_json(text: &str) -> Result<Vec<ExtractedApproach>> {
    #[derive(serde::Deserialize)]
    struct Report {
        approaches: Vec<ExtractedApproach>,
    }
    Ok(serde_json::from_str::<Report>(text)?.approaches)
}

/// Little-endian u64 indices.
pub fn encode_indices(idx: &[u64]) -> Vec<u8> {
    idx.iter().flat_map(|i| i.to_le_bytes()).collect()
}

pub fn decode_indices(bytes: &[u8]) -> Result<Vec<u64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::validation("surface index", "length is not a multiple of 8 bytes"));
    }
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

