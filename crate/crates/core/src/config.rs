//! Pipeline tunables. Every field has a default; config files may set any
//! subset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{AxisParams, PolygonParams};

/// Cleanup applied to the binary marking mask before line extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    None,
    Open,
    Close,
    /// Closing (fills sparse pixel dropouts) followed by opening (removes speckle).
    CloseOpen,
}

/// Pass/fail limits used by `score`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreThresholds {
    pub max_stop_bar_error: f64,
    pub max_centerline_rms: f64,
    pub max_first_node_error: f64,
    pub max_edge_rms: f64,
    pub min_surface_recall: f64,
    pub min_clutter_rejection: f64,
}

impl Default for ScoreThresholds {
    fn default() -> Self {
        ScoreThresholds {
            max_stop_bar_error: 0.3,
            max_centerline_rms: 0.2,
            max_first_node_error: 0.1,
            max_edge_rms: 0.2,
            min_surface_recall: 0.95,
            min_clutter_rejection: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // Clipping and approach partitioning.
    pub site_radius: f64,
    pub heading_exclusion_radius: f64,
    pub heading_min_step: f64,
    pub heading_linkage_deg: f64,
    pub polygon_inner_offset: f64,
    pub polygon_half_width: f64,

    // Swath profiles and edges.
    pub swath_length: f64,
    pub lateral_bin: f64,
    pub z_cell: f64,
    pub curb_threshold: f64,
    pub gap_bins: usize,
    pub median_min_width: f64,
    pub median_max_width: f64,
    pub median_return_tolerance: f64,
    pub edge_outlier_tolerance: f64,
    pub edge_gap_fill: f64,
    pub edge_segment_length: f64,

    // Surface.
    /// Height of the trajectory reference point above the road.
    pub platform_height: f64,
    pub surface_band: f64,
    pub poly_degree: usize,

    // Raster.
    pub pixel_size: f64,
    pub tau: f64,
    pub pixel_budget: usize,
    pub morphology: Morphology,
    pub morph_radius: usize,
    /// Branches whose thresholded share exceeds this are flagged noisy.
    pub max_marking_fraction: f64,

    // Features.
    pub hough_theta_step: f64,
    pub hough_vote_fraction: f64,
    pub peak_window_rho: usize,
    pub peak_window_theta: f64,
    pub orthogonal_tolerance_deg: f64,
    pub parallel_tolerance_deg: f64,
    pub stop_bar_min_span: f64,
    pub crosswalk_window: f64,
    pub solid_duty: f64,
    pub dashed_duty: f64,
    pub min_lane_width: f64,
    pub max_lane_width: f64,
    pub node_spacing: f64,

    pub score: ScoreThresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            site_radius: 60.0,
            heading_exclusion_radius: 15.0,
            heading_min_step: 0.2,
            heading_linkage_deg: 30.0,
            polygon_inner_offset: 5.0,
            polygon_half_width: 25.0,
            swath_length: 1.0,
            lateral_bin: 0.05,
            z_cell: 0.02,
            curb_threshold: 0.08,
            gap_bins: 3,
            median_min_width: 0.5,
            median_max_width: 8.0,
            median_return_tolerance: 0.3,
            edge_outlier_tolerance: 0.5,
            edge_gap_fill: 10.0,
            edge_segment_length: 10.0,
            platform_height: 2.0,
            surface_band: 0.20,
            poly_degree: 6,
            pixel_size: 0.03,
            tau: 0.45,
            pixel_budget: 100_000_000,
            morphology: Morphology::CloseOpen,
            morph_radius: 1,
            max_marking_fraction: 0.35,
            hough_theta_step: 1.0,
            hough_vote_fraction: 0.5,
            peak_window_rho: 15,
            peak_window_theta: 5.0,
            orthogonal_tolerance_deg: 10.0,
            parallel_tolerance_deg: 5.0,
            stop_bar_min_span: 0.6,
            crosswalk_window: 8.0,
            solid_duty: 0.8,
            dashed_duty: 0.2,
            min_lane_width: 2.7,
            max_lane_width: 3.9,
            node_spacing: 6.0,
            score: ScoreThresholds::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be positive, got {v}")))
    }
}

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must lie in [0, 1], got {v}")))
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("site_radius", self.site_radius),
            ("heading_exclusion_radius", self.heading_exclusion_radius),
            ("heading_min_step", self.heading_min_step),
            ("heading_linkage_deg", self.heading_linkage_deg),
            ("polygon_inner_offset", self.polygon_inner_offset),
            ("polygon_half_width", self.polygon_half_width),
            ("swath_length", self.swath_length),
            ("lateral_bin", self.lateral_bin),
            ("z_cell", self.z_cell),
            ("curb_threshold", self.curb_threshold),
            ("median_min_width", self.median_min_width),
            ("median_max_width", self.median_max_width),
            ("median_return_tolerance", self.median_return_tolerance),
            ("edge_outlier_tolerance", self.edge_outlier_tolerance),
            ("edge_gap_fill", self.edge_gap_fill),
            ("edge_segment_length", self.edge_segment_length),
            ("platform_height", self.platform_height),
            ("surface_band", self.surface_band),
            ("pixel_size", self.pixel_size),
            ("hough_theta_step", self.hough_theta_step),
            ("hough_vote_fraction", self.hough_vote_fraction),
            ("peak_window_theta", self.peak_window_theta),
            ("orthogonal_tolerance_deg", self.orthogonal_tolerance_deg),
            ("parallel_tolerance_deg", self.parallel_tolerance_deg),
            ("stop_bar_min_span", self.stop_bar_min_span),
            ("crosswalk_window", self.crosswalk_window),
            ("min_lane_width", self.min_lane_width),
            ("max_lane_width", self.max_lane_width),
            ("node_spacing", self.node_spacing),
        ] {
            positive(name, v)?;
        }
        for (name, v) in [("gap_bins", self.gap_bins), ("pixel_budget", self.pixel_budget), ("morph_radius", self.morph_radius), ("peak_window_rho", self.peak_window_rho)] {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        unit_interval("tau", self.tau)?;
        unit_interval("solid_duty", self.solid_duty)?;
        unit_interval("dashed_duty", self.dashed_duty)?;
        unit_interval("max_marking_fraction", self.max_marking_fraction)?;
        if self.poly_degree < 2 {
            return Err(Error::validation("poly_degree", "must be at least 2"));
        }
        if self.min_lane_width >= self.max_lane_width {
            return Err(Error::validation("min_lane_width", "must be below max_lane_width"));
        }
        if self.dashed_duty >= self.solid_duty {
            return Err(Error::validation("dashed_duty", "must be below solid_duty"));
        }
        if self.polygon_inner_offset >= self.site_radius {
            return Err(Error::validation("polygon_inner_offset", "must be below site_radius"));
        }
        let steps = (180.0 / self.hough_theta_step).round();
        if (steps * self.hough_theta_step - 180.0).abs() > 1e-9 {
            return Err(Error::validation("hough_theta_step", "must divide 180"));
        }
        Ok(())
    }

    pub fn axis_params(&self) -> AxisParams {
        AxisParams {
            exclusion_radius: self.heading_exclusion_radius,
            min_step: self.heading_min_step,
            linkage_deg: self.heading_linkage_deg,
            ..AxisParams::default()
        }
    }

    pub fn polygon_params(&self) -> PolygonParams {
        PolygonParams {
            inner_offset: self.polygon_inner_offset,
            half_width: self.polygon_half_width,
        }
    }
}
