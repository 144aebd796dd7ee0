//! `lanemap`: extract intersection maps from mobile-LiDAR clouds, generate
//! synthetic scenes, and score extractions against their truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;

use lanemap_core::config::PipelineConfig;
use lanemap_core::mapmsg::{apply_overrides, decode_map_json, default_quarantine, publish, read_review, resolve_review, Overrides};
use lanemap_core::pcio::{read_point_cloud, read_sites, read_trajectory, write_point_cloud, write_sites, write_trajectory, PointReader};
use lanemap_core::pipeline::{clip_stream, decode_indices, edges_json, encode_indices, extract_site, overlay_geojson, parse_edges_json, DebugOptions};
use lanemap_core::synth::{decode_labels, encode_labels, generate_scene, score_extraction, ExtractionProducts, GroundTruth, SceneSpec};
use lanemap_core::{Error, Result};

const EXIT_QUARANTINED: u8 = 2;
const EXIT_BELOW_THRESHOLD: u8 = 3;

#[derive(Parser)]
#[command(name = "lanemap", version, about = "Intersection maps from mobile LiDAR")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract lane maps for every site.
    Extract(ExtractArgs),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Score one site's extraction against scene truth.
    Score(ScoreArgs),
    /// Summarize published and quarantined sites.
    Report(ReportArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Georeferenced point file (IMPC1).
    #[arg(long)]
    cloud: PathBuf,
    /// Trajectory CSV.
    #[arg(long)]
    trajectory: PathBuf,
    /// Sites JSON.
    #[arg(long)]
    sites: PathBuf,
    /// Pipeline config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Published sites go to `<out>/<site>/`.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to a `quarantine` directory next to `--out`.
    #[arg(long)]
    quarantine: Option<PathBuf>,
    /// Intensity threshold, overriding the config.
    #[arg(long)]
    tau: Option<f64>,
    /// JSON object of per-site overrides keyed by site id.
    #[arg(long)]
    overrides: Option<PathBuf>,
    /// Write marking rasters (PGM) per branch.
    #[arg(long)]
    debug_rasters: bool,
    /// Write lateral profiles (CSV) per approach.
    #[arg(long)]
    debug_profiles: bool,
    /// Also write the accepted surface point indices (`surface.idx`).
    #[arg(long)]
    surface_index: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON; defaults to the standard X intersection.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// RNG seed; equal seeds give identical scenes.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Scene directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Extraction output root (as given to `extract --out`).
    #[arg(long)]
    out: PathBuf,
    /// `truth.json` written by `synth`.
    #[arg(long)]
    truth: PathBuf,
    /// Defaults to a `quarantine` directory next to `--out`.
    #[arg(long)]
    quarantine: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    site: u32,
    /// Config whose `score` thresholds apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene cloud and labels enable the surface metrics.
    #[arg(long, requires = "labels")]
    cloud: Option<PathBuf>,
    /// Per-point labels (`labels.bin`) matching `--cloud`.
    #[arg(long, requires = "cloud")]
    labels: Option<PathBuf>,
    /// Defaults to `score.json` in the site directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Extraction output root.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to a `quarantine` directory next to `--out`.
    #[arg(long)]
    quarantine: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::from_json(&read_text(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn extract(args: &ExtractArgs) -> Result<ExitCode> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    cfg.validate()?;
    let trajectory = read_trajectory(&args.trajectory)?;
    let sites = read_sites(&args.sites)?;
    let overrides: BTreeMap<u32, Overrides> = match &args.overrides {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => BTreeMap::new(),
    };
    let quarantine = args.quarantine.clone().unwrap_or_else(|| default_quarantine(&args.out));
    let clips = clip_stream(PointReader::open(&args.cloud)?, &trajectory, &sites)?;
    let config_json = cfg.to_json() + "\n";

    let results: Vec<(u32, Result<bool>)> = clips
        .par_iter()
        .map(|clip| {
            let id = clip.site.id;
            let run = || -> Result<bool> {
                let dbg = DebugOptions {
                    dir: (args.debug_rasters || args.debug_profiles).then(|| args.out.join("debug").join(id.to_string())),
                    rasters: args.debug_rasters,
                    profiles: args.debug_profiles,
                };
                let out = extract_site(clip, &cfg, &dbg)?;
                let (map, review) = match (&out.map, overrides.get(&id)) {
                    (Some(m), Some(ov)) => (Some(apply_overrides(m, ov)?), resolve_review(&out.review, ov)),
                    (m, _) => (m.clone(), out.review.clone()),
                };
                let extra = [
                    ("overlay.geojson", overlay_geojson(&out, clip.cloud.zone)?),
                    ("edges.json", edges_json(&out)),
                    ("config.json", config_json.clone()),
                ];
                let published = publish(map.as_ref(), id, &review, &args.out, &quarantine, &extra)?;
                if args.surface_index {
                    write(&published.dir.join("surface.idx"), encode_indices(&out.surface_source()))?;
                }
                info!(
                    "site {id}: {} lanes, {} review items -> {}",
                    out.lanes.len(),
                    review.len(),
                    published.dir.display()
                );
                Ok(published.quarantined)
            };
            (id, run())
        })
        .collect();

    let mut failed = false;
    let mut quarantined = false;
    for (id, r) in results {
        match r {
            Ok(q) => quarantined |= q,
            Err(e) => {
                error!("site {id}: {e}");
                failed = true;
            }
        }
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else if quarantined {
        ExitCode::from(EXIT_QUARANTINED)
    } else {
        ExitCode::SUCCESS
    })
}

fn synth(args: &SynthArgs) -> Result<ExitCode> {
    let spec = match &args.spec {
        Some(p) => SceneSpec::from_json(&read_text(p)?)?,
        None => SceneSpec::default(),
    };
    let scene = generate_scene(&spec, args.seed)?;
    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_point_cloud(&scene.cloud()?, out.join("cloud.impc"))?;
    write_trajectory(&scene.trajectory, out.join("trajectory.csv"))?;
    write_sites(&[scene.site()], out.join("sites.json"))?;
    write(&out.join("truth.json"), serde_json::to_string_pretty(&scene.truth)? + "\n")?;
    write(&out.join("labels.bin"), encode_labels(&scene.labels))?;
    write(&out.join("calibration.json"), scene.calibration.to_json())?;
    write(&out.join("scene.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    info!("wrote {} points to {}", scene.returns.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn site_dir(out: &Path, quarantine: &Path, site: u32) -> Option<PathBuf> {
    [out, quarantine].iter().map(|d| d.join(site.to_string())).find(|d| d.is_dir())
}

fn score(args: &ScoreArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config.as_deref())?;
    let truth: GroundTruth = serde_json::from_str(&read_text(&args.truth)?)?;
    let quarantine = args.quarantine.clone().unwrap_or_else(|| default_quarantine(&args.out));
    let dir = site_dir(&args.out, &quarantine, args.site)
        .ok_or_else(|| Error::validation("out", format!("no output for site {}", args.site)))?;
    let map_path = dir.join("map.json");
    let map = if map_path.exists() {
        Some(decode_map_json(&read_text(&map_path)?)?)
    } else {
        None
    };
    let idx_path = dir.join("surface.idx");
    let surface = if idx_path.exists() {
        Some(decode_indices(&fs::read(&idx_path).map_err(|e| Error::io(&idx_path, e))?)?)
    } else {
        None
    };
    let products = ExtractionProducts {
        map,
        approaches: parse_edges_json(&read_text(&dir.join("edges.json"))?)?,
        review: read_review(&read_text(&dir.join("review.ndjson"))?)?,
        surface,
    };
    let (cloud, labels) = match (&args.cloud, &args.labels) {
        (Some(c), Some(l)) => {
            let labels = decode_labels(&fs::read(l).map_err(|e| Error::io(l, e))?)?;
            (Some(read_point_cloud(c)?), Some(labels))
        }
        _ => (None, None),
    };
    let s = score_extraction(
        &products,
        &truth,
        cloud.as_ref().map(|c| c.points()),
        labels.as_deref(),
        &cfg.score,
    );
    let report = args.report.clone().unwrap_or_else(|| dir.join("score.json"));
    write(&report, serde_json::to_string_pretty(&s)? + "\n")?;
    for f in &s.failures {
        eprintln!("{f}");
    }
    Ok(if s.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_BELOW_THRESHOLD)
    })
}

#[derive(serde::Serialize)]
struct SiteSummary {
    site: String,
    status: &'static str,
    lanes: usize,
    stop_bars: usize,
    review: BTreeMap<String, usize>,
}

fn summarize(root: &Path, status: &'static str, into: &mut Vec<SiteSummary>) -> Result<()> {
    let Ok(entries) = fs::read_dir(root) else { return Ok(()) };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("review.ndjson").exists()).collect();
    dirs.sort();
    for d in dirs {
        let map_path = d.join("map.json");
        let map = if map_path.exists() {
            Some(decode_map_json(&read_text(&map_path)?)?)
        } else {
            None
        };
        let mut review = BTreeMap::new();
        for item in read_review(&read_text(&d.join("review.ndjson"))?)? {
            let code = serde_json::to_value(item.code)?.as_str().unwrap_or_default().to_string();
            *review.entry(code).or_default() += 1;
        }
        into.push(SiteSummary {
            site: d.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            status,
            lanes: map.as_ref().map_or(0, |m| m.lanes.len()),
            stop_bars: map.as_ref().map_or(0, |m| m.stop_bars.len()),
            review,
        });
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let quarantine = args.quarantine.clone().unwrap_or_else(|| default_quarantine(&args.out));
    let mut rows = Vec::new();
    summarize(&args.out, "published", &mut rows)?;
    summarize(&quarantine, "quarantined", &mut rows)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!("{:<8} {:<12} {:>5} {:>9}  review", "site", "status", "lanes", "stop bars");
        for r in &rows {
            let review: Vec<String> = r.review.iter().map(|(k, v)| format!("{k}x{v}")).collect();
            println!("{:<8} {:<12} {:>5} {:>9}  {}", r.site, r.status, r.lanes, r.stop_bars, review.join(" "));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Extract(a) => extract(a),
        Command::Synth(a) => synth(a),
        Command::Score(a) => score(a),
        Command::Report(a) => report(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}
