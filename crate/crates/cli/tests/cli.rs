use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lanemap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanemap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, spec: Option<&str>, seed: u64) -> Output {
    let mut args = vec!["synth".to_string(), "--out".into(), p(dir).into(), "--seed".into(), seed.to_string()];
    if let Some(spec) = spec {
        let path = dir.with_extension("spec.json");
        fs::write(&path, spec).unwrap();
        args.extend(["--spec".into(), p(&path).into()]);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    lanemap(&args)
}

fn extract(scene: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "extract",
        "--cloud",
        p(&scene.join("cloud.impc")),
        "--trajectory",
        p(&scene.join("trajectory.csv")),
        "--sites",
        p(&scene.join("sites.json")),
        "--out",
        p(out),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    lanemap(&args)
}

fn score(scene: &Path, out: &Path, truth: &Path) -> Output {
    lanemap(&[
        "score",
        "--out",
        p(out),
        "--truth",
        p(truth),
        "--cloud",
        p(&scene.join("cloud.impc")),
        "--labels",
        p(&scene.join("labels.bin")),
    ])
}

#[test]
fn synth_is_deterministic_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = r#"{"sensor": {"density": 50}}"#;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(synth(&a, Some(spec), 4).status.success());
    assert!(synth(&b, Some(spec), 4).status.success());
    for f in ["cloud.impc", "trajectory.csv", "sites.json", "truth.json", "labels.bin", "calibration.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = fs::read(a.join("cloud.impc")).unwrap();
    let line = String::from_utf8_lossy(&header[..header.iter().position(|&c| c == b'\n').unwrap()]).to_string();
    let count: usize = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(count, fs::read(a.join("labels.bin")).unwrap().len());
    let truth: Value = serde_json::from_str(&fs::read_to_string(a.join("truth.json")).unwrap()).unwrap();
    let total: u64 = truth["label_counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total as usize, count);
}

#[test]
fn invalid_spec_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = synth(&tmp.path().join("s"), Some(r#"{"approach": {"lane_width": 5.0}}"#), 1);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("approach.lane_width"), "{err}");
}

#[test]
fn extract_publishes_reproducibly_and_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert!(synth(&scene, None, 7).status.success());
    let out = tmp.path().join("out");
    let o = extract(&scene, &out, &["--surface-index"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let site = out.join("1");
    for f in ["map.json", "review.ndjson", "overlay.geojson", "edges.json", "config.json", "surface.idx"] {
        assert!(site.join(f).exists(), "{f}");
    }
    let map: Value = serde_json::from_str(&fs::read_to_string(site.join("map.json")).unwrap()).unwrap();
    let approaches: std::collections::BTreeSet<u64> =
        map["lanes"].as_array().unwrap().iter().map(|l| l["approach"].as_u64().unwrap()).collect();
    assert_eq!(approaches.len(), 4);
    let geo: Value = serde_json::from_str(&fs::read_to_string(site.join("overlay.geojson")).unwrap()).unwrap();
    assert_eq!(geo["type"], "FeatureCollection");

    // Byte-identical on a second run.
    let out2 = tmp.path().join("out2");
    assert!(extract(&scene, &out2, &["--surface-index", "--workers", "1"]).status.success());
    assert_eq!(fs::read(site.join("map.json")).unwrap(), fs::read(out2.join("1/map.json")).unwrap());

    let truth = scene.join("truth.json");
    let o = score(&scene, &out, &truth);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(site.join("score.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["surface_recall"].as_f64().unwrap() >= 0.99);

    // Moving the true stop bar 0.5 m outward exceeds the 0.3 m threshold.
    let mut t: Value = serde_json::from_str(&fs::read_to_string(&truth).unwrap()).unwrap();
    let axis = t["approaches"][0]["axis"].clone();
    for end in t["approaches"][0]["stop_bar"].as_array_mut().unwrap() {
        for k in 0..2 {
            let v = end[k].as_f64().unwrap() + 0.5 * axis[k].as_f64().unwrap();
            end[k] = v.into();
        }
    }
    let shifted = tmp.path().join("shifted.json");
    fs::write(&shifted, t.to_string()).unwrap();
    let o = score(&scene, &out, &shifted);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stop-bar error"));

    let o = lanemap(&["report", "--out", p(&out), "--json"]);
    assert!(o.status.success());
    let rows: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows[0]["status"], "published");
    assert_eq!(rows[0]["lanes"], 20);
}

#[test]
fn faded_approach_is_quarantined() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let spec = r#"{"approaches": [{}, {"fade": 1.0}, {}, {}]}"#;
    assert!(synth(&scene, Some(spec), 3).status.success());
    let out = tmp.path().join("maps").join("out");
    let o = extract(&scene, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let q = tmp.path().join("maps").join("quarantine").join("1");
    let review = fs::read_to_string(q.join("review.ndjson")).unwrap();
    assert!(review.contains("FADED_MARKINGS") && review.contains("NO_STOP_BAR"), "{review}");
    assert!(!out.join("1").exists());
}

#[test]
fn missing_trajectory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert!(synth(&scene, Some(r#"{"sensor": {"density": 20}}"#), 1).status.success());
    fs::remove_file(scene.join("trajectory.csv")).unwrap();
    let o = extract(&scene, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trajectory.csv"));
}
