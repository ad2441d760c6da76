use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coherentflow::synth::scenes;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coherentflow"));
    c.env_remove("COHERENTFLOW_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, value.to_string()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stage(cmd: &str, config: &Path, input: Option<&Path>, out: Option<&Path>) -> Output {
    let mut c = bin();
    c.arg(cmd).arg("--config").arg(config);
    if let Some(i) = input {
        c.arg("--in").arg(i);
    }
    if let Some(o) = out {
        c.arg("--out").arg(o);
    }
    c.output().unwrap()
}

fn ok(o: Output) {
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, "{ not json").unwrap();
    assert_eq!(code(&stage("detect", &p, Some(tmp.path()), None)), 2);
    std::fs::write(&p, r#"{"diffusion": {"k_p": -1}}"#).unwrap();
    assert_eq!(code(&stage("detect", &p, Some(tmp.path()), None)), 2);
    std::fs::write(&p, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(code(&stage("detect", &p, Some(tmp.path()), None)), 2);
    let missing = tmp.path().join("missing.json");
    assert_eq!(code(&stage("detect", &missing, Some(tmp.path()), None)), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["detect"])), 2);
}

#[test]
fn empty_flow_dir_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({}));
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = stage("detect", &cfg, Some(&empty), None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("frame_"));
    assert_eq!(
        code(&stage("detect", &cfg, Some(&tmp.path().join("nope")), None)),
        2
    );
    // later stages without their inputs
    assert_eq!(code(&stage("regions", &cfg, Some(&empty), None)), 2);
    assert_eq!(code(&stage("mine", &cfg, Some(&empty), None)), 2);
}

#[test]
fn bad_thread_env_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({}));
    let o = bin()
        .env("COHERENTFLOW_THREADS", "zero")
        .args(["detect", "--config"])
        .arg(&cfg)
        .arg("--in")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unwritable_output_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({ "scene": scenes::two_lane(0.1, 0, 6) }));
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    assert_eq!(
        code(&stage("synth", &cfg, None, Some(&blocker.join("sub")))),
        3
    );
}

#[test]
fn two_lane_detection_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({ "seed": 3, "scene": scenes::two_lane(0.1, 0, 8), "detect": { "tef_starts": [0, 3] } }),
    );
    let run_dir = tmp.path().join("run");
    ok(stage("synth", &cfg, None, Some(&run_dir)));
    ok(stage("detect", &cfg, Some(&run_dir), None));
    let report = read_json(&run_dir.join("detections.json"));
    assert_eq!(report["schema_version"], 1);
    let tefs = report["tefs"].as_array().unwrap();
    assert_eq!(tefs.len(), 2);
    for t in tefs {
        assert_eq!(t["regions"].as_array().unwrap().len(), 2);
    }
    let eval = &report["evaluation"];
    assert!(eval["mean_per"].as_f64().unwrap() <= 0.1);
    assert_eq!(eval["cne"].as_f64().unwrap(), 0.0);
    assert!(run_dir.join("regions_0003.pgm").exists());
}

#[test]
fn tef_start_past_end_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({ "scene": scenes::two_lane(0.1, 0, 6), "detect": { "tef_starts": [4] } }),
    );
    let run_dir = tmp.path().join("run");
    ok(stage("synth", &cfg, None, Some(&run_dir)));
    assert_eq!(code(&stage("detect", &cfg, Some(&run_dir), None)), 2);
}

fn pipeline(root: &Path, seed: u64) -> PathBuf {
    let cfg = write_config(
        root,
        &json!({
            "seed": seed,
            "scene": scenes::two_phase_traffic(6, 42, 0.2, 1),
            "detect": { "tef_stride": 6 },
        }),
    );
    let dir = root.join("run");
    ok(stage("synth", &cfg, None, Some(&dir)));
    for s in ["detect", "regions", "mine", "render"] {
        ok(stage(s, &cfg, Some(&dir), None));
    }
    dir
}

fn reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let e = e.ok()?;
            let name = e.file_name().into_string().ok()?;
            (name.ends_with(".json") || name.ends_with(".pgm"))
                .then(|| (name, std::fs::read(e.path()).unwrap()))
        })
        .collect();
    out.sort();
    out
}

#[test]
fn pipeline_is_deterministic_and_renders() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, db) = (pipeline(a.path(), 11), pipeline(b.path(), 11));
    let (ra, rb) = (reports(&da), reports(&db));
    assert!(ra.iter().any(|(n, _)| n == "mining.json"));
    assert_eq!(ra, rb);

    let mining = read_json(&da.join("mining.json"));
    assert_eq!(mining["schema_version"], 1);
    assert_eq!(mining["k"], 2);
    assert_eq!(mining["accuracy"].as_f64().unwrap(), 1.0);
    let regions = read_json(&da.join("regions.json"));
    assert!(regions["rand_index"].as_f64().unwrap() > 0.8);

    let render = read_json(&da.join("render").join("render.json"));
    let images: Vec<&str> = render["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(images.contains(&"curves.png") && images.contains(&"semantic.png"));
    for name in images {
        assert!(da.join("render").join(name).exists(), "{name}");
    }
}

#[test]
fn curve_control_points_are_drawn_where_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = pipeline(tmp.path(), 2);
    let mining = read_json(&dir.join("mining.json"));
    let img = image_rgb(&dir.join("render").join("curves.png"));
    let scale = 4.0;
    let mut probed = 0;
    for g in mining["groups"].as_array().unwrap() {
        for c in g["clusters"].as_array().unwrap() {
            let Some(curve) = c["curve"].as_object() else {
                continue;
            };
            for p in curve["points"].as_array().unwrap() {
                let (x, y) = (p[0].as_f64().unwrap(), p[1].as_f64().unwrap());
                let px = ((x * scale).round() + 2.0) as u32;
                let py = ((y * scale).round() + 2.0) as u32;
                assert_eq!(
                    img.get_pixel(px, py).0,
                    [255, 255, 255],
                    "control point ({x}, {y})"
                );
                probed += 1;
            }
        }
    }
    assert!(probed > 0);
}

fn image_rgb(path: &Path) -> image::RgbImage {
    image::open(path).unwrap().to_rgb8()
}

#[test]
fn zero_field_renders_blank() {
    let tmp = tempfile::tempdir().unwrap();
    let dims = coherentflow::GridDims::new(8, 6).unwrap();
    let field_dir = tmp.path().join("flo");
    std::fs::create_dir(&field_dir).unwrap();
    coherentflow::flo::write_flo(
        &coherentflow::MotionField::zeros(dims),
        field_dir.join("zero.flo"),
    )
    .unwrap();
    let cfg = write_config(tmp.path(), &json!({ "render": { "scale": 2 } }));
    ok(stage(
        "render",
        &cfg,
        Some(&field_dir),
        Some(&tmp.path().join("png")),
    ));
    let img = image_rgb(&tmp.path().join("png").join("zero.png"));
    assert_eq!(img.dimensions(), (16, 12));
    assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
}

fn clips_config(root: &Path, train: usize, regions: &Path) -> PathBuf {
    write_config(
        root,
        &json!({
            "seed": 5,
            "clips": { "train": train, "test": 8 },
            "recognize": { "regions": regions },
        }),
    )
}

#[test]
fn recognize_trains_and_reuses_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = pipeline(tmp.path(), 4);
    let cfg = clips_config(tmp.path(), 24, &dir.join("semantic.pgm"));
    let data = tmp.path().join("data");
    ok(stage("synth", &cfg, None, Some(&data)));
    let out = tmp.path().join("rec");
    ok(stage(
        "recognize",
        &cfg,
        Some(&data.join("clips")),
        Some(&out),
    ));
    let rep = read_json(&out.join("recognition.json"));
    assert_eq!(rep["trained"], true);
    assert_eq!(rep["predictions"].as_array().unwrap().len(), 8);

    let reuse = write_config(
        tmp.path(),
        &json!({ "recognize": { "regions": dir.join("semantic.pgm"), "model": out.join("model.json") } }),
    );
    let out2 = tmp.path().join("rec2");
    ok(stage(
        "recognize",
        &reuse,
        Some(&data.join("clips")),
        Some(&out2),
    ));
    let rep2 = read_json(&out2.join("recognition.json"));
    assert_eq!(rep2["trained"], false);
    assert_eq!(rep["predictions"], rep2["predictions"]);
}

#[test]
fn single_class_training_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = pipeline(tmp.path(), 4);
    // one training clip means one class
    let cfg = clips_config(tmp.path(), 1, &dir.join("semantic.pgm"));
    let data = tmp.path().join("data");
    ok(stage("synth", &cfg, None, Some(&data)));
    let o = stage("recognize", &cfg, Some(&data.join("clips")), None);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn recognize_without_regions_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({}));
    assert_eq!(code(&stage("recognize", &cfg, Some(tmp.path()), None)), 2);
}
