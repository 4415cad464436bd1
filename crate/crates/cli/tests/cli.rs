use std::path::Path;
use std::process::{Command, Output};

use layout_attn::io::{read_gray, read_layout, read_raw, write_raw, RawSidecar};
use layout_attn::pipeline::instance_edit_config;
use ndarray::Array3;
use serde_json::{json, Value};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layout-attn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cli")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_frames_flow_masks_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--frames", "4", "--size", "32", "--seed", "7", "--out", "d"]);
    let d = tmp.path().join("d");
    for f in ["frames.f32", "frames.json", "flow.f32", "flow.json", "layout.json", "scene.json"] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    for f in 0..4 {
        assert!(d.join(format!("frame_{f:03}.png")).is_file());
    }
    let layout = read_layout(&d.join("layout.json"), None).unwrap();
    assert_eq!((layout.frames(), layout.resolution()), (4, (32, 32)));
    assert_eq!(layout.regions().len(), 2);
    for f in 0..4 {
        for r in 1..=2 {
            assert!(d.join(format!("masks/mask_f{f:03}_r{r}.pgm")).is_file());
        }
    }
    let flow: Value = serde_json::from_str(&std::fs::read_to_string(d.join("flow.json")).unwrap()).unwrap();
    assert_eq!(flow["shape"], json!([3, 32, 32, 2]));
}

#[test]
fn edit_without_config_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["edit", "--layout", "clusters", "--video", "v", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn unknown_flag_prints_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["synth", "--bogus", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_is_a_validation_error_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--frames", "2", "--size", "12", "--out", "s"]);
    let mut c = instance_edit_config(["green", "blue"]);
    c.modulate_steps = 60;
    std::fs::write(tmp.path().join("c.json"), c.to_json()).unwrap();
    let out = run(tmp.path(), &["edit", "--config", "c.json", "--layout", "s/layout.json", "--video", "s", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modulate_steps"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn missing_video_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), instance_edit_config(["green", "blue"]).to_json()).unwrap();
    let out = run(tmp.path(), &["invert", "--config", "c.json", "--video", "nowhere", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

fn csv_rows(text: &str) -> Vec<(String, f64, String)> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value,scope"));
    lines
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            assert_eq!(parts.len(), 3, "{l}");
            (parts[0].to_string(), parts[1].parse().unwrap(), parts[2].to_string())
        })
        .collect()
}

#[test]
fn eval_csv_matches_json_mirror() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--frames", "2", "--size", "12", "--out", "s"]);
    std::fs::write(dir.join("c.json"), instance_edit_config(["green", "blue"]).to_json()).unwrap();
    ok(dir, &["edit", "--config", "c.json", "--layout", "s/layout.json", "--video", "s", "--out", "o"]);
    ok(
        dir,
        &[
            "eval", "--edited", "o/", "--source", "s/", "--flow", "s/flow", "--report", "r.csv", "--config", "c.json",
            "--layout", "s/layout.json",
        ],
    );
    let rows = csv_rows(&std::fs::read_to_string(dir.join("r.csv")).unwrap());
    let mirror: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    let mut fields = 0;
    for (name, value) in mirror.as_object().unwrap() {
        match value {
            Value::Number(n) => {
                let row = rows.iter().find(|r| r.0 == *name && r.2 == "video").expect(name);
                assert_eq!(row.1, n.as_f64().unwrap(), "{name}");
                fields += 1;
            }
            Value::Object(per_region) => {
                for (region, v) in per_region {
                    let scope = format!("region_{region}");
                    let row = rows.iter().find(|r| r.0 == *name && r.2 == scope).expect(name);
                    assert_eq!(row.1, v.as_f64().unwrap(), "{name} {scope}");
                    fields += 1;
                }
            }
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!(fields, rows.len());
    assert!(rows.iter().any(|r| r.0 == "edit_accuracy" && r.2 == "region_2"));
}

/// A fake run holding one recorded cross-attention tensor.
fn fake_run(dir: &Path, weights: &Array3<f32>, res: (usize, usize)) {
    let mut side = RawSidecar::new(weights.shape());
    side.meta.insert("tokens".into(), json!(["<start>", "red", "<end>"]));
    side.meta.insert("resolution".into(), json!([res.0, res.1]));
    side.meta.insert("region_spans".into(), json!({ "1": [[1, 2]] }));
    write_raw(&dir.join("run/attention/step_00_layer_0"), weights, side).unwrap();
}

#[test]
fn attn_dump_uniform_and_one_hot_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let (h, w) = (4, 5);
    let mut weights = Array3::from_elem((1, h * w, 3), 1.0f32 / 3.0);
    for t in 0..h * w {
        weights[[0, t, 1]] = if t == 7 { 1.0 } else { 0.0 };
    }
    fake_run(tmp.path(), &weights, (h, w));
    ok(tmp.path(), &["attn-dump", "--run", "run", "--step", "0", "--layer", "0", "--out", "maps"]);
    let uniform = read_gray(&tmp.path().join("maps/f000_tok00_start.pgm")).unwrap();
    assert!(uniform.iter().all(|v| *v == 128));
    let hot = read_gray(&tmp.path().join("maps/f000_tok01_red.pgm")).unwrap();
    assert_eq!(hot[[1, 2]], 255);
    assert_eq!(hot.iter().filter(|v| **v != 0).count(), 1);
    assert_eq!(read_gray(&tmp.path().join("maps/f000_region1.pgm")).unwrap(), hot);
    let index: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("maps/index.json")).unwrap()).unwrap();
    assert_eq!(index["maps"].as_array().unwrap().len(), 4);
}

#[test]
fn attn_dump_without_record_fails() {
    let tmp = tempfile::tempdir().unwrap();
    fake_run(tmp.path(), &Array3::from_elem((1, 4, 3), 0.25f32), (2, 2));
    let out = run(tmp.path(), &["attn-dump", "--run", "run", "--step", "3", "--layer", "0", "--out", "maps"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("maps").exists());
}

/// Shapes are flat, so every region token gets the same weight and per-map
/// normalization saturates the region at 255 once it holds the map maximum.
/// The in-region mean may therefore only tie in the heatmaps; the raw dump must
/// grow, and so must the heatmap contrast against the other instance.
#[test]
fn modulated_region_map_is_brighter() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--frames", "2", "--size", "16", "--out", "s"]);
    let modulated = instance_edit_config(["green", "blue"]);
    let mut plain = modulated.clone();
    plain.modulate_cross = false;
    plain.modulate_self = false;
    std::fs::write(dir.join("m.json"), modulated.to_json()).unwrap();
    std::fs::write(dir.join("p.json"), plain.to_json()).unwrap();
    let step = modulated.modulate_steps - 1;
    for (cfg, name) in [("m.json", "m"), ("p.json", "p")] {
        ok(dir, &["edit", "--config", cfg, "--layout", "s/layout.json", "--video", "s", "--out", &format!("run_{name}")]);
        ok(
            dir,
            &[
                "attn-dump", "--run", &format!("run_{name}"), "--step", &step.to_string(), "--layer", "1", "--out",
                &format!("maps_{name}"),
            ],
        );
    }
    let layout = read_layout(&dir.join("s/layout.json"), None).unwrap();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (region, other) in [(1u32, 2u32), (2, 1)] {
        let mask = layout.mask(0, region);
        let other_mask = layout.mask(0, other);
        let heat = |name: &str| {
            let img = read_gray(&dir.join(format!("maps_{name}/f000_region{region}.pgm"))).unwrap();
            let pick = |m: &ndarray::Array2<bool>| -> Vec<f64> {
                img.iter().zip(m.iter()).filter(|(_, on)| **on).map(|(v, _)| *v as f64).collect()
            };
            (avg(&pick(&mask)), avg(&pick(&other_mask)))
        };
        let raw = |name: &str| {
            let (w, side) = read_raw::<f32>(&dir.join(format!("run_{name}/attention/step_{step:02}_layer_1"))).unwrap();
            let spans: Value = side.meta["region_spans"][region.to_string()].clone();
            let (s, e) = (spans[0][0].as_u64().unwrap() as usize, spans[0][1].as_u64().unwrap() as usize);
            let vals: Vec<f64> = mask
                .iter()
                .enumerate()
                .filter(|(_, on)| **on)
                .map(|(t, _)| (s..e).map(|c| w[[0, t, c]] as f64).sum::<f64>())
                .collect();
            avg(&vals)
        };
        let ((m_on, m_other), (p_on, p_other)) = (heat("m"), heat("p"));
        assert!(m_on >= p_on, "region {region}: heatmap {m_on} < {p_on}");
        assert!(m_on - m_other > p_on - p_other, "region {region}: contrast {} vs {}", m_on - m_other, p_on - p_other);
        assert!(raw("m") > raw("p"), "region {region}: raw mass {} vs {}", raw("m"), raw("p"));
    }
}
