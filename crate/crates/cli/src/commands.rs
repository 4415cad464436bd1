use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use layout_attn::clustering::{cluster_frames, collect_features, match_clusters, ClusterLayout};
use layout_attn::diffusion::{
    ddim_invert, make_schedule_with, DenoiserDims, ForwardTrace, ToyDenoiser, TrainConfig, SEEDED_OUT_GAIN,
};
use layout_attn::io::{
    heatmap, read_flow, read_json, read_layout, read_raw, read_video, shipped_weights, write_flow, write_json,
    load_weights, read_weights_manifest, save_weights, shipped_manifest, write_layout, write_mask, write_pgm,
    write_raw, write_trajectory, write_video, RawSidecar, WeightsManifest,
};
use layout_attn::metrics::MetricReport;
use layout_attn::pipeline::{
    evaluate, region_prompt_embedding, run_edit, scene_layout, training_set, DatasetConfig, EditConfig, LayoutSource,
    ScheduleConfig,
};
use layout_attn::synth::{synth_video, SyntheticScene};
use layout_attn::{Denoiser, Error, Result, Video};
use ndarray::{Array2, Array3, Axis};
use serde_json::json;

use crate::output::{write_file, StagedDir};
use crate::{
    AttnDumpArgs, ClusterArgs, EditArgs, EvalArgs, InvertArgs, ModelArgs, SceneKind, ScheduleKind, SynthArgs,
    TrainArgs,
};

fn load_config(path: &Path) -> Result<EditConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EditConfig::from_json(&text)
}

/// Checkpoints record the noise schedule they were trained with; sampling
/// with another one is refused.
fn check_schedule(manifest: &WeightsManifest, config: &EditConfig) -> Result<()> {
    let Some(trained) = manifest.meta.get("schedule") else {
        return Ok(());
    };
    let trained: ScheduleConfig = serde_json::from_value(trained.clone())
        .map_err(|e| Error::config("weights", format!("unreadable schedule in checkpoint: {e}")))?;
    if trained != config.schedule {
        return Err(Error::config(
            "schedule",
            format!("checkpoint was trained with {}, config asks for {}", json!(trained), json!(config.schedule)),
        ));
    }
    Ok(())
}

fn load_model(args: &ModelArgs, config: &EditConfig) -> Result<Denoiser> {
    match args.weights.as_deref() {
        None => config.seeded_model(),
        Some("shipped") => {
            check_schedule(&shipped_manifest()?, config)?;
            shipped_weights()
        }
        Some(dir) => {
            check_schedule(&read_weights_manifest(Path::new(dir))?, config)?;
            load_weights(Path::new(dir))
        }
    }
}

fn flow_or_default(explicit: Option<&PathBuf>, video: &Path) -> Result<Option<Vec<Array3<f32>>>> {
    match explicit {
        Some(prefix) => read_flow(prefix).map(Some),
        None if video.join("flow.json").exists() => read_flow(&video.join("flow")).map(Some),
        None => Ok(None),
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let scene = match &a.scene_file {
        Some(p) => read_json::<SyntheticScene>(p)?,
        None => match a.scene {
            SceneKind::TwoSquares => SyntheticScene::two_squares(a.frames, a.size),
            SceneKind::SquareAndCircle => SyntheticScene::square_and_circle(a.frames, a.size),
        },
    };
    let video = synth_video::<f32>(&scene, a.seed)?;
    let layout = scene_layout(&scene, &video.masks, "")?;
    let stage = StagedDir::new(&a.out)?;
    let dir = stage.path();
    write_video(dir, &video.frames)?;
    write_flow(&dir.join("flow"), &video.flow)?;
    write_layout(dir, &layout)?;
    write_json(&dir.join("scene.json"), &json!({ "seed": a.seed, "scene": scene }))?;
    stage.commit()
}

fn invert_video(config: &EditConfig, net: &Denoiser, video: &Video) -> Result<layout_attn::diffusion::Trajectory<f32>> {
    let params = config.schedule::<f32>()?;
    let source = region_prompt_embedding::<f32>(config, false, net.dims.text_dim)?;
    ddim_invert(video, net, &source.matrix, &params, &[config.clustering.step])
}

pub fn invert(a: &InvertArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let net = load_model(&a.model, &config)?;
    let video = read_video::<f32>(&a.video)?;
    let traj = invert_video(&config, &net, &video)?;
    let stage = StagedDir::new(&a.out)?;
    write_trajectory(stage.path(), &traj)?;
    stage.commit()
}

fn write_clusters(dir: &Path, clusters: &ClusterLayout, config: &EditConfig, res: (usize, usize)) -> Result<()> {
    let c = &config.clustering;
    let mut frames = Vec::new();
    for (f, (labels, centroids)) in clusters.labels.iter().zip(&clusters.centroids).enumerate() {
        let img = Array2::from_shape_fn(res, |(y, x)| (labels[y * res.1 + x] * 40).min(255) as u8);
        let labels_file = format!("labels_f{f:03}.pgm");
        let centroid_stem = format!("centroids_f{f:03}");
        write_pgm(&dir.join(&labels_file), img.view())?;
        write_raw(&dir.join(&centroid_stem), &centroids.mapv(|v| v as f32), RawSidecar::new(centroids.shape()))?;
        frames.push(json!({ "labels": labels_file, "centroids": format!("{centroid_stem}.f32") }));
    }
    let params = config.schedule::<f32>()?;
    write_json(
        &dir.join("clusters.json"),
        &json!({
            "k": clusters.k,
            "seed": config.seed,
            "block": c.block,
            "position": c.step,
            "timestep": params.timestep_at(c.step),
            "frames": frames,
        }),
    )
}

pub fn cluster(a: &ClusterArgs) -> Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(k) = a.k {
        config.clustering.k = k;
        config.validate()?;
    }
    let net = load_model(&a.model, &config)?;
    let video = read_video::<f32>(&a.video)?;
    let traj = invert_video(&config, &net, &video)?;
    let c = &config.clustering;
    let stack = collect_features(&traj, c.block, c.step)?;
    let clusters = match_clusters(&cluster_frames(&stack, c.k, config.seed, c.max_iters, c.tol)?);
    let (_, h, w, _) = video.dim();
    let stage = StagedDir::new(&a.out)?;
    write_clusters(stage.path(), &clusters, &config, (h, w))?;
    stage.commit()
}

fn attention_stem(step: usize, layer: usize) -> String {
    format!("step_{step:02}_layer_{layer}")
}

fn write_traces(
    dir: &Path,
    traces: &BTreeMap<usize, ForwardTrace<f32>>,
    tokens: &[String],
    spans: &BTreeMap<u32, Vec<std::ops::Range<usize>>>,
    res: (usize, usize),
) -> Result<()> {
    let mut mass = serde_json::Map::new();
    for (step, tr) in traces {
        for (layer, frames) in tr.cross_weights.iter().enumerate() {
            let views: Vec<_> = frames.iter().map(|m| m.view()).collect();
            let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::Format {
                path: dir.to_path_buf(),
                message: e.to_string(),
            })?;
            let mut side = RawSidecar::new(stacked.shape());
            side.meta.insert("axes".into(), json!(["frame", "latent_token", "text_position"]));
            side.meta.insert("tokens".into(), json!(tokens));
            side.meta.insert("resolution".into(), json!([res.0, res.1]));
            let spans: BTreeMap<String, Vec<[usize; 2]>> = spans
                .iter()
                .map(|(r, v)| (r.to_string(), v.iter().map(|s| [s.start, s.end]).collect()))
                .collect();
            side.meta.insert("region_spans".into(), json!(spans));
            write_raw(&dir.join(attention_stem(*step, layer)), &stacked, side)?;
        }
        mass.insert(format!("step_{step:02}"), json!(tr.mass));
    }
    write_json(&dir.join("mass.json"), &mass)
}

fn write_report(csv_path: &Path, report: &MetricReport) -> Result<()> {
    write_file(csv_path, report.to_csv().as_bytes())?;
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    write_file(&csv_path.with_extension("json"), text.as_bytes())
}

pub fn edit(a: &EditArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let video = read_video::<f32>(&a.video)?;
    let (frames, h, w, _) = video.dim();
    let source = if a.layout == "clusters" {
        LayoutSource::Clusters
    } else {
        let layout = read_layout(Path::new(&a.layout), Some((h, w)))?;
        if layout.frames() != frames {
            return Err(Error::config("--layout", format!("{} frames, video has {frames}", layout.frames())));
        }
        LayoutSource::Masks(layout)
    };
    let net = load_model(&a.model, &config)?;
    let flow = flow_or_default(a.flow.as_ref(), &a.video)?;
    let out = run_edit(&config, &net, &video, source, flow.as_deref())?;
    let target = region_prompt_embedding::<f32>(&config, true, net.dims.text_dim)?;

    let stage = StagedDir::new(&a.out)?;
    let dir = stage.path();
    write_file(&dir.join("config.json"), format!("{}\n", config.to_json()).as_bytes())?;
    write_video(&dir.join("edited"), &out.edited)?;
    write_layout(&dir.join("layout"), &out.layout)?;
    write_report(&dir.join("report.csv"), &out.report)?;
    write_traces(&dir.join("attention"), &out.traces, &out.target_tokens, &target.spans, (h, w))?;
    if let Some(blend) = &out.blend {
        for (f, m) in blend.frames.iter().enumerate() {
            write_mask(&dir.join(format!("blend/mask_f{f:03}.pgm")), m)?;
        }
    }
    if let Some(c) = &out.clusters {
        write_clusters(&dir.join("clusters"), c, &config, (h, w))?;
    }
    stage.commit()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let edited_dir = if a.edited.join("frames.json").exists() || a.edited.join("frame_000.png").exists() {
        a.edited.clone()
    } else {
        a.edited.join("edited")
    };
    let edited = read_video::<f32>(&edited_dir)?;
    let source = read_video::<f32>(&a.source)?;
    if source.dim() != edited.dim() {
        return Err(Error::config(
            "--edited",
            format!("shape {:?} differs from source {:?}", edited.dim(), source.dim()),
        ));
    }
    let (_, h, w, _) = edited.dim();
    let flow = flow_or_default(a.flow.as_ref(), &a.source)?;
    let layout = a.layout.as_ref().map(|p| read_layout(p, Some((h, w)))).transpose()?;
    let targets: BTreeMap<u32, String> = match &a.config {
        Some(p) => load_config(p)?
            .regions
            .into_iter()
            .map(|r| (r.id, r.target_prompt))
            .collect(),
        None => layout
            .iter()
            .flat_map(|l| l.regions().iter().map(|r| (r.id, r.prompt_tokens.join(" "))))
            .collect(),
    };
    let mass = if a.edited.join("attention/mass.json").exists() {
        mass_from_run(&a.edited.join("attention/mass.json"))?
    } else {
        BTreeMap::new()
    };
    let report = evaluate(&edited, layout.as_ref(), &targets, flow.as_deref(), mass)?;
    write_report(&a.report, &report)
}

/// Mean cross-attention region mass over blocks at the last recorded step.
fn mass_from_run(path: &Path) -> Result<BTreeMap<u32, f64>> {
    let all: BTreeMap<String, Vec<layout_attn::diffusion::BlockMass>> = read_json(path)?;
    let mut out = BTreeMap::new();
    if let Some(blocks) = all.values().last() {
        let n = blocks.len().max(1) as f64;
        for b in blocks {
            for (r, v) in &b.cross_in_region {
                *out.entry(*r).or_insert(0.0) += v / n;
            }
        }
    }
    Ok(out)
}

fn token_slug(token: &str) -> String {
    token.chars().filter(|c| c.is_ascii_alphanumeric()).collect()
}

pub fn attn_dump(a: &AttnDumpArgs) -> Result<()> {
    let stem = a.run.join("attention").join(attention_stem(a.step, a.layer));
    if !stem.with_extension("json").exists() {
        return Err(Error::AttentionNotRecorded {
            step: a.step,
            layer: a.layer,
        });
    }
    let (weights, side) = read_raw::<f32>(&stem)?;
    let weights: ndarray::Array3<f32> = weights.into_dimensionality().map_err(|_| Error::Format {
        path: stem.with_extension("json"),
        message: "expected (frame, token, text) weights".into(),
    })?;
    let meta = |key: &str| {
        side.meta.get(key).cloned().ok_or_else(|| Error::Format {
            path: stem.with_extension("json"),
            message: format!("missing {key}"),
        })
    };
    let bad = |e: serde_json::Error| Error::Json {
        path: stem.with_extension("json"),
        source: e,
    };
    let tokens: Vec<String> = serde_json::from_value(meta("tokens")?).map_err(bad)?;
    let (h, w): (usize, usize) = serde_json::from_value(meta("resolution")?).map_err(bad)?;
    let spans: BTreeMap<String, Vec<[usize; 2]>> = serde_json::from_value(meta("region_spans")?).map_err(bad)?;

    let stage = StagedDir::new(&a.out)?;
    let mut maps = Vec::new();
    for (f, frame) in weights.outer_iter().enumerate() {
        for (i, tok) in tokens.iter().enumerate() {
            let map = Array2::from_shape_fn((h, w), |(y, x)| frame[[y * w + x, i]]);
            let file = format!("f{f:03}_tok{i:02}_{}.pgm", token_slug(tok));
            write_pgm(&stage.path().join(&file), heatmap(map.view()).view())?;
            maps.push(json!({ "file": file, "frame": f, "kind": "token", "position": i, "token": tok }));
        }
        for (region, ranges) in &spans {
            let cols: Vec<usize> = ranges.iter().flat_map(|[s, e]| *s..*e).collect();
            let map = Array2::from_shape_fn((h, w), |(y, x)| {
                cols.iter().map(|c| frame[[y * w + x, *c]]).sum::<f32>() / cols.len().max(1) as f32
            });
            let file = format!("f{f:03}_region{region}.pgm");
            write_pgm(&stage.path().join(&file), heatmap(map.view()).view())?;
            maps.push(json!({ "file": file, "frame": f, "kind": "region", "region": region.parse::<u32>().unwrap_or(0) }));
        }
    }
    write_json(
        &stage.path().join("index.json"),
        &json!({ "step": a.step, "layer": a.layer, "height": h, "width": w, "maps": maps }),
    )?;
    stage.commit()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let dims = DenoiserDims::default();
    let dataset = DatasetConfig {
        samples: a.samples,
        size: a.size,
        seed: a.seed,
        ..Default::default()
    };
    let data = training_set::<f32>(&dataset, dims.text_dim)?;
    let s = match a.schedule {
        ScheduleKind::Linear => ScheduleConfig::default(),
        ScheduleKind::ScaledLinear => ScheduleConfig::scaled_linear(),
    };
    let params = make_schedule_with::<f32>(s.kind, s.train_steps, s.beta_start, s.beta_end, 50)?;
    let mut net = ToyDenoiser::<f32>::seeded(dims, a.seed, SEEDED_OUT_GAIN)?;
    let train = TrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        seed: a.seed,
        eval_draws: 64,
        batch: a.batch,
        final_lr_fraction: a.final_lr_fraction,
    };
    let report = layout_attn::diffusion::train_toy(&mut net, &data, &params, &train)?;
    eprintln!("eval loss {:.5} -> {:.5}", report.initial_eval, report.final_eval);
    let meta = BTreeMap::from([
        ("train".to_string(), json!(train)),
        ("schedule".to_string(), json!(s)),
        ("dataset".to_string(), json!(dataset)),
        ("initial_eval".to_string(), json!(report.initial_eval)),
        ("final_eval".to_string(), json!(report.final_eval)),
    ]);
    let stage = StagedDir::new(&a.out)?;
    save_weights(stage.path(), &net, meta)?;
    stage.commit()
}
