//! End-to-end edit: invert, build the layout, modulated denoise, blend,
//! evaluate.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::blend::{aggregate_masks, BlendMask, BlendMode};
use crate::clustering::{cluster_frames, collect_features, layout_from_clusters, match_clusters, ClusterLayout};
use crate::diffusion::{
    ddim_denoise, ddim_invert, embed_composite, make_schedule_with, AttentionControl, BetaSchedule, DenoiseMode,
    DenoiseOptions, DenoiserDims, ForwardTrace, PromptEmbedding, SchedulerParams, ToyDenoiser, TraceRequest,
    TrainSample, Trajectory, SEEDED_OUT_GAIN,
};
use crate::error::{Error, Result};
use crate::layout::{
    build_cross_condition, merge_foreground, region_labels, resolve_overlaps, tokenize, AreaTable, LayoutSet, Mask,
    RegionLevel, RegionSpec,
};
use crate::metrics::{edit_accuracy, frame_consistency, prompt_alignment, q_edit, warp_error, MetricReport, ProxyEmbedder};
use crate::modulation::{Branch, ExtremaScope, Schedule};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::synth::{color, synth_video, ShapeKind, ShapeSpec, SyntheticScene, COLORS};

/// Where a region's masks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// Mask files of the layout manifest.
    Files,
    /// A cluster id of the self-attention clustering.
    Cluster(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionEdit {
    pub id: u32,
    pub level: RegionLevel,
    #[serde(default)]
    pub priority: i32,
    pub source_prompt: String,
    pub target_prompt: String,
    #[serde(default = "files")]
    pub mask: MaskSource,
}

fn files() -> MaskSource {
    MaskSource::Files
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: BetaSchedule,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Square-root-spaced betas from 0.00085 to 0.012, the latent diffusion
    /// schedule.
    pub fn scaled_linear() -> Self {
        Self {
            kind: BetaSchedule::ScaledLinear,
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: BetaSchedule::Linear,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// `xi(t) = coefficient * t^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiConfig {
    pub coefficient: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendConfig {
    pub enabled: bool,
    #[serde(default)]
    pub mode: BlendMode,
    /// Blend after the first `steps` denoising steps only; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: BlendMode::Aggregated,
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k: usize,
    pub block: usize,
    /// Inversion position whose features are clustered.
    pub step: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// 3x3 majority smoothing of the cluster masks.
    pub cleanup: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 3,
            block: 0,
            step: 25,
            max_iters: 100,
            tol: 1e-6,
            cleanup: false,
        }
    }
}

/// Seeded weights used when no checkpoint is given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dims: DenoiserDims,
    pub out_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: DenoiserDims::default(),
            out_gain: SEEDED_OUT_GAIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    #[serde(default)]
    pub global_prompt: String,
    pub regions: Vec<RegionEdit>,
    #[serde(default = "d_sample_steps")]
    pub sample_steps: usize,
    #[serde(default = "d_modulate_steps")]
    pub modulate_steps: usize,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "d_xi_cross")]
    pub xi_cross: XiConfig,
    #[serde(default = "d_xi_self")]
    pub xi_self: XiConfig,
    #[serde(default = "yes")]
    pub modulate_cross: bool,
    #[serde(default = "yes")]
    pub modulate_self: bool,
    #[serde(default)]
    pub scope: ExtremaScope,
    #[serde(default)]
    pub blend: BlendConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub replay_mode: bool,
    #[serde(default)]
    pub clustering: ClusterConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Denoising steps whose attention is recorded; the last modulated step
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_steps: Option<Vec<usize>>,
}

fn d_sample_steps() -> usize {
    50
}
fn d_modulate_steps() -> usize {
    15
}
fn d_xi_cross() -> XiConfig {
    XiConfig {
        coefficient: 1.0,
        exponent: 5.0,
    }
}
fn d_xi_self() -> XiConfig {
    XiConfig {
        coefficient: 0.3,
        exponent: 5.0,
    }
}
fn yes() -> bool {
    true
}

impl EditConfig {
    /// Defaults with the given regions.
    pub fn new(global_prompt: &str, regions: Vec<RegionEdit>) -> Self {
        Self {
            global_prompt: global_prompt.into(),
            regions,
            sample_steps: d_sample_steps(),
            modulate_steps: d_modulate_steps(),
            schedule: ScheduleConfig::default(),
            xi_cross: d_xi_cross(),
            xi_self: d_xi_self(),
            modulate_cross: true,
            modulate_self: true,
            scope: ExtremaScope::Row,
            blend: BlendConfig::default(),
            seed: 0,
            replay_mode: true,
            clustering: ClusterConfig::default(),
            model: ModelConfig::default(),
            dump_steps: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(json_path(text, &e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::config("regions", "at least one region is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, r) in self.regions.iter().enumerate() {
            let at = |f: &str| format!("regions[{i}].{f}");
            if r.id == 0 {
                return Err(Error::config(at("id"), "0 is reserved for background"));
            }
            if !seen.insert(r.id) {
                return Err(Error::config(at("id"), format!("duplicate region id {}", r.id)));
            }
            if tokenize(&r.target_prompt).is_empty() {
                return Err(Error::config(at("target_prompt"), "empty prompt has no text span"));
            }
            if tokenize(&r.source_prompt).is_empty() {
                return Err(Error::config(at("source_prompt"), "empty prompt has no text span"));
            }
            if let MaskSource::Cluster(c) = r.mask {
                if c >= self.clustering.k {
                    return Err(Error::config(
                        at("mask.cluster"),
                        format!("cluster {c} not below k = {}", self.clustering.k),
                    ));
                }
            }
        }
        let s = &self.schedule;
        if s.train_steps < 2 {
            return Err(Error::config("schedule.train_steps", "must be at least 2"));
        }
        if !(0.0 < s.beta_start && s.beta_start < s.beta_end && s.beta_end < 1.0) {
            return Err(Error::config("schedule", "need 0 < beta_start < beta_end < 1"));
        }
        if self.sample_steps == 0 || self.sample_steps > s.train_steps {
            return Err(Error::config("sample_steps", format!("must be in 1..={}", s.train_steps)));
        }
        if self.modulate_steps > self.sample_steps {
            return Err(Error::config(
                "modulate_steps",
                format!("{} exceeds sample_steps {}", self.modulate_steps, self.sample_steps),
            ));
        }
        for (name, xi, branch) in [("xi_cross", self.xi_cross, Branch::Cross), ("xi_self", self.xi_self, Branch::SelfAttn)] {
            Schedule::new(branch, xi.coefficient, xi.exponent).map_err(|e| Error::config(name, e.to_string()))?;
        }
        if self.blend.steps.is_some_and(|n| n > self.sample_steps) {
            return Err(Error::config("blend.steps", "exceeds sample_steps"));
        }
        if let Some(bad) = self.dump_steps.iter().flatten().find(|j| **j >= self.sample_steps) {
            return Err(Error::config("dump_steps", format!("step {bad} not below sample_steps")));
        }
        let c = &self.clustering;
        if c.k == 0 {
            return Err(Error::config("clustering.k", "must be positive"));
        }
        if c.step == 0 || c.step > self.sample_steps {
            return Err(Error::config("clustering.step", format!("must be in 1..={}", self.sample_steps)));
        }
        if c.block >= self.model.dims.blocks {
            return Err(Error::config("clustering.block", "no such block"));
        }
        self.model.dims.validate()
    }

    pub fn schedule<T: Scalar>(&self) -> Result<SchedulerParams<T>> {
        let s = &self.schedule;
        make_schedule_with(s.kind, s.train_steps, s.beta_start, s.beta_end, self.sample_steps)
    }

    pub fn uses_clusters(&self) -> bool {
        self.regions.iter().any(|r| matches!(r.mask, MaskSource::Cluster(_)))
    }

    /// Denoising steps whose attention is recorded.
    pub fn trace_steps(&self) -> Vec<usize> {
        self.dump_steps
            .clone()
            .unwrap_or_else(|| vec![self.modulate_steps.saturating_sub(1)])
    }

    pub fn seeded_model<T: Scalar>(&self) -> Result<ToyDenoiser<T>> {
        ToyDenoiser::seeded(self.model.dims, self.seed, self.model.out_gain)
    }
}

/// Dotted field path of a serde error, best effort from its line and column.
fn json_path(text: &str, err: &serde_json::Error) -> String {
    let Ok(value) = serde_json::from_str::<serde_json::Value>(text) else {
        return "<document>".into();
    };
    let msg = err.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .map(str::to_string);
    let Some(field) = field else {
        return "<document>".into();
    };
    // Search the document for the object containing (or missing) the field.
    fn find(v: &serde_json::Value, field: &str, path: String, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(m) => {
                if m.contains_key(field) {
                    out.push(if path.is_empty() { field.to_string() } else { format!("{path}.{field}") });
                }
                for (k, c) in m {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    find(c, field, p, out);
                }
            }
            serde_json::Value::Array(a) => {
                for (i, c) in a.iter().enumerate() {
                    find(c, field, format!("{path}[{i}]"), out);
                }
            }
            _ => {}
        }
    }
    let mut hits = Vec::new();
    find(&value, &field, String::new(), &mut hits);
    hits.into_iter().next().unwrap_or(field)
}

pub enum LayoutSource {
    /// Masks loaded from a manifest, at video resolution.
    Masks(LayoutSet),
    /// Cluster the inversion's self-attention features.
    Clusters,
}

#[derive(Clone, Debug)]
pub struct EditOutput<T> {
    pub edited: Array4<T>,
    pub report: MetricReport,
    pub layout: LayoutSet,
    pub clusters: Option<ClusterLayout>,
    pub trajectory: Trajectory<T>,
    pub traces: BTreeMap<usize, ForwardTrace<T>>,
    pub target_tokens: Vec<String>,
    pub blend: Option<BlendMask>,
}

/// Global prompt followed by every region's source (or target) prompt.
pub fn region_prompt_embedding<T: Scalar>(config: &EditConfig, target: bool, dim: usize) -> Result<PromptEmbedding<T>> {
    let regions: Vec<(u32, Vec<String>)> = config
        .regions
        .iter()
        .map(|r| (r.id, tokenize(if target { &r.target_prompt } else { &r.source_prompt })))
        .collect();
    embed_composite(&tokenize(&config.global_prompt), &regions, dim)
}

/// First color word of a prompt, as a signed RGB descriptor.
pub fn prompt_color(prompt: &str) -> Option<Vec<f64>> {
    tokenize(prompt).iter().find_map(|t| color(t)).map(|c| c.to_vec())
}

fn majority_smooth(mask: &Mask) -> Mask {
    let (h, w) = mask.dim();
    Mask::from_shape_fn((h, w), |(y, x)| {
        let (mut on, mut all) = (0, 0);
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                all += 1;
                on += mask[[yy, xx]] as usize;
            }
        }
        2 * on > all
    })
}

fn build_layout<T: Scalar>(
    config: &EditConfig,
    source: LayoutSource,
    traj: &Trajectory<T>,
    frames: usize,
    res: (usize, usize),
) -> Result<(LayoutSet, Option<ClusterLayout>)> {
    let spec = |r: &RegionEdit| RegionSpec {
        id: r.id,
        prompt_tokens: tokenize(&r.target_prompt),
        level: r.level,
        priority: r.priority,
        preserve: tokenize(&r.source_prompt) == tokenize(&r.target_prompt),
    };
    let mut layout = LayoutSet::new(frames, res)?;
    layout.global_prompt_tokens = tokenize(&config.global_prompt);
    for r in &config.regions {
        layout.add_region(spec(r))?;
    }
    let files = match &source {
        LayoutSource::Masks(m) => {
            if m.frames() != frames || m.resolution() != res {
                return Err(Error::mismatch("layout", (frames, res), (m.frames(), m.resolution())));
            }
            Some(m)
        }
        LayoutSource::Clusters => None,
    };
    let clusters = if config.uses_clusters() {
        let c = &config.clustering;
        let stack = collect_features(traj, c.block, c.step)?;
        Some(match_clusters(&cluster_frames(&stack, c.k, config.seed, c.max_iters, c.tol)?))
    } else {
        None
    };
    for (i, r) in config.regions.iter().enumerate() {
        match r.mask {
            MaskSource::Files => {
                let m = files
                    .ok_or_else(|| Error::config(format!("regions[{i}].mask"), "mask files need a layout manifest"))?;
                if m.region(r.id).is_none() {
                    return Err(Error::UnknownRegion(r.id));
                }
                for f in 0..frames {
                    layout.set_mask(f, r.id, m.mask(f, r.id))?;
                }
            }
            MaskSource::Cluster(cid) => {
                let cl = clusters.as_ref().expect("clustered above");
                let bindings = BTreeMap::from([(cid, spec(r))]);
                let single = layout_from_clusters(cl, &bindings, res)?;
                for f in 0..frames {
                    let m = single.mask(f, r.id);
                    let m = if config.clustering.cleanup { majority_smooth(&m) } else { m };
                    layout.set_mask(f, r.id, m)?;
                }
            }
        }
    }
    if layout.regions().iter().all(|r| (0..frames).all(|f| !layout.mask(f, r.id).iter().any(|v| *v))) {
        return Err(Error::EmptyMask);
    }
    layout.validate()?;
    Ok((resolve_overlaps(&layout), clusters))
}

/// Per-frame region masks keyed by region id.
pub fn frame_masks(layout: &LayoutSet) -> Vec<BTreeMap<u32, Mask>> {
    (0..layout.frames())
        .map(|f| layout.regions().iter().map(|r| (r.id, layout.mask(f, r.id))).collect())
        .collect()
}

/// Signed pixels mapped to display range `[0, 1]`.
pub fn to_display<T: Scalar>(frames: &Array4<T>) -> Array4<T> {
    let half = T::of(0.5);
    frames.mapv(|v| (v + T::one()) * half)
}

pub const EMBEDDER_SEED: u64 = 0;

/// Report of an edited video. Region metrics need the layout and target
/// prompts; without a flow the frames are compared in place.
pub fn evaluate<T: Scalar>(
    edited: &Array4<T>,
    layout: Option<&LayoutSet>,
    targets: &BTreeMap<u32, String>,
    flow: Option<&[Array3<T>]>,
    attention_mass: BTreeMap<u32, f64>,
) -> Result<MetricReport> {
    let (n, h, w, c) = edited.dim();
    let display = to_display(edited);
    let still;
    let flow = match flow {
        Some(f) => f,
        None => {
            still = vec![Array3::zeros((h, w, 2)); n.saturating_sub(1)];
            &still
        }
    };
    let warp_err = warp_error(&display, flow)?;
    let patch = 4.min(h).min(w);
    let clip_f_proxy = frame_consistency(&display, &ProxyEmbedder::new(patch, c, 64, EMBEDDER_SEED))?;
    let mut report = MetricReport {
        warp_err,
        clip_f_proxy,
        attention_mass,
        ..Default::default()
    };
    if let Some(layout) = layout {
        let colors: BTreeMap<u32, Vec<f64>> = targets
            .iter()
            .filter(|(id, _)| layout.region(**id).is_some())
            .filter_map(|(id, p)| prompt_color(p).map(|c| (*id, c)))
            .collect();
        if !colors.is_empty() {
            let masks = frame_masks(layout);
            let align = prompt_alignment(edited, &masks, &colors)?;
            let candidates: Vec<Vec<f64>> = COLORS.iter().map(|(_, c)| c.to_vec()).collect();
            report.edit_accuracy = edit_accuracy(edited, &masks, &colors, &candidates)?;
            report.clip_t_proxy = align.overall;
            report.prompt_alignment = align.per_region;
        }
    }
    report.q_edit = q_edit(report.clip_t_proxy, report.warp_err);
    Ok(report)
}

/// Cross-attention mass of each region on its own prompt, averaged over
/// blocks, at the last recorded step.
pub fn final_mass<T>(traces: &BTreeMap<usize, ForwardTrace<T>>) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    if let Some(tr) = traces.values().last() {
        let blocks = tr.mass.len().max(1) as f64;
        for m in &tr.mass {
            for (r, v) in &m.cross_in_region {
                *out.entry(*r).or_insert(0.0) += v / blocks;
            }
        }
    }
    out
}

pub fn run_edit<T: Scalar>(
    config: &EditConfig,
    net: &ToyDenoiser<T>,
    video: &Array4<T>,
    layout: LayoutSource,
    flow: Option<&[Array3<T>]>,
) -> Result<EditOutput<T>> {
    config.validate()?;
    let (frames, h, w, c) = video.dim();
    if c != net.dims.channels {
        return Err(Error::mismatch("video channels", net.dims.channels, c));
    }
    let params = config.schedule::<T>()?;
    let dim = net.dims.text_dim;
    let source = region_prompt_embedding::<T>(config, false, dim)?;
    let target = region_prompt_embedding::<T>(config, true, dim)?;
    let record = if config.uses_clusters() { vec![config.clustering.step] } else { Vec::new() };
    let traj = ddim_invert(video, net, &source.matrix, &params, &record)?;
    let (layout, clusters) = build_layout(config, layout, &traj, frames, (h, w))?;

    let labels = region_labels(&layout);
    let control = AttentionControl {
        areas: AreaTable::from_labels(&labels),
        cross_map: build_cross_condition(&layout, &target.spans, target.len())?,
        labels,
        xi_cross: Schedule::new(Branch::Cross, config.xi_cross.coefficient, config.xi_cross.exponent)?,
        xi_self: Schedule::new(Branch::SelfAttn, config.xi_self.coefficient, config.xi_self.exponent)?,
        modulate_cross: config.modulate_cross,
        modulate_self: config.modulate_self,
        scope: config.scope,
    };
    let blend = if config.blend.enabled {
        let per_frame = (0..frames).map(|f| merge_foreground(&layout, f)).collect::<Result<Vec<_>>>()?;
        Some(aggregate_masks(&per_frame, config.blend.mode)?)
    } else {
        None
    };
    let opts = DenoiseOptions {
        mode: if config.replay_mode { DenoiseMode::Replay } else { DenoiseMode::Free },
        source_text: Some(&source.matrix),
        control: Some(&control),
        modulate_steps: config.modulate_steps,
        blend: blend.as_ref(),
        blend_steps: config.blend.steps.map(|n| 0..n),
        trace: TraceRequest {
            features: false,
            weights: true,
            mass: true,
        },
        trace_steps: config.trace_steps(),
    };
    let out = ddim_denoise(traj.noisiest(), net, &target.matrix, &params, &opts, Some(&traj))?;
    let targets = config.regions.iter().map(|r| (r.id, r.target_prompt.clone())).collect();
    let report = evaluate(&out.latent, Some(&layout), &targets, flow, final_mass(&out.traces))?;
    Ok(EditOutput {
        edited: out.latent,
        report,
        layout,
        clusters,
        trajectory: traj,
        traces: out.traces,
        target_tokens: target.tokens,
        blend,
    })
}

/// Layout of a synthetic video's ground-truth masks, one region per shape
/// (ids from 1), prompts "<color> <kind>".
pub fn scene_layout(scene: &SyntheticScene, masks: &[Vec<Mask>], global_prompt: &str) -> Result<LayoutSet> {
    let mut layout = LayoutSet::new(scene.frames, (scene.height, scene.width))?;
    layout.global_prompt_tokens = tokenize(global_prompt);
    for (i, s) in scene.shapes.iter().enumerate() {
        let id = i as u32 + 1;
        layout.add_region(RegionSpec::new(id, &format!("{} {}", s.color, s.kind.word()), RegionLevel::Instance, 0))?;
        for (f, m) in masks.iter().enumerate() {
            layout.set_mask(f, id, m[i].clone())?;
        }
    }
    Ok(layout)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub samples: usize,
    pub frames: usize,
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            frames: 1,
            size: 16,
            min_shapes: 1,
            max_shapes: 2,
            seed: 0,
        }
    }
}

/// Colors shapes are drawn in; the gray background is excluded.
pub const SHAPE_COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "cyan", "magenta"];

/// Random scenes of one or more shapes in distinct colors, with prompts
/// naming each shape's color and kind, embedded like an edit prompt.
pub fn training_set<T: Scalar>(config: &DatasetConfig, text_dim: usize) -> Result<Vec<TrainSample<T>>> {
    if config.size < 6 || config.frames == 0 {
        return Err(Error::config("dataset", "need size >= 6 and frames >= 1"));
    }
    if config.min_shapes == 0 || config.min_shapes > config.max_shapes || config.max_shapes > SHAPE_COLORS.len() {
        return Err(Error::config("dataset", "need 1 <= min_shapes <= max_shapes <= 6"));
    }
    let mut rng = SeedStream::new(config.seed).substream("dataset");
    let mut out = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let count = rng.random_range(config.min_shapes..=config.max_shapes);
        let mut colors = SHAPE_COLORS.to_vec();
        colors.shuffle(&mut rng);
        let shapes: Vec<ShapeSpec> = colors[..count]
            .iter()
            .map(|color| {
                let size = rng.random_range(3..=(config.size / 3).max(3));
                let hi = (config.size - 1 - size) as i64;
                ShapeSpec {
                    kind: if rng.random_bool(0.5) { ShapeKind::Square } else { ShapeKind::Circle },
                    color: color.to_string(),
                    size,
                    origin: (rng.random_range(1..=hi), rng.random_range(1..=hi)),
                    velocity: (rng.random_range(-1..=1), rng.random_range(-1..=1)),
                }
            })
            .collect();
        let scene = SyntheticScene {
            shapes,
            frames: config.frames,
            height: config.size,
            width: config.size,
            background: "gray".into(),
            noise: 0.0,
        };
        let video = synth_video::<T>(&scene, config.seed)?;
        let prompts: Vec<(u32, Vec<String>)> = scene
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (i as u32 + 1, vec![s.color.clone(), s.kind.word().to_string()]))
            .collect();
        let text = embed_composite::<T>(&[], &prompts, text_dim)?.matrix;
        out.push(TrainSample {
            latent: video.frames,
            text,
        });
    }
    Ok(out)
}

/// Instance edit of the two-squares scene: region `i + 1` goes from red to
/// `targets[i]`.
pub fn instance_edit_config(targets: [&str; 2]) -> EditConfig {
    let regions = targets
        .iter()
        .enumerate()
        .map(|(i, t)| RegionEdit {
            id: i as u32 + 1,
            level: RegionLevel::Instance,
            priority: 0,
            source_prompt: "red square".into(),
            target_prompt: format!("{t} square"),
            mask: MaskSource::Files,
        })
        .collect();
    EditConfig::new("", regions)
}
