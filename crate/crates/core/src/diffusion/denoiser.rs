//! Toy video denoiser: per-pixel tokens, spatial-temporal self-attention over
//! all frames, per-frame text cross-attention and a tokenwise MLP.
//!
//! There is no positional embedding, so the network is equivariant under any
//! permutation of pixel tokens; only attention modulation can tell two
//! identical shapes apart.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::control::{ForwardTrace, MassAccumulator, StepControl};
use crate::error::{Error, Result};
use crate::modulation::{modulate_in_place, row_mass, softmax_rows_in_place, RowOffset};
use crate::rng::{normal, SeedStream};
use crate::scalar::Scalar;

const MAX_FREQ: f64 = 30.0;

/// Output-projection gain of untrained seeded weights. Small enough that the
/// predicted noise barely depends on the input, so free DDIM inversion and
/// sampling invert each other closely.
pub const SEEDED_OUT_GAIN: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserDims {
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
    pub blocks: usize,
}

impl Default for DenoiserDims {
    fn default() -> Self {
        Self {
            channels: 3,
            d_model: 64,
            heads: 4,
            mlp_hidden: 128,
            text_dim: 32,
            blocks: 2,
        }
    }
}

impl DenoiserDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.channels, self.d_model, self.heads, self.mlp_hidden, self.text_dim, self.blocks];
        if all.contains(&0) {
            return Err(Error::config("dims", "all dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 || self.d_model % 2 != 0 {
            return Err(Error::config("dims.d_model", "must be even and divisible by heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub sa_q: Array2<T>,
    pub sa_k: Array2<T>,
    pub sa_v: Array2<T>,
    pub sa_o: Array2<T>,
    pub ca_q: Array2<T>,
    pub ca_k: Array2<T>,
    pub ca_v: Array2<T>,
    pub ca_o: Array2<T>,
    pub mlp_w1: Array2<T>,
    pub mlp_b1: Array1<T>,
    pub mlp_w2: Array2<T>,
    pub mlp_b2: Array1<T>,
}

/// Weights are stored input-major: a layer computes `x . W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser<T> {
    pub dims: DenoiserDims,
    pub seed: u64,
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub w_time: Array2<T>,
    pub b_time: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

/// Sinusoidal embedding of a normalized timestep.
pub fn time_embedding<T: Scalar>(t: T, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let span = (half.max(2) - 1) as f64;
    Array1::from_shape_fn(dim, |i| {
        let j = i % half;
        let a = T::of(MAX_FREQ.powf(j as f64 / span)) * t;
        if i < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

const NORM_EPS: f64 = 1e-6;

/// Row-wise `x / rms(x)`, without a learned gain. Returns the normalized rows
/// and each row's rms.
fn rms_norm<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(NORM_EPS);
    let r = x.map_axis(Axis(1), |row| (row.iter().map(|v| *v * *v).sum::<T>() / d + eps).sqrt());
    let mut y = x.clone();
    for (mut row, ri) in y.axis_iter_mut(Axis(0)).zip(r.iter()) {
        row.mapv_inplace(|v| v / *ri);
    }
    (y, r)
}

/// Gradient through [`rms_norm`]: `(dy - y * mean(dy * y)) / r` per row.
fn rms_norm_backward<T: Scalar>(y: &Array2<T>, r: &Array1<T>, dy: &Array2<T>) -> Array2<T> {
    let d = T::of(y.ncols() as f64);
    let mut dx = dy.clone();
    for ((mut row, yr), ri) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(r.iter()) {
        let m = row.iter().zip(yr.iter()).map(|(a, b)| *a * *b).sum::<T>() / d;
        row.zip_mut_with(&yr, |g, yv| *g = (*g - *yv * m) / *ri);
    }
    dx
}

fn silu<T: Scalar>(u: T) -> T {
    u / (T::one() + (-u).exp())
}

fn silu_grad<T: Scalar>(u: T) -> T {
    let sg = T::one() / (T::one() + (-u).exp());
    sg * (T::one() + u * (T::one() - sg))
}

pub(crate) struct BlockCache<T> {
    n0: Array2<T>,
    r0: Array1<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    self_p: Vec<Array2<T>>,
    ctx: Array2<T>,
    n1: Array2<T>,
    r1: Array1<T>,
    cq: Array2<T>,
    ck: Array2<T>,
    cv: Array2<T>,
    /// Indexed `[frame][head]`.
    cross_p: Vec<Vec<Array2<T>>>,
    cctx: Array2<T>,
    n2: Array2<T>,
    r2: Array1<T>,
    u: Array2<T>,
    g: Array2<T>,
}

pub(crate) struct ForwardCache<T> {
    x: Array2<T>,
    temb: Array1<T>,
    text: Array2<T>,
    frames: usize,
    blocks: Vec<BlockCache<T>>,
    n_last: Array2<T>,
    r_last: Array1<T>,
}

struct AttnResult<T> {
    ctx: Array2<T>,
    probs: Vec<Array2<T>>,
}

impl<T: Scalar> ToyDenoiser<T> {
    /// Seeded random weights, `N(0, 1/fan_in)`; biases zero. `out_gain`
    /// scales the output projection.
    pub fn seeded(dims: DenoiserDims, seed: u64, out_gain: f64) -> Result<Self> {
        dims.validate()?;
        let mut rng = SeedStream::new(seed).substream("weights");
        let mut mat = |rows: usize, cols: usize, gain: f64| {
            let std = gain / (rows as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || T::of(std) * normal::<T>(&mut rng))
        };
        let d = dims.d_model;
        // Token vectors are unit-norm rather than unit-RMS.
        let text_gain = (dims.text_dim as f64).sqrt();
        let w_in = mat(dims.channels, d, 1.0);
        let w_time = mat(d, d, 1.0);
        let blocks = (0..dims.blocks)
            .map(|_| Block {
                sa_q: mat(d, d, 1.0),
                sa_k: mat(d, d, 1.0),
                sa_v: mat(d, d, 1.0),
                sa_o: mat(d, d, 1.0),
                ca_q: mat(d, d, 1.0),
                ca_k: mat(dims.text_dim, d, text_gain),
                ca_v: mat(dims.text_dim, d, text_gain),
                ca_o: mat(d, d, 1.0),
                mlp_w1: mat(d, dims.mlp_hidden, 1.0),
                mlp_b1: Array1::zeros(dims.mlp_hidden),
                mlp_w2: mat(dims.mlp_hidden, d, 1.0),
                mlp_b2: Array1::zeros(d),
            })
            .collect();
        let w_out = mat(d, dims.channels, out_gain);
        Ok(Self {
            dims,
            seed,
            w_in,
            b_in: Array1::zeros(d),
            w_time,
            b_time: Array1::zeros(d),
            blocks,
            w_out,
            b_out: Array1::zeros(dims.channels),
        })
    }

    /// All-zero weights; predicts zero noise everywhere.
    pub fn zeros(dims: DenoiserDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let z2 = |r, c| Array2::zeros((r, c));
        Ok(Self {
            dims,
            seed: 0,
            w_in: z2(dims.channels, d),
            b_in: Array1::zeros(d),
            w_time: z2(d, d),
            b_time: Array1::zeros(d),
            blocks: (0..dims.blocks)
                .map(|_| Block {
                    sa_q: z2(d, d),
                    sa_k: z2(d, d),
                    sa_v: z2(d, d),
                    sa_o: z2(d, d),
                    ca_q: z2(d, d),
                    ca_k: z2(dims.text_dim, d),
                    ca_v: z2(dims.text_dim, d),
                    ca_o: z2(d, d),
                    mlp_w1: z2(d, dims.mlp_hidden),
                    mlp_b1: Array1::zeros(dims.mlp_hidden),
                    mlp_w2: z2(dims.mlp_hidden, d),
                    mlp_b2: Array1::zeros(d),
                })
                .collect(),
            w_out: z2(d, dims.channels),
            b_out: Array1::zeros(dims.channels),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dims).expect("dims already validated");
        z.seed = self.seed;
        z
    }

    /// Named tensors in a fixed order, with shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        fn flat2<T>(a: &Array2<T>) -> &[T] {
            a.as_slice().expect("weights are contiguous")
        }
        fn flat1<T>(a: &Array1<T>) -> &[T] {
            a.as_slice().expect("weights are contiguous")
        }
        out.push(("in.w".into(), self.w_in.shape().to_vec(), flat2(&self.w_in)));
        out.push(("in.b".into(), self.b_in.shape().to_vec(), flat1(&self.b_in)));
        out.push(("time.w".into(), self.w_time.shape().to_vec(), flat2(&self.w_time)));
        out.push(("time.b".into(), self.b_time.shape().to_vec(), flat1(&self.b_time)));
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, a) in [
                ("sa_q", &b.sa_q),
                ("sa_k", &b.sa_k),
                ("sa_v", &b.sa_v),
                ("sa_o", &b.sa_o),
                ("ca_q", &b.ca_q),
                ("ca_k", &b.ca_k),
                ("ca_v", &b.ca_v),
                ("ca_o", &b.ca_o),
                ("mlp_w1", &b.mlp_w1),
            ] {
                out.push((format!("block{i}.{n}"), a.shape().to_vec(), flat2(a)));
            }
            out.push((format!("block{i}.mlp_b1"), b.mlp_b1.shape().to_vec(), flat1(&b.mlp_b1)));
            out.push((format!("block{i}.mlp_w2"), b.mlp_w2.shape().to_vec(), flat2(&b.mlp_w2)));
            out.push((format!("block{i}.mlp_b2"), b.mlp_b2.shape().to_vec(), flat1(&b.mlp_b2)));
        }
        out.push(("out.w".into(), self.w_out.shape().to_vec(), flat2(&self.w_out)));
        out.push(("out.b".into(), self.b_out.shape().to_vec(), flat1(&self.b_out)));
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        fn m2<T>(a: &mut Array2<T>) -> &mut [T] {
            a.as_slice_mut().expect("weights are contiguous")
        }
        fn m1<T>(a: &mut Array1<T>) -> &mut [T] {
            a.as_slice_mut().expect("weights are contiguous")
        }
        let mut out = vec![m2(&mut self.w_in), m1(&mut self.b_in), m2(&mut self.w_time), m1(&mut self.b_time)];
        for b in &mut self.blocks {
            out.push(m2(&mut b.sa_q));
            out.push(m2(&mut b.sa_k));
            out.push(m2(&mut b.sa_v));
            out.push(m2(&mut b.sa_o));
            out.push(m2(&mut b.ca_q));
            out.push(m2(&mut b.ca_k));
            out.push(m2(&mut b.ca_v));
            out.push(m2(&mut b.ca_o));
            out.push(m2(&mut b.mlp_w1));
            out.push(m1(&mut b.mlp_b1));
            out.push(m2(&mut b.mlp_w2));
            out.push(m1(&mut b.mlp_b2));
        }
        out.push(m2(&mut self.w_out));
        out.push(m1(&mut self.b_out));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Converts every weight to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ToyDenoiser<U> {
        let mut out = ToyDenoiser::<U>::zeros(self.dims).expect("dims already validated");
        out.seed = self.seed;
        for ((_, _, src), dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::of(s.as_f64());
            }
        }
        out
    }

    /// Predicted noise for a latent of shape `(frames, h, w, channels)` at
    /// normalized time `t`.
    pub fn forward(
        &self,
        latent: &Array4<T>,
        t: T,
        text: &Array2<T>,
        control: Option<&StepControl<'_, T>>,
        trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Array4<T>> {
        let (frames, h, w, c) = latent.dim();
        if c != self.dims.channels {
            return Err(Error::mismatch("latent channels", self.dims.channels, c));
        }
        if text.ncols() != self.dims.text_dim {
            return Err(Error::mismatch("text embedding width", self.dims.text_dim, text.ncols()));
        }
        if frames == 0 || h * w == 0 {
            return Err(Error::mismatch("latent shape", "non-empty", latent.dim()));
        }
        if let Some(ctl) = control {
            let labels = &ctl.control.labels;
            if labels.frames() != frames || labels.tokens_per_frame() != h * w {
                return Err(Error::mismatch(
                    "layout tokens",
                    (frames, h * w),
                    (labels.frames(), labels.tokens_per_frame()),
                ));
            }
            if ctl.control.cross_map.seq_len() != text.nrows() {
                return Err(Error::mismatch("text length", ctl.control.cross_map.seq_len(), text.nrows()));
            }
        }
        let x = tokens_of(latent);
        let out = self.run(&x, frames, t, text, control, trace, None);
        Ok(out
            .into_shape_with_order((frames, h, w, c))
            .expect("token count preserved"))
    }

    /// Forward pass on flat tokens keeping everything the backward pass needs.
    pub(crate) fn forward_cached(
        &self,
        x: &Array2<T>,
        frames: usize,
        t: T,
        text: &Array2<T>,
    ) -> (Array2<T>, ForwardCache<T>) {
        let mut cache = ForwardCache {
            x: x.clone(),
            temb: Array1::zeros(0),
            text: text.clone(),
            frames,
            blocks: Vec::new(),
            n_last: Array2::zeros((0, 0)),
            r_last: Array1::zeros(0),
        };
        let out = self.run(x, frames, t, text, None, None, Some(&mut cache));
        (out, cache)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        x: &Array2<T>,
        frames: usize,
        t: T,
        text: &Array2<T>,
        control: Option<&StepControl<'_, T>>,
        mut trace: Option<&mut ForwardTrace<T>>,
        mut cache: Option<&mut ForwardCache<T>>,
    ) -> Array2<T> {
        let temb = time_embedding(t, self.dims.d_model);
        let tvec = temb.dot(&self.w_time) + &self.b_time;
        let mut h = x.dot(&self.w_in) + &self.b_in + &tvec;
        let keep = cache.is_some();
        let request = trace.as_ref().map(|t| t.request).unwrap_or_default();
        for blk in &self.blocks {
            let mut mass = (request.mass && control.is_some()).then(MassAccumulator::default);
            let h0 = h;
            let (n0, r0) = rms_norm(&h0);
            let q = n0.dot(&blk.sa_q);
            let k = n0.dot(&blk.sa_k);
            let v = n0.dot(&blk.sa_v);
            let (sa, self_mean) = self.self_attention(&q, &k, &v, frames, control, request.weights, mass.as_mut(), keep);
            let h1 = &h0 + &sa.ctx.dot(&blk.sa_o);
            let (n1, r1) = rms_norm(&h1);
            let cq = n1.dot(&blk.ca_q);
            let ck = text.dot(&blk.ca_k);
            let cv = text.dot(&blk.ca_v);
            let (ca, cross_mean, cross_p) =
                self.cross_attention(&cq, &ck, &cv, frames, control, request.weights, mass.as_mut(), keep);
            let h2 = &h1 + &ca.dot(&blk.ca_o);
            let (n2, r2) = rms_norm(&h2);
            let u = n2.dot(&blk.mlp_w1) + &blk.mlp_b1;
            let g = u.mapv(silu);
            let h3 = &h2 + &(g.dot(&blk.mlp_w2) + &blk.mlp_b2);
            if let Some(tr) = trace.as_deref_mut() {
                if request.features {
                    tr.features.push(sa.ctx.clone());
                }
                if let Some(m) = self_mean {
                    tr.self_weights.push(m);
                }
                if let Some(m) = cross_mean {
                    tr.cross_weights.push(m);
                }
                if let Some(m) = mass {
                    tr.mass.push(m.finish());
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.blocks.push(BlockCache {
                    n0,
                    r0,
                    q,
                    k,
                    v,
                    self_p: sa.probs,
                    ctx: sa.ctx,
                    n1,
                    r1,
                    cq,
                    ck,
                    cv,
                    cross_p,
                    cctx: ca,
                    n2,
                    r2,
                    u,
                    g,
                });
            }
            h = h3;
        }
        let (nf, rf) = rms_norm(&h);
        let out = nf.dot(&self.w_out) + &self.b_out;
        if let Some(c) = cache {
            c.temb = temb;
            c.n_last = nf;
            c.r_last = rf;
        }
        out
    }

    /// Spatial-temporal self-attention, one query frame at a time against the
    /// keys of every frame.
    #[allow(clippy::too_many_arguments)]
    fn self_attention(
        &self,
        q: &Array2<T>,
        k: &Array2<T>,
        v: &Array2<T>,
        frames: usize,
        control: Option<&StepControl<'_, T>>,
        want_mean: bool,
        mut mass: Option<&mut MassAccumulator>,
        keep: bool,
    ) -> (AttnResult<T>, Option<Array2<T>>) {
        let heads = self.dims.heads;
        let dh = self.dims.head_dim();
        let m = q.nrows();
        let tpf = m / frames;
        let sqrt_d = T::of(dh as f64).sqrt();
        let inv_heads = T::one() / T::of(heads as f64);
        let cond = control.and_then(|c| c.self_cond.as_ref());
        let scope = control.map(|c| c.control.scope).unwrap_or_default();
        let need_mean = want_mean || mass.is_some();
        let mut ctx = Array2::zeros((m, self.dims.d_model));
        let mut probs = if keep { vec![Array2::zeros((m, m)); heads] } else { Vec::new() };
        let mut mean = need_mean.then(|| Array2::zeros((m, m)));
        for f in 0..frames {
            let rows = f * tpf..(f + 1) * tpf;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![.., cols.clone()]);
                let mut sc = qh.dot(&kh.t());
                if let Some(c) = cond {
                    let shifted = RowOffset { inner: c, offset: f * tpf };
                    modulate_in_place(&mut sc, &shifted, scope);
                }
                sc.mapv_inplace(|s| s / sqrt_d);
                softmax_rows_in_place(&mut sc);
                ctx.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&sc.dot(&v.slice(s![.., cols])));
                if let Some(mw) = mean.as_mut() {
                    mw.slice_mut(s![rows.clone(), ..]).scaled_add(inv_heads, &sc);
                }
                if keep {
                    probs[h].slice_mut(s![rows.clone(), ..]).assign(&sc);
                }
            }
        }
        if let (Some(acc), Some(mw), Some(ctl)) = (mass.as_deref_mut(), mean.as_ref(), control) {
            let labels = &ctl.labels;
            for x in 0..m {
                let k = labels[x];
                let inside = row_mass(mw.view(), x, |y| labels[y] == k).as_f64();
                let outside = row_mass(mw.view(), x, |y| labels[y] != k).as_f64();
                acc.add_self(k, inside, outside);
            }
        }
        (AttnResult { ctx, probs }, if want_mean { mean } else { None })
    }

    /// Per-frame attention from pixel queries to text keys.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn cross_attention(
        &self,
        q: &Array2<T>,
        k: &Array2<T>,
        v: &Array2<T>,
        frames: usize,
        control: Option<&StepControl<'_, T>>,
        want_mean: bool,
        mut mass: Option<&mut MassAccumulator>,
        keep: bool,
    ) -> (Array2<T>, Option<Vec<Array2<T>>>, Vec<Vec<Array2<T>>>) {
        let heads = self.dims.heads;
        let dh = self.dims.head_dim();
        let m = q.nrows();
        let tpf = m / frames;
        let l = k.nrows();
        let sqrt_d = T::of(dh as f64).sqrt();
        let inv_heads = T::one() / T::of(heads as f64);
        let scope = control.map(|c| c.control.scope).unwrap_or_default();
        let need_mean = want_mean || mass.is_some();
        let mut ctx = Array2::zeros((m, self.dims.d_model));
        let mut kept = Vec::new();
        let mut means = Vec::new();
        for f in 0..frames {
            let rows = f * tpf..(f + 1) * tpf;
            let cond = control.and_then(|c| c.cross.as_ref()).map(|c| &c[f]);
            let mut mean = need_mean.then(|| Array2::<T>::zeros((tpf, l)));
            let mut frame_p = Vec::new();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let mut sc = qh.dot(&k.slice(s![.., cols.clone()]).t());
                if let Some(c) = cond {
                    modulate_in_place(&mut sc, c, scope);
                }
                sc.mapv_inplace(|s| s / sqrt_d);
                softmax_rows_in_place(&mut sc);
                ctx.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&sc.dot(&v.slice(s![.., cols])));
                if let Some(mw) = mean.as_mut() {
                    mw.scaled_add(inv_heads, &sc);
                }
                if keep {
                    frame_p.push(sc);
                }
            }
            if let (Some(acc), Some(mw), Some(ctl)) = (mass.as_deref_mut(), mean.as_ref(), control) {
                let map = &ctl.control.cross_map;
                for x in 0..tpf {
                    let k = ctl.labels[f * tpf + x];
                    if k == 0 || !map.column_regions().contains(&Some(k)) {
                        continue;
                    }
                    acc.add_cross(k, row_mass(mw.view(), x, |y| map.column_region(y) == Some(k)).as_f64());
                }
            }
            if want_mean {
                means.extend(mean);
            }
            kept.push(frame_p);
        }
        (ctx, want_mean.then_some(means), if keep { kept } else { Vec::new() })
    }

    /// Gradients of a loss w.r.t. every weight, given `d_out = dLoss/dOutput`
    /// for the cached forward pass. Modulation is not differentiated.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, d_out: &Array2<T>) -> Self {
        let mut g = self.zeros_like();
        g.w_out = cache.n_last.t().dot(d_out);
        g.b_out = d_out.sum_axis(Axis(0));
        let mut dh = rms_norm_backward(&cache.n_last, &cache.r_last, &d_out.dot(&self.w_out.t()));
        let frames = cache.frames;
        for (bi, (blk, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[bi];
            // MLP residual.
            gb.mlp_w2 = bc.g.t().dot(&dh);
            gb.mlp_b2 = dh.sum_axis(Axis(0));
            let dg = dh.dot(&blk.mlp_w2.t());
            let du = &dg * &bc.u.mapv(silu_grad);
            gb.mlp_w1 = bc.n2.t().dot(&du);
            gb.mlp_b1 = du.sum_axis(Axis(0));
            let dh2 = &dh + &rms_norm_backward(&bc.n2, &bc.r2, &du.dot(&blk.mlp_w1.t()));
            // Cross-attention residual.
            gb.ca_o = bc.cctx.t().dot(&dh2);
            let dcctx = dh2.dot(&blk.ca_o.t());
            let m = bc.cq.nrows();
            let tpf = m / frames;
            let mut dcq = Array2::zeros(bc.cq.raw_dim());
            let mut dck = Array2::zeros(bc.ck.raw_dim());
            let mut dcv = Array2::zeros(bc.cv.raw_dim());
            for f in 0..frames {
                let rows = f * tpf..(f + 1) * tpf;
                let (q_, k_, v_) = attention_backward(
                    bc.cq.slice(s![rows.clone(), ..]),
                    bc.ck.view(),
                    bc.cv.view(),
                    &bc.cross_p[f],
                    dcctx.slice(s![rows.clone(), ..]),
                    self.dims.heads,
                );
                dcq.slice_mut(s![rows, ..]).assign(&q_);
                dck += &k_;
                dcv += &v_;
            }
            gb.ca_q = bc.n1.t().dot(&dcq);
            gb.ca_k = cache.text.t().dot(&dck);
            gb.ca_v = cache.text.t().dot(&dcv);
            let dh1 = &dh2 + &rms_norm_backward(&bc.n1, &bc.r1, &dcq.dot(&blk.ca_q.t()));
            // Self-attention residual.
            gb.sa_o = bc.ctx.t().dot(&dh1);
            let dctx = dh1.dot(&blk.sa_o.t());
            let (dq, dk, dv) = attention_backward(
                bc.q.view(),
                bc.k.view(),
                bc.v.view(),
                &bc.self_p,
                dctx.view(),
                self.dims.heads,
            );
            gb.sa_q = bc.n0.t().dot(&dq);
            gb.sa_k = bc.n0.t().dot(&dk);
            gb.sa_v = bc.n0.t().dot(&dv);
            let dn0 = dq.dot(&blk.sa_q.t()) + &dk.dot(&blk.sa_k.t()) + &dv.dot(&blk.sa_v.t());
            dh = &dh1 + &rms_norm_backward(&bc.n0, &bc.r0, &dn0);
        }
        g.w_in = cache.x.t().dot(&dh);
        g.b_in = dh.sum_axis(Axis(0));
        let s = dh.sum_axis(Axis(0));
        g.w_time = outer(&cache.temb, &s);
        g.b_time = s;
        g
    }
}

fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Gradients of multi-head `softmax(QK^T / sqrt(dh)) V` w.r.t. Q, K, V.
fn attention_backward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    probs: &[Array2<T>],
    d_ctx: ArrayView2<T>,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dh = q.ncols() / heads;
    let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        let dc = d_ctx.slice(s![.., cols.clone()]);
        let dp = dc.dot(&v.slice(s![.., cols.clone()]).t());
        dv.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&dc));
        let mut ds = &dp * p;
        let rowdot = ds.sum_axis(Axis(1));
        for ((mut r, pr), rd) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(rowdot.iter()) {
            r.zip_mut_with(&pr, |d, pv| *d -= *pv * *rd);
        }
        ds.mapv_inplace(|x| x * inv_sqrt);
        dq.slice_mut(s![.., cols.clone()])
            .assign(&ds.dot(&k.slice(s![.., cols.clone()])));
        dk.slice_mut(s![.., cols.clone()]).assign(&ds.t().dot(&q.slice(s![.., cols])));
    }
    (dq, dk, dv)
}

/// `(frames, h, w, c)` latent as `(frames * h * w, c)` tokens.
pub fn tokens_of<T: Scalar>(latent: &Array4<T>) -> Array2<T> {
    let (n, h, w, c) = latent.dim();
    latent
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .expect("contiguous latent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserDims {
        DenoiserDims {
            channels: 3,
            d_model: 8,
            heads: 2,
            mlp_hidden: 6,
            text_dim: 4,
            blocks: 2,
        }
    }

    fn inputs(frames: usize, side: usize, seed: u64) -> (Array4<f64>, Array2<f64>) {
        let mut rng = SeedStream::new(seed).substream("test");
        let lat = Array4::from_shape_simple_fn((frames, side, side, 3), || normal::<f64>(&mut rng));
        let text = Array2::from_shape_simple_fn((3, 4), || normal::<f64>(&mut rng));
        (lat, text)
    }

    #[test]
    fn shape_preserved_and_deterministic() {
        let net = ToyDenoiser::<f64>::seeded(tiny(), 3, 1.0).unwrap();
        let (lat, text) = inputs(2, 3, 1);
        let a = net.forward(&lat, 0.4, &text, None, None).unwrap();
        let b = net.forward(&lat, 0.4, &text, None, None).unwrap();
        assert_eq!(a.dim(), lat.dim());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_predict_zero() {
        let net = ToyDenoiser::<f64>::zeros(tiny()).unwrap();
        let (lat, text) = inputs(2, 3, 1);
        let eps = net.forward(&lat, 0.9, &text, None, None).unwrap();
        assert!(eps.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cached_forward_matches_forward() {
        let net = ToyDenoiser::<f64>::seeded(tiny(), 5, 1.0).unwrap();
        let (lat, text) = inputs(2, 2, 2);
        let a = net.forward(&lat, 0.3, &text, None, None).unwrap();
        let (b, _) = net.forward_cached(&tokens_of(&lat), 2, 0.3, &text);
        assert_eq!(tokens_of(&a), b);
    }

    #[test]
    fn cast_round_trip() {
        let net = ToyDenoiser::<f64>::seeded(tiny(), 5, 1.0).unwrap();
        let back: ToyDenoiser<f64> = net.cast::<f32>().cast();
        for ((_, _, a), (_, _, b)) in net.tensors().iter().zip(back.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let net = ToyDenoiser::<f64>::seeded(tiny(), 9, 1.0).unwrap();
        let (lat, text) = inputs(1, 2, 4);
        let mut swapped = lat.clone();
        for c in 0..3 {
            swapped[[0, 0, 0, c]] = lat[[0, 1, 1, c]];
            swapped[[0, 1, 1, c]] = lat[[0, 0, 0, c]];
        }
        let a = net.forward(&lat, 0.5, &text, None, None).unwrap();
        let b = net.forward(&swapped, 0.5, &text, None, None).unwrap();
        for c in 0..3 {
            assert!((a[[0, 0, 0, c]] - b[[0, 1, 1, c]]).abs() < 1e-12);
            assert!((a[[0, 0, 1, c]] - b[[0, 0, 1, c]]).abs() < 1e-12);
        }
    }
}
