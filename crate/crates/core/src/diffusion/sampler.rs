//! Deterministic DDIM inversion and denoising.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, Zip};
use serde::{Deserialize, Serialize};

use super::control::{AttentionControl, ForwardTrace, TraceRequest};
use super::denoiser::ToyDenoiser;
use super::schedule::SchedulerParams;
use crate::blend::{blend_at, BlendMask};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Latent<T> = Array4<T>;

/// `z_to = sqrt(a_to) * (z - sqrt(1 - a_from) * eps) / sqrt(a_from) + sqrt(1 - a_to) * eps`
/// between trajectory positions; serves both directions.
pub fn ddim_step<T: Scalar>(
    z: &Latent<T>,
    eps: &Latent<T>,
    from: usize,
    to: usize,
    params: &SchedulerParams<T>,
) -> Result<Latent<T>> {
    if from == to {
        return Err(Error::OutOfRange {
            what: "ddim step with from == to",
            value: from as f64,
        });
    }
    if z.dim() != eps.dim() {
        return Err(Error::mismatch("ddim latent vs eps", z.dim(), eps.dim()));
    }
    let a_from = params.alpha_bar_at(from)?;
    let a_to = params.alpha_bar_at(to)?;
    let (sf, sf1) = (a_from.sqrt(), (T::one() - a_from).sqrt());
    let (st, st1) = (a_to.sqrt(), (T::one() - a_to).sqrt());
    Ok(Zip::from(z).and(eps).map_collect(|z, e| st * ((*z - sf1 * *e) / sf) + st1 * *e))
}

fn check_finite<T: Scalar>(z: &Latent<T>, position: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { position })
    }
}

/// Cached inversion chain. `latents[k]` sits at position `k`; `eps[k]` is the
/// noise used to go from position `k` to `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    /// Training-step index of each position; position 0 is the clean latent
    /// and is stored as `None`.
    pub timesteps: Vec<Option<usize>>,
    pub latents: Vec<Latent<T>>,
    pub eps: Vec<Latent<T>>,
    /// Self-attention context vectors keyed by `(block, position)`, one
    /// matrix with the tokens of all frames.
    pub features: BTreeMap<(usize, usize), Array2<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.eps.len()
    }

    pub fn clean(&self) -> &Latent<T> {
        &self.latents[0]
    }

    pub fn noisiest(&self) -> &Latent<T> {
        self.latents.last().expect("trajectory holds at least the clean latent")
    }
}

/// Ascending chain `z_0 -> z_T`. Step `k -> k + 1` uses the noise predicted
/// for `z_k` at the timestep of position `k + 1`. Features are recorded for
/// every position in `record_features`.
pub fn ddim_invert<T: Scalar>(
    z0: &Latent<T>,
    net: &ToyDenoiser<T>,
    text: &Array2<T>,
    params: &SchedulerParams<T>,
    record_features: &[usize],
) -> Result<Trajectory<T>> {
    check_finite(z0, 0)?;
    let steps = params.sample_steps();
    let mut traj = Trajectory {
        timesteps: (0..=steps).map(|p| params.timestep_at(p)).collect(),
        latents: vec![z0.clone()],
        eps: Vec::with_capacity(steps),
        features: BTreeMap::new(),
    };
    for k in 0..steps {
        let t = params.normalized_at(k + 1);
        let z = &traj.latents[k];
        let eps = if record_features.contains(&(k + 1)) {
            let mut trace = ForwardTrace::new(TraceRequest {
                features: true,
                ..Default::default()
            });
            let eps = net.forward(z, t, text, None, Some(&mut trace))?;
            for (b, f) in trace.features.into_iter().enumerate() {
                traj.features.insert((b, k + 1), f);
            }
            eps
        } else {
            net.forward(z, t, text, None, None)?
        };
        check_finite(&eps, k + 1)?;
        let next = ddim_step(z, &eps, k, k + 1, params)?;
        check_finite(&next, k + 1)?;
        traj.eps.push(eps);
        traj.latents.push(next);
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseMode {
    /// Plain DDIM with the target prompt.
    Free,
    /// Anchored to the cached inversion: the edited latent is the cached one
    /// plus the difference the target pass makes over the source pass, so an
    /// unchanged prompt reproduces the source chain exactly.
    #[default]
    Replay,
}

pub struct DenoiseOptions<'a, T> {
    pub mode: DenoiseMode,
    /// Source prompt embedding; required by replay mode.
    pub source_text: Option<&'a Array2<T>>,
    pub control: Option<&'a AttentionControl>,
    /// Modulation is active on denoising steps `0..modulate_steps`, counted
    /// from the noisiest step.
    pub modulate_steps: usize,
    pub blend: Option<&'a BlendMask>,
    /// Denoising steps after which the blend is applied; all when `None`.
    pub blend_steps: Option<std::ops::Range<usize>>,
    pub trace: TraceRequest,
    /// Denoising steps to trace; the target pass is recorded.
    pub trace_steps: Vec<usize>,
}

impl<T> Default for DenoiseOptions<'_, T> {
    fn default() -> Self {
        Self {
            mode: DenoiseMode::Replay,
            source_text: None,
            control: None,
            modulate_steps: 0,
            blend: None,
            blend_steps: None,
            trace: TraceRequest::default(),
            trace_steps: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseOutput<T> {
    pub latent: Latent<T>,
    /// Forward traces of the target pass, keyed by denoising step.
    pub traces: BTreeMap<usize, ForwardTrace<T>>,
}

/// Descending chain from `z_t` at the last position down to position 0.
/// Denoising step `j` moves from position `S - j` to `S - j - 1`.
pub fn ddim_denoise<T: Scalar>(
    z_t: &Latent<T>,
    net: &ToyDenoiser<T>,
    text: &Array2<T>,
    params: &SchedulerParams<T>,
    opts: &DenoiseOptions<'_, T>,
    cached: Option<&Trajectory<T>>,
) -> Result<DenoiseOutput<T>> {
    let steps = params.sample_steps();
    if opts.modulate_steps > steps {
        return Err(Error::InvalidSchedule(format!(
            "modulate_steps {} exceeds sample_steps {steps}",
            opts.modulate_steps
        )));
    }
    let need_cache = opts.mode == DenoiseMode::Replay || opts.blend.is_some();
    let cached = match cached {
        Some(c) if c.steps() == steps => Some(c),
        Some(c) => return Err(Error::StepMisaligned(c.steps())),
        None if need_cache => return Err(Error::StepMisaligned(steps)),
        None => None,
    };
    let source_text = match opts.mode {
        DenoiseMode::Replay => Some(
            opts.source_text
                .ok_or_else(|| Error::config("source_text", "replay mode needs the source prompt"))?,
        ),
        DenoiseMode::Free => None,
    };
    let mut z = z_t.clone();
    check_finite(&z, steps)?;
    let mut traces = BTreeMap::new();
    for j in 0..steps {
        let from = steps - j;
        let to = from - 1;
        let t = params.normalized_at(from);
        let active = j < opts.modulate_steps;
        let traced = opts.trace.any() && opts.trace_steps.contains(&j);
        let step_ctl = match opts.control {
            Some(c) if active || traced => Some(c.step(t, active)?),
            _ => None,
        };
        let mut trace = traced.then(|| ForwardTrace::new(opts.trace));
        let eps = net.forward(&z, t, text, step_ctl.as_ref(), trace.as_mut())?;
        check_finite(&eps, from)?;
        let next = match (opts.mode, cached) {
            (DenoiseMode::Replay, Some(c)) => {
                let src = source_text.expect("checked above");
                let cached_z = &c.latents[from];
                let cached_eps = &c.eps[to];
                let eps_src = net.forward(cached_z, t, src, None, None)?;
                let eps_edit = Zip::from(cached_eps)
                    .and(&eps)
                    .and(&eps_src)
                    .map_collect(|c, e, s| *c + (*e - *s));
                let moved = ddim_step(&z, &eps_edit, from, to, params)?;
                let anchor = ddim_step(cached_z, cached_eps, from, to, params)?;
                Zip::from(&c.latents[to])
                    .and(&moved)
                    .and(&anchor)
                    .map_collect(|c, m, a| *c + (*m - *a))
            }
            _ => ddim_step(&z, &eps, from, to, params)?,
        };
        check_finite(&next, to)?;
        z = match (opts.blend, cached) {
            (Some(mask), Some(c)) if opts.blend_steps.as_ref().is_none_or(|r| r.contains(&j)) => {
                blend_at(&next, &c.latents, to, mask)?
            }
            _ => next,
        };
        if let Some(tr) = trace {
            traces.insert(j, tr);
        }
    }
    Ok(DenoiseOutput { latent: z, traces })
}

/// Relative L2 distance `|a - b| / |b|`.
pub fn relative_l2<T: Scalar>(a: &Latent<T>, b: &Latent<T>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(a).and(b).for_each(|x, y| {
        let d = x.as_f64() - y.as_f64();
        num += d * d;
        den += y.as_f64() * y.as_f64();
    });
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserDims;
    use crate::diffusion::schedule::make_schedule;
    use crate::rng::{normal, SeedStream};

    fn small_dims() -> DenoiserDims {
        DenoiserDims {
            channels: 3,
            d_model: 8,
            heads: 2,
            mlp_hidden: 8,
            text_dim: 4,
            blocks: 1,
        }
    }

    fn latent(seed: u64) -> Latent<f64> {
        let mut rng = SeedStream::new(seed).substream("latent");
        Array4::from_shape_simple_fn((2, 3, 3, 3), || normal::<f64>(&mut rng))
    }

    #[test]
    fn zero_eps_is_pure_rescaling() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 50).unwrap();
        let z = latent(1);
        let out = ddim_step(&z, &Array4::zeros(z.dim()), 3, 10, &p).unwrap();
        let r = (p.alpha_bar_at(10).unwrap() / p.alpha_bar_at(3).unwrap()).sqrt();
        for (o, v) in out.iter().zip(z.iter()) {
            assert!((o - r * v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn same_position_rejected() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 50).unwrap();
        let z = latent(1);
        assert!(ddim_step(&z, &z, 4, 4, &p).is_err());
    }

    #[test]
    fn step_round_trip_with_same_eps() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 50).unwrap();
        let z = latent(2);
        let eps = latent(3);
        let up = ddim_step(&z, &eps, 7, 8, &p).unwrap();
        let back = ddim_step(&up, &eps, 8, 7, &p).unwrap();
        assert!(relative_l2(&back, &z) < 1e-6);
    }

    #[test]
    fn zero_network_chain_is_closed_form() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 50).unwrap();
        let net = ToyDenoiser::<f64>::zeros(small_dims()).unwrap();
        let z0 = latent(4);
        let text = Array2::zeros((3, 4));
        let traj = ddim_invert(&z0, &net, &text, &p, &[]).unwrap();
        assert_eq!(traj.latents.len(), 51);
        let r = p.alpha_bar_at(50).unwrap().sqrt();
        for (o, v) in traj.noisiest().iter().zip(z0.iter()) {
            assert!((o - r * v).abs() <= 1e-6 * (r * v).abs().max(1e-12));
        }
    }

    #[test]
    fn replay_without_edit_is_bit_exact() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 10).unwrap();
        let net = ToyDenoiser::<f64>::seeded(small_dims(), 1, 1.0).unwrap();
        let z0 = latent(5);
        let mut rng = SeedStream::new(5).substream("text");
        let text = Array2::from_shape_simple_fn((3, 4), || normal::<f64>(&mut rng));
        let traj = ddim_invert(&z0, &net, &text, &p, &[]).unwrap();
        let opts = DenoiseOptions {
            source_text: Some(&text),
            ..Default::default()
        };
        let out = ddim_denoise(traj.noisiest(), &net, &text, &p, &opts, Some(&traj)).unwrap();
        assert_eq!(out.latent, z0);
    }

    #[test]
    fn replay_requires_cache() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 10).unwrap();
        let net = ToyDenoiser::<f64>::zeros(small_dims()).unwrap();
        let text = Array2::zeros((3, 4));
        let opts = DenoiseOptions {
            source_text: Some(&text),
            ..Default::default()
        };
        assert!(ddim_denoise(&latent(1), &net, &text, &p, &opts, None).is_err());
    }

    #[test]
    fn non_finite_latent_diverges() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 10).unwrap();
        let net = ToyDenoiser::<f64>::zeros(small_dims()).unwrap();
        let mut z = latent(1);
        z[[0, 0, 0, 0]] = f64::NAN;
        let err = ddim_invert(&z, &net, &Array2::zeros((3, 4)), &p, &[]).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
