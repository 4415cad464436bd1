//! Noise-prediction training of the toy denoiser with plain gradient descent.

use ndarray::{Array2, Array4, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::denoiser::{tokens_of, ToyDenoiser};
use super::schedule::SchedulerParams;
use crate::error::{Error, Result};
use crate::rng::{normal, SeedStream};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub latent: Array4<T>,
    pub text: Array2<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fixed (sample, timestep, noise) draws scored before and after.
    pub eval_draws: usize,
    /// Draws whose gradients are averaged per step.
    pub batch: usize,
    /// Learning rate at the last step as a fraction of the first; linear in
    /// between.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            seed: 0,
            eval_draws: 32,
            batch: 1,
            final_lr_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

struct Draw<T> {
    sample: usize,
    step: usize,
    noise: Array4<T>,
}

fn draw<T: Scalar>(rng: &mut crate::rng::Rng, data: &[TrainSample<T>], train_steps: usize) -> Draw<T> {
    let sample = rng.random_range(0..data.len());
    let step = rng.random_range(0..train_steps);
    let noise = Array4::from_shape_simple_fn(data[sample].latent.raw_dim(), || normal::<T>(rng));
    Draw { sample, step, noise }
}

/// Noised latent, normalized time and the target noise of one draw.
fn noised<T: Scalar>(d: &Draw<T>, data: &[TrainSample<T>], params: &SchedulerParams<T>) -> (Array4<T>, T) {
    let a = params.alphas_cumprod()[d.step];
    let (sa, sb) = (a.sqrt(), (T::one() - a).sqrt());
    let z = Zip::from(&data[d.sample].latent)
        .and(&d.noise)
        .map_collect(|x, e| sa * *x + sb * *e);
    (z, params.normalized(d.step))
}

/// Mean squared error of the prediction and its gradient.
pub fn mse_loss<T: Scalar>(pred: &Array2<T>, target: &Array2<T>) -> (T, Array2<T>) {
    let n = T::of(pred.len() as f64);
    let diff = pred - target;
    let loss = diff.iter().map(|d| *d * *d).sum::<T>() / n;
    let two = T::of(2.0);
    (loss, diff.mapv(|d| two * d / n))
}

/// Loss and weight gradients for one noised sample.
pub fn loss_and_grad<T: Scalar>(
    net: &ToyDenoiser<T>,
    latent: &Array4<T>,
    t: T,
    text: &Array2<T>,
    target: &Array4<T>,
) -> (T, ToyDenoiser<T>) {
    let frames = latent.dim().0;
    let (pred, cache) = net.forward_cached(&tokens_of(latent), frames, t, text);
    let (loss, d_out) = mse_loss(&pred, &tokens_of(target));
    (loss, net.backward(&cache, &d_out))
}

fn eval<T: Scalar>(
    net: &ToyDenoiser<T>,
    draws: &[Draw<T>],
    data: &[TrainSample<T>],
    params: &SchedulerParams<T>,
) -> f64 {
    let total: f64 = draws
        .iter()
        .map(|d| {
            let (z, t) = noised(d, data, params);
            let frames = z.dim().0;
            let (pred, _) = net.forward_cached(&tokens_of(&z), frames, t, &data[d.sample].text);
            mse_loss(&pred, &tokens_of(&d.noise)).0.as_f64()
        })
        .sum();
    total / draws.len().max(1) as f64
}

pub fn train_toy<T: Scalar>(
    net: &mut ToyDenoiser<T>,
    data: &[TrainSample<T>],
    params: &SchedulerParams<T>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::config("dataset", "training needs at least one sample"));
    }
    let streams = SeedStream::new(config.seed);
    let mut eval_rng = streams.substream("train-eval");
    let eval_draws: Vec<_> = (0..config.eval_draws)
        .map(|_| draw(&mut eval_rng, data, params.train_steps()))
        .collect();
    let initial_eval = eval(net, &eval_draws, data, params);
    if config.batch == 0 {
        return Err(Error::config("train.batch", "must be positive"));
    }
    let mut rng = streams.substream("train");
    let mut losses = Vec::with_capacity(config.steps);
    let span = config.steps.saturating_sub(1).max(1) as f64;
    for step in 0..config.steps {
        let frac = 1.0 + (config.final_lr_fraction - 1.0) * step as f64 / span;
        let lr = T::of(config.learning_rate * frac / config.batch as f64);
        let mut total = T::zero();
        let mut sum: Option<ToyDenoiser<T>> = None;
        for _ in 0..config.batch {
            let d = draw(&mut rng, data, params.train_steps());
            let (z, t) = noised(&d, data, params);
            let (loss, grads) = loss_and_grad(net, &z, t, &data[d.sample].text, &d.noise);
            total += loss;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.tensors_mut().into_iter().zip(grads.tensors()) {
                        a.iter_mut().zip(g.2).for_each(|(a, g)| *a += *g);
                    }
                }
            }
        }
        let loss = total / T::of(config.batch as f64);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        losses.push(loss.as_f64());
        let grads = sum.expect("batch is positive");
        for (w, g) in net.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, g) in w.iter_mut().zip(g.2) {
                *w -= lr * *g;
            }
        }
    }
    let final_eval = eval(net, &eval_draws, data, params);
    if !final_eval.is_finite() {
        return Err(Error::TrainingDiverged { step: config.steps });
    }
    Ok(TrainReport {
        losses,
        initial_eval,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserDims;
    use crate::diffusion::schedule::make_schedule;

    fn mini() -> DenoiserDims {
        DenoiserDims {
            channels: 2,
            d_model: 8,
            heads: 2,
            mlp_hidden: 6,
            text_dim: 3,
            blocks: 2,
        }
    }

    fn sample(seed: u64) -> TrainSample<f64> {
        let mut rng = SeedStream::new(seed).substream("sample");
        TrainSample {
            latent: Array4::from_shape_simple_fn((2, 1, 1, 2), || normal::<f64>(&mut rng)),
            text: Array2::from_shape_simple_fn((3, 3), || normal::<f64>(&mut rng)),
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let net = ToyDenoiser::<f64>::seeded(mini(), 11, 1.0).unwrap();
        let s = sample(1);
        let target = sample(2).latent;
        let t = 0.37;
        let (_, grads) = loss_and_grad(&net, &s.latent, t, &s.text, &target);
        let h = 1e-6;
        let mut checked = 0;
        let names: Vec<String> = net.tensors().into_iter().map(|(n, _, _)| n).collect();
        let grad_tensors = grads.tensors();
        for (ti, name) in names.iter().enumerate() {
            let len = grad_tensors[ti].2.len();
            for i in 0..len {
                let mut plus = net.clone();
                plus.tensors_mut()[ti][i] += h;
                let mut minus = net.clone();
                minus.tensors_mut()[ti][i] -= h;
                let lp = loss_and_grad(&plus, &s.latent, t, &s.text, &target).0;
                let lm = loss_and_grad(&minus, &s.latent, t, &s.text, &target).0;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grad_tensors[ti].2[i];
                let scale = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / scale < 1e-3,
                    "{name}[{i}]: analytic {analytic} numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, net.param_count());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 50).unwrap();
        let mut net = ToyDenoiser::<f64>::seeded(mini(), 3, 1.0).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            steps: 3,
            learning_rate: 0.0,
            seed: 1,
            eval_draws: 2,
            ..Default::default()
        };
        train_toy(&mut net, &[sample(1)], &p, &cfg).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn one_step_moves_weights() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 50).unwrap();
        let mut net = ToyDenoiser::<f64>::seeded(mini(), 3, 1.0).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.01,
            seed: 1,
            eval_draws: 1,
            ..Default::default()
        };
        let report = train_toy(&mut net, &[sample(1)], &p, &cfg).unwrap();
        assert_eq!(report.losses.len(), 1);
        assert_ne!(net, before);
    }

    #[test]
    fn empty_dataset_rejected() {
        let p = make_schedule::<f64>(1000, 1e-4, 0.02, 50).unwrap();
        let mut net = ToyDenoiser::<f64>::seeded(mini(), 3, 1.0).unwrap();
        assert!(train_toy(&mut net, &[], &p, &TrainConfig::default()).is_err());
    }
}
