//! Latent blend: outside the foreground mask, denoising latents are replaced
//! by the inversion latents of the same step.

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Mask;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// One OR-of-all-frames mask applied to every frame.
    #[default]
    Aggregated,
    PerFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendMask {
    /// One mask per frame; all equal when aggregated.
    pub frames: Vec<Mask>,
    pub aggregated: bool,
}

impl BlendMask {
    pub fn resolution(&self) -> (usize, usize) {
        self.frames.first().map(|m| m.dim()).unwrap_or((0, 0))
    }

    pub fn area(&self, frame: usize) -> usize {
        self.frames[frame].iter().filter(|v| **v).count()
    }
}

pub fn aggregate_masks(per_frame: &[Mask], mode: BlendMode) -> Result<BlendMask> {
    let Some(first) = per_frame.first() else {
        return Err(Error::EmptyMask);
    };
    let dim = first.dim();
    if let Some(bad) = per_frame.iter().find(|m| m.dim() != dim) {
        return Err(Error::mismatch("blend mask resolution", dim, bad.dim()));
    }
    match mode {
        BlendMode::PerFrame => Ok(BlendMask {
            frames: per_frame.to_vec(),
            aggregated: false,
        }),
        BlendMode::Aggregated => {
            let mut union = Mask::from_elem(dim, false);
            for m in per_frame {
                Zip::from(&mut union).and(m).for_each(|u, v| *u |= *v);
            }
            Ok(BlendMask {
                frames: vec![union; per_frame.len()],
                aggregated: true,
            })
        }
    }
}

/// `(1 - M) * inversion + M * denoised`, done by selection so both sides are
/// copied exactly.
pub fn blend_step<T: Scalar>(denoised: &Array4<T>, inversion: &Array4<T>, mask: &BlendMask) -> Result<Array4<T>> {
    if denoised.dim() != inversion.dim() {
        return Err(Error::mismatch("blend latents", denoised.dim(), inversion.dim()));
    }
    let (n, h, w, _) = denoised.dim();
    if mask.frames.len() != n || mask.resolution() != (h, w) {
        return Err(Error::mismatch("blend mask", (n, h, w), (mask.frames.len(), mask.resolution())));
    }
    let mut out = inversion.clone();
    Zip::indexed(&mut out).and(denoised).for_each(|(f, y, x, _), o, d| {
        if mask.frames[f][[y, x]] {
            *o = *d;
        }
    });
    Ok(out)
}

/// Blend against the cached inversion latent at trajectory `position`.
pub fn blend_at<T: Scalar>(
    denoised: &Array4<T>,
    cached: &[Array4<T>],
    position: usize,
    mask: &BlendMask,
) -> Result<Array4<T>> {
    let inversion = cached.get(position).ok_or(Error::StepMisaligned(position))?;
    blend_step(denoised, inversion, mask)
}
