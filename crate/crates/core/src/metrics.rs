//! Desk-scale editing metrics: flow warp error, a linear frame embedder for
//! temporal consistency, color-descriptor prompt alignment, edit accuracy and
//! attention mass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Mask;
use crate::rng::{normal, SeedStream};
use crate::scalar::Scalar;

pub const Q_EDIT_FLOOR: f64 = 1e-4;

/// Bilinear sample of channel `c` at `(x, y)`; `None` outside the pixel grid.
fn bilinear<T: Scalar>(frame: ArrayView3<T>, x: f64, y: f64, c: usize) -> Option<f64> {
    let (h, w, _) = frame.dim();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |yy: usize, xx: usize| frame[[yy, xx, c]].as_f64();
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Mean absolute difference between each frame and its successor warped back
/// along `flow`, over in-bounds samples, averaged over pairs, times 100.
pub fn warp_error<T: Scalar>(frames: &Array4<T>, flow: &[Array3<T>]) -> Result<f64> {
    let (n, h, w, ch) = frames.dim();
    if n < 2 {
        return Err(Error::OutOfRange {
            what: "frames for warp error",
            value: n as f64,
        });
    }
    if flow.len() < n - 1 {
        return Err(Error::mismatch("flow fields", n - 1, flow.len()));
    }
    let mut total = 0.0;
    for i in 0..n - 1 {
        if flow[i].dim() != (h, w, 2) {
            return Err(Error::mismatch("flow shape", (h, w, 2), flow[i].dim()));
        }
        let cur = frames.index_axis(Axis(0), i);
        let next = frames.index_axis(Axis(0), i + 1);
        let (mut sum, mut count) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + flow[i][[y, x, 0]].as_f64();
                let sy = y as f64 + flow[i][[y, x, 1]].as_f64();
                for c in 0..ch {
                    if let Some(v) = bilinear(next, sx, sy, c) {
                        sum += (v - cur[[y, x, c]].as_f64()).abs();
                        count += 1;
                    }
                }
            }
        }
        total += if count > 0 { sum / count as f64 } else { 0.0 };
    }
    Ok(100.0 * total / (n - 1) as f64)
}

/// Linear patch embedder: every non-overlapping `patch x patch` tile is
/// projected by a fixed seeded matrix and the results are mean-pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyEmbedder {
    pub patch: usize,
    pub channels: usize,
    pub projection: Array2<f64>,
}

impl ProxyEmbedder {
    pub fn new(patch: usize, channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).substream("embedder");
        let fan = patch * patch * channels;
        let projection = Array2::from_shape_simple_fn((fan, dim), || normal::<f64>(&mut rng) / (fan as f64).sqrt());
        Self {
            patch,
            channels,
            projection,
        }
    }

    pub fn embed<T: Scalar>(&self, frame: ArrayView3<T>) -> Result<ndarray::Array1<f64>> {
        let (h, w, c) = frame.dim();
        let p = self.patch;
        if c != self.channels || h < p || w < p {
            return Err(Error::mismatch("embedder input", (p, p, self.channels), (h, w, c)));
        }
        let mut acc = ndarray::Array1::zeros(self.projection.ncols());
        let mut tiles = 0;
        for ty in 0..h / p {
            for tx in 0..w / p {
                let tile = frame.slice(ndarray::s![ty * p..(ty + 1) * p, tx * p..(tx + 1) * p, ..]);
                let v: Vec<f64> = tile.iter().map(|v| v.as_f64()).collect();
                acc += &ndarray::Array1::from(v).dot(&self.projection);
                tiles += 1;
            }
        }
        Ok(acc / tiles as f64)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity of consecutive frame embeddings, times 100.
pub fn frame_consistency<T: Scalar>(frames: &Array4<T>, embedder: &ProxyEmbedder) -> Result<f64> {
    let n = frames.dim().0;
    if n < 2 {
        return Err(Error::OutOfRange {
            what: "frames for consistency",
            value: n as f64,
        });
    }
    let emb = frames
        .outer_iter()
        .map(|f| embedder.embed(f))
        .collect::<Result<Vec<_>>>()?;
    let sum: f64 = emb
        .windows(2)
        .map(|w| cosine(w[0].as_slice().expect("owned"), w[1].as_slice().expect("owned")))
        .sum();
    Ok(100.0 * sum / (n - 1) as f64)
}

/// Mean pixel of `mask` in one frame, `None` if the mask is empty.
fn region_mean<T: Scalar>(frame: ArrayView3<T>, mask: &Mask) -> Option<Vec<f64>> {
    let c = frame.dim().2;
    let mut acc = vec![0.0; c];
    let mut n = 0usize;
    for ((y, x), on) in mask.indexed_iter() {
        if *on {
            for (k, a) in acc.iter_mut().enumerate() {
                *a += frame[[y, x, k]].as_f64();
            }
            n += 1;
        }
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

/// Per-region and overall prompt alignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub overall: f64,
    pub per_region: BTreeMap<u32, f64>,
}

/// Cosine between each region's mean pixel and its target descriptor, times
/// 100, averaged over the frames where the region is present and then over
/// regions. `masks[frame][region]`.
pub fn prompt_alignment<T: Scalar>(
    frames: &Array4<T>,
    masks: &[BTreeMap<u32, Mask>],
    targets: &BTreeMap<u32, Vec<f64>>,
) -> Result<Alignment> {
    let mut per_region = BTreeMap::new();
    for (region, target) in targets {
        let scores: Vec<f64> = frames
            .outer_iter()
            .zip(masks)
            .filter_map(|(f, m)| m.get(region).and_then(|mask| region_mean(f, mask)))
            .map(|mean| 100.0 * cosine(&mean, target))
            .collect();
        if scores.is_empty() {
            return Err(Error::EmptyRegion { region: *region });
        }
        per_region.insert(*region, scores.iter().sum::<f64>() / scores.len() as f64);
    }
    let overall = if per_region.is_empty() {
        0.0
    } else {
        per_region.values().sum::<f64>() / per_region.len() as f64
    };
    Ok(Alignment { overall, per_region })
}

/// Fraction of each region's pixels, over all frames, whose color is strictly
/// closer to the region's target than to every other candidate color.
pub fn edit_accuracy<T: Scalar>(
    frames: &Array4<T>,
    masks: &[BTreeMap<u32, Mask>],
    targets: &BTreeMap<u32, Vec<f64>>,
    candidates: &[Vec<f64>],
) -> Result<BTreeMap<u32, f64>> {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut out = BTreeMap::new();
    for (region, target) in targets {
        let (mut hit, mut total) = (0usize, 0usize);
        for (frame, m) in frames.outer_iter().zip(masks) {
            let Some(mask) = m.get(region) else { continue };
            for ((y, x), on) in mask.indexed_iter() {
                if !*on {
                    continue;
                }
                let px: Vec<f64> = frame.slice(ndarray::s![y, x, ..]).iter().map(|v| v.as_f64()).collect();
                let own = d2(&px, target);
                if candidates.iter().filter(|c| *c != target).all(|c| own < d2(&px, c)) {
                    hit += 1;
                }
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyRegion { region: *region });
        }
        out.insert(*region, hit as f64 / total as f64);
    }
    Ok(out)
}

/// Mean over rows of the weight each row puts on its positive set.
pub fn attention_mass<T: Scalar>(weights: ArrayView2<T>, positive: impl Fn(usize, usize) -> bool) -> f64 {
    let rows = weights.nrows();
    if rows == 0 {
        return 0.0;
    }
    let sum: f64 = weights
        .outer_iter()
        .enumerate()
        .map(|(x, row)| {
            row.iter()
                .enumerate()
                .filter(|(y, _)| positive(x, *y))
                .map(|(_, w)| w.as_f64())
                .sum::<f64>()
        })
        .sum();
    sum / rows as f64
}

pub fn q_edit(alignment: f64, warp: f64) -> f64 {
    alignment / warp.max(Q_EDIT_FLOOR)
}

/// One published automatic-metric row: (method, CLIP-T, Warp-Err, Q-edit).
pub const PUBLISHED_ROWS: [(&str, f64, f64, f64); 6] = [
    ("FateZero", 33.78, 3.08, 10.96),
    ("ControlVideo", 34.41, 4.73, 7.27),
    ("TokenFlow", 34.59, 2.82, 12.28),
    ("Ground-A-Video", 35.09, 4.43, 7.92),
    ("DMT", 34.09, 2.05, 16.63),
    ("ours", 36.56, 1.42, 25.75),
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_t_proxy: f64,
    pub clip_f_proxy: f64,
    pub warp_err: f64,
    pub q_edit: f64,
    pub prompt_alignment: BTreeMap<u32, f64>,
    pub edit_accuracy: BTreeMap<u32, f64>,
    pub attention_mass: BTreeMap<u32, f64>,
}

impl MetricReport {
    /// `(metric, value, scope)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64, String)> {
        let mut rows = vec![
            ("clip_t_proxy".to_string(), self.clip_t_proxy, "video".to_string()),
            ("clip_f_proxy".into(), self.clip_f_proxy, "video".into()),
            ("warp_err".into(), self.warp_err, "video".into()),
            ("q_edit".into(), self.q_edit, "video".into()),
        ];
        for (name, map) in [
            ("prompt_alignment", &self.prompt_alignment),
            ("edit_accuracy", &self.edit_accuracy),
            ("attention_mass", &self.attention_mass),
        ] {
            rows.extend(map.iter().map(|(r, v)| (name.to_string(), *v, format!("region_{r}"))));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,scope\n");
        for (m, v, scope) in self.rows() {
            let _ = writeln!(s, "{m},{v},{scope}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format {
            path: "<csv>".into(),
            message: m,
        };
        let mut lines = text.lines();
        if lines.next() != Some("metric,value,scope") {
            return Err(bad("missing header".into()));
        }
        let mut r = MetricReport::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            let [metric, value, scope] = parts[..] else {
                return Err(bad(format!("bad row {line:?}")));
            };
            let v: f64 = value.parse().map_err(|_| bad(format!("bad value {value:?}")))?;
            let region = || -> Result<u32> {
                scope
                    .strip_prefix("region_")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("bad scope {scope:?}")))
            };
            match metric {
                "clip_t_proxy" => r.clip_t_proxy = v,
                "clip_f_proxy" => r.clip_f_proxy = v,
                "warp_err" => r.warp_err = v,
                "q_edit" => r.q_edit = v,
                "prompt_alignment" => {
                    r.prompt_alignment.insert(region()?, v);
                }
                "edit_accuracy" => {
                    r.edit_accuracy.insert(region()?, v);
                }
                "attention_mass" => {
                    r.attention_mass.insert(region()?, v);
                }
                other => return Err(bad(format!("unknown metric {other:?}"))),
            }
        }
        Ok(r)
    }
}
