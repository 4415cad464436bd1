//! Multi-grained region layouts and the query-key condition maps derived from
//! them.
//!
//! A [`LayoutSet`] holds per-frame binary masks for each region plus the
//! region prompts. After [`resolve_overlaps`] every latent token belongs to at
//! most one region; uncovered tokens carry the background label `0`.
//! Cross-attention conditions are materialized per frame
//! ([`CrossConditionMap`]); self-attention conditions are kept implicit as
//! per-token labels ([`TokenLabels`]) and compared on the fly.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Boolean grid at latent resolution, indexed `[row, col]`.
pub type Mask = Array2<bool>;

pub const BACKGROUND: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLevel {
    Class,
    Instance,
    Part,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub id: u32,
    pub prompt_tokens: Vec<String>,
    pub level: RegionLevel,
    pub priority: i32,
    /// Region whose prompt is unchanged by the edit; excluded from the blend
    /// foreground.
    #[serde(default)]
    pub preserve: bool,
}

impl RegionSpec {
    pub fn new(id: u32, prompt: &str, level: RegionLevel, priority: i32) -> Self {
        Self {
            id,
            prompt_tokens: tokenize(prompt),
            level,
            priority,
            preserve: false,
        }
    }
}

/// Splits a prompt into lowercase whitespace-separated tokens.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSet {
    frames: usize,
    resolution: (usize, usize),
    regions: Vec<RegionSpec>,
    masks: BTreeMap<(usize, u32), Mask>,
    pub global_prompt_tokens: Vec<String>,
}

impl LayoutSet {
    pub fn new(frames: usize, resolution: (usize, usize)) -> Result<Self> {
        if frames == 0 || resolution.0 == 0 || resolution.1 == 0 {
            return Err(Error::InvalidLayout(format!(
                "layout needs at least one frame and a positive resolution, got {frames} frames at {resolution:?}"
            )));
        }
        Ok(Self {
            frames,
            resolution,
            regions: Vec::new(),
            masks: BTreeMap::new(),
            global_prompt_tokens: Vec::new(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    pub fn region(&self, id: u32) -> Option<&RegionSpec> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn add_region(&mut self, spec: RegionSpec) -> Result<()> {
        if spec.id == BACKGROUND {
            return Err(Error::InvalidLayout("region id 0 is reserved for background".into()));
        }
        if self.region(spec.id).is_some() {
            return Err(Error::InvalidLayout(format!("duplicate region id {}", spec.id)));
        }
        if spec.prompt_tokens.is_empty() {
            return Err(Error::InvalidLayout(format!("region {} has an empty prompt", spec.id)));
        }
        self.regions.push(spec);
        Ok(())
    }

    pub fn set_mask(&mut self, frame: usize, region: u32, mask: Mask) -> Result<()> {
        if frame >= self.frames {
            return Err(Error::OutOfRange {
                what: "frame index",
                value: frame as f64,
            });
        }
        if self.region(region).is_none() {
            return Err(Error::UnknownRegion(region));
        }
        if mask.dim() != self.resolution {
            return Err(Error::mismatch("region mask", self.resolution, mask.dim()));
        }
        self.masks.insert((frame, region), mask);
        Ok(())
    }

    /// Mask of `region` at `frame`; regions without a stored mask are empty.
    pub fn mask(&self, frame: usize, region: u32) -> Mask {
        self.masks
            .get(&(frame, region))
            .cloned()
            .unwrap_or_else(|| Array2::from_elem(self.resolution, false))
    }

    fn mask_ref(&self, frame: usize, region: u32) -> Option<&Mask> {
        self.masks.get(&(frame, region))
    }

    /// Checks that part-level regions outrank every class or instance region
    /// they overlap in any frame.
    pub fn validate(&self) -> Result<()> {
        for part in self.regions.iter().filter(|r| r.level == RegionLevel::Part) {
            for other in self.regions.iter().filter(|r| r.level != RegionLevel::Part) {
                if part.priority > other.priority {
                    continue;
                }
                for frame in 0..self.frames {
                    let (Some(a), Some(b)) = (self.mask_ref(frame, part.id), self.mask_ref(frame, other.id))
                    else {
                        continue;
                    };
                    if a.iter().zip(b.iter()).any(|(x, y)| *x && *y) {
                        return Err(Error::InvalidLayout(format!(
                            "part region {} (priority {}) overlaps region {} (priority {}) without outranking it",
                            part.id, part.priority, other.id, other.priority
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Winning region at a token among all regions covering it, by
    /// (priority, id).
    fn winner(&self, frame: usize, row: usize, col: usize) -> u32 {
        let mut best: Option<(i32, u32)> = None;
        for spec in &self.regions {
            if let Some(m) = self.mask_ref(frame, spec.id) {
                if m[[row, col]] {
                    let key = (spec.priority, spec.id);
                    if best.is_none_or(|b| key > b) {
                        best = Some(key);
                    }
                }
            }
        }
        best.map_or(BACKGROUND, |(_, id)| id)
    }
}

/// Resamples a mask by area-weighted majority vote; ties resolve to true.
///
/// Each destination cell covers a (possibly fractional) rectangle of source
/// cells. Coverage is computed in integer units of `1 / (dst_h * dst_w)`, so
/// the vote is exact for any pair of resolutions.
pub fn resample_mask(mask: &Mask, dst: (usize, usize)) -> Result<Mask> {
    let (sh, sw) = mask.dim();
    let (dh, dw) = dst;
    if sh == 0 || sw == 0 || dh == 0 || dw == 0 {
        return Err(Error::EmptyMask);
    }
    if (sh, sw) == (dh, dw) {
        return Ok(mask.clone());
    }
    // Source index i spans [i*d, (i+1)*d), destination index j spans [j*s, (j+1)*s).
    let overlaps = |src: usize, dst: usize, j: usize| -> Vec<(usize, u64)> {
        let lo = j * src;
        let hi = (j + 1) * src;
        let first = lo / dst;
        let last = (hi - 1) / dst;
        (first..=last)
            .map(|i| {
                let a = (i * dst).max(lo);
                let b = ((i + 1) * dst).min(hi);
                (i, (b - a) as u64)
            })
            .collect()
    };
    let row_cover: Vec<_> = (0..dh).map(|j| overlaps(sh, dh, j)).collect();
    let col_cover: Vec<_> = (0..dw).map(|j| overlaps(sw, dw, j)).collect();
    let total = (sh * sw) as u64;
    Ok(Array2::from_shape_fn(dst, |(r, c)| {
        let mut hits = 0u64;
        for &(sr, wr) in &row_cover[r] {
            for &(sc, wc) in &col_cover[c] {
                if mask[[sr, sc]] {
                    hits += wr * wc;
                }
            }
        }
        2 * hits >= total
    }))
}

/// Assigns every contested token to the highest-priority region, breaking
/// priority ties by the larger region id.
pub fn resolve_overlaps(layout: &LayoutSet) -> LayoutSet {
    let mut out = layout.clone();
    out.masks.clear();
    let (h, w) = layout.resolution;
    for frame in 0..layout.frames {
        let winners = Array2::from_shape_fn((h, w), |(r, c)| layout.winner(frame, r, c));
        for spec in &layout.regions {
            if layout.mask_ref(frame, spec.id).is_none() {
                continue;
            }
            let m = winners.mapv(|label| label == spec.id);
            out.masks.insert((frame, spec.id), m);
        }
    }
    out
}

/// Logical OR of every edited (non-preserved) region mask in one frame.
pub fn merge_foreground(layout: &LayoutSet, frame: usize) -> Result<Mask> {
    if frame >= layout.frames {
        return Err(Error::OutOfRange {
            what: "frame index",
            value: frame as f64,
        });
    }
    let mut merged = Array2::from_elem(layout.resolution, false);
    for spec in layout.regions.iter().filter(|r| !r.preserve) {
        if let Some(m) = layout.mask_ref(frame, spec.id) {
            merged.zip_mut_with(m, |a, b| *a |= *b);
        }
    }
    Ok(merged)
}

/// Per-frame cross-attention condition map: rows are latent tokens, columns
/// text positions.
///
/// Columns owned by a region are binary (token inside that region's mask or
/// not). Columns outside every region span are exempt from modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossConditionMap {
    frames: usize,
    tokens: usize,
    column_region: Vec<Option<u32>>,
    positive: Vec<Array2<bool>>,
}

impl CrossConditionMap {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.column_region.len()
    }

    /// Region owning text position `col`, or `None` for exempt columns.
    pub fn column_region(&self, col: usize) -> Option<u32> {
        self.column_region[col]
    }

    pub fn column_regions(&self) -> &[Option<u32>] {
        &self.column_region
    }

    pub fn is_modulated(&self, col: usize) -> bool {
        self.column_region[col].is_some()
    }

    /// `Some(true)` for positive pairs, `Some(false)` for negative pairs and
    /// `None` for exempt columns.
    pub fn entry(&self, frame: usize, token: usize, col: usize) -> Option<bool> {
        self.column_region[col].map(|_| self.positive[frame][[token, col]])
    }

    /// Binary matrix of the frame; exempt columns read as zero.
    pub fn frame(&self, frame: usize) -> &Array2<bool> {
        &self.positive[frame]
    }

    pub fn column_sums(&self, frame: usize) -> Vec<usize> {
        self.positive[frame]
            .columns()
            .into_iter()
            .map(|c| c.iter().filter(|v| **v).count())
            .collect()
    }
}

/// Broadcasts each region's mask onto the text positions of its prompt span.
pub fn build_cross_condition(
    layout: &LayoutSet,
    prompt_spans: &BTreeMap<u32, Vec<Range<usize>>>,
    seq_len: usize,
) -> Result<CrossConditionMap> {
    let mut column_region: Vec<Option<u32>> = vec![None; seq_len];
    for (&region, ranges) in prompt_spans {
        if layout.region(region).is_none() {
            return Err(Error::UnknownRegion(region));
        }
        for range in ranges {
            if range.start >= range.end || range.end > seq_len {
                return Err(Error::OutOfRange {
                    what: "prompt span end",
                    value: range.end as f64,
                });
            }
            for col in range.clone() {
                if let Some(first) = column_region[col] {
                    return Err(Error::AmbiguousTokenOwnership {
                        token: col,
                        first,
                        second: region,
                    });
                }
                column_region[col] = Some(region);
            }
        }
    }
    let labels = region_labels(layout);
    let tokens = layout.tokens_per_frame();
    let positive = (0..layout.frames)
        .map(|frame| {
            let row_labels = &labels.labels[frame];
            Array2::from_shape_fn((tokens, seq_len), |(x, y)| {
                column_region[y].is_some_and(|k| row_labels[x] == k)
            })
        })
        .collect();
    Ok(CrossConditionMap {
        frames: layout.frames,
        tokens,
        column_region,
        positive,
    })
}

/// Region label of every latent token, frame by frame. Two tokens form a
/// positive self-attention pair iff their labels agree, in any frame pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLabels {
    labels: Vec<Vec<u32>>,
}

impl TokenLabels {
    pub fn from_frames(labels: Vec<Vec<u32>>) -> Result<Self> {
        if let Some(first) = labels.first() {
            if labels.iter().any(|f| f.len() != first.len()) {
                return Err(Error::InvalidLayout("label frames differ in length".into()));
            }
        }
        Ok(Self { labels })
    }

    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn frame(&self, frame: usize) -> &[u32] {
        &self.labels[frame]
    }

    pub fn label(&self, frame: usize, token: usize) -> u32 {
        self.labels[frame][token]
    }

    pub fn same_region(&self, fi: usize, x: usize, fj: usize, y: usize) -> bool {
        self.labels[fi][x] == self.labels[fj][y]
    }

    /// All labels in frame-major order, matching the concatenated key layout of
    /// spatial-temporal self-attention.
    pub fn flat(&self) -> Vec<u32> {
        self.labels.iter().flatten().copied().collect()
    }

    /// Region ids present anywhere, background included.
    pub fn present(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.flat();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn region_labels(layout: &LayoutSet) -> TokenLabels {
    let (h, w) = layout.resolution;
    let labels = (0..layout.frames)
        .map(|frame| {
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    out.push(layout.winner(frame, r, c));
                }
            }
            out
        })
        .collect();
    TokenLabels { labels }
}

/// Fraction of the frame covered by a region's mask.
pub fn region_area_fraction<T: Scalar>(layout: &LayoutSet, frame: usize, region: u32) -> Result<T> {
    if layout.region(region).is_none() {
        return Err(Error::UnknownRegion(region));
    }
    if frame >= layout.frames {
        return Err(Error::OutOfRange {
            what: "frame index",
            value: frame as f64,
        });
    }
    let count = layout
        .mask_ref(frame, region)
        .map_or(0, |m| m.iter().filter(|v| **v).count());
    Ok(T::of(count as f64 / layout.tokens_per_frame() as f64))
}

/// Area fraction of every label (background included) in every frame,
/// computed from resolved labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaTable {
    per_frame: Vec<BTreeMap<u32, f64>>,
}

impl AreaTable {
    pub fn from_labels(labels: &TokenLabels) -> Self {
        let per_frame = (0..labels.frames())
            .map(|f| {
                let frame = labels.frame(f);
                let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                for &l in frame {
                    *counts.entry(l).or_default() += 1;
                }
                counts
                    .into_iter()
                    .map(|(k, n)| (k, n as f64 / frame.len() as f64))
                    .collect()
            })
            .collect();
        Self { per_frame }
    }

    /// Area fraction of `label` in `frame`; absent labels have area zero.
    pub fn get(&self, frame: usize, label: u32) -> f64 {
        self.per_frame[frame].get(&label).copied().unwrap_or(0.0)
    }
}
