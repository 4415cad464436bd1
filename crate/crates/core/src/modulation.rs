//! Layout-guided attention modulation.
//!
//! Raw query-key scores are shifted before the softmax: positive pairs are
//! pulled toward the largest score of their row, negative pairs toward the
//! smallest, both by a factor `lambda` in `[0, 1]`:
//!
//! ```text
//! A = softmax((QK^T + lambda * M) / sqrt(d))
//! M = R * (max - QK^T) - (1 - R) * (QK^T - min)
//! ```
//!
//! so every modulated score stays inside the original `[min, max]` range.
//! `lambda = xi(t) * (1 - S)` grows with the normalized timestep and shrinks
//! with the region's area fraction `S`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{AreaTable, CrossConditionMap, TokenLabels};
use crate::scalar::{min_max, Scalar};

/// Where `max`/`min` of the score matrix are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtremaScope {
    /// Per query row.
    #[default]
    Row,
    /// Over the whole score matrix.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Cross,
    #[serde(rename = "self")]
    SelfAttn,
}

/// Timestep schedule `xi(t) = coefficient * t^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub branch: Branch,
    pub coefficient: f64,
    pub exponent: f64,
}

impl Schedule {
    pub fn new(branch: Branch, coefficient: f64, exponent: f64) -> Result<Self> {
        if !(coefficient > 0.0 && coefficient <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "coefficient {coefficient} outside (0, 1]"
            )));
        }
        if !(exponent.is_finite() && exponent >= 0.0) {
            return Err(Error::InvalidSchedule(format!("exponent {exponent} must be finite and non-negative")));
        }
        Ok(Self {
            branch,
            coefficient,
            exponent,
        })
    }

    pub fn cross_default() -> Self {
        Self {
            branch: Branch::Cross,
            coefficient: 1.0,
            exponent: 5.0,
        }
    }

    pub fn self_default() -> Self {
        Self {
            branch: Branch::SelfAttn,
            coefficient: 0.3,
            exponent: 5.0,
        }
    }

    pub fn xi<T: Scalar>(&self, t: T) -> T {
        T::of(self.coefficient) * t.powf(T::of(self.exponent))
    }
}

/// `lambda = xi(t) * (1 - S)`.
pub fn lambda_value<T: Scalar>(t: T, area: T, schedule: &Schedule) -> Result<T> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::OutOfRange {
            what: "normalized timestep",
            value: t.as_f64(),
        });
    }
    if !(area >= T::zero() && area <= T::one()) {
        return Err(Error::OutOfRange {
            what: "area fraction",
            value: area.as_f64(),
        });
    }
    Ok(schedule.xi(t) * (T::one() - area))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationPair<T> {
    pub pos: Array2<T>,
    pub neg: Array2<T>,
}

fn extrema<T: Scalar>(scores: ArrayView2<T>, scope: ExtremaScope) -> Vec<(T, T)> {
    match scope {
        ExtremaScope::Row => scores.rows().into_iter().map(|r| min_max(r.iter().copied())).collect(),
        ExtremaScope::Global => {
            let g = min_max(scores.iter().copied());
            vec![g; scores.nrows()]
        }
    }
}

/// Gap of every score to the maximum (`pos`) and from the minimum (`neg`).
pub fn pos_neg_values<T: Scalar>(scores: ArrayView2<T>, scope: ExtremaScope) -> ModulationPair<T> {
    let ext = extrema(scores, scope);
    let mut pos = Array2::zeros(scores.dim());
    let mut neg = Array2::zeros(scores.dim());
    for (x, row) in scores.rows().into_iter().enumerate() {
        let (lo, hi) = ext[x];
        for (y, &s) in row.iter().enumerate() {
            pos[[x, y]] = hi - s;
            neg[[x, y]] = s - lo;
        }
    }
    ModulationPair { pos, neg }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Positive,
    Negative,
    /// Left untouched by modulation.
    Exempt,
}

/// Per-entry modulation instructions.
pub trait ConditionSource<T> {
    /// `None` leaves the score untouched, otherwise `(is_positive, lambda)`.
    fn entry(&self, row: usize, col: usize) -> Option<(bool, T)>;
}

/// Explicit condition and lambda matrices.
pub struct DenseCondition<'a, T> {
    pub condition: ArrayView2<'a, Condition>,
    pub lambda: ArrayView2<'a, T>,
}

impl<T: Scalar> ConditionSource<T> for DenseCondition<'_, T> {
    fn entry(&self, row: usize, col: usize) -> Option<(bool, T)> {
        match self.condition[[row, col]] {
            Condition::Positive => Some((true, self.lambda[[row, col]])),
            Condition::Negative => Some((false, self.lambda[[row, col]])),
            Condition::Exempt => None,
        }
    }
}

/// Cross-attention condition of one frame with a per-column lambda.
pub struct CrossFrameCondition<'a, T> {
    pub map: &'a CrossConditionMap,
    pub frame: usize,
    pub column_lambda: Vec<T>,
}

impl<T: Scalar> ConditionSource<T> for CrossFrameCondition<'_, T> {
    fn entry(&self, row: usize, col: usize) -> Option<(bool, T)> {
        self.map
            .entry(self.frame, row, col)
            .map(|p| (p, self.column_lambda[col]))
    }
}

impl<'a, T: Scalar> CrossFrameCondition<'a, T> {
    /// Lambda of each text column from the area of the region owning it.
    pub fn new(
        map: &'a CrossConditionMap,
        frame: usize,
        areas: &AreaTable,
        t: T,
        schedule: &Schedule,
    ) -> Result<Self> {
        let column_lambda = (0..map.seq_len())
            .map(|y| match map.column_region(y) {
                Some(k) => lambda_value(t, T::of(areas.get(frame, k)), schedule),
                None => Ok(T::zero()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            map,
            frame,
            column_lambda,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.column_lambda.iter().all(|l| *l == T::zero())
    }
}

/// Spatial-temporal self-attention condition: a pair is positive iff both
/// tokens carry the same region label, across any pair of frames. Lambda is
/// taken per query row from the area of the query's region in its frame.
pub struct LabelCondition<T> {
    pub labels: Vec<u32>,
    pub row_lambda: Vec<T>,
}

impl<T: Scalar> ConditionSource<T> for LabelCondition<T> {
    #[inline]
    fn entry(&self, row: usize, col: usize) -> Option<(bool, T)> {
        Some((self.labels[row] == self.labels[col], self.row_lambda[row]))
    }
}

impl<T: Scalar> LabelCondition<T> {
    pub fn new(labels: &TokenLabels, areas: &AreaTable, t: T, schedule: &Schedule) -> Result<Self> {
        let per_frame = labels.tokens_per_frame();
        let flat = labels.flat();
        let row_lambda = flat
            .iter()
            .enumerate()
            .map(|(x, &k)| lambda_value(t, T::of(areas.get(x / per_frame.max(1), k)), schedule))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels: flat,
            row_lambda,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.row_lambda.iter().all(|l| *l == T::zero())
    }
}

/// Shifts row indices of an inner condition, for processing one query frame
/// of a larger score matrix at a time.
pub struct RowOffset<'a, C> {
    pub inner: &'a C,
    pub offset: usize,
}

impl<T: Scalar, C: ConditionSource<T>> ConditionSource<T> for RowOffset<'_, C> {
    #[inline]
    fn entry(&self, row: usize, col: usize) -> Option<(bool, T)> {
        self.inner.entry(row + self.offset, col)
    }
}

/// Applies `s + lambda * (R * (max - s) - (1 - R) * (s - min))` in place.
///
/// Results are clamped to the original `[min, max]` to absorb rounding; in
/// exact arithmetic the clamp is a no-op for `lambda` in `[0, 1]`.
pub fn modulate_in_place<T: Scalar, C: ConditionSource<T>>(
    scores: &mut Array2<T>,
    condition: &C,
    scope: ExtremaScope,
) {
    let ext = extrema(scores.view(), scope);
    for (x, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let (lo, hi) = ext[x];
        for (y, s) in row.iter_mut().enumerate() {
            let Some((positive, lambda)) = condition.entry(x, y) else {
                continue;
            };
            if lambda == T::zero() {
                continue;
            }
            let v = if positive {
                *s + lambda * (hi - *s)
            } else {
                *s - lambda * (*s - lo)
            };
            *s = v.max(lo).min(hi);
        }
    }
}

/// Modulated copy of `scores` from explicit condition and lambda matrices.
pub fn modulate_scores<T: Scalar>(
    scores: ArrayView2<T>,
    condition: ArrayView2<Condition>,
    lambda: ArrayView2<T>,
    scope: ExtremaScope,
) -> Result<Array2<T>> {
    if condition.dim() != scores.dim() {
        return Err(Error::mismatch("condition map", scores.dim(), condition.dim()));
    }
    if lambda.dim() != scores.dim() {
        return Err(Error::mismatch("lambda map", scores.dim(), lambda.dim()));
    }
    if let Some(bad) = lambda.iter().find(|l| !(**l >= T::zero() && **l <= T::one())) {
        return Err(Error::ModulationOutOfRange { value: bad.as_f64() });
    }
    let mut out = scores.to_owned();
    modulate_in_place(&mut out, &DenseCondition { condition, lambda }, scope);
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_in_place<T: Scalar>(a: &mut Array2<T>) {
    for mut row in a.axis_iter_mut(Axis(0)) {
        let m = row.iter().fold(T::neg_infinity(), |acc, v| acc.max(*v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// Row-stochastic attention weights, queries x keys.
    pub weights: Array2<T>,
    /// `weights . V`, queries x value dim.
    pub context: Array2<T>,
}

/// Attention weights `softmax((QK^T + lambda M) / sqrt(d))` for an optional
/// condition.
pub fn attention_weights<T: Scalar, C: ConditionSource<T>>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    condition: Option<&C>,
    d: usize,
    scope: ExtremaScope,
) -> Array2<T> {
    let mut scores = q.dot(&k.t());
    if let Some(c) = condition {
        modulate_in_place(&mut scores, c, scope);
    }
    let sqrt_d = T::of(d as f64).sqrt();
    scores.mapv_inplace(|s| s / sqrt_d);
    softmax_rows_in_place(&mut scores);
    scores
}

pub fn modulated_attention<T: Scalar, C: ConditionSource<T>>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    condition: Option<&C>,
    d: usize,
    scope: ExtremaScope,
) -> AttentionOutput<T> {
    let weights = attention_weights(q, k, condition, d, scope);
    let context = weights.dot(&v);
    AttentionOutput { weights, context }
}

/// Plain scaled dot-product attention.
pub fn scaled_dot_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    d: usize,
) -> AttentionOutput<T> {
    modulated_attention::<T, DenseCondition<T>>(q, k, v, None, d, ExtremaScope::Row)
}

fn check_cols<T>(context: &'static str, a: ArrayView2<T>, cols: usize) -> Result<()> {
    if a.ncols() != cols {
        return Err(Error::mismatch(context, cols, a.ncols()));
    }
    Ok(())
}

/// Per-frame cross-attention from latent queries to text keys, with the
/// text-to-region condition map applied to every frame.
#[allow(clippy::too_many_arguments)]
pub fn st_layout_cross_attention<T: Scalar>(
    queries: &[Array2<T>],
    k_text: ArrayView2<T>,
    v_text: ArrayView2<T>,
    cross_map: &CrossConditionMap,
    areas: &AreaTable,
    t: T,
    schedule: &Schedule,
    d: usize,
    scope: ExtremaScope,
) -> Result<Vec<AttentionOutput<T>>> {
    if queries.len() != cross_map.frames() {
        return Err(Error::mismatch("cross-attention frames", cross_map.frames(), queries.len()));
    }
    if k_text.nrows() != cross_map.seq_len() || v_text.nrows() != cross_map.seq_len() {
        return Err(Error::mismatch("text keys", cross_map.seq_len(), (k_text.nrows(), v_text.nrows())));
    }
    queries
        .iter()
        .enumerate()
        .map(|(frame, q)| {
            if q.nrows() != cross_map.tokens() {
                return Err(Error::mismatch("frame queries", cross_map.tokens(), q.nrows()));
            }
            check_cols("query/key width", k_text, q.ncols())?;
            let cond = CrossFrameCondition::new(cross_map, frame, areas, t, schedule)?;
            let cond = (!cond.is_identity()).then_some(cond);
            Ok(modulated_attention(q.view(), k_text, v_text, cond.as_ref(), d, scope))
        })
        .collect()
}

/// Spatial-temporal self-attention over the tokens of all frames, keys being
/// the concatenation of every frame's keys.
#[allow(clippy::too_many_arguments)]
pub fn st_layout_self_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    labels: &TokenLabels,
    areas: &AreaTable,
    t: T,
    schedule: &Schedule,
    d: usize,
    scope: ExtremaScope,
) -> Result<AttentionOutput<T>> {
    let n = labels.frames() * labels.tokens_per_frame();
    if q.nrows() != n || k.nrows() != n || v.nrows() != n {
        return Err(Error::mismatch("self-attention tokens vs labels", n, (q.nrows(), k.nrows(), v.nrows())));
    }
    check_cols("query/key width", k, q.ncols())?;
    let cond = LabelCondition::new(labels, areas, t, schedule)?;
    let cond = (!cond.is_identity()).then_some(cond);
    Ok(modulated_attention(q, k, v, cond.as_ref(), d, scope))
}

/// Sum of each row's weights on a designated key set, used for diagnostics.
pub(crate) fn row_mass<T: Scalar>(weights: ArrayView2<T>, row: usize, mut positive: impl FnMut(usize) -> bool) -> T {
    let mut acc = T::zero();
    Zip::indexed(weights.row(row)).for_each(|y, w| {
        if positive(y) {
            acc += *w;
        }
    });
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_cross_condition, region_labels, LayoutSet, RegionLevel, RegionSpec};
    use ndarray::{array, Array2};
    use std::collections::BTreeMap;

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn pos_neg_hand_oracle() {
        let p = pos_neg_values(row(&[2.0, 0.0, -1.0]).view(), ExtremaScope::Row);
        assert_eq!(p.pos, row(&[0.0, 2.0, 3.0]));
        assert_eq!(p.neg, row(&[3.0, 1.0, 0.0]));
    }

    #[test]
    fn pos_neg_constant_row_and_argmax() {
        let p = pos_neg_values(row(&[1.5, 1.5, 1.5]).view(), ExtremaScope::Row);
        assert!(p.pos.iter().chain(p.neg.iter()).all(|v| *v == 0.0));
        let s = array![[0.3, -2.0, 4.0], [7.0, 1.0, 2.0]];
        let p = pos_neg_values(s.view(), ExtremaScope::Row);
        assert_eq!(p.pos[[0, 2]], 0.0);
        assert_eq!(p.pos[[1, 0]], 0.0);
    }

    #[test]
    fn global_scope_uses_matrix_extrema() {
        let s = array![[0.0, 1.0], [5.0, 2.0]];
        let p = pos_neg_values(s.view(), ExtremaScope::Global);
        assert_eq!(p.pos, array![[5.0, 4.0], [0.0, 3.0]]);
        assert_eq!(p.neg, array![[0.0, 1.0], [5.0, 2.0]]);
    }

    #[test]
    fn lambda_examples() {
        let cross = Schedule::cross_default();
        let selfs = Schedule::self_default();
        assert_eq!(lambda_value(0.0, 0.4, &cross).unwrap(), 0.0);
        assert_eq!(lambda_value(1.0, 0.25, &cross).unwrap(), 0.75);
        assert_eq!(lambda_value(1.0, 0.0, &selfs).unwrap(), 0.3);
        assert_eq!(lambda_value(1.0f32, 1.0, &selfs).unwrap(), 0.0);
        assert!(lambda_value(1.5, 0.0, &cross).is_err());
        assert!(lambda_value(0.5, -0.1, &cross).is_err());
        assert!(lambda_value(f64::NAN, 0.0, &cross).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(Branch::Cross, 0.0, 5.0).is_err());
        assert!(Schedule::new(Branch::Cross, 1.2, 5.0).is_err());
        assert!(Schedule::new(Branch::SelfAttn, 0.3, 5.0).is_ok());
    }

    fn conds(c: &[Condition]) -> Array2<Condition> {
        Array2::from_shape_vec((1, c.len()), c.to_vec()).unwrap()
    }

    #[test]
    fn modulate_examples() {
        use Condition::*;
        let s = row(&[2.0, 0.0, -1.0]);
        let zero = Array2::zeros((1, 3));
        let out = modulate_scores(s.view(), conds(&[Positive, Negative, Negative]).view(), zero.view(), ExtremaScope::Row)
            .unwrap();
        assert_eq!(out, s);

        let half = Array2::from_elem((1, 3), 0.5);
        let out = modulate_scores(s.view(), conds(&[Positive, Negative, Negative]).view(), half.view(), ExtremaScope::Row)
            .unwrap();
        assert_eq!(out, row(&[2.0, -0.5, -1.0]));

        let one = Array2::from_elem((1, 3), 1.0);
        let out = modulate_scores(s.view(), conds(&[Positive, Positive, Positive]).view(), one.view(), ExtremaScope::Row)
            .unwrap();
        assert_eq!(out, row(&[2.0, 2.0, 2.0]));

        let out = modulate_scores(s.view(), conds(&[Exempt, Exempt, Negative]).view(), one.view(), ExtremaScope::Row)
            .unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn modulate_rejects_bad_lambda_and_shapes() {
        let s = row(&[2.0, 0.0, -1.0]);
        let c = conds(&[Condition::Positive; 3]);
        let bad = Array2::from_elem((1, 3), 1.01);
        assert!(matches!(
            modulate_scores(s.view(), c.view(), bad.view(), ExtremaScope::Row),
            Err(Error::ModulationOutOfRange { .. })
        ));
        let small = Array2::from_elem((1, 2), 0.5);
        assert!(modulate_scores(s.view(), c.view(), small.view(), ExtremaScope::Row).is_err());
    }

    fn whole_frame_layout(h: usize, w: usize) -> LayoutSet {
        let mut layout = LayoutSet::new(1, (h, w)).unwrap();
        layout.add_region(RegionSpec::new(1, "thing", RegionLevel::Class, 1)).unwrap();
        layout.set_mask(0, 1, Array2::from_elem((h, w), true)).unwrap();
        layout
    }

    #[test]
    fn cross_attention_at_t_zero_equals_plain() {
        let layout = whole_frame_layout(2, 2);
        let spans = BTreeMap::from([(1, vec![0..4])]);
        let map = build_cross_condition(&layout, &spans, 4).unwrap();
        let areas = AreaTable::from_labels(&region_labels(&layout));
        let q = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 * 0.7 - j as f64).sin());
        let k = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 + 0.3 * j as f64).cos());
        let v = Array2::from_shape_fn((4, 2), |(i, j)| i as f64 - j as f64);
        let out = st_layout_cross_attention(
            &[q.clone()],
            k.view(),
            v.view(),
            &map,
            &areas,
            0.0,
            &Schedule::cross_default(),
            3,
            ExtremaScope::Row,
        )
        .unwrap();
        let plain = scaled_dot_attention(q.view(), k.view(), v.view(), 3);
        assert_eq!(out[0], plain);
    }

    #[test]
    fn all_positive_condition_compresses_toward_row_max() {
        // Every pair positive: each score moves to (1 - lambda) s + lambda max,
        // so the row keeps its argmax but flattens, reaching uniform at 1.
        let q: Array2<f64> = array![[1.0, 0.5], [0.2, -1.0], [-0.3, 0.8], [0.9, 0.9]];
        let k = array![[0.4, 0.1], [-0.6, 0.3], [1.1, -0.2], [0.0, 0.7]];
        let v = Array2::eye(4);
        let scores = q.dot(&k.t());
        let condition = Array2::from_elem((4, 4), Condition::Positive);
        let mut prev = scaled_dot_attention(q.view(), k.view(), v.view(), 2).weights;
        for lambda in [0.1, 0.5, 1.0] {
            let lam = Array2::from_elem((4, 4), lambda);
            let dense = DenseCondition {
                condition: condition.view(),
                lambda: lam.view(),
            };
            let w = attention_weights(q.view(), k.view(), Some(&dense), 2, ExtremaScope::Row);
            for x in 0..4 {
                let row: Vec<f64> = (0..4).map(|y| scores[[x, y]]).collect();
                let hi = row.iter().cloned().fold(f64::MIN, f64::max);
                let shifted: Vec<f64> = row.iter().map(|s| ((1.0 - lambda) * s + lambda * hi) / 2f64.sqrt()).collect();
                let z: f64 = shifted.iter().map(|s| s.exp()).sum();
                for y in 0..4 {
                    assert!((w[[x, y]] - shifted[y].exp() / z).abs() < 1e-12);
                }
                let arg = (0..4).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
                let w_arg = w[[x, arg]];
                assert!((0..4).all(|y| w[[x, y]] <= w_arg + 1e-15));
                assert!(w_arg <= prev[[x, arg]] + 1e-15, "row {x}");
            }
            prev = w;
        }
        assert!(prev.iter().all(|p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn self_attention_label_length_mismatch() {
        let labels = crate::layout::TokenLabels::from_frames(vec![vec![1; 4]]).unwrap();
        let areas = AreaTable::from_labels(&labels);
        let q = Array2::<f64>::zeros((5, 2));
        let r = st_layout_self_attention(
            q.view(),
            q.view(),
            q.view(),
            &labels,
            &areas,
            1.0,
            &Schedule::self_default(),
            2,
            ExtremaScope::Row,
        );
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }
}
