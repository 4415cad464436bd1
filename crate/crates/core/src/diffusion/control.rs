//! Attention hooks passed into the denoiser: layout-derived modulation and
//! optional recording of features, weights and attention mass.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layout::{AreaTable, CrossConditionMap, TokenLabels};
use crate::modulation::{CrossFrameCondition, ExtremaScope, LabelCondition, Schedule};
use crate::scalar::Scalar;

/// Everything needed to modulate (or just measure) attention for one edit.
#[derive(Clone, Debug)]
pub struct AttentionControl {
    pub labels: TokenLabels,
    pub cross_map: CrossConditionMap,
    pub areas: AreaTable,
    pub xi_cross: Schedule,
    pub xi_self: Schedule,
    pub modulate_cross: bool,
    pub modulate_self: bool,
    pub scope: ExtremaScope,
}

impl AttentionControl {
    /// Conditions at normalized time `t`. When `active` is false the layout is
    /// kept for measurement only.
    pub fn step<T: Scalar>(&self, t: T, active: bool) -> Result<StepControl<'_, T>> {
        let cross = if active && self.modulate_cross {
            let conds = (0..self.cross_map.frames())
                .map(|f| CrossFrameCondition::new(&self.cross_map, f, &self.areas, t, &self.xi_cross))
                .collect::<Result<Vec<_>>>()?;
            (!conds.iter().all(CrossFrameCondition::is_identity)).then_some(conds)
        } else {
            None
        };
        let self_cond = if active && self.modulate_self {
            let c = LabelCondition::new(&self.labels, &self.areas, t, &self.xi_self)?;
            (!c.is_identity()).then_some(c)
        } else {
            None
        };
        Ok(StepControl {
            control: self,
            cross,
            self_cond,
            labels: self.labels.flat(),
        })
    }
}

pub struct StepControl<'a, T> {
    pub control: &'a AttentionControl,
    pub cross: Option<Vec<CrossFrameCondition<'a, T>>>,
    pub self_cond: Option<LabelCondition<T>>,
    pub(crate) labels: Vec<u32>,
}

impl<T> StepControl<'_, T> {
    pub fn is_modulating(&self) -> bool {
        self.cross.is_some() || self.self_cond.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceRequest {
    /// Self-attention context vectors of every block.
    pub features: bool,
    /// Head-averaged attention weights of every block.
    pub weights: bool,
    /// Per-region attention mass; needs a control.
    pub mass: bool,
}

impl TraceRequest {
    pub fn any(&self) -> bool {
        self.features || self.weights || self.mass
    }
}

/// Per-region attention mass of one block, averaged over heads and over the
/// queries of the region.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockMass {
    /// Cross-attention mass of region queries on their own prompt span.
    pub cross_in_region: BTreeMap<u32, f64>,
    /// Self-attention mass of region queries on same-region keys, all frames.
    pub self_in_region: BTreeMap<u32, f64>,
    /// Self-attention mass of region queries on keys of other regions.
    pub self_leakage: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<T> {
    pub request: TraceRequest,
    pub features: Vec<Array2<T>>,
    /// Per block, per frame: tokens x text positions.
    pub cross_weights: Vec<Vec<Array2<T>>>,
    /// Per block: all tokens x all tokens.
    pub self_weights: Vec<Array2<T>>,
    pub mass: Vec<BlockMass>,
}

impl<T> ForwardTrace<T> {
    pub fn new(request: TraceRequest) -> Self {
        Self {
            request,
            features: Vec::new(),
            cross_weights: Vec::new(),
            self_weights: Vec::new(),
            mass: Vec::new(),
        }
    }
}

/// Running sums for [`BlockMass`].
#[derive(Default)]
pub(crate) struct MassAccumulator {
    cross: BTreeMap<u32, (f64, usize)>,
    self_in: BTreeMap<u32, (f64, usize)>,
    self_out: BTreeMap<u32, (f64, usize)>,
}

impl MassAccumulator {
    pub(crate) fn add_cross(&mut self, region: u32, mass: f64) {
        let e = self.cross.entry(region).or_default();
        e.0 += mass;
        e.1 += 1;
    }

    pub(crate) fn add_self(&mut self, region: u32, inside: f64, outside: f64) {
        let e = self.self_in.entry(region).or_default();
        e.0 += inside;
        e.1 += 1;
        let e = self.self_out.entry(region).or_default();
        e.0 += outside;
        e.1 += 1;
    }

    pub(crate) fn finish(self) -> BlockMass {
        let mean = |m: BTreeMap<u32, (f64, usize)>| {
            m.into_iter()
                .map(|(k, (s, n))| (k, s / n as f64))
                .collect::<BTreeMap<_, _>>()
        };
        BlockMass {
            cross_in_region: mean(self.cross),
            self_in_region: mean(self.self_in),
            self_leakage: mean(self.self_out),
        }
    }
}
