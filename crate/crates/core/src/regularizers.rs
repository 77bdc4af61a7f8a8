//! Fine-tuning penalties: weight decay toward zero, and start-point
//! penalties toward a frozen pre-trained reference.
//!
//! Only groups marked trainable contribute. Group-level helpers are summed,
//! so every penalty is additive over groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, ParamGroup, ParameterSet, Snapshot, TrainableMask, POOL_LDE};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    L2,
    L2sp,
    SplitL2sp,
    L1sp,
}

impl Regularizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::L2 => "l2",
            Self::L2sp => "l2sp",
            Self::SplitL2sp => "split_l2sp",
            Self::L1sp => "l1sp",
        }
    }

    pub fn needs_reference(&self) -> bool {
        matches!(self, Self::L2sp | Self::SplitL2sp | Self::L1sp)
    }
}

/// Start-point reference `W⁰` with the shared / modified partition.
#[derive(Clone, Debug)]
pub struct SpReference {
    snapshot: Snapshot,
    shared_groups: Vec<String>,
    modified_groups: Vec<String>,
}

impl SpReference {
    pub fn new(snapshot: Snapshot, shared_groups: Vec<String>, modified_groups: Vec<String>) -> Result<Self> {
        if let Some(g) = modified_groups.iter().find(|g| shared_groups.contains(g)) {
            return Err(Error::Reference(format!("group `{g}` is listed as both shared and modified")));
        }
        for g in &shared_groups {
            if snapshot.group(g).is_none() {
                return Err(Error::Reference(format!("shared group `{g}` missing from snapshot")));
            }
        }
        Ok(Self { snapshot, shared_groups, modified_groups })
    }

    /// Partition for a model whose replaced groups form `W_m`: every
    /// trainable group is either shared (has a start point) or modified.
    pub fn for_model(snapshot: Snapshot, live: &ParameterSet, mask: &TrainableMask) -> Result<Self> {
        let mut shared = Vec::new();
        let mut modified = Vec::new();
        for (i, g) in live.groups().iter().enumerate() {
            if !mask.is_trainable(i) {
                continue;
            }
            if g.replaced {
                modified.push(g.name.clone());
            } else {
                shared.push(g.name.clone());
            }
        }
        Self::new(snapshot, shared, modified)
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn shared_groups(&self) -> &[String] {
        &self.shared_groups
    }

    pub fn modified_groups(&self) -> &[String] {
        &self.modified_groups
    }

    /// Same reference with no modified groups.
    pub fn without_modified(&self) -> Self {
        Self { snapshot: self.snapshot.clone(), shared_groups: self.shared_groups.clone(), modified_groups: Vec::new() }
    }

    /// `‖W_s − W_s⁰‖₂` over the shared groups.
    pub fn shared_distance(&self, live: &ParameterSet) -> Result<f64> {
        let mut total = 0.0;
        for name in &self.shared_groups {
            let (g, g0) = self.pair(live, name)?;
            for (a, b) in g.values.iter().zip(&g0.values) {
                total += a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        Ok(total.sqrt())
    }

    fn pair<'a>(&'a self, live: &'a ParameterSet, name: &str) -> Result<(&'a ParamGroup, &'a ParamGroup)> {
        let g = live.group(name).ok_or_else(|| Error::Reference(format!("live model lacks group `{name}`")))?;
        let g0 = self.snapshot.group(name).ok_or_else(|| Error::Reference(format!("snapshot lacks group `{name}`")))?;
        let same =
            g.values.len() == g0.values.len() && g.values.iter().zip(&g0.values).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::DimensionMismatch(format!("group `{name}` differs in shape from its snapshot")));
        }
        Ok((g, g0))
    }
}

#[derive(Clone, Debug)]
pub struct PenaltyOutput {
    pub value: f64,
    pub grads: Gradients,
}

/// Tensors 1.. of encoder blocks and FC layers are biases.
fn counts(group: &ParamGroup, tensor: usize, include_biases: bool) -> bool {
    include_biases || tensor == 0 || group.name == POOL_LDE
}

fn trainable(params: &ParameterSet, mask: Option<&TrainableMask>, name: &str) -> Option<usize> {
    let i = params.index_of(name)?;
    mask.is_none_or(|m| m.is_trainable(i)).then_some(i)
}

/// `α‖W‖²` for one group, gradient `2αW` added into `out`.
fn l2_group(group: &ParamGroup, alpha: f64, include_biases: bool, out: &mut [Matrix]) -> f64 {
    let mut value = 0.0;
    for (t, (w, g)) in group.values.iter().zip(out.iter_mut()).enumerate() {
        if !counts(group, t, include_biases) {
            continue;
        }
        for (wi, gi) in w.as_slice().iter().zip(g.as_mut_slice()) {
            value += wi * wi;
            *gi += 2.0 * alpha * wi;
        }
    }
    alpha * value
}

/// `α‖W − W⁰‖²` for one group.
fn l2_sp_group(group: &ParamGroup, start: &ParamGroup, alpha: f64, include_biases: bool, out: &mut [Matrix]) -> f64 {
    let mut value = 0.0;
    for (t, ((w, w0), g)) in group.values.iter().zip(&start.values).zip(out.iter_mut()).enumerate() {
        if !counts(group, t, include_biases) {
            continue;
        }
        for ((wi, w0i), gi) in w.as_slice().iter().zip(w0.as_slice()).zip(g.as_mut_slice()) {
            let d = wi - w0i;
            value += d * d;
            *gi += 2.0 * alpha * d;
        }
    }
    alpha * value
}

/// `α‖W − W⁰‖₁` for one group with subgradient `α·sign(W − W⁰)`, `sign(0) = 0`.
fn l1_sp_group(group: &ParamGroup, start: &ParamGroup, alpha: f64, include_biases: bool, out: &mut [Matrix]) -> f64 {
    let mut value = 0.0;
    for (t, ((w, w0), g)) in group.values.iter().zip(&start.values).zip(out.iter_mut()).enumerate() {
        if !counts(group, t, include_biases) {
            continue;
        }
        for ((wi, w0i), gi) in w.as_slice().iter().zip(w0.as_slice()).zip(g.as_mut_slice()) {
            let d = wi - w0i;
            value += d.abs();
            if d != 0.0 {
                *gi += alpha * d.signum();
            }
        }
    }
    alpha * value
}

fn check_nonnegative(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("penalty weights must be >= 0 (α={alpha}, β={beta})")));
    }
    Ok(())
}

/// Weight decay `α‖W‖₂²` over trainable groups.
pub fn l2_norm_penalty(
    params: &ParameterSet,
    mask: Option<&TrainableMask>,
    alpha: f64,
    include_biases: bool,
) -> Result<PenaltyOutput> {
    check_nonnegative(alpha, 0.0)?;
    let mut grads = params.zeros_like();
    let mut value = 0.0;
    for (i, g) in params.groups().iter().enumerate() {
        if mask.is_none_or(|m| m.is_trainable(i)) {
            value += l2_group(g, alpha, include_biases, &mut grads.groups[i]);
        }
    }
    Ok(PenaltyOutput { value, grads })
}

/// `α‖W − W⁰‖₂²` over every trainable shared and modified group.
pub fn l2_sp_penalty(
    params: &ParameterSet,
    reference: &SpReference,
    mask: Option<&TrainableMask>,
    alpha: f64,
    include_biases: bool,
) -> Result<PenaltyOutput> {
    check_nonnegative(alpha, 0.0)?;
    let mut grads = params.zeros_like();
    let mut value = 0.0;
    for name in reference.shared_groups.iter().chain(&reference.modified_groups) {
        let (g, g0) = reference.pair(params, name)?;
        if let Some(i) = trainable(params, mask, name) {
            value += l2_sp_group(g, g0, alpha, include_biases, &mut grads.groups[i]);
        }
    }
    Ok(PenaltyOutput { value, grads })
}

fn split_penalty(
    params: &ParameterSet,
    reference: &SpReference,
    mask: Option<&TrainableMask>,
    alpha: f64,
    beta: f64,
    include_biases: bool,
    shared_term: fn(&ParamGroup, &ParamGroup, f64, bool, &mut [Matrix]) -> f64,
) -> Result<PenaltyOutput> {
    check_nonnegative(alpha, beta)?;
    let mut grads = params.zeros_like();
    let mut value = 0.0;
    for name in &reference.shared_groups {
        let (g, g0) = reference.pair(params, name)?;
        if let Some(i) = trainable(params, mask, name) {
            value += shared_term(g, g0, alpha, include_biases, &mut grads.groups[i]);
        }
    }
    for name in &reference.modified_groups {
        let i = params
            .index_of(name)
            .ok_or_else(|| Error::Reference(format!("live model lacks modified group `{name}`")))?;
        if mask.is_none_or(|m| m.is_trainable(i)) {
            value += l2_group(&params.groups()[i], beta, include_biases, &mut grads.groups[i]);
        }
    }
    Ok(PenaltyOutput { value, grads })
}

/// `α‖W_s − W_s⁰‖₂² + β‖W_m‖₂²`.
pub fn split_l2_sp_penalty(
    params: &ParameterSet,
    reference: &SpReference,
    mask: Option<&TrainableMask>,
    alpha: f64,
    beta: f64,
    include_biases: bool,
) -> Result<PenaltyOutput> {
    split_penalty(params, reference, mask, alpha, beta, include_biases, l2_sp_group)
}

/// `α‖W_s − W_s⁰‖₁ + β‖W_m‖₂²`.
pub fn l1_sp_penalty(
    params: &ParameterSet,
    reference: &SpReference,
    mask: Option<&TrainableMask>,
    alpha: f64,
    beta: f64,
    include_biases: bool,
) -> Result<PenaltyOutput> {
    split_penalty(params, reference, mask, alpha, beta, include_biases, l1_sp_group)
}

/// Dispatches on `kind`. `L2sp` is evaluated over the shared groups only
/// (parameters that have a start point); a replaced classifier is left
/// unpenalized by it.
pub fn penalty(
    kind: Regularizer,
    params: &ParameterSet,
    mask: Option<&TrainableMask>,
    reference: Option<&SpReference>,
    alpha: f64,
    beta: f64,
    include_biases: bool,
) -> Result<PenaltyOutput> {
    let need_ref =
        || reference.ok_or_else(|| Error::Reference(format!("{} needs a start-point reference", kind.as_str())));
    match kind {
        Regularizer::None => Ok(PenaltyOutput { value: 0.0, grads: params.zeros_like() }),
        Regularizer::L2 => l2_norm_penalty(params, mask, alpha, include_biases),
        Regularizer::L2sp => l2_sp_penalty(params, &need_ref()?.without_modified(), mask, alpha, include_biases),
        Regularizer::SplitL2sp => split_l2_sp_penalty(params, need_ref()?, mask, alpha, beta, include_biases),
        Regularizer::L1sp => l1_sp_penalty(params, need_ref()?, mask, alpha, beta, include_biases),
    }
}
