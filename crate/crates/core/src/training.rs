//! Optimization loops: teacher training on whole long utterances, training
//! on fixed-length crops (short-utterance baseline and teacher-student), and
//! start-point fine-tuning on a target corpus.
//!
//! Within a mini-batch, items are processed in parallel and their gradients
//! summed in item order, so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{crop, crop_or_whole, Corpus};
use crate::error::{Error, Result};
use crate::network::{
    backward, forward, replace_classifier, select_groups, EncoderConfig, FeatureSequence, Gradients, LayerSelection,
    ParameterSet, TrainableMask, FC2,
};
use crate::numerics::{Matrix, Rng};
use crate::objectives::{
    composite_loss, posterior_logits, ClassLoss, DistillationConfig, StudentOutputs, TeacherOutputs,
};
use crate::regularizers::{penalty, Regularizer, SpReference};

/// Adam moments and step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn check_shapes(params: &ParameterSet, grads: &Gradients, state: &OptimizerState) -> Result<()> {
    let ok = params.groups().len() == grads.groups.len()
        && params.groups().iter().zip(&grads.groups).zip(&state.m.groups).all(|((p, g), m)| {
            p.values.len() == g.len()
                && p.values.len() == m.len()
                && p.values.iter().zip(g).zip(m).all(|((a, b), c)| a.shape() == b.shape() && a.shape() == c.shape())
        });
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch("optimizer, parameters and gradients disagree in shape".into()))
    }
}

/// One bias-corrected Adam step with the same learning rate for every group.
pub fn adam_step(state: &mut OptimizerState, params: &mut ParameterSet, grads: &Gradients, lr: f64) -> Result<()> {
    let lrs = vec![lr; params.groups().len()];
    adam_step_groups(state, params, grads, &lrs)
}

/// Adam step with a learning rate per group. Groups whose rate is zero are
/// skipped entirely, moments included.
pub fn adam_step_groups(
    state: &mut OptimizerState,
    params: &mut ParameterSet,
    grads: &Gradients,
    lrs: &[f64],
) -> Result<()> {
    check_shapes(params, grads, state)?;
    if lrs.len() != params.groups().len() {
        return Err(Error::DimensionMismatch(format!(
            "{} learning rates for {} groups",
            lrs.len(),
            params.groups().len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (gi, group) in params.groups_mut().iter_mut().enumerate() {
        let lr = lrs[gi];
        if lr == 0.0 {
            continue;
        }
        for (ti, w) in group.values.iter_mut().enumerate() {
            let g = grads.groups[gi][ti].as_slice();
            let m = state.m.groups[gi][ti].as_mut_slice();
            let v = state.v.groups[gi][ti].as_mut_slice();
            for (k, wk) in w.as_mut_slice().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *wk -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// `factor · size^−½ · min(step^−½, step · warmup^−³⁄₂)`.
pub fn noam_lr(step: u64, model_size: usize, warmup: u64, factor: f64) -> Result<f64> {
    if step == 0 || warmup == 0 || model_size == 0 {
        return Err(Error::InvalidArgument("noam schedule needs step, warmup and model size >= 1".into()));
    }
    let s = step as f64;
    Ok(factor * (model_size as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    Noam { model_size: usize, warmup: u64, factor: f64 },
}

impl LrSchedule {
    /// Learning rate for optimizer step `step` (counted from 1).
    pub fn lr(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Constant { lr } => Ok(lr),
            LrSchedule::Noam { model_size, warmup, factor } => noam_lr(step, model_size, warmup, factor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Crop length for crop-based training; ignored by teacher training.
    pub crop_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            schedule: LrSchedule::Noam { model_size: 32, warmup: 400, factor: 1.0 },
            seed: 0,
            crop_frames: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::InvalidArgument("batch_size and crop_frames must be positive".into()));
        }
        match self.schedule {
            LrSchedule::Constant { lr } if !(lr > 0.0) => {
                Err(Error::InvalidArgument("learning rate must be > 0".into()))
            }
            LrSchedule::Noam { model_size, warmup, factor } if model_size == 0 || warmup == 0 || !(factor > 0.0) => {
                Err(Error::InvalidArgument("noam schedule needs positive size, warmup and factor".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub regularizer: Regularizer,
    /// Penalty strength on the shared parameters; `None` picks
    /// [`FineTuneConfig::default_alpha`].
    pub alpha: Option<f64>,
    pub beta: f64,
    pub selection: LayerSelection,
    pub lr_replaced: f64,
    pub lr_rest: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Utterances longer than this are randomly cropped each visit; shorter
    /// ones are used whole.
    pub crop_frames: usize,
    pub include_biases: bool,
    pub loss: DistillationConfig,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::SplitL2sp,
            alpha: None,
            beta: 0.01,
            selection: LayerSelection::All,
            lr_replaced: 1e-3,
            lr_rest: 1e-5,
            decay_every: 15,
            decay_factor: 0.1,
            epochs: 45,
            batch_size: 32,
            crop_frames: 200,
            include_biases: true,
            loss: DistillationConfig::class_only(ClassLoss::Softmax),
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    /// 0.001 for weight decay, 0.1 for the start-point penalties.
    pub fn default_alpha(kind: Regularizer) -> f64 {
        match kind {
            Regularizer::None => 0.0,
            Regularizer::L2 => 1e-3,
            Regularizer::L2sp | Regularizer::SplitL2sp | Regularizer::L1sp => 0.1,
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| Self::default_alpha(self.regularizer))
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.effective_alpha();
        if !(alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be >= 0".into()));
        }
        if !(self.lr_replaced > 0.0) || !(self.lr_rest > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 || self.crop_frames == 0 || self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::InvalidArgument("batch size, crop, decay period and factor must be positive".into()));
        }
        if self.loss.needs_teacher() {
            return Err(Error::InvalidArgument("fine-tuning uses the classification loss only".into()));
        }
        self.loss.validate()
    }

    /// Learning-rate multiplier for a 0-based epoch.
    pub fn decay(&self, epoch: usize) -> f64 {
        self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based
    pub epoch: usize,
    /// Mean per-item loss terms over the epoch.
    pub terms: BTreeMap<String, f64>,
    /// Mean weighted task loss.
    pub task_loss: f64,
    /// Regularizer value after the last step of the epoch.
    pub penalty: f64,
    /// Closed-set accuracy over the items visited.
    pub accuracy: f64,
    /// Learning rate of the last step (of the lowest-rate trainable group
    /// when several are used).
    pub lr: f64,
    /// `‖W_s − W_s⁰‖₂` at the end of the epoch (fine-tuning only).
    pub shared_distance: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    /// Mean task loss of the initial parameters over the training items.
    pub initial_loss: f64,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub params: ParameterSet,
    pub reference: SpReference,
    pub history: Vec<EpochLog>,
}

struct ItemResult {
    terms: BTreeMap<&'static str, f64>,
    total: f64,
    correct: bool,
    grads: Gradients,
}

fn class_weights(params: &ParameterSet, loss: &DistillationConfig) -> Option<Matrix> {
    match loss.class_loss {
        ClassLoss::Softmax => None,
        ClassLoss::Asoftmax => Some(params.group(FC2).expect("fc2 always present").values[0].transpose()),
    }
}

/// Loss and gradients of one training item.
fn item_step(
    params: &ParameterSet,
    mask: Option<&TrainableMask>,
    loss: &DistillationConfig,
    weights: Option<&Matrix>,
    x: &FeatureSequence,
    label: usize,
    teacher: Option<&TeacherOutputs>,
) -> Result<ItemResult> {
    let trace = forward(params, x)?;
    let student = StudentOutputs { logits: &trace.logits, embedding: &trace.embedding, class_weights: weights };
    let (report, up) = composite_loss(loss, teacher, &student, label)?;
    let post = posterior_logits(loss.class_loss, &student)?;
    let best = (0..post.len()).max_by(|&a, &b| post[a].total_cmp(&post[b])).unwrap_or(0);
    let mut grads = params.zeros_like();
    backward(params, &trace, up.d_logits.as_deref(), Some(&up.d_embedding), &mut grads, mask)?;
    if let Some(dw) = up.d_class_weights {
        let i = params.index_of(FC2).expect("fc2 always present");
        if mask.is_none_or(|m| m.is_trainable(i)) {
            grads.groups[i][0].add_assign(&dw.transpose());
        }
    }
    Ok(ItemResult { terms: report.terms, total: report.total, correct: best == label, grads })
}

/// Mean gradient of a batch plus per-item results, reduced in item order.
fn batch_step(
    params: &ParameterSet,
    mask: Option<&TrainableMask>,
    loss: &DistillationConfig,
    items: &[(FeatureSequence, usize, Option<&TeacherOutputs>)],
) -> Result<(Gradients, Vec<ItemResult>)> {
    let weights = class_weights(params, loss);
    let mut results: Vec<ItemResult> = items
        .par_iter()
        .map(|(x, label, teacher)| item_step(params, mask, loss, weights.as_ref(), x, *label, *teacher))
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    for r in &mut results {
        total.add(&r.grads);
        r.grads = Gradients { groups: Vec::new() };
    }
    total.scale(1.0 / items.len() as f64);
    Ok((total, results))
}

/// Mean composite loss of a batch and its gradient, as used by every
/// training loop.
pub fn batch_objective(
    params: &ParameterSet,
    mask: Option<&TrainableMask>,
    loss: &DistillationConfig,
    items: &[(FeatureSequence, usize, Option<&TeacherOutputs>)],
) -> Result<(f64, Gradients)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (grads, results) = batch_step(params, mask, loss, items)?;
    let total: f64 = results.iter().map(|r| r.total).sum();
    Ok((total / items.len() as f64, grads))
}

#[derive(Default)]
struct EpochAccumulator {
    terms: BTreeMap<String, f64>,
    total: f64,
    correct: usize,
    n: usize,
}

impl EpochAccumulator {
    fn add(&mut self, results: &[ItemResult]) {
        for r in results {
            for (k, v) in &r.terms {
                *self.terms.entry((*k).to_string()).or_default() += v;
            }
            self.total += r.total;
            self.correct += usize::from(r.correct);
            self.n += 1;
        }
    }

    fn finish(self, epoch: usize, lr: f64, started: Instant) -> EpochLog {
        let n = self.n.max(1) as f64;
        EpochLog {
            epoch,
            terms: self.terms.into_iter().map(|(k, v)| (k, v / n)).collect(),
            task_loss: self.total / n,
            penalty: 0.0,
            accuracy: self.correct as f64 / n,
            lr,
            shared_distance: None,
            wall_seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn check_corpus(corpus: &Corpus, params: &ParameterSet) -> Result<Vec<usize>> {
    if corpus.n_speakers() < 2 {
        return Err(Error::InsufficientData("training needs at least 2 speakers".into()));
    }
    if corpus.feature_dim != params.config().input_dim {
        return Err(Error::DimensionMismatch(format!(
            "corpus has {} features, model expects {}",
            corpus.feature_dim,
            params.config().input_dim
        )));
    }
    let labels = corpus.labels();
    let n = corpus.n_speakers();
    if n != params.config().num_classes {
        return Err(Error::ConfigMismatch(format!(
            "corpus has {n} speakers, model has {} classes",
            params.config().num_classes
        )));
    }
    Ok(labels)
}

/// Random stream salts so the different loops never share draws.
const ORDER_SALT: u64 = 0x6f72_6465_7200_0000;
const CROP_SALT: u64 = 0x6372_6f70_0000_0000;
const INIT_SALT: u64 = 0x696e_6974_0000_0000;

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed ^ ORDER_SALT, epoch as u64).shuffle(&mut order);
    order
}

/// Crop drawn for utterance `u` on a given epoch; a pure function of
/// `(seed, epoch, u)` so different loss configurations see the same crops.
fn crop_rng(seed: u64, epoch: usize, u: usize, n: usize) -> Rng {
    Rng::stream(seed ^ CROP_SALT, (epoch * n + u) as u64)
}

/// Shared loop over epochs and mini-batches. `input(epoch, u)` yields the
/// network input for utterance `u`.
fn run_epochs<F>(
    mut params: ParameterSet,
    labels: &[usize],
    teacher: Option<&[TeacherOutputs]>,
    loss: &DistillationConfig,
    cfg: &TrainConfig,
    input: F,
) -> Result<TrainOutcome>
where
    F: Fn(usize, usize) -> Result<FeatureSequence> + Sync,
{
    cfg.validate()?;
    loss.validate()?;
    let n = labels.len();
    let build = |epoch: usize, ids: &[usize]| -> Result<Vec<(FeatureSequence, usize, Option<&TeacherOutputs>)>> {
        ids.iter().map(|&u| Ok((input(epoch, u)?, labels[u], teacher.map(|t| &t[u])))).collect()
    };

    let mut initial = EpochAccumulator::default();
    for chunk in (0..n).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let (_, res) = batch_step(&params, None, loss, &build(0, chunk)?)?;
        initial.add(&res);
    }
    let initial_loss = initial.total / n as f64;

    let mut opt = OptimizerState::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut acc = EpochAccumulator::default();
        let mut lr = 0.0;
        for chunk in epoch_order(cfg.seed, epoch, n).chunks(cfg.batch_size) {
            let (grads, res) = batch_step(&params, None, loss, &build(epoch, chunk)?)?;
            acc.add(&res);
            lr = cfg.schedule.lr(opt.step() + 1)?;
            adam_step(&mut opt, &mut params, &grads, lr)?;
        }
        history.push(acc.finish(epoch + 1, lr, started));
    }
    Ok(TrainOutcome { params, initial_loss, history })
}

/// Trains a fresh network on whole utterances.
pub fn train_teacher(
    corpus: &Corpus,
    encoder: EncoderConfig,
    loss: &DistillationConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if loss.needs_teacher() {
        return Err(Error::InvalidArgument("teacher training takes the classification loss only".into()));
    }
    let params = ParameterSet::init(encoder, &mut Rng::stream(cfg.seed ^ INIT_SALT, 0))?;
    let labels = check_corpus(corpus, &params)?;
    run_epochs(params, &labels, None, loss, cfg, |_, u| Ok(corpus.utterances[u].features.clone()))
}

/// Trains a fresh network on random fixed-length crops, the short-utterance
/// baseline. Utterances shorter than the crop are used whole.
pub fn train_baseline(
    corpus: &Corpus,
    encoder: EncoderConfig,
    loss: &DistillationConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if loss.needs_teacher() {
        return Err(Error::InvalidArgument("baseline training takes the classification loss only".into()));
    }
    let params = ParameterSet::init(encoder, &mut Rng::stream(cfg.seed ^ INIT_SALT, 0))?;
    let labels = check_corpus(corpus, &params)?;
    let n = corpus.len();
    run_epochs(params, &labels, None, loss, cfg, |epoch, u| {
        Ok(crop_or_whole(&corpus.utterances[u], cfg.crop_frames, &mut crop_rng(cfg.seed, epoch, u, n)))
    })
}

/// Teacher outputs on whole utterances, computed once; the teacher is only
/// read.
pub fn teacher_outputs(
    teacher: &ParameterSet,
    corpus: &Corpus,
    loss: &DistillationConfig,
) -> Result<Vec<TeacherOutputs>> {
    let weights = class_weights(teacher, loss);
    corpus
        .utterances
        .par_iter()
        .map(|u| {
            let trace = forward(teacher, &u.features)?;
            let s =
                StudentOutputs { logits: &trace.logits, embedding: &trace.embedding, class_weights: weights.as_ref() };
            let logits = posterior_logits(loss.class_loss, &s)?;
            Ok(TeacherOutputs { logits, embedding: trace.embedding })
        })
        .collect()
}

/// Teacher-student training. The student starts as a copy of the teacher;
/// each item pairs the teacher's output on the whole utterance with the
/// student's input, a random crop of `cfg.crop_frames` frames.
pub fn train_student(
    teacher: &ParameterSet,
    corpus: &Corpus,
    loss: &DistillationConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let labels = check_corpus(corpus, teacher)?;
    for u in &corpus.utterances {
        if u.frames() < cfg.crop_frames {
            return Err(Error::CropTooLong { requested: cfg.crop_frames, available: u.frames() });
        }
    }
    let cached = if loss.needs_teacher() { Some(teacher_outputs(teacher, corpus, loss)?) } else { None };
    let n = corpus.len();
    run_epochs(teacher.clone(), &labels, cached.as_deref(), loss, cfg, |epoch, u| {
        crop(&corpus.utterances[u], cfg.crop_frames, &mut crop_rng(cfg.seed, epoch, u, n))
    })
}

/// Start-point fine-tuning on a target corpus. The classifier is replaced
/// for the target speakers, the reference is taken before any update, and
/// only the selected groups move.
pub fn finetune(start: &ParameterSet, corpus: &Corpus, cfg: &FineTuneConfig) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    let n_spk = corpus.n_speakers();
    let mut params = replace_classifier(start, n_spk, &mut Rng::stream(cfg.seed ^ INIT_SALT, 1))?;
    let labels = check_corpus(corpus, &params)?;
    let mask = select_groups(&params, cfg.selection);
    let reference = SpReference::for_model(params.snapshot(), &params, &mask)?;
    let alpha = cfg.effective_alpha();
    let n = corpus.len();

    let base_lrs: Vec<f64> = params
        .groups()
        .iter()
        .enumerate()
        .map(|(i, g)| match (mask.is_trainable(i), g.replaced) {
            (false, _) => 0.0,
            (true, true) => cfg.lr_replaced,
            (true, false) => cfg.lr_rest,
        })
        .collect();

    let mut opt = OptimizerState::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lrs: Vec<f64> = base_lrs.iter().map(|lr| lr * cfg.decay(epoch)).collect();
        let mut acc = EpochAccumulator::default();
        let mut pen = 0.0;
        for chunk in epoch_order(cfg.seed, epoch, n).chunks(cfg.batch_size) {
            let items: Vec<_> = chunk
                .iter()
                .map(|&u| {
                    let x = crop_or_whole(&corpus.utterances[u], cfg.crop_frames, &mut crop_rng(cfg.seed, epoch, u, n));
                    (x, labels[u], None)
                })
                .collect();
            let (mut grads, res) = batch_step(&params, Some(&mask), &cfg.loss, &items)?;
            acc.add(&res);
            let p =
                penalty(cfg.regularizer, &params, Some(&mask), Some(&reference), alpha, cfg.beta, cfg.include_biases)?;
            grads.add(&p.grads);
            pen = p.value;
            adam_step_groups(&mut opt, &mut params, &grads, &lrs)?;
        }
        let lr = lrs.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
        let mut log = acc.finish(epoch + 1, lr, started);
        log.penalty = pen;
        log.shared_distance = Some(reference.shared_distance(&params)?);
        history.push(log);
    }
    Ok(FineTuneOutcome { params, reference, history })
}
