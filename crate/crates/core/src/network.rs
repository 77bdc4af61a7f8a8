//! Speaker-embedding network: a stack of frame-context encoder blocks, a
//! temporal pooling layer (mean or learnable dictionary encoding) and two
//! fully-connected layers, with a hand-written backward pass.
//!
//! Parameter groups, in order:
//!
//! | group         | tensors                                   |
//! |---------------|-------------------------------------------|
//! | `enc.block{k}`| `W: (context·in) × out`, `b: 1 × out`      |
//! | `pool.lde`    | `means: C × H`, `log_scales: 1 × C`        |
//! | `fc1`         | `W: pooled × E`, `b: 1 × E`                |
//! | `fc2`         | `W: E × classes`, `b: 1 × classes`         |
//!
//! `pool.lde` only exists for LDE pooling. All nonlinearities are `tanh`.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::binio::{put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::{axpy, gaussian_draw, gemm_acc, gemm_nt, gemm_tn_acc, Matrix, Rng};

/// `T × D` frame-level features of one utterance.
pub type FeatureSequence = Matrix;

/// Added to the soft-assignment mass of each LDE component.
pub const LDE_DELTA: f64 = 1e-8;

pub const FC1: &str = "fc1";
pub const FC2: &str = "fc2";
pub const POOL_LDE: &str = "pool.lde";

pub fn block_name(k: usize) -> String {
    format!("enc.block{}", k + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Lde,
}

/// Where the speaker embedding is read from `fc1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTap {
    PostActivation,
    PreActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub block_widths: Vec<usize>,
    pub conv_context: usize,
    pub pooling: Pooling,
    pub lde_components: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub embedding_tap: EmbeddingTap,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 30,
            block_widths: vec![32, 32, 32],
            conv_context: 3,
            pooling: Pooling::Lde,
            lde_components: 4,
            embedding_dim: 32,
            num_classes: 200,
            embedding_tap: EmbeddingTap::PostActivation,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("encoder config: {m}")));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return bad("need at least one block and positive widths");
        }
        if self.conv_context == 0 || self.conv_context.is_multiple_of(2) {
            return bad("conv_context must be odd");
        }
        if self.pooling == Pooling::Lde && self.lde_components == 0 {
            return bad("lde_components must be >= 1");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        Ok(())
    }

    pub fn top_width(&self) -> usize {
        *self.block_widths.last().expect("validated config has blocks")
    }

    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.top_width(),
            Pooling::Lde => self.lde_components * self.top_width(),
        }
    }

    fn layer_shapes(&self) -> Vec<(String, Vec<(usize, usize)>)> {
        let mut out = Vec::new();
        let mut width = self.input_dim;
        for (k, &w) in self.block_widths.iter().enumerate() {
            out.push((block_name(k), vec![(self.conv_context * width, w), (1, w)]));
            width = w;
        }
        if self.pooling == Pooling::Lde {
            out.push((POOL_LDE.to_string(), vec![(self.lde_components, width), (1, self.lde_components)]));
        }
        out.push((FC1.to_string(), vec![(self.pooled_dim(), self.embedding_dim), (1, self.embedding_dim)]));
        out.push((FC2.to_string(), vec![(self.embedding_dim, self.num_classes), (1, self.num_classes)]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<Matrix>,
    pub grads: Vec<Matrix>,
    /// Set on a group re-initialized by [`replace_classifier`].
    pub replaced: bool,
}

/// Gradient buffers shaped like a [`ParameterSet`], for per-worker accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub groups: Vec<Vec<Matrix>>,
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.groups.iter_mut().flatten().for_each(|m| m.scale(k));
    }

    pub fn is_zero(&self) -> bool {
        self.groups.iter().flatten().all(|m| m.as_slice().iter().all(|&v| v == 0.0))
    }
}

/// Named parameter groups with values and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    config: EncoderConfig,
    groups: Vec<ParamGroup>,
}

/// Immutable copy of a parameter set, used as a start-point reference.
#[derive(Clone, Debug)]
pub struct Snapshot(Arc<ParameterSet>);

impl std::ops::Deref for Snapshot {
    type Target = ParameterSet;
    fn deref(&self) -> &ParameterSet {
        &self.0
    }
}

fn fresh_tensors(shapes: &[(usize, usize)], fan_in_layer: bool, rng: &mut Rng) -> Vec<Matrix> {
    // first tensor is a weight matrix scaled by 1/sqrt(fan-in); the rest start at zero
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            if i == 0 && fan_in_layer {
                gaussian_draw(rng, 0.0, 1.0 / (r as f64).sqrt(), r, c).expect("nonnegative std")
            } else {
                Matrix::zeros(r, c)
            }
        })
        .collect()
}

impl ParameterSet {
    /// Seeded initialization: zero biases, weights `N(0, 1/fan_in)`,
    /// LDE dictionary means `N(0, 0.5²)` and unit scales.
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let groups = config
            .layer_shapes()
            .into_iter()
            .map(|(name, shapes)| {
                let values = if name == POOL_LDE {
                    let (c, h) = shapes[0];
                    vec![gaussian_draw(rng, 0.0, 0.5, c, h).expect("std"), Matrix::zeros(1, c)]
                } else {
                    fresh_tensors(&shapes, true, rng)
                };
                let grads = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
                ParamGroup { name, values, grads, replaced: false }
            })
            .collect();
        Ok(Self { config, groups })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.values).map(|m| m.as_slice().len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            groups: self
                .groups
                .iter()
                .map(|g| g.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
                .collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.groups.iter_mut().flat_map(|g| &mut g.grads).for_each(|m| m.fill(0.0));
    }

    /// Adds a gradient buffer into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (g, src) in self.groups.iter_mut().zip(&grads.groups) {
            for (dst, s) in g.grads.iter_mut().zip(src) {
                dst.add_assign(s);
            }
        }
    }

    pub fn gradients(&self) -> Gradients {
        Gradients { groups: self.groups.iter().map(|g| g.grads.clone()).collect() }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }

    /// Bitwise equality of all parameter values (gradients ignored).
    pub fn values_identical(&self, other: &ParameterSet) -> bool {
        self.config == other.config
            && self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.name == b.name
                    && a.values.len() == b.values.len()
                    && a.values.iter().zip(&b.values).all(|(x, y)| {
                        x.shape() == y.shape()
                            && x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
                    })
            })
    }

    /// Flat views over every parameter value, group by group.
    pub fn flat_values(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| &g.values).flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut out, MODEL_VERSION);
        encode_config(&self.config, &mut out);
        put_len(&mut out, self.groups.len());
        for g in &self.groups {
            put_len(&mut out, g.name.len());
            out.extend_from_slice(g.name.as_bytes());
            out.push(u8::from(g.replaced));
            put_len(&mut out, g.values.len());
            for m in &g.values {
                put_len(&mut out, m.rows());
                put_len(&mut out, m.cols());
                for v in m.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model file");
        if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let config = decode_config(&mut r)?;
        config.validate().map_err(|e| r.corrupt(e))?;
        let expected = config.layer_shapes();
        let n_groups = r.u32()? as usize;
        if n_groups != expected.len() {
            return Err(r.corrupt(format!("{n_groups} groups, config implies {}", expected.len())));
        }
        let mut groups = Vec::with_capacity(n_groups);
        for (name_want, shapes) in expected {
            let name_len = r.u32()? as usize;
            let name =
                std::str::from_utf8(r.take(name_len)?).map_err(|_| r.corrupt("group name is not utf-8"))?.to_string();
            if name != name_want {
                return Err(r.corrupt(format!("group `{name}` where `{name_want}` expected")));
            }
            let replaced = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(r.corrupt(format!("bad flag {b}"))),
            };
            let n_tensors = r.u32()? as usize;
            if n_tensors != shapes.len() {
                return Err(r.corrupt(format!("group `{name}` has {n_tensors} tensors")));
            }
            let mut values = Vec::with_capacity(n_tensors);
            for &(rows, cols) in &shapes {
                let (fr, fc) = (r.u32()? as usize, r.u32()? as usize);
                if (fr, fc) != (rows, cols) {
                    return Err(r.corrupt(format!("group `{name}` tensor {fr}x{fc}, expected {rows}x{cols}")));
                }
                let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                values.push(Matrix::from_vec(rows, cols, data)?);
            }
            let grads = shapes.iter().map(|&(a, b)| Matrix::zeros(a, b)).collect();
            groups.push(ParamGroup { name, values, grads, replaced });
        }
        if !r.is_empty() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Self { config, groups })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a model file whatever its configuration.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a model file and checks it was built with `expected`.
    pub fn load(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Self> {
        let p = Self::load_any(path)?;
        if p.config != *expected {
            return Err(Error::ConfigMismatch(format!("model file has {:?}, caller expects {:?}", p.config, expected)));
        }
        Ok(p)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"SPKDMDL\0";
const MODEL_VERSION: u32 = 1;

fn encode_config(c: &EncoderConfig, out: &mut Vec<u8>) {
    put_len(out, c.input_dim);
    put_len(out, c.block_widths.len());
    for &w in &c.block_widths {
        put_len(out, w);
    }
    put_len(out, c.conv_context);
    out.push(match c.pooling {
        Pooling::Mean => 0,
        Pooling::Lde => 1,
    });
    put_len(out, c.lde_components);
    put_len(out, c.embedding_dim);
    put_len(out, c.num_classes);
    out.push(match c.embedding_tap {
        EmbeddingTap::PostActivation => 0,
        EmbeddingTap::PreActivation => 1,
    });
}

fn decode_config(r: &mut Reader<'_>) -> Result<EncoderConfig> {
    let input_dim = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    if n_blocks > 1024 {
        return Err(r.corrupt(format!("implausible block count {n_blocks}")));
    }
    let block_widths = (0..n_blocks).map(|_| r.u32().map(|w| w as usize)).collect::<Result<_>>()?;
    let conv_context = r.u32()? as usize;
    let pooling = match r.u8()? {
        0 => Pooling::Mean,
        1 => Pooling::Lde,
        b => return Err(r.corrupt(format!("bad pooling tag {b}"))),
    };
    let lde_components = r.u32()? as usize;
    let embedding_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let embedding_tap = match r.u8()? {
        0 => EmbeddingTap::PostActivation,
        1 => EmbeddingTap::PreActivation,
        b => return Err(r.corrupt(format!("bad embedding tap {b}"))),
    };
    Ok(EncoderConfig {
        input_dim,
        block_widths,
        conv_context,
        pooling,
        lde_components,
        embedding_dim,
        num_classes,
        embedding_tap,
    })
}

/// Layer selections for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerSelection {
    #[serde(rename = "last2fc")]
    Last2Fc,
    #[serde(rename = "last2fc+pool+lastblock")]
    Last2FcPoolLastBlock,
    #[serde(rename = "all")]
    All,
}

impl LayerSelection {
    pub const ALL: [LayerSelection; 3] = [Self::Last2Fc, Self::Last2FcPoolLastBlock, Self::All];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Last2Fc => "last2fc",
            Self::Last2FcPoolLastBlock => "last2fc+pool+lastblock",
            Self::All => "all",
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last2fc" => Ok(Self::Last2Fc),
            "last2fc+pool+lastblock" => Ok(Self::Last2FcPoolLastBlock),
            "all" => Ok(Self::All),
            other => Err(Error::UnknownSelection(other.to_string())),
        }
    }
}

impl std::fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-group trainable flags, aligned with [`ParameterSet::groups`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask(pub Vec<bool>);

impl TrainableMask {
    pub fn all(params: &ParameterSet) -> Self {
        Self(vec![true; params.groups.len()])
    }

    #[inline]
    pub fn is_trainable(&self, group: usize) -> bool {
        self.0[group]
    }

    pub fn trainable_names<'a>(&self, params: &'a ParameterSet) -> Vec<&'a str> {
        params.groups.iter().zip(&self.0).filter(|(_, &t)| t).map(|(g, _)| g.name.as_str()).collect()
    }
}

pub fn select_groups(params: &ParameterSet, selection: LayerSelection) -> TrainableMask {
    let last_block = block_name(params.config.block_widths.len() - 1);
    let wanted = |name: &str| match selection {
        LayerSelection::All => true,
        LayerSelection::Last2Fc => name == FC1 || name == FC2,
        LayerSelection::Last2FcPoolLastBlock => name == FC1 || name == FC2 || name == POOL_LDE || name == last_block,
    };
    TrainableMask(params.groups.iter().map(|g| wanted(&g.name)).collect())
}

/// Re-initializes `fc2` for `new_num_classes` speakers, keeping every other
/// group bit for bit. The new group is flagged as replaced.
pub fn replace_classifier(params: &ParameterSet, new_num_classes: usize, rng: &mut Rng) -> Result<ParameterSet> {
    if new_num_classes < 2 {
        return Err(Error::InvalidArgument(format!("classifier needs >= 2 classes, got {new_num_classes}")));
    }
    let mut out = params.clone();
    out.config.num_classes = new_num_classes;
    let e = out.config.embedding_dim;
    let fc2 = out.group_mut(FC2).expect("fc2 always present");
    fc2.values = fresh_tensors(&[(e, new_num_classes), (1, new_num_classes)], true, rng);
    fc2.grads = vec![Matrix::zeros(e, new_num_classes), Matrix::zeros(1, new_num_classes)];
    fc2.replaced = true;
    Ok(out)
}

#[derive(Clone, Debug)]
struct BlockTrace {
    /// `T × (context·in)` stacked input
    stacked: Matrix,
    /// `T × out` post-activation
    output: Matrix,
}

#[derive(Clone, Debug)]
struct LdeTrace {
    /// `T × C` soft assignments
    weights: Matrix,
    /// `T × C` squared distances
    sq_dist: Matrix,
    /// `C` assignment mass plus δ
    denom: Vec<f64>,
    /// `C × H` component residuals
    residuals: Matrix,
    scales: Vec<f64>,
}

/// Everything retained by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    config: EncoderConfig,
    input_dim: usize,
    blocks: Vec<BlockTrace>,
    lde: Option<LdeTrace>,
    pooled: Vec<f64>,
    /// fc1 output after tanh
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl ForwardTrace {
    pub fn frames(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.output.rows())
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Input of the classifier layer.
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    /// LDE soft assignments (`T × C`), when LDE pooling is used.
    pub fn lde_weights(&self) -> Option<&Matrix> {
        self.lde.as_ref().map(|l| &l.weights)
    }
}

fn stack_context(x: &Matrix, context: usize) -> Matrix {
    let (t, d) = x.shape();
    let radius = (context / 2) as isize;
    let mut out = Matrix::zeros(t, context * d);
    for i in 0..t {
        let row = out.row_mut(i);
        for (o, off) in (-radius..=radius).enumerate() {
            let src = (i as isize + off).clamp(0, t as isize - 1) as usize;
            row[o * d..(o + 1) * d].copy_from_slice(x.row(src));
        }
    }
    out
}

fn unstack_context(d_stacked: &Matrix, context: usize, d: usize) -> Matrix {
    let t = d_stacked.rows();
    let radius = (context / 2) as isize;
    let mut out = Matrix::zeros(t, d);
    for i in 0..t {
        let row = d_stacked.row(i);
        for (o, off) in (-radius..=radius).enumerate() {
            let dst = (i as isize + off).clamp(0, t as isize - 1) as usize;
            axpy(1.0, &row[o * d..(o + 1) * d], out.row_mut(dst));
        }
    }
    out
}

fn lde_forward(frames: &Matrix, means: &Matrix, scales: &[f64]) -> (Vec<f64>, LdeTrace) {
    let (t, h) = frames.shape();
    let c = means.rows();
    let mut weights = Matrix::zeros(t, c);
    let mut sq_dist = Matrix::zeros(t, c);
    let mut logit = vec![0.0; c];
    for i in 0..t {
        let x = frames.row(i);
        for k in 0..c {
            let d: f64 = x.iter().zip(means.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
            sq_dist[(i, k)] = d;
            logit[k] = -scales[k] * d;
        }
        let max = logit.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..c {
            let e = (logit[k] - max).exp();
            weights[(i, k)] = e;
            total += e;
        }
        for k in 0..c {
            weights[(i, k)] /= total;
        }
    }
    let mut residuals = Matrix::zeros(c, h);
    let mut denom = vec![LDE_DELTA; c];
    for i in 0..t {
        let x = frames.row(i);
        for k in 0..c {
            let w = weights[(i, k)];
            denom[k] += w;
            let mu = means.row(k);
            let r = residuals.row_mut(k);
            for j in 0..h {
                r[j] += w * (x[j] - mu[j]);
            }
        }
    }
    for k in 0..c {
        residuals.row_mut(k).iter_mut().for_each(|v| *v /= denom[k]);
    }
    let pooled = residuals.as_slice().to_vec();
    (pooled, LdeTrace { weights, sq_dist, denom, residuals, scales: scales.to_vec() })
}

/// Learnable dictionary encoding of `frames` (`T × H`) against `means`
/// (`C × H`) with positive `scales`; returns the `C·H` concatenated residuals.
pub fn lde_pool(frames: &Matrix, means: &Matrix, scales: &[f64]) -> Result<Vec<f64>> {
    if means.rows() == 0 {
        return Err(Error::InvalidArgument("LDE needs at least one component".into()));
    }
    if means.cols() != frames.cols() || scales.len() != means.rows() {
        return Err(Error::DimensionMismatch(format!(
            "LDE frames {:?}, means {:?}, {} scales",
            frames.shape(),
            means.shape(),
            scales.len()
        )));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("LDE scale must be positive, got {s}")));
    }
    if frames.rows() == 0 {
        return Err(Error::SequenceTooShort { frames: 0, required: 1 });
    }
    Ok(lde_forward(frames, means, scales).0)
}

fn tanh_in_place(m: &mut [f64]) {
    m.iter_mut().for_each(|v| *v = v.tanh());
}

/// Runs the network on one utterance.
pub fn forward(params: &ParameterSet, x: &FeatureSequence) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if x.cols() != cfg.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, model expects {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    if x.rows() < cfg.conv_context {
        return Err(Error::SequenceTooShort { frames: x.rows(), required: cfg.conv_context });
    }
    let groups = &params.groups;
    let mut blocks = Vec::with_capacity(cfg.block_widths.len());
    let mut current = x.clone();
    for (k, &w) in cfg.block_widths.iter().enumerate() {
        let g = &groups[k];
        let stacked = stack_context(&current, cfg.conv_context);
        let mut out = Matrix::zeros(stacked.rows(), w);
        let bias = g.values[1].row(0);
        for i in 0..out.rows() {
            out.row_mut(i).copy_from_slice(bias);
        }
        gemm_acc(&stacked, &g.values[0], &mut out);
        tanh_in_place(out.as_mut_slice());
        current = out.clone();
        blocks.push(BlockTrace { stacked, output: out });
    }

    let mut next = cfg.block_widths.len();
    let (pooled, lde) = match cfg.pooling {
        Pooling::Mean => {
            let t = current.rows() as f64;
            let mut m = vec![0.0; current.cols()];
            for i in 0..current.rows() {
                axpy(1.0, current.row(i), &mut m);
            }
            m.iter_mut().for_each(|v| *v /= t);
            (m, None)
        }
        Pooling::Lde => {
            let g = &groups[next];
            next += 1;
            let scales: Vec<f64> = g.values[1].row(0).iter().map(|l| l.exp()).collect();
            let (p, tr) = lde_forward(&current, &g.values[0], &scales);
            (p, Some(tr))
        }
    };

    let fc1 = &groups[next];
    let mut fc1_pre = fc1.values[1].row(0).to_vec();
    for (j, v) in fc1.values[0].vecmat(&pooled).into_iter().enumerate() {
        fc1_pre[j] += v;
    }
    let mut hidden = fc1_pre.clone();
    tanh_in_place(&mut hidden);

    let fc2 = &groups[next + 1];
    let mut logits = fc2.values[1].row(0).to_vec();
    for (j, v) in fc2.values[0].vecmat(&hidden).into_iter().enumerate() {
        logits[j] += v;
    }
    let embedding = match cfg.embedding_tap {
        EmbeddingTap::PostActivation => hidden.clone(),
        EmbeddingTap::PreActivation => fc1_pre.clone(),
    };
    Ok(ForwardTrace { config: cfg.clone(), input_dim: x.cols(), blocks, lde, pooled, hidden, logits, embedding })
}

/// Back-propagates upstream gradients on the logits and on the embedding
/// into `grads`. Groups not marked trainable in `mask` receive nothing, and
/// back-propagation stops below the lowest trainable group.
pub fn backward(
    params: &ParameterSet,
    trace: &ForwardTrace,
    d_logits: Option<&[f64]>,
    d_embedding: Option<&[f64]>,
    grads: &mut Gradients,
    mask: Option<&TrainableMask>,
) -> Result<()> {
    let cfg = &params.config;
    if trace.config != *cfg || trace.input_dim != cfg.input_dim {
        return Err(Error::DimensionMismatch("trace was produced by a different network".into()));
    }
    if grads.groups.len() != params.groups.len() {
        return Err(Error::DimensionMismatch("gradient buffer does not match parameters".into()));
    }
    if d_logits.is_some_and(|d| d.len() != cfg.num_classes) {
        return Err(Error::DimensionMismatch("d_logits length".into()));
    }
    if d_embedding.is_some_and(|d| d.len() != cfg.embedding_dim) {
        return Err(Error::DimensionMismatch("d_embedding length".into()));
    }
    let trainable = |i: usize| mask.is_none_or(|m| m.is_trainable(i));
    let n_groups = params.groups.len();
    let lowest = (0..n_groups).find(|&i| trainable(i)).unwrap_or(n_groups);
    let fc2_idx = n_groups - 1;
    let fc1_idx = n_groups - 2;

    // classifier
    let mut d_hidden = vec![0.0; cfg.embedding_dim];
    if let Some(dl) = d_logits {
        let w = &params.groups[fc2_idx].values[0];
        if trainable(fc2_idx) {
            let g = &mut grads.groups[fc2_idx];
            for (i, &h) in trace.hidden.iter().enumerate() {
                if h != 0.0 {
                    axpy(h, dl, g[0].row_mut(i));
                }
            }
            axpy(1.0, dl, g[1].row_mut(0));
        }
        d_hidden = w.matvec(dl);
    }
    if lowest > fc1_idx {
        return Ok(());
    }

    let mut d_pre = vec![0.0; cfg.embedding_dim];
    if let (EmbeddingTap::PostActivation, Some(de)) = (cfg.embedding_tap, d_embedding) {
        axpy(1.0, de, &mut d_hidden);
    }
    for j in 0..d_pre.len() {
        d_pre[j] = d_hidden[j] * (1.0 - trace.hidden[j] * trace.hidden[j]);
    }
    if let (EmbeddingTap::PreActivation, Some(de)) = (cfg.embedding_tap, d_embedding) {
        axpy(1.0, de, &mut d_pre);
    }

    let fc1_w = &params.groups[fc1_idx].values[0];
    if trainable(fc1_idx) {
        let g = &mut grads.groups[fc1_idx];
        for (i, &p) in trace.pooled.iter().enumerate() {
            if p != 0.0 {
                axpy(p, &d_pre, g[0].row_mut(i));
            }
        }
        axpy(1.0, &d_pre, g[1].row_mut(0));
    }
    if lowest >= fc1_idx {
        return Ok(());
    }
    let d_pooled = fc1_w.matvec(&d_pre);

    let n_blocks = cfg.block_widths.len();
    let top = &trace.blocks[n_blocks - 1].output;
    let (t, h) = top.shape();
    let mut d_top = Matrix::zeros(t, h);
    match (&trace.lde, cfg.pooling) {
        (None, Pooling::Mean) => {
            let inv = 1.0 / t as f64;
            for i in 0..t {
                axpy(inv, &d_pooled, d_top.row_mut(i));
            }
        }
        (Some(lde), Pooling::Lde) => {
            let pool_idx = n_blocks;
            let means = &params.groups[pool_idx].values[0];
            let c = means.rows();
            let mut d_means = Matrix::zeros(c, h);
            let mut d_log_scales = vec![0.0; c];
            // g_k / (W_k + δ) per component
            let mut g_scaled = Matrix::zeros(c, h);
            for k in 0..c {
                let g = &d_pooled[k * h..(k + 1) * h];
                let row = g_scaled.row_mut(k);
                for j in 0..h {
                    row[j] = g[j] / lde.denom[k];
                }
            }
            let ge: Vec<f64> =
                (0..c).map(|k| g_scaled.row(k).iter().zip(lde.residuals.row(k)).map(|(a, b)| a * b).sum()).collect();
            let mut q = vec![0.0; c];
            let mut diff = vec![0.0; h];
            for i in 0..t {
                let x = top.row(i);
                // dL/dw_ik
                for k in 0..c {
                    let gs = g_scaled.row(k);
                    let mu = means.row(k);
                    let gx: f64 = (0..h).map(|j| gs[j] * (x[j] - mu[j])).sum();
                    q[k] = gx - ge[k];
                }
                let wq: f64 = (0..c).map(|k| lde.weights[(i, k)] * q[k]).sum();
                let d_row = d_top.row_mut(i);
                for k in 0..c {
                    let w = lde.weights[(i, k)];
                    let gs = g_scaled.row(k);
                    let mu = means.row(k);
                    // direct path through the weighted residual sum
                    for j in 0..h {
                        d_row[j] += w * gs[j];
                    }
                    let d_logit = w * (q[k] - wq);
                    if d_logit == 0.0 {
                        continue;
                    }
                    let s = lde.scales[k];
                    d_log_scales[k] -= d_logit * lde.sq_dist[(i, k)] * s;
                    for j in 0..h {
                        diff[j] = x[j] - mu[j];
                    }
                    let coef = -2.0 * s * d_logit;
                    axpy(coef, &diff, d_row);
                    axpy(-coef, &diff, d_means.row_mut(k));
                }
            }
            for k in 0..c {
                // direct path: −Σ_t w_tk g_k / (W_k + δ)
                let mass = lde.denom[k] - LDE_DELTA;
                axpy(-mass, g_scaled.row(k), d_means.row_mut(k));
            }
            if trainable(pool_idx) {
                let g = &mut grads.groups[pool_idx];
                g[0].add_assign(&d_means);
                axpy(1.0, &d_log_scales, g[1].row_mut(0));
            }
        }
        _ => unreachable!("trace pooling matches config"),
    }

    let mut d_out = d_top;
    for k in (0..n_blocks).rev() {
        if lowest > k {
            break;
        }
        let bt = &trace.blocks[k];
        let mut dz = d_out;
        for (d, y) in dz.as_mut_slice().iter_mut().zip(bt.output.as_slice()) {
            *d *= 1.0 - y * y;
        }
        if trainable(k) {
            let g = &mut grads.groups[k];
            gemm_tn_acc(&bt.stacked, &dz, &mut g[0]);
            let b = g[1].row_mut(0);
            for i in 0..dz.rows() {
                axpy(1.0, dz.row(i), b);
            }
        }
        if k == 0 || lowest >= k {
            break;
        }
        let d_stacked = gemm_nt(&dz, &params.groups[k].values[0]);
        let in_dim = cfg.block_widths[k - 1];
        d_out = unstack_context(&d_stacked, cfg.conv_context, in_dim);
    }
    Ok(())
}
