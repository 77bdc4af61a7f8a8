//! Training objectives. Each loss returns its value together with the
//! gradient it sends upstream.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, log_softmax, norm, softmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLoss {
    Softmax,
    Asoftmax,
}

/// Which terms of the student objective are active, and their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    pub class_loss: ClassLoss,
    pub asoftmax_margin: u32,
    pub use_kld: bool,
    pub use_emd: bool,
    pub weight_class: f64,
    pub weight_kld: f64,
    pub weight_emd: f64,
    /// Softening temperature for the posterior term. `1.0` reproduces the
    /// plain teacher-posterior cross-entropy; other values are an extension.
    pub temperature: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            class_loss: ClassLoss::Softmax,
            asoftmax_margin: 2,
            use_kld: true,
            use_emd: true,
            weight_class: 1.0,
            weight_kld: 1.0,
            weight_emd: 1.0,
            temperature: 1.0,
        }
    }
}

impl DistillationConfig {
    /// Classification loss only.
    pub fn class_only(class_loss: ClassLoss) -> Self {
        Self { class_loss, use_kld: false, use_emd: false, ..Self::default() }
    }

    pub fn with_terms(class_loss: ClassLoss, use_kld: bool, use_emd: bool) -> Self {
        Self { class_loss, use_kld, use_emd, ..Self::default() }
    }

    pub fn class_active(&self) -> bool {
        self.weight_class > 0.0
    }

    pub fn needs_teacher(&self) -> bool {
        self.use_kld || self.use_emd
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("distillation config: {m}")));
        if !(self.class_active() || self.use_kld || self.use_emd) {
            return bad("no active loss term".into());
        }
        if self.asoftmax_margin < 1 {
            return bad("A-softmax margin must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, w) in [("class", self.weight_class), ("kld", self.weight_kld), ("emd", self.weight_emd)] {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(format!("weight_{name} must be a nonnegative number"));
            }
        }
        Ok(())
    }

    /// Short label like `class+kld+emd`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.class_active() {
            parts.push("class");
        }
        if self.use_kld {
            parts.push("kld");
        }
        if self.use_emd {
            parts.push("emd");
        }
        parts.join("+")
    }
}

/// Loss total and the unweighted value of each active term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<&'static str, f64>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

/// `(value, ∂value/∂logits)` of softmax cross-entropy.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    let value = -log_softmax(logits)[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((value, grad))
}

/// Chebyshev polynomials `T_m(c)` and `U_{m−1}(c)`.
fn chebyshev(m: u32, c: f64) -> (f64, f64) {
    let (mut t_prev, mut t) = (1.0, c);
    let (mut u_prev, mut u) = (0.0, 1.0);
    if m == 0 {
        return (1.0, 0.0);
    }
    for _ in 1..m {
        let t_next = 2.0 * c * t - t_prev;
        let u_next = 2.0 * c * u - u_prev;
        t_prev = t;
        t = t_next;
        u_prev = u;
        u = u_next;
    }
    (t, u)
}

/// Monotone angular margin function `ψ(θ) = (−1)^k cos(mθ) − 2k` for
/// `θ ∈ [kπ/m, (k+1)π/m]`, expressed through `c = cos θ`.
/// Returns `(ψ, dψ/dc)`.
pub fn margin_psi(c: f64, m: u32) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = ((f64::from(m) * theta / std::f64::consts::PI).floor() as u32).min(m - 1);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    let (t_m, u_m1) = chebyshev(m, c);
    (sign * t_m - 2.0 * f64::from(k), sign * f64::from(m) * u_m1)
}

/// Class logits `ŵ_j · x` against unit-normalized class weight rows.
pub fn cosine_logits(class_weights: &Matrix, embedding: &[f64]) -> Result<Vec<f64>> {
    if class_weights.cols() != embedding.len() {
        return Err(Error::DimensionMismatch(format!(
            "class weights {:?} vs embedding {}",
            class_weights.shape(),
            embedding.len()
        )));
    }
    (0..class_weights.rows())
        .map(|j| {
            let w = class_weights.row(j);
            let n = norm(w);
            if n == 0.0 {
                return Err(Error::ZeroNorm("class weight row"));
            }
            Ok(dot(w, embedding) / n)
        })
        .collect()
}

/// Backward of [`cosine_logits`]: accumulates into `d_weights` and returns `d_embedding`.
fn cosine_logits_backward(
    class_weights: &Matrix,
    embedding: &[f64],
    d_logits: &[f64],
    d_weights: &mut Matrix,
) -> Vec<f64> {
    let mut d_emb = vec![0.0; embedding.len()];
    for (j, &d) in d_logits.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let w = class_weights.row(j);
        let n = norm(w);
        let proj = dot(w, embedding) / (n * n);
        axpy(d / n, w, &mut d_emb);
        let row = d_weights.row_mut(j);
        for i in 0..w.len() {
            row[i] += d * (embedding[i] - proj * w[i]) / n;
        }
    }
    d_emb
}

#[derive(Clone, Debug)]
pub struct AsoftmaxOutput {
    pub value: f64,
    pub logits: Vec<f64>,
    /// Gradient w.r.t. the raw (unnormalized) class weight rows.
    pub d_weights: Matrix,
    pub d_embedding: Vec<f64>,
}

/// Angular-margin softmax cross-entropy. `class_weights` holds one row per
/// class; rows are normalized internally. The target logit is
/// `‖x‖·ψ(θ_y)`, the others `‖x‖·cos θ_j`.
pub fn asoftmax_ce(class_weights: &Matrix, embedding: &[f64], label: usize, margin: u32) -> Result<AsoftmaxOutput> {
    if margin < 1 {
        return Err(Error::InvalidArgument("A-softmax margin must be >= 1".into()));
    }
    if label >= class_weights.rows() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", class_weights.rows())));
    }
    let r = norm(embedding);
    if r == 0.0 {
        return Err(Error::ZeroNorm("asoftmax embedding"));
    }
    let mut logits = cosine_logits(class_weights, embedding)?;
    let c = logits[label] / r;
    let (psi, dpsi) = margin_psi(c, margin);
    logits[label] = r * psi;

    let (value, delta) = softmax_ce(&logits, label)?;

    // all but the target go through the plain cosine path
    let mut plain = delta.clone();
    plain[label] = 0.0;
    let mut d_weights = Matrix::zeros(class_weights.rows(), class_weights.cols());
    let mut d_embedding = cosine_logits_backward(class_weights, embedding, &plain, &mut d_weights);

    let dy = delta[label];
    let w = class_weights.row(label);
    let n = norm(w);
    let w_hat: Vec<f64> = w.iter().map(|v| v / n).collect();
    let w_hat_x = dot(&w_hat, embedding);
    for i in 0..embedding.len() {
        d_embedding[i] += dy * (psi * embedding[i] / r + dpsi * (w_hat[i] - c * embedding[i] / r));
    }
    let row = d_weights.row_mut(label);
    for i in 0..embedding.len() {
        row[i] += dy * dpsi * (embedding[i] - w_hat_x * w_hat[i]) / n;
    }
    Ok(AsoftmaxOutput { value, logits, d_weights, d_embedding })
}

/// Teacher-posterior cross-entropy `−Σ_n P_T(n) log P_S(n)`, with both
/// posteriors taken at `temperature`. The teacher side is constant.
pub fn kld_distill(teacher_logits: &[f64], student_logits: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::DimensionMismatch(format!(
            "teacher has {} classes, student {}",
            teacher_logits.len(),
            student_logits.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let scaled = |z: &[f64]| z.iter().map(|v| v / temperature).collect::<Vec<_>>();
    let p_t = softmax(&scaled(teacher_logits));
    let student_scaled = scaled(student_logits);
    let log_p_s = log_softmax(&student_scaled);
    let value = -p_t.iter().zip(&log_p_s).map(|(p, l)| if *p == 0.0 { 0.0 } else { p * l }).sum::<f64>();
    let p_s = softmax(&student_scaled);
    let grad = p_s.iter().zip(&p_t).map(|(s, t)| (s - t) / temperature).collect();
    Ok((value, grad))
}

/// Negative cosine between a teacher and a student embedding, with the
/// gradient w.r.t. the student side only.
pub fn emd_cosine(teacher_emb: &[f64], student_emb: &[f64]) -> Result<(f64, Vec<f64>)> {
    if teacher_emb.len() != student_emb.len() {
        return Err(Error::DimensionMismatch("embedding lengths differ".into()));
    }
    let nt = norm(teacher_emb);
    let ns = norm(student_emb);
    if nt == 0.0 || ns == 0.0 {
        return Err(Error::ZeroNorm("emd_cosine"));
    }
    // a single sqrt makes identical inputs give exactly 1
    let cos = dot(teacher_emb, student_emb) / (dot(teacher_emb, teacher_emb) * dot(student_emb, student_emb)).sqrt();
    let grad = teacher_emb.iter().zip(student_emb).map(|(t, s)| -(t / (nt * ns) - cos * s / (ns * ns))).collect();
    Ok((-cos, grad))
}

/// `−Σ_i cos(ε_T^i, ε_S^i)` over a batch of embedding pairs.
pub fn emd_cosine_batch<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<f64> {
    pairs.into_iter().map(|(t, s)| emd_cosine(t, s).map(|(v, _)| v)).sum()
}

/// Frozen teacher outputs for one training item.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    /// Logits the soft labels come from (cosine logits for an A-softmax head).
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Student outputs consumed by [`composite_loss`].
#[derive(Clone, Copy, Debug)]
pub struct StudentOutputs<'a> {
    pub logits: &'a [f64],
    pub embedding: &'a [f64],
    /// Classifier weights as one row per class; required for an A-softmax head.
    pub class_weights: Option<&'a Matrix>,
}

/// Upstream gradients for the student network.
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    pub d_logits: Option<Vec<f64>>,
    pub d_embedding: Vec<f64>,
    /// Gradient on the class weight rows (A-softmax head).
    pub d_class_weights: Option<Matrix>,
}

/// Logits used for posteriors: plain linear logits for a softmax head,
/// margin-free cosine logits for an A-softmax head.
pub fn posterior_logits(class_loss: ClassLoss, student: &StudentOutputs<'_>) -> Result<Vec<f64>> {
    match class_loss {
        ClassLoss::Softmax => Ok(student.logits.to_vec()),
        ClassLoss::Asoftmax => {
            let w = student
                .class_weights
                .ok_or_else(|| Error::InvalidArgument("A-softmax head needs class weights".into()))?;
            cosine_logits(w, student.embedding)
        }
    }
}

/// Weighted sum of the active terms and the gradients they send upstream.
pub fn composite_loss(
    cfg: &DistillationConfig,
    teacher: Option<&TeacherOutputs>,
    student: &StudentOutputs<'_>,
    label: usize,
) -> Result<(LossReport, Upstream)> {
    cfg.validate()?;
    let teacher = match (cfg.needs_teacher(), teacher) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "a distillation term is active but no teacher outputs were given".into(),
            ))
        }
        (_, t) => t,
    };
    let e = student.embedding.len();
    let mut report = LossReport::default();
    let mut d_embedding = vec![0.0; e];
    let mut d_logits: Option<Vec<f64>> = None;
    let mut d_class_weights: Option<Matrix> = None;
    let add_logit_grad = |g: Vec<f64>, k: f64, d: &mut Option<Vec<f64>>| {
        let acc = d.get_or_insert_with(|| vec![0.0; g.len()]);
        axpy(k, &g, acc);
    };

    if cfg.class_active() {
        let value = match cfg.class_loss {
            ClassLoss::Softmax => {
                let (v, g) = softmax_ce(student.logits, label)?;
                add_logit_grad(g, cfg.weight_class, &mut d_logits);
                v
            }
            ClassLoss::Asoftmax => {
                let w = student
                    .class_weights
                    .ok_or_else(|| Error::InvalidArgument("A-softmax head needs class weights".into()))?;
                let out = asoftmax_ce(w, student.embedding, label, cfg.asoftmax_margin)?;
                axpy(cfg.weight_class, &out.d_embedding, &mut d_embedding);
                let mut dw = out.d_weights;
                dw.scale(cfg.weight_class);
                d_class_weights = Some(dw);
                out.value
            }
        };
        report.terms.insert("class", value);
        report.total += cfg.weight_class * value;
    }

    if cfg.use_kld {
        let t = teacher.expect("checked above");
        let s_logits = posterior_logits(cfg.class_loss, student)?;
        let (v, g) = kld_distill(&t.logits, &s_logits, cfg.temperature)?;
        match cfg.class_loss {
            ClassLoss::Softmax => add_logit_grad(g, cfg.weight_kld, &mut d_logits),
            ClassLoss::Asoftmax => {
                let w = student.class_weights.expect("checked by posterior_logits");
                let scaled: Vec<f64> = g.iter().map(|v| v * cfg.weight_kld).collect();
                let dw = d_class_weights.get_or_insert_with(|| Matrix::zeros(w.rows(), w.cols()));
                let de = cosine_logits_backward(w, student.embedding, &scaled, dw);
                axpy(1.0, &de, &mut d_embedding);
            }
        }
        report.terms.insert("kld", v);
        report.total += cfg.weight_kld * v;
    }

    if cfg.use_emd {
        let t = teacher.expect("checked above");
        let (v, g) = emd_cosine(&t.embedding, student.embedding)?;
        axpy(cfg.weight_emd, &g, &mut d_embedding);
        report.terms.insert("emd", v);
        report.total += cfg.weight_emd * v;
    }

    Ok((report, Upstream { d_logits, d_embedding, d_class_weights }))
}
