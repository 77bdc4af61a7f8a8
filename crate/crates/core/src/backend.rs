//! Verification back-end: embedding extraction, centering, whitening,
//! length normalization, LDA, cosine and two-covariance PLDA scoring, and
//! the equal error rate.
//!
//! Processing order is fixed: center → whiten → length-normalize → LDA, then
//! either cosine or PLDA scoring.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialList;
use crate::error::{Error, Result};
use crate::network::{forward, FeatureSequence, ParameterSet};
use crate::numerics::{cosine_similarity, eigh_symmetric, matmul, norm, Matrix};

/// Eigenvalue floor for the inverse square roots.
pub const EIGEN_FLOOR: f64 = 1e-8;

/// One embedding per row, in input order.
pub fn extract_embeddings(params: &ParameterSet, utterances: &[&FeatureSequence]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> =
        utterances.par_iter().map(|x| forward(params, x).map(|t| t.embedding)).collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, params.config().embedding_dim));
    }
    Matrix::from_rows(&rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    Cosine,
    Plda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// `None` skips LDA (identity projection).
    pub lda_dim: Option<usize>,
    pub scoring: Scoring,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { lda_dim: Some(16), scoring: Scoring::Plda }
    }
}

/// `S^{−1/2}` of a symmetric PSD matrix with eigenvalues floored at
/// [`EIGEN_FLOOR`].
fn inv_sqrt_psd(s: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = eigh_symmetric(s)?;
    if vals.first().is_none_or(|&v| v <= EIGEN_FLOOR) {
        return Err(Error::RankDeficient("matrix has no eigenvalue above the floor".into()));
    }
    let scale: Vec<f64> = vals.iter().map(|&v| 1.0 / v.max(EIGEN_FLOOR).sqrt()).collect();
    let mut left = vecs.clone();
    for i in 0..left.rows() {
        for (j, s) in scale.iter().enumerate() {
            left.row_mut(i)[j] *= s;
        }
    }
    matmul(&left, &vecs.transpose())
}

fn mean_rows(x: &Matrix) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (a, b) in m.iter_mut().zip(x.row(i)) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= x.rows() as f64);
    m
}

/// Population covariance of rows around `mean`.
fn covariance(x: &Matrix, mean: &[f64]) -> Matrix {
    let d = x.cols();
    let mut c = Matrix::zeros(d, d);
    for i in 0..x.rows() {
        let r: Vec<f64> = x.row(i).iter().zip(mean).map(|(a, b)| a - b).collect();
        for p in 0..d {
            for q in 0..d {
                c[(p, q)] += r[p] * r[q];
            }
        }
    }
    c.scale(1.0 / x.rows() as f64);
    c
}

/// Within- and between-class scatter, each normalized by the row count.
fn scatter(x: &Matrix, labels: &[usize]) -> (Matrix, Matrix) {
    let d = x.cols();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (a, b) in sums[l].iter_mut().zip(x.row(i)) {
            *a += b;
        }
    }
    let means: Vec<Vec<f64>> =
        sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect()).collect();
    let global = mean_rows(x);
    let n = x.rows() as f64;
    let mut sw = Matrix::zeros(d, d);
    let mut sb = Matrix::zeros(d, d);
    for (i, &l) in labels.iter().enumerate() {
        let r: Vec<f64> = x.row(i).iter().zip(&means[l]).map(|(a, b)| a - b).collect();
        for p in 0..d {
            for q in 0..d {
                sw[(p, q)] += r[p] * r[q] / n;
            }
        }
    }
    for (m, &c) in means.iter().zip(&counts) {
        if c == 0 {
            continue;
        }
        let r: Vec<f64> = m.iter().zip(&global).map(|(a, b)| a - b).collect();
        for p in 0..d {
            for q in 0..d {
                sb[(p, q)] += c as f64 * r[p] * r[q] / n;
            }
        }
    }
    (sw, sb)
}

/// Unit-length copy of `x`.
pub fn length_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm("length normalization"));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Flips each column so its largest-magnitude entry is positive.
fn fix_signs(m: &mut Matrix) {
    for j in 0..m.cols() {
        let col = m.column(j);
        let big = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            for i in 0..m.rows() {
                m.row_mut(i)[j] = -m.row(i)[j];
            }
        }
    }
}

/// Fisher LDA: the top `dim` solutions of `S_b v = λ S_w v`, normalized so
/// `vᵀ S_w v = 1`, as columns. Returns the projection and its eigenvalues.
pub fn lda(x: &Matrix, labels: &[usize], dim: usize) -> Result<(Matrix, Vec<f64>)> {
    let (sw, sb) = scatter(x, labels);
    let w = inv_sqrt_psd(&sw)?;
    let m = matmul(&matmul(&w, &sb)?, &w)?;
    let sym = symmetrize(&m);
    let (vals, vecs) = eigh_symmetric(&sym)?;
    let p = matmul(&w, &vecs)?;
    let mut out = Matrix::zeros(p.rows(), dim);
    for i in 0..p.rows() {
        out.row_mut(i).copy_from_slice(&p.row(i)[..dim]);
    }
    fix_signs(&mut out);
    Ok((out, vals[..dim].to_vec()))
}

fn symmetrize(m: &Matrix) -> Matrix {
    let mut s = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            s[(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    s
}

/// Two-covariance PLDA, stored in the basis that maps the within-class
/// covariance to `I` and the between-class covariance to `diag(ψ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plda {
    pub mean: Vec<f64>,
    /// Rows map centered inputs into the diagonal basis.
    pub transform: Matrix,
    pub psi: Vec<f64>,
}

impl Plda {
    pub fn from_covariances(mean: Vec<f64>, between: &Matrix, within: &Matrix) -> Result<Self> {
        let d = mean.len();
        if between.shape() != (d, d) || within.shape() != (d, d) {
            return Err(Error::DimensionMismatch("PLDA covariances do not match the mean".into()));
        }
        let (wvals, _) = eigh_symmetric(within)?;
        if wvals.last().is_some_and(|&v| v < -1e-10 * wvals[0].abs().max(1.0)) {
            return Err(Error::InvalidArgument("within-class covariance is not PSD".into()));
        }
        let w = inv_sqrt_psd(within)?;
        let b = symmetrize(&matmul(&matmul(&w, between)?, &w)?);
        let (psi, u) = eigh_symmetric(&b)?;
        let tol = 1e-10 * psi.first().map_or(1.0, |v| v.abs().max(1.0));
        if psi.last().is_some_and(|&v| v < -tol) {
            return Err(Error::InvalidArgument("between-class covariance is not PSD".into()));
        }
        let transform = matmul(&u.transpose(), &w)?;
        Ok(Self { mean, transform, psi: psi.into_iter().map(|v| v.max(0.0)).collect() })
    }

    /// Fitted from scatter estimates.
    pub fn fit(x: &Matrix, labels: &[usize]) -> Result<Self> {
        let (sw, sb) = scatter(x, labels);
        Self::from_covariances(mean_rows(x), &sb, &sw)
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.transform.matvec(&c)
    }

    /// `log p(e, t | same speaker) − log p(e, t | different speakers)`.
    pub fn llr(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        if enroll.len() != self.mean.len() || test.len() != self.mean.len() {
            return Err(Error::DimensionMismatch("PLDA input dimension".into()));
        }
        let (u, v) = (self.project(enroll), self.project(test));
        Ok(self.psi.iter().zip(u.iter().zip(&v)).map(|(&psi, (&a, &b))| llr_1d(psi, a, b)).sum())
    }
}

/// Per-dimension LLR with between variance `psi` and unit within variance.
fn llr_1d(psi: f64, u: f64, v: f64) -> f64 {
    let a = psi + 1.0;
    let det = a * a - psi * psi;
    let same = (a * (u * u + v * v) - 2.0 * psi * (u * v)) / det;
    let diff = (u * u + v * v) / a;
    -0.5 * det.ln() + a.ln() - 0.5 * (same - diff)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendModel {
    pub center: Vec<f64>,
    pub whitening: Matrix,
    /// `E × L` LDA projection (identity when LDA is skipped).
    pub projection: Matrix,
    pub plda: Plda,
}

/// Fits the back-end on labelled training embeddings.
pub fn fit_backend(embeddings: &Matrix, labels: &[usize], lda_dim: Option<usize>) -> Result<BackendModel> {
    let (n, e) = embeddings.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} embeddings, {} labels", labels.len())));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let usable = counts.iter().filter(|&&c| c >= 2).count();
    if let Some(l) = lda_dim {
        if l == 0 || l >= e || l >= usable {
            return Err(Error::InvalidArgument(format!(
                "LDA dimension {l} needs 0 < L < embedding dim {e} and L < speakers with >= 2 utterances ({usable})"
            )));
        }
    }
    if usable < 2 {
        return Err(Error::InsufficientData("back-end needs at least 2 speakers with 2 utterances".into()));
    }

    let center = mean_rows(embeddings);
    let whitening = inv_sqrt_psd(&covariance(embeddings, &center))?;
    let mut normed = Matrix::zeros(n, e);
    for i in 0..n {
        let c: Vec<f64> = embeddings.row(i).iter().zip(&center).map(|(a, b)| a - b).collect();
        normed.row_mut(i).copy_from_slice(&length_normalize(&whitening.matvec(&c))?);
    }
    let projection = match lda_dim {
        Some(l) => lda(&normed, labels, l)?.0,
        None => Matrix::identity(e),
    };
    let projected = matmul(&normed, &projection)?;
    let plda = Plda::fit(&projected, labels)?;
    Ok(BackendModel { center, whitening, projection, plda })
}

impl BackendModel {
    /// Centered, whitened, length-normalized and projected embedding.
    pub fn process(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.center.len() {
            return Err(Error::DimensionMismatch(format!(
                "embedding of {} dims, back-end expects {}",
                x.len(),
                self.center.len()
            )));
        }
        let c: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let y = length_normalize(&self.whitening.matvec(&c))?;
        Ok(self.projection.vecmat(&y))
    }

    pub fn score_cosine(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        cosine_similarity(&self.process(enroll)?, &self.process(test)?)
    }

    pub fn score_plda(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        self.plda.llr(&self.process(enroll)?, &self.process(test)?)
    }

    pub fn score(&self, scoring: Scoring, enroll: &[f64], test: &[f64]) -> Result<f64> {
        match scoring {
            Scoring::Cosine => self.score_cosine(enroll, test),
            Scoring::Plda => self.score_plda(enroll, test),
        }
    }

    /// Scores every trial; ids index rows of `embeddings`.
    pub fn score_trials(&self, scoring: Scoring, embeddings: &Matrix, trials: &TrialList) -> Result<Vec<f64>> {
        let processed: Vec<Vec<f64>> =
            (0..embeddings.rows()).into_par_iter().map(|i| self.process(embeddings.row(i))).collect::<Result<_>>()?;
        trials
            .trials
            .par_iter()
            .map(|t| {
                let (a, b) = match (processed.get(t.enroll), processed.get(t.test)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::InvalidArgument(format!("trial {t:?} refers past the embeddings"))),
                };
                match scoring {
                    Scoring::Cosine => cosine_similarity(a, b),
                    Scoring::Plda => self.plda.llr(a, b),
                }
            })
            .collect()
    }
}

/// Equal error rate and the threshold where it is reached.
///
/// A trial is accepted when its score is at or above the threshold.
/// Candidate thresholds are `−∞`, the midpoints between consecutive distinct
/// scores, and `+∞`. With `d_i = FRR_i − FAR_i` (non-decreasing), take the
/// first candidate `i` with `d_i ≥ 0`: if `d_i = 0` the EER is `FAR_i` at
/// threshold `t_i`; otherwise the two rates are linearly interpolated
/// between candidates `i − 1` and `i` with `λ = −d_{i−1} / (d_i − d_{i−1})`,
/// giving `EER = FAR_{i−1} + λ(FAR_i − FAR_{i−1})`. The threshold is
/// interpolated the same way, with infinite candidates replaced by the
/// lowest or highest score.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::InsufficientData("EER needs both target and nontarget scores".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // candidate 0: threshold −∞, everything accepted
    let (mut rej_tar, mut rej_non) = (0usize, 0usize);
    let rates = |rt: usize, rn: usize| (rt as f64 / n_tar as f64, (n_non - rn) as f64 / n_non as f64);
    let (mut prev_frr, mut prev_far) = rates(0, 0);
    let mut prev_t = f64::NEG_INFINITY;
    let lowest = pairs[0].0;
    let highest = pairs[pairs.len() - 1].0;
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                rej_tar += 1;
            } else {
                rej_non += 1;
            }
            i += 1;
        }
        let t = if i < pairs.len() { (v + pairs[i].0) / 2.0 } else { f64::INFINITY };
        let (frr, far) = rates(rej_tar, rej_non);
        let d = frr - far;
        if d >= 0.0 {
            if d == 0.0 {
                return Ok((far, t));
            }
            let d_prev = prev_frr - prev_far;
            let lambda = -d_prev / (d - d_prev);
            let eer = prev_far + lambda * (far - prev_far);
            let t0 = if prev_t.is_finite() { prev_t } else { lowest };
            let t1 = if t.is_finite() { t } else { highest };
            return Ok((eer, t0 + lambda * (t1 - t0)));
        }
        (prev_frr, prev_far, prev_t) = (frr, far, t);
    }
    unreachable!("d reaches 1 at the last candidate")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerReport {
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn eer_report(scores: &[f64], trials: &TrialList) -> Result<EerReport> {
    let (eer, threshold) = compute_eer(scores, &trials.labels())?;
    Ok(EerReport { eer, threshold, n_target: trials.n_target(), n_nontarget: trials.n_nontarget() })
}

/// Score file text: `enroll<TAB>test<TAB>score` with 17 significant digits.
pub fn format_scores(trials: &TrialList, scores: &[f64]) -> Result<String> {
    if trials.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!("{} trials, {} scores", trials.len(), scores.len())));
    }
    let mut s = String::new();
    for (t, v) in trials.trials.iter().zip(scores) {
        writeln!(s, "{}\t{}\t{:.16e}", t.enroll, t.test, v).unwrap();
    }
    Ok(s)
}

/// Parses a score file back into `(enroll, test, score)` rows.
pub fn parse_scores(text: &str) -> Result<Vec<(usize, usize, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::CorruptFile(format!("score file line {}: `{line}`", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?))
        })
        .collect()
}
