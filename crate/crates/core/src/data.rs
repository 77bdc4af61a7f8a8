//! Synthetic speaker corpora, cropping, trial lists and their file formats.
//!
//! A corpus is generated speaker by speaker: each speaker has a mean vector,
//! each utterance a channel offset, and frames carry AR(1) noise:
//!
//! ```text
//! x_t = m_s + c_u + n_t,   n_t = ρ·n_{t−1} + √(1−ρ²)·σ_frame·w_t
//! ```
//!
//! Target-domain corpora are additionally mapped through `x ↦ A·x + b`.
//!
//! # Corpus file
//!
//! ```text
//! magic    4 bytes  "SPKC"
//! version  u32 LE   1
//! dim      u32 LE   feature dimension D
//! then, per utterance until end of file:
//!   speaker  u32 LE
//!   domain   u8     0 = source, 1 = target
//!   frames   u32 LE T
//!   values   T·D × f32 LE, row-major
//! ```
//!
//! # Trial file
//!
//! One line per trial, `enroll<TAB>test<TAB>target|nontarget`, where the ids
//! are utterance indices into the evaluation corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::network::FeatureSequence;
use crate::numerics::{axpy, dot, invert, matmul, norm, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    Long,
    Short,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker_id: u32,
    pub domain: Domain,
    pub features: FeatureSequence,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

/// Affine feature map `x ↦ A·x + b` applied to target-domain frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self { a: Matrix::identity(dim), b: vec![0.0; dim] }
    }

    /// `A = scale·R` with `R` a random rotation, `b` a random direction of
    /// norm `bias_norm`.
    ///
    /// `rotation` in `[0, 1]` controls how far `R` is from the identity: `R`
    /// is the Cayley transform of a random skew-symmetric matrix whose
    /// entries are scaled by `rotation`; at 1 the rotation angles are large.
    pub fn random(dim: usize, scale: f64, rotation: f64, bias_norm: f64, rng: &mut Rng) -> Result<Self> {
        let mut k = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i + 1..dim {
                let v = rotation * rng.normal();
                k[(i, j)] = v;
                k[(j, i)] = -v;
            }
        }
        // R = (I − K)⁻¹ (I + K)
        let mut minus = Matrix::identity(dim);
        let mut plus = Matrix::identity(dim);
        for i in 0..dim {
            for j in 0..dim {
                minus[(i, j)] -= k[(i, j)];
                plus[(i, j)] += k[(i, j)];
            }
        }
        let mut a = matmul(&invert(&minus)?, &plus)?;
        a.scale(scale);
        let mut b: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&b);
        b.iter_mut().for_each(|v| *v *= if n > 0.0 { bias_norm / n } else { 0.0 });
        Ok(Self { a, b })
    }

    pub fn is_identity(&self) -> bool {
        self.a == Matrix::identity(self.a.rows()) && self.b.iter().all(|&v| v == 0.0)
    }

    fn apply_row(&self, x: &mut [f64]) {
        let mut y = self.a.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        x.copy_from_slice(&y);
    }
}

/// `D × r` matrix with orthonormal columns spanning a random subspace
/// (Gram-Schmidt on Gaussian columns).
pub fn random_subspace(dim: usize, rank: usize, rng: &mut Rng) -> Result<Matrix> {
    if rank == 0 || rank > dim {
        return Err(Error::InvalidArgument(format!("subspace rank {rank} for dimension {dim}")));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while cols.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for c in &cols {
            let p = dot(c, &v);
            axpy(-p, c, &mut v);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    Ok(Matrix::from_rows(&cols)?.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub domain: Domain,
    pub lengths: LengthClass,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub feature_dim: usize,
    pub long_frames: (usize, usize),
    pub short_frames: (usize, usize),
    pub speaker_spread: f64,
    /// `D × r` basis with orthonormal columns; speaker means are drawn as
    /// `B·z` with `z ~ N(0, σ_spk² I_r)`. `None` draws them in all `D`
    /// dimensions.
    pub speaker_subspace: Option<Matrix>,
    pub channel_spread: f64,
    pub frame_noise: f64,
    pub ar_coeff: f64,
    /// Applied only when `domain` is `Target`; `None` means identity.
    pub shift: Option<DomainShift>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            domain: Domain::Source,
            lengths: LengthClass::Long,
            n_speakers: 200,
            utts_per_speaker: 20,
            feature_dim: 30,
            long_frames: (300, 800),
            short_frames: (80, 240),
            speaker_spread: 1.0,
            speaker_subspace: None,
            channel_spread: 0.3,
            frame_noise: 1.5,
            ar_coeff: 0.8,
            shift: None,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn frame_range(&self) -> (usize, usize) {
        match self.lengths {
            LengthClass::Long => self.long_frames,
            LengthClass::Short => self.short_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("corpus spec: {m}")));
        if self.feature_dim == 0 || self.n_speakers == 0 || self.utts_per_speaker == 0 {
            return bad("dimension, speakers and utterances must be positive".into());
        }
        for (name, (lo, hi)) in [("long_frames", self.long_frames), ("short_frames", self.short_frames)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return bad(format!("ar_coeff must lie in [0, 1), got {}", self.ar_coeff));
        }
        for (name, v) in [
            ("speaker_spread", self.speaker_spread),
            ("channel_spread", self.channel_spread),
            ("frame_noise", self.frame_noise),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if let Some(b) = &self.speaker_subspace {
            if b.rows() != self.feature_dim || b.cols() == 0 || b.cols() > self.feature_dim {
                return bad("speaker subspace must be D × r with 1 <= r <= D".into());
            }
        }
        if let Some(s) = &self.shift {
            if s.a.shape() != (self.feature_dim, self.feature_dim) || s.b.len() != self.feature_dim {
                return bad("domain shift does not match feature_dim".into());
            }
        }
        Ok(())
    }
}

/// Stream ids: 0 for speaker means, `1 + u` for utterance `u`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut spk_rng = Rng::stream(spec.seed, 0);
    let speaker_means: Vec<Vec<f64>> = (0..spec.n_speakers)
        .map(|_| match &spec.speaker_subspace {
            None => (0..d).map(|_| spec.speaker_spread * spk_rng.normal()).collect(),
            Some(b) => {
                let z: Vec<f64> = (0..b.cols()).map(|_| spec.speaker_spread * spk_rng.normal()).collect();
                b.matvec(&z)
            }
        })
        .collect();
    let shift = match spec.domain {
        Domain::Target => spec.shift.as_ref(),
        Domain::Source => None,
    };
    let (lo, hi) = spec.frame_range();
    let innovation = (1.0 - spec.ar_coeff * spec.ar_coeff).sqrt() * spec.frame_noise;

    let utterances = (0..spec.n_speakers * spec.utts_per_speaker)
        .into_par_iter()
        .map(|u| {
            let mean = &speaker_means[u / spec.utts_per_speaker];
            let mut rng = Rng::stream(spec.seed, 1 + u as u64);
            let t = rng.range_inclusive(lo, hi);
            let channel: Vec<f64> = (0..d).map(|_| spec.channel_spread * rng.normal()).collect();
            let mut noise: Vec<f64> = (0..d).map(|_| spec.frame_noise * rng.normal()).collect();
            let mut features = Matrix::zeros(t, d);
            for i in 0..t {
                if i > 0 {
                    for n in noise.iter_mut() {
                        *n = spec.ar_coeff * *n + innovation * rng.normal();
                    }
                }
                let row = features.row_mut(i);
                for j in 0..d {
                    row[j] = mean[j] + channel[j] + noise[j];
                }
                if let Some(sh) = shift {
                    sh.apply_row(row);
                }
            }
            let speaker_id = (u / spec.utts_per_speaker) as u32;
            Utterance { speaker_id, domain: spec.domain, features }
        })
        .collect();
    Ok(Corpus { feature_dim: d, utterances })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Speaker id → contiguous class index, in ascending id order.
    pub fn label_map(&self) -> BTreeMap<u32, usize> {
        let mut ids: Vec<u32> = self.utterances.iter().map(|u| u.speaker_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    }

    pub fn n_speakers(&self) -> usize {
        self.label_map().len()
    }

    /// Splits off the utterances of the last `n` speakers (in ascending id
    /// order) as a second corpus; the first keeps the rest.
    pub fn split_speakers(&self, n: usize) -> Result<(Corpus, Corpus)> {
        let ids: Vec<u32> = self.label_map().into_keys().collect();
        if n == 0 || n >= ids.len() {
            return Err(Error::InsufficientData(format!("cannot split {n} of {} speakers", ids.len())));
        }
        let cut = ids[ids.len() - n];
        let (a, b): (Vec<_>, Vec<_>) = self.utterances.iter().cloned().partition(|u| u.speaker_id < cut);
        let dim = self.feature_dim;
        Ok((Corpus { feature_dim: dim, utterances: a }, Corpus { feature_dim: dim, utterances: b }))
    }

    /// Contiguous class label of every utterance.
    pub fn labels(&self) -> Vec<usize> {
        let map = self.label_map();
        self.utterances.iter().map(|u| map[&u.speaker_id]).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        put_u32(&mut out, CORPUS_VERSION);
        put_len(&mut out, self.feature_dim);
        for u in &self.utterances {
            put_u32(&mut out, u.speaker_id);
            out.push(match u.domain {
                Domain::Source => 0,
                Domain::Target => 1,
            });
            put_len(&mut out, u.frames());
            for v in u.features.as_slice() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "corpus file");
        if r.take(4)? != CORPUS_MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let feature_dim = r.u32()? as usize;
        if feature_dim == 0 {
            return Err(r.corrupt("zero feature dimension"));
        }
        let mut utterances = Vec::new();
        while !r.is_empty() {
            let speaker_id = r.u32()?;
            let domain = match r.u8()? {
                0 => Domain::Source,
                1 => Domain::Target,
                b => return Err(r.corrupt(format!("bad domain tag {b}"))),
            };
            let frames = r.u32()? as usize;
            if frames == 0 {
                return Err(r.corrupt("utterance with zero frames"));
            }
            let n = frames.checked_mul(feature_dim).ok_or_else(|| r.corrupt("size overflow"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.corrupt("size overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
            utterances.push(Utterance { speaker_id, domain, features: Matrix::from_vec(frames, feature_dim, data)? });
        }
        Ok(Self { feature_dim, utterances })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The values this corpus holds after a save/load round trip.
    pub fn quantized(&self) -> Corpus {
        let mut c = self.clone();
        for u in &mut c.utterances {
            u.features.as_mut_slice().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
        c
    }
}

const CORPUS_MAGIC: &[u8; 4] = b"SPKC";
const CORPUS_VERSION: u32 = 1;

/// A contiguous random slice of `frames` frames, start uniform in `[0, T − frames]`.
pub fn crop(utt: &Utterance, frames: usize, rng: &mut Rng) -> Result<FeatureSequence> {
    let t = utt.frames();
    if frames > t {
        return Err(Error::CropTooLong { requested: frames, available: t });
    }
    if frames == 0 {
        return Err(Error::InvalidArgument("crop of zero frames".into()));
    }
    let start = rng.range_inclusive(0, t - frames);
    Ok(utt.features.slice_rows(start, frames))
}

/// [`crop`], falling back to the whole utterance when it is too short.
pub fn crop_or_whole(utt: &Utterance, frames: usize, rng: &mut Rng) -> FeatureSequence {
    match crop(utt, frames, rng) {
        Ok(c) => c,
        Err(_) => utt.features.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub target: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.len() - self.n_target()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.trials.iter().map(|t| t.target).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let label = if t.target { "target" } else { "nontarget" };
            writeln!(s, "{}\t{}\t{label}", t.enroll, t.test).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let trials = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                let bad = || Error::CorruptFile(format!("trial file line {}: `{line}`", n + 1));
                let mut it = line.split('\t');
                let enroll = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let test = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let target = match it.next() {
                    Some("target") => true,
                    Some("nontarget") => false,
                    _ => return Err(bad()),
                };
                if it.next().is_some() {
                    return Err(bad());
                }
                Ok(Trial { enroll, test, target })
            })
            .collect::<Result<_>>()?;
        Ok(Self { trials })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks every id is in range and every label agrees with the speakers.
    pub fn audit(&self, corpus: &Corpus) -> Result<()> {
        for t in &self.trials {
            let (a, b) = match (corpus.utterances.get(t.enroll), corpus.utterances.get(t.test)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::InvalidArgument(format!("trial {t:?} refers past the corpus"))),
            };
            if t.enroll == t.test || (a.speaker_id == b.speaker_id) != t.target {
                return Err(Error::InvalidArgument(format!("trial {t:?} is inconsistent with the corpus")));
            }
        }
        Ok(())
    }
}

/// Samples distinct unordered pairs of distinct utterances: `n_target`
/// same-speaker pairs and `n_nontarget` cross-speaker pairs, shuffled
/// together. `subset` restricts the utterances considered.
pub fn make_trials(
    corpus: &Corpus,
    subset: Option<&[usize]>,
    n_target: usize,
    n_nontarget: usize,
    rng: &mut Rng,
) -> Result<TrialList> {
    let ids: Vec<usize> = subset.map_or_else(|| (0..corpus.len()).collect(), <[usize]>::to_vec);
    let spk = |i: usize| corpus.utterances[i].speaker_id;
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (a, &i) in ids.iter().enumerate() {
        for &j in &ids[a + 1..] {
            if i == j {
                continue;
            }
            if spk(i) == spk(j) {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    if targets.len() < n_target {
        return Err(Error::InsufficientData(format!("{n_target} target pairs requested, {} available", targets.len())));
    }
    if nontargets.len() < n_nontarget {
        return Err(Error::InsufficientData(format!(
            "{n_nontarget} nontarget pairs requested, {} available",
            nontargets.len()
        )));
    }
    rng.shuffle(&mut targets);
    rng.shuffle(&mut nontargets);
    let mut trials: Vec<Trial> = targets[..n_target]
        .iter()
        .map(|&(enroll, test)| Trial { enroll, test, target: true })
        .chain(nontargets[..n_nontarget].iter().map(|&(enroll, test)| Trial { enroll, test, target: false }))
        .collect();
    rng.shuffle(&mut trials);
    Ok(TrialList { trials })
}
