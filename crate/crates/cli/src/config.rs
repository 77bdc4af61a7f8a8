//! Run configuration: one JSON document with a section per stage.
//!
//! Every section has defaults, unknown keys are rejected, and the effective
//! configuration is written next to each stage's outputs.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use spkdistill::backend::BackendConfig;
use spkdistill::data::{random_subspace, CorpusSpec, Domain, DomainShift, LengthClass};
use spkdistill::objectives::DistillationConfig;
use spkdistill::training::{FineTuneConfig, TrainConfig};
use spkdistill::{EncoderConfig, Rng};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Seeds every stage; stage-level seed fields are overwritten with it.
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// `num_classes` is set from the training corpus by each stage.
    pub encoder: EncoderConfig,
    pub teacher: TrainConfig,
    pub student: StudentConfig,
    pub finetune: FineTuneConfig,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            teacher: TrainConfig { epochs: 30, ..TrainConfig::default() },
            student: StudentConfig::default(),
            finetune: FineTuneConfig::default(),
            backend: BackendConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct StudentConfig {
    pub train: TrainConfig,
    pub loss: DistillationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub feature_dim: usize,
    pub source_speakers: usize,
    pub source_utts_per_speaker: usize,
    /// Target-domain speakers in the fine-tuning set.
    pub target_speakers: usize,
    pub target_utts_per_speaker: usize,
    /// Further target-domain speakers, disjoint from the fine-tuning set,
    /// used for evaluation.
    pub eval_speakers: usize,
    pub long_frames: (usize, usize),
    pub short_frames: (usize, usize),
    pub speaker_spread: f64,
    /// Rank of the speaker subspace; `null` for full rank.
    pub speaker_rank: Option<usize>,
    pub channel_spread: f64,
    pub frame_noise: f64,
    pub ar_coeff: f64,
    pub shift_scale: f64,
    pub shift_rotation: f64,
    pub shift_bias_norm: f64,
    pub target_trials: usize,
    pub nontarget_trials: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let spec = CorpusSpec::default();
        Self {
            feature_dim: spec.feature_dim,
            source_speakers: 200,
            source_utts_per_speaker: 20,
            target_speakers: 20,
            target_utts_per_speaker: 12,
            eval_speakers: 20,
            long_frames: spec.long_frames,
            short_frames: spec.short_frames,
            speaker_spread: spec.speaker_spread,
            speaker_rank: None,
            channel_spread: spec.channel_spread,
            frame_noise: spec.frame_noise,
            ar_coeff: spec.ar_coeff,
            shift_scale: 0.9,
            shift_rotation: 1.0,
            shift_bias_norm: 1.0,
            target_trials: 1000,
            nontarget_trials: 5000,
        }
    }
}

/// Stream ids under the run seed for the pieces of corpus generation.
const STREAM_SUBSPACE: u64 = 1;
const STREAM_SHIFT: u64 = 2;
const STREAM_TRIALS: u64 = 3;

impl CorpusConfig {
    /// Source and target specs sharing a speaker subspace; the target is
    /// short, shifted, and holds the fine-tuning and evaluation speakers.
    pub fn specs(&self, seed: u64) -> anyhow::Result<(CorpusSpec, CorpusSpec)> {
        let d = self.feature_dim;
        let speaker_subspace = match self.speaker_rank {
            Some(r) => Some(random_subspace(d, r, &mut Rng::stream(seed, STREAM_SUBSPACE))?),
            None => None,
        };
        let shift = DomainShift::random(
            d,
            self.shift_scale,
            self.shift_rotation,
            self.shift_bias_norm,
            &mut Rng::stream(seed, STREAM_SHIFT),
        )?;
        let source = CorpusSpec {
            domain: Domain::Source,
            lengths: LengthClass::Long,
            n_speakers: self.source_speakers,
            utts_per_speaker: self.source_utts_per_speaker,
            feature_dim: d,
            long_frames: self.long_frames,
            short_frames: self.short_frames,
            speaker_spread: self.speaker_spread,
            speaker_subspace,
            channel_spread: self.channel_spread,
            frame_noise: self.frame_noise,
            ar_coeff: self.ar_coeff,
            shift: None,
            seed: Rng::stream(seed, 10).next_u64(),
        };
        let target = CorpusSpec {
            domain: Domain::Target,
            lengths: LengthClass::Short,
            n_speakers: self.target_speakers + self.eval_speakers,
            utts_per_speaker: self.target_utts_per_speaker,
            shift: Some(shift),
            seed: Rng::stream(seed, 11).next_u64(),
            ..source.clone()
        };
        source.validate()?;
        target.validate()?;
        Ok((source, target))
    }

    pub fn trial_rng(seed: u64) -> Rng {
        Rng::stream(seed, STREAM_TRIALS)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version);
        }
        Ok(cfg)
    }

    /// Copies the run seed into every stage and checks each section.
    pub fn finalize(mut self, seed: Option<u64>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.teacher.seed = self.seed;
        self.student.train.seed = self.seed;
        self.finetune.seed = self.seed;
        self.teacher.validate().context("teacher section")?;
        self.student.train.validate().context("student section")?;
        self.student.loss.validate().context("student loss section")?;
        self.finetune.validate().context("finetune section")?;
        let c = &self.corpus;
        if c.eval_speakers < 2 || c.target_speakers < 2 {
            bail!("corpus.target_speakers and corpus.eval_speakers must both be at least 2");
        }
        if self.encoder.input_dim != c.feature_dim {
            bail!("encoder.input_dim ({}) differs from corpus.feature_dim ({})", self.encoder.input_dim, c.feature_dim);
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
