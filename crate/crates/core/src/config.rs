//! The single declarative run configuration (TOML). Unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{preset_profiles, ChannelProfile, CleanCorpusSpec};
use crate::error::{Error, IoContext, Result};
use crate::features::FeatureConfig;
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_clean: usize,
    pub n_speakers: usize,
    pub min_dur_s: f64,
    pub max_dur_s: f64,
    pub seed: u64,
    /// Channel label of the abundant source domain.
    pub source_channel: String,
    /// Channel label of the scarce target domain.
    pub target_channel: String,
    /// Fraction of sets withheld from GAN training for evaluation.
    pub held_out_fraction: f64,
    /// Utterances drawn per domain for GAN training.
    pub n_per_domain: usize,
    pub profiles: Vec<ChannelProfile>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let clean = CleanCorpusSpec::default();
        Self {
            n_clean: clean.n_utterances,
            n_speakers: clean.n_speakers,
            min_dur_s: clean.min_dur_s,
            max_dur_s: clean.max_dur_s,
            seed: clean.seed,
            source_channel: "clean".into(),
            target_channel: "webcam-ish".into(),
            held_out_fraction: 0.2,
            n_per_domain: 40,
            profiles: preset_profiles(),
        }
    }
}

impl CorpusConfig {
    pub fn clean_spec(&self) -> CleanCorpusSpec {
        CleanCorpusSpec {
            n_utterances: self.n_clean,
            n_speakers: self.n_speakers,
            min_dur_s: self.min_dur_s,
            max_dur_s: self.max_dur_s,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    /// Strided CNN with per-stage pooled features concatenated.
    #[default]
    MfaCnn,
    /// Reserved; rejected at model construction.
    Conformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    pub stage_channels: Vec<usize>,
    pub d_c: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to zero over the epochs.
    pub lr_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub bn_momentum: f64,
    /// Fraction of sets used for validation loss, accuracy and distances.
    pub val_fraction: f64,
    /// Leave the translation source/target channels out of pretraining.
    pub exclude_gan_channels: bool,
    /// Mean absolute embedding component after pretraining; 0 keeps the
    /// learned units. The units set the effective weight of the channel
    /// reconstruction loss.
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: EncoderArch::MfaCnn,
            stage_channels: vec![16, 32, 64, 128],
            d_c: 64,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: true,
            beta1: 0.9,
            beta2: 0.999,
            bn_momentum: 0.1,
            val_fraction: 0.1,
            exclude_gan_channels: true,
            embed_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Generator widths: stem/outer, after the first and second downsampling.
    pub widths: Vec<usize>,
    pub n_res_blocks: usize,
    pub dropout: f64,
    pub disc_widths: Vec<usize>,
    pub proj_dim: usize,
    pub init_std: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            n_res_blocks: 9,
            dropout: 0.5,
            disc_widths: vec![64, 128, 256, 512],
            proj_dim: 256,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativesFrom {
    #[default]
    Source,
    Simulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    Literal,
    #[default]
    NonSaturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_ch: f64,
    pub tau: f64,
    pub n_patches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negatives_from: NegativesFrom,
    pub adv_form: AdvForm,
    /// Linear decay to zero over the second half of training.
    pub lr_decay: bool,
    /// Write a resumable checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_ch: 0.5,
            tau: 0.07,
            n_patches: 256,
            batch_size: 4,
            seed: 0,
            negatives_from: NegativesFrom::Source,
            adv_form: AdvForm::NonSaturating,
            lr_decay: true,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.epochs == 0 || self.n_patches == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs, n_patches and batch_size must be ≥ 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("train.tau must be positive".into()));
        }
        if !(self.lambda_ch >= 0.0) {
            return Err(Error::Config("train.lambda_ch must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub gan: GanConfig,
    pub train: TrainConfig,
    pub simulate: SimulateConfig,
}

impl Config {
    /// Reduced model widths and schedule that train on one CPU core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.gan.widths = vec![16, 32, 32];
        c.gan.disc_widths = vec![16, 32, 64, 128];
        c.gan.proj_dim = 64;
        c.train.n_patches = 64;
        c.train.epochs = 100;
        c.train.checkpoint_every = 25;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_path(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.train.validate()?;
        let sr = self.features.sample_rate;
        for p in &self.corpus.profiles {
            p.validate(sr).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.corpus.source_channel == self.corpus.target_channel {
            return Err(Error::Config("corpus source and target channels must differ".into()));
        }
        if self.gan.widths.len() != 3 || self.gan.widths.contains(&0) {
            return Err(Error::Config("gan.widths needs three positive entries".into()));
        }
        if self.gan.disc_widths.len() != 4 || self.gan.disc_widths.contains(&0) {
            return Err(Error::Config("gan.disc_widths needs four positive entries".into()));
        }
        if !(0.0..1.0).contains(&self.gan.dropout) {
            return Err(Error::Config("gan.dropout must be in [0, 1)".into()));
        }
        if self.encoder.stage_channels.is_empty() || self.encoder.d_c == 0 {
            return Err(Error::Config("encoder needs stages and d_c ≥ 1".into()));
        }
        if !(self.encoder.embed_scale >= 0.0 && self.encoder.embed_scale.is_finite()) {
            return Err(Error::Config("encoder.embed_scale must be finite and ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.encoder.val_fraction) {
            return Err(Error::Config("encoder.val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}
