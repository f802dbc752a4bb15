//! The run configuration document: one TOML file describing corpus,
//! models, training, and evaluation. Unknown keys are rejected outright,
//! and every artifact-producing command writes the resolved document next
//! to its outputs.

use crate::data::synth::SynthCorpusConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::speech::SpeechEncoderConfig;
use crate::trainer::TrainConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: PathBuf::from("runs/corpus"),
            checkpoint_dir: PathBuf::from("runs/checkpoints"),
            report_dir: PathBuf::from("runs/reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per test caption.
    pub samples_per_caption: usize,
    /// 0 selects automatically: 10 splits when n >= 1000, otherwise 1.
    pub is_splits: usize,
    pub recall_k: usize,
    /// Also write raw f32 sidecars next to generated PNGs.
    pub raw_sidecar: bool,
    /// Metrics computed by the evaluate command.
    pub metrics: Vec<String>,
    /// Captions drawn for the sample-grid command.
    pub grid_captions: usize,
    /// Samples per caption in the grid.
    pub grid_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_caption: 1,
            is_splits: 0,
            recall_k: 50,
            raw_sidecar: false,
            metrics: vec!["is".into(), "fid".into(), "map".into(), "recall".into()],
            grid_captions: 8,
            grid_samples: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for m in &self.metrics {
            if !["is", "fid", "map", "recall"].contains(&m.as_str()) {
                return Err(Error::Config(format!(
                    "eval.metrics: unknown metric '{m}' (expected is, fid, map, recall)"
                )));
            }
        }
        if self.samples_per_caption == 0 || self.grid_captions == 0 || self.grid_samples == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the seeds inside [train] and [corpus].
    pub seed: Option<u64>,
    pub paths: Paths,
    pub corpus: SynthCorpusConfig,
    pub speech: SpeechEncoderConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagate the master seed into the per-phase seeds.
    pub fn resolve(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.corpus.seed = seed;
        } else {
            self.seed = Some(self.train.seed);
            self.corpus.seed = self.train.seed;
        }
    }

    /// Override the seed from the command line.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.resolve();
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.speech.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.speech.embed_dim != self.generator.embed_dim {
            return Err(Error::Config(format!(
                "speech.embed_dim ({}) != generator.embed_dim ({})",
                self.speech.embed_dim, self.generator.embed_dim
            )));
        }
        if self.speech.embed_dim != self.discriminator.embed_dim {
            return Err(Error::Config(format!(
                "speech.embed_dim ({}) != discriminator.embed_dim ({})",
                self.speech.embed_dim, self.discriminator.embed_dim
            )));
        }
        if self.corpus.n_mels != self.speech.n_mels {
            return Err(Error::Config(format!(
                "corpus.n_mels ({}) != speech.n_mels ({})",
                self.corpus.n_mels, self.speech.n_mels
            )));
        }
        if self.corpus.image_size != self.generator.out_res {
            return Err(Error::Config(format!(
                "corpus.image_size ({}) != generator.out_res ({})",
                self.corpus.image_size, self.generator.out_res
            )));
        }
        if self.generator.out_res != self.discriminator.resolution {
            return Err(Error::Config(format!(
                "generator.out_res ({}) != discriminator.resolution ({})",
                self.generator.out_res, self.discriminator.resolution
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved snapshot next to a command's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved-config.toml"), self.to_toml())?;
        Ok(())
    }

    /// Stable fingerprint of the resolved document, for report provenance.
    pub fn hash(&self) -> u64 {
        let text = self.to_toml();
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }
}
