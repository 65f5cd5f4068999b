use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignmentConfig;
use crate::encoder::{EncoderConfig, PreprocessConfig};
use crate::error::{Error, Result};
use crate::nsp::NspConfig;
use crate::tokenizer::{ScaleSchedule, TokenizerConfig};

use super::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub guidance: f64,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Output width of the pixel random-projection feature space.
    pub feature_dim: usize,
    pub feature_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmups: usize,
    pub runs: usize,
    pub repeats: usize,
}

/// Everything a run needs. Serialized as JSON; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Disables intra-run parallelism. Outputs do not depend on it.
    #[serde(default)]
    pub sequential: bool,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub alignment: AlignmentConfig,
    pub tokenizer: TokenizerConfig,
    pub nsp: NspConfig,
    pub generate: GenerateConfig,
    pub metrics: MetricsConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small synthetic run: 16 classes, 8 channels, 64 samples, 16×16 images.
    pub fn desk() -> Self {
        let synth = SynthConfig::default();
        let tokenizer = TokenizerConfig::default();
        let encoder = EncoderConfig::desk(synth.channels, synth.samples, synth.embed_dim);
        let nsp = NspConfig::desk(tokenizer.schedule.clone(), tokenizer.vocab, tokenizer.code_dim, encoder.embed_dim);
        RunConfig {
            seed: 0,
            sequential: false,
            preprocess: PreprocessConfig {
                target_rate: synth.target_rate,
                baseline_ms: synth.baseline_ms,
                ..PreprocessConfig::default()
            },
            synth,
            encoder,
            alignment: AlignmentConfig::desk(),
            generate: GenerateConfig {
                guidance: nsp.cfg_ratio,
                top_k: nsp.top_k,
            },
            tokenizer,
            nsp,
            metrics: MetricsConfig {
                feature_dim: 64,
                feature_seed: 7,
            },
            bench: BenchConfig {
                warmups: 10,
                runs: 60,
                repeats: 3,
            },
        }
    }

    /// Sets the scale schedule of both the tokenizer and the transformer.
    pub fn with_schedule(mut self, schedule: ScaleSchedule) -> Self {
        self.tokenizer.schedule = schedule.clone();
        self.nsp.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.nsp.validate()?;
        self.tokenizer.downsamplings()?;
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::Config(what.to_string())) };
        check(self.nsp.schedule == self.tokenizer.schedule, "nsp and tokenizer schedules differ")?;
        check(self.nsp.vocab == self.tokenizer.vocab, "nsp vocabulary differs from the codebook size")?;
        check(self.nsp.code_dim == self.tokenizer.code_dim, "nsp code width differs from the codebook width")?;
        check(self.nsp.embed_dim == self.encoder.embed_dim, "nsp condition width differs from the encoder output")?;
        check(self.encoder.embed_dim == self.synth.embed_dim, "encoder output differs from the image embedding width")?;
        check(self.encoder.n_channels == self.synth.channels, "encoder channel count differs from the data")?;
        check(self.encoder.n_samples == self.synth.samples, "encoder sample count differs from the preprocessed data")?;
        check(self.preprocess.target_rate == self.synth.target_rate, "preprocess target rate differs from the data")?;
        check(self.tokenizer.image_size == self.synth.image_size, "tokenizer image size differs from the data")?;
        check(self.tokenizer.image_channels == self.synth.image_channels, "tokenizer image channels differ from the data")?;
        check(self.generate.top_k >= 1 && self.generate.top_k <= self.nsp.vocab, "generation top-k outside 1..=vocab")?;
        check(self.bench.runs >= 1 && self.bench.repeats >= 1, "bench needs at least one run and repeat")?;
        Ok(())
    }

    /// Compact JSON with keys in sorted order.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.sequential = false;
        Ok(serde_json::to_string(&serde_json::to_value(&c)?)?)
    }

    /// SHA-256 of the canonical JSON. `sequential` is excluded.
    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.canonical_json()?.as_bytes()).into())
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(self.hash()?.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(self)?)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_consistent() {
        RunConfig::desk().validate().unwrap();
        RunConfig::desk()
            .with_schedule(ScaleSchedule::squares(&[1, 2, 4]).unwrap())
            .validate()
            .unwrap();
    }

    #[test]
    fn hash_is_stable_and_ignores_sequential() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.sequential = true;
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert!(a.canonical_json().unwrap().starts_with("{\"alignment\":"));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let a = RunConfig::desk();
        a.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), a);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut c = RunConfig::desk();
        c.nsp.vocab = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
