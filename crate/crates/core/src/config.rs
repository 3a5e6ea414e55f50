//! Experiment configuration, read from and written to TOML. Every field has a
//! default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Alphabet, LineJoin};
use crate::error::{Error, Result};
use crate::layers::EncoderConfig;
use crate::optim::{CurriculumPhase, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub units: usize,
    /// Collapse steps at inference; the largest line count seen in training
    /// when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { units: 16, steps: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// BLSTM then a linear layer to the label scores.
    #[default]
    Blstm,
    /// The collapsed encoder output is used as label scores directly.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub units: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { kind: DecoderKind::Blstm, units: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    /// Validation samples scored after each epoch.
    pub validation_slice: usize,
    /// Rows kept above and below the outer boxes of a line crop.
    pub crop_margin: usize,
    /// Pixel scale of the data, used to size the projection segmenter.
    pub scale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: None, validation: None, validation_slice: 20, crop_margin: 1, scale: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub alphabet: String,
    pub line_join: LineJoin,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    #[serde(rename = "phase")]
    pub phases: Vec<CurriculumPhase>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            alphabet: "0123456789 ".into(),
            line_join: LineJoin::Space,
            out: None,
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            phases: CurriculumPhase::default_schedule(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::format(source, e.to_string()))?;
        cfg.validate().map_err(|e| Error::format(source, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(&self.alphabet)
    }

    pub fn validate(&self) -> Result<()> {
        let alphabet = self.alphabet()?;
        if self.line_join == LineJoin::Space && !alphabet.contains(' ') {
            return Err(Error::Config("line_join = \"space\" needs a space in the alphabet".into()));
        }
        self.encoder.validate()?;
        self.optimizer.validate()?;
        if self.attention.units == 0 || self.attention.steps == Some(0) || self.decoder.units == 0 {
            return Err(Error::Config("attention units, attention steps and decoder units must be positive".into()));
        }
        if self.decoder.kind == DecoderKind::Softmax {
            if let Some(d) = self.encoder.final_dim.filter(|&d| d != alphabet.len() + 1) {
                return Err(Error::Config(format!(
                    "the softmax decoder reads encoder outputs as label scores, so final_dim must be {} (got {d})",
                    alphabet.len() + 1
                )));
            }
        }
        if self.data.scale == 0 {
            return Err(Error::Config("data scale must be at least 1".into()));
        }
        self.phases.iter().try_for_each(CurriculumPhase::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collapse::CollapseMode;

    #[test]
    fn empty_text_is_the_default_config() {
        assert_eq!(ExperimentConfig::parse("", Path::new("c.toml")).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig { seed: 7, ..Default::default() };
        cfg.data.train = Some("train/manifest.tsv".into());
        cfg.attention.steps = Some(3);
        cfg.encoder.final_dim = Some(24);
        cfg.phases[1].steps = Some(2);
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text, Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_name_the_file_and_key() {
        let err = ExperimentConfig::parse("[optimizer]\nlearning_rat = 0.1\n", Path::new("exp.toml"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("exp.toml") && err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn phases_parse_from_array_of_tables() {
        let text = r#"
            seed = 3
            [[phase]]
            name = "warmup"
            max_lines = 1
            epochs = 2
            collapse = "standard"
            [[phase]]
            name = "full"
            epochs = 1
            collapse = "attention"
            objective = "line"
        "#;
        let cfg = ExperimentConfig::parse(text, Path::new("c.toml")).unwrap();
        assert_eq!(cfg.phases.len(), 2);
        assert_eq!(cfg.phases[1].collapse, CollapseMode::Attention);
        assert_eq!(cfg.phases[1].max_lines, None);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[optimizer]\ndecay = 1.5\n",
            "alphabet = \"01\"\n",
            "[[phase]]\nname = \"x\"\nepochs = 0\ncollapse = \"standard\"\n",
            "[decoder]\nkind = \"softmax\"\n[encoder]\nfinal_dim = 5\n",
        ] {
            assert!(ExperimentConfig::parse(text, Path::new("c.toml")).is_err(), "{text}");
        }
    }
}
