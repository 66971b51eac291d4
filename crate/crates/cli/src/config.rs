//! Run configuration: a TOML file merged with `--set key=value` overrides,
//! deserialized strictly (unknown keys are rejected) and written back into
//! every run directory so runs are self-describing.

use anyhow::{anyhow, bail, Context, Result};
use cnd_core::analysis::AnalysisConfig;
use cnd_core::conditioning::Phase2Config;
use cnd_core::contrastive::ContrastiveConfig;
use cnd_core::diffusion::{AutoencoderTrainConfig, DiffusionTrainConfig, UNetConfig};
use cnd_core::evaluation::ClassifierTrainConfig;
use cnd_core::fmri_encoder::EncoderConfig;
use cnd_core::synth_data::CorpusSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Way counts n to evaluate.
    pub ways: Vec<usize>,
    /// Trials per (sample, n).
    pub trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ways: vec![2, 5, 10], trials: 100 }
    }
}

/// Paths to artifacts produced by earlier runs. Stages fall back to the
/// current run directory when a path is absent (as in `all`, which chains
/// every stage in one directory).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub corpus_dir: Option<PathBuf>,
    pub encoder_ckpt: Option<PathBuf>,
    pub autoencoder_ckpt: Option<PathBuf>,
    pub unet_ckpt: Option<PathBuf>,
    pub schedule_json: Option<PathBuf>,
    pub condition_ckpt: Option<PathBuf>,
    pub generated_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it. The `seed`
    /// fields nested in sections are overwritten from this value.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub autoencoder: AutoencoderTrainConfig,
    pub unet: UNetConfig,
    pub diffusion: DiffusionTrainConfig,
    pub phase2: Phase2Config,
    pub classifier: ClassifierTrainConfig,
    pub eval: EvalSection,
    pub analysis: AnalysisConfig,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusSpec {
            num_classes: 10,
            samples_per_class_train: 40,
            samples_per_class_test: 2,
            voxel_count: 256,
            image_size: 32,
            ..CorpusSpec::default()
        };
        let encoder = EncoderConfig {
            embed_dim: 64,
            encoder_layers: 3,
            decoder_layers: 1,
            mask_ratio: 0.5,
            ..EncoderConfig::default()
        };
        RunConfig {
            seed: 7,
            corpus,
            encoder,
            contrastive: ContrastiveConfig::default(),
            autoencoder: AutoencoderTrainConfig::default(),
            unet: UNetConfig::default(),
            diffusion: DiffusionTrainConfig::default(),
            phase2: Phase2Config::default(),
            classifier: ClassifierTrainConfig::default(),
            eval: EvalSection::default(),
            analysis: AnalysisConfig::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    /// The UNet configuration with corpus-derived fields filled in.
    pub fn effective_unet(&self) -> UNetConfig {
        let mut u = self.unet.clone();
        u.num_classes = self.corpus.num_classes;
        u.latent_side = self.corpus.image_size / cnd_core::diffusion::LATENT_DOWNSAMPLE;
        u
    }
}

/// Loads the config file (or defaults), applies `--set` overrides and the
/// `--seed` flag, then deserializes strictly.
pub fn resolve(
    config_path: Option<&Path>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<RunConfig> {
    let mut root: toml::Value = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config file {}", p.display()))?;
            let table: toml::Table = text
                .parse()
                .with_context(|| format!("malformed TOML in {}", p.display()))?;
            toml::Value::Table(table)
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for s in sets {
        apply_set(&mut root, s)?;
    }
    let mut cfg: RunConfig = root.try_into().map_err(|e| anyhow!("invalid config: {e}"))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Applies one `key.path=value` override onto the TOML tree. The value is
/// parsed as TOML when possible and treated as a bare string otherwise.
fn apply_set(root: &mut toml::Value, s: &str) -> Result<()> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got '{s}'"))?;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("--set key '{path}' has an empty path segment");
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t.get("v").cloned().unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("--set key '{path}' crosses a non-table value"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("--set key '{path}' crosses a non-table value"))?;
    table.insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_roundtrip() {
        let cfg = resolve(None, None, &[]).unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::Value::Table(text.parse::<toml::Table>().unwrap())
            .try_into()
            .unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.corpus.num_classes, 10);
    }

    #[test]
    fn set_overrides_apply_with_types() {
        let cfg = resolve(
            None,
            Some(99),
            &[
                "contrastive.alpha_c=1.0".into(),
                "encoder.mask_ratio=0.75".into(),
                "eval.ways=[2,10]".into(),
                "corpus.num_classes=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.contrastive.alpha_c, 1.0);
        assert_eq!(cfg.encoder.mask_ratio, 0.75);
        assert_eq!(cfg.eval.ways, vec![2, 10]);
        assert_eq!(cfg.corpus.num_classes, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(None, None, &["no_such_key=1".into()]).is_err());
        assert!(resolve(None, None, &["contrastive.bogus=1".into()]).is_err());
    }

    #[test]
    fn malformed_set_is_rejected() {
        assert!(resolve(None, None, &["novalue".into()]).is_err());
        assert!(resolve(None, None, &["a..b=1".into()]).is_err());
    }
}
