//! Flat `key=value` run configuration with built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use termembed::contrastive::{MsParams, MsVariant};
use termembed::encoder::{EncoderConfig, InjectedTrainConfig};
use termembed::kge::{KgeKind, KgeTrainConfig};
use termembed::sampling::{ContrastiveTrainConfig, SamplingConfig};
use termembed::synthetic::SyntheticConfig;

use crate::error::CliError;

/// Keys naming input files. Their content hashes go into the manifest.
pub const PATH_KEYS: &[&str] = &[
    "corpus",
    "dictionary",
    "vocab",
    "contexts",
    "triples",
    "eval_triples",
    "known_triples",
    "kge",
    "encoder",
    "types",
    "relatedness",
];

pub const DEFAULTS: &[(&str, &str)] = &[
    ("out", "runs"),
    ("seed", "0"),
    // per-phase seeds; empty means `seed`
    ("kge_seed", ""),
    ("enc_seed", ""),
    ("inj_seed", ""),
    ("con_seed", ""),
    // inputs
    ("corpus", ""),
    ("dictionary", ""),
    ("vocab", ""),
    ("contexts", ""),
    ("triples", ""),
    ("eval_triples", ""),
    ("known_triples", ""),
    ("kge", ""),
    ("encoder", ""),
    ("types", ""),
    ("relatedness", ""),
    // corpus
    ("window", "32"),
    ("split_train", "0.90"),
    ("split_test", "0.06"),
    ("split_valid", "0.04"),
    // kge
    ("kge_model", "complex"),
    ("kge_dim", "64"),
    ("kge_epochs", "200"),
    ("kge_lr", "0.05"),
    ("kge_negatives", "1"),
    ("kge_margin", "4.0"),
    ("kge_l2", "0.0001"),
    ("kge_eval_every", "0"),
    // encoder
    ("enc_layers", "4"),
    ("enc_hidden", "64"),
    ("enc_heads", "4"),
    ("enc_ffn", "256"),
    ("enc_max_len", "64"),
    ("enc_injection_layer", "3"),
    ("enc_candidates", "5"),
    ("enc_pooling", "mean"),
    ("enc_el_over_candidates", "false"),
    ("enc_init_std", "0.02"),
    // injection training
    ("inj_epochs", "3"),
    ("inj_batch", "16"),
    ("inj_lr", "0.001"),
    ("inj_warmup", "0.1"),
    ("inj_mask_rate", "0.15"),
    // contrastive training
    ("loss", "v3"),
    ("ms_alpha", "2"),
    ("ms_beta", "50"),
    ("ms_epsilon", "0.1"),
    ("ms_lambda", "0.5"),
    ("ms_lambda_p", "1"),
    ("ms_lambda_n", "0.5"),
    ("con_epochs", "3"),
    ("con_steps_per_epoch", "0"),
    ("con_accumulation", "8"),
    ("con_lr", "0.0005"),
    ("con_warmup", "0.1"),
    ("con_prototypes", "4"),
    ("con_k", "20"),
    ("con_m", "30"),
    ("con_per_term_cap", "4"),
    ("con_per_entity", "2"),
    ("weight_decay", "0.01"),
    ("clip", "1.0"),
    // evaluation
    ("mscm_k", "40"),
    ("theta_min", "0.50"),
    ("theta_max", "0.99"),
    ("theta_step", "0.01"),
    // gradcheck
    ("gc_instances", "100"),
    // synthetic data
    ("synth_concepts", "40"),
    ("synth_synonyms", "5"),
    ("synth_types", "4"),
    ("synth_sentences", "4"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown setting {key:?}"))),
        }
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    /// Loads a config file of `key=value` lines; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("setting {key} has no default"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("invalid value {v:?} for {key}")))
    }

    /// Optional input path; must exist when given.
    pub fn path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(None);
        }
        let p = PathBuf::from(v);
        if !p.exists() {
            return Err(CliError::Config(format!(
                "{key} path {} does not exist",
                p.display()
            )));
        }
        Ok(Some(p))
    }

    pub fn require(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)?
            .ok_or_else(|| CliError::Config(format!("this command needs --{key} (or {key}=...)")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    /// A phase seed, falling back to the run seed.
    pub fn phase_seed(&self, key: &str) -> Result<u64, CliError> {
        if self.get(key).is_empty() {
            self.seed()
        } else {
            self.parse(key)
        }
    }

    pub fn kge_kind(&self) -> Result<KgeKind, CliError> {
        Ok(self.get("kge_model").parse()?)
    }

    pub fn kge_config(&self) -> Result<KgeTrainConfig, CliError> {
        Ok(KgeTrainConfig {
            dim: self.parse("kge_dim")?,
            epochs: self.parse("kge_epochs")?,
            lr: self.parse("kge_lr")?,
            negatives_per_positive: self.parse("kge_negatives")?,
            seed: self.phase_seed("kge_seed")?,
            margin: self.parse("kge_margin")?,
            l2: self.parse("kge_l2")?,
        })
    }

    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig, CliError> {
        let inj: usize = self.parse("enc_injection_layer")?;
        let cfg = EncoderConfig {
            vocab_size,
            num_layers: self.parse("enc_layers")?,
            hidden: self.parse("enc_hidden")?,
            heads: self.parse("enc_heads")?,
            ffn: self.parse("enc_ffn")?,
            max_len: self.parse("enc_max_len")?,
            injection_layer: (inj > 0).then_some(inj),
            candidates: self.parse("enc_candidates")?,
            pooling: self.get("enc_pooling").parse()?,
            el_over_candidates: self.parse("enc_el_over_candidates")?,
            init_std: self.parse("enc_init_std")?,
            seed: self.phase_seed("enc_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn injected_config(&self) -> Result<InjectedTrainConfig, CliError> {
        Ok(InjectedTrainConfig {
            epochs: self.parse("inj_epochs")?,
            batch_size: self.parse("inj_batch")?,
            lr: self.parse("inj_lr")?,
            warmup_frac: self.parse("inj_warmup")?,
            weight_decay: self.parse("weight_decay")?,
            clip: self.parse("clip")?,
            mask_rate: self.parse("inj_mask_rate")?,
            seed: self.phase_seed("inj_seed")?,
        })
    }

    pub fn ms_params(&self) -> Result<MsParams, CliError> {
        let p = MsParams {
            alpha: self.parse("ms_alpha")?,
            beta: self.parse("ms_beta")?,
            epsilon: self.parse("ms_epsilon")?,
            lambda: self.parse("ms_lambda")?,
            lambda_p: self.parse("ms_lambda_p")?,
            lambda_n: self.parse("ms_lambda_n")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn loss_variant(&self) -> Result<MsVariant, CliError> {
        Ok(self.get("loss").parse()?)
    }

    pub fn contrastive_config(&self) -> Result<ContrastiveTrainConfig, CliError> {
        Ok(ContrastiveTrainConfig {
            epochs: self.parse("con_epochs")?,
            steps_per_epoch: self.parse("con_steps_per_epoch")?,
            accumulation: self.parse("con_accumulation")?,
            lr: self.parse("con_lr")?,
            warmup_frac: self.parse("con_warmup")?,
            weight_decay: self.parse("weight_decay")?,
            clip: self.parse("clip")?,
            per_entity: self.parse("con_per_entity")?,
            ms: self.ms_params()?,
            sampling: SamplingConfig {
                prototypes_per_batch: self.parse("con_prototypes")?,
                k: self.parse("con_k")?,
                m: self.parse("con_m")?,
                per_term_cap: self.parse("con_per_term_cap")?,
            },
            seed: self.phase_seed("con_seed")?,
        })
    }

    pub fn theta_grid(&self) -> Result<Vec<f64>, CliError> {
        let lo: f64 = self.parse("theta_min")?;
        let hi: f64 = self.parse("theta_max")?;
        let step: f64 = self.parse("theta_step")?;
        if !(step > 0.0) || hi < lo {
            return Err(CliError::Config(
                "theta grid needs theta_min <= theta_max and step > 0".into(),
            ));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| lo + i as f64 * step).collect())
    }

    pub fn synthetic_config(&self) -> Result<SyntheticConfig, CliError> {
        Ok(SyntheticConfig {
            concepts: self.parse("synth_concepts")?,
            synonyms: self.parse("synth_synonyms")?,
            types: self.parse("synth_types")?,
            sentences_per_term: self.parse("synth_sentences")?,
            seed: self.seed()?,
            ..SyntheticConfig::default()
        })
    }
}
