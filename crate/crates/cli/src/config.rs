// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run settings: built-in defaults, overridden by a `key = value` file,
//! overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use kneuron::attribution::{IgPath, RefineConfig};
use kneuron::facts::WorldSpec;
use kneuron::trainer::TrainConfig;
use kneuron::{KnError, Result};

macro_rules! knobs {
    ($($key:ident: $ty:ty = $default:literal, $doc:literal;)*) => {
        /// Settings shared by every subcommand. Each flag is also a config
        /// file key, with dashes written as underscores.
        #[derive(clap::Args, Clone, Debug, Default)]
        pub struct Knobs {
            $(
                #[doc = $doc]
                #[arg(long, help_heading = "Settings")]
                pub $key: Option<$ty>,
            )*
        }

        /// `(key, default, description)` for every setting, in echo order.
        pub const KEYS: &[(&str, &str, &str)] = &[$((stringify!($key), $default, $doc)),*];

        impl Knobs {
            fn given(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$key {
                        out.push((stringify!($key), v.to_string()));
                    }
                )*
                out
            }
        }
    };
}

knobs! {
    seed: u64 = "0", "Seed for world generation, initialization, training order and controls";
    relations: usize = "8", "Number of relations in the world";
    templates: usize = "9", "Prompt templates per relation (4 to 10)";
    entities_per_type: usize = "100", "Entities per entity type";
    facts_per_relation: usize = "50", "Facts per relation";
    layers: usize = "4", "Transformer layers";
    d_model: usize = "128", "Hidden width";
    d_ffn: usize = "512", "FFN intermediate width";
    heads: usize = "4", "Attention heads";
    max_seq_len: usize = "32", "Longest supported sequence";
    lr: f32 = "0.001", "Adam learning rate";
    batch_size: usize = "32", "Training batch size";
    warmup: usize = "500", "Linear warmup steps";
    max_steps: usize = "20000", "Training step budget";
    target_accuracy: f64 = "1.0", "Stop training once top-1 accuracy reaches this";
    eval_interval: usize = "250", "Steps between evaluations while training";
    ig_steps: usize = "20", "Riemann steps for integrated gradients";
    ig_path: String = "joint", "Integration path: joint or independent";
    t_fraction: f32 = "0.2", "Coarse threshold as a fraction of the maximum score";
    p_init: f64 = "0.7", "Initial prompt-sharing threshold";
    p_step: f64 = "0.05", "Sharing threshold adjustment step";
    adapt_t: bool = "true", "Also search the coarse threshold when the sharing threshold alone misses the size band";
    top_k: usize = "200", "Scores kept per query in the attribution TSV";
    full_maps: bool = "false", "Also write every attribution map in binary";
    group_size: usize = "9", "Prompts per group in the activation study";
    lambda1: f32 = "1", "Weight of the old tail embedding removed by an update";
    lambda2: f32 = "8", "Weight of the new tail embedding added by an update";
    sharing_cap: f64 = "0.1", "Update only neurons in fewer than this fraction of the relation's sets";
    budget: usize = "20", "Neurons zeroed when erasing a relation";
    eval_stride: usize = "5", "Keep every n-th prompt when measuring edit side effects";
    jobs: usize = "0", "Worker threads (0 = all cores)";
}

/// Fully resolved settings as strings, with their origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<&'static str, (String, Origin)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    File,
    Flag,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Default => "default",
            Origin::File => "file",
            Origin::Flag => "flag",
        }
    }
}

/// Parses a flat `key = value` file. `#` starts a comment; blank lines are
/// ignored; dashes in keys are read as underscores.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| KnError::Config(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_owned()));
    }
    Ok(out)
}

impl Settings {
    pub fn resolve(file: Option<&Path>, knobs: &Knobs) -> Result<Self> {
        let mut values: BTreeMap<&'static str, (String, Origin)> = KEYS
            .iter()
            .map(|&(k, d, _)| (k, (d.to_owned(), Origin::Default)))
            .collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| KnError::Config(format!("config file {}: {e}", path.display())))?;
            for (k, v) in parse_config_text(&text)? {
                let key = KEYS
                    .iter()
                    .find(|(name, _, _)| *name == k)
                    .map(|(name, _, _)| *name)
                    .ok_or_else(|| KnError::Config(format!("unknown config key {k:?}")))?;
                values.insert(key, (v, Origin::File));
            }
        }
        for (k, v) in knobs.given() {
            values.insert(k, (v, Origin::Flag));
        }
        let s = Self { values };
        s.check()?;
        Ok(s)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let (raw, origin) = self
            .values
            .get(key)
            .ok_or_else(|| KnError::Config(format!("no setting {key:?}")))?;
        raw.parse().map_err(|_| {
            KnError::Config(format!("setting {key} = {raw:?} ({}) does not parse", origin.name()))
        })
    }

    /// Every setting in key order, for manifests.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.iter().map(|(k, (v, _))| ((*k).to_owned(), v.clone())).collect()
    }

    /// Type-checks every value up front so bad files fail before any work.
    fn check(&self) -> Result<()> {
        self.world()?;
        self.train()?;
        self.refine()?;
        self.ig_path()?;
        for key in ["layers", "d_model", "d_ffn", "heads", "max_seq_len", "top_k", "group_size", "budget", "eval_stride", "jobs"] {
            self.get::<usize>(key)?;
        }
        for key in ["lambda1", "lambda2"] {
            self.get::<f32>(key)?;
        }
        self.get::<f64>("sharing_cap")?;
        self.get::<bool>("full_maps")?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn world(&self) -> Result<WorldSpec> {
        Ok(WorldSpec {
            n_relations: self.get("relations")?,
            templates_per_relation: self.get("templates")?,
            entities_per_type: self.get("entities_per_type")?,
            facts_per_relation: self.get("facts_per_relation")?,
            seed: self.seed()?,
        })
    }

    pub fn model(&self, vocab_size: usize) -> Result<kneuron::model::ModelConfig> {
        let cfg = kneuron::model::ModelConfig {
            n_layers: self.get("layers")?,
            d_model: self.get("d_model")?,
            d_ffn: self.get("d_ffn")?,
            n_heads: self.get("heads")?,
            vocab_size,
            max_seq_len: self.get("max_seq_len")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.get("lr")?,
            batch_size: self.get("batch_size")?,
            warmup_steps: self.get("warmup")?,
            max_steps: self.get("max_steps")?,
            target_accuracy: self.get("target_accuracy")?,
            eval_interval: self.get("eval_interval")?,
            seed: self.seed()?,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn refine(&self) -> Result<RefineConfig> {
        let cfg = RefineConfig {
            t_fraction: self.get("t_fraction")?,
            p_init: self.get("p_init")?,
            p_step: self.get("p_step")?,
            ig_steps: self.get("ig_steps")?,
            adapt_t: self.get("adapt_t")?,
            ..RefineConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ig_path(&self) -> Result<IgPath> {
        self.get::<String>("ig_path")?.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nlambda2 = 4\nig-steps=30\n\n").unwrap();
        let knobs = Knobs {
            ig_steps: Some(50),
            ..Knobs::default()
        };
        let s = Settings::resolve(Some(&path), &knobs).unwrap();
        assert_eq!(s.get::<usize>("ig_steps").unwrap(), 50);
        assert_eq!(s.get::<f32>("lambda2").unwrap(), 4.0);
        assert_eq!(s.get::<f32>("lambda1").unwrap(), 1.0);
    }

    #[test]
    fn unknown_or_malformed_entries_are_rejected() {
        assert!(parse_config_text("no equals sign").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "colour = red\n").unwrap();
        assert!(Settings::resolve(Some(&path), &Knobs::default()).is_err());
        std::fs::write(&path, "ig_path = sideways\n").unwrap();
        assert!(Settings::resolve(Some(&path), &Knobs::default()).is_err());
    }

    #[test]
    fn defaults_match_library_defaults() {
        let s = Settings::resolve(None, &Knobs::default()).unwrap();
        assert_eq!(s.world().unwrap(), WorldSpec::default());
        let r = s.refine().unwrap();
        assert_eq!(
            r,
            RefineConfig {
                adapt_t: true,
                ..RefineConfig::default()
            }
        );
        let t = s.train().unwrap();
        assert_eq!(t.lr, TrainConfig::default().lr);
        assert_eq!(t.max_steps, 20_000);
    }
}
