//! Layered configuration: built-in defaults, then a TOML file, then
//! `MTPT_`-prefixed environment variables, then `--seed`.

use std::path::Path;

use mtpt_core::data_synth::SyntheticCorpusConfig;
use mtpt_core::decoding::{BeamConfig, NgramConfig};
use mtpt_core::model::ModelConfig;
use mtpt_core::pseudo_codes::CoderConfig;
use mtpt_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "MTPT_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: SyntheticCorpusConfig,
    pub coder: CoderConfig,
    pub lm: NgramConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: BeamConfig,
}

impl Config {
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.coder.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: mtpt_core::Error| CliError::Config(e.to_string());
        self.corpus.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.decode.validate().map_err(wrap)?;
        if self.coder.clusters < 2 || self.coder.bpe_vocab < self.coder.clusters {
            return Err(CliError::Config("coder.clusters must be >= 2 and coder.bpe_vocab >= coder.clusters".into()));
        }
        if self.lm.order == 0 || !(self.lm.alpha > 0.0) {
            return Err(CliError::Config("lm.order must be >= 1 and lm.alpha > 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `MTPT_SECTION__KEY=value` overrides. Path segments are separated
/// by a double underscore and matched lowercase; values are TOML literals,
/// falling back to a plain string.
pub fn apply_env(table: &mut Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("malformed override variable {key}")));
        }
        let (last, parents) = path.split_last().expect("non-empty");
        let mut t = &mut *table;
        for p in parents {
            let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            t = entry
                .as_table_mut()
                .ok_or_else(|| CliError::Config(format!("{key}: {p} is not a section")))?;
        }
        t.insert(last.clone(), parse_value(&raw));
    }
    Ok(())
}

pub fn load(
    file: Option<&Path>,
    vars: impl IntoIterator<Item = (String, String)>,
    seed: Option<u64>,
) -> Result<Config, CliError> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    apply_env(&mut table, vars)?;
    let mut cfg: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}
