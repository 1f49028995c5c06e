//! Configuration files.
//!
//! Both run configurations and synthetic benchmark specs are `key = value`
//! files with `[section]` headers (TOML). Keys left out keep their built-in
//! defaults; command-line flags are applied on top of the file.
//!
//! ```toml
//! k = 15
//! lambda = 0.85
//! seed = 7
//!
//! [sgd]
//! learning_rate = 0.001
//! momentum = 0.9
//!
//! [model]
//! embed_dim = 16
//! architecture = { kind = "hidden", hidden_dim = 32 }
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data_io::{read_text, SyntheticSpec};
use crate::error::{PulError, Result};
use crate::types::PulConfig;

pub fn parse_config(text: &str) -> Result<PulConfig> {
    let cfg: PulConfig = parse(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PulConfig> {
    parse_config(&read_text(path)?)
}

pub fn parse_synthetic_spec(text: &str) -> Result<SyntheticSpec> {
    let spec: SyntheticSpec = parse(text)?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_synthetic_spec(path: impl AsRef<Path>) -> Result<SyntheticSpec> {
    parse_synthetic_spec(&read_text(path)?)
}

/// Canonical text form, accepted back by the parsers.
pub fn to_text<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| PulError::Config(e.to_string()))
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| PulError::Config(e.to_string()))
}
