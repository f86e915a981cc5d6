//! Layered settings: command-line flags, then the config file, then defaults.
//!
//! The config file is TOML. Keys are the long flag names with dashes turned
//! into underscores, either at top level or in a table named after the
//! subcommand (`[gen]`, `[train_lda]`, ...). A subcommand table wins over top
//! level.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

pub struct Settings {
    file: Table,
    section: &'static str,
    /// Every resolved value in resolution order.
    effective: Vec<(String, Value)>,
}

impl Settings {
    pub fn load(path: Option<&Path>, section: &'static str) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        Ok(Self {
            file,
            section,
            effective: Vec::new(),
        })
    }

    fn from_file(&self, key: &str) -> Option<&Value> {
        self.file
            .get(self.section)
            .and_then(Value::as_table)
            .and_then(|t| t.get(key))
            .or_else(|| self.file.get(key).filter(|v| !v.is_table()))
    }

    fn record<T: Serialize>(&mut self, key: &str, value: &T) -> Result<(), CliError> {
        let echoed = Value::try_from(value)
            .map_err(|e| CliError::Config(format!("config key {key:?}: {e}")))?;
        self.effective.push((key.to_string(), echoed));
        Ok(())
    }

    fn resolve<T: DeserializeOwned + Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        let value = match (flag, self.from_file(key)) {
            (Some(v), _) => Some(v),
            (None, Some(v)) => Some(
                v.clone()
                    .try_into::<T>()
                    .map_err(|e| CliError::Config(format!("config key {key:?}: {e}")))?,
            ),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.record(key, v)?;
        }
        Ok(value)
    }

    pub fn get<T: DeserializeOwned + Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        match self.resolve(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.record(key, &default)?;
                Ok(default)
            }
        }
    }

    pub fn optional<T: DeserializeOwned + Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        self.resolve(key, flag)
    }

    pub fn require<T: DeserializeOwned + Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, CliError> {
        self.resolve(key, flag)?.ok_or_else(|| {
            CliError::Config(format!(
                "missing --{}; pass the flag or set {key:?} in the config file",
                key.replace('_', "-")
            ))
        })
    }

    /// The effective configuration as a TOML table under the subcommand name.
    pub fn to_toml(&self) -> String {
        let mut inner = Table::new();
        for (k, v) in &self.effective {
            inner.insert(k.clone(), v.clone());
        }
        let mut outer = Table::new();
        outer.insert(self.section.to_string(), Value::Table(inner));
        toml::to_string(&outer).expect("tables always serialize")
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, String)> {
        self.effective.iter().map(|(k, v)| (k.as_str(), v.to_string()))
    }
}
