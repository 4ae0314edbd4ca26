//! Controller configuration: a TOML file, then `SOVEREIGN_*` environment
//! overrides on top.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::udp::DEFAULT_GROUP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusMode {
    /// In-process simulated bus, advanced in wall-clock time.
    Simulated,
    /// UDP multicast on the LAN.
    Udp,
}

impl FromStr for BusMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simulated" => Ok(BusMode::Simulated),
            "udp" => Ok(BusMode::Udp),
            other => Err(format!("unknown bus mode {other:?}, expected simulated or udp")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub state_path: PathBuf,
    pub bind: SocketAddr,
    /// Listening beyond loopback must be asked for explicitly.
    pub allow_lan: bool,
    pub bus: BusMode,
    pub multicast_group: SocketAddr,
    pub key_lifetime_ms: u64,
    pub kdf_iterations: u32,
    /// Usually left unset and given through `SOVEREIGN_PASSPHRASE`.
    pub passphrase: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            state_path: PathBuf::from("sovereign-home.json"),
            bind: "127.0.0.1:7878".parse().expect("constant"),
            allow_lan: false,
            bus: BusMode::Udp,
            multicast_group: DEFAULT_GROUP.parse().expect("constant"),
            key_lifetime_ms: sovereign_core::keystore::DEFAULT_KEY_LIFETIME_MS,
            kdf_iterations: crate::state_file::DEFAULT_KDF_ITERATIONS,
            passphrase: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("config {0}: {1}")]
    Parse(PathBuf, toml::de::Error),
    #[error("environment variable {0}: {1}")]
    Env(&'static str, String),
    #[error("refusing to listen on {0}: set allow_lan to expose the API beyond loopback")]
    NotLoopback(SocketAddr),
    #[error("no passphrase: set SOVEREIGN_PASSPHRASE or `passphrase` in the config")]
    NoPassphrase,
}

fn env_parse<T: FromStr>(var: &'static str, get: &impl Fn(&str) -> Option<String>) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match get(var) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::Env(var, e.to_string())),
    }
}

impl Config {
    /// Reads `path` if given (a missing default path is fine), then applies
    /// the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read(p.into(), e))?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse(p.into(), e))?
            }
            None => Config::default(),
        };
        c.apply_env(|k| std::env::var(k).ok())?;
        Ok(c)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("SOVEREIGN_STATE") {
            self.state_path = v.into();
        }
        if let Some(v) = env_parse("SOVEREIGN_BIND", &get)? {
            self.bind = v;
        }
        if let Some(v) = env_parse("SOVEREIGN_ALLOW_LAN", &get)? {
            self.allow_lan = v;
        }
        if let Some(v) = env_parse("SOVEREIGN_BUS", &get)? {
            self.bus = v;
        }
        if let Some(v) = env_parse("SOVEREIGN_GROUP", &get)? {
            self.multicast_group = v;
        }
        if let Some(v) = env_parse("SOVEREIGN_KEY_LIFETIME_MS", &get)? {
            self.key_lifetime_ms = v;
        }
        if let Some(v) = get("SOVEREIGN_PASSPHRASE") {
            self.passphrase = Some(v);
        }
        Ok(())
    }

    pub fn check_bind(&self) -> Result<(), ConfigError> {
        if !self.allow_lan && !self.bind.ip().is_loopback() {
            return Err(ConfigError::NotLoopback(self.bind));
        }
        Ok(())
    }

    pub fn passphrase(&self) -> Result<&str, ConfigError> {
        self.passphrase.as_deref().ok_or(ConfigError::NoPassphrase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn file_then_env() {
        let mut c: Config = toml::from_str("bind = \"127.0.0.1:9000\"\nbus = \"simulated\"\n").unwrap();
        assert_eq!(c.bus, BusMode::Simulated);
        let env: HashMap<&str, &str> = [("SOVEREIGN_BIND", "0.0.0.0:80"), ("SOVEREIGN_BUS", "udp")].into();
        c.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(c.bind.port(), 80);
        assert_eq!(c.bus, BusMode::Udp);
        assert!(matches!(c.check_bind(), Err(ConfigError::NotLoopback(_))));
        c.allow_lan = true;
        assert!(c.check_bind().is_ok());
    }

    #[test]
    fn bad_values_are_reported() {
        let mut c = Config::default();
        let err = c.apply_env(|k| (k == "SOVEREIGN_BUS").then(|| "carrier-pigeon".into())).unwrap_err();
        assert!(err.to_string().contains("SOVEREIGN_BUS"));
        assert!(toml::from_str::<Config>("nonsense = 1").is_err());
    }
}
