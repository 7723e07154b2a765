//! Engine configuration, read from a flat `key = value` file.

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub store_dir: Option<PathBuf>,
    pub http_listen: String,
    pub workers: usize,
    /// Evaluate the rules of one message in parallel.
    pub parallel_rules: bool,
    /// Error queue of last resort; must be declared by the application.
    pub system_error_queue: Option<String>,
    pub gc_on_idle: bool,
    pub log_level: String,
    /// Conflict retries per message before it is routed to the system
    /// error queue.
    pub retry_limit: u32,
    pub idle_poll: Duration,
    pub delivery_attempts: u32,
    pub delivery_backoff: Duration,
    pub sync_timeout: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            store_dir: None,
            http_listen: "127.0.0.1:8080".to_string(),
            workers: 1,
            parallel_rules: true,
            system_error_queue: None,
            gc_on_idle: true,
            log_level: "info".to_string(),
            retry_limit: 100,
            idle_poll: Duration::from_millis(100),
            delivery_attempts: 5,
            delivery_backoff: Duration::from_millis(500),
            sync_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value '{value}' for '{key}'")]
    InvalidValue { line: usize, key: String, value: String },
}

impl EngineConfig {
    /// Parses a config file. Blank lines and lines starting with `#` are
    /// ignored; later keys override earlier ones.
    pub fn parse(text: &str) -> Result<EngineConfig, ConfigError> {
        let mut cfg = EngineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                    ConfigError::InvalidValue { key, value, .. } => ConfigError::InvalidValue {
                        line: i + 1,
                        key,
                        value,
                    },
                    other => other,
                })?;
        }
        Ok(cfg)
    }

    /// Sets one key; `line` in the returned error is 0.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = || ConfigError::InvalidValue {
            line: 0,
            key: key.to_string(),
            value: value.to_string(),
        };
        let millis = |v: &str| v.parse::<u64>().map(Duration::from_millis).map_err(|_| invalid());
        match key {
            "storeDir" => self.store_dir = Some(PathBuf::from(value)),
            "httpListen" => self.http_listen = value.to_string(),
            "workers" => {
                self.workers = value.parse().ok().filter(|&n| n >= 1).ok_or_else(invalid)?
            }
            "parallelRules" => self.parallel_rules = value.parse().map_err(|_| invalid())?,
            "systemErrorQueue" => {
                self.system_error_queue = (!value.is_empty()).then(|| value.to_string())
            }
            "gcOnIdle" => self.gc_on_idle = value.parse().map_err(|_| invalid())?,
            "logLevel" => self.log_level = value.to_string(),
            "retryLimit" => self.retry_limit = value.parse().map_err(|_| invalid())?,
            "idlePollMillis" => self.idle_poll = millis(value)?,
            "deliveryAttempts" => {
                self.delivery_attempts = value.parse().ok().filter(|&n| n >= 1).ok_or_else(invalid)?
            }
            "deliveryBackoffMillis" => self.delivery_backoff = millis(value)?,
            "syncTimeoutMillis" => self.sync_timeout = millis(value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let cfg = EngineConfig::parse(
            "# engine\nstoreDir = /tmp/s\nhttpListen=0.0.0.0:9000\nworkers = 4\n\
             systemErrorQueue = sysErr\ngcOnIdle = false\nlogLevel = debug\nretryLimit = 7\n\
             idlePollMillis = 20\ndeliveryAttempts = 2\ndeliveryBackoffMillis = 1\nsyncTimeoutMillis = 50\n",
        )
        .unwrap();
        assert_eq!(cfg.store_dir, Some(PathBuf::from("/tmp/s")));
        assert_eq!(cfg.http_listen, "0.0.0.0:9000");
        assert_eq!(cfg.workers, 4);
        assert_eq!(cfg.system_error_queue.as_deref(), Some("sysErr"));
        assert!(!cfg.gc_on_idle);
        assert_eq!(cfg.retry_limit, 7);
        assert_eq!(cfg.idle_poll, Duration::from_millis(20));
        assert_eq!(cfg.delivery_attempts, 2);
        assert_eq!(cfg.sync_timeout, Duration::from_millis(50));
    }

    #[test]
    fn defaults() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.retry_limit, 100);
        assert_eq!(cfg.idle_poll, Duration::from_millis(100));
        assert_eq!(cfg.delivery_attempts, 5);
        assert_eq!(cfg.delivery_backoff, Duration::from_millis(500));
    }

    #[test]
    fn reports_bad_lines() {
        assert_eq!(EngineConfig::parse("workers"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(
            EngineConfig::parse("\nbogus = 1"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            EngineConfig::parse("workers = 0"),
            Err(ConfigError::InvalidValue { line: 1, .. })
        ));
    }
}
