use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plugd::fsutil::write_atomic;
use plugd::kv::KvConfig;
use plugd::Result;

pub const RUN_FILE: &str = "run.conf";

/// Resolved options of one invocation. Values come from the optional
/// config file, then CLI flags override; every value read is recorded so
/// the saved file reproduces the run.
pub struct RunConfig {
    file: KvConfig,
    resolved: KvConfig,
}

impl RunConfig {
    pub fn new(subcommand: &str, config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        let mut resolved = KvConfig::default();
        resolved.set("subcommand", subcommand);
        if let Some(p) = config {
            resolved.set("config_file", p.display().to_string());
        }
        Ok(Self { file, resolved })
    }

    /// Flag value if given, else the config file's, else `default`.
    pub fn pick<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.file.get(key)?.unwrap_or(default),
        };
        self.resolved.set(key, v.to_string());
        Ok(v)
    }

    pub fn pick_path(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        let p = flag.or_else(|| self.file.get_str(key).map(PathBuf::from))?;
        self.resolved.set(key, p.display().to_string());
        Some(p)
    }

    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = self.pick("seed", flag, 42)?;
        log::info!("seed = {seed}");
        Ok(seed)
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.set(key, value.to_string());
    }

    /// Config-file entries, for model settings read by the library.
    pub fn file(&self) -> &KvConfig {
        &self.file
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(RUN_FILE), self.resolved.to_text().as_bytes())
    }
}
