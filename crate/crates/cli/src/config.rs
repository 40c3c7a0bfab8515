//! Setting resolution: command-line flags override config-file entries,
//! which override the environment seed, which overrides built-in defaults.
//! Every command echoes its version, seed, and effective settings before
//! doing any work, so runs are reproducible from their own logs.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use drau::error::{Error, Result};

/// Name of the environment variable holding the fallback seed.
pub const SEED_ENV: &str = "DRAU_SEED";

/// A parsed flat `key = value` config file. Keys are consumed as commands
/// resolve their settings; anything left over is unknown and rejected.
pub struct Overlay {
    entries: BTreeMap<String, (usize, String)>,
    path: String,
}

impl Overlay {
    /// An empty overlay, used when no --config flag was given.
    pub fn empty() -> Overlay {
        Overlay {
            entries: BTreeMap::new(),
            path: String::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Overlay> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(display.clone(), i + 1, format!("expected key=value, got {line:?}"))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(display.clone(), i + 1, "empty key"));
            }
            if entries
                .insert(key.clone(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::parse(
                    display.clone(),
                    i + 1,
                    format!("duplicate key {key}"),
                ));
            }
        }
        Ok(Overlay {
            entries,
            path: display,
        })
    }

    /// Pull one typed value out of the overlay, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|_| {
                Error::parse(
                    self.path.clone(),
                    line,
                    format!("bad value {raw:?} for key {key}"),
                )
            }),
        }
    }

    /// Every key a command understands must have been taken by now.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::parse(
                self.path,
                line,
                format!("unknown key {key}"),
            ));
        }
        Ok(())
    }
}

/// Flag beats file beats default.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    overlay: &mut Overlay,
    key: &str,
    default: T,
) -> Result<T> {
    let file = overlay.take(key)?;
    Ok(flag.or(file).unwrap_or(default))
}

/// Seed resolution adds the environment layer: flag beats file beats
/// environment beats default.
pub fn resolve_seed(flag: Option<u64>, overlay: &mut Overlay, default: u64) -> Result<u64> {
    let file = overlay.take("seed")?;
    let env = match std::env::var(SEED_ENV) {
        Ok(raw) => Some(raw.parse().map_err(|_| {
            Error::config(format!("{SEED_ENV} holds {raw:?}, expected an integer"))
        })?),
        Err(_) => None,
    };
    Ok(flag.or(file).or(env).unwrap_or(default))
}

/// Print the reproducibility header: version, seed, then every effective
/// setting on one `config:` line.
pub fn echo(command: &str, seed: u64, pairs: &[(&str, String)]) {
    println!("version: {}", env!("CARGO_PKG_VERSION"));
    println!("seed: {seed}");
    let mut line = format!("config: {command}");
    for (key, value) in pairs {
        line.push_str(&format!(" {key}={value}"));
    }
    println!("{line}");
}

/// Shorthand for building `echo` pairs from displayable values.
#[macro_export]
macro_rules! pairs {
    ($($key:literal => $value:expr),* $(,)?) => {
        &[$(($key, format!("{}", $value))),*]
    };
}
