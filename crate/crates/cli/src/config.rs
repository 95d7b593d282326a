//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Command {
    Solve,
    Control,
    Bridge,
    Moment,
    Stability,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Control => "control",
            Command::Bridge => "bridge",
            Command::Moment => "moment",
            Command::Stability => "stability",
        }
    }

    fn allowed_keys(self) -> &'static [&'static str] {
        match self {
            Command::Solve => &["mu1", "mu2", "kernel", "eps", "t", "tol", "max_iters", "exhaustion", "grid"],
            Command::Control => &["p0", "p1", "eps", "tol", "max_iters", "eps_sweep", "grid"],
            Command::Bridge => &[
                "p0", "p1", "eps", "tol", "max_iters", "n_paths", "n_steps", "seed", "full_paths", "bins",
                "bootstrap", "grid",
            ],
            Command::Moment => &[
                "p1",
                "r",
                "eps0",
                "steps",
                "eps_schedule",
                "damping",
                "tol",
                "max_outer",
                "init",
                "inner_tol",
                "pushforward_threshold",
                "grid",
            ],
            Command::Stability => &[
                "instance",
                "mu1",
                "mu2",
                "kernel",
                "eps",
                "t",
                "family",
                "indices",
                "amplitude",
                "bandwidth",
                "seed",
                "r_prime",
                "probe_drift",
                "tol",
                "grid",
            ],
        }
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "solve" => Ok(Command::Solve),
            "control" => Ok(Command::Control),
            "bridge" => Ok(Command::Bridge),
            "moment" => Ok(Command::Moment),
            "stability" => Ok(Command::Stability),
            other => Err(CliError::Invalid(format!("unknown command {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    entries: BTreeMap<String, String>,
    base_dir: PathBuf,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| CliError::Config {
            line,
            msg: format!("expected `key = value`, found {body:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(CliError::Config {
                line,
                msg: "empty key".into(),
            });
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(CliError::Config {
                line,
                msg: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Builds a configuration from an optional file and overrides; overrides win.
    pub fn load(
        command: Command,
        path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let (mut entries, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (parse_entries(&text)?, dir)
            }
            None => (BTreeMap::new(), PathBuf::new()),
        };
        if let Some(c) = entries.remove("command") {
            if c != command.name() {
                return Err(CliError::Invalid(format!(
                    "config is for command {c:?}, invoked as {:?}",
                    command.name()
                )));
            }
        }
        for (k, v) in overrides {
            entries.insert(k.clone(), v.clone());
        }
        let allowed = command.allowed_keys();
        if let Some(k) = entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Invalid(format!(
                "unknown key {k:?} for command {}",
                command.name()
            )));
        }
        Ok(Self {
            command,
            entries,
            base_dir,
        })
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Invalid(format!("missing required key {key:?}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Invalid(format!("cannot parse {key} = {v:?}")))
            })
            .transpose()
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.parse(key)?
            .ok_or_else(|| CliError::Invalid(format!("missing required key {key:?}")))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(CliError::Invalid(format!("cannot parse {key} = {v:?} as a boolean"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<T>()
                            .map_err(|_| CliError::Invalid(format!("cannot parse {key} entry {s:?}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// A path value resolved against the configuration file's directory.
    pub fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# header\ncommand = solve\n\neps = 0.5  # trailing\ntol=1e-9\n").unwrap();
        let cfg = RunConfig::load(Command::Solve, Some(&path), &[("eps".into(), "0.25".into())]).unwrap();
        assert_eq!(cfg.parse_required::<f64>("eps").unwrap(), 0.25);
        assert_eq!(cfg.parse_required::<f64>("tol").unwrap(), 1e-9);
        assert_eq!(cfg.resolve("mu.csv"), dir.path().join("mu.csv"));
    }

    #[test]
    fn bad_lines_are_reported() {
        let err = parse_entries("a = 1\nnonsense\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_entries("a = 1\na = 2\n").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn unknown_keys_and_wrong_command_are_rejected() {
        assert!(RunConfig::load(Command::Solve, None, &[("n_paths".into(), "3".into())]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "command = moment\n").unwrap();
        assert!(RunConfig::load(Command::Solve, Some(&path), &[]).is_err());
    }
}
