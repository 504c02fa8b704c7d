//! Flat `key = value` run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then the file
//! given with `--config`, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ghcrnn::model::{ModelConfig, Pooling};
use ghcrnn::training::TrainConfig;

use crate::Failure;

const DEFAULTS: &[(&str, &str)] = &[
    ("mode", "gaussian"),
    ("kappa", "0.1"),
    ("pooling", "none"),
    ("hidden", "16"),
    ("cheb_k", "2"),
    ("t_in", "12"),
    ("t_out", "3"),
    ("embed_width", "8"),
    ("epochs", "100"),
    ("batch_size", "8"),
    ("lr", "0.001"),
    ("patience", "10"),
    ("teacher_decay", "10"),
    ("stride", "1"),
    ("threads", "0"),
    ("split", "0.7,0.1,0.2"),
    ("period", "288"),
    ("out", "out"),
];

/// Keys a config file may set.
const KNOWN: &[&str] = &[
    "series", "edges", "distances", "graph", "checkpoint", "mode", "kappa", "sigma", "pooling",
    "hidden", "cheb_k", "t_in", "t_out", "embed_width", "epochs", "batch_size", "lr", "patience",
    "teacher_decay", "stride", "threads", "split", "period", "seed", "out", "baseline", "settings",
    "nodes", "steps", "repetitions", "memory_nodes", "bench_hidden",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(config: Option<&Path>, flags: &[(&str, Option<String>)]) -> Result<Self, Failure> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Failure::usage(format!("{}:{}: expected 'key = value'", path.display(), i + 1))
                })?;
                let k = k.trim();
                if !KNOWN.contains(&k) {
                    return Err(Failure::usage(format!(
                        "{}:{}: unknown key '{k}'",
                        path.display(),
                        i + 1
                    )));
                }
                values.insert(k.to_string(), v.trim().to_string());
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Failure> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Failure::usage(format!("{key}: required")))?;
        raw.parse()
            .map_err(|_| Failure::usage(format!("{key}: invalid value '{raw}'")))
    }

    /// A path that must exist when the run starts.
    pub fn input(&self, key: &str) -> Result<PathBuf, Failure> {
        let p = PathBuf::from(
            self.raw(key)
                .ok_or_else(|| Failure::usage(format!("{key}: required")))?,
        );
        if !p.exists() {
            return Err(Failure::usage(format!("{key}: file not found: {}", p.display())));
        }
        Ok(p)
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> Result<PathBuf, Failure> {
        let dir = PathBuf::from(self.raw("out").unwrap_or("out"));
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn pooling(&self) -> Result<Pooling, Failure> {
        parse_pooling(self.raw("pooling").unwrap_or("none"))
            .ok_or_else(|| Failure::usage(format!("pooling: invalid value '{}'", self.raw("pooling").unwrap_or(""))))
    }

    pub fn model_config(&self, nodes: usize) -> Result<ModelConfig, Failure> {
        let c = ModelConfig {
            hidden: self.get("hidden")?,
            cheb_k: self.get("cheb_k")?,
            t_in: self.get("t_in")?,
            t_out: self.get("t_out")?,
            embed_width: self.get("embed_width")?,
            ..ModelConfig::new(nodes, self.pooling()?)
        };
        c.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let split: Vec<f64> = self
            .raw("split")
            .unwrap_or("")
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| Failure::usage("split: expected three comma-separated fractions"))?;
        let [a, b, c] = split[..] else {
            return Err(Failure::usage("split: expected three comma-separated fractions"));
        };
        Ok(TrainConfig {
            max_epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            lr: self.get("lr")?,
            patience: self.get("patience")?,
            split: (a, b, c),
            stride: self.get("stride")?,
            teacher_decay_epochs: self.get("teacher_decay")?,
            threads: self.get("threads")?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Writes the resolved configuration as `resolved_config.txt` in `dir`.
    pub fn write_beside(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join("resolved_config.txt");
        std::fs::write(&path, self.to_text())
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
    }
}

/// `none`, or `M1,M2`.
pub fn parse_pooling(s: &str) -> Option<Pooling> {
    let s = s.trim();
    if s == "none" || s == "nopool" {
        return Some(Pooling::Disabled);
    }
    let (a, b) = s.split_once(',')?;
    Some(Pooling::Learned {
        m1: a.trim().parse().ok()?,
        m2: b.trim().parse().ok()?,
    })
}
