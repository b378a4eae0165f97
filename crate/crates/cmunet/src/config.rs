//! Run configuration: flat `key=value` UTF-8 file with `#` comments.
//! Parsing and printing round-trip exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    // Optimizer.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    // Loss.
    pub dice_smooth: f64,
    pub bce_weight: f64,
    // Schedule and bookkeeping.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data: String,
    pub out: String,
    /// Binarization threshold for metrics and inference.
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dice_smooth: 1.0,
            bce_weight: 0.5,
            epochs: 300,
            batch_size: 8,
            seed: 0,
            data: "data".to_string(),
            out: "runs/default".to_string(),
            threshold: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key} must be true or false, got {value}"))),
    }
}

impl RunConfig {
    /// Set one field from its config-file key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "in_channels" => self.model.in_channels = parse_num(key, value)?,
            "channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 5 {
                    return Err(Error::Config(format!(
                        "channels needs 5 comma-separated widths, got {value}"
                    )));
                }
                for (slot, part) in self.model.channels.iter_mut().zip(parts) {
                    *slot = parse_num(key, part)?;
                }
            }
            "convmixer_depth" => self.model.convmixer_depth = parse_num(key, value)?,
            "convmixer_kernel" => self.model.convmixer_kernel = parse_num(key, value)?,
            "use_convmixer" => self.model.use_convmixer = parse_bool(key, value)?,
            "use_msag" => self.model.use_msag = parse_bool(key, value)?,
            "input_size" => self.model.input_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "dice_smooth" => self.dice_smooth = parse_num(key, value)?,
            "bce_weight" => self.bce_weight = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "data" => self.data = value.to_string(),
            "out" => self.out = value.to_string(),
            "threshold" => self.threshold = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse config text. Missing keys keep their defaults; duplicate keys
    /// are errors (a silently-ignored line is how configs rot).
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{raw}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key '{key}'")));
            }
            config.set(key, value)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text)
    }

    /// Render every field as key=value lines; parse_str inverts this exactly
    /// (floats print in shortest round-trip form).
    pub fn print(&self) -> String {
        let m = &self.model;
        let channels =
            m.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "in_channels={}\nchannels={}\nconvmixer_depth={}\nconvmixer_kernel={}\n\
             use_convmixer={}\nuse_msag={}\ninput_size={}\n\
             lr={}\nbeta1={}\nbeta2={}\neps={}\ndice_smooth={}\nbce_weight={}\n\
             epochs={}\nbatch_size={}\nseed={}\ndata={}\nout={}\nthreshold={}\n",
            m.in_channels,
            channels,
            m.convmixer_depth,
            m.convmixer_kernel,
            m.use_convmixer,
            m.use_msag,
            m.input_size,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.dice_smooth,
            self.bce_weight,
            self.epochs,
            self.batch_size,
            self.seed,
            self.data,
            self.out,
            self.threshold,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.print()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                problems.push(format!("{name} must be in [0,1), got {beta}"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.dice_smooth > 0.0) {
            problems.push(format!("dice_smooth must be positive, got {}", self.dice_smooth));
        }
        if self.bce_weight < 0.0 {
            problems.push(format!("bce_weight must be >= 0, got {}", self.bce_weight));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            problems.push(format!("threshold must be in [0,1], got {}", self.threshold));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
