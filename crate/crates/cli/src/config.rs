//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ssnn_core::eventdata::SynthConfig;
use ssnn_core::network::{Architecture, NetworkSpec};
use ssnn_core::neuron::{LifConfig, NeuronConfig};
use ssnn_core::training::{LossWeights, SgdConfig, TrainConfig};
use ssnn_core::DType;

use crate::CliError;

/// Every accepted key with its default, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("arch", "vgg9"),
    ("width_scale", "8"),
    ("stage_timesteps", "8,6,4,2"),
    ("early_classifiers", "true"),
    ("lambda", "default"),
    ("lambda_mode", "constrained"),
    ("epochs", "100"),
    ("batch", "64"),
    ("lr0", "0.1"),
    ("lr_step", "30"),
    ("momentum", "0.9"),
    ("weight_decay", "0.001"),
    ("tau", "2.0"),
    ("theta", "1.0"),
    ("surrogate_a", "1.0"),
    ("detach_reset", "false"),
    ("seed", "0"),
    ("dtype", "f32"),
    ("data_dir", ""),
    ("out_dir", "runs/default"),
    ("frame_ms", "10"),
    ("input_size", "native"),
    ("classes", "2"),
    ("synth_samples", "500"),
    ("synth_size", "16"),
    ("synth_frames", "8"),
    ("synth_seed", "0"),
    ("test_fraction", "0.1"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(cfg_err(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Resolved configuration in key order, one `key = value` per line.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k))).collect()
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse().map_err(|_| cfg_err(format!("`{key}`: cannot parse `{v}`")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| cfg_err(format!("`{key}`: cannot parse `{}`", self.get(key))))
            })
            .collect()
    }

    pub fn dtype(&self) -> Result<DType, CliError> {
        self.get("dtype").parse().map_err(|_| cfg_err(format!("`dtype`: expected f32 or f64, got `{}`", self.get("dtype"))))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        let d = self.get("data_dir");
        (!d.is_empty()).then(|| PathBuf::from(d))
    }

    pub fn frame_ms(&self) -> Result<f64, CliError> {
        let v: f64 = self.parsed("frame_ms")?;
        if !(v > 0.0) {
            return Err(cfg_err("`frame_ms` must be > 0"));
        }
        Ok(v)
    }

    pub fn test_fraction(&self) -> Result<f64, CliError> {
        self.parsed("test_fraction")
    }

    /// `None` keeps the sensor resolution.
    pub fn input_size(&self) -> Result<Option<(usize, usize)>, CliError> {
        let v = self.get("input_size");
        if v == "native" {
            return Ok(None);
        }
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| cfg_err(format!("`input_size`: cannot parse `{v}`")));
        match v.split_once('x') {
            Some((h, w)) => Ok(Some((parse(h)?, parse(w)?))),
            None => {
                let s = parse(v)?;
                Ok(Some((s, s)))
            }
        }
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let mut s = SynthConfig::new(
            self.parsed("synth_samples")?,
            self.parsed("synth_size")?,
            self.parsed("synth_frames")?,
            self.parsed("synth_seed")?,
        );
        s.classes = self.parsed("classes")?;
        s.window_ms = self.frame_ms()?;
        Ok(s)
    }

    fn lif(&self) -> Result<LifConfig, CliError> {
        let lif = LifConfig {
            neuron: NeuronConfig {
                tau: self.parsed("tau")?,
                theta: self.parsed("theta")?,
            },
            surrogate_a: self.parsed("surrogate_a")?,
            detach_reset: self.parsed("detach_reset")?,
        };
        lif.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(lif)
    }

    /// Network spec for a `(channels, H, W)` input.
    pub fn network(&self, in_channels: usize, hw: (usize, usize)) -> Result<NetworkSpec, CliError> {
        let arch = Architecture::parse(self.get("arch")).map_err(|e| cfg_err(e.to_string()))?;
        let mut spec = NetworkSpec::new(arch, &self.list::<usize>("stage_timesteps")?, self.parsed("classes")?, hw);
        spec.width_scale = self.parsed("width_scale")?;
        spec.early_classifiers = self.parsed("early_classifiers")?;
        spec.in_channels = in_channels;
        spec.lif = self.lif()?;
        spec.plan().map_err(|e| cfg_err(e.to_string()))?;
        Ok(spec)
    }

    pub fn loss_weights(&self, heads: usize) -> Result<LossWeights, CliError> {
        let mode = self.get("lambda_mode");
        let given = self.get("lambda");
        let w = match (mode, given) {
            ("constrained", "default") => LossWeights::default_for(heads),
            ("constrained", _) => LossWeights::new(&self.list::<f64>("lambda")?),
            ("unconstrained", "default") => LossWeights::unconstrained(heads, 0.15),
            ("unconstrained", _) => {
                let l = self.list::<f64>("lambda")?;
                if l.len() != heads {
                    return Err(cfg_err(format!("`lambda` has {} entries for {heads} stages", l.len())));
                }
                let others = l.first().copied().filter(|_| heads > 1).unwrap_or(0.0);
                if l[..heads - 1].iter().any(|&v| v != others) {
                    return Err(cfg_err("unconstrained mode needs equal early weights"));
                }
                if l[heads - 1] != 1.0 {
                    return Err(cfg_err("unconstrained mode fixes the final weight to 1"));
                }
                LossWeights::unconstrained(heads, others)
            }
            (m, _) => return Err(cfg_err(format!("`lambda_mode` must be constrained or unconstrained, got `{m}`"))),
        }
        .map_err(|e| cfg_err(e.to_string()))?;
        if w.len() != heads {
            return Err(cfg_err(format!("`lambda` has {} entries for {heads} stages", w.len())));
        }
        Ok(w)
    }

    pub fn train(&self, heads: usize) -> Result<TrainConfig, CliError> {
        let mut t = TrainConfig::new(self.loss_weights(heads)?);
        t.lr0 = self.parsed("lr0")?;
        t.lr_step = self.parsed("lr_step")?;
        t.epochs = self.parsed("epochs")?;
        t.batch = self.parsed("batch")?;
        t.seed = self.parsed("seed")?;
        t.sgd = SgdConfig {
            momentum: self.parsed("momentum")?,
            weight_decay: self.parsed("weight_decay")?,
        };
        t.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(t)
    }
}
