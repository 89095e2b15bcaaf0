//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment. Unknown or repeated keys are
//! errors. Numbers accept fractions, so `attack.train.eps = 8/255` works.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `dataset` | `two_gaussians` | dataset file path, or a toy dataset name |
//! | `data.n` | 1000 | examples generated for a toy dataset |
//! | `data.noise` | 0.05 | toy jitter std |
//! | `test_dataset` | (generated) | evaluation set path; toy datasets get a fresh draw of `data.n_test` |
//! | `data.n_test` | 1000 | size of the generated toy test set |
//! | `val_fraction` | 0.1 | validation split of `dataset` |
//! | `model.kind` | `mlp` | `mlp` or `cnn` |
//! | `model.hidden` | `64,64` | MLP hidden widths |
//! | `model.channels` | `16,32` | CNN channel counts |
//! | `loss.kind` | `ce` | `ce`, `trades` or `mart` |
//! | `loss.beta` | 1 | TRADES β |
//! | `loss.lambda` | 5 | MART λ |
//! | `selector.kind` | `none` | `none`, `random`, `glister`, `gradmatch` |
//! | `selector.fraction` | 0.3 | subset fraction |
//! | `selector.interval` | 20 | epochs between selections |
//! | `selector.steps` | 5 | PGD steps of the selection-time attack |
//! | `selector.eta` | 0.01 | GLISTER step size |
//! | `selector.lambda` | 0.5 | OMP ridge |
//! | `selector.tol` | 1e-4 | OMP residual tolerance |
//! | `attack.train.eps` | 8/255 | training ε |
//! | `attack.train.alpha` | ε/4 | training step size |
//! | `attack.train.steps` | 10 | training PGD steps |
//! | `attack.train.restarts` | 1 | training restarts |
//! | `attack.eval.eps_list` | `4/255,8/255,16/255` | evaluation radii |
//! | `attack.eval.alpha` | 2/255 | evaluation step size |
//! | `attack.eval.steps` | 50 | evaluation PGD steps |
//! | `attack.eval.restarts` | 10 | evaluation restarts |
//! | `probe.steps` | 5 | categorization probe steps |
//! | `optim.lr` | 0.01 | initial learning rate |
//! | `optim.momentum` | 0.9 | SGD momentum |
//! | `optim.weight_decay` | 5e-4 | weight decay |
//! | `optim.milestones` | `0.5,0.75` | epoch fractions with a 10× lr drop |
//! | `bullet.on` | false | per-category attack budgets |
//! | `bullet.steps_outlier` | 0 | |
//! | `bullet.steps_boundary` | 10 | |
//! | `bullet.steps_robust` | 1 | |
//! | `methods` | see below | comma list such as `full, gradmatch@0.3, gradmatch@0.3+bullet` |
//! | `track` | false | categorize the training set every epoch |
//! | `eval_every` | 0 | clean validation accuracy every n epochs |
//! | `checkpoint_every` | 0 | write a checkpoint every n epochs (0: final only) |
//! | `epochs` | 40 | |
//! | `batch_size` | 64 | |
//! | `seed` | 0 | |
//!
//! Without `methods`, the run compares `full` against the method described
//! by `selector.*` and `bullet.on`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use advprune_core::selection::SelectorKind;

use crate::error::{HarnessError, Result};

/// One training variant in an experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSpec {
    /// `None` is full-data training.
    pub selector: Option<SelectorKind>,
    pub fraction: f64,
    pub bullet: bool,
}

impl MethodSpec {
    pub fn full() -> Self {
        Self {
            selector: None,
            fraction: 1.0,
            bullet: false,
        }
    }

    pub fn is_full(&self) -> bool {
        self.selector.is_none()
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.selector {
            None => f.write_str("full")?,
            Some(k) => write!(f, "{k}@{}", self.fraction)?,
        }
        if self.bullet {
            f.write_str("+bullet")?;
        }
        Ok(())
    }
}

impl FromStr for MethodSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let err = |m: String| HarnessError::config("methods", m);
        let s = s.trim();
        let (base, bullet) = match s.strip_suffix("+bullet") {
            Some(b) => (b, true),
            None => (s, false),
        };
        if base == "full" {
            return Ok(Self { bullet, ..Self::full() });
        }
        let (kind, frac) = base
            .split_once('@')
            .ok_or_else(|| err(format!("`{s}` is not `full` or `<selector>@<fraction>`")))?;
        let selector = kind.parse::<SelectorKind>().map_err(|e| err(e.to_string()))?;
        let fraction = parse_number(frac).ok_or_else(|| err(format!("bad fraction in `{s}`")))?;
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(err(format!("fraction in `{s}` must be in (0, 1]")));
        }
        Ok(Self {
            selector: Some(selector),
            fraction,
            bullet,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_n: usize,
    pub data_noise: f32,
    pub test_dataset: Option<String>,
    pub data_n_test: usize,
    pub val_fraction: f64,
    pub model: ModelChoice,
    pub hidden: Vec<usize>,
    pub channels: [usize; 2],
    pub loss_kind: String,
    pub loss_beta: f64,
    pub loss_lambda: f64,
    pub selector: Option<SelectorKind>,
    pub fraction: f64,
    pub interval: usize,
    pub selector_steps: usize,
    pub selector_eta: f64,
    pub selector_lambda: f64,
    pub selector_tol: f64,
    pub train_eps: f32,
    pub train_alpha: Option<f32>,
    pub train_steps: usize,
    pub train_restarts: usize,
    pub eval_eps: Vec<f32>,
    pub eval_alpha: f32,
    pub eval_steps: usize,
    pub eval_restarts: usize,
    pub probe_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<f64>,
    pub bullet: bool,
    pub steps_outlier: usize,
    pub steps_boundary: usize,
    pub steps_robust: usize,
    pub methods: Option<Vec<MethodSpec>>,
    pub track: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "two_gaussians".into(),
            data_n: 1000,
            data_noise: 0.05,
            test_dataset: None,
            data_n_test: 1000,
            val_fraction: 0.1,
            model: ModelChoice::Mlp,
            hidden: vec![64, 64],
            channels: [16, 32],
            loss_kind: "ce".into(),
            loss_beta: 1.0,
            loss_lambda: 5.0,
            selector: None,
            fraction: 0.3,
            interval: 20,
            selector_steps: 5,
            selector_eta: 0.01,
            selector_lambda: 0.5,
            selector_tol: 1e-4,
            train_eps: 8.0 / 255.0,
            train_alpha: None,
            train_steps: 10,
            train_restarts: 1,
            eval_eps: vec![4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0],
            eval_alpha: 2.0 / 255.0,
            eval_steps: 50,
            eval_restarts: 10,
            probe_steps: 5,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.75],
            bullet: false,
            steps_outlier: 0,
            steps_boundary: 10,
            steps_robust: 1,
            methods: None,
            track: false,
            eval_every: 0,
            checkpoint_every: 0,
            epochs: 40,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Parses a decimal or a fraction `a/b`.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
            if b == 0.0 {
                return None;
            }
            a / b
        }
        None => s.parse::<f64>().ok()?,
    };
    v.is_finite().then_some(v)
}

fn num(key: &str, v: &str) -> Result<f64> {
    parse_number(v).ok_or_else(|| HarnessError::config(key, format!("`{v}` is not a number")))
}

fn count(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| HarnessError::config(key, format!("`{v}` is not a non-negative integer")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(HarnessError::config(key, format!("`{v}` is not a boolean"))),
    }
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| f(key, s)).collect()
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "data.n" => self.data_n = count(key, v)?,
            "data.noise" => self.data_noise = num(key, v)? as f32,
            "test_dataset" => self.test_dataset = Some(v.to_string()),
            "data.n_test" => self.data_n_test = count(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "model.kind" => {
                self.model = match v {
                    "mlp" => ModelChoice::Mlp,
                    "cnn" | "tiny_cnn" => ModelChoice::Cnn,
                    _ => return Err(HarnessError::config(key, format!("unknown model `{v}`"))),
                }
            }
            "model.hidden" => self.hidden = list(key, v, count)?,
            "model.channels" => {
                let c = list(key, v, count)?;
                if c.len() != 2 {
                    return Err(HarnessError::config(key, "expected two channel counts"));
                }
                self.channels = [c[0], c[1]];
            }
            "loss.kind" => self.loss_kind = v.to_string(),
            "loss.beta" => self.loss_beta = num(key, v)?,
            "loss.lambda" => self.loss_lambda = num(key, v)?,
            "selector.kind" => {
                self.selector = match v {
                    "none" | "full" => None,
                    other => Some(other.parse().map_err(|e: advprune_core::Error| HarnessError::config(key, e.to_string()))?),
                }
            }
            "selector.fraction" => self.fraction = num(key, v)?,
            "selector.interval" => self.interval = count(key, v)?,
            "selector.steps" => self.selector_steps = count(key, v)?,
            "selector.eta" => self.selector_eta = num(key, v)?,
            "selector.lambda" => self.selector_lambda = num(key, v)?,
            "selector.tol" => self.selector_tol = num(key, v)?,
            "attack.train.eps" => self.train_eps = num(key, v)? as f32,
            "attack.train.alpha" => self.train_alpha = Some(num(key, v)? as f32),
            "attack.train.steps" => self.train_steps = count(key, v)?,
            "attack.train.restarts" => self.train_restarts = count(key, v)?,
            "attack.eval.eps_list" => self.eval_eps = list(key, v, num)?.into_iter().map(|e| e as f32).collect(),
            "attack.eval.alpha" => self.eval_alpha = num(key, v)? as f32,
            "attack.eval.steps" => self.eval_steps = count(key, v)?,
            "attack.eval.restarts" => self.eval_restarts = count(key, v)?,
            "probe.steps" => self.probe_steps = count(key, v)?,
            "optim.lr" => self.lr = num(key, v)?,
            "optim.momentum" => self.momentum = num(key, v)?,
            "optim.weight_decay" => self.weight_decay = num(key, v)?,
            "optim.milestones" => self.milestones = list(key, v, num)?,
            "bullet.on" => self.bullet = flag(key, v)?,
            "bullet.steps_outlier" => self.steps_outlier = count(key, v)?,
            "bullet.steps_boundary" => self.steps_boundary = count(key, v)?,
            "bullet.steps_robust" => self.steps_robust = count(key, v)?,
            "methods" => self.methods = Some(v.split(',').map(str::parse).collect::<Result<_>>()?),
            "track" => self.track = flag(key, v)?,
            "eval_every" => self.eval_every = count(key, v)?,
            "checkpoint_every" => self.checkpoint_every = count(key, v)?,
            "epochs" => self.epochs = count(key, v)?,
            "batch_size" => self.batch_size = count(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| HarnessError::config(key, format!("`{v}` is not a u64")))?,
            _ => return Err(HarnessError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| HarnessError::config(pair.trim(), "expected key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::config(line, format!("line {}: expected key = value", lineno + 1))
            })?;
            let k = k.trim();
            if let Some(first) = seen.insert(k.to_string(), lineno + 1) {
                return Err(HarnessError::config(k, format!("repeated on line {} (first on line {first})", lineno + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(HarnessError::config(k, m));
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("selector.fraction", "must be in (0, 1]");
        }
        if self.interval == 0 {
            return bad("selector.interval", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must be in [0, 1)");
        }
        if !(self.train_eps >= 0.0) {
            return bad("attack.train.eps", "must be >= 0");
        }
        if self.eval_eps.iter().any(|e| !(*e >= 0.0)) {
            return bad("attack.eval.eps_list", "radii must be >= 0");
        }
        if !matches!(self.loss_kind.as_str(), "ce" | "trades" | "mart") {
            return bad("loss.kind", "must be ce, trades or mart");
        }
        if !(self.lr > 0.0) {
            return bad("optim.lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("optim.momentum", "must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("optim.weight_decay", "must be >= 0");
        }
        if self.methods.as_ref().is_some_and(|m| m.is_empty()) {
            return bad("methods", "must list at least one method");
        }
        Ok(())
    }

    /// The method set to run.
    pub fn method_list(&self) -> Vec<MethodSpec> {
        if let Some(m) = &self.methods {
            return m.clone();
        }
        let own = self.own_method();
        if own == MethodSpec::full() {
            vec![own]
        } else {
            vec![MethodSpec::full(), own]
        }
    }

    /// The method described by `selector.*` and `bullet.on`, used by the
    /// single-method commands. Ignores `methods`.
    pub fn own_method(&self) -> MethodSpec {
        MethodSpec {
            selector: self.selector,
            fraction: if self.selector.is_some() { self.fraction } else { 1.0 },
            bullet: self.bullet,
        }
    }
}
