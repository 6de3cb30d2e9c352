use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "FFCN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got `{s}`"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Which classes receive composed samples.
///
/// Written as `lowest:20` (the 20 classes with the fewest training
/// samples), `below:100` (classes with fewer than 100), `manifest` (the
/// tail list stored by the generator) or an explicit list `3,7,9`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailPolicy {
    Lowest(usize),
    Below(usize),
    Manifest,
    Explicit(Vec<usize>),
}

impl TailPolicy {
    /// Resolves to a sorted class list. Ties in `Lowest` go to the lower
    /// class index.
    pub fn resolve(&self, train_counts: &[usize], manifest_tail: &[usize]) -> Vec<usize> {
        let mut out = match self {
            TailPolicy::Lowest(n) => {
                let mut order: Vec<usize> = (0..train_counts.len()).collect();
                order.sort_by_key(|&c| (train_counts[c], c));
                order.truncate(*n);
                order
            }
            TailPolicy::Below(t) => (0..train_counts.len()).filter(|&c| train_counts[c] < *t).collect(),
            TailPolicy::Manifest => manifest_tail.to_vec(),
            TailPolicy::Explicit(v) => v.iter().copied().filter(|&c| c < train_counts.len()).collect(),
        };
        out.sort_unstable();
        out.dedup();
        out
    }
}

impl FromStr for TailPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad tail policy `{s}`"));
        if s == "manifest" {
            return Ok(TailPolicy::Manifest);
        }
        if let Some(n) = s.strip_prefix("lowest:") {
            return n.trim().parse().map(TailPolicy::Lowest).map_err(|_| bad());
        }
        if let Some(n) = s.strip_prefix("below:") {
            return n.trim().parse().map(TailPolicy::Below).map_err(|_| bad());
        }
        parse_list(s).map(TailPolicy::Explicit).map_err(|_| bad())
    }
}

impl fmt::Display for TailPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailPolicy::Lowest(n) => write!(f, "lowest:{n}"),
            TailPolicy::Below(n) => write!(f, "below:{n}"),
            TailPolicy::Manifest => f.write_str("manifest"),
            TailPolicy::Explicit(v) => f.write_str(&join(v)),
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: usize,
    pub slots: usize,
    pub hands: usize,
    pub appearance_dim: usize,
    pub width: usize,
    pub gnn_steps: usize,
    pub gcn_layers: usize,
    /// Heads per kind: `[verbs, preps, nouns]`.
    pub n_max: [usize; 3],
    pub mlp_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub tail: TailPolicy,
    pub composed_per_batch: usize,
    pub bank_capacity: usize,
    pub precision: Precision,
    pub shared_tcn: bool,
    pub full_graph_sum: bool,
    /// Build the composition branch at all.
    pub composition: bool,
    /// Compose from the current batch with gradients instead of the bank.
    pub attached_composition: bool,
    pub fewshot_epochs: usize,
    pub fewshot_lr: f64,
    pub fewshot_lambda: f64,
    /// Finetune only the reducers and classifier.
    pub fewshot_freeze_extractor: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            seed: 0,
            frames: m.frames,
            slots: m.slots,
            hands: m.hands,
            appearance_dim: m.appearance_dim,
            width: m.width,
            gnn_steps: m.gnn_steps,
            gcn_layers: m.gcn_layers,
            n_max: m.n_max,
            mlp_hidden: m.mlp_hidden,
            classifier_hidden: m.classifier_hidden,
            batch_size: 64,
            eval_batch_size: 64,
            lr: 0.05,
            lr_decay_epochs: vec![15],
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 0.5,
            epochs: 25,
            lambda: 0.1,
            tail: TailPolicy::Lowest(20),
            composed_per_batch: 10,
            bank_capacity: 64,
            precision: Precision::F32,
            shared_tcn: m.shared_tcn,
            full_graph_sum: m.full_graph_sum,
            composition: true,
            attached_composition: false,
            fewshot_epochs: 30,
            fewshot_lr: 0.01,
            fewshot_lambda: 1.0,
            fewshot_freeze_extractor: true,
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            slots: self.slots,
            hands: self.hands,
            appearance_dim: self.appearance_dim,
            width: self.width,
            gnn_steps: self.gnn_steps,
            gcn_layers: self.gcn_layers,
            n_max: self.n_max,
            mlp_hidden: self.mlp_hidden.clone(),
            classifier_hidden: self.classifier_hidden.clone(),
            shared_tcn: self.shared_tcn,
            full_graph_sum: self.full_graph_sum,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr / self.lr_decay_factor.powi(drops as i32)
    }

    // negated comparisons so NaN fails too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.model_config().validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.bank_capacity == 0 {
            return bad("batch sizes and bank capacity must be positive");
        }
        if !(self.lr > 0.0 && self.fewshot_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("momentum must be in [0, 1), weight_decay and grad_clip non-negative");
        }
        if !(self.lambda >= 0.0 && self.fewshot_lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.attached_composition && !self.composition {
            return bad("attached_composition needs composition");
        }
        Ok(())
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        macro_rules! flag {
            () => {
                parse_bool(value).ok_or_else(bad)?
            };
        }
        macro_rules! list {
            () => {
                parse_list(value).map_err(|_| bad())?
            };
        }
        match key {
            "seed" => self.seed = num!(),
            "frames" => self.frames = num!(),
            "slots" => self.slots = num!(),
            "hands" => self.hands = num!(),
            "appearance_dim" => self.appearance_dim = num!(),
            "width" => self.width = num!(),
            "gnn_steps" => self.gnn_steps = num!(),
            "gcn_layers" => self.gcn_layers = num!(),
            "n_max_verbs" => self.n_max[0] = num!(),
            "n_max_preps" => self.n_max[1] = num!(),
            "n_max_nouns" => self.n_max[2] = num!(),
            "mlp_hidden" => self.mlp_hidden = list!(),
            "classifier_hidden" => self.classifier_hidden = list!(),
            "batch_size" => self.batch_size = num!(),
            "eval_batch_size" => self.eval_batch_size = num!(),
            "lr" => self.lr = num!(),
            "lr_decay_epochs" => self.lr_decay_epochs = list!(),
            "lr_decay_factor" => self.lr_decay_factor = num!(),
            "momentum" => self.momentum = num!(),
            "weight_decay" => self.weight_decay = num!(),
            "grad_clip" => self.grad_clip = num!(),
            "epochs" => self.epochs = num!(),
            "lambda" => self.lambda = num!(),
            "tail" => self.tail = value.parse()?,
            "composed_per_batch" => self.composed_per_batch = num!(),
            "bank_capacity" => self.bank_capacity = num!(),
            "precision" => self.precision = value.parse()?,
            "shared_tcn" => self.shared_tcn = flag!(),
            "full_graph_sum" => self.full_graph_sum = flag!(),
            "composition" => self.composition = flag!(),
            "attached_composition" => self.attached_composition = flag!(),
            "fewshot_epochs" => self.fewshot_epochs = num!(),
            "fewshot_lr" => self.fewshot_lr = num!(),
            "fewshot_lambda" => self.fewshot_lambda = num!(),
            "fewshot_freeze_extractor" => self.fewshot_freeze_extractor = flag!(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", no + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the
    /// environment.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// The config in the file format; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let lines = [
            ("seed", self.seed.to_string()),
            ("frames", self.frames.to_string()),
            ("slots", self.slots.to_string()),
            ("hands", self.hands.to_string()),
            ("appearance_dim", self.appearance_dim.to_string()),
            ("width", self.width.to_string()),
            ("gnn_steps", self.gnn_steps.to_string()),
            ("gcn_layers", self.gcn_layers.to_string()),
            ("n_max_verbs", self.n_max[0].to_string()),
            ("n_max_preps", self.n_max[1].to_string()),
            ("n_max_nouns", self.n_max[2].to_string()),
            ("mlp_hidden", join(&self.mlp_hidden)),
            ("classifier_hidden", join(&self.classifier_hidden)),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_epochs", join(&self.lr_decay_epochs)),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tail", self.tail.to_string()),
            ("composed_per_batch", self.composed_per_batch.to_string()),
            ("bank_capacity", self.bank_capacity.to_string()),
            ("precision", self.precision.to_string()),
            ("shared_tcn", b(self.shared_tcn).into()),
            ("full_graph_sum", b(self.full_graph_sum).into()),
            ("composition", b(self.composition).into()),
            ("attached_composition", b(self.attached_composition).into()),
            ("fewshot_epochs", self.fewshot_epochs.to_string()),
            ("fewshot_lr", self.fewshot_lr.to_string()),
            ("fewshot_lambda", self.fewshot_lambda.to_string()),
            ("fewshot_freeze_extractor", b(self.fewshot_freeze_extractor).into()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
