use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::compose::{
    bank_update, compose_attached, compose_batch, composed_loss, total_loss, ActionDescription, ClassTable, FeatureBank,
    TargetCursor,
};
use crate::error::{Error, Result};
use crate::graph::VideoSample;
use crate::model::Model;
use crate::numerics::checkpoint::{self, Meta};
use crate::numerics::{clip_grad_norm, ParameterStore, Real, Sgd, Tape};
use crate::synth::{materialize, read_manifest, read_split, sample_seed, Manifest, SplitMode};

/// Keeps the composition stream apart from the shuffle stream.
const COMPOSE_STREAM: u64 = 0xc0_4d05_e000;

pub const CHECKPOINT_FILE: &str = "checkpoint.ffcn";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Training and validation clips with the class table they are labeled in.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub table: ClassTable,
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub manifest_tail: Vec<usize>,
}

impl Dataset {
    pub fn new(table: ClassTable, train: Vec<VideoSample>, val: Vec<VideoSample>, manifest_tail: Vec<usize>) -> Self {
        Dataset {
            table,
            train,
            val,
            manifest_tail,
        }
    }

    pub fn train_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.table.classes()];
        for s in &self.train {
            c[s.label] += 1;
        }
        c
    }

    /// Split names and class table a manifest trains on: base classes for
    /// few-shot manifests, everything otherwise.
    fn layout(manifest: &Manifest) -> (ClassTable, &'static str, &'static str) {
        let d = manifest.descriptions();
        match manifest.mode {
            SplitMode::Fewshot => (ClassTable::new(d[..manifest.base_classes].to_vec()), "base_train", "base_val"),
            _ => (ClassTable::new(d), "train", "val"),
        }
    }

    /// Renders the splits in memory.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let (table, tr, va) = Self::layout(manifest);
        Ok(Dataset::new(table, materialize(manifest, tr)?, materialize(manifest, va)?, manifest.tail.clone()))
    }

    /// Reads a directory written by `write_dataset`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let (table, tr, va) = Self::layout(&manifest);
        Ok(Dataset::new(table, read_split(dir, tr)?, read_split(dir, va)?, manifest.tail.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: Option<f64>,
    pub l_d: Option<f64>,
    pub l_c: Option<f64>,
    pub top1: f64,
    /// `None` for classes without evaluation samples.
    pub per_class: Vec<Option<f64>>,
    pub tail_mean: Option<f64>,
    pub novel_mean: Option<f64>,
}

/// Mean of the defined per-class accuracies among `classes`.
pub fn class_mean(per_class: &[Option<f64>], classes: impl IntoIterator<Item = usize>) -> Option<f64> {
    let v: Vec<f64> = classes.into_iter().filter_map(|c| per_class.get(c).copied().flatten()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Parameters plus everything needed to rebuild the model around them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub store: ParameterStore<F>,
    pub config: RunConfig,
    pub descriptions: Vec<ActionDescription>,
    pub tail: Vec<usize>,
    /// Completed epochs.
    pub epoch: usize,
}

fn meta_json<T: serde::de::DeserializeOwned>(meta: &Meta, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
    Ok(serde_json::from_slice(raw)?)
}

impl<F: Real> Checkpoint<F> {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.model_config(), ClassTable::new(self.descriptions.clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = Meta::new();
        meta.insert("config".into(), serde_json::to_vec(&self.config)?);
        meta.insert("classes".into(), serde_json::to_vec(&self.descriptions)?);
        meta.insert("tail".into(), serde_json::to_vec(&self.tail)?);
        meta.insert("epoch".into(), serde_json::to_vec(&self.epoch)?);
        Ok(checkpoint::encode(&self.store, &meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = checkpoint::decode(bytes)?;
        Ok(Checkpoint {
            store,
            config: meta_json(&meta, "config")?,
            descriptions: meta_json(&meta, "classes")?,
            tail: meta_json(&meta, "tail")?,
            epoch: meta_json(&meta, "epoch")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Fresh parameters for `model`, drawn from the run seed.
pub fn init_store<F: Real>(cfg: &RunConfig, model: &Model) -> Result<ParameterStore<F>> {
    model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub(crate) fn scalar<F: Real>(v: F) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// How many composed samples each batch gets.
#[derive(Clone, Copy, Debug)]
pub(crate) enum ComposeCount {
    PerBatch(usize),
    /// Spread evenly over the batches of an epoch.
    PerEpoch(usize),
}

/// Everything one epoch of training needs besides the mutable state.
pub(crate) struct EpochPlan<'a> {
    pub cfg: &'a RunConfig,
    pub model: &'a Model,
    pub targets: &'a [usize],
    pub lambda: f64,
    pub count: ComposeCount,
    pub lr: f64,
    pub trainable: Option<&'a dyn Fn(&str) -> bool>,
}

/// Bank and round-robin position carried across epochs.
pub(crate) struct BranchState<F> {
    pub bank: FeatureBank<F>,
    pub cursor: TargetCursor,
}

impl<F: Real> BranchState<F> {
    pub fn new(capacity: usize) -> Self {
        BranchState {
            bank: FeatureBank::new(capacity),
            cursor: TargetCursor::default(),
        }
    }
}

/// Banks detached features of `samples` without training.
pub(crate) fn fill_bank<F: Real>(
    model: &Model,
    store: &ParameterStore<F>,
    bank: &mut FeatureBank<F>,
    samples: &[VideoSample],
    chunk: usize,
) -> Result<()> {
    for batch in samples.chunks(chunk.max(1)) {
        let refs: Vec<&VideoSample> = batch.iter().collect();
        let mut tape = Tape::new();
        let comps = model.extract(&mut tape, store, &refs)?;
        let sources: Vec<(u64, &ActionDescription)> = batch.iter().map(|s| (s.id, &s.description)).collect();
        let feats: Vec<_> = comps.iter().map(|c| (c.kind, c.index, tape.value(c.vec))).collect();
        bank_update(bank, &sources, &feats);
    }
    Ok(())
}

/// Losses of one epoch and how many composed samples each class got.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EpochStats {
    /// Sample-weighted mean decomposition loss.
    pub l_d: f64,
    /// Mean composed loss over batches that composed anything.
    pub l_c: Option<f64>,
    pub composed: Vec<usize>,
}

/// One pass over `samples` in seeded order.
pub(crate) fn run_epoch<F: Real>(
    plan: &EpochPlan,
    store: &mut ParameterStore<F>,
    branch: &mut BranchState<F>,
    samples: &[VideoSample],
    epoch: usize,
) -> Result<EpochStats> {
    let cfg = plan.cfg;
    let mut composed_counts = vec![0; plan.model.classes()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch as u64)));
    let mut compose_rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ COMPOSE_STREAM, epoch as u64));
    let sgd = Sgd {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
    let nb = batches.len();
    let compose = cfg.composition && !plan.targets.is_empty();
    let (mut sum_d, mut sum_c, mut n_c) = (0.0, 0.0, 0usize);
    for (bi, idx) in batches.into_iter().enumerate() {
        let refs: Vec<&VideoSample> = idx.iter().map(|&i| &samples[i]).collect();
        let mut tape = Tape::new();
        let fwd = plan.model.forward(&mut tape, store, &refs)?;
        let l_d = plan.model.decomposition_loss(&mut tape, &fwd, &refs, 1.0 / refs.len() as f64)?;
        sum_d += scalar(tape.value(l_d)[0]) * refs.len() as f64;
        let mut l_c = None;
        if compose {
            let sources: Vec<(u64, &ActionDescription)> = refs.iter().map(|s| (s.id, &s.description)).collect();
            {
                let feats: Vec<_> = fwd.components.iter().map(|c| (c.kind, c.index, tape.value(c.vec))).collect();
                bank_update(&mut branch.bank, &sources, &feats);
            }
            let m = match plan.count {
                ComposeCount::PerBatch(m) => m,
                ComposeCount::PerEpoch(total) => total * (bi + 1) / nb - total * bi / nb,
            };
            let table = &plan.model.table;
            let composed = if cfg.attached_composition {
                compose_attached(
                    &mut tape,
                    store,
                    &fwd.components,
                    &sources,
                    table,
                    plan.targets,
                    m,
                    &mut branch.cursor,
                    &mut compose_rng,
                )?
            } else {
                compose_batch(&mut tape, store, &branch.bank, table, plan.targets, m, &mut branch.cursor, &mut compose_rng)?
            };
            for c in &composed {
                composed_counts[c.label] += 1;
            }
            l_c = composed_loss(&mut tape, store, &composed, table)?;
            if let Some(c) = l_c {
                sum_c += scalar(tape.value(c)[0]);
                n_c += 1;
            }
        }
        // a zero weight contributes nothing; leaving it off keeps the
        // update bitwise equal to a run without the branch
        let weighted = if plan.lambda > 0.0 { l_c } else { None };
        let loss = total_loss(&mut tape, l_d, weighted, plan.lambda)?;
        store.zero_grads();
        tape.backward(loss, store)?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(store, cfg.grad_clip);
        }
        match plan.trainable {
            Some(keep) => sgd.step_where(store, plan.lr, keep)?,
            None => sgd.step(store, plan.lr)?,
        }
    }
    Ok(EpochStats {
        l_d: sum_d / samples.len().max(1) as f64,
        l_c: (n_c > 0).then(|| sum_c / n_c as f64),
        composed: composed_counts,
    })
}

/// Top-1 and per-class accuracy of `store` on `samples`. Fails when a
/// label is outside the model's class range.
pub fn evaluate<F: Real>(
    model: &Model,
    store: &ParameterStore<F>,
    samples: &[VideoSample],
    tail: &[usize],
    chunk: usize,
) -> Result<MetricsRecord> {
    let classes = model.classes();
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::ClassCountMismatch {
            checkpoint: classes,
            manifest: s.label + 1,
        });
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for batch in samples.chunks(chunk.max(1)) {
        let refs: Vec<&VideoSample> = batch.iter().collect();
        for (s, p) in batch.iter().zip(model.predict(store, &refs)?) {
            totals[s.label] += 1;
            hits[s.label] += usize::from(p == s.label);
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let correct: usize = hits.iter().sum();
    Ok(MetricsRecord {
        epoch: 0,
        lr: None,
        l_d: None,
        l_c: None,
        top1: if samples.is_empty() { 0.0 } else { correct as f64 / samples.len() as f64 },
        tail_mean: class_mean(&per_class, tail.iter().copied()),
        per_class,
        novel_mean: None,
    })
}

/// Evaluates a checkpoint on samples labeled over `manifest_classes`
/// classes.
pub fn evaluate_checkpoint<F: Real>(ckpt: &Checkpoint<F>, samples: &[VideoSample], manifest_classes: usize) -> Result<MetricsRecord> {
    if ckpt.descriptions.len() != manifest_classes {
        return Err(Error::ClassCountMismatch {
            checkpoint: ckpt.descriptions.len(),
            manifest: manifest_classes,
        });
    }
    let model = ckpt.model()?;
    let mut m = evaluate(&model, &ckpt.store, samples, &ckpt.tail, ckpt.config.eval_batch_size)?;
    m.epoch = ckpt.epoch;
    Ok(m)
}

/// Final checkpoint and one record per trained epoch.
#[derive(Clone, Debug)]
pub struct TrainRun<F> {
    pub checkpoint: Checkpoint<F>,
    pub history: Vec<MetricsRecord>,
}

fn same_shapes<F: Real>(a: &ParameterStore<F>, b: &ParameterStore<F>) -> Result<()> {
    let pa: Vec<_> = a.iter().map(|(p, t)| (p, t.shape())).collect();
    let pb: Vec<_> = b.iter().map(|(p, t)| (p, t.shape())).collect();
    if pa.len() != pb.len() {
        return Err(Error::Checkpoint(format!("resume: {} parameters, model has {}", pb.len(), pa.len())));
    }
    if let Some(((p, s), (_, t))) = pa.iter().zip(&pb).find(|(x, y)| x != y) {
        return Err(Error::Checkpoint(format!("resume: `{p}` has shape {t:?}, model needs {s:?}")));
    }
    Ok(())
}

/// Trains on `data.train`, evaluating on `data.val` after every epoch.
/// With `out`, the checkpoint is rewritten and a metrics line appended
/// after every epoch. `resume` continues from a checkpoint of the same
/// configuration.
pub fn train<F: Real>(
    cfg: &RunConfig,
    data: &Dataset,
    out: Option<&Path>,
    resume: Option<Checkpoint<F>>,
) -> Result<TrainRun<F>> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config(), data.table.clone())?;
    let tail = cfg.tail.resolve(&data.train_counts(), &data.manifest_tail);
    let fresh = init_store::<F>(cfg, &model)?;
    let (mut store, start) = match resume {
        Some(c) => {
            same_shapes(&fresh, &c.store)?;
            if c.descriptions != data.table.descriptions {
                return Err(Error::Checkpoint("resume: class table differs from the dataset".into()));
            }
            (c.store, c.epoch)
        }
        None => (fresh, 0),
    };
    let mut metrics_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(start > 0)
                .write(true)
                .truncate(start == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut branch = BranchState::new(cfg.bank_capacity);
    let mut history = Vec::new();
    let mut ckpt = Checkpoint {
        store: ParameterStore::new(),
        config: cfg.clone(),
        descriptions: data.table.descriptions.clone(),
        tail: tail.clone(),
        epoch: start,
    };
    for epoch in start..cfg.epochs {
        let plan = EpochPlan {
            cfg,
            model: &model,
            targets: &tail,
            lambda: cfg.lambda,
            count: ComposeCount::PerBatch(cfg.composed_per_batch),
            lr: cfg.lr_at(epoch),
            trainable: None,
        };
        let EpochStats { l_d, l_c, .. } = run_epoch(&plan, &mut store, &mut branch, &data.train, epoch)?;
        let mut m = evaluate(&model, &store, &data.val, &tail, cfg.eval_batch_size)?;
        m.epoch = epoch + 1;
        m.lr = Some(plan.lr);
        m.l_d = Some(l_d);
        m.l_c = l_c;
        log::info!(
            "epoch {} lr {:.4} L_d {:.4} L_c {} top1 {:.4} tail {}",
            m.epoch,
            plan.lr,
            l_d,
            l_c.map_or("-".into(), |v| format!("{v:.4}")),
            m.top1,
            m.tail_mean.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let (Some(dir), Some((f, path))) = (out, metrics_file.as_mut()) {
            ckpt.epoch = epoch + 1;
            ckpt.store = store.clone();
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&*path, e))?;
        }
        history.push(m);
    }
    ckpt.epoch = cfg.epochs.max(start);
    ckpt.store = store;
    if let Some(dir) = out {
        ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainRun { checkpoint: ckpt, history })
}
