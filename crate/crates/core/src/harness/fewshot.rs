use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::train::{
    class_mean, evaluate, fill_bank, run_epoch, BranchState, Checkpoint, ComposeCount, EpochPlan, EpochStats, MetricsRecord,
};
use crate::compose::{ClassTable, CLASSIFIER};
use crate::error::{Error, Result};
use crate::graph::VideoSample;
use crate::model::Model;
use crate::numerics::{ParameterStore, Real};
use crate::synth::{sample_seed, Manifest};

const FEWSHOT_STREAM: u64 = 0xf5_0000;

/// Parameters the finetune updates when the extractor is frozen.
pub fn composer_param(path: &str) -> bool {
    path.starts_with("compose.") || path.starts_with("classifier.")
}

#[derive(Clone, Debug)]
pub struct FewshotRun<F> {
    pub checkpoint: Checkpoint<F>,
    pub history: Vec<MetricsRecord>,
    /// Composed samples per novel class in each epoch.
    pub composed_per_class: Vec<Vec<usize>>,
}

impl<F> FewshotRun<F> {
    pub fn novel_mean(&self) -> f64 {
        self.history.last().and_then(|m| m.novel_mean).unwrap_or(0.0)
    }
}

/// Relabels novel-class samples to `0..novel`.
pub fn novel_samples(samples: &[VideoSample], base_classes: usize) -> Result<Vec<VideoSample>> {
    samples
        .iter()
        .map(|s| {
            if s.label < base_classes {
                return Err(Error::InvalidSample(format!("sample {} belongs to base class {}", s.id, s.label)));
            }
            Ok(VideoSample { label: s.label - base_classes, ..s.clone() })
        })
        .collect()
}

/// Copies the base parameters with fresh optimizer state and a new last
/// classifier layer sized for the novel classes. The hidden classifier
/// layers carry over.
fn novel_store<F: Real>(base: &ParameterStore<F>, width: usize, novel: usize, rng: &mut ChaCha8Rng) -> Result<ParameterStore<F>> {
    let last = base.mlp_depth(CLASSIFIER).checked_sub(1).ok_or_else(|| Error::Checkpoint("no classifier".into()))?;
    let head = format!("{CLASSIFIER}.{last}.");
    let fan_in = if last == 0 { 3 * width } else { base.get(&format!("{head}weight"))?.shape()[0] };
    let mut store = ParameterStore::new();
    for (p, t) in base.iter() {
        if !p.starts_with(&head) {
            let mut t = t.clone();
            t.grad = None;
            store.insert(p, t);
        }
    }
    store.init_xavier(&format!("{head}weight"), fan_in, novel, rng);
    store.init_zeros(&format!("{head}bias"), vec![novel]);
    Ok(store)
}

/// Adapts a base-class checkpoint to the novel classes of a few-shot
/// manifest using `k` shots per class. With composition on, every epoch
/// adds `k` composed samples per novel class, built from features of the
/// base training clips and the shots.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_finetune<F: Real>(
    cfg: &RunConfig,
    base: &Checkpoint<F>,
    manifest: &Manifest,
    base_train: &[VideoSample],
    shots: &[VideoSample],
    novel_val: &[VideoSample],
    k: usize,
    composition: bool,
) -> Result<FewshotRun<F>> {
    let base_n = manifest.base_classes;
    let novel_n = manifest.classes.len() - base_n;
    if base.descriptions.len() != base_n {
        return Err(Error::ClassCountMismatch {
            checkpoint: base.descriptions.len(),
            manifest: base_n,
        });
    }
    let shots = novel_samples(shots, base_n)?;
    let val = novel_samples(novel_val, base_n)?;
    let mut per_class = vec![0; novel_n];
    for s in &shots {
        per_class[s.label] += 1;
    }
    if let Some(c) = per_class.iter().position(|&n| n != k) {
        return Err(Error::Config(format!("novel class {} has {} shots, expected k = {k}", c + base_n, per_class[c])));
    }

    let arch = base.config.model_config();
    let table = ClassTable::new(manifest.descriptions()[base_n..].to_vec());
    let model = Model::new(arch, table.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ FEWSHOT_STREAM, k as u64));
    let mut store = novel_store(&base.store, base.config.width, novel_n, &mut rng)?;

    let mut run_cfg = base.config.clone();
    run_cfg.seed = cfg.seed;
    run_cfg.batch_size = cfg.batch_size;
    run_cfg.momentum = cfg.momentum;
    run_cfg.weight_decay = cfg.weight_decay;
    run_cfg.grad_clip = cfg.grad_clip;
    run_cfg.composition = composition;
    run_cfg.attached_composition = false;

    let mut branch = BranchState::new(cfg.bank_capacity);
    if composition {
        fill_bank(&base.model()?, &base.store, &mut branch.bank, base_train, cfg.eval_batch_size)?;
    }
    let targets: Vec<usize> = (0..novel_n).collect();
    let keep = composer_param;
    let mut history = Vec::with_capacity(cfg.fewshot_epochs);
    let mut composed_per_class = Vec::with_capacity(cfg.fewshot_epochs);
    for epoch in 0..cfg.fewshot_epochs {
        let plan = EpochPlan {
            cfg: &run_cfg,
            model: &model,
            targets: &targets,
            lambda: cfg.fewshot_lambda,
            count: ComposeCount::PerEpoch(k * novel_n),
            lr: cfg.fewshot_lr,
            trainable: cfg.fewshot_freeze_extractor.then_some(&keep as &dyn Fn(&str) -> bool),
        };
        let EpochStats { l_d, l_c, composed } = run_epoch(&plan, &mut store, &mut branch, &shots, epoch)?;
        let mut m = evaluate(&model, &store, &val, &targets, cfg.eval_batch_size)?;
        m.epoch = epoch + 1;
        m.lr = Some(plan.lr);
        m.l_d = Some(l_d);
        m.l_c = l_c;
        m.novel_mean = class_mean(&m.per_class, 0..novel_n);
        log::info!(
            "fewshot k={k} comp={composition} epoch {} L_d {l_d:.4} novel {:.4}",
            m.epoch,
            m.novel_mean.unwrap_or(0.0)
        );
        history.push(m);
        composed_per_class.push(composed);
    }
    Ok(FewshotRun {
        checkpoint: Checkpoint {
            store,
            config: run_cfg,
            descriptions: table.descriptions,
            tail: targets,
            epoch: cfg.fewshot_epochs,
        },
        history,
        composed_per_class,
    })
}
