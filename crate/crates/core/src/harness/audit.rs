use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::compose::{
    compose_attached, compose_batch, composed_loss, total_loss, ActionDescription, ClassTable, ComponentKind, FeatureBank,
    TargetCursor,
};
use crate::error::Result;
use crate::graph::{default_roles, BBoxFeature, Role, VideoSample};
use crate::model::{Model, ModelConfig};
use crate::numerics::gradcheck::{audit_store, by_module, PathAudit};
use crate::numerics::{GradFault, ParameterStore};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const COMPOSED_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub paths: Vec<PathAudit>,
    /// Worst relative error per leading path component.
    pub modules: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// The audited model: T=4, N=3, D=8 with the run's structural flags.
pub fn tiny_config(cfg: &RunConfig) -> ModelConfig {
    ModelConfig {
        frames: 4,
        slots: 3,
        hands: 1,
        appearance_dim: 3,
        width: 8,
        gnn_steps: cfg.gnn_steps,
        gcn_layers: cfg.gcn_layers,
        n_max: [2, 1, 2],
        mlp_hidden: vec![6],
        classifier_hidden: vec![6],
        shared_tcn: cfg.shared_tcn,
        full_graph_sum: cfg.full_graph_sum,
    }
}

fn tiny_table() -> ClassTable {
    ClassTable::new(vec![
        ActionDescription::new(vec![0], vec![], vec![0]),
        ActionDescription::new(vec![1, 0], vec![0], vec![0, 1]),
        ActionDescription::new(vec![1], vec![0], vec![1, 0]),
    ])
}

fn tiny_sample(config: &ModelConfig, desc: &ActionDescription, label: usize, rng: &mut impl Rng) -> VideoSample {
    let roles = default_roles(config.slots, config.hands);
    let mut present = vec![vec![true; config.slots]; config.frames];
    let mut boxes = vec![vec![BBoxFeature::ZERO; config.slots]; config.frames];
    for t in 0..config.frames {
        for s in 0..config.slots {
            if rng.random_bool(0.1) {
                present[t][s] = false;
            } else {
                boxes[t][s] = BBoxFeature::new(rng.random(), rng.random(), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
            }
        }
    }
    let appearance = (0..config.slots)
        .map(|s| {
            (0..config.frames)
                .map(|t| {
                    (0..config.appearance_dim)
                        .map(|_| if roles[s] == Role::Object && present[t][s] { rng.random_range(-1.0..1.0) } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    VideoSample {
        id: rng.random(),
        frames: config.frames,
        slots: config.slots,
        roles,
        boxes,
        present,
        appearance,
        label,
        description: desc.clone(),
    }
}

/// Finite-difference audit of every parameter path of the tiny model under
/// the full training loss: decomposition plus composed term, composed from
/// a fixed bank or, with `attached_composition`, from the batch itself.
/// `fault` corrupts one backward rule to show the audit catches it.
pub fn gradcheck(cfg: &RunConfig, fault: Option<GradFault>) -> Result<GradcheckReport> {
    let start = Instant::now();
    let config = tiny_config(cfg);
    let table = tiny_table();
    let model = Model::new(config.clone(), table.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store: ParameterStore<f64> = model.init_params(&mut rng)?;
    // zero biases put rectifiers of absent slots exactly on the kink
    let jitter: Vec<String> = store
        .paths()
        .filter(|p| p.ends_with("bias") || p.ends_with("null_prep"))
        .map(str::to_string)
        .collect();
    for p in jitter {
        for v in store.get_mut(&p)?.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let samples: Vec<VideoSample> = (0..table.classes())
        .map(|c| tiny_sample(&config, &table.descriptions[c], c, &mut rng))
        .collect();
    let refs: Vec<&VideoSample> = samples.iter().collect();
    let mut bank = FeatureBank::new(4);
    for kind in ComponentKind::ALL {
        for id in 0..2 {
            for source in 0..2 {
                let v = (0..config.width).map(|_| rng.random_range(-1.0..1.0)).collect();
                bank.push(kind, id, v, source);
            }
        }
    }
    let targets = [0, 2];
    let attached = cfg.attached_composition;

    let paths = audit_store(&store, EPS, |s, tape| {
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let fwd = model.forward(tape, s, &refs)?;
        let l_d = model.decomposition_loss(tape, &fwd, &refs, 1.0 / refs.len() as f64)?;
        let mut cursor = TargetCursor::default();
        let mut crng = ChaCha8Rng::seed_from_u64(1);
        let composed = if attached {
            let sources: Vec<(u64, &ActionDescription)> = refs.iter().map(|r| (r.id, &r.description)).collect();
            compose_attached(tape, s, &fwd.components, &sources, &table, &targets, 4, &mut cursor, &mut crng)?
        } else {
            compose_batch(tape, s, &bank, &table, &targets, 4, &mut cursor, &mut crng)?
        };
        let l_c = composed_loss(tape, s, &composed, &table)?;
        total_loss(tape, l_d, l_c, COMPOSED_WEIGHT)
    })?;
    let modules = by_module(&paths);
    let max_rel_error = paths.iter().map(|a| a.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        paths,
        modules,
        max_rel_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}
