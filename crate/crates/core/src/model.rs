//! The full decomposition network: graph refinement, temporal and spatial
//! decomposition, noun encoding, and class-conditional classification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{class_logits, init_composer, ClassTable, ComponentKind};
use crate::error::{Error, Result};
use crate::gnn::{self, FrameLayout};
use crate::graph::{build_edge_sets, build_node_features, default_roles, object_slots, EdgeSet, Role, VideoSample};
use crate::numerics::{ParameterStore, Real, Tape, Var};
use crate::spatial::{init_gcn, init_noun, noun_encode_batch, spatial_decompose, ComponentFeature};
use crate::temporal::{init_tcn, tcn_forward, temporal_aggregate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub slots: usize,
    pub hands: usize,
    pub appearance_dim: usize,
    pub width: usize,
    pub gnn_steps: usize,
    pub gcn_layers: usize,
    /// Heads per kind: `[verbs, preps, nouns]`.
    pub n_max: [usize; 3],
    /// Hidden widths of every graph, head and noun perceptron.
    pub mlp_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub shared_tcn: bool,
    /// Refine on the union of both edge sets before splitting them.
    pub full_graph_sum: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 16,
            slots: 4,
            hands: 1,
            appearance_dim: 16,
            width: 128,
            gnn_steps: 2,
            gcn_layers: 2,
            n_max: [2, 2, 2],
            mlp_hidden: vec![128],
            classifier_hidden: vec![128],
            shared_tcn: true,
            full_graph_sum: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.frames, self.slots, self.hands, self.appearance_dim, self.width, self.gnn_steps]
            .contains(&0)
        {
            return bad("frames, slots, hands, appearance_dim, width and gnn_steps must be positive".into());
        }
        if self.n_max[0] == 0 || self.n_max[2] == 0 {
            return bad("at least one verb head and one noun head are required".into());
        }
        let objects = self.slots.saturating_sub(self.hands);
        if objects == 0 {
            return bad("no object slots".into());
        }
        if self.n_max[2] > objects {
            return bad(format!("{} noun heads but only {objects} object slots", self.n_max[2]));
        }
        if self.n_max[1] > 0 && objects < 2 {
            return bad("preposition heads need at least two object slots".into());
        }
        let lcm = (1..=self.n_max.into_iter().max().unwrap_or(1)).fold(1, lcm);
        if !self.width.is_multiple_of(lcm) {
            return bad(format!("width {} must be divisible by {lcm}", self.width));
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Component features of one batch and the class-conditional logits.
#[derive(Clone, Debug)]
pub struct Forward {
    pub components: Vec<ComponentFeature>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub roles: Vec<Role>,
    pub verb_edges: EdgeSet,
    pub prep_edges: EdgeSet,
    pub table: ClassTable,
}

fn kind_name(kind: ComponentKind) -> &'static str {
    kind.name()
}

impl Model {
    pub fn new(config: ModelConfig, table: ClassTable) -> Result<Self> {
        config.validate()?;
        for (c, d) in table.descriptions.iter().enumerate() {
            d.validate(config.n_max)
                .map_err(|e| Error::Config(format!("class {c}: {e}")))?;
        }
        let roles = default_roles(config.slots, config.hands);
        let (verb_edges, prep_edges) = build_edge_sets(&roles)?;
        Ok(Model {
            config,
            roles,
            verb_edges,
            prep_edges,
            table,
        })
    }

    pub fn classes(&self) -> usize {
        self.table.classes()
    }

    fn edges(&self, kind: ComponentKind) -> &EdgeSet {
        match kind {
            ComponentKind::Verb => &self.verb_edges,
            _ => &self.prep_edges,
        }
    }

    fn tcn_prefix(&self, kind: ComponentKind, head: usize) -> String {
        if self.config.shared_tcn {
            format!("temporal.{}.tcn", kind_name(kind))
        } else {
            format!("temporal.{}.tcn{head}", kind_name(kind))
        }
    }

    fn graph_kinds(&self) -> Vec<ComponentKind> {
        let mut k = vec![ComponentKind::Verb];
        if self.config.n_max[1] > 0 {
            k.push(ComponentKind::Preposition);
        }
        k
    }

    /// Draws every parameter from `rng` in a fixed order.
    pub fn init_params<F: Real>(&self, rng: &mut impl Rng) -> Result<ParameterStore<F>> {
        let c = &self.config;
        let d = c.width;
        let mut store = ParameterStore::new();
        if c.full_graph_sum {
            gnn::init_params(&mut store, "gnn", d, &c.mlp_hidden, rng);
        } else {
            for kind in self.graph_kinds() {
                gnn::init_params(&mut store, &format!("gnn.{}", kind_name(kind)), d, &c.mlp_hidden, rng);
            }
        }
        for kind in self.graph_kinds() {
            let heads = c.n_max[kind.index()];
            let edges = self.edges(kind).len();
            let name = kind_name(kind);
            let tcns = if c.shared_tcn { 1 } else { heads };
            for k in 0..tcns {
                init_tcn(&mut store, &self.tcn_prefix(kind, k), d, rng);
            }
            for k in 0..heads {
                let widths: Vec<usize> = std::iter::once(c.frames * d)
                    .chain(c.mlp_hidden.iter().copied())
                    .chain(std::iter::once(d))
                    .collect();
                store.init_mlp(&format!("temporal.{name}.head{k}"), &widths, rng);
                init_gcn(&mut store, &format!("spatial.{name}.head{k}"), edges, d, c.gcn_layers, rng);
            }
        }
        init_noun(&mut store, "noun", c.appearance_dim, c.frames, d, &c.mlp_hidden, rng);
        init_composer(&mut store, d, c.n_max, &c.classifier_hidden, self.classes(), rng)?;
        Ok(store)
    }

    fn check_sample(&self, s: &VideoSample) -> Result<()> {
        if s.roles != self.roles {
            return Err(Error::InvalidSample(format!("sample {}: role layout differs from the model", s.id)));
        }
        s.validate(self.config.frames, self.config.appearance_dim)
    }

    /// Verb, preposition and noun features for every head, each `[B, D]`.
    pub fn extract<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        samples: &[&VideoSample],
    ) -> Result<Vec<ComponentFeature>> {
        let c = &self.config;
        if samples.is_empty() {
            return Err(Error::InvalidSample("empty batch".into()));
        }
        let mut nodes = Vec::with_capacity(samples.len() * c.frames * c.slots * 4);
        let mut absent = Vec::with_capacity(samples.len());
        for s in samples {
            self.check_sample(s)?;
            nodes.extend(build_node_features::<F>(s).into_data());
            absent.push(s.never_present());
        }
        let layout = FrameLayout {
            batch: samples.len(),
            frames: c.frames,
            slots: c.slots,
        };
        let x = tape.input_raw(vec![layout.node_rows(), 4], nodes)?;

        let with_preps = c.n_max[1] > 0;
        let blocks = if c.full_graph_sum && with_preps {
            let (v, p) = gnn::refine_full(tape, store, "gnn", x, layout, &self.verb_edges, &self.prep_edges, c.gnn_steps, &absent)?;
            vec![v, p]
        } else if c.full_graph_sum {
            vec![gnn::refine(tape, store, "gnn", x, layout, &self.verb_edges, c.gnn_steps, &absent)?]
        } else {
            let mut out = Vec::new();
            for kind in self.graph_kinds() {
                let prefix = format!("gnn.{}", kind_name(kind));
                out.push(gnn::refine(tape, store, &prefix, x, layout, self.edges(kind), c.gnn_steps, &absent)?);
            }
            out
        };

        let mut components = Vec::new();
        for (kind, block) in self.graph_kinds().into_iter().zip(&blocks) {
            let heads = c.n_max[kind.index()];
            let name = kind_name(kind);
            let shared = if c.shared_tcn {
                Some(tcn_forward(tape, store, &self.tcn_prefix(kind, 0), block)?)
            } else {
                None
            };
            for k in 0..heads {
                let temporal = match &shared {
                    Some(b) => b.clone(),
                    None => tcn_forward(tape, store, &self.tcn_prefix(kind, k), block)?,
                };
                let g = temporal_aggregate(tape, store, &format!("temporal.{name}"), &temporal, k, heads)?;
                components.push(spatial_decompose(tape, store, &format!("spatial.{name}.head{k}"), &g, c.gcn_layers)?);
            }
        }
        for (i, &slot) in object_slots(&self.roles).iter().take(c.n_max[2]).enumerate() {
            components.push(noun_encode_batch(tape, store, "noun", samples, slot, i)?);
        }
        Ok(components)
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        samples: &[&VideoSample],
    ) -> Result<Forward> {
        let components = self.extract(tape, store, samples)?;
        let logits = class_logits(tape, store, &components, &self.table)?;
        Ok(Forward { components, logits })
    }

    /// Summed cross-entropy of the batch times `scale`.
    pub fn decomposition_loss<F: Real>(
        &self,
        tape: &mut Tape<F>,
        forward: &Forward,
        samples: &[&VideoSample],
        scale: f64,
    ) -> Result<Var> {
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let ce = tape.cross_entropy(forward.logits, &labels)?;
        Ok(tape.scale(ce, F::c(scale)))
    }

    /// Class predictions, lowest index on ties.
    pub fn predict<F: Real>(&self, store: &ParameterStore<F>, samples: &[&VideoSample]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, store, samples)?;
        Ok(tape
            .value(f.logits)
            .chunks(self.classes())
            .map(crate::compose::argmax)
            .collect())
    }
}
