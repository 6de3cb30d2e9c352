//! Per-frame message passing that refines node and edge features jointly.
//!
//! ```text
//! h⁰ᵢ = φ_ini(xᵢ)
//! fᵢⱼ = φ_edge([hᵢ, hⱼ])
//! hᵢ' = φ_node(Σⱼ fᵢⱼ)
//! ```
//!
//! All frames of all samples in a batch are processed at once; rows are
//! ordered `(sample, frame, slot)` for nodes and `(sample, frame, edge)` for
//! edges. No operation mixes frames.

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, EdgeSet};
use crate::numerics::nn::mlp_forward;
use crate::numerics::{ParameterStore, Real, Tape, Var};

/// Batch geometry of node rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub batch: usize,
    pub frames: usize,
    pub slots: usize,
}

impl FrameLayout {
    pub fn node_rows(&self) -> usize {
        self.batch * self.frames * self.slots
    }

    fn node_row(&self, s: usize, t: usize, i: usize) -> u32 {
        ((s * self.frames + t) * self.slots + i) as u32
    }
}

/// Refined edge features of one graph kind, shaped `[batch, N_e, T, D]`.
/// Row `e` corresponds to `edges.pairs[e]`.
#[derive(Clone, Debug)]
pub struct EdgeFeatureBlock {
    pub kind: EdgeKind,
    pub values: Var,
    pub edges: EdgeSet,
    pub batch: usize,
    pub frames: usize,
}

impl EdgeFeatureBlock {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Shared initial embedding applied to every `(sample, frame, slot)` row.
pub fn init_embed<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    nodes: Var,
) -> Result<Var> {
    mlp_forward(tape, store, nodes, &format!("{prefix}.ini"))
}

fn edge_features<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    h: Var,
    layout: FrameLayout,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyEdgeSet);
    }
    let mut src = Vec::with_capacity(layout.batch * layout.frames * pairs.len());
    let mut dst = Vec::with_capacity(src.capacity());
    for s in 0..layout.batch {
        for t in 0..layout.frames {
            for &(i, j) in pairs {
                src.push(Some(layout.node_row(s, t, i)));
                dst.push(Some(layout.node_row(s, t, j)));
            }
        }
    }
    let hi = tape.gather_rows(h, src)?;
    let hj = tape.gather_rows(h, dst)?;
    let cat = tape.concat_cols(&[hi, hj])?;
    mlp_forward(tape, store, cat, &format!("{prefix}.edge"))
}

/// One round of message passing. Returns the edge features `f` (rows
/// `(sample, frame, edge)`) and the updated node features.
pub fn message_step<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    h: Var,
    layout: FrameLayout,
    pairs: &[(usize, usize)],
) -> Result<(Var, Var)> {
    let f = edge_features(tape, store, prefix, h, layout, pairs)?;
    let mut receiver = Vec::with_capacity(layout.batch * layout.frames * pairs.len());
    for s in 0..layout.batch {
        for t in 0..layout.frames {
            receiver.extend(pairs.iter().map(|&(i, _)| layout.node_row(s, t, i)));
        }
    }
    let agg = tape.scatter_add_rows(f, receiver, layout.node_rows())?;
    let h_next = mlp_forward(tape, store, agg, &format!("{prefix}.node"))?;
    Ok((f, h_next))
}

/// `steps` rounds of message passing from raw node features; returns the
/// final edge features with rows `(sample, frame, edge)`. The node update
/// after the last round feeds nothing and is skipped.
pub fn refine_pairs<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    nodes: Var,
    layout: FrameLayout,
    pairs: &[(usize, usize)],
    steps: usize,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Config("message passing needs at least one step".into()));
    }
    let mut h = init_embed(tape, store, prefix, nodes)?;
    for _ in 1..steps {
        h = message_step(tape, store, prefix, h, layout, pairs)?.1;
    }
    edge_features(tape, store, prefix, h, layout, pairs)
}

/// Reorders edge rows `(sample, frame, edge)` over `pairs` into a block of
/// the selected edges with rows `(sample, edge, frame)`. Edges touching a
/// slot listed as never present for that sample become zero rows.
pub fn route<F: Real>(
    tape: &mut Tape<F>,
    f: Var,
    layout: FrameLayout,
    pairs: &[(usize, usize)],
    selected: &[usize],
    absent: &[Vec<bool>],
) -> Result<Var> {
    let width = *tape.shape(f).last().expect("rank >= 1");
    let mut index = Vec::with_capacity(layout.batch * selected.len() * layout.frames);
    for s in 0..layout.batch {
        let gone = absent.get(s);
        for &e in selected {
            let (i, j) = pairs[e];
            let masked = gone.is_some_and(|g| g[i] || g[j]);
            for t in 0..layout.frames {
                let row = (s * layout.frames + t) * pairs.len() + e;
                index.push((!masked).then_some(row as u32));
            }
        }
    }
    let g = tape.gather_rows(f, index)?;
    tape.reshape(g, vec![layout.batch, selected.len(), layout.frames, width])
}

/// Refines one edge set on its own graph.
#[allow(clippy::too_many_arguments)]
pub fn refine<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    nodes: Var,
    layout: FrameLayout,
    edges: &EdgeSet,
    steps: usize,
    absent: &[Vec<bool>],
) -> Result<EdgeFeatureBlock> {
    let f = refine_pairs(tape, store, prefix, nodes, layout, &edges.pairs, steps)?;
    let all: Vec<usize> = (0..edges.len()).collect();
    let values = route(tape, f, layout, &edges.pairs, &all, absent)?;
    Ok(EdgeFeatureBlock {
        kind: edges.kind,
        values,
        edges: edges.clone(),
        batch: layout.batch,
        frames: layout.frames,
    })
}

/// Refines the union of both edge sets with one set of parameters, then
/// splits the refined edges into a verb block and a preposition block.
#[allow(clippy::too_many_arguments)]
pub fn refine_full<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    nodes: Var,
    layout: FrameLayout,
    verb: &EdgeSet,
    prep: &EdgeSet,
    steps: usize,
    absent: &[Vec<bool>],
) -> Result<(EdgeFeatureBlock, EdgeFeatureBlock)> {
    let pairs: Vec<(usize, usize)> = verb.pairs.iter().chain(&prep.pairs).copied().collect();
    let f = refine_pairs(tape, store, prefix, nodes, layout, &pairs, steps)?;
    let verb_rows: Vec<usize> = (0..verb.len()).collect();
    let prep_rows: Vec<usize> = (verb.len()..pairs.len()).collect();
    let block = |tape: &mut Tape<F>, rows: &[usize], edges: &EdgeSet| -> Result<EdgeFeatureBlock> {
        Ok(EdgeFeatureBlock {
            kind: edges.kind,
            values: route(tape, f, layout, &pairs, rows, absent)?,
            edges: edges.clone(),
            batch: layout.batch,
            frames: layout.frames,
        })
    };
    Ok((block(tape, &verb_rows, verb)?, block(tape, &prep_rows, prep)?))
}

/// Registers `{prefix}.ini`, `{prefix}.edge` and `{prefix}.node`.
pub fn init_params<F: Real>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    width: usize,
    hidden: &[usize],
    rng: &mut impl rand::Rng,
) {
    let widths = |input: usize| -> Vec<usize> {
        std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(width))
            .collect()
    };
    store.init_mlp(&format!("{prefix}.ini"), &widths(4), rng);
    store.init_mlp(&format!("{prefix}.edge"), &widths(2 * width), rng);
    store.init_mlp(&format!("{prefix}.node"), &widths(width), rng);
}
