//! Dilated residual convolution over each edge's frame sequence and the
//! per-head aggregation that collapses the frames into one graph.

use crate::error::{Error, Result};
use crate::gnn::EdgeFeatureBlock;
use crate::graph::EdgeKind;
use crate::numerics::nn::{conv_time, mlp_forward};
use crate::numerics::{ParameterStore, Real, Tape, Var};

pub const DILATIONS: [usize; 4] = [1, 2, 3, 4];

/// One aggregated graph per head: `q` is `[batch·N_e, D]` with rows
/// `(sample, edge)`.
#[derive(Clone, Debug)]
pub struct AggregatedGraph {
    pub kind: EdgeKind,
    pub head: usize,
    pub q: Var,
    pub batch: usize,
    pub edges: usize,
}

/// Registers the convolution stack under `prefix`:
/// `{prefix}.layer{l}.conv` (`[3D × D]`) and `{prefix}.layer{l}.proj` (`[D × D]`).
pub fn init_tcn<F: Real>(store: &mut ParameterStore<F>, prefix: &str, width: usize, rng: &mut impl rand::Rng) {
    for l in 0..DILATIONS.len() {
        let conv = format!("{prefix}.layer{l}.conv");
        store.init_xavier(&format!("{conv}.weight"), 3 * width, width, rng);
        store.init_zeros(&format!("{conv}.bias"), vec![width]);
        let proj = format!("{prefix}.layer{l}.proj");
        store.init_xavier(&format!("{proj}.weight"), width, width, rng);
        store.init_zeros(&format!("{proj}.bias"), vec![width]);
    }
}

/// `Ĥ = ReLU(W₁ ∗ H + b₁)`, `H ← H + Ĥ·W₂ + b₂` for dilations 1..4. The same
/// parameters process every edge row.
pub fn tcn_forward<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    block: &EdgeFeatureBlock,
) -> Result<EdgeFeatureBlock> {
    let shape = tape.shape(block.values).to_vec();
    let width = *shape.last().expect("rank 4");
    let rows = block.batch * block.edge_count() * block.frames;
    let mut h = tape.reshape(block.values, vec![rows, width])?;
    for (l, &d) in DILATIONS.iter().enumerate() {
        let w1 = tape.param(store, &format!("{prefix}.layer{l}.conv.weight"))?;
        let b1 = tape.param(store, &format!("{prefix}.layer{l}.conv.bias"))?;
        let w2 = tape.param(store, &format!("{prefix}.layer{l}.proj.weight"))?;
        let b2 = tape.param(store, &format!("{prefix}.layer{l}.proj.bias"))?;
        let hidden = conv_time(tape, h, block.frames, d, w1, b1)?;
        let hidden = tape.relu(hidden);
        let branch = tape.matmul(hidden, w2)?;
        let branch = tape.add_bias(branch, b2)?;
        h = tape.add(h, branch)?;
    }
    let values = tape.reshape(h, shape)?;
    Ok(EdgeFeatureBlock {
        values,
        ..block.clone()
    })
}

/// Concatenates each edge's `T` frame vectors and applies the head-`k`
/// perceptron `{prefix}.head{k}`, giving `Q⁽ᵏ⁾`.
pub fn temporal_aggregate<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    block: &EdgeFeatureBlock,
    head: usize,
    heads: usize,
) -> Result<AggregatedGraph> {
    if head >= heads {
        return Err(Error::HeadOutOfRange { index: head, max: heads });
    }
    let width = *tape.shape(block.values).last().expect("rank 4");
    let edges = block.edge_count();
    let flat = tape.reshape(block.values, vec![block.batch * edges, block.frames * width])?;
    let q = mlp_forward(tape, store, flat, &format!("{prefix}.head{head}"))?;
    Ok(AggregatedGraph {
        kind: block.kind,
        head,
        q,
        batch: block.batch,
        edges,
    })
}
