//! Graph convolution with a trainable adjacency over each aggregated graph,
//! pooled to one feature per head, and the appearance-based noun encoder.

use crate::compose::ComponentKind;
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, Role, VideoSample};
use crate::numerics::nn::mlp_forward;
use crate::numerics::{ParameterStore, Real, Tape, Var};
use crate::temporal::AggregatedGraph;

/// A batch of component features: `vec` is `[batch, D]`, one row per sample.
#[derive(Clone, Debug)]
pub struct ComponentFeature {
    pub kind: ComponentKind,
    pub index: usize,
    pub vec: Var,
}

impl From<EdgeKind> for ComponentKind {
    fn from(k: EdgeKind) -> Self {
        match k {
            EdgeKind::Verb => ComponentKind::Verb,
            EdgeKind::Preposition => ComponentKind::Preposition,
        }
    }
}

/// Registers `{prefix}.layer{l}.adj` (`[N_e × N_e]`) and `.weight` (`[D × D]`).
pub fn init_gcn<F: Real>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    edges: usize,
    width: usize,
    layers: usize,
    rng: &mut impl rand::Rng,
) {
    for l in 0..layers {
        store.init_uniform_adjacency(&format!("{prefix}.layer{l}.adj"), edges, 1e-3, rng);
        store.init_xavier(&format!("{prefix}.layer{l}.weight"), width, width, rng);
    }
}

/// `Z = A·Q·W + Q`, with `A` applied to every sample's block of `N_e` rows.
pub fn gcn_layer<F: Real>(tape: &mut Tape<F>, store: &ParameterStore<F>, path: &str, q: Var) -> Result<Var> {
    let a = tape.param(store, &format!("{path}.adj"))?;
    let w = tape.param(store, &format!("{path}.weight"))?;
    let qw = tape.matmul(q, w)?;
    let z = tape.block_left_matmul(a, qw)?;
    tape.add(z, q)
}

/// `layers` stacked graph convolutions followed by the mean over edges.
pub fn spatial_decompose<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    g: &AggregatedGraph,
    layers: usize,
) -> Result<ComponentFeature> {
    let mut z = g.q;
    for l in 0..layers {
        z = gcn_layer(tape, store, &format!("{prefix}.layer{l}"), z)?;
    }
    let owner: Vec<u32> = (0..g.batch * g.edges).map(|r| (r / g.edges) as u32).collect();
    let summed = tape.scatter_add_rows(z, owner, g.batch)?;
    let vec = tape.scale(summed, F::c(1.0 / g.edges as f64));
    Ok(ComponentFeature {
        kind: g.kind.into(),
        index: g.head,
        vec,
    })
}

/// Registers the per-frame perceptron `{prefix}.frame` and the fusion
/// perceptron `{prefix}.fuse`.
pub fn init_noun<F: Real>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    appearance_dim: usize,
    frames: usize,
    width: usize,
    hidden: &[usize],
    rng: &mut impl rand::Rng,
) {
    let chain = |input: usize| -> Vec<usize> {
        std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(width))
            .collect()
    };
    store.init_mlp(&format!("{prefix}.frame"), &chain(appearance_dim), rng);
    store.init_mlp(&format!("{prefix}.fuse"), &chain(frames * width), rng);
}

/// Encodes the object in `slot` of every sample into one noun feature per
/// sample. Frames where the object is absent contribute zero vectors to the
/// fusion input.
pub fn noun_encode_batch<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    samples: &[&VideoSample],
    slot: usize,
    index: usize,
) -> Result<ComponentFeature> {
    let first = samples.first().ok_or_else(|| Error::InvalidSample("empty batch".into()))?;
    let frames = first.frames;
    let dim = first.appearance.get(slot).and_then(|f| f.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(samples.len() * frames * dim);
    let mut keep = Vec::with_capacity(samples.len() * frames);
    for s in samples {
        if s.roles.get(slot) != Some(&Role::Object) {
            return Err(Error::NotAnObject(slot));
        }
        for t in 0..frames {
            let present = s.present[t][slot];
            keep.push(present.then_some(keep.len() as u32));
            if present {
                data.extend(s.appearance[slot][t].iter().map(|&v| F::c(v)));
            } else {
                data.extend(std::iter::repeat_n(F::zero(), dim));
            }
        }
    }
    let x = tape.input_raw(vec![samples.len() * frames, dim], data)?;
    let per_frame = mlp_forward(tape, store, x, &format!("{prefix}.frame"))?;
    let masked = tape.gather_rows(per_frame, keep)?;
    let width = *tape.shape(masked).last().expect("rank 2");
    let flat = tape.reshape(masked, vec![samples.len(), frames * width])?;
    let vec = mlp_forward(tape, store, flat, &format!("{prefix}.fuse"))?;
    Ok(ComponentFeature {
        kind: ComponentKind::Noun,
        index,
        vec,
    })
}

/// Single-sample form of [`noun_encode_batch`].
pub fn noun_encode<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    sample: &VideoSample,
    slot: usize,
) -> Result<ComponentFeature> {
    let index = sample
        .object_slots()
        .iter()
        .position(|&s| s == slot)
        .ok_or(Error::NotAnObject(slot))?;
    noun_encode_batch(tape, store, prefix, &[sample], slot, index)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::compose::ActionDescription;
    use crate::graph::{default_roles, BBoxFeature};
    use crate::numerics::Tensor;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set(s: &mut ParameterStore<f64>, path: &str, t: Tensor<f64>) {
        s.insert(path, t);
    }

    fn eye(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    fn graph(tape: &mut Tape<f64>, q: &Tensor<f64>, batch: usize) -> AggregatedGraph {
        let v = tape.input(q);
        AggregatedGraph {
            kind: EdgeKind::Verb,
            head: 0,
            q: v,
            batch,
            edges: q.shape()[0] / batch,
        }
    }

    #[test]
    fn zero_adjacency_is_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        set(&mut s, "g.adj", Tensor::zeros(vec![3, 3]));
        set(&mut s, "g.weight", random(&mut rng, &[2, 2]));
        let q = random(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let v = tape.input(&q);
        let z = gcn_layer(&mut tape, &s, "g", v).unwrap();
        assert_eq!(tape.value(z), q.data());
    }

    #[test]
    fn identity_layer_without_residual_returns_q() {
        // A·Q·W with A = W = I; subtracting the residual leaves Q
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParameterStore::new();
        set(&mut s, "g.adj", eye(3));
        set(&mut s, "g.weight", eye(2));
        let q = random(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let v = tape.input(&q);
        let z = gcn_layer(&mut tape, &s, "g", v).unwrap();
        for (a, b) in tape.value(z).iter().zip(q.data()) {
            assert_eq!(a - b, *b);
        }
    }

    #[test]
    fn gcn_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, w, q) = (random(&mut rng, &[3, 3]), random(&mut rng, &[2, 2]), random(&mut rng, &[3, 2]));
        let mut s = ParameterStore::new();
        set(&mut s, "g.adj", a.clone());
        set(&mut s, "g.weight", w.clone());
        let mut tape = Tape::new();
        let v = tape.input(&q);
        let z = gcn_layer(&mut tape, &s, "g", v).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mut want = q.at2(i, c);
                for j in 0..3 {
                    for k in 0..2 {
                        want += a.at2(i, j) * q.at2(j, k) * w.at2(k, c);
                    }
                }
                assert!((tape.value(z)[i * 2 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParameterStore::new();
        init_gcn(&mut s, "g", 3, 2, 2, &mut rng);
        // zero A and W: output is the row mean
        let mut z = s.clone();
        for l in 0..2 {
            set(&mut z, &format!("g.layer{l}.adj"), Tensor::zeros(vec![3, 3]));
            set(&mut z, &format!("g.layer{l}.weight"), Tensor::zeros(vec![2, 2]));
        }
        let q = random(&mut rng, &[6, 2]);
        let mut tape = Tape::new();
        let g = graph(&mut tape, &q, 2);
        let f = spatial_decompose(&mut tape, &z, "g", &g, 2).unwrap();
        assert_eq!(tape.shape(f.vec), &[2, 2]);
        for b in 0..2 {
            for c in 0..2 {
                let mean = (0..3).map(|e| q.at2(b * 3 + e, c)).sum::<f64>() / 3.0;
                assert!((tape.value(f.vec)[b * 2 + c] - mean).abs() < 1e-12);
            }
        }
        // random parameters: layer loop then mean
        let mut tape = Tape::new();
        let g = graph(&mut tape, &q, 2);
        let f = spatial_decompose(&mut tape, &s, "g", &g, 2).unwrap();
        let mut h: Vec<Vec<f64>> = (0..6).map(|r| q.data()[r * 2..r * 2 + 2].to_vec()).collect();
        for l in 0..2 {
            let a = s.get(&format!("g.layer{l}.adj")).unwrap();
            let w = s.get(&format!("g.layer{l}.weight")).unwrap();
            let mut next = h.clone();
            for b in 0..2 {
                for i in 0..3 {
                    for c in 0..2 {
                        for j in 0..3 {
                            for k in 0..2 {
                                next[b * 3 + i][c] += a.at2(i, j) * h[b * 3 + j][k] * w.at2(k, c);
                            }
                        }
                    }
                }
            }
            h = next;
        }
        for b in 0..2 {
            for c in 0..2 {
                let mean = (0..3).map(|e| h[b * 3 + e][c]).sum::<f64>() / 3.0;
                assert!((tape.value(f.vec)[b * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_edge_and_identical_rows() {
        let mut s = ParameterStore::new();
        for l in 0..2 {
            set(&mut s, &format!("g.layer{l}.adj"), Tensor::zeros(vec![1, 1]));
            set(&mut s, &format!("g.layer{l}.weight"), Tensor::zeros(vec![2, 2]));
        }
        let q = Tensor::from_f64(vec![1, 2], &[0.3, -0.7]).unwrap();
        let mut tape = Tape::new();
        let g = graph(&mut tape, &q, 1);
        let f = spatial_decompose(&mut tape, &s, "g", &g, 2).unwrap();
        assert_eq!(tape.value(f.vec), q.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn uniform_adjacency_pooling_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let edges = 4;
            let mut s = ParameterStore::new();
            init_gcn(&mut s, "g", edges, 3, 2, &mut rng);
            for l in 0..2 {
                let uniform = Tensor::new(vec![edges, edges], vec![0.25; edges * edges]).unwrap();
                set(&mut s, &format!("g.layer{l}.adj"), uniform);
            }
            let q = random(&mut rng, &[edges, 3]);
            let mut perm: Vec<usize> = (0..edges).collect();
            perm.rotate_left((seed % 4) as usize);
            perm.swap(0, (seed / 4 % 4) as usize);
            let mut pq = q.clone();
            for (r, &p) in perm.iter().enumerate() {
                pq.data_mut()[r * 3..r * 3 + 3].copy_from_slice(&q.data()[p * 3..p * 3 + 3]);
            }
            let pool = |x: &Tensor<f64>| {
                let mut tape = Tape::new();
                let g = graph(&mut tape, x, 1);
                let f = spatial_decompose(&mut tape, &s, "g", &g, 2).unwrap();
                tape.value(f.vec).to_vec()
            };
            for (a, b) in pool(&q).iter().zip(pool(&pq)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_have_disjoint_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParameterStore::new();
        init_gcn(&mut s, "h0", 2, 2, 2, &mut rng);
        init_gcn(&mut s, "h1", 2, 2, 2, &mut rng);
        let q = random(&mut rng, &[2, 2]);
        let mut tape = Tape::new();
        let g = graph(&mut tape, &q, 1);
        let f = spatial_decompose(&mut tape, &s, "h0", &g, 2).unwrap();
        let loss = tape.sum(f.vec);
        s.zero_grads();
        tape.backward(loss, &mut s).unwrap();
        for p in s.paths().map(str::to_string).collect::<Vec<_>>() {
            let g = s.grad(&p).unwrap().unwrap();
            assert_eq!(p.starts_with("h1"), g.iter().all(|&v| v == 0.0), "{p}");
        }
    }

    fn sample(frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> VideoSample {
        let roles = default_roles(3, 1);
        VideoSample {
            id: 0,
            frames,
            slots: 3,
            roles,
            boxes: vec![vec![BBoxFeature::new(0.5, 0.5, 0.1, 0.1); 3]; frames],
            present: vec![vec![true; 3]; frames],
            appearance: (0..3)
                .map(|_| (0..frames).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect(),
            label: 0,
            description: ActionDescription::new(vec![0], vec![], vec![0]),
        }
    }

    fn noun_store(frames: usize, dim: usize) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        init_noun(&mut s, "n", dim, frames, 3, &[5], &mut ChaCha8Rng::seed_from_u64(6));
        for p in s.paths().map(str::to_string).collect::<Vec<_>>() {
            if p.ends_with("bias") {
                s.get_mut(&p).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.1);
            }
        }
        s
    }

    fn mlp(s: &ParameterStore<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = tape.input_raw(vec![1, x.len()], x.to_vec()).unwrap();
        let y = mlp_forward(&mut tape, s, v, prefix).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn noun_encoder_matches_frame_loop() {
        let (frames, dim) = (3, 4);
        let s = noun_store(frames, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut smp = sample(frames, dim, &mut rng);
        smp.present[1][2] = false;
        smp.boxes[1][2] = BBoxFeature::ZERO;
        let mut tape = Tape::new();
        let f = noun_encode(&mut tape, &s, "n", &smp, 2).unwrap();
        assert_eq!(f.index, 1);
        let mut cat = Vec::new();
        for t in 0..frames {
            if smp.present[t][2] {
                cat.extend(mlp(&s, "n.frame", &smp.appearance[2][t]));
            } else {
                cat.extend([0.0; 3]);
            }
        }
        let want = mlp(&s, "n.fuse", &cat);
        for (a, b) in tape.value(f.vec).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_object_gives_missing_code() {
        let (frames, dim) = (2, 4);
        let s = noun_store(frames, dim);
        let mut smp = sample(frames, dim, &mut ChaCha8Rng::seed_from_u64(8));
        for t in 0..frames {
            smp.present[t][1] = false;
        }
        let mut tape = Tape::new();
        let f = noun_encode(&mut tape, &s, "n", &smp, 1).unwrap();
        assert_eq!(tape.value(f.vec), mlp(&s, "n.fuse", &[0.0; 6]));
        assert!(matches!(noun_encode(&mut tape, &s, "n", &smp, 0), Err(Error::NotAnObject(0))));
    }

    #[test]
    fn constant_appearance_is_deterministic() {
        let (frames, dim) = (2, 4);
        let s = noun_store(frames, dim);
        let mut smp = sample(frames, dim, &mut ChaCha8Rng::seed_from_u64(9));
        smp.appearance[1][1] = smp.appearance[1][0].clone();
        let run = || {
            let mut tape = Tape::new();
            let f = noun_encode(&mut tape, &s, "n", &smp, 1).unwrap();
            tape.value(f.vec).to_vec()
        };
        assert_eq!(run(), run());
    }
}
