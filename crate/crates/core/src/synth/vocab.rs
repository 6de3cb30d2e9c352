use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Hand motion primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerbPrimitive {
    /// Center moves up (`cy` decreases).
    Lift,
    /// Center moves down.
    Drop,
    /// Horizontal translation.
    Push,
    /// Width and height oscillate in antiphase.
    Rotate,
    /// Alternating horizontal jitter.
    Shake,
    /// Horizontal translation along an upward arc.
    Throw,
}

impl VerbPrimitive {
    pub const ALL: [VerbPrimitive; 6] = [
        VerbPrimitive::Lift,
        VerbPrimitive::Drop,
        VerbPrimitive::Push,
        VerbPrimitive::Rotate,
        VerbPrimitive::Shake,
        VerbPrimitive::Throw,
    ];
}

/// Relative configurations between the held object and a reference object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrepRelation {
    /// Centers converge; the reference is a larger container.
    Into,
    /// Converge to vertical stacking, held object on top.
    Onto,
    /// Converge to lateral adjacency.
    NextTo,
    /// Centers start together and diverge.
    OutOf,
}

impl PrepRelation {
    pub const ALL: [PrepRelation; 4] = [
        PrepRelation::Into,
        PrepRelation::Onto,
        PrepRelation::NextTo,
        PrepRelation::OutOf,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub verbs: Vec<VerbPrimitive>,
    pub preps: Vec<PrepRelation>,
    /// Unit appearance prototypes, one per noun.
    pub nouns: Vec<Vec<f64>>,
    /// Prototypes for unnamed and distractor objects; never a noun.
    pub clutter: Vec<Vec<f64>>,
}

/// Smallest allowed angle between any two prototypes.
pub const MIN_PROTOTYPE_ANGLE_DEG: f64 = 30.0;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Default vocabulary: 6 verbs, 4 prepositions, 8 nouns in 16 dimensions.
pub fn build_vocab(seed: u64) -> VocabSpec {
    build_vocab_with(seed, 6, 4, 8, 16)
}

pub fn build_vocab_with(seed: u64, verbs: usize, preps: usize, nouns: usize, dim: usize) -> VocabSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = MIN_PROTOTYPE_ANGLE_DEG.to_radians().cos();
    let mut protos: Vec<Vec<f64>> = Vec::new();
    let clutter = 4;
    while protos.len() < nouns + clutter {
        let v = unit(&mut rng, dim);
        if protos.iter().all(|p| cosine(p, &v) <= limit) {
            protos.push(v);
        }
    }
    let clutter = protos.split_off(nouns);
    VocabSpec {
        verbs: VerbPrimitive::ALL.iter().copied().cycle().take(verbs.min(6)).collect(),
        preps: PrepRelation::ALL.iter().copied().take(preps.min(4)).collect(),
        nouns: protos,
        clutter,
    }
}
