use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::ClassTemplate;
use super::vocab::VocabSpec;
use super::{sample_seed, SynthConfig};
use crate::compose::{ActionDescription, ComponentKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Longtail,
    Compositional,
    Fewshot,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "longtail" => Ok(SplitMode::Longtail),
            "compositional" => Ok(SplitMode::Compositional),
            "fewshot" => Ok(SplitMode::Fewshot),
            _ => Err(Error::Config(format!("unknown split mode `{s}`"))),
        }
    }
}

/// Sizes used by [`make_splits`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub head_count: usize,
    pub tail_count: usize,
    pub val_per_class: usize,
    pub tail_classes: usize,
    pub compositional_train: usize,
    pub novel_classes: usize,
    pub base_count: usize,
    pub shots: Vec<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            head_count: 200,
            tail_count: 10,
            val_per_class: 20,
            tail_classes: 20,
            compositional_train: 60,
            novel_classes: 10,
            base_count: 60,
            shots: vec![5, 10],
        }
    }
}

/// One clip to render: its class, its seed (also its id) and, in
/// compositional mode, the nouns it shows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: u64,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nouns: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: SplitMode,
    pub seed: u64,
    pub config: SynthConfig,
    pub vocab: VocabSpec,
    pub classes: Vec<ClassTemplate>,
    /// Rare classes targeted by composition (long-tail mode).
    #[serde(default)]
    pub tail: Vec<usize>,
    /// Few-shot mode: classes `0..base` are base classes, the rest novel.
    #[serde(default)]
    pub base_classes: usize,
    pub splits: BTreeMap<String, Vec<Entry>>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[Entry]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("manifest has no split `{name}`")))
    }

    pub fn descriptions(&self) -> Vec<ActionDescription> {
        self.classes.iter().map(|c| c.description.clone()).collect()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        if let Some(train) = self.splits.get("train") {
            for e in train {
                counts[e.class] += 1;
            }
        }
        counts
    }
}

/// `round(head · (tail/head)^(i/(C−1)))` for `i = 0..C`.
pub fn power_law_counts(classes: usize, head: usize, tail: usize) -> Vec<usize> {
    if classes == 1 {
        return vec![head];
    }
    let ratio = tail as f64 / head as f64;
    (0..classes)
        .map(|i| (head as f64 * ratio.powf(i as f64 / (classes - 1) as f64)).round() as usize)
        .collect()
}

/// Every component id of every class in `targets` occurs in some class of
/// `sources`.
pub fn composable(classes: &[ClassTemplate], targets: &[usize], sources: &[usize]) -> bool {
    targets.iter().all(|&t| {
        ComponentKind::ALL.iter().all(|&k| {
            classes[t].description.ids(k).iter().all(|id| {
                sources
                    .iter()
                    .any(|&s| classes[s].description.ids(k).contains(id))
            })
        })
    })
}

struct Ids {
    seed: u64,
    next: u64,
}

impl Ids {
    fn entry(&mut self, class: usize) -> Entry {
        self.next += 1;
        Entry {
            id: sample_seed(self.seed, self.next),
            class,
            nouns: None,
        }
    }
}

const ATTEMPTS: u64 = 1000;

pub fn make_splits(
    vocab: &VocabSpec,
    classes: Vec<ClassTemplate>,
    cfg: &SynthConfig,
    mode: SplitMode,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Ids { seed, next: 0 };
    let mut splits = BTreeMap::new();
    let n = classes.len();
    let mut manifest = Manifest {
        mode,
        seed,
        config: cfg.clone(),
        vocab: vocab.clone(),
        classes: Vec::new(),
        tail: Vec::new(),
        base_classes: 0,
        splits: BTreeMap::new(),
    };
    match mode {
        SplitMode::Longtail => {
            if spec.tail_classes >= n {
                return Err(Error::Config("tail class count must leave head classes".into()));
            }
            let counts = power_law_counts(n, spec.head_count, spec.tail_count);
            let mut order: Vec<usize> = (0..n).collect();
            let mut found = false;
            for _ in 0..ATTEMPTS {
                order.shuffle(&mut rng);
                let tail: Vec<usize> = order[n - spec.tail_classes..].to_vec();
                let head: Vec<usize> = order[..n - spec.tail_classes].to_vec();
                if composable(&classes, &tail, &head) {
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Infeasible("no tail set is composable from head classes".into()));
            }
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (rank, &c) in order.iter().enumerate() {
                train.extend((0..counts[rank]).map(|_| ids.entry(c)));
            }
            for c in 0..n {
                val.extend((0..spec.val_per_class).map(|_| ids.entry(c)));
            }
            let mut tail: Vec<usize> = order[n - spec.tail_classes..].to_vec();
            tail.sort_unstable();
            manifest.tail = tail;
            splits.insert("train".to_string(), train);
            splits.insert("val".to_string(), val);
            manifest.classes = classes;
        }
        SplitMode::Compositional => {
            let (merged, train, val) = compositional(vocab, &classes, cfg, spec, &mut rng, &mut ids)?;
            manifest.classes = merged;
            splits.insert("train".to_string(), train);
            splits.insert("val".to_string(), val);
        }
        SplitMode::Fewshot => {
            let novel_n = spec.novel_classes;
            if novel_n == 0 || novel_n >= n {
                return Err(Error::Config("novel class count must be in 1..classes".into()));
            }
            let max_shot = spec.shots.iter().copied().max().unwrap_or(0);
            if max_shot > spec.head_count {
                return Err(Error::Config(format!("{max_shot} shots exceed the renderable pool of {}", spec.head_count)));
            }
            let mut order: Vec<usize> = (0..n).collect();
            let mut found = false;
            for _ in 0..ATTEMPTS {
                order.shuffle(&mut rng);
                if composable(&classes, &order[n - novel_n..], &order[..n - novel_n]) {
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Infeasible("no novel set is composable from base classes".into()));
            }
            // renumber so base classes come first
            let renumbered: Vec<ClassTemplate> = order
                .iter()
                .enumerate()
                .map(|(new, &old)| ClassTemplate { id: new, ..classes[old].clone() })
                .collect();
            let base = n - novel_n;
            let mut base_train = Vec::new();
            let mut base_val = Vec::new();
            let mut novel_val = Vec::new();
            for c in 0..base {
                base_train.extend((0..spec.base_count).map(|_| ids.entry(c)));
                base_val.extend((0..spec.val_per_class).map(|_| ids.entry(c)));
            }
            let pool: Vec<Vec<Entry>> = (base..n).map(|c| (0..max_shot).map(|_| ids.entry(c)).collect()).collect();
            for &k in &spec.shots {
                let shots: Vec<Entry> = pool.iter().flat_map(|p| p[..k].iter().cloned()).collect();
                splits.insert(format!("novel_train_k{k}"), shots);
            }
            for c in base..n {
                novel_val.extend((0..spec.val_per_class).map(|_| ids.entry(c)));
            }
            splits.insert("base_train".to_string(), base_train);
            splits.insert("base_val".to_string(), base_val);
            splits.insert("novel_val".to_string(), novel_val);
            manifest.classes = renumbered;
            manifest.base_classes = base;
        }
    }
    manifest.splits = splits;
    Ok(manifest)
}

type Split = (Vec<ClassTemplate>, Vec<Entry>, Vec<Entry>);

/// Classes keyed by verbs, prepositions and noun count; each verb set's
/// noun sets are divided between train and val so no (verb set, noun set)
/// pair appears on both sides.
fn compositional(
    vocab: &VocabSpec,
    classes: &[ClassTemplate],
    cfg: &SynthConfig,
    spec: &SplitSpec,
    rng: &mut ChaCha8Rng,
    ids: &mut Ids,
) -> Result<Split> {
    let mut keys: Vec<(Vec<u32>, Vec<u32>, usize)> = Vec::new();
    for c in classes {
        let d = &c.description;
        let key = (d.verbs.clone(), d.preps.clone(), d.nouns.len());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let nouns = vocab.nouns.len() as u32;
    let noun_sets = |count: usize| -> Vec<Vec<u32>> {
        match count {
            1 => (0..nouns).map(|a| vec![a]).collect(),
            _ => (0..nouns)
                .flat_map(|a| (a + 1..nouns).map(move |b| vec![a, b]))
                .collect(),
        }
    };
    // side of each (sorted verb set, noun set): true = train
    let mut side: BTreeMap<(Vec<u32>, Vec<u32>), bool> = BTreeMap::new();
    let mut merged = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, (verbs, preps, nn)) in keys.into_iter().enumerate() {
        let mut vset = verbs.clone();
        vset.sort_unstable();
        let mut sets = noun_sets(nn);
        sets.shuffle(rng);
        for s in &sets {
            let k = (vset.clone(), s.clone());
            side.entry(k).or_insert_with(|| rng.random_bool(0.5));
        }
        let train_sets: Vec<&Vec<u32>> = sets.iter().filter(|s| side[&(vset.clone(), (*s).clone())]).collect();
        let val_sets: Vec<&Vec<u32>> = sets.iter().filter(|s| !side[&(vset.clone(), (*s).clone())]).collect();
        if train_sets.is_empty() || val_sets.is_empty() {
            return Err(Error::Infeasible(format!("verb set {vset:?} has noun sets on one side only")));
        }
        let first = train_sets[0].clone();
        let d = ActionDescription::new(verbs, preps, first);
        merged.push(ClassTemplate::new(class, d, cfg.frames));
        let mut emit = |out: &mut Vec<Entry>, sets: &[&Vec<u32>], count: usize, rng: &mut ChaCha8Rng| {
            for _ in 0..count {
                let mut nouns = sets[rng.random_range(0..sets.len())].clone();
                if rng.random_bool(0.5) {
                    nouns.reverse();
                }
                let mut e = ids.entry(class);
                e.nouns = Some(nouns);
                out.push(e);
            }
        };
        emit(&mut train, &train_sets, spec.compositional_train, rng);
        emit(&mut val, &val_sets, spec.val_per_class, rng);
    }
    Ok((merged, train, val))
}

/// Unordered (verb set, noun set) pairs of a list of entries.
pub fn verb_noun_pairs(manifest: &Manifest, entries: &[Entry]) -> BTreeSet<(Vec<u32>, Vec<u32>)> {
    entries
        .iter()
        .map(|e| {
            let d = &manifest.classes[e.class].description;
            let mut v = d.verbs.clone();
            v.sort_unstable();
            let mut n = e.nouns.clone().unwrap_or_else(|| d.nouns.clone());
            n.sort_unstable();
            (v, n)
        })
        .collect()
}
