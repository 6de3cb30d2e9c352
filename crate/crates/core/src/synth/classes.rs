use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::ClassTemplate;
use super::vocab::VocabSpec;
use super::SynthConfig;
use crate::compose::{ActionDescription, ComponentKind};
use crate::error::{Error, Result};

const ATTEMPTS: u64 = 2000;

fn falling(n: usize, k: usize) -> u128 {
    (0..k).map(|i| n.saturating_sub(i) as u128).product()
}

/// Per-kind maxima the slot layout supports: `[verbs, preps, nouns]`.
pub fn count_limits(cfg: &SynthConfig) -> [usize; 3] {
    [2, 2.min(cfg.slots.saturating_sub(2)), 2.min(cfg.slots.saturating_sub(1))]
}

/// Number of distinct descriptions with 1–2 distinct verbs, 0–2 distinct
/// prepositions and 1–2 distinct nouns.
pub fn expressible(vocab: &VocabSpec, cfg: &SynthConfig) -> u128 {
    let [mv, mp, mn] = count_limits(cfg);
    let mut total = 0;
    for nv in 1..=mv {
        for np in 0..=mp {
            for nn in 1..=mn {
                total += falling(vocab.verbs.len(), nv) * falling(vocab.preps.len(), np) * falling(vocab.nouns.len(), nn);
            }
        }
    }
    total
}

/// Deals ids from repeatedly shuffled decks so every id is used about
/// equally often.
struct Deck {
    size: usize,
    cards: Vec<u32>,
}

impl Deck {
    fn new(size: usize) -> Self {
        Deck { size, cards: Vec::new() }
    }

    fn draw(&mut self, rng: &mut impl Rng, exclude: &[u32]) -> u32 {
        for _ in 0..4 * self.size.max(1) {
            if self.cards.is_empty() {
                self.cards = (0..self.size as u32).collect();
                self.cards.shuffle(rng);
            }
            let c = self.cards.pop().expect("refilled");
            if !exclude.contains(&c) {
                return c;
            }
            self.cards.insert(0, c);
        }
        loop {
            let c = rng.random_range(0..self.size as u32);
            if !exclude.contains(&c) {
                return c;
            }
        }
    }
}

fn pick_count(rng: &mut impl Rng, weights: &[f64], max: usize, min: usize) -> usize {
    let total: f64 = weights[min..=max].iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate().take(max + 1).skip(min) {
        if x < *w {
            return i;
        }
        x -= w;
    }
    max
}

/// True when every vocabulary id occurs in at least two classes.
pub fn coverage_ok(vocab: &VocabSpec, classes: &[ClassTemplate]) -> bool {
    let sizes = [vocab.verbs.len(), vocab.preps.len(), vocab.nouns.len()];
    ComponentKind::ALL.iter().all(|&k| {
        (0..sizes[k.index()] as u32).all(|id| {
            classes
                .iter()
                .filter(|c| c.description.ids(k).contains(&id))
                .count()
                >= 2
        })
    })
}

/// Selects `num_classes` distinct descriptions in which every vocabulary id
/// occurs in at least two classes.
pub fn build_classes(vocab: &VocabSpec, num_classes: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<ClassTemplate>> {
    if num_classes as u128 > expressible(vocab, cfg) {
        return Err(Error::Infeasible(format!(
            "{num_classes} classes requested but only {} descriptions exist",
            expressible(vocab, cfg)
        )));
    }
    let [mv, mp, mn] = count_limits(cfg);
    let mv = mv.min(vocab.verbs.len());
    let mp = mp.min(vocab.preps.len());
    let mn = mn.min(vocab.nouns.len());
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9)));
        let mut decks = [Deck::new(vocab.verbs.len()), Deck::new(vocab.preps.len()), Deck::new(vocab.nouns.len())];
        let mut seen = BTreeSet::new();
        let mut classes = Vec::with_capacity(num_classes);
        let mut stalls = 0;
        while classes.len() < num_classes && stalls < 10_000 {
            let counts = [
                pick_count(&mut rng, &[0.0, 0.65, 0.35], mv, 1),
                pick_count(&mut rng, &[0.35, 0.45, 0.2], mp, 0),
                pick_count(&mut rng, &[0.0, 0.6, 0.4], mn, 1),
            ];
            let mut ids: [Vec<u32>; 3] = Default::default();
            for k in 0..3 {
                for _ in 0..counts[k] {
                    let id = decks[k].draw(&mut rng, &ids[k]);
                    ids[k].push(id);
                }
            }
            let [v, p, n] = ids;
            let d = ActionDescription::new(v, p, n);
            if seen.insert((d.verbs.clone(), d.preps.clone(), d.nouns.clone())) {
                classes.push(ClassTemplate::new(classes.len(), d, cfg.frames));
            } else {
                stalls += 1;
            }
        }
        if classes.len() == num_classes && coverage_ok(vocab, &classes) {
            return Ok(classes);
        }
    }
    Err(Error::Infeasible(format!(
        "no selection of {num_classes} classes covers every vocabulary id twice"
    )))
}
