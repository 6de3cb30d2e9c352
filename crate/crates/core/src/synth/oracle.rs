use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::render::{render_with, ClassTemplate, Latents};
use super::splits::Manifest;
use crate::graph::VideoSample;

const MISSING_SLOT_PENALTY: f64 = 1e9;

/// Negative log-likelihood (up to constants) of `observed` under a
/// noise-free render of `tpl` with the same latents.
fn score(observed: &VideoSample, clean: &VideoSample, noise: f64) -> f64 {
    let sb = (0.01 * noise).max(1e-6);
    let sa = (0.15 * noise).max(1e-6);
    let mut s = 0.0;
    for t in 0..observed.frames {
        for k in 0..observed.slots {
            if !observed.present[t][k] {
                continue;
            }
            if !clean.present[t][k] {
                s += MISSING_SLOT_PENALTY;
                continue;
            }
            let a = observed.boxes[t][k].to_array();
            let b = clean.boxes[t][k].to_array();
            s += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (sb * sb);
            s += observed.appearance[k][t]
                .iter()
                .zip(&clean.appearance[k][t])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                / (sa * sa);
        }
    }
    s
}

/// Nearest noise-free render over all classes, given the clip's true
/// latents (re-drawn from its id). Lowest class index wins ties.
pub fn oracle_predict(sample: &VideoSample, classes: &[ClassTemplate], manifest: &Manifest) -> usize {
    let cfg = &manifest.config;
    let lat = Latents::draw(cfg, manifest.vocab.clutter.len(), &mut ChaCha8Rng::seed_from_u64(sample.id));
    let mut best = (f64::INFINITY, 0);
    for tpl in classes {
        let clean = render_with(tpl, &manifest.vocab, &lat, cfg, 0.0, 0.0, sample.id);
        let s = score(sample, &clean, cfg.noise);
        if s < best.0 {
            best = (s, tpl.id);
        }
    }
    best.1
}

/// Fraction of `samples` the oracle labels correctly.
pub fn oracle_accuracy(samples: &[VideoSample], manifest: &Manifest) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| oracle_predict(s, &manifest.classes, manifest) == s.label)
        .count();
    hits as f64 / samples.len() as f64
}
