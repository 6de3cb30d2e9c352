//! Procedural hand–object tracklet clips with a controllable vocabulary and
//! long-tail, compositional and few-shot splits.

mod classes;
mod oracle;
mod render;
mod splits;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use classes::{build_classes, count_limits, coverage_ok, expressible};
pub use oracle::{oracle_accuracy, oracle_predict};
pub use render::{render_sample, render_with, segment_plan, ClassTemplate, Latents};
pub use splits::{composable, make_splits, power_law_counts, verb_noun_pairs, Entry, Manifest, SplitMode, SplitSpec};
pub use vocab::{build_vocab, build_vocab_with, cosine, PrepRelation, VerbPrimitive, VocabSpec, MIN_PROTOTYPE_ANGLE_DEG};

use crate::error::{Error, Result};
use crate::graph::{read_records, write_records, VideoSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub slots: usize,
    pub appearance_dim: usize,
    /// Scales box jitter (σ = 0.01·noise) and appearance noise (σ = 0.15·noise).
    pub noise: f64,
    pub p_miss: f64,
    /// Probability that an unused object slot holds a distractor.
    pub distractor_p: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 16,
            slots: 4,
            appearance_dim: 16,
            noise: 1.0,
            p_miss: 0.05,
            distractor_p: 0.5,
        }
    }
}

/// SplitMix64 of `seed` and `index`; the per-clip seed and id.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders the clips of one split.
pub fn materialize(manifest: &Manifest, split: &str) -> Result<Vec<VideoSample>> {
    let entries = manifest.split(split)?;
    Ok(entries
        .iter()
        .map(|e| {
            let mut tpl = manifest.classes[e.class].clone();
            if let Some(n) = &e.nouns {
                tpl.description.nouns = n.clone();
            }
            render_sample(&tpl, &manifest.vocab, &manifest.config, manifest.config.noise, e.id)
        })
        .collect())
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` and one `{split}.jsonl` record file per split.
pub fn write_dataset(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for split in manifest.splits.keys() {
        let samples = materialize(manifest, split)?;
        write_records(&dir.join(format!("{split}.jsonl")), &samples)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<VideoSample>> {
    read_records(&dir.join(format!("{split}.jsonl")))
}

/// Vocabulary, classes and splits in one call.
pub fn generate(
    cfg: &SynthConfig,
    num_classes: usize,
    mode: SplitMode,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Manifest> {
    let vocab = build_vocab_with(seed, 6, 4, 8, cfg.appearance_dim);
    let classes = build_classes(&vocab, num_classes, seed, cfg)?;
    make_splits(&vocab, classes, cfg, mode, spec, seed)
}
