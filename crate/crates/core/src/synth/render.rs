use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{PrepRelation, VerbPrimitive, VocabSpec};
use super::SynthConfig;
use crate::compose::ActionDescription;
use crate::graph::{default_roles, BBoxFeature, VideoSample};

/// A class: its description and the frame interval of each verb and
/// preposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub id: usize,
    pub description: ActionDescription,
    pub verb_segments: Vec<(usize, usize)>,
    pub prep_segments: Vec<(usize, usize)>,
}

/// Splits `[0, frames)` into `parts` consecutive equal intervals.
pub fn segment_plan(frames: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts)
        .map(|k| (k * frames / parts, (k + 1) * frames / parts))
        .collect()
}

impl ClassTemplate {
    pub fn new(id: usize, description: ActionDescription, frames: usize) -> Self {
        ClassTemplate {
            id,
            verb_segments: segment_plan(frames, description.verbs.len()),
            prep_segments: segment_plan(frames, description.preps.len()),
            description,
        }
    }
}

/// Every random quantity of a clip, drawn in an order that does not depend
/// on the class, so one seed renders the same scene under any template.
#[derive(Clone, Debug)]
pub struct Latents {
    hand: [f64; 4],
    amp: [f64; 2],
    dir: [f64; 2],
    grip: [f64; 2],
    held_size: [f64; 2],
    container: [f64; 2],
    prep_start: [[f64; 2]; 2],
    side: [f64; 2],
    obj_size: Vec<[f64; 2]>,
    static_pos: Vec<[f64; 2]>,
    distractor_on: Vec<bool>,
    clutter: Vec<usize>,
    miss: Vec<Vec<f64>>,
    box_noise: Vec<Vec<[f64; 4]>>,
    app_noise: Vec<Vec<Vec<f64>>>,
}

fn sign(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

impl Latents {
    pub fn draw(cfg: &SynthConfig, clutter_count: usize, rng: &mut impl Rng) -> Self {
        let (t, n, a) = (cfg.frames, cfg.slots, cfg.appearance_dim);
        let hand = [
            rng.random_range(0.35..0.65),
            rng.random_range(0.4..0.65),
            rng.random_range(0.08..0.12),
            rng.random_range(0.08..0.12),
        ];
        let amp = [rng.random_range(0.2..0.3), rng.random_range(0.2..0.3)];
        let dir = [sign(rng), sign(rng)];
        let grip = [rng.random_range(-0.03..0.03), rng.random_range(0.04..0.06)];
        let held_size = [rng.random_range(0.07..0.11), rng.random_range(0.07..0.11)];
        let container = [rng.random_range(0.2..0.25), rng.random_range(0.2..0.25)];
        let mut prep_start = [[0.0; 2]; 2];
        for p in &mut prep_start {
            let r: f64 = rng.random_range(0.2..0.3);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            *p = [r * theta.cos(), r * theta.sin()];
        }
        let side = [sign(rng), sign(rng)];
        let obj_size = (0..n)
            .map(|_| [rng.random_range(0.07..0.13), rng.random_range(0.07..0.13)])
            .collect();
        let static_pos = (0..n)
            .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
            .collect();
        let distractor_on = (0..n).map(|_| rng.random_bool(cfg.distractor_p)).collect();
        let clutter = (0..n).map(|_| rng.random_range(0..clutter_count.max(1))).collect();
        let miss = (0..t).map(|_| (0..n).map(|_| rng.random()).collect()).collect();
        let box_noise = (0..t)
            .map(|_| (0..n).map(|_| std::array::from_fn(|_| StandardNormal.sample(rng))).collect())
            .collect();
        let app_noise = (0..n)
            .map(|_| (0..t).map(|_| (0..a).map(|_| StandardNormal.sample(rng)).collect()).collect())
            .collect();
        Latents {
            hand,
            amp,
            dir,
            grip,
            held_size,
            container,
            prep_start,
            side,
            obj_size,
            static_pos,
            distractor_on,
            clutter,
            miss,
            box_noise,
            app_noise,
        }
    }
}

fn progress(t: usize, (a, b): (usize, usize)) -> f64 {
    if t < a {
        0.0
    } else if t >= b || b - a <= 1 {
        1.0
    } else {
        (t - a) as f64 / (b - a - 1) as f64
    }
}

/// Hand box per frame.
fn hand_track(tpl: &ClassTemplate, vocab: &VocabSpec, lat: &Latents, frames: usize) -> Vec<[f64; 4]> {
    let [cx0, cy0, w0, h0] = lat.hand;
    let mut out = Vec::with_capacity(frames);
    let mut base = [cx0, cy0];
    for (k, (&v, &seg)) in tpl.description.verbs.iter().zip(&tpl.verb_segments).enumerate() {
        let prim = vocab.verbs[v as usize];
        let (amp, dir) = (lat.amp[k.min(1)], lat.dir[k.min(1)]);
        for t in seg.0..seg.1 {
            let u = progress(t, seg);
            let (mut dx, mut dy, mut w, mut h) = (0.0, 0.0, w0, h0);
            match prim {
                VerbPrimitive::Lift => dy = -amp * u,
                VerbPrimitive::Drop => dy = amp * u,
                VerbPrimitive::Push => dx = dir * amp * u,
                VerbPrimitive::Throw => {
                    dx = dir * amp * u;
                    dy = -2.0 * amp * u * (1.0 - u);
                }
                VerbPrimitive::Rotate => {
                    let s = (2.0 * std::f64::consts::TAU * u).sin();
                    w = w0 * (1.0 + 0.4 * s);
                    h = h0 * (1.0 - 0.4 * s);
                }
                VerbPrimitive::Shake => {
                    dx = if (t - seg.0) % 2 == 0 { 0.05 } else { -0.05 };
                }
            }
            out.push([base[0] + dx, base[1] + dy, w, h]);
        }
        match prim {
            VerbPrimitive::Lift => base[1] -= amp,
            VerbPrimitive::Drop => base[1] += amp,
            VerbPrimitive::Push | VerbPrimitive::Throw => base[0] += dir * amp,
            VerbPrimitive::Rotate | VerbPrimitive::Shake => {}
        }
    }
    while out.len() < frames {
        out.push([base[0], base[1], w0, h0]);
    }
    out
}

/// Offset of the reference center from the held center.
fn prep_offset(rel: PrepRelation, u: f64, start: [f64; 2], side: f64, held_h: f64, ref_h: f64) -> [f64; 2] {
    let lerp = |a: [f64; 2], b: [f64; 2]| [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u];
    match rel {
        PrepRelation::Into => lerp(start, [0.0, 0.0]),
        PrepRelation::Onto => lerp(start, [0.0, (held_h + ref_h) / 2.0]),
        PrepRelation::NextTo => lerp(start, [side * 0.18, 0.0]),
        PrepRelation::OutOf => lerp([0.0, 0.0], start),
    }
}

/// Noise-free boxes (`None` for slots that are absent for the whole clip)
/// and the appearance prototype of each slot.
type Scene = (Vec<Option<Vec<[f64; 4]>>>, Vec<Option<Vec<f64>>>);

fn scene(tpl: &ClassTemplate, vocab: &VocabSpec, lat: &Latents, cfg: &SynthConfig) -> Scene {
    let (frames, slots) = (cfg.frames, cfg.slots);
    let d = &tpl.description;
    let hand = hand_track(tpl, vocab, lat, frames);
    let held: Vec<[f64; 4]> = hand
        .iter()
        .map(|b| [b[0] + lat.grip[0], b[1] + lat.grip[1], lat.held_size[0], lat.held_size[1]])
        .collect();
    let mut boxes: Vec<Option<Vec<[f64; 4]>>> = vec![None; slots];
    let mut protos: Vec<Option<Vec<f64>>> = vec![None; slots];
    boxes[0] = Some(hand);
    boxes[1] = Some(held.clone());
    protos[1] = Some(vocab.nouns[d.nouns[0] as usize].clone());
    for (p, (&rel_id, &seg)) in d.preps.iter().zip(&tpl.prep_segments).enumerate() {
        let r = (2 + p).min(slots - 1);
        let rel = vocab.preps[rel_id as usize];
        let size = if rel == PrepRelation::Into { lat.container } else { lat.obj_size[r] };
        let track = held
            .iter()
            .enumerate()
            .map(|(t, hb)| {
                let o = prep_offset(rel, progress(t, seg), lat.prep_start[p.min(1)], lat.side[p.min(1)], hb[3], size[1]);
                [hb[0] + o[0], hb[1] + o[1], size[0], size[1]]
            })
            .collect();
        boxes[r] = Some(track);
    }
    for s in 2..slots {
        let named = s == 2 && d.nouns.len() >= 2;
        if boxes[s].is_none() && (named || lat.distractor_on[s]) {
            let [cx, cy] = lat.static_pos[s];
            let [w, h] = lat.obj_size[s];
            boxes[s] = Some(vec![[cx, cy, w, h]; frames]);
        }
        if boxes[s].is_some() {
            protos[s] = Some(if named {
                vocab.nouns[d.nouns[1] as usize].clone()
            } else {
                vocab.clutter[lat.clutter[s] % vocab.clutter.len()].clone()
            });
        }
    }
    (boxes, protos)
}

/// Renders one clip from explicit latents.
pub fn render_with(
    tpl: &ClassTemplate,
    vocab: &VocabSpec,
    lat: &Latents,
    cfg: &SynthConfig,
    noise: f64,
    p_miss: f64,
    id: u64,
) -> VideoSample {
    let (frames, slots, dim) = (cfg.frames, cfg.slots, cfg.appearance_dim);
    let (boxes, protos) = scene(tpl, vocab, lat, cfg);
    let sigma_box = 0.01 * noise;
    let sigma_app = 0.15 * noise;
    let mut out_boxes = vec![vec![BBoxFeature::ZERO; slots]; frames];
    let mut present = vec![vec![false; slots]; frames];
    let mut appearance = vec![vec![vec![0.0; dim]; frames]; slots];
    for s in 0..slots {
        let Some(track) = &boxes[s] else { continue };
        for t in 0..frames {
            if lat.miss[t][s] < p_miss {
                continue;
            }
            let n = lat.box_noise[t][s];
            let b = track[t];
            let jit = |i: usize| b[i] + sigma_box * n[i];
            let bb = BBoxFeature::new(jit(0), jit(1), jit(2).max(0.01), jit(3).max(0.01)).clamped();
            if bb == BBoxFeature::ZERO {
                continue;
            }
            out_boxes[t][s] = bb;
            present[t][s] = true;
            if let Some(p) = &protos[s] {
                for (k, v) in appearance[s][t].iter_mut().enumerate() {
                    *v = p[k] + sigma_app * lat.app_noise[s][t][k];
                }
            }
        }
    }
    VideoSample {
        id,
        frames,
        slots,
        roles: default_roles(slots, 1),
        boxes: out_boxes,
        present,
        appearance,
        label: tpl.id,
        description: tpl.description.clone(),
    }
}

/// Renders one clip; all randomness comes from `seed`.
pub fn render_sample(tpl: &ClassTemplate, vocab: &VocabSpec, cfg: &SynthConfig, noise: f64, seed: u64) -> VideoSample {
    let lat = Latents::draw(cfg, vocab.clutter.len(), &mut ChaCha8Rng::seed_from_u64(seed));
    render_with(tpl, vocab, &lat, cfg, noise, cfg.p_miss, seed)
}
