//! Tracklet videos, their node features, and the two disentangled edge sets:
//! hand–object pairs for verbs and object–object pairs for prepositions.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::ActionDescription;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Lower and upper bound on box components; leaves slack for off-screen
/// motion.
pub const BOX_RANGE: (f64, f64) = (-0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Hand,
    Object,
}

/// Center and extent of one detection, normalized to the frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBoxFeature {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBoxFeature {
    pub const ZERO: BBoxFeature = BBoxFeature {
        cx: 0.0,
        cy: 0.0,
        w: 0.0,
        h: 0.0,
    };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBoxFeature { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| v.clamp(BOX_RANGE.0, BOX_RANGE.1);
        BBoxFeature::new(c(self.cx), c(self.cy), c(self.w), c(self.h))
    }

    fn in_range(self) -> bool {
        self.to_array()
            .iter()
            .all(|v| v.is_finite() && (BOX_RANGE.0..=BOX_RANGE.1).contains(v))
    }
}

impl From<[f64; 4]> for BBoxFeature {
    fn from(a: [f64; 4]) -> Self {
        BBoxFeature::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBoxFeature> for [f64; 4] {
    fn from(b: BBoxFeature) -> Self {
        b.to_array()
    }
}

/// One action clip: `frames × slots` boxes with presence flags, per-object
/// appearance vectors, and the class it belongs to.
///
/// Noun `i` of the description is carried by the `i`-th object slot in slot
/// order; any further object slots are distractors or unnamed reference
/// objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: u64,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "N")]
    pub slots: usize,
    pub roles: Vec<Role>,
    /// `[frame][slot]`
    pub boxes: Vec<Vec<BBoxFeature>>,
    /// `[frame][slot]`
    pub present: Vec<Vec<bool>>,
    /// `[slot][frame][dim]`; all zeros for hands and absent frames.
    pub appearance: Vec<Vec<Vec<f64>>>,
    pub label: usize,
    pub description: ActionDescription,
}

impl VideoSample {
    /// Checks extents and the zero-padding convention.
    pub fn validate(&self, frames: usize, appearance_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSample(format!("sample {}: {m}", self.id)));
        if self.frames != frames {
            return bad(format!("{} frames, expected {frames}", self.frames));
        }
        if self.slots == 0 || self.roles.len() != self.slots {
            return bad("role list does not match slot count".into());
        }
        if self.boxes.len() != frames || self.present.len() != frames {
            return bad("box/presence frame count mismatch".into());
        }
        if self.appearance.len() != self.slots {
            return bad("appearance slot count mismatch".into());
        }
        for t in 0..frames {
            if self.boxes[t].len() != self.slots || self.present[t].len() != self.slots {
                return bad(format!("frame {t} has the wrong slot count"));
            }
            for s in 0..self.slots {
                let b = self.boxes[t][s];
                if !b.in_range() {
                    return bad(format!("box out of range at frame {t} slot {s}"));
                }
                if !self.present[t][s] && b != BBoxFeature::ZERO {
                    return bad(format!("absent slot {s} at frame {t} has a nonzero box"));
                }
            }
        }
        for (s, per_frame) in self.appearance.iter().enumerate() {
            if per_frame.len() != frames || per_frame.iter().any(|v| v.len() != appearance_dim) {
                return bad(format!("appearance extent mismatch at slot {s}"));
            }
        }
        Ok(())
    }

    /// Slots that are absent in every frame.
    pub fn never_present(&self) -> Vec<bool> {
        (0..self.slots)
            .map(|s| self.present.iter().all(|row| !row[s]))
            .collect()
    }

    /// Object slots in slot order.
    pub fn object_slots(&self) -> Vec<usize> {
        object_slots(&self.roles)
    }
}

pub fn object_slots(roles: &[Role]) -> Vec<usize> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Role::Object)
        .map(|(i, _)| i)
        .collect()
}

/// Packs `(cx, cy, w, h)` per frame and slot into `[T × N × 4]`.
pub fn build_node_features<F: Real>(sample: &VideoSample) -> Tensor<F> {
    let mut data = Vec::with_capacity(sample.frames * sample.slots * 4);
    for t in 0..sample.frames {
        for s in 0..sample.slots {
            let b = if sample.present[t][s] {
                sample.boxes[t][s]
            } else {
                BBoxFeature::ZERO
            };
            data.extend(b.to_array().iter().map(|&v| F::c(v)));
        }
    }
    Tensor::new(vec![sample.frames, sample.slots, 4], data).expect("extent")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Verb,
    Preposition,
}

/// Directed slot pairs `(i, j)`; the feature of `(i, j)` is computed from
/// `[h_i, h_j]` and summed into node `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSet {
    pub kind: EdgeKind,
    pub pairs: Vec<(usize, usize)>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Verb set: every hand paired with every object in both directions.
/// Preposition set: every ordered pair of distinct objects.
pub fn build_edge_sets(roles: &[Role]) -> Result<(EdgeSet, EdgeSet)> {
    let hands: Vec<usize> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Role::Hand)
        .map(|(i, _)| i)
        .collect();
    let objects = object_slots(roles);
    if hands.is_empty() {
        return Err(Error::NoHand);
    }
    if objects.is_empty() {
        return Err(Error::NoObject);
    }
    let mut verb = Vec::new();
    for &h in &hands {
        for &o in &objects {
            verb.push((h, o));
            verb.push((o, h));
        }
    }
    let mut prep = Vec::new();
    for &i in &objects {
        for &j in &objects {
            if i != j {
                prep.push((i, j));
            }
        }
    }
    Ok((
        EdgeSet {
            kind: EdgeKind::Verb,
            pairs: verb,
        },
        EdgeSet {
            kind: EdgeKind::Preposition,
            pairs: prep,
        },
    ))
}

/// Default role layout: `hands` hand slots followed by objects.
pub fn default_roles(slots: usize, hands: usize) -> Vec<Role> {
    (0..slots)
        .map(|i| if i < hands { Role::Hand } else { Role::Object })
        .collect()
}

/// Reads one JSON record per line.
pub fn read_records(path: &Path) -> Result<Vec<VideoSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_records<'a>(path: &Path, samples: impl IntoIterator<Item = &'a VideoSample>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    pub(crate) fn blank_sample(frames: usize, roles: Vec<Role>, appearance_dim: usize) -> VideoSample {
        let slots = roles.len();
        VideoSample {
            id: 0,
            frames,
            slots,
            roles,
            boxes: vec![vec![BBoxFeature::ZERO; slots]; frames],
            present: vec![vec![false; slots]; frames],
            appearance: vec![vec![vec![0.0; appearance_dim]; frames]; slots],
            label: 0,
            description: ActionDescription::new(vec![0], vec![], vec![0]),
        }
    }

    #[test]
    fn all_absent_gives_zero_features() {
        let s = blank_sample(3, vec![Role::Hand, Role::Object, Role::Object], 2);
        s.validate(3, 2).unwrap();
        let x = build_node_features::<f64>(&s);
        assert_eq!(x.shape(), &[3, 3, 4]);
        assert!(x.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.never_present(), vec![true, true, true]);
    }

    #[test]
    fn hand_rows_are_packed() {
        let mut s = blank_sample(2, vec![Role::Hand, Role::Object], 2);
        for t in 0..2 {
            s.boxes[t][0] = BBoxFeature::new(0.5, 0.5, 0.1, 0.1);
            s.present[t][0] = true;
        }
        let x = build_node_features::<f64>(&s);
        for t in 0..2 {
            assert_eq!(&x.data()[t * 8..t * 8 + 4], &[0.5, 0.5, 0.1, 0.1]);
            assert_eq!(&x.data()[t * 8 + 4..t * 8 + 8], &[0.0; 4]);
        }
    }

    #[test]
    fn random_sample_packs_field_by_field() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = blank_sample(4, default_roles(4, 1), 3);
        for t in 0..4 {
            for k in 0..4 {
                if rng.random_bool(0.8) {
                    s.present[t][k] = true;
                    s.boxes[t][k] = BBoxFeature::new(rng.random(), rng.random(), rng.random(), rng.random());
                }
            }
        }
        let x = build_node_features::<f64>(&s);
        for t in 0..4 {
            for k in 0..4 {
                let want = if s.present[t][k] { s.boxes[t][k].to_array() } else { [0.0; 4] };
                assert_eq!(&x.data()[(t * 4 + k) * 4..(t * 4 + k) * 4 + 4], &want);
            }
        }
    }

    #[test]
    fn validation_catches_nonzero_absent_box() {
        let mut s = blank_sample(2, vec![Role::Hand, Role::Object], 2);
        s.boxes[1][1] = BBoxFeature::new(0.1, 0.1, 0.1, 0.1);
        assert!(s.validate(2, 2).is_err());
        s.boxes[1][1] = BBoxFeature::ZERO;
        s.present[0][0] = true;
        s.boxes[0][0] = BBoxFeature::new(2.0, 0.0, 0.0, 0.0);
        assert!(s.validate(2, 2).is_err());
        assert!(blank_sample(3, vec![Role::Hand], 2).validate(2, 2).is_err());
    }

    #[test]
    fn edge_sets_small_cases() {
        let (v, p) = build_edge_sets(&[Role::Hand, Role::Object]).unwrap();
        assert_eq!(v.pairs, vec![(0, 1), (1, 0)]);
        assert!(p.is_empty());

        let (v, p) = build_edge_sets(&default_roles(3, 1)).unwrap();
        let want: BTreeSet<_> = [(0, 1), (1, 0), (0, 2), (2, 0)].into();
        assert_eq!(v.pairs.iter().copied().collect::<BTreeSet<_>>(), want);
        assert_eq!(p.pairs, vec![(1, 2), (2, 1)]);

        let (v, p) = build_edge_sets(&default_roles(4, 1)).unwrap();
        assert_eq!((v.len(), p.len()), (6, 6));
    }

    #[test]
    fn edge_set_errors() {
        assert!(matches!(build_edge_sets(&[Role::Object, Role::Object]), Err(Error::NoHand)));
        assert!(matches!(build_edge_sets(&[Role::Hand]), Err(Error::NoObject)));
    }

    #[test]
    fn two_hands_add_their_pairs() {
        let (v, p) = build_edge_sets(&default_roles(5, 2)).unwrap();
        assert_eq!(v.len(), 2 * 2 * 3);
        assert_eq!(p.len(), 6);
        assert!(v.pairs.iter().all(|&(i, j)| i < 2 || j < 2));
    }

    #[test]
    fn record_round_trips_through_json() {
        let mut s = blank_sample(2, vec![Role::Hand, Role::Object], 2);
        s.present[0][1] = true;
        s.boxes[0][1] = BBoxFeature::new(0.25, 0.5, 0.125, 0.0625);
        let line = serde_json::to_string(&s).unwrap();
        assert!(line.contains(r#""T":2"#) && line.contains(r#""roles":["hand","object"]"#));
        assert!(line.contains("[0.25,0.5,0.125,0.0625]"));
        let back: VideoSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn cardinalities_follow_closed_forms(n in 2usize..=8) {
            let (v, p) = build_edge_sets(&default_roles(n, 1)).unwrap();
            prop_assert_eq!(v.len(), 2 * (n - 1));
            prop_assert_eq!(p.len(), (n - 1) * (n - 2));
            prop_assert!(v.pairs.iter().chain(&p.pairs).all(|(i, j)| i != j));
        }

        #[test]
        fn relabeling_objects_maps_edge_sets(seed in 0u64..1000, n in 3usize..=7) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut objects: Vec<usize> = (1..n).collect();
            objects.shuffle(&mut rng);
            // π fixes the hand at 0 and permutes the object slots.
            let pi: Vec<usize> = std::iter::once(0).chain(objects).collect();
            let roles = default_roles(n, 1);
            let permuted_roles: Vec<Role> = (0..n).map(|i| roles[pi.iter().position(|&x| x == i).unwrap()]).collect();
            let (v, p) = build_edge_sets(&roles).unwrap();
            let (v2, p2) = build_edge_sets(&permuted_roles).unwrap();
            let image = |e: &EdgeSet| e.pairs.iter().map(|&(i, j)| (pi[i], pi[j])).collect::<BTreeSet<_>>();
            let set = |e: &EdgeSet| e.pairs.iter().copied().collect::<BTreeSet<_>>();
            prop_assert_eq!(image(&v), set(&v2));
            prop_assert_eq!(image(&p), set(&p2));
        }
    }
}
