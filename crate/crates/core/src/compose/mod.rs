//! Action representations assembled from component features, the feature
//! bank, and composition of synthetic samples for rare classes.
//!
//! Every class is scored with the representation assembled under its own
//! layout (component counts and order), so inference needs no label: the
//! logit of class `c` comes from `classify(assemble(features, layout(c)))`.

mod description;

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample as sample_indices;
use rand::Rng;

pub use description::*;

use crate::error::{Error, Result};
use crate::numerics::nn::mlp_forward;
use crate::numerics::{ParameterStore, Real, Tape, Var};
use crate::spatial::ComponentFeature;

/// Large negative offset that removes a logit from a softmax.
const EXCLUDED: f64 = -1e30;

pub fn reducer_path(kind: ComponentKind, count: usize) -> String {
    format!("compose.reduce.{}.{count}", kind.name())
}

pub const NULL_PREP: &str = "compose.null_prep";
pub const CLASSIFIER: &str = "classifier";

/// Registers reducers for every admissible count, the null preposition
/// embedding and the shared classifier.
pub fn init_composer<F: Real>(
    store: &mut ParameterStore<F>,
    width: usize,
    n_max: [usize; 3],
    hidden: &[usize],
    classes: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for kind in ComponentKind::ALL {
        for count in 1..=n_max[kind.index()] {
            if !width.is_multiple_of(count) {
                return Err(Error::Config(format!(
                    "width {width} is not divisible by {count} {}s",
                    kind.name()
                )));
            }
            store.init_mlp(&reducer_path(kind, count), &[width, width / count], rng);
        }
    }
    store.init_zeros(NULL_PREP, vec![width]);
    let widths: Vec<usize> = std::iter::once(3 * width)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(classes))
        .collect();
    store.init_mlp(CLASSIFIER, &widths, rng);
    Ok(())
}

/// Reduces each component and concatenates the pieces in `layout.order`.
/// `components` are `[rows, D]`; the result is `[rows, 3D]`. When the layout
/// has no preposition the null embedding fills the last `D` columns.
pub fn assemble_representation<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    components: &[ComponentFeature],
    layout: &Layout,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(layout.order.len() + 1);
    let mut rows = None;
    for r in &layout.order {
        let c = components
            .iter()
            .find(|c| c.kind == r.kind && c.index == r.index)
            .ok_or_else(|| Error::ComponentMismatch(format!("no feature for component {r}")))?;
        let reduced = mlp_forward(tape, store, c.vec, &reducer_path(r.kind, layout.count(r.kind)))?;
        rows.get_or_insert(tape.shape(c.vec)[0]);
        parts.push(reduced);
    }
    let rows = rows.ok_or_else(|| Error::ComponentMismatch("empty layout".into()))?;
    if layout.count(ComponentKind::Preposition) == 0 {
        let null = tape.param(store, NULL_PREP)?;
        let width = tape.shape(null)[0];
        let null = tape.reshape(null, vec![1, width])?;
        parts.push(tape.gather_rows(null, vec![Some(0); rows])?);
    }
    tape.concat_cols(&parts)
}

/// Shared classifier: `[rows, 3D] → [rows, C]`.
pub fn classify<F: Real>(tape: &mut Tape<F>, store: &ParameterStore<F>, rep: Var) -> Result<Var> {
    mlp_forward(tape, store, rep, CLASSIFIER)
}

/// Per-class layouts grouped into distinct layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable {
    pub descriptions: Vec<ActionDescription>,
    pub layouts: Vec<Layout>,
    pub class_layout: Vec<usize>,
    /// Classes sharing each layout, ascending.
    pub members: Vec<Vec<usize>>,
}

impl ClassTable {
    pub fn new(descriptions: Vec<ActionDescription>) -> Self {
        let mut index: BTreeMap<Layout, usize> = BTreeMap::new();
        let mut layouts = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut class_layout = Vec::with_capacity(descriptions.len());
        for (c, d) in descriptions.iter().enumerate() {
            let l = d.layout();
            let u = *index.entry(l.clone()).or_insert_with(|| {
                layouts.push(l);
                members.push(Vec::new());
                layouts.len() - 1
            });
            members[u].push(c);
            class_layout.push(u);
        }
        ClassTable {
            descriptions,
            layouts,
            class_layout,
            members,
        }
    }

    pub fn classes(&self) -> usize {
        self.descriptions.len()
    }

    /// Additive mask that keeps only the classes sharing `class`'s layout.
    fn layout_mask<F: Real>(&self, class: usize) -> Vec<F> {
        let u = self.class_layout[class];
        (0..self.classes())
            .map(|c| if self.class_layout[c] == u { F::zero() } else { F::c(EXCLUDED) })
            .collect()
    }
}

/// Class-conditional logits `[rows, C]`: column `c` is scored on the
/// representation assembled with class `c`'s layout.
pub fn class_logits<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    components: &[ComponentFeature],
    table: &ClassTable,
) -> Result<Var> {
    let mut pieces = Vec::with_capacity(table.layouts.len());
    let mut column_of = vec![0u32; table.classes()];
    let mut next = 0u32;
    for (layout, members) in table.layouts.iter().zip(&table.members) {
        let rep = assemble_representation(tape, store, components, layout)?;
        let logits = classify(tape, store, rep)?;
        pieces.push(tape.gather_cols(logits, members.iter().map(|&c| c as u32).collect())?);
        for &c in members {
            column_of[c] = next;
            next += 1;
        }
    }
    let grouped = tape.concat_cols(&pieces)?;
    tape.gather_cols(grouped, column_of)
}

/// Lowest index wins ties.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry<F> {
    pub vec: Vec<F>,
    pub source: u64,
}

/// Detached component features keyed by `(kind, vocabulary id)`, each
/// bucket a ring buffer of fixed capacity.
#[derive(Clone, Debug)]
pub struct FeatureBank<F> {
    capacity: usize,
    buckets: BTreeMap<(ComponentKind, u32), VecDeque<BankEntry<F>>>,
}

impl<F: Real> FeatureBank<F> {
    pub fn new(capacity: usize) -> Self {
        FeatureBank {
            capacity: capacity.max(1),
            buckets: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, kind: ComponentKind, id: u32, vec: Vec<F>, source: u64) {
        let b = self.buckets.entry((kind, id)).or_default();
        if b.len() == self.capacity {
            b.pop_front();
        }
        b.push_back(BankEntry { vec, source });
    }

    pub fn bucket(&self, kind: ComponentKind, id: u32) -> Option<&VecDeque<BankEntry<F>>> {
        self.buckets.get(&(kind, id))
    }

    pub fn len(&self, kind: ComponentKind, id: u32) -> usize {
        self.bucket(kind, id).map_or(0, VecDeque::len)
    }

    /// True when every component id of `desc` has at least one entry.
    pub fn stocks(&self, desc: &ActionDescription) -> bool {
        ComponentKind::ALL
            .iter()
            .all(|&k| desc.ids(k).iter().all(|&id| self.len(k, id) > 0))
    }

    pub fn keys(&self) -> impl Iterator<Item = (ComponentKind, u32)> + '_ {
        self.buckets.iter().filter(|(_, b)| !b.is_empty()).map(|(&k, _)| k)
    }
}

/// Banks detached copies of a batch's component features. `features` holds
/// `(kind, head or noun index, [rows × D] values)`; row `b` belongs to
/// `samples[b]`. Index `k` of a kind maps to the `k`-th id of that kind in
/// the sample's description; indices beyond the description are skipped.
pub fn bank_update<F: Real>(
    bank: &mut FeatureBank<F>,
    samples: &[(u64, &ActionDescription)],
    features: &[(ComponentKind, usize, &[F])],
) {
    for (b, &(source, desc)) in samples.iter().enumerate() {
        for &(kind, index, values) in features {
            let Some(&id) = desc.ids(kind).get(index) else { continue };
            let width = values.len() / samples.len();
            bank.push(kind, id, values[b * width..(b + 1) * width].to_vec(), source);
        }
    }
}

/// A representation assembled from banked features. `vec` is a `[1, 3D]`
/// node on the tape so the reducers receive gradients.
#[derive(Clone, Debug)]
pub struct ComposedSample {
    pub vec: Var,
    pub label: usize,
    pub provenance: Vec<(ComponentKind, u32, u64)>,
}

/// Round-robin position over the target list, kept across batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TargetCursor(pub usize);

/// Next target in round-robin order whose components are all available.
fn next_target(
    targets: &[usize],
    cursor: &mut TargetCursor,
    table: &ClassTable,
    stocked: impl Fn(&ActionDescription) -> bool,
) -> Option<usize> {
    for _ in 0..targets.len() {
        let c = targets[cursor.0 % targets.len()];
        cursor.0 = (cursor.0 + 1) % targets.len();
        if stocked(&table.descriptions[c]) {
            return Some(c);
        }
    }
    None
}

/// For each entry of `desc.order`, the vocabulary id and the position
/// drawn from its bucket of `len(kind, id)` entries.
fn draw_picks(
    desc: &ActionDescription,
    len: impl Fn(ComponentKind, u32) -> usize,
    rng: &mut impl Rng,
) -> Vec<(ComponentRef, u32, usize)> {
    let mut draws: BTreeMap<(ComponentKind, u32), Vec<usize>> = BTreeMap::new();
    for kind in ComponentKind::ALL {
        for &id in desc.ids(kind) {
            draws.entry((kind, id)).or_default();
        }
    }
    for (&(kind, id), picks) in draws.iter_mut() {
        let need = desc.ids(kind).iter().filter(|&&x| x == id).count();
        let have = len(kind, id);
        *picks = if have >= need {
            sample_indices(rng, have, need).into_vec()
        } else {
            (0..need).map(|_| rng.random_range(0..have)).collect()
        };
    }
    desc.order
        .iter()
        .map(|r| {
            let id = desc.ids(r.kind)[r.index];
            let pick = draws.get_mut(&(r.kind, id)).expect("drawn").pop().expect("enough draws");
            (*r, id, pick)
        })
        .collect()
}

/// Builds `m` samples for the `targets`, cycling through them and skipping
/// classes whose components are not all banked. Each component is drawn
/// uniformly from its bucket, without replacement inside one sample when
/// the bucket is large enough.
#[allow(clippy::too_many_arguments)]
pub fn compose_batch<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    bank: &FeatureBank<F>,
    table: &ClassTable,
    targets: &[usize],
    m: usize,
    cursor: &mut TargetCursor,
    rng: &mut impl Rng,
) -> Result<Vec<ComposedSample>> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let Some(label) = next_target(targets, cursor, table, |d| bank.stocks(d)) else { break };
        let desc = &table.descriptions[label];
        let mut components = Vec::with_capacity(desc.order.len());
        let mut provenance = Vec::with_capacity(desc.order.len());
        for (r, id, pick) in draw_picks(desc, |k, id| bank.len(k, id), rng) {
            let entry = &bank.bucket(r.kind, id).expect("stocked")[pick];
            let v = tape.input_raw(vec![1, entry.vec.len()], entry.vec.clone())?;
            components.push(ComponentFeature {
                kind: r.kind,
                index: r.index,
                vec: v,
            });
            provenance.push((r.kind, id, entry.source));
        }
        let vec = assemble_representation(tape, store, &components, &desc.layout())?;
        out.push(ComposedSample { vec, label, provenance });
    }
    Ok(out)
}

/// Like [`compose_batch`] but draws from the current batch's live
/// features, so the composed loss also trains the extractors. `sources`
/// holds each sample's id and description, row-aligned with `features`.
#[allow(clippy::too_many_arguments)]
pub fn compose_attached<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    features: &[ComponentFeature],
    sources: &[(u64, &ActionDescription)],
    table: &ClassTable,
    targets: &[usize],
    m: usize,
    cursor: &mut TargetCursor,
    rng: &mut impl Rng,
) -> Result<Vec<ComposedSample>> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    // (kind, id) -> [(feature, row, source)]
    type Pool = BTreeMap<(ComponentKind, u32), Vec<(Var, usize, u64)>>;
    let mut pool = Pool::new();
    for (row, &(source, desc)) in sources.iter().enumerate() {
        for f in features {
            if let Some(&id) = desc.ids(f.kind).get(f.index) {
                pool.entry((f.kind, id)).or_default().push((f.vec, row, source));
            }
        }
    }
    let len = |k: ComponentKind, id: u32| pool.get(&(k, id)).map_or(0, Vec::len);
    let stocked = |d: &ActionDescription| ComponentKind::ALL.iter().all(|&k| d.ids(k).iter().all(|&id| len(k, id) > 0));
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let Some(label) = next_target(targets, cursor, table, stocked) else { break };
        let desc = &table.descriptions[label];
        let mut components = Vec::with_capacity(desc.order.len());
        let mut provenance = Vec::with_capacity(desc.order.len());
        for (r, id, pick) in draw_picks(desc, len, rng) {
            let (var, row, source) = pool[&(r.kind, id)][pick];
            let v = tape.gather_rows(var, vec![Some(row as u32)])?;
            components.push(ComponentFeature {
                kind: r.kind,
                index: r.index,
                vec: v,
            });
            provenance.push((r.kind, id, source));
        }
        let vec = assemble_representation(tape, store, &components, &desc.layout())?;
        out.push(ComposedSample { vec, label, provenance });
    }
    Ok(out)
}

/// Mean cross-entropy over composed samples, each restricted to the classes
/// that share its layout. `None` when nothing was composed.
pub fn composed_loss<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    samples: &[ComposedSample],
    table: &ClassTable,
) -> Result<Option<Var>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let columns: Vec<Var> = samples.iter().map(|s| tape.transpose(s.vec)).collect();
    let stacked = tape.concat_cols(&columns)?;
    let reps = tape.transpose(stacked);
    let logits = classify(tape, store, reps)?;
    let mask: Vec<F> = samples.iter().flat_map(|s| table.layout_mask::<F>(s.label)).collect();
    let mask = tape.input_raw(vec![samples.len(), table.classes()], mask)?;
    let masked = tape.add(logits, mask)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let total = tape.cross_entropy(masked, &labels)?;
    Ok(Some(tape.scale(total, F::c(1.0 / samples.len() as f64))))
}

/// `L = L_d + λ·L_c`, with the composed term dropped when absent.
pub fn total_loss<F: Real>(tape: &mut Tape<F>, l_d: Var, l_c: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::NegativeLambda(lambda));
    }
    match l_c {
        None => Ok(l_d),
        Some(c) => {
            let weighted = tape.scale(c, F::c(lambda));
            tape.add(l_d, weighted)
        }
    }
}
