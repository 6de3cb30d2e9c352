//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr, bypassing output capture so the lines show in every run.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use ffcn::compose::{assemble_representation, init_composer, ClassTable, ComponentKind};
use ffcn::gnn::{self, FrameLayout};
use ffcn::graph::{build_edge_sets, build_node_features, EdgeKind, EdgeSet, VideoSample};
use ffcn::harness::{
    ablate, evaluate_checkpoint, fewshot_finetune, gradcheck, train, Arm, ArmResult, Checkpoint, Dataset, RunConfig,
    CHECKPOINT_FILE, GRADCHECK_TOLERANCE,
};
use ffcn::numerics::{ParameterStore, Tape, Tensor};
use ffcn::spatial::ComponentFeature;
use ffcn::synth::{generate, materialize, oracle_accuracy, Manifest, SplitMode, SplitSpec, SynthConfig};
use ffcn::temporal::{init_tcn, tcn_forward};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const CLASSES: usize = 40;
/// Width used for every training criterion; the default 128 takes about
/// 13 minutes per 25-epoch run on one core.
const WIDTH: usize = 32;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {name}: {verdict} ({detail})");
}

fn run_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        width: WIDTH,
        mlp_hidden: vec![WIDTH],
        classifier_hidden: vec![WIDTH],
        ..RunConfig::default()
    }
}

fn longtail(seed: u64) -> Manifest {
    generate(&SynthConfig::default(), CLASSES, SplitMode::Longtail, &SplitSpec::default(), seed).unwrap()
}

fn jitter_biases(store: &mut ParameterStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.paths().map(str::to_string).collect::<Vec<_>>() {
        if p.ends_with("bias") {
            for v in store.get_mut(&p).unwrap().data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

#[test]
fn c01_gradient_audit() {
    let r = gradcheck(&RunConfig::default(), None).unwrap();
    let pass = r.passed() && r.seconds < 300.0;
    let detail = format!(
        "max rel error {:.2e} < {GRADCHECK_TOLERANCE:e} over {} paths, {:.1}s",
        r.max_rel_error,
        r.paths.len(),
        r.seconds
    );
    report(1, "gradient audit", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c02_receptive_field() {
    let (frames, width) = (32, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::<f64>::new();
    init_tcn(&mut store, "tcn", width, &mut rng);
    jitter_biases(&mut store, &mut rng);
    let x: Vec<f64> = (0..frames * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |data: &[f64]| -> Vec<f64> {
        let mut tape = Tape::new();
        let values = tape.input_raw(vec![1, 1, frames, width], data.to_vec()).unwrap();
        let block = gnn::EdgeFeatureBlock {
            kind: EdgeKind::Verb,
            values,
            edges: EdgeSet {
                kind: EdgeKind::Verb,
                pairs: vec![(0, 1)],
            },
            batch: 1,
            frames,
        };
        let out = tcn_forward(&mut tape, &store, "tcn", &block).unwrap();
        tape.value(out.values).to_vec()
    };
    let base = run(&x);
    let mut violations = 0;
    for u in 0..frames {
        // a rectifier can hide a one-sided nudge, so try both signs
        let outs: Vec<Vec<f64>> = [0.5, -0.5]
            .iter()
            .map(|d| {
                let mut p = x.clone();
                for v in &mut p[u * width..(u + 1) * width] {
                    *v += d;
                }
                run(&p)
            })
            .collect();
        for t in 0..frames {
            let frame = t * width..(t + 1) * width;
            let changed = outs.iter().any(|o| o[frame.clone()] != base[frame.clone()]);
            if changed != (t.abs_diff(u) <= 10) {
                violations += 1;
            }
        }
    }
    let detail = format!("{} perturbation/output pairs at T={frames}, {violations} violations", frames * frames);
    report(2, "receptive field", violations == 0, &detail);
    assert_eq!(violations, 0);
}

fn permute_slots(s: &VideoSample, pi: &[usize]) -> VideoSample {
    let mut p = s.clone();
    for t in 0..s.frames {
        for i in 0..s.slots {
            p.boxes[t][pi[i]] = s.boxes[t][i];
            p.present[t][pi[i]] = s.present[t][i];
        }
    }
    for i in 0..s.slots {
        p.appearance[pi[i]] = s.appearance[i].clone();
    }
    p
}

#[test]
fn c03_slot_permutation_equivariance() {
    let m = longtail(3);
    let samples = materialize(&m, "val").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::<f64>::new();
    gnn::init_params(&mut store, "gnn", 16, &[16], &mut rng);
    jitter_biases(&mut store, &mut rng);
    let (verb, prep) = build_edge_sets(&samples[0].roles).unwrap();
    let relabel = |e: &EdgeSet, pi: &[usize]| EdgeSet {
        kind: e.kind,
        pairs: e.pairs.iter().map(|&(i, j)| (pi[i], pi[j])).collect(),
    };
    let mut mismatches = 0;
    for s in samples.iter().take(100) {
        let mut objects: Vec<usize> = (1..s.slots).collect();
        objects.shuffle(&mut rng);
        let pi: Vec<usize> = std::iter::once(0).chain(objects).collect();
        let p = permute_slots(s, &pi);
        let layout = FrameLayout {
            batch: 1,
            frames: s.frames,
            slots: s.slots,
        };
        let mut tape = Tape::new();
        let x = tape.input(&build_node_features::<f64>(s));
        let px = tape.input(&build_node_features::<f64>(&p));
        let (v, b) = gnn::refine_full(&mut tape, &store, "gnn", x, layout, &verb, &prep, 2, &[s.never_present()]).unwrap();
        let (pv, pb) = gnn::refine_full(
            &mut tape,
            &store,
            "gnn",
            px,
            layout,
            &relabel(&verb, &pi),
            &relabel(&prep, &pi),
            2,
            &[p.never_present()],
        )
        .unwrap();
        if tape.value(v.values) != tape.value(pv.values) || tape.value(b.values) != tape.value(pb.values) {
            mismatches += 1;
        }
    }
    let detail = format!("100 rendered clips, random object-slot permutations, {mismatches} mismatches");
    report(3, "slot permutation equivariance", mismatches == 0, &detail);
    assert_eq!(mismatches, 0);
}

#[test]
fn c04_dimension_law() {
    let m = longtail(4);
    let table = ClassTable::new(m.descriptions());
    let width = RunConfig::default().width;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParameterStore::<f64>::new();
    init_composer(&mut store, width, [2, 2, 2], &[width], table.classes(), &mut rng).unwrap();
    let rows = 10_000 / table.classes();
    let mut total = 0;
    let mut wrong = 0;
    for c in 0..table.classes() {
        let mut tape = Tape::new();
        let mut components = Vec::new();
        for kind in ComponentKind::ALL {
            for index in 0..2 {
                let data = (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect();
                let vec = tape.input(&Tensor::new(vec![rows, width], data).unwrap());
                components.push(ComponentFeature { kind, index, vec });
            }
        }
        let layout = &table.layouts[table.class_layout[c]];
        let rep = assemble_representation(&mut tape, &store, &components, layout).unwrap();
        let shape = tape.shape(rep).to_vec();
        total += shape[0];
        if shape != [rows, 3 * width] {
            wrong += shape[0];
        }
    }
    let pass = total == 10_000 && wrong == 0;
    let detail = format!("{total} representations over {} classes, {wrong} not of length {}", table.classes(), 3 * width);
    report(4, "dimension law", pass, &detail);
    assert!(pass);
}

#[test]
fn c05_zero_lambda_equivalence() {
    let data = Dataset::from_manifest(&longtail(0)).unwrap();
    let on = RunConfig {
        lambda: 0.0,
        epochs: 3,
        ..run_config(0)
    };
    let off = RunConfig {
        composition: false,
        ..on.clone()
    };
    let a = train::<f32>(&on, &data, None, None).unwrap();
    let b = train::<f32>(&off, &data, None, None).unwrap();
    let composed = a.history.iter().all(|m| m.l_c.is_some());
    // the configs differ only in the flag under test
    let a_bytes = Checkpoint {
        config: off.clone(),
        ..a.checkpoint
    }
    .to_bytes()
    .unwrap();
    let b_bytes = b.checkpoint.to_bytes().unwrap();
    let pass = composed && a_bytes == b_bytes;
    let detail = format!("3 epochs, branch active: {composed}, checkpoint bytes identical: {}", a_bytes == b_bytes);
    report(5, "zero-weight equivalence", pass, &detail);
    assert!(pass);
}

struct Ablation {
    results: Vec<ArmResult>,
    tail: Vec<Vec<usize>>,
    seconds: f64,
}

fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let mut results = Vec::new();
        let mut tail = Vec::new();
        for seed in SEEDS {
            let data = Dataset::from_manifest(&longtail(seed)).unwrap();
            let cfg = run_config(seed);
            tail.push(cfg.tail.resolve(&data.train_counts(), &data.manifest_tail));
            results.extend(ablate::<f32>(&cfg, &data, &[Arm::NoComp, Arm::Comp], &[seed]).unwrap());
        }
        Ablation {
            results,
            tail,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn arm_runs(a: &Ablation, arm: Arm) -> Vec<&ArmResult> {
    a.results.iter().filter(|r| r.arm == arm).collect()
}

#[test]
fn c06_ablation_direction() {
    let a = ablation();
    let (base, comp) = (arm_runs(a, Arm::NoComp), arm_runs(a, Arm::Comp));
    let mean = |rs: &[&ArmResult], f: &dyn Fn(&ArmResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
    let tail_gain = mean(&comp, &|r| r.metrics.tail_mean.unwrap()) - mean(&base, &|r| r.metrics.tail_mean.unwrap());
    let top1_change = mean(&comp, &|r| r.metrics.top1) - mean(&base, &|r| r.metrics.top1);
    let pass = tail_gain >= 0.05 && top1_change >= -0.01 && a.seconds < 7200.0;
    let per_seed: Vec<String> = base
        .iter()
        .zip(&comp)
        .map(|(b, c)| format!("{:.3}->{:.3}", b.metrics.tail_mean.unwrap(), c.metrics.tail_mean.unwrap()))
        .collect();
    let detail = format!(
        "tail mean {:+.1}pp (need >= +5.0), top-1 {:+.1}pp (need >= -1.0), per seed [{}], D={WIDTH}, {:.0}s",
        100.0 * tail_gain,
        100.0 * top1_change,
        per_seed.join(", "),
        a.seconds
    );
    report(6, "ablation direction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c07_per_class_breadth() {
    let a = ablation();
    let (base, comp) = (arm_runs(a, Arm::NoComp), arm_runs(a, Arm::Comp));
    let mut fractions = Vec::new();
    for ((b, c), tail) in base.iter().zip(&comp).zip(&a.tail) {
        let kept = tail
            .iter()
            .filter(|&&k| c.metrics.per_class[k].unwrap() >= b.metrics.per_class[k].unwrap())
            .count();
        fractions.push(kept as f64 / tail.len() as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let pass = mean >= 0.6;
    let detail = format!("{:.0}% of tail classes improve or tie (need >= 60%), per seed {fractions:.2?}", 100.0 * mean);
    report(7, "per-class breadth", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c08_fewshot_direction() {
    let mut novel = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for seed in SEEDS {
        let m = generate(&SynthConfig::default(), CLASSES, SplitMode::Fewshot, &SplitSpec::default(), seed).unwrap();
        let cfg = run_config(seed);
        let base_cfg = RunConfig {
            composition: false,
            ..cfg.clone()
        };
        let base = train::<f32>(&base_cfg, &Dataset::from_manifest(&m).unwrap(), None, None).unwrap();
        let base_train = materialize(&m, "base_train").unwrap();
        let val = materialize(&m, "novel_val").unwrap();
        for (ki, k) in [5, 10].into_iter().enumerate() {
            let shots = materialize(&m, &format!("novel_train_k{k}")).unwrap();
            for (ci, composition) in [false, true].into_iter().enumerate() {
                let run = fewshot_finetune(&cfg, &base.checkpoint, &m, &base_train, &shots, &val, k, composition).unwrap();
                novel[ki][ci].push(run.novel_mean());
            }
        }
    }
    let wins = |ki: usize| novel[ki][1].iter().zip(&novel[ki][0]).filter(|(c, b)| c > b).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (w5, w10) = (wins(0), wins(1));
    let (m5, m10) = (mean(&novel[0][1]), mean(&novel[1][1]));
    let pass = w5 >= 2 && w10 >= 2 && m10 >= m5;
    let detail = format!(
        "5-shot wins {w5}/3 {:.3?} vs {:.3?}, 10-shot wins {w10}/3 {:.3?} vs {:.3?}, 10-shot mean {m10:.3} vs 5-shot {m5:.3}",
        novel[0][1], novel[0][0], novel[1][1], novel[1][0]
    );
    report(8, "few-shot direction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c09_oracle_floor() {
    let accs: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let m = longtail(s);
            oracle_accuracy(&materialize(&m, "val").unwrap(), &m)
        })
        .collect();
    let pass = accs.iter().all(|&a| a >= 0.95);
    report(9, "oracle floor", pass, &format!("val accuracy per seed {accs:.4?}, need >= 0.95"));
    assert!(pass);
}

#[test]
fn c10_determinism_and_persistence() {
    let data = Dataset::from_manifest(&longtail(0)).unwrap();
    let cfg = RunConfig {
        epochs: 3,
        ..run_config(7)
    };
    let dir = tempfile::tempdir().unwrap();
    let first = train::<f32>(&cfg, &data, Some(dir.path()), None).unwrap();
    let bytes = first.checkpoint.to_bytes().unwrap();
    let mut repeats = 0;
    for _ in 0..2 {
        let again = train::<f32>(&cfg, &data, None, None).unwrap();
        if again.history == first.history && again.checkpoint.to_bytes().unwrap() == bytes {
            repeats += 1;
        }
    }
    let loaded = Checkpoint::<f32>::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let before = evaluate_checkpoint(&first.checkpoint, &data.val, CLASSES).unwrap();
    let after = evaluate_checkpoint(&loaded, &data.val, CLASSES).unwrap();
    let pass = repeats == 2 && before == after;
    let detail = format!("{repeats}/2 repeat runs identical, round-trip evaluation identical: {}", before == after);
    report(10, "determinism and persistence", pass, &detail);
    assert!(pass);
}
