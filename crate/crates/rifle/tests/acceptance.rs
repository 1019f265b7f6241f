//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use rifle::idx::{self, IdxError, IdxImages};
use rifle::{oracle, simulate, ExperimentConfig, ExperimentResult};
use rifle_core::metrics::{comm_cost, pfpv};
use rifle_core::model::{DenseLayer, DistillLoss};
use rifle_core::numerics::kl_rows;
use rifle_core::rng::rng_from;
use rifle_core::server::{aggregate_teacher, trust_weights};
use rifle_core::{ClientUpdate, CostModel, DenseModel, LogitBatch, Matrix, ProbBatch};

struct Outcome {
    pass: bool,
    detail: String,
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    ExperimentConfig::parse(&text).unwrap()
}

fn run_seeds(base: &ExperimentConfig, seeds: std::ops::Range<u64>) -> Vec<Result<ExperimentResult, String>> {
    seeds
        .map(|s| {
            let mut cfg = base.clone();
            cfg.master_seed = s;
            simulate(&cfg).map(|(_, r)| r).map_err(|e| format!("seed {s}: {e}"))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_probs(rng: &mut impl Rng, rows: usize, classes: usize) -> ProbBatch {
    let mut data = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..classes)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => rng.random::<f64>() * 1e-9,
                _ => rng.random::<f64>(),
            })
            .collect();
        let total: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        if total <= f64::MIN_POSITIVE {
            let mut one = vec![0.0; classes];
            one[0] = 1.0;
            data.extend(one);
        } else {
            data.extend(raw.iter().map(|v| v / total));
        }
    }
    ProbBatch::new(Matrix::new(rows, classes, data).unwrap()).unwrap()
}

fn rows_of(p: &ProbBatch) -> Vec<Vec<f64>> {
    (0..p.rows()).map(|r| p.row(r).to_vec()).collect()
}

fn oracles() -> Outcome {
    let mut rng = rng_from(101);
    let mut worst_kl = 0.0f64;
    for _ in 0..1000 {
        let rows = rng.random_range(1..8);
        let classes = rng.random_range(2..12);
        let p = random_probs(&mut rng, rows, classes);
        let q = random_probs(&mut rng, rows, classes);
        let (_, got) = kl_rows(&p, &q).unwrap();
        worst_kl = worst_kl.max((got - oracle::kl_mean(&rows_of(&p), &rows_of(&q))).abs());
    }
    let mut pfpv_mismatch = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..30);
        let honest: BTreeSet<usize> = (0..k).filter(|_| rng.random_bool(0.7)).collect();
        let flagged: BTreeSet<usize> = (0..k).filter(|_| rng.random_bool(0.3)).collect();
        if honest.is_empty() {
            continue;
        }
        if pfpv(&honest, &flagged).unwrap() != oracle::pfpv(&honest, &flagged) {
            pfpv_mismatch += 1;
        }
    }
    let mut comm_mismatch = 0;
    for _ in 0..1000 {
        let cost = CostModel {
            bytes_per_value: rng.random_range(1..9),
            n_public: rng.random_range(0..5000),
            num_classes: rng.random_range(2..200),
            penultimate_d: rng.random_range(1..512),
            ..CostModel::default()
        };
        let grad = rng.random_bool(0.5);
        let expect = oracle::comm_bytes(
            cost.n_public,
            cost.num_classes,
            cost.bytes_per_value,
            grad.then_some(cost.penultimate_d),
        );
        if comm_cost(&cost, grad) != expect {
            comm_mismatch += 1;
        }
    }
    Outcome {
        pass: worst_kl <= 1e-10 && pfpv_mismatch == 0 && comm_mismatch == 0,
        detail: format!("max |kl - oracle| {worst_kl:.2e}, pfpv mismatches {pfpv_mismatch}, comm mismatches {comm_mismatch}"),
    }
}

fn perturbed(model: &DenseModel, layer: usize, index: usize, bias: bool, h: f64) -> DenseModel {
    let mut layers: Vec<DenseLayer> = model.layers().to_vec();
    let l = &mut layers[layer];
    if bias {
        l.bias[index] += h;
    } else {
        l.weights.as_mut_slice()[index] += h;
    }
    DenseModel::from_layers(layers).unwrap()
}

fn finite_differences() -> Outcome {
    let mut rng = rng_from(202);
    let h = 1e-5;
    let (mut worst_ce, mut worst_dl) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let input = rng.random_range(2..6);
        let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(2..7)).collect();
        let classes = rng.random_range(2..6);
        let n = rng.random_range(2..7);
        // Random biases keep pre-activations off the ReLU kink at exactly 0.
        let mut layers = DenseModel::init(input, &hidden, classes, &mut rng).layers().to_vec();
        for l in &mut layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let model = DenseModel::from_layers(layers).unwrap();
        let x = Matrix::new(n, input, (0..n * input).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let teacher = random_probs(&mut rng, n, classes);
        let loss = DistillLoss {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            temperature: rng.random_range(0.5..5.0),
        };
        let with_labels = rng.random_bool(0.5);
        let ce = model.backward_ce(&x, &labels).unwrap();
        let dl = model
            .backward_distill(&x, &teacher, with_labels.then_some(&labels[..]), loss)
            .unwrap();
        for (li, layer) in model.layers().iter().enumerate() {
            let counts = [(false, layer.weights.as_slice().len()), (true, layer.bias.len())];
            for (bias, count) in counts {
                for i in 0..count {
                    let plus = perturbed(&model, li, i, bias, h);
                    let minus = perturbed(&model, li, i, bias, -h);
                    let fd_ce = (plus.ce_loss(&x, &labels).unwrap() - minus.ce_loss(&x, &labels).unwrap()) / (2.0 * h);
                    let lab = with_labels.then_some(&labels[..]);
                    let fd_dl = (plus.distill_loss(&x, &teacher, lab, loss).unwrap()
                        - minus.distill_loss(&x, &teacher, lab, loss).unwrap())
                        / (2.0 * h);
                    let (g_ce, g_dl) = if bias {
                        (ce.layers[li].bias[i], dl.layers[li].bias[i])
                    } else {
                        (ce.layers[li].weights.as_slice()[i], dl.layers[li].weights.as_slice()[i])
                    };
                    worst_ce = worst_ce.max((fd_ce - g_ce).abs());
                    worst_dl = worst_dl.max((fd_dl - g_dl).abs());
                }
            }
        }
    }
    Outcome {
        pass: worst_ce <= 1e-6 && worst_dl <= 1e-6,
        detail: format!("max |analytic - central difference| ce {worst_ce:.2e}, distill {worst_dl:.2e}"),
    }
}

fn update(id: usize, logits: Matrix) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        logits: LogitBatch::new(logits).unwrap(),
        grad_share: None,
        n_samples: 1,
        val_logits: None,
    }
}

fn weight_laws() -> Outcome {
    let mut rng = rng_from(303);
    let mut worst_sum = 0.0f64;
    let mut monotone = true;
    let mut worst_row = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for _ in 0..500 {
        let k = rng.random_range(1..15);
        let kls: Vec<(usize, f64)> = (0..k).map(|i| (i, rng.random_range(0.0..20.0))).collect();
        let flagged: BTreeSet<usize> = (1..k).filter(|_| rng.random_bool(0.2)).collect();
        let w = trust_weights(&kls, &flagged).unwrap();
        worst_sum = worst_sum.max((w.values().sum::<f64>() - 1.0).abs());
        for &(a, ka) in &kls {
            for &(b, kb) in &kls {
                if !flagged.contains(&a) && !flagged.contains(&b) && ka < kb && w[&a] < w[&b] {
                    monotone = false;
                }
            }
        }
        let same = rng.random_range(0.0..10.0);
        let flat: Vec<(usize, f64)> = (0..k).map(|i| (i, same)).collect();
        for v in trust_weights(&flat, &BTreeSet::new()).unwrap().values() {
            worst_uniform = worst_uniform.max((v - 1.0 / k as f64).abs());
        }

        let (rows, classes) = (rng.random_range(1..6), rng.random_range(2..8));
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|i| {
                let z = (0..rows * classes).map(|_| rng.random_range(-15.0..15.0)).collect();
                update(i, Matrix::new(rows, classes, z).unwrap())
            })
            .collect();
        let p = aggregate_teacher(&updates, &w, rng.random_range(0.5..4.0)).unwrap();
        for r in 0..p.rows() {
            worst_row = worst_row.max((p.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Outcome {
        pass: worst_sum <= 1e-9 && monotone && worst_row <= 1e-9 && worst_uniform <= 1e-12,
        detail: format!(
            "weight sum err {worst_sum:.1e}, monotone {monotone}, teacher row err {worst_row:.1e}, uniform err {worst_uniform:.1e}"
        ),
    }
}

fn detection() -> Outcome {
    let runs = run_seeds(&config("default.cfg"), 0..20);
    let mut recall = Vec::new();
    let mut false_pos = Vec::new();
    let mut halted = Vec::new();
    for r in &runs {
        match r {
            Ok(r) => {
                let flags = &r.final_round().flags;
                recall.push(r.attackers.intersection(flags).count() as f64 / r.attackers.len() as f64);
                false_pos.push(r.final_round().pfpv);
            }
            Err(e) => halted.push(e.clone()),
        }
    }
    let (rec, fp) = (mean(&recall), mean(&false_pos));
    Outcome {
        pass: halted.is_empty() && rec >= 0.9 && fp <= 0.1,
        detail: format!("recall {rec:.3} (need >= 0.9), pfpv {fp:.3} (need <= 0.1), halted {halted:?}"),
    }
}

fn final_asr(runs: &[Result<ExperimentResult, String>]) -> Result<Vec<f64>, String> {
    runs.iter()
        .map(|r| r.as_ref().map(|r| r.final_round().asr).map_err(Clone::clone))
        .collect()
}

fn mitigation() -> Outcome {
    let rifle_runs = final_asr(&run_seeds(&config("default.cfg"), 0..3));
    let open_runs = final_asr(&run_seeds(&config("no_defense.cfg"), 0..3));
    let iid_runs = final_asr(&run_seeds(&config("iid.cfg"), 0..3));
    match (rifle_runs, open_runs, iid_runs) {
        (Ok(rifle), Ok(open), Ok(iid)) => {
            let (a, b, c) = (mean(&rifle), mean(&open), mean(&iid));
            Outcome {
                pass: a <= 0.5 * b && c <= 0.25,
                detail: format!(
                    "asr defended {a:.4} vs undefended {b:.4} (need <= {:.4}); iid defended {c:.4} (need <= 0.25); per seed {rifle:.3?} / {open:.3?} / {iid:.3?}",
                    0.5 * b
                ),
            }
        }
        (a, b, c) => Outcome {
            pass: false,
            detail: format!("run halted: {:?} {:?} {:?}", a.err(), b.err(), c.err()),
        },
    }
}

fn legacy_comparison() -> Outcome {
    let runs = run_seeds(&config("drift.cfg"), 0..10);
    let mut ours = Vec::new();
    let mut legacy = Vec::new();
    for r in &runs {
        match r {
            Ok(r) => {
                ours.push(r.final_round().pfpv);
                legacy.push(r.final_round().legacy_pfpv.unwrap_or(f64::NAN));
            }
            Err(e) => {
                return Outcome {
                    pass: false,
                    detail: format!("run halted: {e}"),
                }
            }
        }
    }
    let (a, b) = (mean(&ours), mean(&legacy));
    Outcome {
        pass: a <= 0.5 * b,
        detail: format!("pfpv delta-kl {a:.3} vs legacy {b:.3} (need <= {:.3})", 0.5 * b),
    }
}

fn distilled_beats_light() -> Outcome {
    let runs = run_seeds(&config("benign.cfg"), 0..3);
    let mut pairs = Vec::new();
    for r in &runs {
        match r {
            Ok(r) => pairs.push((r.final_round().global_acc, r.light_final_acc)),
            Err(e) => {
                return Outcome {
                    pass: false,
                    detail: format!("run halted: {e}"),
                }
            }
        }
    }
    let each = pairs.iter().all(|(g, s)| *g >= s - 0.01);
    let gap = mean(&pairs.iter().map(|(g, s)| g - s).collect::<Vec<_>>());
    Outcome {
        pass: each && gap > 0.0,
        detail: format!("(heavy, light) accuracy per seed {pairs:.3?}, mean gap {gap:.3}"),
    }
}

fn communication() -> Outcome {
    let gradient = CostModel {
        param_count: 11_200_000,
        ..CostModel::default()
    }
    .full_gradient_bytes() as f64;
    let rel = (gradient - 44e6).abs() / 44e6;
    let base = CostModel {
        bytes_per_value: 4,
        n_public: 500,
        num_classes: 10,
        penultimate_d: 32,
        ..CostModel::default()
    };
    // 500·10·4 = 20000 bytes of logits, 10·32·4 = 1280 of gradient, both ways.
    let fixtures = [
        (base, false, 40_000),
        (base, true, 42_560),
        (
            CostModel {
                n_public: 1,
                num_classes: 2,
                penultimate_d: 3,
                bytes_per_value: 8,
                ..base
            },
            true,
            128,
        ),
        (
            CostModel {
                n_public: 0,
                ..base
            },
            false,
            0,
        ),
    ];
    let bad: Vec<_> = fixtures
        .iter()
        .filter(|(c, g, want)| comm_cost(c, *g) != *want)
        .map(|(c, g, want)| (comm_cost(c, *g), *want))
        .collect();
    Outcome {
        pass: rel <= 0.02 && bad.is_empty(),
        detail: format!("gradient baseline {gradient:.3e} B, {:.2}% from 44 MB; fixture mismatches {bad:?}", rel * 100.0),
    }
}

fn determinism() -> Outcome {
    let cfg = config("default.cfg");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        if let Err(e) = rifle::run_experiment_in(&cfg, d.path()) {
            return Outcome {
                pass: false,
                detail: format!("run failed: {e}"),
            };
        }
    }
    let same = |name: &str| {
        std::fs::read(dirs[0].path().join(name)).unwrap() == std::fs::read(dirs[1].path().join(name)).unwrap()
    };
    let (m, l) = (same("metrics.csv"), same("ledger.csv"));
    Outcome {
        pass: m && l,
        detail: format!("metrics.csv identical {m}, ledger.csv identical {l}"),
    }
}

fn idx_ingestion() -> Outcome {
    let images = IdxImages {
        rows: 28,
        cols: 28,
        pixels: (0..4u8).map(|i| (0..784).map(|p| (p as u8).wrapping_mul(i + 1)).collect()).collect(),
    };
    let labels = vec![3u8, 1, 4, 1];
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    let img_bytes = idx::encode_images(&images);
    std::fs::write(&ip, &img_bytes).unwrap();
    std::fs::write(&lp, idx::encode_labels(&labels)).unwrap();

    let reparsed = idx::parse_images(&img_bytes).unwrap();
    let round_trip = reparsed == images
        && idx::encode_images(&reparsed) == img_bytes
        && idx::parse_labels(&idx::encode_labels(&labels)).unwrap() == labels;
    let loaded = idx::load_idx(&ip, &lp, 10, None).unwrap();
    let shape_ok = loaded.len() == 4 && loaded.features().cols() == 784 && loaded.labels() == [3, 1, 4, 1];
    let pixels_ok = (0..4).all(|r| {
        loaded
            .features()
            .row(r)
            .iter()
            .zip(&images.pixels[r])
            .all(|(v, &b)| *v == f64::from(b) / 255.0)
    });

    let mut bad_magic = img_bytes.clone();
    bad_magic[3] = 0x01;
    let magic_err = matches!(idx::parse_images(&bad_magic), Err(IdxError::BadMagic { found: 0x801, .. }));
    std::fs::write(&lp, idx::encode_labels(&labels[..3])).unwrap();
    let count_err = matches!(
        idx::load_idx(&ip, &lp, 10, None),
        Err(rifle::Error::Idx(IdxError::CountMismatch { images: 4, labels: 3 }))
    );
    Outcome {
        pass: round_trip && shape_ok && pixels_ok && magic_err && count_err,
        detail: format!(
            "round trip {round_trip}, shape {shape_ok}, pixels {pixels_ok}, bad magic {magic_err}, count mismatch {count_err}"
        ),
    }
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check, Duration); 10] = [
        ("1 numeric oracles", oracles, Duration::from_secs(5)),
        ("2 gradient check", finite_differences, Duration::from_secs(30)),
        ("3 weight and teacher laws", weight_laws, Duration::MAX),
        ("4 detection efficacy", detection, Duration::from_secs(300)),
        ("5 attack mitigation", mitigation, Duration::from_secs(300)),
        ("6 legacy validator comparison", legacy_comparison, Duration::from_secs(300)),
        ("7 distilled vs light accuracy", distilled_beats_light, Duration::MAX),
        ("8 communication arithmetic", communication, Duration::MAX),
        ("9 determinism", determinism, Duration::MAX),
        ("10 idx ingestion", idx_ingestion, Duration::MAX),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = BTreeMap::new();
    for (name, check, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let in_time = took < budget;
        let pass = out.pass && in_time;
        let limit = if budget == Duration::MAX {
            String::new()
        } else {
            format!(" / {budget:?}")
        };
        println!(
            "{} criterion {name}: {} [{took:.1?}{limit}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
        if !pass {
            failed.insert(name, took);
        }
    }
    if !failed.is_empty() {
        println!("{} criteria failed", failed.len());
        std::process::exit(1);
    }
}
