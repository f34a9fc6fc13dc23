//! One line per acceptance criterion; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rednet_core::autodiff::grad_check_all;
use rednet_core::harness::heatmap::{force_constant, heatmaps, kernel_sums, to_csv};
use rednet_core::harness::oracle::{run_oracle_suite, unification_gap};
use rednet_core::harness::properties::run_property_suite;
use rednet_core::harness::targets::{ablation_sweep, check_targets, depth_sweep};
use rednet_core::harness::toy::{run_toy, ToyConfig};
use rednet_core::harness::train::TrainConfig;
use rednet_core::nnops::AttentionMode;
use rednet_core::rednet::{build_rednet, MacConvention, Model, RedNetOptions};
use rednet_core::{Prng, Tensor};

const SEED: u64 = 20210310;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn within(t: Instant, limit: Duration, detail: String) -> Outcome {
    let e = t.elapsed();
    if e <= limit {
        Ok(format!("{detail} in {:.2}s", e.as_secs_f64()))
    } else {
        Err(format!(
            "{detail} but took {:.2}s (limit {}s)",
            e.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn cost_tables(targets: Vec<rednet_core::harness::targets::PublishedTotal>) -> Outcome {
    let t = Instant::now();
    let checks =
        check_targets(&targets, MacConvention::Unfused, 2.0, 3.0).map_err(|e| e.to_string())?;
    let worst_p = checks
        .iter()
        .map(|c| c.params_dev.abs())
        .fold(0.0, f64::max);
    let worst_m = checks.iter().map(|c| c.macs_dev.abs()).fold(0.0, f64::max);
    let misses: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass())
        .map(|c| c.csv_row())
        .collect();
    if !misses.is_empty() {
        return Err(format!("misses: {}", misses.join("; ")));
    }
    within(
        t,
        Duration::from_secs(1),
        format!(
            "{} rows, worst params {worst_p:.2}%, worst MACs {worst_m:.2}%",
            checks.len()
        ),
    )
}

fn criterion1() -> Outcome {
    cost_tables(depth_sweep())
}

fn criterion2() -> Outcome {
    cost_tables(ablation_sweep())
}

fn criterion3() -> Outcome {
    let t = Instant::now();
    let res = run_oracle_suite(50, SEED, 1e-12).map_err(|e| e.to_string())?;
    let mut ops: Vec<&str> = res.iter().map(|r| r.op).collect();
    ops.dedup();
    ops.sort();
    ops.dedup();
    let per_op = ops
        .iter()
        .map(|o| res.iter().filter(|r| r.op == *o).count())
        .min()
        .unwrap_or(0);
    let worst = res.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
    let fails = res.iter().filter(|r| !r.pass).count();
    if fails > 0 || per_op < 50 {
        return Err(format!(
            "{fails} failures, {per_op} configs per op, worst {worst:e}"
        ));
    }
    within(
        t,
        Duration::from_secs(30),
        format!(
            "{} ops x {per_op} configs, worst abs err {worst:.1e}",
            ops.len()
        ),
    )
}

fn criterion4() -> Outcome {
    let t = Instant::now();
    let reps = grad_check_all(1e-5, 1e-5, SEED).map_err(|e| e.to_string())?;
    let worst = reps.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = reps
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.op.as_str())
        .collect();
    for needed in [
        "involution",
        "batch_norm",
        "kernel_generate",
        "local_self_attention",
    ] {
        if !reps.iter().any(|r| r.op == needed) {
            return Err(format!("{needed} not checked"));
        }
    }
    if !failed.is_empty() {
        return Err(format!("failed: {}", failed.join(", ")));
    }
    within(
        t,
        Duration::from_secs(120),
        format!("{} ops, worst rel err {worst:.1e}", reps.len()),
    )
}

fn criterion5() -> Outcome {
    let mut worst = 0.0f64;
    for s in 0..20 {
        for softmax in [false, true] {
            worst = worst.max(
                unification_gap(SEED + s, AttentionMode::Content, softmax)
                    .map_err(|e| e.to_string())?,
            );
        }
    }
    if worst <= 1e-15 {
        Ok(format!("40 cases, max gap {worst:e}"))
    } else {
        Err(format!("max gap {worst:e}"))
    }
}

fn criterion6() -> Outcome {
    let t = Instant::now();
    let reps = run_property_suite(100, SEED).map_err(|e| e.to_string())?;
    let bad: Vec<String> = reps
        .iter()
        .filter(|r| !r.pass() || r.cases < 100)
        .map(|r| format!("{} {}/{}", r.name, r.failures, r.cases))
        .collect();
    if reps.len() < 4 || !bad.is_empty() {
        return Err(format!("failing: {}", bad.join(", ")));
    }
    let names: Vec<&str> = reps.iter().map(|r| r.name).collect();
    within(
        t,
        Duration::from_secs(60),
        format!("{} x 100 cases", names.join(", ")),
    )
}

fn criterion7() -> Outcome {
    let t = Instant::now();
    let cfg = ToyConfig::default();
    let first = run_toy(&cfg, true).map_err(|e| e.to_string())?;
    let again = run_toy(&cfg, false).map_err(|e| e.to_string())?;
    let frozen = ToyConfig {
        train: TrainConfig {
            lr: 0.0,
            epochs: 3,
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    let z = run_toy(&frozen, false).map_err(|e| e.to_string())?;
    let l0 = z.toy.epochs[0].loss;
    let drift = z
        .toy
        .epochs
        .iter()
        .map(|e| (e.loss - l0).abs())
        .fold(0.0, f64::max);

    let base = first.baseline.as_ref().unwrap();
    let acc = first.toy.final_train_acc;
    let (toy_test, lin_test) = (first.toy.test_acc.unwrap(), base.test_acc.unwrap());
    let detail = format!(
        "toy train acc {acc:.3}, held-out {toy_test:.3} vs linear {lin_test:.3} (linear train {:.3}), lr=0 drift {drift:e}",
        base.final_train_acc
    );
    if acc < 0.90 {
        return Err(format!("train accuracy below 0.90: {detail}"));
    }
    if first.beats_baseline() != Some(true) {
        return Err(format!("does not beat linear: {detail}"));
    }
    if first.toy.to_csv() != again.toy.to_csv() {
        return Err("two runs with one seed differ".into());
    }
    if drift > 1e-12 {
        return Err(format!("lr=0 loss drifts: {detail}"));
    }
    within(
        t,
        Duration::from_secs(300),
        format!("{detail}, reruns identical"),
    )
}

fn criterion8() -> Outcome {
    let mut rng = Prng::new(SEED);
    let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng).map_err(|e| e.to_string())?;
    let arch = build_rednet(50, RedNetOptions::default()).map_err(|e| e.to_string())?;
    let mut model = Model::new(&arch, SEED).map_err(|e| e.to_string())?;
    let layer = "conv3_4";
    let sums = kernel_sums(
        &model
            .extract_kernels(&x, layer)
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let maps = heatmaps(&model, &x, layer, 1).map_err(|e| e.to_string())?;
    let per = maps.len();
    if maps.shape()[0] != 16 {
        return Err(format!("{} maps for {layer}, expected 16", maps.shape()[0]));
    }
    if maps.data() != &sums.data()[per..2 * per] {
        return Err("maps differ from reduce_sum of the kernels".into());
    }
    let csv = to_csv(&maps).map_err(|e| e.to_string())?;
    let parsed: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    if parsed != maps.data() {
        return Err("CSV values do not round-trip".into());
    }
    let c = 0.25;
    force_constant(&mut model, layer, c).map_err(|e| e.to_string())?;
    let flat = heatmaps(&model, &x, layer, 0).map_err(|e| e.to_string())?;
    let k2 = 49.0;
    if flat.data().iter().any(|&v| v != c * k2) {
        return Err("forced-constant maps are not flat at c*K^2".into());
    }
    Ok(format!(
        "16 maps of {:?}, exact match to reduce_sum, constant case = {}",
        &maps.shape()[1..],
        c * k2
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("depth-sweep costs", criterion1),
        ("ablation-sweep costs", criterion2),
        ("oracle equivalence", criterion3),
        ("gradient certification", criterion4),
        ("attention as involution", criterion5),
        ("structural invariants", criterion6),
        ("toy training", criterion7),
        ("heat-map pipeline", criterion8),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(d) => println!("criterion {}: PASS {name}: {d}", i + 1),
            Err(d) => {
                println!("criterion {}: FAIL {name}: {d}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
