use std::fmt::Write as _;

use anyhow::Result;
use clap::Args;
use rednet_core::harness::toy::{run_toy, ToyConfig};
use rednet_core::harness::train::TrainConfig;
use rednet_core::harness::weights::save_weights;

use crate::output::Outputs;
use crate::{ArchArgs, Cli};

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Cross-entropy label smoothing, e.g. 0.1.
    #[arg(long, default_value_t = 0.0)]
    pub label_smoothing: f64,
    /// Draw a new sample order every epoch.
    #[arg(long)]
    pub reshuffle: bool,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 256)]
    pub test_samples: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub baseline_lr: f64,
    /// Skip the linear baseline and the comparison with it.
    #[arg(long)]
    pub no_baseline: bool,
    /// Final inference-mode train accuracy required to pass.
    #[arg(long, default_value_t = 0.9)]
    pub min_train_acc: f64,
    /// Also write the trained weights under `weights/`.
    #[arg(long)]
    pub save_weights: bool,
}

pub fn run(cli: &Cli, a: &ToyArgs) -> Result<bool> {
    let cfg = ToyConfig {
        samples: a.samples,
        test_samples: a.test_samples,
        classes: a.classes,
        image_size: a.image_size,
        middle: a.arch.middle()?,
        stem: a.arch.stem(),
        baseline_lr: a.baseline_lr,
        train: TrainConfig {
            lr: a.lr,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: cli.seed,
            label_smoothing: a.label_smoothing,
            reshuffle: a.reshuffle,
        },
    };
    let res = run_toy(&cfg, !a.no_baseline)?;
    for e in &res.toy.epochs {
        println!(
            "epoch {:>3} lr {:.5} loss {:.6} train acc {:.4}",
            e.epoch, e.lr, e.loss, e.train_acc
        );
    }

    let mut out = Outputs::new(&cli.out);
    out.add("train_metrics.csv", res.toy.to_csv());
    let mut summary = String::from("model,final_train_acc,test_acc\n");
    let mut pass = res.toy.final_train_acc >= a.min_train_acc;
    for r in std::iter::once(&res.toy).chain(res.baseline.as_ref()) {
        let test = r.test_acc.unwrap_or(f64::NAN);
        println!(
            "{}: train acc {:.4}, held-out acc {:.4}",
            r.model, r.final_train_acc, test
        );
        let _ = writeln!(
            summary,
            "{},{:.17e},{:.17e}",
            r.model, r.final_train_acc, test
        );
    }
    println!(
        "train accuracy >= {}: {}",
        a.min_train_acc,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(b) = &res.baseline {
        out.add("baseline_metrics.csv", b.to_csv());
        let beats = res.beats_baseline() == Some(true);
        println!(
            "held-out accuracy above linear baseline: {}",
            if beats { "PASS" } else { "FAIL" }
        );
        pass &= beats;
    }
    out.add("train_summary.csv", summary);
    let dir = out.dir().join("weights");
    out.write()?;
    if a.save_weights {
        save_weights(&res.model, &dir)?;
    }
    Ok(pass)
}
