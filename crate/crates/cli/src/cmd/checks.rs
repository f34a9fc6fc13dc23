use std::fmt::Write as _;

use anyhow::{bail, Result};
use clap::Args;
use rednet_core::autodiff::{grad_check, registered_checks, GradCheckReport};
use rednet_core::harness::oracle::{run_oracle_suite, unification_gap, OracleResult};
use rednet_core::harness::properties::run_property_suite;
use rednet_core::nnops::AttentionMode;

use crate::output::Outputs;
use crate::Cli;

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Ops to check, comma separated; all registered ops by default.
    #[arg(long, value_delimiter = ',')]
    pub ops: Vec<String>,
    /// Print the registered op names and exit.
    #[arg(long)]
    pub list: bool,
}

pub fn run_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<bool> {
    if a.list {
        registered_checks().iter().for_each(|op| println!("{op}"));
        return Ok(true);
    }
    let ops: Vec<&str> = if a.ops.is_empty() {
        registered_checks().to_vec()
    } else {
        a.ops.iter().map(String::as_str).collect()
    };
    let mut csv = format!("{}\n", GradCheckReport::CSV_HEADER);
    let mut pass = true;
    for op in ops {
        if !registered_checks().contains(&op) {
            bail!("no gradient check registered for `{op}` (see --list)");
        }
        let r = grad_check(op, &[], a.eps, a.tol, cli.seed)?;
        println!(
            "{op}: max rel err {:.3e} {}",
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
        pass &= r.pass;
        csv.push_str(&r.csv_rows());
    }
    let mut out = Outputs::new(&cli.out);
    out.add("gradcheck.csv", csv);
    out.write()?;
    Ok(pass)
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Random configurations per operator.
    #[arg(long, default_value_t = 50)]
    pub configs: usize,
    /// Largest accepted absolute error.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Cases per structural property.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Seeds for the attention-as-involution identity, each run with and
    /// without softmax.
    #[arg(long, default_value_t = 20)]
    pub unification_cases: u64,
}

pub fn run_oracle(cli: &Cli, a: &OracleArgs) -> Result<bool> {
    let mut out = Outputs::new(&cli.out);
    let mut pass = true;

    let res = run_oracle_suite(a.configs, cli.seed, a.tol)?;
    let mut csv = format!("{}\n", OracleResult::CSV_HEADER);
    for r in &res {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let mut ops: Vec<&str> = res.iter().map(|r| r.op).collect();
    ops.dedup();
    for op in ops {
        let rows: Vec<_> = res.iter().filter(|r| r.op == op).collect();
        let worst = rows.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
        let ok = rows.iter().all(|r| r.pass);
        pass &= ok;
        println!(
            "oracle {op}: {} configs, worst {worst:.2e} {}",
            rows.len(),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    out.add("oracle.csv", csv);

    let mut csv = String::from("property,cases,failures,worst,pass\n");
    for r in run_property_suite(a.cases, cli.seed)? {
        pass &= r.pass();
        println!(
            "property {}: {}/{} failures, worst {:.2e} {}",
            r.name,
            r.failures,
            r.cases,
            r.worst,
            if r.pass() { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            csv,
            "{},{},{},{:e},{}",
            r.name,
            r.cases,
            r.failures,
            r.worst,
            r.pass()
        );
    }
    out.add("properties.csv", csv);

    let mut csv = String::from("seed,softmax,gap,pass\n");
    let mut worst = 0.0f64;
    for s in 0..a.unification_cases {
        for softmax in [false, true] {
            let gap = unification_gap(cli.seed.wrapping_add(s), AttentionMode::Content, softmax)?;
            worst = worst.max(gap);
            let _ = writeln!(
                csv,
                "{},{softmax},{gap:e},{}",
                cli.seed.wrapping_add(s),
                gap == 0.0
            );
        }
    }
    let ok = worst == 0.0;
    pass &= ok;
    println!(
        "attention as involution: {} cases, max gap {worst:e} {}",
        2 * a.unification_cases,
        if ok { "PASS" } else { "FAIL" }
    );
    out.add("unification.csv", csv);
    out.write()?;
    Ok(pass)
}
