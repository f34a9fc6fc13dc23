use anyhow::{bail, Result};
use clap::Args;
use rednet_core::harness::targets::{
    all_targets, check_report, check_targets, target_for, TargetCheck,
};
use rednet_core::rednet::{build_rednet, profile, ArchSpec, RedNetOptions};

use crate::output::Outputs;
use crate::{ArchArgs, Cli, ConventionKind};

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long, default_value_t = 50)]
    pub depth: usize,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    #[arg(long, default_value_t = 224)]
    pub resolution: usize,
    #[arg(long, value_enum, default_value = "unfused")]
    pub convention: ConventionKind,
    /// Profile an architecture description instead of the flags above.
    #[arg(long, value_name = "TOML")]
    pub arch_file: Option<std::path::PathBuf>,
    /// Check every published row instead of one architecture.
    #[arg(long)]
    pub all_targets: bool,
    /// Report only; skip the comparison with published totals.
    #[arg(long)]
    pub no_targets: bool,
}

fn print_check(c: &TargetCheck) {
    println!(
        "{} {}: params {:.2}M vs {}M ({:+.2}%), MACs {:.3}G vs {}G ({:+.2}%): {}",
        c.sweep,
        c.label,
        c.params_m,
        c.want_params_m,
        c.params_dev,
        c.macs_g,
        c.want_macs_g,
        c.macs_dev,
        if c.pass() { "PASS" } else { "FAIL" }
    );
}

fn checks_csv(checks: &[TargetCheck]) -> String {
    let mut s = format!("{}\n", TargetCheck::CSV_HEADER);
    for c in checks {
        s.push_str(&c.csv_row());
        s.push('\n');
    }
    s
}

pub fn run(cli: &Cli, a: &ProfileArgs) -> Result<bool> {
    let mut out = Outputs::new(&cli.out);
    let (tp, tm) = (cli.tolerance_params, cli.tolerance_macs);
    if a.all_targets {
        let checks = check_targets(&all_targets(), a.convention.into(), tp, tm)?;
        checks.iter().for_each(print_check);
        out.add("targets.csv", checks_csv(&checks));
        out.write()?;
        return Ok(checks.iter().all(TargetCheck::pass));
    }
    let arch = match &a.arch_file {
        Some(p) => ArchSpec::from_text(&std::fs::read_to_string(p)?)?,
        None => build_rednet(
            a.depth,
            RedNetOptions {
                stem: a.arch.stem(),
                middle: a.arch.middle()?,
                num_classes: a.classes,
            },
        )?,
    };
    if a.resolution == 0 {
        bail!("--resolution must be positive");
    }
    let report = profile(&arch, a.resolution, a.convention.into())?;
    println!(
        "{} @{}: {} params ({:.3}M), {} MACs ({:.3}G)",
        arch.name,
        a.resolution,
        report.total_params,
        report.params_m(),
        report.total_macs,
        report.macs_g()
    );
    out.add("profile.csv", report.to_csv());
    out.add("arch.toml", arch.to_text());
    let mut pass = true;
    if !a.no_targets {
        match target_for(&arch) {
            Some(t) if a.resolution == 224 => {
                let c = check_report(&report, &t, tp, tm);
                print_check(&c);
                pass = c.pass();
                out.add("targets.csv", checks_csv(&[c]));
            }
            Some(_) => println!(
                "published totals are at 224; no comparison at {}",
                a.resolution
            ),
            None => println!("no published totals for this configuration"),
        }
    }
    out.write()?;
    Ok(pass)
}
