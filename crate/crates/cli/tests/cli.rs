use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn rednet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rednet"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(dir: &TempDir, name: &str) -> String {
    fs::read_to_string(dir.path().join(name)).unwrap()
}

#[test]
fn profile_spec_commands() {
    let d = TempDir::new().unwrap();
    for (args, total) in [
        (
            &[
                "profile",
                "--depth",
                "50",
                "--op",
                "involution",
                "--stem",
                "inv",
            ][..],
            "15540806",
        ),
        (
            &["profile", "--depth", "50", "--op", "conv"][..],
            "25557032",
        ),
        (
            &[
                "profile",
                "--depth",
                "50",
                "--op",
                "involution",
                "--stem",
                "conv7",
                "--kernel",
                "9",
            ][..],
            "16166644",
        ),
    ] {
        let o = rednet(d.path(), args);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        assert!(stdout(&o).contains("PASS"));
        let csv = read(&d, "profile.csv");
        assert!(csv.starts_with("layer,name,params,macs\n"));
        let last = csv.lines().last().unwrap();
        assert_eq!(last.split(',').nth(2), Some(total), "{last}");
    }
}

#[test]
fn profile_exit_reflects_tolerance() {
    let d = TempDir::new().unwrap();
    let o = rednet(d.path(), &["--tolerance-macs", "0.5", "profile"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
    let o = rednet(d.path(), &["profile", "--all-targets"]);
    assert_eq!(code(&o), 0);
    assert_eq!(read(&d, "targets.csv").lines().count(), 23);
    let o = rednet(
        d.path(),
        &["profile", "--all-targets", "--convention", "fused"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn profile_without_published_row() {
    let d = TempDir::new().unwrap();
    let o = rednet(d.path(), &["profile", "--kernel", "11"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("no published totals"));
    let arch = d.path().join("arch.toml");
    let o = rednet(
        d.path(),
        &[
            "profile",
            "--arch-file",
            arch.to_str().unwrap(),
            "--resolution",
            "256",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_two() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&rednet(d.path(), &["profile", "--depth", "33"])), 2);
    assert_eq!(
        code(&rednet(d.path(), &["profile", "--resolution", "100"])),
        2
    );
    assert_eq!(code(&rednet(d.path(), &["profile", "--bogus"])), 2);
    assert_eq!(code(&rednet(d.path(), &["gradcheck", "--ops", "nope"])), 2);
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[profiel]\ndepth = 26\n").unwrap();
    assert_eq!(
        code(&rednet(
            d.path(),
            &["--config", cfg.to_str().unwrap(), "profile"]
        )),
        2
    );
    fs::write(&cfg, "[profile]\ndeepth = 26\n").unwrap();
    assert_eq!(
        code(&rednet(
            d.path(),
            &["--config", cfg.to_str().unwrap(), "profile"]
        )),
        2
    );
}

#[test]
fn config_sections_and_overrides() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("c.toml");
    fs::write(&cfg, "tolerance-macs = 0.5\n\n[profile]\ndepth = 26\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = rednet(d.path(), &["--config", c, "profile"]);
    assert!(stdout(&o).contains("RedNet-26"));
    assert_eq!(code(&o), 1);
    let o = rednet(
        d.path(),
        &[
            "--config",
            c,
            "--tolerance-macs",
            "3",
            "profile",
            "--depth",
            "38",
        ],
    );
    assert!(stdout(&o).contains("RedNet-38"));
    assert_eq!(code(&o), 0);
}

#[test]
fn gradcheck_and_oracle_suites() {
    let d = TempDir::new().unwrap();
    let o = rednet(
        d.path(),
        &[
            "gradcheck",
            "--ops",
            "involution,batch_norm,kernel_generate",
        ],
    );
    assert_eq!(code(&o), 0);
    let csv = read(&d, "gradcheck.csv");
    assert!(csv.starts_with("op,input,max_rel_err,pass\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    let o = rednet(
        d.path(),
        &[
            "oracle",
            "--configs",
            "5",
            "--cases",
            "10",
            "--unification-cases",
            "2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(read(&d, "oracle.csv").lines().count(), 1 + 7 * 5);
    assert_eq!(read(&d, "properties.csv").lines().count(), 5);
    assert_eq!(read(&d, "unification.csv").lines().count(), 5);
}

#[test]
fn bench_rows_and_mac_ratio() {
    let d = TempDir::new().unwrap();
    let o = rednet(
        d.path(),
        &[
            "bench",
            "--channels",
            "16",
            "--sizes",
            "8",
            "--kernels",
            "1,7",
        ],
    );
    assert_eq!(code(&o), 0);
    let csv = read(&d, "bench.csv");
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[0][0], rows[0][3]), ("involution", "1"));
    let macs = |r: &Vec<&str>| r[12].parse::<f64>().unwrap();
    // per position: C·C/r + (C/r)·K²·G + K²·C, against 9·C²
    let inv = 16.0 * 4.0 + 4.0 * 49.0 + 49.0 * 16.0;
    assert_eq!(macs(&rows[1]) / macs(&rows[2]), inv / (9.0 * 256.0));
    let o = rednet(d.path(), &["bench", "--sizes", "4096"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_toy_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let args = [
        "--seed",
        "7",
        "train-toy",
        "--epochs",
        "2",
        "--samples",
        "32",
        "--test-samples",
        "16",
        "--min-train-acc",
        "0",
    ];
    let (oa, ob) = (rednet(a.path(), &args), rednet(b.path(), &args));
    assert_eq!(code(&oa), code(&ob));
    for f in [
        "train_metrics.csv",
        "baseline_metrics.csv",
        "train_summary.csv",
    ] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_eq!(read(&a, "train_metrics.csv").lines().count(), 3);
}

#[test]
fn frozen_training_keeps_loss() {
    let d = TempDir::new().unwrap();
    let o = rednet(
        d.path(),
        &[
            "train-toy",
            "--lr",
            "0",
            "--epochs",
            "3",
            "--samples",
            "32",
            "--test-samples",
            "16",
            "--no-baseline",
            "--min-train-acc",
            "0",
        ],
    );
    assert_eq!(code(&o), 0);
    let losses: Vec<String> = read(&d, "train_metrics.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    assert!(losses.iter().all(|l| *l == losses[0]), "{losses:?}");
}

#[test]
fn heatmap_outputs() {
    let d = TempDir::new().unwrap();
    let o = rednet(
        d.path(),
        &[
            "train-toy",
            "--epochs",
            "1",
            "--samples",
            "16",
            "--test-samples",
            "8",
            "--no-baseline",
            "--min-train-acc",
            "0",
            "--save-weights",
        ],
    );
    assert_eq!(code(&o), 0);
    let w = d.path().join("weights");
    let o = rednet(
        d.path(),
        &[
            "heatmap",
            "--weights",
            w.to_str().unwrap(),
            "--layer",
            "conv2_1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&d, "heatmap.csv");
    let dump = read(&d, "heatmap.txt");
    let mut dump_lines = dump.lines();
    let shape: Vec<usize> = dump_lines
        .next()
        .unwrap()
        .split(' ')
        .map(|s| s.parse().unwrap())
        .collect();
    let g = shape[0];
    assert_eq!(
        g, 2,
        "conv2_1 of the toy has 32 channels in 16-channel groups"
    );
    let from_csv: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    let from_dump: Vec<f64> = dump_lines.map(|l| l.parse().unwrap()).collect();
    assert_eq!(from_csv, from_dump);
    for gi in 0..g {
        let pgm = fs::read(d.path().join(format!("heatmap_g{gi:02}.pgm"))).unwrap();
        let header = format!("P5\n{} {}\n255\n", shape[2], shape[1]);
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + shape[1] * shape[2]);
    }
    let o = rednet(
        d.path(),
        &[
            "heatmap",
            "--weights",
            w.to_str().unwrap(),
            "--force-constant",
            "-0.5",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(read(&d, "heatmap.csv")
        .lines()
        .skip(1)
        .all(|l| l.ends_with(",-2.4500000000000000e1")));
    let o = rednet(
        d.path(),
        &["heatmap", "--weights", w.to_str().unwrap(), "--layer", "fc"],
    );
    assert_eq!(code(&o), 2);
}
