//! Config files: top-level keys default the global flags and each
//! `[subcommand]` table defaults that subcommand's flags. Keys are flag
//! names; flags given on the command line win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Global options that take a value, needed to find the subcommand token.
const VALUED_GLOBALS: [&str; 5] = [
    "--seed",
    "--out",
    "--tolerance-params",
    "--tolerance-macs",
    "--config",
];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if VALUED_GLOBALS.contains(&s.as_ref()) {
            i += 2;
        } else if s.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn to_flags(table: &toml::Table, where_: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let v = match value {
            toml::Value::Boolean(true) => {
                out.push(flag.into());
                continue;
            }
            toml::Value::Boolean(false) => continue,
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(n) => n.to_string(),
            toml::Value::Float(x) => x.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    toml::Value::Float(x) => Ok(x.to_string()),
                    _ => bail!("{where_}: `{key}` must hold scalars"),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            _ => bail!("{where_}: unsupported value for `{key}`"),
        };
        out.push(flag.into());
        out.push(v.into());
    }
    Ok(out)
}

/// Returns `args` with the config file's defaults spliced in ahead of the
/// user's own flags at each level.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {}", Path::new(&path).display()))?;
    let doc: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", Path::new(&path).display()))?;
    let Some(sub) = subcommand_index(&args) else {
        return Ok(args);
    };
    let name = args[sub].to_string_lossy().into_owned();

    let mut globals = toml::Table::new();
    let mut section = None;
    for (k, v) in doc {
        match v {
            toml::Value::Table(t) => {
                if !crate::SUBCOMMANDS.contains(&k.as_str()) {
                    bail!("config: unknown section [{k}]");
                }
                if k == name {
                    section = Some(t);
                }
            }
            other => {
                if k == "config" {
                    bail!("config: `config` cannot be set from a config file");
                }
                globals.insert(k, other);
            }
        }
    }
    let mut out = vec![args[0].clone()];
    out.extend(to_flags(&globals, "config")?);
    out.extend_from_slice(&args[1..=sub]);
    if let Some(t) = section {
        out.extend(to_flags(&t, &format!("config [{name}]"))?);
    }
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn finds_subcommand_after_valued_globals() {
        assert_eq!(
            subcommand_index(&os(&["rednet", "--out", "profile", "bench"])),
            Some(3)
        );
        assert_eq!(
            subcommand_index(&os(&["rednet", "--seed=4", "oracle"])),
            Some(2)
        );
    }

    #[test]
    fn flags_from_table() {
        let t: toml::Table =
            "epochs = 3\nlr = 0.5\nno-baseline = true\nreshuffle = false\nsizes = [14, 28]"
                .parse()
                .unwrap();
        let f: Vec<String> = to_flags(&t, "t")
            .unwrap()
            .into_iter()
            .map(|s| s.into_string().unwrap())
            .collect();
        assert_eq!(
            f,
            [
                "--epochs",
                "3",
                "--lr",
                "0.5",
                "--no-baseline",
                "--sizes",
                "14,28"
            ]
        );
    }
}
