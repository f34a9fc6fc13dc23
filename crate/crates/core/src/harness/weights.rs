//! Model weights as a directory of tensor text dumps: `arch.toml`, one
//! `{param}.txt` per parameter and `{bn}.running_mean.txt` /
//! `{bn}.running_var.txt` per batch norm.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnops::BnMode;
use crate::rednet::{ArchSpec, Model};
use crate::tensor::Tensor;

pub fn save_weights(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("arch.toml"), model.arch().to_text())?;
    for (_, p) in model.params().iter() {
        fs::write(dir.join(format!("{}.txt", p.name)), p.value.to_text())?;
    }
    for (name, mean, var) in model.running_stats() {
        fs::write(dir.join(format!("{name}.running_mean.txt")), mean.to_text())?;
        fs::write(dir.join(format!("{name}.running_var.txt")), var.to_text())?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Tensor> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Tensor::from_text(&text)
}

/// Rebuilds a model saved by [`save_weights`], in inference mode.
pub fn load_weights(dir: &Path) -> Result<Model> {
    let arch = ArchSpec::from_text(&fs::read_to_string(dir.join("arch.toml"))?)?;
    let mut model = Model::new(&arch, 0)?;
    let ids: Vec<_> = model
        .params()
        .iter()
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in ids {
        let t = read(&dir.join(format!("{name}.txt")))?;
        model.params_mut().set(id, t)?;
    }
    let bns: Vec<String> = model
        .running_stats()
        .map(|(n, _, _)| n.to_string())
        .collect();
    for name in bns {
        let mean = read(&dir.join(format!("{name}.running_mean.txt")))?;
        let var = read(&dir.join(format!("{name}.running_var.txt")))?;
        model.set_running_stats(&name, mean, var)?;
    }
    model.set_mode(BnMode::Eval);
    Ok(model)
}
