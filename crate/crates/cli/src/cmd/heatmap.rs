use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rednet_core::harness::data::SyntheticDataset;
use rednet_core::harness::heatmap::{force_constant, heatmaps, to_csv, to_pgm};
use rednet_core::harness::weights::load_weights;
use rednet_core::nnops::BnMode;
use rednet_core::rednet::{build_rednet, Model, RedNetOptions};
use rednet_core::Tensor;

use crate::output::Outputs;
use crate::Cli;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BnKind {
    Train,
    Eval,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    /// Weights directory written by `train-toy --save-weights`. Without it a
    /// freshly initialised RedNet of `--depth` is used.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub depth: usize,
    /// Involution layer; defaults to `conv3_4`, or the last block of the
    /// third stage when it has fewer than four.
    #[arg(long)]
    pub layer: Option<String>,
    /// Input image: PGM/PPM/PNG, or a tensor text dump of shape (3, H, W)
    /// or (B, 3, H, W). Without it a synthetic sample is used.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Batch item to map.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Batch-norm mode; `eval` with loaded weights, `train` otherwise.
    #[arg(long, value_enum)]
    pub bn: Option<BnKind>,
    /// Replace the layer's span projection by zeros and its bias by this
    /// constant before extracting.
    #[arg(long, allow_hyphen_values = true)]
    pub force_constant: Option<f64>,
}

fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "txt") {
        let t = Tensor::from_text(&std::fs::read_to_string(path)?)?;
        return Ok(match *t.shape() {
            [c, h, w] => t.reshape(&[1, c, h, w])?,
            [_, _, _, _] => t,
            _ => bail!(
                "tensor image must be (3, H, W) or (B, 3, H, W), got {:?}",
                t.shape()
            ),
        });
    }
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    if h % 32 != 0 || w % 32 != 0 || h.min(w) < 32 {
        bail!("image is {w}x{h}; sides must be multiples of 32 (model input {size})");
    }
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[p * 3 + c]) / 255.0
    })?)
}

fn default_layer(model: &Model) -> Result<String> {
    let stages = &model.arch().stages;
    if stages.len() < 3 {
        bail!("architecture has fewer than three stages; pass --layer");
    }
    Ok(format!("conv3_{}", stages[2].blocks.min(4)))
}

pub fn run(cli: &Cli, a: &HeatmapArgs) -> Result<bool> {
    let mut model = match &a.weights {
        Some(dir) => load_weights(dir)?,
        None => Model::new(&build_rednet(a.depth, RedNetOptions::default())?, cli.seed)?,
    };
    let mode = match a.bn.unwrap_or(if a.weights.is_some() {
        BnKind::Eval
    } else {
        BnKind::Train
    }) {
        BnKind::Train => BnMode::Train,
        BnKind::Eval => BnMode::Eval,
    };
    model.set_mode(mode);
    let layer = match &a.layer {
        Some(l) => l.clone(),
        None => default_layer(&model)?,
    };
    let x = match &a.image {
        Some(p) => load_image(p, model.arch().input_size)?,
        None => {
            let size = model.arch().input_size;
            let data = SyntheticDataset::generate(a.index + 1, 4, size, cli.seed.wrapping_add(2))?;
            data.images
        }
    };
    let kernel = model.involution_spec(&layer)?.kernel_size;
    if let Some(c) = a.force_constant {
        force_constant(&mut model, &layer, c)?;
    }
    let maps = heatmaps(&model, &x, &layer, a.index)?;
    let [g, h, w] = *maps.shape() else {
        unreachable!()
    };
    println!("{layer}: {g} maps of {h}x{w}, K = {kernel}");

    let mut out = Outputs::new(&cli.out);
    out.add("heatmap.csv", to_csv(&maps)?);
    out.add("heatmap.txt", maps.to_text());
    for gi in 0..g {
        out.add(format!("heatmap_g{gi:02}.pgm"), to_pgm(&maps, gi)?);
    }
    out.write()?;

    if let Some(c) = a.force_constant {
        let want = c * (kernel * kernel) as f64;
        let flat = maps.data().iter().all(|&v| v == want);
        println!(
            "constant kernels give flat maps of {want}: {}",
            if flat { "PASS" } else { "FAIL" }
        );
        return Ok(flat);
    }
    Ok(true)
}
