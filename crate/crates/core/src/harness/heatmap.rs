//! Kernel heat maps: the sum of each generated `K×K` kernel, one map per
//! group.

use std::fmt::Write as _;

use crate::error::{mismatch, Result};
use crate::rednet::Model;
use crate::tensor::Tensor;

/// `(B, G, K·K, H, W)` to `(B, G, H, W)`.
pub fn kernel_sums(kernels: &Tensor) -> Result<Tensor> {
    if kernels.ndim() != 5 {
        return Err(mismatch(
            "kernel_sums",
            format!("expected 5-D kernels, got {:?}", kernels.shape()),
        ));
    }
    kernels.reduce_sum(&[2])
}

/// Heat maps `(G, H', W')` of `layer` for batch item `sample` of `x`.
pub fn heatmaps(model: &Model, x: &Tensor, layer: &str, sample: usize) -> Result<Tensor> {
    let sums = kernel_sums(&model.extract_kernels(x, layer)?)?;
    let [b, g, h, w] = *sums.shape() else {
        unreachable!()
    };
    if sample >= b {
        return Err(mismatch(
            "heatmaps",
            format!("sample {sample} out of range for batch {b}"),
        ));
    }
    let per = g * h * w;
    Tensor::new(&[g, h, w], sums.data()[sample * per..][..per].to_vec())
}

/// Sets a layer's span projection to zero and its bias to `c`, so every
/// generated kernel entry equals `c`.
pub fn force_constant(model: &mut Model, layer: &str, c: f64) -> Result<()> {
    let full = model.resolve_involution(layer)?;
    for (suffix, value) in [("span.weight", 0.0), ("span.bias", c)] {
        let name = format!("{full}.{suffix}");
        let params = model.params_mut();
        let id = params
            .find(&name)
            .expect("involution layers own a span projection");
        let t = Tensor::full(params.value(id).shape(), value)?;
        params.set(id, t)?;
    }
    Ok(())
}

pub const CSV_HEADER: &str = "group,row,col,value";

/// Raw values, one row per map pixel.
pub fn to_csv(maps: &Tensor) -> Result<String> {
    let (g, h, w) = dims3(maps)?;
    let mut out = format!("{CSV_HEADER}\n");
    for gi in 0..g {
        for i in 0..h {
            for j in 0..w {
                let _ = writeln!(
                    out,
                    "{gi},{i},{j},{:.16e}",
                    maps.data()[(gi * h + i) * w + j]
                );
            }
        }
    }
    Ok(out)
}

fn dims3(maps: &Tensor) -> Result<(usize, usize, usize)> {
    match *maps.shape() {
        [g, h, w] => Ok((g, h, w)),
        _ => Err(mismatch(
            "heatmap",
            format!("expected (G, H, W), got {:?}", maps.shape()),
        )),
    }
}

/// Binary 8-bit greyscale PGM of map `group`, min-max scaled to 0..=255. A
/// flat map is written as all zeros.
pub fn to_pgm(maps: &Tensor, group: usize) -> Result<Vec<u8>> {
    let (g, h, w) = dims3(maps)?;
    if group >= g {
        return Err(mismatch("to_pgm", format!("group {group} of {g}")));
    }
    let vals = &maps.data()[group * h * w..][..h * w];
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(vals.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let maps = Tensor::new(&[2, 1, 3], vec![0.0, 0.5, 1.0, 7.0, 7.0, 7.0]).unwrap();
        let p = to_pgm(&maps, 0).unwrap();
        assert_eq!(&p[..11], b"P5\n3 1\n255\n");
        assert_eq!(&p[11..], &[0, 128, 255]);
        assert_eq!(&to_pgm(&maps, 1).unwrap()[11..], &[0, 0, 0]);
        assert!(to_pgm(&maps, 2).is_err());
    }

    #[test]
    fn csv_rows() {
        let maps = Tensor::new(&[1, 1, 2], vec![1.5, -2.0]).unwrap();
        let csv = to_csv(&maps).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines,
            [
                CSV_HEADER,
                "0,0,0,1.5000000000000000e0",
                "0,0,1,-2.0000000000000000e0"
            ]
        );
        let v: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 1.5);
    }
}
