use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Seeded image classification data. Each image holds one elongated
/// Gaussian blob whose orientation encodes the class (`π·class/classes`).
/// Its position, sign and colour are random, and pixel noise is added.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `(N, 3, size, size)`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub size: usize,
}

pub const SIGMA_MAJOR: f64 = 3.0;
pub const SIGMA_MINOR: f64 = 1.0;
pub const NOISE_STD: f64 = 0.15;

impl SyntheticDataset {
    /// Labels cycle through the classes so every class has `n / classes`
    /// samples (±1).
    pub fn generate(n: usize, classes: usize, size: usize, seed: u64) -> Result<Self> {
        if n == 0 || classes < 2 || size < 16 {
            return Err(Error::Config(format!(
                "dataset needs n ≥ 1, classes ≥ 2 and size ≥ 16 (got {n}, {classes}, {size})"
            )));
        }
        let mut rng = Prng::new(seed);
        let margin = 2.0 * SIGMA_MAJOR;
        let plane = size * size;
        let mut data = vec![0.0; n * 3 * plane];
        let mut labels = Vec::with_capacity(n);
        for s in 0..n {
            let label = s % classes;
            let theta = std::f64::consts::PI * label as f64 / classes as f64;
            let (sin, cos) = theta.sin_cos();
            let cy = rng.uniform(margin, size as f64 - margin);
            let cx = rng.uniform(margin, size as f64 - margin);
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            let colour: Vec<f64> = (0..3).map(|_| sign * rng.uniform(0.5, 1.0)).collect();
            let img = &mut data[s * 3 * plane..][..3 * plane];
            for i in 0..size {
                for j in 0..size {
                    let (y, x) = (i as f64 - cy, j as f64 - cx);
                    let (u, v) = (x * cos + y * sin, -x * sin + y * cos);
                    let bump = (-(u * u / (2.0 * SIGMA_MAJOR * SIGMA_MAJOR)
                        + v * v / (2.0 * SIGMA_MINOR * SIGMA_MINOR)))
                        .exp();
                    for (ch, &col) in colour.iter().enumerate() {
                        img[ch * plane + i * size + j] = col * bump + NOISE_STD * rng.normal();
                    }
                }
            }
            labels.push(label);
        }
        Ok(Self {
            images: Tensor::new(&[n, 3, size, size], data)?,
            labels,
            classes,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `[start, start + len)`, clipped to the dataset.
    pub fn batch(&self, start: usize, len: usize) -> Result<(Tensor, &[usize])> {
        let end = (start + len).min(self.len());
        let per = 3 * self.size * self.size;
        let x = Tensor::new(
            &[end - start, 3, self.size, self.size],
            self.images.data()[start * per..end * per].to_vec(),
        )?;
        Ok((x, &self.labels[start..end]))
    }
}

impl SyntheticDataset {
    /// The samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = 3 * self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..][..per]);
        }
        let x = Tensor::new(&[indices.len(), 3, self.size, self.size], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerates_identically() {
        let a = SyntheticDataset::generate(12, 4, 32, 9).unwrap();
        let b = SyntheticDataset::generate(12, 4, 32, 9).unwrap();
        assert_eq!(a, b);
        let c = SyntheticDataset::generate(12, 4, 32, 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn balanced_labels_and_batches() {
        let d = SyntheticDataset::generate(10, 4, 16, 0).unwrap();
        assert_eq!(d.labels, [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
        let (x, y) = d.batch(8, 4).unwrap();
        assert_eq!(x.shape(), &[2, 3, 16, 16]);
        assert_eq!(y, &[0, 1]);
    }
}
