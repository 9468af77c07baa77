//! The two trainable parameter sets layered on a frozen backbone.
//!
//! Both adapters are parallel bottlenecks, `h + up·tanh(down·h + b_down) + b_up`.
//! The LM adapter edits the hidden state that feeds the output layer; the
//! ITM adapter edits the text context vector and also owns the affine map
//! from visual into text space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::scoring::Projection;
use crate::text::seeded_rng;

pub const DEFAULT_REDUCTION_FACTOR: usize = 16;

pub fn bottleneck_dim(dim: usize, reduction_factor: usize) -> usize {
    (dim / reduction_factor.max(1)).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelAdapter {
    /// `bottleneck x dim`
    pub down: Matrix,
    pub down_bias: Vec<f64>,
    /// `dim x bottleneck`
    pub up: Matrix,
    pub up_bias: Vec<f64>,
}

impl ParallelAdapter {
    pub fn zeros(dim: usize, bottleneck: usize) -> Self {
        Self {
            down: Matrix::zeros(bottleneck, dim),
            down_bias: vec![0.0; bottleneck],
            up: Matrix::zeros(dim, bottleneck),
            up_bias: vec![0.0; dim],
        }
    }

    /// Identity at initialization: the up path starts at zero.
    pub fn init(dim: usize, bottleneck: usize, rng: &mut impl Rng) -> Self {
        let mut a = Self::zeros(dim, bottleneck);
        let s = 1.0 / (dim as f64).sqrt();
        for v in &mut a.down.data {
            *v = s * rng.sample::<f64, _>(StandardNormal);
        }
        a
    }

    pub fn dim(&self) -> usize {
        self.up.rows
    }

    /// Returns the adapted vector and the bottleneck activation.
    pub fn forward(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut z = self.down.matvec(h);
        for (zi, bi) in z.iter_mut().zip(&self.down_bias) {
            *zi = (*zi + bi).tanh();
        }
        let mut out = self.up.matvec(&z);
        for ((o, hi), bi) in out.iter_mut().zip(h).zip(&self.up_bias) {
            *o += hi + bi;
        }
        (out, z)
    }

    /// Accumulates parameter gradients for upstream gradient `g` at the
    /// output, given the forward input `h` and activation `z`.
    pub fn backward(&self, h: &[f64], z: &[f64], g: &[f64], grad: &mut ParallelAdapter) {
        grad.up.add_outer(1.0, g, z);
        axpy(1.0, g, &mut grad.up_bias);
        let dz = self.up.t_matvec(g);
        let dpre: Vec<f64> = dz.iter().zip(z).map(|(d, zi)| d * (1.0 - zi * zi)).collect();
        grad.down.add_outer(1.0, &dpre, h);
        axpy(1.0, &dpre, &mut grad.down_bias);
    }

    fn tensors(&self) -> [(&'static str, Vec<usize>, &[f64]); 4] {
        [
            ("down", vec![self.down.rows, self.down.cols], &self.down.data),
            ("down_bias", vec![self.down_bias.len()], &self.down_bias),
            ("up", vec![self.up.rows, self.up.cols], &self.up.data),
            ("up_bias", vec![self.up_bias.len()], &self.up_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("down", &mut self.down.data),
            ("down_bias", &mut self.down_bias),
            ("up", &mut self.up.data),
            ("up_bias", &mut self.up_bias),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmAdapter {
    pub adapter: ParallelAdapter,
    /// Visual → text bridge, `dim x visual_dim`.
    pub projection: Projection,
}

/// A named view of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub lm: ParallelAdapter,
    pub itm: ItmAdapter,
    pub reduction_factor: usize,
}

pub const LM_PREFIX: &str = "lm.";
pub const ITM_PREFIX: &str = "itm.";

impl AdapterState {
    pub fn new(dim: usize, visual_dim: usize, reduction_factor: usize, seed: u64) -> Self {
        let b = bottleneck_dim(dim, reduction_factor);
        let mut rng = seeded_rng(&[b"adapters", &seed.to_le_bytes()]);
        let lm = ParallelAdapter::init(dim, b, &mut rng);
        let adapter = ParallelAdapter::init(dim, b, &mut rng);
        let projection = Projection::seeded(visual_dim, dim, rng.gen());
        Self {
            lm,
            itm: ItmAdapter {
                adapter,
                projection,
            },
            reduction_factor,
        }
    }

    /// Same shapes, all zeros; the gradient accumulator type.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn lm_tensors(&self) -> Vec<NamedTensor<'_>> {
        self.lm
            .tensors()
            .into_iter()
            .map(|(n, shape, data)| NamedTensor {
                name: format!("{LM_PREFIX}{n}"),
                shape,
                data,
            })
            .collect()
    }

    pub fn itm_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out: Vec<NamedTensor<'_>> = self
            .itm
            .adapter
            .tensors()
            .into_iter()
            .map(|(n, shape, data)| NamedTensor {
                name: format!("{ITM_PREFIX}{n}"),
                shape,
                data,
            })
            .collect();
        let p = &self.itm.projection;
        out.push(NamedTensor {
            name: format!("{ITM_PREFIX}proj"),
            shape: vec![p.weight.rows, p.weight.cols],
            data: &p.weight.data,
        });
        out.push(NamedTensor {
            name: format!("{ITM_PREFIX}proj_bias"),
            shape: vec![p.bias.len()],
            data: &p.bias,
        });
        out
    }

    /// Every tensor, LM first, in a fixed order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut t = self.lm_tensors();
        t.extend(self.itm_tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = self
            .lm
            .tensors_mut()
            .into_iter()
            .map(|(n, d)| (format!("{LM_PREFIX}{n}"), d))
            .collect();
        out.extend(
            self.itm
                .adapter
                .tensors_mut()
                .into_iter()
                .map(|(n, d)| (format!("{ITM_PREFIX}{n}"), d)),
        );
        let p = &mut self.itm.projection;
        out.push((format!("{ITM_PREFIX}proj"), &mut p.weight.data));
        out.push((format!("{ITM_PREFIX}proj_bias"), &mut p.bias));
        out
    }

    pub fn lm_names(&self) -> Vec<String> {
        self.lm_tensors().into_iter().map(|t| t.name).collect()
    }

    pub fn itm_names(&self) -> Vec<String> {
        self.itm_tensors().into_iter().map(|t| t.name).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Flattened parameters in `tensors()` order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &AdapterState) {
        let src = other.flat();
        let mut k = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            axpy(alpha, &src[k..k + n], t);
            k += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Hex SHA-256 over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> String {
        tensor_checksum(self.tensors().iter().map(|t| (t.name.as_str(), t.data)))
    }

    /// Overwrites the tensor called `name`; shapes must agree.
    pub fn set_tensor(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for (n, t) in self.tensors_mut() {
            if n == name {
                if t.len() != values.len() {
                    return Err(Error::Dimension(format!(
                        "tensor {name}: expected {} values, got {}",
                        t.len(),
                        values.len()
                    )));
                }
                t.copy_from_slice(values);
                return Ok(());
            }
        }
        Err(Error::invalid(format!("unknown adapter tensor `{name}`")))
    }
}

pub fn tensor_checksum<'a>(tensors: impl Iterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut h = Sha256::new();
    for (name, data) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        for v in data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn name_sets_are_disjoint_and_complete() {
        let a = AdapterState::new(32, 16, 16, 0);
        let lm: HashSet<String> = a.lm_names().into_iter().collect();
        let itm: HashSet<String> = a.itm_names().into_iter().collect();
        assert!(lm.is_disjoint(&itm));
        assert!(itm.contains("itm.proj"));
        assert_eq!(lm.len() + itm.len(), a.tensors().len());
        // bottleneck 2: 2*32 + 2 + 32*2 + 32 per adapter, plus 32*16 + 32.
        assert_eq!(a.param_count(), 2 * 162 + 512 + 32);
    }

    #[test]
    fn adapter_starts_as_identity() {
        let a = AdapterState::new(8, 4, 4, 3);
        let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        assert_eq!(a.lm.forward(&h).0, h);
    }

    #[test]
    fn axpy_and_checksum() {
        let mut a = AdapterState::new(8, 4, 2, 1);
        let before = a.checksum();
        let g = a.zeros_like();
        a.axpy(-0.1, &g);
        assert_eq!(a.checksum(), before);
        let mut g = a.zeros_like();
        g.set_tensor("lm.up_bias", &[1.0; 8]).unwrap();
        a.axpy(-0.5, &g);
        assert_ne!(a.checksum(), before);
        assert_eq!(a.lm.up_bias, vec![-0.5; 8]);
        assert!(a.set_tensor("lm.up_bias", &[0.0; 3]).is_err());
        assert!(a.set_tensor("nope", &[]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded_rng(&[b"t"]);
        let mut a = ParallelAdapter::init(5, 3, &mut rng);
        for v in &mut a.up.data {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let h: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let f = |a: &ParallelAdapter| crate::linalg::dot(&a.forward(&h).0, &w);
        let (_, z) = a.forward(&h);
        let mut g = ParallelAdapter::zeros(5, 3);
        a.backward(&h, &z, &w, &mut g);
        let eps = 1e-6;
        for k in 0..a.down.data.len() {
            let mut p = a.clone();
            p.down.data[k] += eps;
            let mut m = a.clone();
            m.down.data[k] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((fd - g.down.data[k]).abs() < 1e-7);
        }
    }
}
