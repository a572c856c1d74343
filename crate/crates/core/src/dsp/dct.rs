use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Orthonormal DCT-II keeping the first `n_out` of `n` coefficients.
#[derive(Debug, Clone)]
pub struct DctII {
    n: usize,
    n_out: usize,
    /// n_out × n, row k holds the scaled cosine basis vector k.
    basis: Vec<f64>,
}

impl DctII {
    pub fn new(n: usize, n_out: usize) -> Result<Self> {
        if n_out == 0 || n_out > n {
            return Err(Error::invalid(format!(
                "DCT output count must be in [1, {n}], got {n_out}"
            )));
        }
        let nf = n as f64;
        let mut basis = Vec::with_capacity(n_out * n);
        for k in 0..n_out {
            let scale = if k == 0 {
                (1.0 / nf).sqrt()
            } else {
                (2.0 / nf).sqrt()
            };
            // Reduce k(2i+1) modulo the 4n period so the cosine argument stays small.
            for i in 0..n {
                let phase = (k * (2 * i + 1)) % (4 * n);
                basis.push(scale * (PI * phase as f64 / (2.0 * nf)).cos());
            }
        }
        Ok(Self { n, n_out, basis })
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n, "DCT input length mismatch");
        assert_eq!(out.len(), self.n_out, "DCT output length mismatch");
        for (k, y) in out.iter_mut().enumerate() {
            let row = &self.basis[k * self.n..(k + 1) * self.n];
            *y = row.iter().zip(x).map(|(b, v)| b * v).sum();
        }
    }
}

pub fn dct_ii(x: &[f64], n_out: usize) -> Result<Vec<f64>> {
    let dct = DctII::new(x.len(), n_out)?;
    let mut out = vec![0.0; n_out];
    dct.apply(x, &mut out);
    Ok(out)
}
