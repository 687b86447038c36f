use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filtration::{uniform_dyadic, FiltrationTree};
use crate::martingale::{same_tree, StepFunction};

/// Walsh system on the uniform binary tree of depth `N`.
///
/// Leaf `j` is the interval `[j2^{−N}, (j+1)2^{−N})`; its binary digit `t_k`
/// (weight `2^{−k−1}`) is bit `N−1−k` of `j`. `r_k = (−1)^{t_k}` and
/// `w_n = Π r_k^{n_k}`, so `w_n(j) = (−1)^{popcount(n & rev_N(j))}`. Dyadic
/// addition is XOR of leaf indices.
#[derive(Clone, Debug)]
pub struct WalshContext {
    tree: Arc<FiltrationTree>,
    depth: usize,
    rev: Vec<usize>,
}

fn bit_reverse(j: usize, bits: usize) -> usize {
    if bits == 0 {
        0
    } else {
        j.reverse_bits() >> (usize::BITS as usize - bits)
    }
}

#[inline]
fn sign(parity_source: usize) -> f64 {
    if parity_source.count_ones() & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl WalshContext {
    pub fn new(depth: usize) -> Result<Self> {
        Self::from_tree(uniform_dyadic(depth)?)
    }

    /// Requires a binary tree with equal leaf masses.
    pub fn from_tree(tree: Arc<FiltrationTree>) -> Result<Self> {
        let depth = tree.depth();
        if tree.branching().is_none_or(|b| b.iter().any(|&p| p != 2)) {
            return Err(Error::Config("the Walsh system needs a binary tree".into()));
        }
        let w = 1.0 / tree.leaf_count() as f64;
        if tree.leaf_masses().iter().any(|&m| (m - w).abs() > 1e-15) {
            return Err(Error::Config("the Walsh system needs the Lebesgue measure".into()));
        }
        let rev = (0..tree.leaf_count()).map(|j| bit_reverse(j, depth)).collect();
        Ok(WalshContext { tree, depth, rev })
    }

    pub fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `2^N`, the number of Walsh functions (and leaves).
    pub fn size(&self) -> usize {
        1 << self.depth
    }

    /// Binary digit `t_k` of leaf `j`.
    pub fn digit(&self, j: usize, k: usize) -> usize {
        (j >> (self.depth - 1 - k)) & 1
    }

    /// `x ⊕ y` on leaf indices.
    pub fn dyadic_add(&self, x: usize, y: usize) -> usize {
        x ^ y
    }

    /// `w_n` at leaf `j`.
    pub fn walsh_value(&self, n: usize, j: usize) -> f64 {
        sign(n & self.rev[j])
    }

    pub fn rademacher(&self, k: usize) -> Result<StepFunction> {
        if k >= self.depth {
            return Err(Error::IndexOutOfRange {
                index: k,
                limit: self.depth,
            });
        }
        let v = (0..self.size())
            .map(|j| if self.digit(j, k) == 0 { 1.0 } else { -1.0 })
            .collect();
        StepFunction::new(self.tree.clone(), v)
    }

    pub fn walsh_function(&self, n: usize) -> Result<StepFunction> {
        self.check_index(n)?;
        let v = (0..self.size()).map(|j| self.walsh_value(n, j)).collect();
        StepFunction::new(self.tree.clone(), v)
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.size() {
            return Err(Error::IndexOutOfRange {
                index: n,
                limit: self.size(),
            });
        }
        Ok(())
    }

    fn check_kernel_index(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.size() {
            return Err(Error::IndexOutOfRange {
                index: n,
                limit: self.size() + 1,
            });
        }
        Ok(())
    }

    /// Walsh–Fourier coefficients `f̂(k) = ∫ f w_k`, `k < 2^N`.
    pub fn fwht(&self, f: &StepFunction) -> Result<Vec<f64>> {
        same_tree(&self.tree, f.tree())?;
        Ok(self.fwht_values(f.values()))
    }

    pub fn fwht_values(&self, values: &[f64]) -> Vec<f64> {
        let size = self.size();
        let mut a = vec![0.0; size];
        for (j, v) in values.iter().enumerate() {
            a[self.rev[j]] = *v;
        }
        hadamard(&mut a);
        let w = 1.0 / size as f64;
        a.iter_mut().for_each(|x| *x *= w);
        a
    }

    /// `Σ_k c_k w_k`.
    pub fn inverse_fwht(&self, coefs: &[f64]) -> Result<StepFunction> {
        if coefs.len() != self.size() {
            return Err(Error::LeafCount {
                expected: self.size(),
                got: coefs.len(),
            });
        }
        StepFunction::new(self.tree.clone(), self.inverse_values(coefs))
    }

    fn inverse_values(&self, coefs: &[f64]) -> Vec<f64> {
        let mut a = coefs.to_vec();
        hadamard(&mut a);
        (0..self.size()).map(|j| a[self.rev[j]]).collect()
    }

    /// `D_n = Σ_{k<n} w_k`, `1 ≤ n ≤ 2^N`.
    pub fn dirichlet_kernel(&self, n: usize) -> Result<StepFunction> {
        self.check_kernel_index(n)?;
        let spec: Vec<f64> = (0..self.size()).map(|k| if k < n { 1.0 } else { 0.0 }).collect();
        self.inverse_fwht(&spec)
    }

    /// Walsh spectrum `(n−k)₊/n` of the Fejér kernel.
    pub fn fejer_spectrum(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::IndexOutOfRange { index: 0, limit: 1 });
        }
        Ok((0..self.size())
            .map(|k| if k < n { (n - k) as f64 / n as f64 } else { 0.0 })
            .collect())
    }

    /// `K_n = (1/n) Σ_{j=1}^n D_j`, `1 ≤ n ≤ 2^N`.
    pub fn fejer_kernel(&self, n: usize) -> Result<StepFunction> {
        self.check_kernel_index(n)?;
        self.inverse_fwht(&self.fejer_spectrum(n)?)
    }

    /// `S_n f = Σ_{k<n} f̂(k) w_k`.
    pub fn walsh_partial_sum(&self, n: usize, f: &StepFunction) -> Result<StepFunction> {
        if n == 0 {
            return Err(Error::IndexOutOfRange { index: 0, limit: 1 });
        }
        let mut c = self.fwht(f)?;
        c.iter_mut().skip(n).for_each(|x| *x = 0.0);
        self.inverse_fwht(&c)
    }

    /// `σ_n f = Σ_{k<n} (1 − k/n) f̂(k) w_k`.
    pub fn cesaro_mean(&self, n: usize, f: &StepFunction) -> Result<StepFunction> {
        let spec = self.fejer_spectrum(n)?;
        let c: Vec<f64> = self.fwht(f)?.iter().zip(spec).map(|(a, b)| a * b).collect();
        self.inverse_fwht(&c)
    }

    /// `∫ f(t) K(x ⊕ t) dν(t)`, by direct summation (`O(4^N)`).
    pub fn dyadic_convolution(&self, f: &StepFunction, kernel: &StepFunction) -> Result<StepFunction> {
        same_tree(&self.tree, f.tree())?;
        same_tree(&self.tree, kernel.tree())?;
        let size = self.size();
        let w = 1.0 / size as f64;
        let (fv, kv) = (f.values(), kernel.values());
        let out = (0..size)
            .into_par_iter()
            .map(|x| (0..size).map(|t| fv[t] * kv[x ^ t]).sum::<f64>() * w)
            .collect();
        StepFunction::new(self.tree.clone(), out)
    }

    /// `σ f = max(sup_{n ≤ 2^N} |σ_n f|, |f|)`, the supremum over all `n ≥ 1`.
    ///
    /// For `n ≥ 2^N`, `σ_n f = f − (1/n)Σ_k k f̂(k) w_k` is affine in `1/n`,
    /// so its modulus is maximised at `n = 2^N` or in the limit `n → ∞`.
    pub fn cesaro_maximal(&self, f: &StepFunction) -> Result<StepFunction> {
        same_tree(&self.tree, f.tree())?;
        let zero = vec![0.0; self.size()];
        StepFunction::new(self.tree.clone(), self.cesaro_twisted(f.values(), &zero, &zero))
    }

    /// `x ↦ sup_n |σ_n u(x) − w(x) σ_n v(x)|`, including the `n → ∞` limit.
    ///
    /// Past the last nonzero coefficient `σ_n` is again affine in `1/n`, so the
    /// scan stops there; atoms constant on level-`m` cells cost `O(2^m)` per point.
    pub fn cesaro_twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        let cu = self.fwht_values(u);
        let cv = self.fwht_values(v);
        let size = (0..self.size())
            .rev()
            .find(|&k| cu[k] != 0.0 || cv[k] != 0.0)
            .map_or(0, |k| k + 1);
        (0..self.size())
            .into_par_iter()
            .map(|x| {
                let rx = self.rev[x];
                let wx = w[x];
                let (mut au, mut bu, mut av, mut bv) = (0.0, 0.0, 0.0, 0.0);
                let mut best: f64 = 0.0;
                for k in 0..size {
                    let s = sign(k & rx);
                    let (tu, tv) = (cu[k] * s, cv[k] * s);
                    au += tu;
                    av += tv;
                    bu += k as f64 * tu;
                    bv += k as f64 * tv;
                    let n = (k + 1) as f64;
                    let val = (au - bu / n) - wx * (av - bv / n);
                    best = best.max(val.abs());
                }
                best.max((u[x] - wx * v[x]).abs())
            })
            .collect()
    }
}

/// In-place unnormalised Walsh–Hadamard butterfly in natural order.
fn hadamard(a: &mut [f64]) {
    let n = a.len();
    let mut h = 1;
    while h < n {
        for chunk in a.chunks_mut(2 * h) {
            let (lo, hi) = chunk.split_at_mut(h);
            for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                let (s, d) = (*x + *y, *x - *y);
                *x = s;
                *y = d;
            }
        }
        h *= 2;
    }
}
