use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::decomp::{verify_atom, AtomCertificate, AtomKind};
use crate::error::{Error, Result};
use crate::filtration::{CellRef, FiltrationTree};
use crate::martingale::{lp, same_tree, StepFunction};

/// Haar functions `h_I = √m(I)[1_{I₋}/μ(I₋) − 1_{I₊}/μ(I₊)]` of a binary tree.
#[derive(Clone, Debug)]
pub struct HaarSystem {
    tree: Arc<FiltrationTree>,
    /// `√m(I)` for every internal cell, by level.
    sqrt_m: Vec<Vec<f64>>,
}

impl HaarSystem {
    pub fn new(tree: Arc<FiltrationTree>) -> Result<Self> {
        for n in 0..=tree.depth() {
            for (i, c) in tree.level(n).iter().enumerate() {
                if c.mass <= 0.0 {
                    return Err(Error::ZeroMass { level: n, index: i });
                }
            }
        }
        let mut sqrt_m = Vec::with_capacity(tree.depth());
        for n in 0..tree.depth() {
            let mut row = Vec::with_capacity(tree.level_len(n));
            for i in 0..tree.level_len(n) {
                row.push(tree.harmonic_mass(CellRef::new(n, i))?.sqrt());
            }
            sqrt_m.push(row);
        }
        Ok(HaarSystem { tree, sqrt_m })
    }

    pub fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }

    /// `m(I)`.
    pub fn m(&self, r: CellRef) -> f64 {
        let s = self.sqrt_m[r.level][r.index];
        s * s
    }

    /// `h_I` at the leaves; `I` must be internal.
    pub fn haar_function(&self, r: CellRef) -> Result<StepFunction> {
        self.tree.check_cell(r)?;
        if r.level >= self.tree.depth() {
            return Err(Error::IndexOutOfRange {
                index: r.level,
                limit: self.tree.depth(),
            });
        }
        let mut coefs = self.zero_coefficients();
        coefs[r.level][r.index] = 1.0;
        StepFunction::new(self.tree.clone(), self.synthesize(&coefs))
    }

    fn zero_coefficients(&self) -> Vec<Vec<f64>> {
        (0..self.tree.depth())
            .map(|n| vec![0.0; self.tree.level_len(n)])
            .collect()
    }

    /// `⟨f, h_I⟩` for every internal cell, by level.
    pub fn coefficients(&self, values: &[f64]) -> Vec<Vec<f64>> {
        let avg = self.tree.all_averages(values);
        (0..self.tree.depth())
            .map(|n| {
                let below = &avg[n + 1];
                self.tree
                    .level(n)
                    .iter()
                    .zip(&self.sqrt_m[n])
                    .map(|(c, s)| s * (below[c.children.start] - below[c.children.start + 1]))
                    .collect()
            })
            .collect()
    }

    /// `Σ_I c_I h_I`, accumulated from the root down.
    pub fn synthesize(&self, coefs: &[Vec<f64>]) -> Vec<f64> {
        let tree = &self.tree;
        let mut acc = vec![0.0];
        for n in 0..tree.depth() {
            let below = tree.level(n + 1);
            let mut next = vec![0.0; below.len()];
            for (i, c) in tree.level(n).iter().enumerate() {
                let (l, r) = (c.children.start, c.children.start + 1);
                let k = coefs[n][i] * self.sqrt_m[n][i];
                next[l] = acc[i] + k / below[l].mass;
                next[r] = acc[i] - k / below[r].mass;
            }
            acc = next;
        }
        acc
    }

    fn delta(&self, n: usize, i: usize) -> f64 {
        let parent = self.tree.level(n)[i].parent.expect("non-root cell");
        if self.tree.level(n - 1)[parent].children.start == i {
            1.0
        } else {
            -1.0
        }
    }

    fn hilbert_values(&self, values: &[f64]) -> Vec<f64> {
        let c = self.coefficients(values);
        let mut out = self.zero_coefficients();
        for n in 1..self.tree.depth() {
            for (i, cell) in self.tree.level(n).iter().enumerate() {
                out[n][i] = self.delta(n, i) * c[n - 1][cell.parent.unwrap()];
            }
        }
        self.synthesize(&out)
    }

    fn adjoint_values(&self, values: &[f64]) -> Vec<f64> {
        let c = self.coefficients(values);
        let mut out = self.zero_coefficients();
        for n in 1..self.tree.depth() {
            for (i, cell) in self.tree.level(n).iter().enumerate() {
                out[n - 1][cell.parent.unwrap()] += self.delta(n, i) * c[n][i];
            }
        }
        self.synthesize(&out)
    }

    /// `H_𝒟` on raw leaf values.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.hilbert_values(values)
    }

    /// `H_𝒟*` on raw leaf values.
    pub fn apply_adjoint(&self, values: &[f64]) -> Vec<f64> {
        self.adjoint_values(values)
    }
}

/// `H_𝒟 f = Σ_{k≥1} Σ_{I∈A(𝓕_k)} δ(I)⟨f, h_Î⟩ h_I`, with `δ(I) = +1` on left children.
pub fn dyadic_hilbert(sys: &HaarSystem, f: &StepFunction) -> Result<StepFunction> {
    same_tree(&sys.tree, f.tree())?;
    StepFunction::new(sys.tree.clone(), sys.hilbert_values(f.values()))
}

/// `H_𝒟* f = Σ δ(I)⟨f, h_I⟩ h_Î`, the `L²(μ)` adjoint.
pub fn dyadic_hilbert_adjoint(sys: &HaarSystem, f: &StepFunction) -> Result<StepFunction> {
    same_tree(&sys.tree, f.tree())?;
    StepFunction::new(sys.tree.clone(), sys.adjoint_values(f.values()))
}

/// `H_𝒟 w` for a jump `w` at level `n`, using only the level-`n` terms.
pub fn hilbert_on_jump(sys: &HaarSystem, w: &AtomCertificate) -> Result<StepFunction> {
    same_tree(&sys.tree, w.tree())?;
    if w.kind != AtomKind::Jump {
        return Err(Error::InvalidAtom("expected a jump".into()));
    }
    let report = verify_atom(w, None);
    if !report.pass {
        return Err(Error::InvalidAtom(report.diagnostics.join("; ")));
    }
    let tree = &sys.tree;
    let n = w.level;
    let mut coefs = sys.zero_coefficients();
    if n < tree.depth() {
        let vals = tree.averages(w.function.values(), n);
        for (i, cell) in tree.level(n).iter().enumerate() {
            let p = cell.parent.unwrap();
            let pc = &tree.level(n - 1)[p];
            let inner = sys.sqrt_m[n - 1][p] * (vals[pc.children.start] - vals[pc.children.start + 1]);
            coefs[n][i] = sys.delta(n, i) * inner;
        }
    }
    StepFunction::new(tree.clone(), sys.synthesize(&coefs))
}

/// Estimates the `L²(μ)` norm of `apply` by power iteration on `adjoint ∘ apply`.
pub fn operator_norm_power_iteration(
    tree: &FiltrationTree,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    adjoint: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..tree.leaf_count()).map(|_| rng.sample(StandardNormal)).collect();
    let normalize = |v: &mut Vec<f64>| {
        let n = lp(tree, v, 2.0);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    if normalize(&mut x) == 0.0 {
        return 0.0;
    }
    let mut estimate = 0.0;
    for _ in 0..steps {
        let y = apply(&x);
        estimate = lp(tree, &y, 2.0);
        let mut z = adjoint(&y);
        if normalize(&mut z) == 0.0 {
            return 0.0;
        }
        x = z;
    }
    estimate.max(lp(tree, &apply(&x), 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::random_atom;
    use crate::filtration::{build_nondoubling_measure, build_pk_filtration, uniform_dyadic, PkMeasure};
    use crate::martingale::integral;

    fn inner(tree: &FiltrationTree, a: &[f64], b: &[f64]) -> f64 {
        let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        integral(tree, &p)
    }

    fn random_masses(depth: usize, seed: u64) -> Arc<FiltrationTree> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m: Vec<f64> = (0..1 << depth).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= s);
        build_pk_filtration(&vec![2; depth], PkMeasure::LeafMasses(m)).unwrap()
    }

    fn all_internal(tree: &FiltrationTree) -> Vec<CellRef> {
        (0..tree.depth())
            .flat_map(|n| (0..tree.level_len(n)).map(move |i| CellRef::new(n, i)))
            .collect()
    }

    #[test]
    fn orthonormal_with_l1_norm() {
        for tree in [random_masses(5, 1), build_nondoubling_measure(6).unwrap()] {
            let sys = HaarSystem::new(tree.clone()).unwrap();
            let cells = all_internal(&tree);
            let hs: Vec<StepFunction> = cells.iter().map(|&r| sys.haar_function(r).unwrap()).collect();
            for (i, hi) in hs.iter().enumerate() {
                let l1 = lp(&tree, hi.values(), 1.0);
                assert!((l1 - 2.0 * sys.m(cells[i]).sqrt()).abs() < 1e-12);
                assert!(tree.averages(hi.values(), cells[i].level)[cells[i].index].abs() < 1e-12);
                for (j, hj) in hs.iter().enumerate() {
                    let ip = inner(&tree, hi.values(), hj.values());
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - expect).abs() < 1e-12, "{i} {j} {ip}");
                }
            }
        }
    }

    #[test]
    fn constants_vanish_and_root_example() {
        let t = uniform_dyadic(3).unwrap();
        let sys = HaarSystem::new(t.clone()).unwrap();
        let one = StepFunction::constant(t.clone(), 1.0);
        assert!(dyadic_hilbert(&sys, &one).unwrap().values().iter().all(|v| v.abs() < 1e-15));
        let h = sys.haar_function(CellRef::root()).unwrap();
        let got = dyadic_hilbert(&sys, &h).unwrap();
        let expect = sys
            .haar_function(CellRef::new(1, 0))
            .unwrap()
            .sub(&sys.haar_function(CellRef::new(1, 1)).unwrap())
            .unwrap();
        for (a, b) in got.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_dense_matrix() {
        let t = random_masses(4, 3);
        let sys = HaarSystem::new(t.clone()).unwrap();
        let n = t.leaf_count();
        // H_𝒟 as a kernel: Σ δ(I) h_I(x) h_Î(y) μ(y)
        let mut mat = vec![vec![0.0; n]; n];
        for lvl in 1..t.depth() {
            for i in 0..t.level_len(lvl) {
                let r = CellRef::new(lvl, i);
                let p = t.parent(r).unwrap();
                let hi = sys.haar_function(r).unwrap();
                let hp = sys.haar_function(p).unwrap();
                for x in 0..n {
                    for y in 0..n {
                        mat[x][y] += sys.delta(lvl, i) * hi.values()[x] * hp.values()[y] * t.leaf_masses()[y];
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let fast = sys.apply(&f);
        for x in 0..n {
            let dense: f64 = (0..n).map(|y| mat[x][y] * f[y]).sum();
            assert!((dense - fast[x]).abs() < 1e-12);
        }
    }

    #[test]
    fn adjointness() {
        let t = build_nondoubling_measure(8).unwrap();
        let sys = HaarSystem::new(t.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let f: Vec<f64> = (0..t.leaf_count()).map(|_| rng.sample(StandardNormal)).collect();
            let g: Vec<f64> = (0..t.leaf_count()).map(|_| rng.sample(StandardNormal)).collect();
            let lhs = inner(&t, &sys.apply(&f), &g);
            let rhs = inner(&t, &f, &sys.apply_adjoint(&g));
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn norm_at_most_two() {
        let t = build_nondoubling_measure(10).unwrap();
        let sys = HaarSystem::new(t.clone()).unwrap();
        let est = operator_norm_power_iteration(&t, |v| sys.apply(v), |v| sys.apply_adjoint(v), 200, 1);
        assert!(est <= 2.0 + 1e-9 && est > 1.0, "{est}");
    }

    #[test]
    fn jump_formula_and_commuting() {
        let t = build_nondoubling_measure(7).unwrap();
        let sys = HaarSystem::new(t.clone()).unwrap();
        for seed in 0..30u64 {
            let n = 1 + (seed as usize % 7);
            let cells: Vec<usize> = (0..t.level_len(n - 1)).collect();
            let w = random_atom(&t, n, &cells, AtomKind::Jump, seed, None).unwrap();
            let single = hilbert_on_jump(&sys, &w).unwrap();
            let full = dyadic_hilbert(&sys, &w.function).unwrap();
            for (a, b) in single.values().iter().zip(full.values()) {
                assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
            }
            // g 𝓕_{n−1}-measurable commutes with H_𝒟 on the jump
            let g_cells: Vec<f64> = (0..t.level_len(n - 1)).map(|i| (i as f64).sin() + 2.0).collect();
            let g = t.broadcast(n - 1, &g_cells);
            let ga: Vec<f64> = g.iter().zip(w.function.values()).map(|(x, y)| x * y).collect();
            let lhs = sys.apply(&ga);
            for ((l, gi), h) in lhs.iter().zip(&g).zip(full.values()) {
                assert!((l - gi * h).abs() < 1e-12 * (gi * h).abs().max(1.0));
            }
        }
    }

    #[test]
    fn atoms_keep_support() {
        let t = build_nondoubling_measure(8).unwrap();
        let sys = HaarSystem::new(t.clone()).unwrap();
        for seed in 0..20u64 {
            let n = seed as usize % 7;
            let i = seed as usize % t.level_len(n);
            let a = random_atom(&t, n, &[i], AtomKind::SimpleSInf, seed, None).unwrap();
            let h = sys.apply(a.function.values());
            let mask = a.support.leaf_mask(&t);
            let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(h.iter().zip(&mask).all(|(v, &inside)| inside || v.abs() <= 1e-12 * scale));
            let pa = a.support_mass();
            for p in [1.0, 2.0] {
                assert!(lp(&t, &h, p) <= 2.0 * pa.powf(1.0 / p - 1.0) * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn rejects_zero_mass_and_non_jump() {
        let t = build_pk_filtration(&[2, 2], PkMeasure::LeafMasses(vec![0.5, 0.0, 0.25, 0.25])).unwrap();
        assert!(matches!(HaarSystem::new(t), Err(Error::ZeroMass { .. })));
        let t = uniform_dyadic(4).unwrap();
        let sys = HaarSystem::new(t.clone()).unwrap();
        let a = random_atom(&t, 1, &[0], AtomKind::SimpleInf, 1, None).unwrap();
        assert!(hilbert_on_jump(&sys, &a).is_err());
    }
}
