use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filtration::FiltrationTree;
use crate::martingale::{doob_maximal, same_tree, Martingale, StepFunction};

const SYMBOL_TOL: f64 = 1e-12;

/// Predictable multipliers `ε_0, …, ε_{N−1}`; `ε_k` is constant on level-`k` cells.
#[derive(Clone, Debug)]
pub struct TransformSymbol {
    tree: Arc<FiltrationTree>,
    eps: Vec<Vec<f64>>,
}

impl TransformSymbol {
    pub fn new(tree: Arc<FiltrationTree>, eps: Vec<Vec<f64>>) -> Result<Self> {
        if eps.len() != tree.depth() {
            return Err(Error::LeafCount {
                expected: tree.depth(),
                got: eps.len(),
            });
        }
        for (k, e) in eps.iter().enumerate() {
            if e.len() != tree.level_len(k) {
                return Err(Error::LeafCount {
                    expected: tree.level_len(k),
                    got: e.len(),
                });
            }
            if let Some(v) = e.iter().find(|v| !(v.abs() <= 1.0 + SYMBOL_TOL)) {
                return Err(Error::SymbolBound(*v));
            }
        }
        Ok(TransformSymbol { tree, eps })
    }

    pub fn ones(tree: Arc<FiltrationTree>) -> Self {
        let eps = (0..tree.depth()).map(|k| vec![1.0; tree.level_len(k)]).collect();
        TransformSymbol { tree, eps }
    }

    /// Uniform multipliers in `[−1, 1]`.
    pub fn random(tree: Arc<FiltrationTree>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = (0..tree.depth())
            .map(|k| (0..tree.level_len(k)).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        TransformSymbol { tree, eps }
    }

    pub fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }

    /// `ε_k` on level-`k` cells.
    pub fn level(&self, k: usize) -> &[f64] {
        &self.eps[k]
    }
}

/// `T_ε f` with `d_k(T_ε f) = ε_{k−1} d_k f` and `d_0(T_ε f) = 0`.
pub fn martingale_transform(eps: &TransformSymbol, f: &Martingale) -> Result<Martingale> {
    same_tree(&eps.tree, f.tree())?;
    let tree = f.tree();
    let mut diffs = vec![vec![0.0]];
    for k in 1..=tree.depth() {
        let e = tree.refine(k - 1, &eps.eps[k - 1], k);
        diffs.push(f.difference(k).iter().zip(e).map(|(d, e)| d * e).collect());
    }
    Martingale::from_differences(tree.clone(), &diffs)
}

/// `sup_n |Σ_{k≤n} ε_{k−1} d_k f|`.
pub fn maximal_transform(eps: &TransformSymbol, f: &Martingale) -> Result<StepFunction> {
    Ok(doob_maximal(&martingale_transform(eps, f)?))
}

/// `I_α f = Σ_k β_{k−1}^α d_k f` where `β_k` is the mass of the level-`k`
/// cell and `β_{−1} = β_0 = 1`.
pub fn fractional_integral(alpha: f64, f: &Martingale) -> Result<Martingale> {
    fractional_integral_partial(alpha, f, f.depth())
}

/// The truncation `I_{α,n} f = Σ_{k≤n} β_{k−1}^α d_k f`.
pub fn fractional_integral_partial(alpha: f64, f: &Martingale, n: usize) -> Result<Martingale> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidExponent(alpha));
    }
    let tree = f.tree();
    tree.check_level(n)?;
    let mut diffs = vec![vec![f.initial()]];
    for k in 1..=tree.depth() {
        if k > n {
            diffs.push(vec![0.0; tree.level_len(k)]);
            continue;
        }
        let weights: Vec<f64> = tree.level(k - 1).iter().map(|c| c.mass.powf(alpha)).collect();
        let w = tree.refine(k - 1, &weights, k);
        diffs.push(f.difference(k).iter().zip(w).map(|(d, w)| d * w).collect());
    }
    Martingale::from_differences(tree.clone(), &diffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::{build_pk_filtration, uniform_dyadic, PkMeasure};
    use crate::martingale::{square_function, NormKind};
    use rand_distr::StandardNormal;

    fn random(tree: &Arc<FiltrationTree>, seed: u64) -> Martingale {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..tree.leaf_count()).map(|_| rng.sample(StandardNormal)).collect();
        Martingale::from_leaf_values(tree.clone(), v).unwrap()
    }

    #[test]
    fn unit_symbol_removes_initial_value() {
        let t = uniform_dyadic(5).unwrap();
        let f = random(&t, 1);
        let g = martingale_transform(&TransformSymbol::ones(t.clone()), &f).unwrap();
        for (a, b) in g.level(5).iter().zip(f.level(5)) {
            assert!((a - (b - f.initial())).abs() < 1e-13);
        }
    }

    #[test]
    fn symbol_bound_is_enforced() {
        let t = uniform_dyadic(1).unwrap();
        assert!(matches!(
            TransformSymbol::new(t.clone(), vec![vec![1.5]]),
            Err(Error::SymbolBound(_))
        ));
        assert!(TransformSymbol::new(t, vec![vec![-1.0]]).is_ok());
    }

    #[test]
    fn transform_shrinks_square_function() {
        let t = build_pk_filtration(&[2, 3, 2], PkMeasure::Uniform).unwrap();
        for seed in 0..20 {
            let f = random(&t, seed);
            let e = TransformSymbol::random(t.clone(), seed + 100);
            let g = martingale_transform(&e, &f).unwrap();
            let (sg, sf) = (square_function(&g), square_function(&f));
            assert!(sg.values().iter().zip(sf.values()).all(|(a, b)| *a <= b + 1e-12));
        }
    }

    #[test]
    fn fractional_integral_weights() {
        let t = uniform_dyadic(4).unwrap();
        let f = random(&t, 3);
        let same = fractional_integral(0.0, &f).unwrap();
        for (a, b) in same.level(4).iter().zip(f.level(4)) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(fractional_integral(-0.5, &f).is_err());
        // single difference at level k picks up 2^{-(k-1)α}
        for k in 1..=4 {
            let mut diffs: Vec<Vec<f64>> = (0..=4).map(|n| vec![0.0; t.level_len(n)]).collect();
            for (i, d) in diffs[k].iter_mut().enumerate() {
                *d = if i % 2 == 0 { 1.0 } else { -1.0 };
            }
            let g = Martingale::from_differences(t.clone(), &diffs).unwrap();
            let alpha = 0.5;
            let ig = fractional_integral(alpha, &g).unwrap();
            let w = 2f64.powf(-((k - 1) as f64) * alpha);
            for (a, b) in ig.level(4).iter().zip(g.level(4)) {
                assert!((a - w * b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn partial_fractional_integral_truncates() {
        let t = uniform_dyadic(4).unwrap();
        let f = random(&t, 4);
        let p = fractional_integral_partial(0.5, &f, 2).unwrap();
        let full = fractional_integral(0.5, &f).unwrap();
        assert_eq!(p.level(2), full.level(2));
        assert!(p.difference(3).iter().all(|&v| v == 0.0));
        let l1 = p.terminal().norm(NormKind::Lp(1.0)).unwrap();
        assert!(l1.is_finite());
    }
}
