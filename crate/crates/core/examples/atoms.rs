//! Atomic decomposition by stopping times, plus a check of the size bounds
//! of a few generated simple (s,∞)-atoms.

use martingale_products::decomp::{atomic_decompose, random_atom, verify_atom, AtomKind};
use martingale_products::filtration::uniform_dyadic;
use martingale_products::harness::random_martingale;
use martingale_products::{Martingale, Result};

fn main() -> Result<()> {
    let tree = uniform_dyadic(8)?;
    // the decomposition expects 𝔼f = 0
    let g = random_martingale(&tree, 3);
    let centred: Vec<f64> = g.terminal().values().iter().map(|v| v - g.initial()).collect();
    let f = Martingale::from_leaf_values(tree.clone(), centred)?;
    let atoms = atomic_decompose(&f)?;

    let mut sum = vec![0.0; tree.leaf_count()];
    for a in &atoms {
        for (s, v) in sum.iter_mut().zip(a.function.values()) {
            *s += a.coefficient * v;
        }
    }
    let err = sum
        .iter()
        .zip(f.terminal().values())
        .map(|(s, v)| (s - v).abs())
        .fold(0.0, f64::max);
    let mass: f64 = atoms.iter().map(|a| a.coefficient.abs()).sum();
    println!("{} atoms, Σ|μ_k| = {mass:.4}, reconstruction error {err:.2e}", atoms.len());

    for seed in 0..4 {
        let a = random_atom(&tree, 3, &[seed as usize], AtomKind::SimpleSInf, seed, None)?;
        let r = verify_atom(&a, None);
        println!("atom on cell {seed} of level 3: pass {} worst size ratio {:.4}", r.pass, r.max_ratio);
    }
    Ok(())
}
