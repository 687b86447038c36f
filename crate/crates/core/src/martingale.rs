//! Step functions, martingales and the maximal, square and Orlicz/BMO-type norms.

use std::f64::consts::{E, LN_2};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtration::FiltrationTree;

const MARTINGALE_TOL: f64 = 1e-12;

/// A function constant on the leaf cells of a tree.
#[derive(Clone, Debug)]
pub struct StepFunction {
    tree: Arc<FiltrationTree>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn new(tree: Arc<FiltrationTree>, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.leaf_count() {
            return Err(Error::LeafCount {
                expected: tree.leaf_count(),
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*v));
        }
        Ok(StepFunction { tree, values })
    }

    pub fn constant(tree: Arc<FiltrationTree>, c: f64) -> Self {
        let values = vec![c; tree.leaf_count()];
        StepFunction { tree, values }
    }

    pub fn zero(tree: Arc<FiltrationTree>) -> Self {
        Self::constant(tree, 0.0)
    }

    /// Indicator of a union of level-`n` cells.
    pub fn indicator(tree: Arc<FiltrationTree>, n: usize, cells: &[usize]) -> Result<Self> {
        tree.check_level(n)?;
        let mut values = vec![0.0; tree.leaf_count()];
        for &i in cells {
            if i >= tree.level_len(n) {
                return Err(Error::CellOutOfRange { level: n, index: i });
            }
            values[tree.level(n)[i].leaves.clone()].fill(1.0);
        }
        Ok(StepFunction { tree, values })
    }

    pub fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_tree(&self, other: &StepFunction) -> Result<()> {
        same_tree(&self.tree, &other.tree)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> StepFunction {
        StepFunction {
            tree: self.tree.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &StepFunction, f: impl Fn(f64, f64) -> f64) -> Result<StepFunction> {
        self.same_tree(other)?;
        Ok(StepFunction {
            tree: self.tree.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> StepFunction {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &StepFunction) -> Result<StepFunction> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn abs(&self) -> StepFunction {
        self.map(f64::abs)
    }

    /// `∫ f dμ`.
    pub fn integral(&self) -> f64 {
        integral(&self.tree, &self.values)
    }

    /// Max of `|f|` over positive-mass leaves.
    pub fn sup_norm(&self) -> f64 {
        sup_abs(&self.tree, &self.values)
    }

    /// 𝔼_n f.
    pub fn conditional(&self, n: usize) -> Result<StepFunction> {
        self.tree.check_level(n)?;
        let avg = self.tree.averages(&self.values, n);
        Ok(StepFunction {
            tree: self.tree.clone(),
            values: self.tree.broadcast(n, &avg),
        })
    }

    pub fn martingale(&self) -> Martingale {
        Martingale::from_terminal(self)
    }

    /// Any [`NormKind`]; martingale kinds use the martingale generated by `self`.
    pub fn norm(&self, kind: NormKind) -> Result<f64> {
        if kind.needs_martingale() {
            norm(&self.martingale(), kind)
        } else {
            leaf_norm(&self.tree, &self.values, kind)
        }
    }

    pub fn to_file(&self) -> StepFunctionFile {
        StepFunctionFile {
            tree_id: self.tree.id().to_string(),
            values: self.values.clone(),
        }
    }

    pub fn from_file(tree: Arc<FiltrationTree>, file: StepFunctionFile) -> Result<Self> {
        if file.tree_id != tree.id() {
            return Err(Error::TreeMismatch);
        }
        Self::new(tree, file.values)
    }
}

/// Serialized step function: leaf values plus the fingerprint of their tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFunctionFile {
    pub tree_id: String,
    pub values: Vec<f64>,
}

pub(crate) fn same_tree(a: &Arc<FiltrationTree>, b: &Arc<FiltrationTree>) -> Result<()> {
    if Arc::ptr_eq(a, b) || **a == **b {
        Ok(())
    } else {
        Err(Error::TreeMismatch)
    }
}

pub(crate) fn integral(tree: &FiltrationTree, values: &[f64]) -> f64 {
    values
        .iter()
        .zip(tree.leaf_masses())
        .map(|(v, m)| v * m)
        .sum()
}

pub(crate) fn sup_abs(tree: &FiltrationTree, values: &[f64]) -> f64 {
    values
        .iter()
        .zip(tree.leaf_masses())
        .filter(|(_, &m)| m > 0.0)
        .map(|(v, _)| v.abs())
        .fold(0.0, f64::max)
}

/// Martingale `(f_0, …, f_N)` stored as per-level cell values.
#[derive(Clone, Debug)]
pub struct Martingale {
    tree: Arc<FiltrationTree>,
    levels: Vec<Vec<f64>>,
}

impl Martingale {
    pub fn from_terminal(f: &StepFunction) -> Self {
        Martingale {
            tree: f.tree.clone(),
            levels: f.tree.all_averages(&f.values),
        }
    }

    pub fn from_leaf_values(tree: Arc<FiltrationTree>, values: Vec<f64>) -> Result<Self> {
        Ok(Self::from_terminal(&StepFunction::new(tree, values)?))
    }

    /// Checks adaptedness (shape) and `𝔼_n f_{n+1} = f_n` up to `1e-12` relative.
    pub fn from_levels(tree: Arc<FiltrationTree>, levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.len() != tree.depth() + 1 {
            return Err(Error::LevelOutOfRange {
                level: levels.len(),
                depth: tree.depth(),
            });
        }
        for (n, l) in levels.iter().enumerate() {
            if l.len() != tree.level_len(n) {
                return Err(Error::LeafCount {
                    expected: tree.level_len(n),
                    got: l.len(),
                });
            }
            if let Some(v) = l.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(*v));
            }
        }
        let scale = 1.0
            + levels
                .iter()
                .flatten()
                .fold(0.0f64, |a, v| a.max(v.abs()));
        for n in 0..tree.depth() {
            let coarse = tree.coarsen(n, &levels[n + 1]);
            for (i, (c, v)) in coarse.iter().zip(&levels[n]).enumerate() {
                if tree.level(n)[i].mass <= 0.0 {
                    continue;
                }
                let dev = (c - v).abs();
                if dev > MARTINGALE_TOL * scale {
                    return Err(Error::NotMartingale { level: n, deviation: dev });
                }
            }
        }
        Ok(Martingale { tree, levels })
    }

    /// Builds `f` from per-level cell differences; `diffs[n]` must have zero
    /// conditional mean on level `n−1` for `n ≥ 1`.
    pub fn from_differences(tree: Arc<FiltrationTree>, diffs: &[Vec<f64>]) -> Result<Self> {
        if diffs.len() != tree.depth() + 1 {
            return Err(Error::LevelOutOfRange {
                level: diffs.len(),
                depth: tree.depth(),
            });
        }
        let mut levels = Vec::with_capacity(diffs.len());
        let mut prev = vec![0.0];
        for (n, d) in diffs.iter().enumerate() {
            let base = if n == 0 { prev.clone() } else { tree.refine(n - 1, &prev, n) };
            if d.len() != base.len() {
                return Err(Error::LeafCount {
                    expected: base.len(),
                    got: d.len(),
                });
            }
            let cur: Vec<f64> = base.iter().zip(d).map(|(a, b)| a + b).collect();
            levels.push(cur.clone());
            prev = cur;
        }
        Self::from_levels(tree, levels)
    }

    pub fn zero(tree: Arc<FiltrationTree>) -> Self {
        let levels = (0..=tree.depth()).map(|n| vec![0.0; tree.level_len(n)]).collect();
        Martingale { tree, levels }
    }

    pub fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    /// Cell values of `f_n`.
    pub fn level(&self, n: usize) -> &[f64] {
        &self.levels[n]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    /// `f_n` at the leaves.
    pub fn value(&self, n: usize) -> Vec<f64> {
        self.tree.broadcast(n, &self.levels[n])
    }

    /// Cell values of `d_n f` on level `n`, with `f_{-1} = 0`.
    pub fn difference(&self, n: usize) -> Vec<f64> {
        if n == 0 {
            return self.levels[0].clone();
        }
        let prev = self.tree.refine(n - 1, &self.levels[n - 1], n);
        self.levels[n].iter().zip(prev).map(|(a, b)| a - b).collect()
    }

    /// `d_n f` at the leaves.
    pub fn difference_leaves(&self, n: usize) -> Vec<f64> {
        self.tree.broadcast(n, &self.difference(n))
    }

    pub fn differences(&self) -> Vec<Vec<f64>> {
        (0..=self.depth()).map(|n| self.difference(n)).collect()
    }

    pub fn terminal(&self) -> StepFunction {
        StepFunction {
            tree: self.tree.clone(),
            values: self.levels[self.depth()].clone(),
        }
    }

    pub fn initial(&self) -> f64 {
        self.levels[0][0]
    }

    pub fn add(&self, other: &Martingale) -> Result<Martingale> {
        same_tree(&self.tree, &other.tree)?;
        Ok(Martingale {
            tree: self.tree.clone(),
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Martingale {
        Martingale {
            tree: self.tree.clone(),
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().map(|v| c * v).collect())
                .collect(),
        }
    }
}

/// Doob maximal function `sup_n |f_n|`.
pub fn doob_maximal(f: &Martingale) -> StepFunction {
    let tree = f.tree();
    let mut out = vec![0.0f64; tree.leaf_count()];
    for n in 0..=f.depth() {
        for (cell, v) in tree.level(n).iter().zip(f.level(n)) {
            for o in &mut out[cell.leaves.clone()] {
                *o = o.max(v.abs());
            }
        }
    }
    StepFunction {
        tree: tree.clone(),
        values: out,
    }
}

/// Square function `(Σ_n |d_n f|²)^{1/2}`.
pub fn square_function(f: &Martingale) -> StepFunction {
    let tree = f.tree();
    let mut acc = vec![0.0; tree.leaf_count()];
    for n in 0..=f.depth() {
        for (cell, d) in tree.level(n).iter().zip(f.difference(n)) {
            for a in &mut acc[cell.leaves.clone()] {
                *a += d * d;
            }
        }
    }
    StepFunction {
        tree: tree.clone(),
        values: acc.into_iter().map(f64::sqrt).collect(),
    }
}

/// Conditional square function `(|d_0 f|² + Σ_{n≥1} 𝔼_{n−1}|d_n f|²)^{1/2}`.
pub fn cond_square_function(f: &Martingale) -> StepFunction {
    let tree = f.tree();
    let d0 = f.initial();
    let mut acc = vec![d0 * d0; tree.leaf_count()];
    for n in 1..=f.depth() {
        let sq: Vec<f64> = f.difference(n).iter().map(|d| d * d).collect();
        let cond = tree.coarsen(n - 1, &sq);
        for (cell, c) in tree.level(n - 1).iter().zip(cond) {
            for a in &mut acc[cell.leaves.clone()] {
                *a += c;
            }
        }
    }
    StepFunction {
        tree: tree.clone(),
        values: acc.into_iter().map(f64::sqrt).collect(),
    }
}

/// Norm selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormKind {
    /// `L^p`, `p ∈ [1, ∞]`.
    Lp(f64),
    /// Weak `L^{q,∞}`.
    WeakLq(f64),
    /// Luxemburg norm for `Φ(t) = t/log(e+t)`.
    Llog,
    /// Luxemburg norm for `e^t − 1`; nonnegative arguments only.
    ExpL,
    /// `‖S(f)‖_1`.
    H1,
    /// `‖s(f)‖_1`.
    H1Conditional,
    /// `Σ_n ‖d_n f‖_1`.
    H1Jump,
    /// `‖S(f)‖_{L^log}`.
    Hlog,
    /// `‖s(f)‖_{L^log}`.
    HlogConditional,
    /// `‖M(f)‖_{L^log}`.
    HlogMaximal,
    /// `sup_n ‖𝔼_n|f − f_{n−1}|^p‖_∞^{1/p}`.
    Bmo(f64),
    /// `sup_n ‖𝔼_n|f − f_n|^p‖_∞^{1/p}`.
    BmoConditional(f64),
    /// `sup_n ‖d_n f‖_∞`.
    BmoJump,
    /// Campanato-type norm with weight `φ(r) = 1/(rΦ⁻¹(1/r))`.
    BmoLog,
    /// `sup_Q avg_Q |f − f_Q|` over all cells.
    Osc,
}

impl NormKind {
    pub fn needs_martingale(self) -> bool {
        !matches!(
            self,
            NormKind::Lp(_) | NormKind::WeakLq(_) | NormKind::Llog | NormKind::ExpL | NormKind::Osc
        )
    }

    fn check(self) -> Result<()> {
        match self {
            NormKind::Lp(p) | NormKind::WeakLq(p) | NormKind::Bmo(p) | NormKind::BmoConditional(p)
                if p.is_nan() || p < 1.0 =>
            {
                Err(Error::InvalidExponent(p))
            }
            _ => Ok(()),
        }
    }
}

/// Evaluates `kind` on a martingale; function-space kinds act on its terminal value.
pub fn norm(f: &Martingale, kind: NormKind) -> Result<f64> {
    kind.check()?;
    let tree = f.tree();
    match kind {
        NormKind::Lp(_) | NormKind::WeakLq(_) | NormKind::Llog | NormKind::ExpL | NormKind::Osc => {
            leaf_norm(tree, f.level(f.depth()), kind)
        }
        NormKind::H1 => Ok(lp(tree, square_function(f).values(), 1.0)),
        NormKind::H1Conditional => Ok(lp(tree, cond_square_function(f).values(), 1.0)),
        NormKind::H1Jump => Ok((0..=f.depth())
            .map(|n| lp_cells(tree, n, &f.difference(n), 1.0))
            .sum()),
        NormKind::Hlog => luxemburg_log(tree, square_function(f).values()),
        NormKind::HlogConditional => luxemburg_log(tree, cond_square_function(f).values()),
        NormKind::HlogMaximal => luxemburg_log(tree, doob_maximal(f).values()),
        NormKind::Bmo(p) => Ok(bmo(tree, f.levels(), p, false)),
        NormKind::BmoConditional(p) => Ok(bmo(tree, f.levels(), p, true)),
        NormKind::BmoJump => Ok((0..=f.depth())
            .map(|n| sup_cells(tree, n, &f.difference(n)))
            .fold(0.0, f64::max)),
        NormKind::BmoLog => Ok(bmo_log(f)),
    }
}

fn leaf_norm(tree: &FiltrationTree, values: &[f64], kind: NormKind) -> Result<f64> {
    kind.check()?;
    match kind {
        NormKind::Lp(p) => Ok(lp(tree, values, p)),
        NormKind::WeakLq(q) => weak_lq(tree, values, q),
        NormKind::Llog => luxemburg_log(tree, values),
        NormKind::ExpL => luxemburg_exp(tree, values),
        NormKind::Osc => Ok(bmo(tree, &tree.all_averages(values), 1.0, true)),
        _ => unreachable!("martingale kinds are routed through `norm`"),
    }
}

/// `‖f‖_{L^p}` of leaf values; `p = ∞` gives the sup over positive-mass leaves.
pub fn lp(tree: &FiltrationTree, values: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return sup_abs(tree, values);
    }
    let s: f64 = values
        .iter()
        .zip(tree.leaf_masses())
        .map(|(v, m)| m * v.abs().powf(p))
        .sum();
    s.powf(1.0 / p)
}

fn lp_cells(tree: &FiltrationTree, n: usize, cells: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return sup_cells(tree, n, cells);
    }
    let s: f64 = tree
        .level(n)
        .iter()
        .zip(cells)
        .map(|(c, v)| c.mass * v.abs().powf(p))
        .sum();
    s.powf(1.0 / p)
}

fn sup_cells(tree: &FiltrationTree, n: usize, cells: &[f64]) -> f64 {
    tree.level(n)
        .iter()
        .zip(cells)
        .filter(|(c, _)| c.mass > 0.0)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

/// `sup_t t·ℙ(|f| > t)^{1/q}`, evaluated exactly at the left limits of the distinct levels of `|f|`.
pub fn weak_lq_norm(f: &StepFunction, q: f64) -> Result<f64> {
    weak_lq(&f.tree, &f.values, q)
}

pub(crate) fn weak_lq(tree: &FiltrationTree, values: &[f64], q: f64) -> Result<f64> {
    if q.is_nan() || q < 1.0 {
        return Err(Error::InvalidExponent(q));
    }
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(tree.leaf_masses())
        .filter(|(_, &m)| m > 0.0)
        .map(|(v, &m)| (v.abs(), m))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: f64 = 0.0;
    let mut tail = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            tail += pairs[i].1;
            i += 1;
        }
        if q.is_infinite() {
            best = best.max(v);
        } else {
            best = best.max(v * tail.powf(1.0 / q));
        }
    }
    Ok(best)
}

/// `Φ(t) = t/log(e+t)`.
pub fn phi_log(t: f64) -> f64 {
    t / (E + t).ln()
}

/// Inverse of [`phi_log`] on `[0, ∞)`.
pub fn phi_log_inverse(y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    // Φ(t) ≤ t and Φ(t) ≥ t/log(e+t) ≥ … so t ∈ [y, y·log(e + y)·2 + 1].
    let (mut lo, mut hi) = (y, 2.0 * y * (E + y).ln() + 1.0);
    while phi_log(hi) < y {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi_log(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Bisection for the least `λ` with `∫ F(|f|/λ) ≤ level`, starting from a valid upper bound.
fn luxemburg(
    tree: &FiltrationTree,
    values: &[f64],
    upper: f64,
    level: f64,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(tree.leaf_masses())
        .filter(|(v, &m)| m > 0.0 && **v != 0.0)
        .map(|(v, &m)| (v.abs(), m))
        .collect();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let modular = |lambda: f64| -> f64 { pairs.iter().map(|(v, m)| m * f(v / lambda)).sum() };
    if !upper.is_finite() || modular(upper) > level * (1.0 + 1e-12) {
        return Err(Error::Overflow);
    }
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if modular(mid) <= level {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(hi)
}

fn luxemburg_log(tree: &FiltrationTree, values: &[f64]) -> Result<f64> {
    // Φ(t) ≤ t, so λ = ‖f‖_1 already satisfies the modular bound.
    let upper = lp(tree, values, 1.0) + 1.0;
    luxemburg(tree, values, upper, 1.0, phi_log)
}

fn luxemburg_exp(tree: &FiltrationTree, values: &[f64]) -> Result<f64> {
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeArgument);
    }
    // 𝔼 exp(ψ/λ) ≤ exp(max ψ/λ) = 2 at λ = max ψ / ln 2.
    let upper = sup_abs(tree, values) / LN_2;
    if upper == 0.0 {
        return Ok(0.0);
    }
    luxemburg(tree, values, upper, 2.0, f64::exp)
}

/// `sup_n ‖𝔼_n|f − f_{n−1}|^p‖_∞^{1/p}` (or with `f_n` when `conditional`).
fn bmo(tree: &FiltrationTree, levels: &[Vec<f64>], p: f64, conditional: bool) -> f64 {
    let depth = tree.depth();
    let terminal = &levels[depth];
    let mut best: f64 = 0.0;
    for n in 0..=depth {
        let base = if conditional {
            Some(tree.broadcast(n, &levels[n]))
        } else if n > 0 {
            Some(tree.broadcast(n - 1, &levels[n - 1]))
        } else {
            None
        };
        let dev: Vec<f64> = match &base {
            Some(b) => terminal
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs().powf(p))
                .collect(),
            None => terminal.iter().map(|x| x.abs().powf(p)).collect(),
        };
        let avg = tree.averages(&dev, n);
        best = best.max(sup_cells(tree, n, &avg));
    }
    best.powf(1.0 / p)
}

fn bmo_log(f: &Martingale) -> f64 {
    let tree = f.tree();
    let terminal = f.level(f.depth());
    let mut best: f64 = 0.0;
    for n in 0..=f.depth() {
        let base = f.value(n);
        let dev: Vec<f64> = terminal
            .iter()
            .zip(&base)
            .map(|(x, y)| (x - y) * (x - y))
            .collect();
        let avg = tree.averages(&dev, n);
        for (cell, a) in tree.level(n).iter().zip(avg) {
            if cell.mass > 0.0 {
                // 1/φ(r) = r·Φ⁻¹(1/r)
                let inv_phi = cell.mass * phi_log_inverse(1.0 / cell.mass);
                best = best.max(a.sqrt() * inv_phi);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::{build_pk_filtration, uniform_dyadic, PkMeasure};
    use proptest::prelude::*;

    fn haar_root(depth: usize) -> StepFunction {
        let t = uniform_dyadic(depth).unwrap();
        let half = t.leaf_count() / 2;
        let v = (0..t.leaf_count()).map(|i| if i < half { 1.0 } else { -1.0 }).collect();
        StepFunction::new(t, v).unwrap()
    }

    #[test]
    fn maximal_and_square_of_single_difference() {
        let h = haar_root(2);
        let m = h.martingale();
        assert_eq!(m.initial(), 0.0);
        assert!(doob_maximal(&m).values().iter().all(|&v| v == 1.0));
        assert!(square_function(&m).values().iter().all(|&v| v == 1.0));
        assert!(cond_square_function(&m).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bmo_of_root_haar() {
        let m = haar_root(3).martingale();
        assert!((norm(&m, NormKind::Bmo(2.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((norm(&m, NormKind::BmoJump).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_has_zero_norm() {
        let t = uniform_dyadic(3).unwrap();
        let z = StepFunction::zero(t);
        for kind in [
            NormKind::Lp(1.0),
            NormKind::Lp(f64::INFINITY),
            NormKind::WeakLq(2.0),
            NormKind::Llog,
            NormKind::ExpL,
            NormKind::H1,
            NormKind::H1Conditional,
            NormKind::H1Jump,
            NormKind::Hlog,
            NormKind::HlogConditional,
            NormKind::HlogMaximal,
            NormKind::Bmo(2.0),
            NormKind::BmoConditional(1.0),
            NormKind::BmoJump,
            NormKind::BmoLog,
            NormKind::Osc,
        ] {
            assert_eq!(z.norm(kind).unwrap(), 0.0, "{kind:?}");
        }
    }

    #[test]
    fn exponent_errors() {
        let z = StepFunction::zero(uniform_dyadic(2).unwrap());
        assert!(matches!(z.norm(NormKind::Lp(0.5)), Err(Error::InvalidExponent(_))));
        assert!(matches!(weak_lq_norm(&z, 0.9), Err(Error::InvalidExponent(_))));
        let neg = z.map(|_| -1.0);
        assert!(matches!(neg.norm(NormKind::ExpL), Err(Error::NegativeArgument)));
    }

    #[test]
    fn exp_norm_of_constant() {
        let c = StepFunction::constant(uniform_dyadic(3).unwrap(), 1.7);
        let got = c.norm(NormKind::ExpL).unwrap();
        assert!((got - 1.7 / LN_2).abs() < 1e-10);
    }

    #[test]
    fn weak_norm_closed_forms() {
        let t = uniform_dyadic(3).unwrap();
        let ind = StepFunction::indicator(t.clone(), 3, &[0, 1, 5]).unwrap();
        assert!((weak_lq_norm(&ind, 2.0).unwrap() - (3.0f64 / 8.0).sqrt()).abs() < 1e-15);
        let two = ind.scale(4.0);
        assert!((weak_lq_norm(&two, 3.0).unwrap() - 4.0 * (3.0f64 / 8.0).cbrt()).abs() < 1e-14);
        // scan over thresholds below each value
        let f = StepFunction::new(t, vec![3.0, -1.0, 0.5, 2.0, 2.0, 0.0, -4.0, 1.0]).unwrap();
        let mut scan: f64 = 0.0;
        for k in 1..4000 {
            let s = k as f64 * 1e-3;
            let tail: f64 = f.values().iter().filter(|v| v.abs() > s).count() as f64 / 8.0;
            scan = scan.max(s * tail.powf(0.5));
        }
        let exact = weak_lq_norm(&f, 2.0).unwrap();
        assert!(exact >= scan && exact - scan < 1e-2);
    }

    #[test]
    fn conditional_square_on_nonuniform_tree() {
        let t = build_pk_filtration(&[2, 3], PkMeasure::LeafMasses(vec![0.1, 0.2, 0.05, 0.25, 0.3, 0.1]))
            .unwrap();
        let f = StepFunction::new(t.clone(), vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]).unwrap();
        let m = f.martingale();
        // L² identity: ‖f‖₂ = ‖S f‖₂ = ‖s f‖₂
        let l2 = f.norm(NormKind::Lp(2.0)).unwrap();
        assert!((lp(&t, square_function(&m).values(), 2.0) - l2).abs() < 1e-12);
        assert!((lp(&t, cond_square_function(&m).values(), 2.0) - l2).abs() < 1e-12);
    }

    #[test]
    fn from_levels_rejects_non_martingale() {
        let t = uniform_dyadic(1).unwrap();
        let bad = Martingale::from_levels(t.clone(), vec![vec![0.0], vec![1.0, 1.0]]);
        assert!(matches!(bad, Err(Error::NotMartingale { .. })));
        let ok = Martingale::from_differences(t, &[vec![0.5], vec![1.0, -1.0]]).unwrap();
        assert_eq!(ok.level(1), &[1.5, -0.5]);
    }

    #[test]
    fn bmo_log_is_finite_and_scales() {
        let m = haar_root(4).martingale();
        let a = norm(&m, NormKind::BmoLog).unwrap();
        let b = norm(&m.scale(3.0), NormKind::BmoLog).unwrap();
        assert!(a > 0.0 && (b - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn phi_inverse_round_trip() {
        for y in [1e-6, 0.3, 1.0, 7.5, 1e4] {
            assert!((phi_log(phi_log_inverse(y)) - y).abs() <= 1e-12 * y);
        }
    }

    fn arb_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, n)
    }

    proptest! {
        #[test]
        fn tower_property(vals in arb_values(16), m in 0usize..=4, n in 0usize..=4) {
            let t = uniform_dyadic(4).unwrap();
            let f = StepFunction::new(t, vals).unwrap();
            let lhs = f.conditional(n).unwrap().conditional(m).unwrap();
            let rhs = f.conditional(m.min(n)).unwrap();
            for (a, b) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn conditional_is_positive_l1_contraction(vals in prop::collection::vec(0.0f64..10.0, 16), n in 0usize..=4) {
            let t = uniform_dyadic(4).unwrap();
            let f = StepFunction::new(t, vals).unwrap();
            let e = f.conditional(n).unwrap();
            prop_assert!(e.values().iter().all(|&v| v >= 0.0));
            prop_assert!(e.norm(NormKind::Lp(1.0)).unwrap() <= f.norm(NormKind::Lp(1.0)).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn llog_below_l1_and_luxemburg_tight(vals in arb_values(16)) {
            let f = StepFunction::new(uniform_dyadic(4).unwrap(), vals).unwrap();
            let l1 = f.norm(NormKind::Lp(1.0)).unwrap();
            let ll = f.norm(NormKind::Llog).unwrap();
            prop_assert!(ll <= l1 * (1.0 + 1e-12));
            if ll > 0.0 {
                let modular: f64 = f.values().iter().map(|v| phi_log(v.abs() / ll)).sum::<f64>() / 16.0;
                prop_assert!((1.0 - 1e-8..=1.0 + 1e-12).contains(&modular));
            }
        }

        #[test]
        fn weak_below_strong(vals in arb_values(16), q in 1.0f64..4.0) {
            let f = StepFunction::new(uniform_dyadic(4).unwrap(), vals).unwrap();
            prop_assert!(weak_lq_norm(&f, q).unwrap() <= f.norm(NormKind::Lp(q)).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn bmo_orderings(vals in arb_values(32)) {
            let m = StepFunction::new(uniform_dyadic(5).unwrap(), vals).unwrap().martingale();
            let big = norm(&m, NormKind::Bmo(2.0)).unwrap();
            let small = norm(&m, NormKind::BmoConditional(2.0)).unwrap();
            let jump = norm(&m, NormKind::BmoJump).unwrap();
            prop_assert!(small <= big * (1.0 + 1e-12));
            prop_assert!(jump <= big * (1.0 + 1e-12));
            // BMO₂² ≤ bmo₂² + bmoᵈ²
            prop_assert!(big * big <= (small * small + jump * jump) * (1.0 + 1e-12));
        }

        #[test]
        fn generalized_holder(i in 0usize..200, j in 0usize..200) {
            let s = 10f64.powf(-3.0 + 6.0 * i as f64 / 199.0);
            let t = 10f64.powf(-3.0 + 6.0 * j as f64 / 199.0);
            prop_assert!(phi_log(s * t) <= t + s.exp());
        }
    }
}
