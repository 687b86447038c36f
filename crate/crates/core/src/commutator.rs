//! Commutators `[T,b]`, the bilinear operator `U`, the `H₁ᵇ` norm and the
//! constant estimates that place an operator in the class `𝒦_q`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::{product_decompose, random_atom, AtomKind};
use crate::error::{Error, Result};
use crate::filtration::{build_nondoubling_measure, build_pk_filtration, uniform_dyadic, FiltrationTree, PkMeasure};
use crate::harness::{derive_seed, generate_bmo, random_martingale, BmoProfile, VerificationRecord};
use crate::martingale::{lp, norm, same_tree, weak_lq, NormKind, StepFunction};
use crate::operators::{HaarSystem, TransformSymbol, WalshContext};

/// Branching sequence of the unbounded-branching tree used for `I_α`.
pub const FRACTIONAL_BRANCHING: [usize; 8] = [2, 3, 2, 4, 2, 5, 2, 6];

/// A sublinear operator acting on leaf values of a fixed tree.
///
/// `twisted(u, v, w)` evaluates `x ↦ T(u − w(x)v)(x)`, which is what the
/// commutator and `U` need; every implementation does this in a single pass
/// rather than with one application per leaf.
pub trait SublinearOp: Send + Sync {
    fn name(&self) -> &str;
    /// Target exponent of the `𝒦_q` estimates.
    fn q(&self) -> f64;
    fn is_linear(&self) -> bool;
    fn tree(&self) -> &Arc<FiltrationTree>;
    fn apply_values(&self, f: &[f64]) -> Vec<f64>;
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64>;

    /// Whether `T(c·a) = c·T(a)` (or `|c|·T(a)` for positive `T`) whenever `c`
    /// is `𝓕_{n−1}`-measurable and `a` has no differences below level `n`.
    fn commutes_with_predictable(&self) -> bool {
        true
    }

    fn apply(&self, f: &StepFunction) -> Result<StepFunction> {
        same_tree(self.tree(), f.tree())?;
        StepFunction::new(self.tree().clone(), self.apply_values(f.values()))
    }
}

fn linear_twisted(op: &(impl SublinearOp + ?Sized), u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
    let tu = op.apply_values(u);
    let tv = op.apply_values(v);
    tu.iter().zip(tv).zip(w).map(|((a, b), c)| a - c * b).collect()
}

/// `d_0, …, d_N` of the martingale generated by `v`, each at leaf resolution.
fn leaf_differences(tree: &FiltrationTree, v: &[f64]) -> Vec<Vec<f64>> {
    let avgs = tree.all_averages(v);
    let mut prev = vec![0.0; tree.leaf_count()];
    avgs.iter()
        .enumerate()
        .map(|(n, a)| {
            let cur = tree.broadcast(n, a);
            let d = cur.iter().zip(&prev).map(|(x, y)| x - y).collect();
            prev = cur;
            d
        })
        .collect()
}

/// Leaf-resolution weights of a predictable multiplier, `weights[k]` acting on `d_k`.
fn leaf_weights(tree: &FiltrationTree, per_level: impl Fn(usize) -> Vec<f64>) -> Vec<Vec<f64>> {
    let depth = tree.depth();
    (0..=depth)
        .map(|k| {
            let w = per_level(k);
            if w.len() == 1 {
                vec![w[0]; tree.leaf_count()]
            } else {
                tree.refine(k - 1, &w, depth)
            }
        })
        .collect()
}

/// `x ↦ max_n |Σ_{k≤n} c_k(x)(d_k u(x) − w(x) d_k v(x))|`.
fn weighted_maximal(tree: &FiltrationTree, weights: Option<&[Vec<f64>]>, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
    let du = leaf_differences(tree, u);
    let dv = leaf_differences(tree, v);
    let mut run = vec![0.0; tree.leaf_count()];
    let mut best = vec![0.0f64; tree.leaf_count()];
    for k in 0..du.len() {
        for x in 0..run.len() {
            let c = weights.map_or(1.0, |ws| ws[k][x]);
            run[x] += c * (du[k][x] - w[x] * dv[k][x]);
            best[x] = best[x].max(run[x].abs());
        }
    }
    best
}

/// `x ↦ Σ_k c_k(x) d_k u(x)`.
fn weighted_sum(tree: &FiltrationTree, weights: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    let du = leaf_differences(tree, u);
    let mut out = vec![0.0; tree.leaf_count()];
    for (d, c) in du.iter().zip(weights) {
        for ((o, d), c) in out.iter_mut().zip(d).zip(c) {
            *o += c * d;
        }
    }
    out
}

/// Doob's maximal operator `M`.
#[derive(Clone, Debug)]
pub struct DoobMaximal {
    tree: Arc<FiltrationTree>,
}

impl DoobMaximal {
    pub fn new(tree: Arc<FiltrationTree>) -> Self {
        DoobMaximal { tree }
    }
}

impl SublinearOp for DoobMaximal {
    fn name(&self) -> &str {
        "maximal"
    }
    fn q(&self) -> f64 {
        1.0
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }
    fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        let zero = vec![0.0; f.len()];
        self.twisted(f, &zero, &zero)
    }
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        weighted_maximal(&self.tree, None, u, v, w)
    }
}

/// The square function `S`.
#[derive(Clone, Debug)]
pub struct SquareFunction {
    tree: Arc<FiltrationTree>,
}

impl SquareFunction {
    pub fn new(tree: Arc<FiltrationTree>) -> Self {
        SquareFunction { tree }
    }
}

impl SublinearOp for SquareFunction {
    fn name(&self) -> &str {
        "square"
    }
    fn q(&self) -> f64 {
        1.0
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }
    fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        let zero = vec![0.0; f.len()];
        self.twisted(f, &zero, &zero)
    }
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        let du = leaf_differences(&self.tree, u);
        let dv = leaf_differences(&self.tree, v);
        let mut acc = vec![0.0; u.len()];
        for (a, b) in du.iter().zip(&dv) {
            for x in 0..acc.len() {
                let t = a[x] - w[x] * b[x];
                acc[x] += t * t;
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }
}

/// The martingale transform `T_ε`, or its maximal version `M∘T_ε`.
#[derive(Clone, Debug)]
pub struct Transform {
    tree: Arc<FiltrationTree>,
    weights: Vec<Vec<f64>>,
    maximal: bool,
}

impl Transform {
    pub fn new(symbol: &TransformSymbol) -> Self {
        Self::build(symbol, false)
    }

    pub fn maximal(symbol: &TransformSymbol) -> Self {
        Self::build(symbol, true)
    }

    fn build(symbol: &TransformSymbol, maximal: bool) -> Self {
        let tree = symbol.tree().clone();
        let weights = leaf_weights(&tree, |k| if k == 0 { vec![0.0] } else { symbol.level(k - 1).to_vec() });
        Transform { tree, weights, maximal }
    }
}

impl SublinearOp for Transform {
    fn name(&self) -> &str {
        if self.maximal {
            "maximal-transform"
        } else {
            "transform"
        }
    }
    fn q(&self) -> f64 {
        1.0
    }
    fn is_linear(&self) -> bool {
        !self.maximal
    }
    fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }
    fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        if self.maximal {
            let zero = vec![0.0; f.len()];
            weighted_maximal(&self.tree, Some(&self.weights), f, &zero, &zero)
        } else {
            weighted_sum(&self.tree, &self.weights, f)
        }
    }
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        if self.maximal {
            weighted_maximal(&self.tree, Some(&self.weights), u, v, w)
        } else {
            linear_twisted(self, u, v, w)
        }
    }
}

/// The fractional integral `I_α`, bounded into `L^q` with `q = 1/(1−α)`.
#[derive(Clone, Debug)]
pub struct FractionalIntegral {
    tree: Arc<FiltrationTree>,
    alpha: f64,
    weights: Vec<Vec<f64>>,
}

impl FractionalIntegral {
    pub fn new(tree: Arc<FiltrationTree>, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidExponent(alpha));
        }
        let weights = leaf_weights(&tree, |k| {
            if k == 0 {
                vec![1.0]
            } else {
                tree.level(k - 1).iter().map(|c| c.mass.powf(alpha)).collect()
            }
        });
        Ok(FractionalIntegral { tree, alpha, weights })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl SublinearOp for FractionalIntegral {
    fn name(&self) -> &str {
        "fractional"
    }
    fn q(&self) -> f64 {
        1.0 / (1.0 - self.alpha)
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }
    fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        weighted_sum(&self.tree, &self.weights, f)
    }
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        linear_twisted(self, u, v, w)
    }
}

/// The dyadic Hilbert transform `H_𝒟`.
#[derive(Clone, Debug)]
pub struct DyadicHilbert {
    sys: HaarSystem,
}

impl DyadicHilbert {
    pub fn new(tree: Arc<FiltrationTree>) -> Result<Self> {
        Ok(DyadicHilbert { sys: HaarSystem::new(tree)? })
    }
}

impl SublinearOp for DyadicHilbert {
    fn name(&self) -> &str {
        "hilbert"
    }
    fn q(&self) -> f64 {
        1.0
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn tree(&self) -> &Arc<FiltrationTree> {
        self.sys.tree()
    }
    fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        self.sys.apply(f)
    }
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        linear_twisted(self, u, v, w)
    }
}

/// The Walsh–Cesàro maximal operator `σ`.
#[derive(Clone, Debug)]
pub struct CesaroMaximal {
    ctx: WalshContext,
}

impl CesaroMaximal {
    pub fn new(tree: Arc<FiltrationTree>) -> Result<Self> {
        Ok(CesaroMaximal { ctx: WalshContext::from_tree(tree)? })
    }

    pub fn context(&self) -> &WalshContext {
        &self.ctx
    }
}

impl SublinearOp for CesaroMaximal {
    fn name(&self) -> &str {
        "cesaro"
    }
    fn q(&self) -> f64 {
        1.0
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn tree(&self) -> &Arc<FiltrationTree> {
        self.ctx.tree()
    }
    fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        let zero = vec![0.0; f.len()];
        self.ctx.cesaro_twisted(f, &zero, &zero)
    }
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        self.ctx.cesaro_twisted(u, v, w)
    }
    fn commutes_with_predictable(&self) -> bool {
        false
    }
}

/// The conditional expectation `𝔼_n` as a linear operator.
#[derive(Clone, Debug)]
pub struct Conditional {
    tree: Arc<FiltrationTree>,
    level: usize,
}

impl Conditional {
    pub fn new(tree: Arc<FiltrationTree>, level: usize) -> Result<Self> {
        tree.check_level(level)?;
        Ok(Conditional { tree, level })
    }
}

impl SublinearOp for Conditional {
    fn name(&self) -> &str {
        "conditional"
    }
    fn q(&self) -> f64 {
        1.0
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }
    fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        self.tree.broadcast(self.level, &self.tree.averages(f, self.level))
    }
    fn twisted(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        linear_twisted(self, u, v, w)
    }
}

/// The operators covered by the certification suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Maximal,
    Square,
    Transform,
    MaximalTransform,
    Hilbert,
    Cesaro,
    Fractional,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Maximal,
        OpKind::Square,
        OpKind::Transform,
        OpKind::MaximalTransform,
        OpKind::Hilbert,
        OpKind::Cesaro,
        OpKind::Fractional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Maximal => "maximal",
            OpKind::Square => "square",
            OpKind::Transform => "transform",
            OpKind::MaximalTransform => "maximal-transform",
            OpKind::Hilbert => "hilbert",
            OpKind::Cesaro => "cesaro",
            OpKind::Fractional => "fractional",
        }
    }

    /// `q` of the operator as built by [`OpKind::build`] (`α = 1/2` for `I_α`).
    pub fn default_q(self) -> f64 {
        match self {
            OpKind::Fractional => 2.0,
            _ => 1.0,
        }
    }

    /// The tree family each operator is studied on: dyadic Lebesgue for the
    /// martingale operators and `σ`, the non-doubling measure for `H_𝒟`, and
    /// the unbounded-branching tree (depth at most 8) for `I_α`.
    pub fn tree(self, depth: usize) -> Result<Arc<FiltrationTree>> {
        match self {
            OpKind::Hilbert => build_nondoubling_measure(depth),
            OpKind::Fractional => {
                if depth > FRACTIONAL_BRANCHING.len() {
                    return Err(Error::LevelOutOfRange {
                        level: depth,
                        depth: FRACTIONAL_BRANCHING.len(),
                    });
                }
                build_pk_filtration(&FRACTIONAL_BRANCHING[..depth], PkMeasure::Uniform)
            }
            _ => uniform_dyadic(depth),
        }
    }

    /// Builds the operator on `tree`; `seed` draws the symbol of `T_ε`.
    pub fn build(self, tree: Arc<FiltrationTree>, seed: u64) -> Result<Box<dyn SublinearOp>> {
        Ok(match self {
            OpKind::Maximal => Box::new(DoobMaximal::new(tree)),
            OpKind::Square => Box::new(SquareFunction::new(tree)),
            OpKind::Transform => Box::new(Transform::new(&TransformSymbol::random(tree, seed))),
            OpKind::MaximalTransform => Box::new(Transform::maximal(&TransformSymbol::random(tree, seed))),
            OpKind::Hilbert => Box::new(DyadicHilbert::new(tree)?),
            OpKind::Cesaro => Box::new(CesaroMaximal::new(tree)?),
            OpKind::Fractional => Box::new(FractionalIntegral::new(tree, 0.5)?),
        })
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "maximal" | "m" | "doob" => OpKind::Maximal,
            "square" | "s" => OpKind::Square,
            "transform" | "t_eps" | "t-eps" => OpKind::Transform,
            "maximal-transform" | "m_t_eps" | "m-t-eps" => OpKind::MaximalTransform,
            "hilbert" | "h_d" | "h-d" => OpKind::Hilbert,
            "cesaro" | "sigma" => OpKind::Cesaro,
            "fractional" | "i_alpha" | "i-alpha" => OpKind::Fractional,
            _ => return Err(Error::UnknownOperator(s.to_string())),
        })
    }
}

fn check_trees(op: &(impl SublinearOp + ?Sized), fs: &[&StepFunction]) -> Result<()> {
    for f in fs {
        same_tree(op.tree(), f.tree())?;
    }
    Ok(())
}

/// `[T,b](f)(x) = T(bf − b(x)f)(x)`.
pub fn commutator_apply(op: &(impl SublinearOp + ?Sized), b: &StepFunction, f: &StepFunction) -> Result<StepFunction> {
    check_trees(op, &[b, f])?;
    let bf = b.mul(f)?;
    StepFunction::new(op.tree().clone(), op.twisted(bf.values(), f.values(), b.values()))
}

/// `[T,b](f)` by one application of `T` per leaf; the reference evaluation.
pub fn commutator_apply_direct(op: &(impl SublinearOp + ?Sized), b: &StepFunction, f: &StepFunction) -> Result<StepFunction> {
    check_trees(op, &[b, f])?;
    let (bv, fv) = (b.values(), f.values());
    let out = (0..fv.len())
        .into_par_iter()
        .map(|x| {
            let g: Vec<f64> = bv.iter().zip(fv).map(|(b, f)| (b - bv[x]) * f).collect();
            op.apply_values(&g)[x]
        })
        .collect();
    StepFunction::new(op.tree().clone(), out)
}

/// `U(f,b)(x) = T(Π₂(f,b) − b(x)f)(x)`.
pub fn operator_u(op: &(impl SublinearOp + ?Sized), f: &StepFunction, b: &StepFunction) -> Result<StepFunction> {
    check_trees(op, &[b, f])?;
    let d = product_decompose(&f.martingale(), &b.martingale())?;
    let pi2 = d.pi2.terminal();
    StepFunction::new(op.tree().clone(), op.twisted(pi2.values(), f.values(), b.values()))
}

/// `U(f,b)` by one application of `T` per leaf.
pub fn operator_u_direct(op: &(impl SublinearOp + ?Sized), f: &StepFunction, b: &StepFunction) -> Result<StepFunction> {
    check_trees(op, &[b, f])?;
    let d = product_decompose(&f.martingale(), &b.martingale())?;
    let pi2 = d.pi2.terminal().into_values();
    let (bv, fv) = (b.values(), f.values());
    let out = (0..fv.len())
        .into_par_iter()
        .map(|x| {
            let g: Vec<f64> = pi2.iter().zip(fv).map(|(p, f)| p - bv[x] * f).collect();
            op.apply_values(&g)[x]
        })
        .collect();
    StepFunction::new(op.tree().clone(), out)
}

/// Pointwise comparison of `|[T,b]f|` with `R = |U| + |T(Π₁)|` and `|T(L)|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    /// `max_x (|[T,b]f| − R − |T(L)|)₊ / scale`.
    pub upper_violation: f64,
    /// `max_x (|T(L)| − R − |[T,b]f|)₊ / scale`.
    pub lower_violation: f64,
    /// For linear `T`, `max_x |[T,b]f − T(L) − T(Π₁) − U| / scale`.
    pub linear_residual: Option<f64>,
    /// `max_x (R + |T(L)| + |[T,b]f|)`.
    pub scale: f64,
}

pub fn sandwich_check(op: &(impl SublinearOp + ?Sized), f: &StepFunction, b: &StepFunction) -> Result<SandwichReport> {
    check_trees(op, &[b, f])?;
    let d = product_decompose(&f.martingale(), &b.martingale())?;
    let bf = b.mul(f)?;
    let c = op.twisted(bf.values(), f.values(), b.values());
    let u = op.twisted(d.pi2.terminal().values(), f.values(), b.values());
    let tp1 = op.apply_values(d.pi1.terminal().values());
    let tl = op.apply_values(d.l.terminal().values());
    let mut scale: f64 = 0.0;
    for x in 0..c.len() {
        scale = scale.max(u[x].abs() + tp1[x].abs() + tl[x].abs() + c[x].abs());
    }
    let denom = if scale > 0.0 { scale } else { 1.0 };
    let (mut up, mut low, mut res) = (0.0f64, 0.0f64, 0.0f64);
    for x in 0..c.len() {
        let r = u[x].abs() + tp1[x].abs();
        up = up.max(c[x].abs() - r - tl[x].abs());
        low = low.max(tl[x].abs() - r - c[x].abs());
        res = res.max((c[x] - tl[x] - tp1[x] - u[x]).abs());
    }
    Ok(SandwichReport {
        upper_violation: up.max(0.0) / denom,
        lower_violation: low.max(0.0) / denom,
        linear_residual: op.is_linear().then_some(res / denom),
        scale,
    })
}

/// `‖f‖_{H₁}‖b‖_{BMO₂} + ‖sup_n |𝔼_n(bf) − b𝔼_n f|‖_1`.
pub fn h1b_norm(b: &StepFunction, f: &StepFunction) -> Result<f64> {
    b.same_tree(f)?;
    let tree = b.tree();
    let fm = f.martingale();
    let h1 = norm(&fm, NormKind::H1)?;
    let bmo = norm(&b.martingale(), NormKind::Bmo(2.0))?;
    let bf = b.mul(f)?;
    let sup = weighted_maximal(tree, None, bf.values(), f.values(), b.values());
    Ok(h1 * bmo + lp(tree, &sup, 1.0))
}

/// `‖f‖_{H₁}‖b‖_{BMO₂} + ‖L(f,b)‖_{H₁}`, the equivalent norm through the
/// bounded-variation part of the product.
pub fn h1b_norm_via_variation(b: &StepFunction, f: &StepFunction) -> Result<f64> {
    b.same_tree(f)?;
    let fm = f.martingale();
    let d = product_decompose(&fm, &b.martingale())?;
    let h1 = norm(&fm, NormKind::H1)?;
    let bmo = norm(&b.martingale(), NormKind::Bmo(2.0))?;
    Ok(h1 * bmo + norm(&d.l.terminal().martingale(), NormKind::H1)?)
}

fn is_constant(b: &StepFunction) -> bool {
    let v = b.values();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    let big = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    hi - lo < 1e-12 * (1.0 + big)
}

/// The six constants estimated for membership in `𝒦_q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KqConstant {
    /// `‖T f‖_q / ‖f‖_{H₁}`.
    HardyToLq,
    /// `‖T f‖_{q,∞} / ‖f‖_1`.
    L1ToWeakLq,
    /// `‖(b − b_{n−1})T(a)‖_q / ‖b‖_{BMO₂}` on simple `(s,∞)`-atoms.
    AtomOscillation,
    /// `‖[T, b_{n−1}](a)‖_q / ‖b‖_{BMO₂}` on simple `(s,∞)`-atoms.
    AtomCommutator,
    /// `‖(b − b_{n−1})T(g)‖_q / (‖g‖_1‖b‖_{BMO₂})` on jumps.
    JumpOscillation,
    /// `‖[T, b_{n−1}](g)‖_q / (‖g‖_1‖b‖_{BMO₂})` on jumps.
    JumpCommutator,
}

impl KqConstant {
    pub const ALL: [KqConstant; 6] = [
        KqConstant::HardyToLq,
        KqConstant::L1ToWeakLq,
        KqConstant::AtomOscillation,
        KqConstant::AtomCommutator,
        KqConstant::JumpOscillation,
        KqConstant::JumpCommutator,
    ];

    /// The four estimates on atoms and jumps.
    pub const LOCAL: [KqConstant; 4] = [
        KqConstant::AtomOscillation,
        KqConstant::AtomCommutator,
        KqConstant::JumpOscillation,
        KqConstant::JumpCommutator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KqConstant::HardyToLq => "hardy-to-lq",
            KqConstant::L1ToWeakLq => "l1-to-weak-lq",
            KqConstant::AtomOscillation => "atom-oscillation",
            KqConstant::AtomCommutator => "atom-commutator",
            KqConstant::JumpOscillation => "jump-oscillation",
            KqConstant::JumpCommutator => "jump-commutator",
        }
    }
}

/// Largest ratio observed for one constant at one depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KqEstimate {
    pub constant: KqConstant,
    pub value: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// Seed of the sample attaining `value`.
    pub witness_seed: u64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KqRow {
    pub depth: usize,
    pub tree_id: String,
    pub estimates: Vec<KqEstimate>,
    /// Largest relative defect of the commuting identity, when `T` commutes.
    pub shortcut_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KqCertificate {
    pub op: String,
    pub q: f64,
    pub seed: u64,
    pub rows: Vec<KqRow>,
}

/// Values below this are treated as exact zeros by the stability reading.
pub const NEGLIGIBLE: f64 = 1e-9;

/// `max/min` over depths, with the convention that values all below
/// [`NEGLIGIBLE`] are perfectly stable.
pub fn spread(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(0.0, f64::max);
    if !hi.is_finite() || values.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    if hi < NEGLIGIBLE {
        return 1.0;
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo < NEGLIGIBLE {
        f64::INFINITY
    } else {
        hi / lo
    }
}

impl KqCertificate {
    pub fn estimate(&self, depth: usize, c: KqConstant) -> Option<&KqEstimate> {
        self.rows
            .iter()
            .find(|r| r.depth == depth)?
            .estimates
            .iter()
            .find(|e| e.constant == c)
    }

    /// Per-depth values of one constant.
    pub fn values(&self, c: KqConstant) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.estimates.iter().find(|e| e.constant == c).map(|e| e.value))
            .collect()
    }

    /// Largest value of `c` over all depths.
    pub fn constant(&self, c: KqConstant) -> f64 {
        self.values(c).into_iter().fold(0.0, f64::max)
    }

    pub fn spread(&self, c: KqConstant) -> f64 {
        spread(&self.values(c))
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().flat_map(|r| &r.estimates).all(|e| e.value.is_finite())
    }

    pub fn max_shortcut_error(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.shortcut_error)
            .fold(None, |m, e| Some(m.map_or(e, |m: f64| m.max(e))))
    }
}

/// Sampling plan for [`kq_certify`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KqCorpus {
    pub depths: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    pub profiles: Vec<BmoProfile>,
}

impl Default for KqCorpus {
    fn default() -> Self {
        KqCorpus {
            depths: vec![6, 8, 10, 12],
            samples: 200,
            seed: 0,
            profiles: BmoProfile::ALL.to_vec(),
        }
    }
}

/// Picks a level-`n` cell of positive mass.
fn random_cell(tree: &FiltrationTree, n: usize, rng: &mut impl Rng) -> Option<usize> {
    let live: Vec<usize> = (0..tree.level_len(n)).filter(|&i| tree.level(n)[i].mass > 0.0).collect();
    (!live.is_empty()).then(|| live[rng.random_range(0..live.len())])
}

/// Draws an atom (`jump = false`, level in `0..N`) or a jump (level in
/// `1..=N`), retrying cells that admit no mean-zero function.
fn random_local(tree: &Arc<FiltrationTree>, kind: AtomKind, seed: u64, b: Option<&StepFunction>) -> Option<(usize, StepFunction)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = tree.depth();
    for _ in 0..32 {
        let n = if kind == AtomKind::Jump {
            rng.random_range(1..=depth)
        } else {
            rng.random_range(0..depth)
        };
        let cell_level = if kind == AtomKind::Jump { n - 1 } else { n };
        let Some(cell) = random_cell(tree, cell_level, &mut rng) else { continue };
        if let Ok(c) = random_atom(tree, n, &[cell], kind, rng.random(), b) {
            return Some((n, c.function));
        }
    }
    None
}

/// `b_{n−1}` at leaf resolution, with `b_{−1} = 0`.
fn predictable_part(b: &StepFunction, n: usize) -> Vec<f64> {
    let tree = b.tree();
    if n == 0 {
        vec![0.0; tree.leaf_count()]
    } else {
        tree.broadcast(n - 1, &tree.averages(b.values(), n - 1))
    }
}

struct LocalOutcome {
    oscillation: (f64, f64),
    commutator: (f64, f64),
    shortcut: Option<f64>,
}

/// `(b − b_{n−1})T(a)` and `[T, b_{n−1}](a)` for one atom or jump `a` at level `n`.
fn local_estimates(op: &dyn SublinearOp, q: f64, b: &StepFunction, bmo: f64, n: usize, a: &StepFunction) -> LocalOutcome {
    let tree = op.tree();
    let bp = predictable_part(b, n);
    let ta = op.apply_values(a.values());
    let osc: Vec<f64> = b.values().iter().zip(&bp).zip(&ta).map(|((b, c), t)| (b - c) * t).collect();
    let bpa: Vec<f64> = bp.iter().zip(a.values()).map(|(c, a)| c * a).collect();
    let comm = op.twisted(&bpa, a.values(), &bp);
    let shortcut = op.commutes_with_predictable().then(|| {
        let lhs = op.apply_values(&bpa);
        let positive = !op.is_linear();
        // Relative to ‖b_{n−1}‖∞·max(‖T(a)‖∞, ‖a‖∞): T(a) itself may vanish
        // up to rounding (a jump at the last level has H_𝒟 a = 0).
        let bsup = bp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tsup = ta.iter().chain(a.values()).fold(0.0f64, |m, v| m.max(v.abs()));
        let mut err: f64 = 0.0;
        for x in 0..lhs.len() {
            let c = if positive { bp[x].abs() } else { bp[x] };
            err = err.max((lhs[x] - c * ta[x]).abs());
        }
        let scale = bsup * tsup;
        if scale > 0.0 {
            err / scale
        } else {
            err
        }
    });
    LocalOutcome {
        oscillation: (lp(tree, &osc, q), bmo),
        commutator: (lp(tree, &comm, q), bmo),
        shortcut,
    }
}

/// Estimates every constant of the `𝒦_q` definition as a maximum ratio.
///
/// Atoms use `‖b‖_{BMO₂}` in the denominator; jumps are normalised to
/// `‖g‖_1 = 1`. For operators that commute with predictable multipliers the
/// commuting identity is checked and its largest relative defect recorded.
pub fn kq_certify(kind: OpKind, q: f64, corpus: &KqCorpus) -> Result<KqCertificate> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidExponent(q));
    }
    if corpus.samples == 0 || corpus.depths.is_empty() || corpus.profiles.is_empty() {
        return Err(Error::Config("corpus needs samples, depths and profiles".into()));
    }
    let mut rows = Vec::with_capacity(corpus.depths.len());
    for &depth in &corpus.depths {
        let tree = kind.tree(depth)?;
        let op = kind.build(tree.clone(), derive_seed(corpus.seed, &[depth as u64, 0x5eed]))?;
        let outcomes: Vec<(u64, [Option<(f64, f64)>; 6], Option<f64>)> = (0..corpus.samples)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(corpus.seed, &[depth as u64, i as u64]);
                let mut out = [None; 6];
                let mut shortcut = None;
                let f = random_martingale(&tree, seed).terminal();
                let tf = op.apply_values(f.values());
                let h1 = norm(&f.martingale(), NormKind::H1).unwrap_or(f64::NAN);
                out[0] = Some((lp(&tree, &tf, q), h1));
                out[1] = Some((weak_lq(&tree, &tf, q).unwrap_or(f64::NAN), lp(&tree, f.values(), 1.0)));
                let profile = corpus.profiles[i % corpus.profiles.len()];
                let b = generate_bmo(&tree, profile, seed ^ 0xb);
                let bmo = norm(&b.martingale(), NormKind::Bmo(2.0)).unwrap_or(f64::NAN);
                if let Some((n, a)) = random_local(&tree, AtomKind::SimpleSInf, seed ^ 0xa, None) {
                    let o = local_estimates(op.as_ref(), q, &b, bmo, n, &a);
                    out[2] = Some(o.oscillation);
                    out[3] = Some(o.commutator);
                    shortcut = o.shortcut;
                }
                if let Some((n, g)) = random_local(&tree, AtomKind::Jump, seed ^ 0x1, None) {
                    let o = local_estimates(op.as_ref(), q, &b, bmo, n, &g);
                    let g1 = lp(&tree, g.values(), 1.0);
                    out[4] = Some((o.oscillation.0, g1 * bmo));
                    out[5] = Some((o.commutator.0, g1 * bmo));
                    shortcut = match (shortcut, o.shortcut) {
                        (Some(a), Some(b)) => Some(a.max(b)),
                        (a, b) => a.or(b),
                    };
                }
                (seed, out, shortcut)
            })
            .collect();
        let mut estimates = Vec::with_capacity(6);
        for (j, c) in KqConstant::ALL.into_iter().enumerate() {
            let mut best = KqEstimate {
                constant: c,
                value: 0.0,
                lhs: 0.0,
                rhs: 0.0,
                witness_seed: corpus.seed,
                samples: 0,
            };
            for (seed, out, _) in &outcomes {
                let Some((lhs, rhs)) = out[j] else { continue };
                best.samples += 1;
                let ratio = ratio_of(lhs, rhs);
                if !(ratio <= best.value) {
                    best.value = ratio;
                    best.lhs = lhs;
                    best.rhs = rhs;
                    best.witness_seed = *seed;
                }
                if !ratio.is_finite() {
                    best.value = f64::INFINITY;
                }
            }
            estimates.push(best);
        }
        let shortcut_error = outcomes
            .iter()
            .filter_map(|o| o.2)
            .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
        rows.push(KqRow {
            depth,
            tree_id: tree.id().to_string(),
            estimates,
            shortcut_error,
        });
    }
    Ok(KqCertificate {
        op: kind.name().to_string(),
        q,
        seed: corpus.seed,
        rows,
    })
}

/// `lhs/rhs`, with `0/0 = 0` and `x/0 = ∞`.
pub fn ratio_of(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Sampling plan for [`endpoint_report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointCorpus {
    pub samples: usize,
    pub seed: u64,
    /// Largest number of `(b,∞)`-atoms combined in the strong suite.
    pub max_atoms: usize,
    pub suite: String,
}

impl Default for EndpointCorpus {
    fn default() -> Self {
        EndpointCorpus {
            samples: 200,
            seed: 0,
            max_atoms: 3,
            suite: "commutator-endpoints".into(),
        }
    }
}

/// Random finite combination of `(b,∞)`-atoms with positive weights summing to 1.
pub fn random_b_atom_combination(b: &StepFunction, max_atoms: usize, seed: u64) -> Option<StepFunction> {
    let tree = b.tree();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=max_atoms.max(1));
    let weights: Vec<f64> = (0..count).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0; tree.leaf_count()];
    let mut any = false;
    for w in weights {
        if let Some((_, a)) = random_local(tree, AtomKind::BAtom, rng.random(), Some(b)) {
            any = true;
            for (s, v) in acc.iter_mut().zip(a.values()) {
                *s += w / total * v;
            }
        }
    }
    any.then(|| StepFunction::new(tree.clone(), acc).ok()).flatten()
}

/// A single random `(b,∞)`-atom, with its level.
pub fn random_b_atom(b: &StepFunction, seed: u64) -> Option<(usize, StepFunction)> {
    random_local(b.tree(), AtomKind::BAtom, seed, Some(b))
}

/// Weak endpoint `‖[T,b]f‖_{q,∞}/(‖f‖_{H₁}‖b‖_{BMO₂})` over random martingales
/// (one sample in four) and simple `(s,∞)`-atoms, and strong endpoint
/// `‖[T,b]f‖_q / h1b_norm(b,f)` over combinations of `(b,∞)`-atoms; one record
/// per suite carrying the largest ratio and its seed.
pub fn endpoint_report(op: &dyn SublinearOp, b: &StepFunction, corpus: &EndpointCorpus) -> Result<Vec<VerificationRecord>> {
    same_tree(op.tree(), b.tree())?;
    if is_constant(b) {
        return Err(Error::ConstantSymbol);
    }
    if corpus.samples == 0 {
        return Err(Error::Config("endpoint corpus needs at least one sample".into()));
    }
    let tree = op.tree();
    let q = op.q();
    let depth = tree.depth();
    let bmo = norm(&b.martingale(), NormKind::Bmo(2.0))?;
    let samples: Vec<(u64, (f64, f64), Option<(f64, f64)>)> = (0..corpus.samples)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(corpus.seed, &[depth as u64, i as u64, 0xe9]);
            let atom = (i % 4 != 0)
                .then(|| random_local(tree, AtomKind::SimpleSInf, seed, None))
                .flatten();
            let f = match atom {
                Some((_, a)) => a,
                None => random_martingale(tree, seed).terminal(),
            };
            let weak = match commutator_apply(op, b, &f) {
                Ok(c) => (
                    weak_lq(tree, c.values(), q).unwrap_or(f64::NAN),
                    norm(&f.martingale(), NormKind::H1).unwrap_or(f64::NAN) * bmo,
                ),
                Err(_) => (f64::NAN, 1.0),
            };
            let strong = random_b_atom_combination(b, corpus.max_atoms, seed ^ 0x5).map(|g| {
                match (commutator_apply(op, b, &g), h1b_norm(b, &g)) {
                    (Ok(c), Ok(h)) => (lp(tree, c.values(), q), h),
                    _ => (f64::NAN, 1.0),
                }
            });
            (seed, weak, strong)
        })
        .collect();
    let mut out = Vec::new();
    let pick = |get: &dyn Fn(&(u64, (f64, f64), Option<(f64, f64)>)) -> Option<(f64, f64)>| {
        let mut best: Option<(u64, f64, f64, f64)> = None;
        for s in &samples {
            if let Some((lhs, rhs)) = get(s) {
                let r = ratio_of(lhs, rhs);
                let r = if r.is_nan() { f64::INFINITY } else { r };
                if best.is_none_or(|b| r > b.3) {
                    best = Some((s.0, lhs, rhs, r));
                }
            }
        }
        best
    };
    for (name, best) in [
        ("weak-endpoint", pick(&|s| Some(s.1))),
        ("strong-endpoint", pick(&|s| s.2)),
    ] {
        if let Some((seed, lhs, rhs, _)) = best {
            out.push(VerificationRecord::reported(
                &corpus.suite,
                &format!("{name}/{}@d{depth}", op.name()),
                lhs,
                rhs,
                seed,
            ));
        }
    }
    Ok(out)
}
