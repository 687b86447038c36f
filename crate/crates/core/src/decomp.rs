//! Product decomposition `f·g = Π₁(f,g) + Π₂(f,g) + L(f,g)`, the Davis
//! decomposition, the stopping-time atomic decomposition and atom tooling.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtration::FiltrationTree;
use crate::martingale::{
    cond_square_function, doob_maximal, lp, same_tree, square_function, Martingale, StepFunction,
};

/// Adapted process of finite variation, stored per level like a martingale.
#[derive(Clone, Debug)]
pub struct BvProcess {
    tree: Arc<FiltrationTree>,
    levels: Vec<Vec<f64>>,
}

impl BvProcess {
    pub fn tree(&self) -> &Arc<FiltrationTree> {
        &self.tree
    }

    pub fn level(&self, n: usize) -> &[f64] {
        &self.levels[n]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn value(&self, n: usize) -> Vec<f64> {
        self.tree.broadcast(n, &self.levels[n])
    }

    pub fn terminal(&self) -> StepFunction {
        StepFunction::new(self.tree.clone(), self.levels[self.tree.depth()].clone())
            .expect("finite process values")
    }

    /// `Σ_n ‖h_n − h_{n−1}‖_1` with `h_{−1} = 0`.
    pub fn variation_norm(&self) -> f64 {
        let tree = &self.tree;
        (0..=tree.depth())
            .map(|n| {
                let prev = if n == 0 {
                    vec![0.0]
                } else {
                    tree.refine(n - 1, &self.levels[n - 1], n)
                };
                tree.level(n)
                    .iter()
                    .zip(&self.levels[n])
                    .zip(prev)
                    .map(|((c, v), p)| c.mass * (v - p).abs())
                    .sum::<f64>()
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct ProductDecomposition {
    pub pi1: Martingale,
    pub pi2: Martingale,
    pub l: BvProcess,
    /// `Π₁ + Π₂`.
    pub g_part: Martingale,
}

impl ProductDecomposition {
    /// Max over levels and cells of `|f_n g_n − (Π₁+Π₂+L)_n|`, relative to the size of the terms.
    pub fn identity_error(&self, f: &Martingale, g: &Martingale) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..=f.depth() {
            for i in 0..f.level(n).len() {
                let lhs = f.level(n)[i] * g.level(n)[i];
                let (a, b, c) = (self.pi1.level(n)[i], self.pi2.level(n)[i], self.l.level(n)[i]);
                let scale = lhs.abs().max(a.abs() + b.abs() + c.abs()).max(f64::MIN_POSITIVE);
                worst = worst.max((lhs - (a + b + c)).abs() / scale);
            }
        }
        worst
    }
}

/// Builds `Π₁`, `Π₂` and `L` from the differences of `f` and `g`.
pub fn product_decompose(f: &Martingale, g: &Martingale) -> Result<ProductDecomposition> {
    same_tree(f.tree(), g.tree())?;
    let tree = f.tree().clone();
    let depth = tree.depth();
    let mut d1 = Vec::with_capacity(depth + 1);
    let mut d2 = Vec::with_capacity(depth + 1);
    let mut l_levels = Vec::with_capacity(depth + 1);
    let (df0, dg0) = (f.initial(), g.initial());
    d1.push(vec![0.0]);
    d2.push(vec![0.0]);
    l_levels.push(vec![df0 * dg0]);
    for n in 1..=depth {
        let fp = tree.refine(n - 1, f.level(n - 1), n);
        let gp = tree.refine(n - 1, g.level(n - 1), n);
        let lp_prev = tree.refine(n - 1, &l_levels[n - 1], n);
        let df = f.difference(n);
        let dg = g.difference(n);
        d1.push(fp.iter().zip(&dg).map(|(a, b)| a * b).collect());
        d2.push(gp.iter().zip(&df).map(|(a, b)| a * b).collect());
        l_levels.push(
            lp_prev
                .iter()
                .zip(df.iter().zip(&dg))
                .map(|(l, (a, b))| l + a * b)
                .collect(),
        );
    }
    let pi1 = Martingale::from_differences(tree.clone(), &d1)?;
    let pi2 = Martingale::from_differences(tree.clone(), &d2)?;
    let g_part = pi1.add(&pi2)?;
    Ok(ProductDecomposition {
        pi1,
        pi2,
        l: BvProcess {
            tree,
            levels: l_levels,
        },
        g_part,
    })
}

/// Splits `f = f¹ + fᵈ` by truncating the large jumps predictably.
///
/// `d_n fᵈ = d_n f·1{|d_n f| > 2λ_{n−1}} − 𝔼_{n−1}(same)` for `n ≥ 1`, with
/// `λ_n = max_{k≤n}|d_k f|`, and `d_0 fᵈ = d_0 f`.
pub fn davis_decompose(f: &Martingale) -> Result<(Martingale, Martingale)> {
    let tree = f.tree().clone();
    let depth = tree.depth();
    let mut dd = Vec::with_capacity(depth + 1);
    let mut d1 = Vec::with_capacity(depth + 1);
    dd.push(vec![f.initial()]);
    d1.push(vec![0.0]);
    let mut lambda = vec![f.initial().abs()];
    for n in 1..=depth {
        let lam_prev = tree.refine(n - 1, &lambda, n);
        let d = f.difference(n);
        let big: Vec<f64> = d
            .iter()
            .zip(&lam_prev)
            .map(|(&x, &l)| if x.abs() > 2.0 * l { x } else { 0.0 })
            .collect();
        let mean = tree.refine(n - 1, &tree.coarsen(n - 1, &big), n);
        let jump: Vec<f64> = big.iter().zip(&mean).map(|(a, m)| a - m).collect();
        d1.push(d.iter().zip(&jump).map(|(a, b)| a - b).collect());
        dd.push(jump);
        lambda = lam_prev
            .iter()
            .zip(&d)
            .map(|(l, x)| l.max(x.abs()))
            .collect();
    }
    Ok((
        Martingale::from_differences(tree.clone(), &d1)?,
        Martingale::from_differences(tree, &dd)?,
    ))
}

/// Kind of an atom certificate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AtomKind {
    /// `𝔼_n a = 0`, `supp a ⊂ A`, `‖s(a)‖_∞ ≤ ℙ(A)⁻¹`.
    SimpleSInf,
    /// `𝔼_n a = 0`, `supp a ⊂ A`, `‖a‖_∞ ≤ ℙ(A)⁻¹`.
    SimpleInf,
    /// A simple ∞-atom that also satisfies `𝔼_n(ba) = 0`.
    BAtom,
    /// `𝓕_n`-measurable with `𝔼_{n−1} a = 0`.
    Jump,
}

/// A union of cells of one level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSet {
    pub level: usize,
    pub cells: Vec<usize>,
}

impl CellSet {
    pub fn single(level: usize, cell: usize) -> Self {
        CellSet {
            level,
            cells: vec![cell],
        }
    }

    pub fn mass(&self, tree: &FiltrationTree) -> f64 {
        self.cells.iter().map(|&i| tree.level(self.level)[i].mass).sum()
    }

    pub fn leaf_mask(&self, tree: &FiltrationTree) -> Vec<bool> {
        let mut mask = vec![false; tree.leaf_count()];
        for &i in &self.cells {
            mask[tree.level(self.level)[i].leaves.clone()].fill(true);
        }
        mask
    }

    fn check(&self, tree: &FiltrationTree) -> Result<()> {
        tree.check_level(self.level)?;
        if self.cells.is_empty() {
            return Err(Error::InvalidAtom("empty cell set".into()));
        }
        for &i in &self.cells {
            if i >= tree.level_len(self.level) {
                return Err(Error::CellOutOfRange {
                    level: self.level,
                    index: i,
                });
            }
        }
        Ok(())
    }
}

/// Witness that `function` is an atom (or a jump) at `level`.
///
/// For atoms `support.level == level`; for jumps the support is a union of
/// level-`(n−1)` cells.
#[derive(Clone, Debug)]
pub struct AtomCertificate {
    pub kind: AtomKind,
    pub level: usize,
    pub support: CellSet,
    pub function: StepFunction,
    pub coefficient: f64,
    /// Set when a b-atom projection was rank-deficient and only `𝔼_n a = 0` was enforced.
    pub fallback: bool,
}

/// Serialized certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomFile {
    pub kind: AtomKind,
    pub level: usize,
    pub support: CellSet,
    pub coefficient: f64,
    pub tree_id: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub fallback: bool,
}

impl AtomCertificate {
    pub fn tree(&self) -> &Arc<FiltrationTree> {
        self.function.tree()
    }

    /// `ℙ(A)` for the support set.
    pub fn support_mass(&self) -> f64 {
        self.support.mass(self.tree())
    }

    pub fn to_file(&self) -> AtomFile {
        AtomFile {
            kind: self.kind,
            level: self.level,
            support: self.support.clone(),
            coefficient: self.coefficient,
            tree_id: self.tree().id().to_string(),
            values: self.function.values().to_vec(),
            fallback: self.fallback,
        }
    }

    pub fn from_file(tree: Arc<FiltrationTree>, file: AtomFile) -> Result<Self> {
        if file.tree_id != tree.id() {
            return Err(Error::TreeMismatch);
        }
        file.support.check(&tree)?;
        Ok(AtomCertificate {
            kind: file.kind,
            level: file.level,
            support: file.support,
            function: StepFunction::new(tree, file.values)?,
            coefficient: file.coefficient,
            fallback: file.fallback,
        })
    }
}

/// Stopping-time decomposition of an `h₁` martingale into simple (s,∞)-atoms.
///
/// With `τ_k = inf{n : s_{n+1}(f) > 2^k}`, the piece `f^{τ_{k+1}} − f^{τ_k}` is
/// cut along the level-`τ_k` cells `A` and normalised by `μ = 2^{k+1}ℙ(A)`.
pub fn atomic_decompose(f: &Martingale) -> Result<Vec<AtomCertificate>> {
    let tree = f.tree().clone();
    let depth = tree.depth();
    let scale = f.levels().iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if f.initial().abs() > 1e-14 * scale.max(1.0) {
        return Err(Error::NonZeroInitial(f.initial().abs()));
    }
    // cum[n] holds s_{n+1}² on level-n cells (𝓕_n-measurable).
    let mut cum: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut prev = vec![0.0];
    for n in 0..depth {
        let sq: Vec<f64> = f.difference(n + 1).iter().map(|d| d * d).collect();
        let cond = tree.coarsen(n, &sq);
        let base = if n == 0 { prev.clone() } else { tree.refine(n - 1, &prev, n) };
        let cur: Vec<f64> = base.iter().zip(cond).map(|(a, b)| a + b).collect();
        prev = cur.clone();
        cum.push(cur);
    }
    let positive: Vec<f64> = cum
        .iter()
        .enumerate()
        .flat_map(|(n, l)| {
            l.iter()
                .zip(tree.level(n))
                .filter(|(v, c)| **v > 0.0 && c.mass > 0.0)
                .map(|(v, _)| v.sqrt())
                .collect::<Vec<_>>()
        })
        .collect();
    if positive.is_empty() {
        return Ok(Vec::new());
    }
    let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().cloned().fold(0.0, f64::max);
    let k_lo = lo.log2().floor() as i32 - 1;
    let k_hi = hi.log2().ceil() as i32 + 1;

    // Stopping level of every leaf for a threshold; `depth` stands for ∞.
    let ancestors: Vec<Vec<usize>> = (0..depth).map(|n| tree.ancestors(n)).collect();
    let stop = |k: i32| -> Vec<usize> {
        let thr = 2f64.powi(k);
        let thr2 = thr * thr;
        (0..tree.leaf_count())
            .map(|leaf| {
                (0..depth)
                    .find(|&n| cum[n][ancestors[n][leaf]] > thr2)
                    .unwrap_or(depth)
            })
            .collect()
    };
    let leaf_levels: Vec<Vec<f64>> = (0..=depth).map(|n| f.value(n)).collect();
    let stopped = |tau: &[usize]| -> Vec<f64> {
        tau.iter()
            .enumerate()
            .map(|(leaf, &t)| leaf_levels[t][leaf])
            .collect()
    };

    let mut out = Vec::new();
    let mut tau_k = stop(k_lo);
    let mut f_k = stopped(&tau_k);
    for k in k_lo..k_hi {
        let tau_next = stop(k + 1);
        let f_next = stopped(&tau_next);
        let piece: Vec<f64> = f_next.iter().zip(&f_k).map(|(a, b)| a - b).collect();
        let coef_scale = 2f64.powi(k + 1);
        for n in 0..depth {
            for (i, cell) in tree.level(n).iter().enumerate() {
                if cell.mass <= 0.0 {
                    continue;
                }
                let leaves = cell.leaves.clone();
                // {τ_k = n} is a union of level-n cells.
                if tau_k[leaves.start] != n {
                    continue;
                }
                if piece[leaves.clone()].iter().all(|&v| v == 0.0) {
                    continue;
                }
                let mu = coef_scale * cell.mass;
                let mut values = vec![0.0; tree.leaf_count()];
                for l in leaves {
                    values[l] = piece[l] / mu;
                }
                out.push(AtomCertificate {
                    kind: AtomKind::SimpleSInf,
                    level: n,
                    support: CellSet::single(n, i),
                    function: StepFunction::new(tree.clone(), values)?,
                    coefficient: mu,
                    fallback: false,
                });
            }
        }
        tau_k = tau_next;
        f_k = f_next;
    }
    Ok(out)
}

/// Outcome of [`verify_atom`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomReport {
    pub pass: bool,
    pub diagnostics: Vec<String>,
    /// Largest LHS/RHS over the size consequences checked (atoms only).
    pub max_ratio: f64,
}

const ATOM_TOL: f64 = 1e-12;

/// Checks the defining properties of a certificate and, for atoms, the size
/// bounds `‖M(a)‖_p ≤ 2ℙ(A)^{1/p−1}` and `‖S(a)‖_p, ‖s(a)‖_p, ‖a‖_p ≤ ℙ(A)^{1/p−1}`
/// for `p ∈ {1, 3/2, 2}` together with support containment.
pub fn verify_atom(c: &AtomCertificate, b: Option<&StepFunction>) -> AtomReport {
    let mut diag = Vec::new();
    let tree = c.tree().clone();
    if let Err(e) = c.support.check(&tree) {
        return AtomReport {
            pass: false,
            diagnostics: vec![e.to_string()],
            max_ratio: f64::INFINITY,
        };
    }
    let a = c.function.values();
    let sup = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = ATOM_TOL * sup.max(1.0);
    let n = c.level;
    let mut max_ratio: f64 = 0.0;

    if c.kind == AtomKind::Jump {
        if n == 0 || n > tree.depth() {
            diag.push("jump level must lie in 1..=depth".into());
        } else {
            if c.support.level != n - 1 {
                diag.push("jump support must be given on level n-1".into());
            }
            let fine = tree.averages(a, n);
            if tree.broadcast(n, &fine).iter().zip(a).any(|(x, y)| (x - y).abs() > tol) {
                diag.push("not measurable at the jump level".into());
            }
            if tree.averages(a, n - 1).iter().any(|m| m.abs() > tol) {
                diag.push("nonzero conditional mean".into());
            }
        }
    } else if c.support.level != n {
        diag.push("support must be given on the atom level".into());
    } else {
        let pa = c.support.mass(&tree);
        if pa <= 0.0 {
            diag.push("support has zero mass".into());
        }
        let mask = c.support.leaf_mask(&tree);
        if a.iter().zip(&mask).any(|(v, &inside)| !inside && *v != 0.0) {
            diag.push("support outside A".into());
        }
        if tree.averages(a, n).iter().any(|m| m.abs() > tol) {
            diag.push("nonzero conditional mean".into());
        }
        if c.kind == AtomKind::BAtom {
            match b {
                Some(b) if b.tree().id() == tree.id() => {
                    let ba: Vec<f64> = b.values().iter().zip(a).map(|(x, y)| x * y).collect();
                    let tol_b = tol * b.sup_norm().max(1.0);
                    if tree.averages(&ba, n).iter().any(|m| m.abs() > tol_b) {
                        diag.push("nonzero conditional mean against b".into());
                    }
                }
                Some(_) => diag.push("b lives on another tree".into()),
                None => diag.push("b-atom check needs the symbol b".into()),
            }
        }
        if pa > 0.0 {
            let m = Martingale::from_terminal(&c.function);
            let maximal = doob_maximal(&m);
            let square = square_function(&m);
            let cond = cond_square_function(&m);
            let bound = 1.0 / pa;
            let size = match c.kind {
                AtomKind::SimpleSInf => cond.sup_norm(),
                _ => c.function.sup_norm(),
            };
            if size > bound * (1.0 + ATOM_TOL) {
                diag.push(format!("sup bound violated: {size} > {bound}"));
            }
            for (name, g) in [("M(a)", &maximal), ("S(a)", &square), ("s(a)", &cond)] {
                if g.values().iter().zip(&mask).any(|(v, &inside)| !inside && v.abs() > tol) {
                    diag.push(format!("supp {name} not contained in A"));
                }
            }
            for p in [1.0, 1.5, 2.0] {
                let rhs = pa.powf(1.0 / p - 1.0);
                let checks = [
                    ("M(a)", lp(&tree, maximal.values(), p), 2.0 * rhs),
                    ("S(a)", lp(&tree, square.values(), p), rhs),
                    ("s(a)", lp(&tree, cond.values(), p), rhs),
                    ("a", lp(&tree, a, p), rhs),
                ];
                for (name, lhs, r) in checks {
                    let ratio = lhs / r;
                    max_ratio = max_ratio.max(ratio);
                    if ratio > 1.0 + 1e-9 {
                        diag.push(format!("L^{p} bound for {name} violated: {lhs} > {r}"));
                    }
                }
            }
        }
    }
    AtomReport {
        pass: diag.is_empty(),
        diagnostics: diag,
        max_ratio,
    }
}

/// Draws a random atom or jump supported in `cells`.
///
/// Atoms are drawn constant on the cells of a random finer level, centred on
/// each level-`n` cell (and made orthogonal to `b` per cell for b-atoms),
/// then rescaled so the size bound holds with equality. Jumps at level `n`
/// take `cells` on level `n−1` and are normalised to `‖a‖_1 = 1`.
pub fn random_atom(
    tree: &Arc<FiltrationTree>,
    n: usize,
    cells: &[usize],
    kind: AtomKind,
    seed: u64,
    b: Option<&StepFunction>,
) -> Result<AtomCertificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = tree.depth();
    match kind {
        AtomKind::Jump => {
            if n == 0 || n > depth {
                return Err(Error::InvalidAtom(format!("jump level {n} outside 1..={depth}")));
            }
            let support = CellSet {
                level: n - 1,
                cells: cells.to_vec(),
            };
            support.check(tree)?;
            let mut fine = vec![0.0; tree.level_len(n)];
            for &i in cells {
                let kids = tree.level(n - 1)[i].children.clone();
                for k in kids.clone() {
                    fine[k] = rng.sample::<f64, _>(StandardNormal);
                }
                let masses: Vec<f64> = tree.level(n)[kids.clone()].iter().map(|c| c.mass).collect();
                centre(&mut fine[kids], &masses);
            }
            let values = tree.broadcast(n, &fine);
            let l1 = lp(tree, &values, 1.0);
            if l1 <= 0.0 {
                return Err(Error::InvalidAtom("jump support admits no mean-zero function".into()));
            }
            let values: Vec<f64> = values.iter().map(|v| v / l1).collect();
            Ok(AtomCertificate {
                kind,
                level: n,
                support,
                function: StepFunction::new(tree.clone(), values)?,
                coefficient: 1.0,
                fallback: false,
            })
        }
        _ => {
            if n >= depth {
                return Err(Error::InvalidAtom(format!(
                    "atom level {n} must be below the depth {depth}"
                )));
            }
            let support = CellSet {
                level: n,
                cells: cells.to_vec(),
            };
            support.check(tree)?;
            let pa = support.mass(tree);
            if pa <= 0.0 {
                return Err(Error::InvalidAtom("support has zero mass".into()));
            }
            let b_vals = match (kind, b) {
                (AtomKind::BAtom, Some(b)) => {
                    same_tree(tree, b.tree())?;
                    Some(b.values())
                }
                (AtomKind::BAtom, None) => {
                    return Err(Error::InvalidAtom("b-atom requested without a symbol".into()))
                }
                _ => None,
            };
            let m = rng.random_range(n + 1..=depth);
            let mut values = vec![0.0; tree.leaf_count()];
            for &i in cells {
                let leaves = tree.level(n)[i].leaves.clone();
                for c in tree.level(m) {
                    if c.leaves.start >= leaves.start && c.leaves.end <= leaves.end {
                        let v: f64 = rng.sample(StandardNormal);
                        values[c.leaves.clone()].fill(v);
                    }
                }
            }
            let mut fallback = false;
            for &i in cells {
                let cell = &tree.level(n)[i];
                if cell.mass <= 0.0 {
                    continue;
                }
                let r = cell.leaves.clone();
                let masses = &tree.leaf_masses()[r.clone()];
                let ones: Vec<f64> = vec![1.0; r.len()];
                match b_vals {
                    Some(bv) => {
                        if !project_out(&mut values[r.clone()], masses, &ones, &bv[r.clone()]) {
                            fallback = true;
                            centre(&mut values[r.clone()], masses);
                        }
                    }
                    None => centre(&mut values[r], masses),
                }
            }
            let size = match kind {
                AtomKind::SimpleSInf => {
                    let sf = StepFunction::new(tree.clone(), values.clone())?;
                    cond_square_function(&sf.martingale()).sup_norm()
                }
                _ => values
                    .iter()
                    .zip(tree.leaf_masses())
                    .filter(|(_, &w)| w > 0.0)
                    .fold(0.0f64, |a, (v, _)| a.max(v.abs())),
            };
            if size <= 0.0 {
                return Err(Error::InvalidAtom("projection left nothing to normalise".into()));
            }
            let scale = 1.0 / (size * pa);
            for v in &mut values {
                *v *= scale;
            }
            Ok(AtomCertificate {
                kind,
                level: n,
                support,
                function: StepFunction::new(tree.clone(), values)?,
                coefficient: 1.0,
                fallback,
            })
        }
    }
}

fn dot(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum()
}

/// Removes the `w`-weighted mean of `v`.
///
/// The values are first shifted so the heaviest entry is exactly zero; the
/// heavy entry then ends up as `−mean`, computed to full relative precision
/// even when the other weights are many orders of magnitude smaller.
fn centre(v: &mut [f64], w: &[f64]) {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return;
    }
    let h = heaviest(w);
    let shift = v[h];
    v.iter_mut().for_each(|x| *x -= shift);
    let mean = dot(w, v, &vec![1.0; v.len()]) / total;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn heaviest(w: &[f64]) -> usize {
    (0..w.len()).fold(0, |h, i| if w[i] > w[h] { i } else { h })
}

/// Removes the `L²(w)` projection onto `span{e, b}`; false if the Gram matrix is singular.
fn project_out(v: &mut [f64], w: &[f64], e: &[f64], b: &[f64]) -> bool {
    // Shifting by constants leaves the span unchanged and avoids cancellation
    // against the heaviest entry.
    let h = heaviest(w);
    let shift = v[h];
    v.iter_mut().for_each(|x| *x -= shift);
    let bh = b[h];
    let b: &[f64] = &b.iter().map(|x| x - bh).collect::<Vec<_>>();
    let (g11, g12, g22) = (dot(w, e, e), dot(w, e, b), dot(w, b, b));
    let det = g11 * g22 - g12 * g12;
    if det <= 1e-12 * g11 * g22 || g11 <= 0.0 {
        return false;
    }
    let (r1, r2) = (dot(w, v, e), dot(w, v, b));
    let c1 = (g22 * r1 - g12 * r2) / det;
    let c2 = (g11 * r2 - g12 * r1) / det;
    for ((x, ei), bi) in v.iter_mut().zip(e).zip(b) {
        *x -= c1 * ei + c2 * bi;
    }
    // A second pass removes the rounding left by the first.
    let (r1, r2) = (dot(w, v, e), dot(w, v, b));
    let c1 = (g22 * r1 - g12 * r2) / det;
    let c2 = (g11 * r2 - g12 * r1) / det;
    for ((x, ei), bi) in v.iter_mut().zip(e).zip(b) {
        *x -= c1 * ei + c2 * bi;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::{build_nondoubling_measure, build_pk_filtration, uniform_dyadic, PkMeasure};
    use crate::martingale::{norm, NormKind};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn random_martingale(tree: &Arc<FiltrationTree>, seed: u64) -> Martingale {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..tree.leaf_count()).map(|_| rng.sample(StandardNormal)).collect();
        Martingale::from_leaf_values(tree.clone(), v).unwrap()
    }

    fn haar_root(depth: usize) -> Martingale {
        let t = uniform_dyadic(depth).unwrap();
        let half = t.leaf_count() / 2;
        let v = (0..t.leaf_count()).map(|i| if i < half { 1.0 } else { -1.0 }).collect();
        Martingale::from_leaf_values(t, v).unwrap()
    }

    #[test]
    fn haar_squared_is_all_variation() {
        let h = haar_root(3);
        let p = product_decompose(&h, &h).unwrap();
        assert!(p.pi1.levels().iter().flatten().all(|&v| v == 0.0));
        assert!(p.pi2.levels().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(p.l.level(0), &[0.0]);
        for n in 1..=3 {
            assert!(p.l.level(n).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn constant_factor() {
        let t = uniform_dyadic(4).unwrap();
        let f = random_martingale(&t, 1);
        let g = Martingale::from_terminal(&StepFunction::constant(t, 2.5));
        let p = product_decompose(&f, &g).unwrap();
        assert!(p.identity_error(&f, &g) < 1e-14);
        assert!((p.l.level(0)[0] - 2.5 * f.initial()).abs() < 1e-15);
        for n in 0..=4 {
            let expect: Vec<f64> = f.level(n).iter().map(|v| 2.5 * (v - f.initial())).collect();
            for (a, b) in p.pi2.level(n).iter().zip(expect) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn identity_and_variation_norm() {
        let t = build_pk_filtration(&[2, 3, 2, 4], PkMeasure::Uniform).unwrap();
        let f = random_martingale(&t, 2);
        let g = random_martingale(&t, 3);
        let p = product_decompose(&f, &g).unwrap();
        assert!(p.identity_error(&f, &g) < 1e-12);
        let direct: f64 = (0..=4)
            .map(|n| lp(&t, &f.difference_leaves(n).iter().zip(g.difference_leaves(n)).map(|(a, b)| a * b).collect::<Vec<_>>(), 1.0))
            .sum();
        assert!((p.l.variation_norm() - direct).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn paraproduct_differences_are_martingale_differences() {
        let t = build_nondoubling_measure(6).unwrap();
        let f = random_martingale(&t, 4);
        let g = random_martingale(&t, 5);
        let p = product_decompose(&f, &g).unwrap();
        for n in 1..=6 {
            let d = p.pi1.difference(n);
            assert!(t.coarsen(n - 1, &d).iter().all(|m| m.abs() < 1e-12));
        }
    }

    #[test]
    fn davis_trivial_cases() {
        // small increments: nothing fires
        let t = uniform_dyadic(3).unwrap();
        let diffs = vec![vec![0.0], vec![1.0, -1.0], vec![1.5, -1.5, 0.5, -0.5], [0.2; 8]
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { *v } else { -v })
            .collect()];
        let f = Martingale::from_differences(t.clone(), &diffs).unwrap();
        let (f1, fd) = davis_decompose(&f).unwrap();
        // d_1 fires since λ_0 = 0
        assert!(fd.difference(1).iter().any(|&v| v != 0.0));
        assert!(fd.difference(2).iter().all(|&v| v == 0.0));
        let sum = f1.add(&fd).unwrap();
        for n in 0..=3 {
            for (a, b) in sum.level(n).iter().zip(f.level(n)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        // a level-0 constant goes entirely to fᵈ
        let c = Martingale::from_terminal(&StepFunction::constant(t, 3.0));
        let (c1, cd) = davis_decompose(&c).unwrap();
        assert!(c1.levels().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(cd.level(3), c.level(3));
    }

    #[test]
    fn davis_no_fire_after_large_first_step() {
        let t = uniform_dyadic(2).unwrap();
        let f = Martingale::from_differences(
            t,
            &[vec![5.0], vec![1.0, -1.0], vec![2.0, -2.0, 3.0, -3.0]],
        )
        .unwrap();
        let (f1, fd) = davis_decompose(&f).unwrap();
        assert_eq!(fd.difference(1), vec![0.0, 0.0]);
        assert_eq!(fd.difference(2), vec![0.0; 4]);
        assert_eq!(f1.initial(), 0.0);
    }

    #[test]
    fn atomic_zero_and_errors() {
        let t = uniform_dyadic(3).unwrap();
        assert!(atomic_decompose(&Martingale::zero(t.clone())).unwrap().is_empty());
        let c = Martingale::from_terminal(&StepFunction::constant(t, 1.0));
        assert!(matches!(atomic_decompose(&c), Err(Error::NonZeroInitial(_))));
    }

    fn reconstruct(atoms: &[AtomCertificate], leaves: usize) -> Vec<f64> {
        let mut sum = vec![0.0; leaves];
        for a in atoms {
            for (s, v) in sum.iter_mut().zip(a.function.values()) {
                *s += a.coefficient * v;
            }
        }
        sum
    }

    #[test]
    fn atomic_of_scaled_atom() {
        let t = uniform_dyadic(6).unwrap();
        let a = random_atom(&t, 2, &[1], AtomKind::SimpleSInf, 7, None).unwrap();
        let r = verify_atom(&a, None);
        assert!(r.pass, "{:?}", r.diagnostics);
        let f = Martingale::from_terminal(&a.function.scale(3.0));
        let atoms = atomic_decompose(&f).unwrap();
        let sum = reconstruct(&atoms, t.leaf_count());
        for (s, v) in sum.iter().zip(f.level(6)) {
            assert!((s - v).abs() < 1e-12 * v.abs().max(1.0));
        }
        let total: f64 = atoms.iter().map(|a| a.coefficient.abs()).sum();
        let h1 = norm(&f, NormKind::H1Conditional).unwrap();
        assert!(total <= 6.0 * h1 && h1 <= 6.0 * total, "{total} vs {h1}");
        for c in &atoms {
            let r = verify_atom(c, None);
            assert!(r.pass, "{:?}", r.diagnostics);
        }
    }

    #[test]
    fn atomic_reconstruction_random() {
        let t = build_nondoubling_measure(7).unwrap();
        let mut f = random_martingale(&t, 9);
        let f0 = f.initial();
        f = f.add(&Martingale::from_terminal(&StepFunction::constant(t.clone(), -f0))).unwrap();
        let atoms = atomic_decompose(&f).unwrap();
        let sum = reconstruct(&atoms, t.leaf_count());
        for (s, v) in sum.iter().zip(f.level(7)) {
            assert!((s - v).abs() < 1e-12 * v.abs().max(1.0));
        }
        for c in &atoms {
            let r = verify_atom(c, None);
            assert!(r.pass, "{:?}", r.diagnostics);
        }
    }

    #[test]
    fn haar_atom_passes_and_mean_violation_fails() {
        let t = uniform_dyadic(4).unwrap();
        // ℙ(A)⁻¹ times the Haar function one level below the level-1 cell 0
        let mut v = vec![0.0; 16];
        for (i, x) in v.iter_mut().enumerate().take(8) {
            *x = if i < 4 { 2.0 } else { -2.0 };
        }
        let c = AtomCertificate {
            kind: AtomKind::SimpleInf,
            level: 1,
            support: CellSet::single(1, 0),
            function: StepFunction::new(t.clone(), v.clone()).unwrap(),
            coefficient: 1.0,
            fallback: false,
        };
        assert!(verify_atom(&c, None).pass);
        let mut bad = c.clone();
        v[0] += 0.5;
        bad.function = StepFunction::new(t, v).unwrap();
        let r = verify_atom(&bad, None);
        assert!(!r.pass);
        assert!(r.diagnostics.iter().any(|d| d == "nonzero conditional mean"));
    }

    #[test]
    fn jump_and_b_atom_generation() {
        let t = uniform_dyadic(5).unwrap();
        let j = random_atom(&t, 1, &[0], AtomKind::Jump, 3, None).unwrap();
        assert!(t.averages(j.function.values(), 0)[0].abs() < 1e-15);
        assert!(verify_atom(&j, None).pass);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = StepFunction::new(t.clone(), (0..32).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a = random_atom(&t, 2, &[3], AtomKind::BAtom, 4, Some(&b)).unwrap();
        assert!(!a.fallback);
        let r = verify_atom(&a, Some(&b));
        assert!(r.pass, "{:?}", r.diagnostics);
        assert!((a.function.sup_norm() * a.support_mass() - 1.0).abs() < 1e-12);
        // constant b on the cell forces the fallback
        let flat = StepFunction::constant(t.clone(), 2.0);
        let a = random_atom(&t, 2, &[3], AtomKind::BAtom, 4, Some(&flat)).unwrap();
        assert!(a.fallback && verify_atom(&a, Some(&flat)).pass);
    }

    #[test]
    fn atom_file_round_trip() {
        let t = uniform_dyadic(4).unwrap();
        let a = random_atom(&t, 1, &[1], AtomKind::SimpleSInf, 5, None).unwrap();
        let json = serde_json::to_string(&a.to_file()).unwrap();
        assert!(json.contains("simple-s-inf"));
        let back = AtomCertificate::from_file(t, serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.function.values(), a.function.values());
        assert_eq!(back.support, a.support);
    }

    proptest! {
        #[test]
        fn bilinear_in_first_argument(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let t = uniform_dyadic(4).unwrap();
            let f = random_martingale(&t, seed);
            let f2 = random_martingale(&t, seed + 1);
            let g = random_martingale(&t, seed + 2);
            let comb = f.scale(alpha).add(&f2).unwrap();
            let (a, b, c) = (
                product_decompose(&comb, &g).unwrap(),
                product_decompose(&f, &g).unwrap(),
                product_decompose(&f2, &g).unwrap(),
            );
            for n in 0..=4 {
                for i in 0..t.level_len(n) {
                    let e1 = alpha * b.pi1.level(n)[i] + c.pi1.level(n)[i];
                    let e2 = alpha * b.pi2.level(n)[i] + c.pi2.level(n)[i];
                    let e3 = alpha * b.l.level(n)[i] + c.l.level(n)[i];
                    prop_assert!((a.pi1.level(n)[i] - e1).abs() < 1e-10 * (1.0 + e1.abs()));
                    prop_assert!((a.pi2.level(n)[i] - e2).abs() < 1e-10 * (1.0 + e2.abs()));
                    prop_assert!((a.l.level(n)[i] - e3).abs() < 1e-10 * (1.0 + e3.abs()));
                }
            }
        }

        #[test]
        fn davis_sums_back(seed in 0u64..1000) {
            let t = uniform_dyadic(5).unwrap();
            let f = random_martingale(&t, seed);
            let (f1, fd) = davis_decompose(&f).unwrap();
            prop_assert_eq!(f1.initial(), 0.0);
            let s = f1.add(&fd).unwrap();
            for (a, b) in s.level(5).iter().zip(f.level(5)) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn random_atoms_verify(seed in 0u64..1000, n in 0usize..4) {
            let t = uniform_dyadic(5).unwrap();
            for kind in [AtomKind::SimpleSInf, AtomKind::SimpleInf] {
                let a = random_atom(&t, n, &[0], kind, seed, None).unwrap();
                let r = verify_atom(&a, None);
                prop_assert!(r.pass, "{:?}", r.diagnostics);
                prop_assert!(r.max_ratio <= 1.0 + 1e-9);
            }
        }
    }
}
