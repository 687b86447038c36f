//! Finite atom-generated filtrations on `[0,1)`.
//!
//! A [`FiltrationTree`] stores the atoms of every σ-algebra `F_0 ⊂ … ⊂ F_N`
//! level by level. Children of a cell are contiguous in the next level and
//! every cell owns a contiguous range of leaves, so conditional expectations
//! reduce to range averages over the leaf masses.

use std::ops::Range;
use std::sync::Arc;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::martingale::StepFunction;

/// Default cap on the number of leaves a builder will produce (a depth-14 binary tree).
pub const DEFAULT_MAX_LEAVES: usize = 1 << 14;

const MASS_TOL: f64 = 1e-12;

/// Cell endpoint, kept exact.
pub type Endpoint = Ratio<u64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub start: Endpoint,
    pub end: Endpoint,
    pub mass: f64,
    pub parent: Option<usize>,
    /// Indices of the children in the next level.
    pub children: Range<usize>,
    /// Indices of the leaves below this cell.
    pub leaves: Range<usize>,
}

impl Cell {
    pub fn child_count(&self) -> usize {
        self.children.len()
    }
}

/// Address of a cell: its level and position among the level's cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellRef {
    pub level: usize,
    pub index: usize,
}

impl CellRef {
    pub fn new(level: usize, index: usize) -> Self {
        CellRef { level, index }
    }

    pub fn root() -> Self {
        CellRef { level: 0, index: 0 }
    }
}

#[derive(Debug)]
pub struct FiltrationTree {
    levels: Vec<Vec<Cell>>,
    leaf_mass: Vec<f64>,
    /// Uniform branching factor per level transition, when the tree has one.
    branching: Option<Vec<usize>>,
    id: String,
}

impl PartialEq for FiltrationTree {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.levels == other.levels
    }
}

impl FiltrationTree {
    /// Builds a tree from per-cell child counts and leaf masses.
    ///
    /// `shape[n][i]` is the number of children of the `i`-th cell at level `n`;
    /// children split their parent's interval into equal pieces. Masses of
    /// internal cells are the sums of their children.
    pub fn from_shape(shape: &[Vec<usize>], leaf_masses: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::MalformedTree("depth must be at least 1".into()));
        }
        if shape[0].len() != 1 {
            return Err(Error::MalformedTree("level 0 must hold a single root".into()));
        }
        let depth = shape.len();
        let mut levels: Vec<Vec<Cell>> = Vec::with_capacity(depth + 1);
        levels.push(vec![Cell {
            start: Ratio::from_integer(0),
            end: Ratio::from_integer(1),
            mass: 0.0,
            parent: None,
            children: 0..0,
            leaves: 0..0,
        }]);
        for (n, counts) in shape.iter().enumerate() {
            if counts.len() != levels[n].len() {
                return Err(Error::MalformedTree(format!(
                    "level {n} has {} cells but {} child counts",
                    levels[n].len(),
                    counts.len()
                )));
            }
            let mut next = Vec::new();
            for (i, &k) in counts.iter().enumerate() {
                if k == 0 {
                    return Err(Error::MalformedTree(format!(
                        "cell ({n}, {i}) has no children"
                    )));
                }
                let (start, end) = (levels[n][i].start, levels[n][i].end);
                let width = (end - start) / Ratio::from_integer(k as u64);
                let first = next.len();
                for j in 0..k as u64 {
                    let s = start + width * Ratio::from_integer(j);
                    next.push(Cell {
                        start: s,
                        end: s + width,
                        mass: 0.0,
                        parent: Some(i),
                        children: 0..0,
                        leaves: 0..0,
                    });
                }
                levels[n][i].children = first..next.len();
            }
            levels.push(next);
        }
        let leaf_count = levels[depth].len();
        if leaf_masses.len() != leaf_count {
            return Err(Error::LeafCount {
                expected: leaf_count,
                got: leaf_masses.len(),
            });
        }
        for (i, &m) in leaf_masses.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::NonFinite(m));
            }
            if m < 0.0 {
                return Err(Error::NegativeMass(m, i));
            }
        }
        for (i, cell) in levels[depth].iter_mut().enumerate() {
            cell.mass = leaf_masses[i];
            cell.leaves = i..i + 1;
        }
        for n in (0..depth).rev() {
            let (upper, lower) = levels.split_at_mut(n + 1);
            for cell in upper[n].iter_mut() {
                let kids = &lower[0][cell.children.clone()];
                cell.mass = kids.iter().map(|c| c.mass).sum();
                cell.leaves = kids[0].leaves.start..kids[kids.len() - 1].leaves.end;
            }
        }
        let total = levels[0][0].mass;
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::MassSum(total));
        }
        let branching = uniform_branching(&levels);
        Ok(Self::finish(levels, leaf_masses, branching))
    }

    fn finish(levels: Vec<Vec<Cell>>, leaf_mass: Vec<f64>, branching: Option<Vec<usize>>) -> Self {
        let mut tree = FiltrationTree {
            levels,
            leaf_mass,
            branching,
            id: String::new(),
        };
        let dump = serde_json::to_vec(&tree.to_dump()).expect("tree dump serializes");
        let digest = Sha256::digest(&dump);
        tree.id = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        tree
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_mass.len()
    }

    pub fn leaf_masses(&self) -> &[f64] {
        &self.leaf_mass
    }

    /// Content fingerprint, stable across serialization round trips.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn branching(&self) -> Option<&[usize]> {
        self.branching.as_deref()
    }

    pub fn level(&self, n: usize) -> &[Cell] {
        &self.levels[n]
    }

    pub fn level_len(&self, n: usize) -> usize {
        self.levels[n].len()
    }

    pub fn cell(&self, r: CellRef) -> &Cell {
        &self.levels[r.level][r.index]
    }

    pub fn check_cell(&self, r: CellRef) -> Result<()> {
        self.check_level(r.level)?;
        if r.index >= self.levels[r.level].len() {
            return Err(Error::CellOutOfRange {
                level: r.level,
                index: r.index,
            });
        }
        Ok(())
    }

    pub fn check_level(&self, n: usize) -> Result<()> {
        if n > self.depth() {
            return Err(Error::LevelOutOfRange {
                level: n,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    pub fn parent(&self, r: CellRef) -> Option<CellRef> {
        self.cell(r).parent.map(|p| CellRef::new(r.level - 1, p))
    }

    pub fn children(&self, r: CellRef) -> impl Iterator<Item = CellRef> + '_ {
        self.cell(r)
            .children
            .clone()
            .map(move |i| CellRef::new(r.level + 1, i))
    }

    /// Level-`n` ancestor index of every leaf.
    pub fn ancestors(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; self.leaf_count()];
        for (i, cell) in self.levels[n].iter().enumerate() {
            out[cell.leaves.clone()].fill(i);
        }
        out
    }

    /// Level-`n` cell containing leaf `leaf`.
    pub fn ancestor_of(&self, leaf: usize, n: usize) -> usize {
        let cells = &self.levels[n];
        cells.partition_point(|c| c.leaves.end <= leaf)
    }

    /// Integrals `∫_A f dμ` over every level-`n` cell.
    pub fn integrals(&self, leaf_values: &[f64], n: usize) -> Vec<f64> {
        self.levels[n]
            .iter()
            .map(|c| {
                c.leaves
                    .clone()
                    .map(|l| self.leaf_mass[l] * leaf_values[l])
                    .sum()
            })
            .collect()
    }

    /// Cell averages of `leaf_values` on level `n`; zero-mass cells get 0.
    pub fn averages(&self, leaf_values: &[f64], n: usize) -> Vec<f64> {
        self.integrals(leaf_values, n)
            .into_iter()
            .zip(&self.levels[n])
            .map(|(s, c)| if c.mass > 0.0 { s / c.mass } else { 0.0 })
            .collect()
    }

    /// Averages on every level at once, computed bottom-up.
    pub fn all_averages(&self, leaf_values: &[f64]) -> Vec<Vec<f64>> {
        let depth = self.depth();
        let mut integrals: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
        integrals[depth] = leaf_values
            .iter()
            .zip(&self.leaf_mass)
            .map(|(v, m)| v * m)
            .collect();
        for n in (0..depth).rev() {
            let below = &integrals[n + 1];
            integrals[n] = self.levels[n]
                .iter()
                .map(|c| below[c.children.clone()].iter().sum())
                .collect();
        }
        integrals
            .into_iter()
            .enumerate()
            .map(|(n, ints)| {
                if n == depth {
                    return leaf_values.to_vec();
                }
                ints.into_iter()
                    .zip(&self.levels[n])
                    .map(|(s, c)| if c.mass > 0.0 { s / c.mass } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Expands level-`n` cell values to leaf values.
    pub fn broadcast(&self, n: usize, cell_values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.leaf_count()];
        for (c, v) in self.levels[n].iter().zip(cell_values) {
            out[c.leaves.clone()].fill(*v);
        }
        out
    }

    /// Averages level-`n+1` cell values onto level-`n` cells (the one-step 𝔼_n).
    pub fn coarsen(&self, n: usize, child_values: &[f64]) -> Vec<f64> {
        let below = &self.levels[n + 1];
        self.levels[n]
            .iter()
            .map(|c| {
                if c.mass > 0.0 {
                    c.children
                        .clone()
                        .map(|k| below[k].mass * child_values[k])
                        .sum::<f64>()
                        / c.mass
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Lifts level-`n` cell values to level-`m` cells (`m ≥ n`).
    pub fn refine(&self, n: usize, values: &[f64], m: usize) -> Vec<f64> {
        let mut cur = values.to_vec();
        for k in n..m {
            let mut next = vec![0.0; self.levels[k + 1].len()];
            for (c, v) in self.levels[k].iter().zip(&cur) {
                next[c.children.clone()].fill(*v);
            }
            cur = next;
        }
        cur
    }

    /// Least `C` with `μ(parent) ≤ C μ(child)` over all non-root cells.
    pub fn regularity_constant(&self) -> Result<f64> {
        let mut worst: f64 = 1.0;
        for n in 1..=self.depth() {
            for (i, c) in self.levels[n].iter().enumerate() {
                if c.mass <= 0.0 {
                    return Err(Error::ZeroMass { level: n, index: i });
                }
                let parent = self.levels[n - 1][c.parent.unwrap()].mass;
                worst = worst.max(parent / c.mass);
            }
        }
        Ok(worst)
    }

    fn require_binary(&self) -> Result<()> {
        for n in 0..self.depth() {
            for (i, c) in self.levels[n].iter().enumerate() {
                if c.child_count() != 2 {
                    return Err(Error::NonBinary {
                        level: n,
                        index: i,
                        children: c.child_count(),
                    });
                }
            }
        }
        Ok(())
    }

    /// `m(I) = μ(I₋)μ(I₊)/μ(I)` for an internal cell of a binary tree.
    pub fn harmonic_mass(&self, r: CellRef) -> Result<f64> {
        let c = self.cell(r);
        if c.child_count() != 2 {
            return Err(Error::NonBinary {
                level: r.level,
                index: r.index,
                children: c.child_count(),
            });
        }
        if c.mass <= 0.0 {
            return Err(Error::ZeroMass {
                level: r.level,
                index: r.index,
            });
        }
        let kids = &self.levels[r.level + 1];
        let (lo, hi) = (kids[c.children.start].mass, kids[c.children.start + 1].mass);
        Ok(lo * hi / c.mass)
    }

    fn m_ratios(&self) -> Result<Vec<(f64, f64)>> {
        self.require_binary()?;
        let mut out = Vec::new();
        for n in 1..self.depth() {
            for i in 0..self.levels[n].len() {
                let r = CellRef::new(n, i);
                let parent = self.parent(r).unwrap();
                out.push((self.harmonic_mass(r)?, self.harmonic_mass(parent)?));
            }
        }
        Ok(out)
    }

    /// Max of `m(I)/m(Î)` over internal non-root cells.
    pub fn m_increasing_constant(&self) -> Result<f64> {
        Ok(self
            .m_ratios()?
            .into_iter()
            .map(|(m, mp)| m / mp)
            .fold(0.0, f64::max))
    }

    /// Max of `m(Î)/m(I)` over internal non-root cells.
    pub fn m_decreasing_constant(&self) -> Result<f64> {
        Ok(self
            .m_ratios()?
            .into_iter()
            .map(|(m, mp)| if m > 0.0 { mp / m } else { f64::INFINITY })
            .fold(0.0, f64::max))
    }

    pub fn to_dump(&self) -> TreeDump {
        TreeDump {
            depth: self.depth(),
            levels: self
                .levels
                .iter()
                .map(|cells| {
                    cells
                        .iter()
                        .map(|c| CellDump {
                            start: (*c.start.numer(), *c.start.denom()),
                            end: (*c.end.numer(), *c.end.denom()),
                            mass: c.mass,
                            children: c.child_count(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Rebuilds a tree from its dump, keeping the stored masses bit for bit.
    pub fn from_dump(dump: &TreeDump) -> Result<Self> {
        if dump.levels.len() != dump.depth + 1 || dump.depth == 0 {
            return Err(Error::MalformedTree("level count does not match depth".into()));
        }
        let shape: Vec<Vec<usize>> = dump.levels[..dump.depth]
            .iter()
            .map(|cells| cells.iter().map(|c| c.children).collect())
            .collect();
        let leaf: Vec<f64> = dump.levels[dump.depth].iter().map(|c| c.mass).collect();
        let rebuilt = Self::from_shape(&shape, leaf.clone())?;
        let mut levels = rebuilt.levels;
        for (n, cells) in dump.levels.iter().enumerate() {
            if cells.len() != levels[n].len() {
                return Err(Error::MalformedTree(format!("level {n} cell count")));
            }
            for (i, cd) in cells.iter().enumerate() {
                let cell = &mut levels[n][i];
                let start = ratio(cd.start)?;
                let end = ratio(cd.end)?;
                if start != cell.start || end != cell.end {
                    return Err(Error::MalformedTree(format!(
                        "cell ({n}, {i}) endpoints disagree with the partition"
                    )));
                }
                let tol = MASS_TOL * cell.mass.abs().max(1e-300);
                if (cd.mass - cell.mass).abs() > tol.max(MASS_TOL * 1e-3) {
                    return Err(Error::MalformedTree(format!(
                        "cell ({n}, {i}) mass is not the sum of its children"
                    )));
                }
                cell.mass = cd.mass;
            }
        }
        let branching = uniform_branching(&levels);
        Ok(Self::finish(levels, leaf, branching))
    }
}

fn ratio((n, d): (u64, u64)) -> Result<Endpoint> {
    if d == 0 {
        return Err(Error::MalformedTree("zero denominator".into()));
    }
    Ok(Ratio::new(n, d))
}

fn uniform_branching(levels: &[Vec<Cell>]) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(levels.len() - 1);
    for cells in &levels[..levels.len() - 1] {
        let k = cells[0].child_count();
        if cells.iter().any(|c| c.child_count() != k) {
            return None;
        }
        out.push(k);
    }
    Some(out)
}

/// Serialized form of a tree: endpoints as numerator/denominator pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub depth: usize,
    pub levels: Vec<Vec<CellDump>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDump {
    pub start: (u64, u64),
    pub end: (u64, u64),
    pub mass: f64,
    pub children: usize,
}

/// Leaf measure for a product-branching tree.
#[derive(Clone, Debug, PartialEq)]
pub enum PkMeasure {
    Uniform,
    LeafMasses(Vec<f64>),
}

/// Tree with `∏_{k≤n} p_k` cells of equal length at level `n`.
pub fn build_pk_filtration(p_seq: &[usize], measure: PkMeasure) -> Result<Arc<FiltrationTree>> {
    build_pk_filtration_with_limit(p_seq, measure, DEFAULT_MAX_LEAVES)
}

pub fn build_pk_filtration_with_limit(
    p_seq: &[usize],
    measure: PkMeasure,
    max_leaves: usize,
) -> Result<Arc<FiltrationTree>> {
    if p_seq.is_empty() {
        return Err(Error::MalformedTree("empty branching sequence".into()));
    }
    let mut count = 1usize;
    let mut shape = Vec::with_capacity(p_seq.len());
    for (n, &p) in p_seq.iter().enumerate() {
        if p < 2 {
            return Err(Error::InvalidBranching(p, n));
        }
        shape.push(vec![p; count]);
        count = count
            .checked_mul(p)
            .filter(|&c| c <= max_leaves)
            .ok_or(Error::TooLarge(count.saturating_mul(p), max_leaves))?;
    }
    let masses = match measure {
        PkMeasure::Uniform => vec![1.0 / count as f64; count],
        PkMeasure::LeafMasses(m) => {
            if m.len() != count {
                return Err(Error::LeafCount {
                    expected: count,
                    got: m.len(),
                });
            }
            if let Some((i, &v)) = m.iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(Error::NegativeMass(v, i));
            }
            m
        }
    };
    Ok(Arc::new(FiltrationTree::from_shape(&shape, masses)?))
}

pub fn uniform_dyadic(depth: usize) -> Result<Arc<FiltrationTree>> {
    build_pk_filtration(&vec![2; depth], PkMeasure::Uniform)
}

/// The `α_k` weights of the non-doubling chain: `α_1 = 1/2`, `α_k = 1 − 2^{−k²}`.
pub fn nondoubling_alpha(k: usize) -> f64 {
    1.0 - nondoubling_beta(k)
}

/// `β_k = 1 − α_k`, computed directly so it does not round to zero.
pub fn nondoubling_beta(k: usize) -> f64 {
    if k == 1 {
        0.5
    } else {
        (-((k * k) as f64)).exp2()
    }
}

/// Binary tree whose measure halves along `[0, 2^{-k})` with weights `α_k`
/// and is Lebesgue-proportional inside each brother `[2^{-k}, 2^{-k+1})`.
pub fn build_nondoubling_measure(depth: usize) -> Result<Arc<FiltrationTree>> {
    if depth == 0 {
        return Err(Error::MalformedTree("depth must be at least 1".into()));
    }
    if depth > 62 || (1usize << depth) > DEFAULT_MAX_LEAVES {
        return Err(Error::TooLarge(1usize << depth.min(62), DEFAULT_MAX_LEAVES));
    }
    let leaves = 1usize << depth;
    let mut masses = vec![0.0; leaves];
    let mut chain = 1.0; // μ(I_{k-1})
    for k in 1..=depth {
        let brother = nondoubling_beta(k) * chain;
        chain *= nondoubling_alpha(k);
        // I_k^b = [2^{-k}, 2^{-k+1}) covers leaves [2^{N-k}, 2^{N-k+1}).
        let lo = 1usize << (depth - k);
        let width = lo;
        for m in &mut masses[lo..lo + width] {
            *m = brother / width as f64;
        }
    }
    masses[0] = chain;
    let shape: Vec<Vec<usize>> = (0..depth).map(|n| vec![2; 1 << n]).collect();
    Ok(Arc::new(FiltrationTree::from_shape(&shape, masses)?))
}

/// 𝔼_n f as a step function; zero-mass cells carry 0.
pub fn conditional_expectation(
    tree: &Arc<FiltrationTree>,
    f: &StepFunction,
    n: usize,
) -> Result<StepFunction> {
    tree.check_level(n)?;
    if !Arc::ptr_eq(tree, f.tree()) && **tree != **f.tree() {
        return Err(Error::TreeMismatch);
    }
    let avg = tree.averages(f.values(), n);
    StepFunction::new(tree.clone(), tree.broadcast(n, &avg))
}

/// JSON tree description accepted by the CLI and the harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    #[serde(default)]
    pub branching: Vec<usize>,
    pub measure: MeasureSpec,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_leaves: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSpec {
    Named(NamedMeasure),
    Explicit { leaf_masses: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedMeasure {
    Uniform,
    Nondoubling,
}

impl TreeSpec {
    pub fn uniform(branching: Vec<usize>) -> Self {
        TreeSpec {
            depth: Some(branching.len()),
            branching,
            measure: MeasureSpec::Named(NamedMeasure::Uniform),
            max_leaves: None,
        }
    }

    pub fn nondoubling(depth: usize) -> Self {
        TreeSpec {
            branching: vec![2; depth],
            measure: MeasureSpec::Named(NamedMeasure::Nondoubling),
            depth: Some(depth),
            max_leaves: None,
        }
    }

    pub fn build(&self) -> Result<Arc<FiltrationTree>> {
        let limit = self.max_leaves.unwrap_or(DEFAULT_MAX_LEAVES);
        if let MeasureSpec::Named(NamedMeasure::Nondoubling) = self.measure {
            let depth = self.depth.unwrap_or(self.branching.len());
            if self.branching.iter().any(|&p| p != 2) {
                return Err(Error::Config("the non-doubling measure lives on a binary tree".into()));
            }
            return build_nondoubling_measure(depth);
        }
        let p_seq = match (self.depth, self.branching.len()) {
            (Some(d), 1) => vec![self.branching[0]; d],
            (Some(d), l) if d != l => {
                return Err(Error::Config(format!(
                    "branching has {l} entries but depth is {d}"
                )))
            }
            _ => self.branching.clone(),
        };
        let measure = match &self.measure {
            MeasureSpec::Explicit { leaf_masses } => PkMeasure::LeafMasses(leaf_masses.clone()),
            _ => PkMeasure::Uniform,
        };
        build_pk_filtration_with_limit(&p_seq, measure, limit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_pk_counts() {
        let t = build_pk_filtration(&[2, 2], PkMeasure::Uniform).unwrap();
        assert_eq!(t.leaf_count(), 4);
        assert!(t.leaf_masses().iter().all(|&m| m == 0.25));
        let t = build_pk_filtration(&[2, 3], PkMeasure::Uniform).unwrap();
        assert_eq!(t.level_len(2), 6);
        for c in t.level(2) {
            assert!((c.mass - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(t.level(2)[1].start, Ratio::new(1, 6));
        assert_eq!(t.branching(), Some(&[2, 3][..]));
    }

    #[test]
    fn pk_errors() {
        assert!(matches!(
            build_pk_filtration(&[2, 1], PkMeasure::Uniform),
            Err(Error::InvalidBranching(1, 1))
        ));
        assert!(matches!(
            build_pk_filtration(&[2], PkMeasure::LeafMasses(vec![1.5, -0.5])),
            Err(Error::NegativeMass(..))
        ));
        assert!(matches!(
            build_pk_filtration(&[2], PkMeasure::LeafMasses(vec![0.5, 0.6])),
            Err(Error::MassSum(_))
        ));
        assert!(build_pk_filtration(&[], PkMeasure::Uniform).is_err());
    }

    #[test]
    fn regularity_examples() {
        // brute force: max parent/child mass ratio.
        let t = build_pk_filtration(&[2, 2, 2], PkMeasure::Uniform).unwrap();
        assert_eq!(t.regularity_constant().unwrap(), 2.0);
        let t = build_pk_filtration(&[2, 3, 4], PkMeasure::Uniform).unwrap();
        assert!((t.regularity_constant().unwrap() - 4.0).abs() < 1e-12);
        let t = build_nondoubling_measure(3).unwrap();
        assert!((t.regularity_constant().unwrap() - 512.0).abs() < 1e-9);
    }

    #[test]
    fn regularity_rejects_zero_mass() {
        let t = build_pk_filtration(&[2], PkMeasure::LeafMasses(vec![1.0, 0.0])).unwrap();
        assert!(matches!(t.regularity_constant(), Err(Error::ZeroMass { .. })));
    }

    #[test]
    fn nondoubling_masses() {
        let t = build_nondoubling_measure(1).unwrap();
        assert_eq!(t.leaf_masses(), &[0.5, 0.5]);
        let t = build_nondoubling_measure(2).unwrap();
        assert!((t.level(2)[0].mass - 15.0 / 32.0).abs() < 1e-15);
        assert!((t.level(2)[1].mass - 1.0 / 32.0).abs() < 1e-15);
        // brother of I_1 is Lebesgue-proportional
        assert_eq!(t.level(2)[2].mass, t.level(2)[3].mass);
    }

    #[test]
    fn m_constants() {
        let t = uniform_dyadic(5).unwrap();
        assert!((t.m_increasing_constant().unwrap() - 0.5).abs() < 1e-15);
        let t = build_nondoubling_measure(10).unwrap();
        let c = t.m_increasing_constant().unwrap();
        assert!(c.is_finite() && c > 0.0);
        for n in 0..t.depth() {
            for i in 0..t.level_len(n) {
                let r = CellRef::new(n, i);
                let m = t.harmonic_mass(r).unwrap();
                let kids: Vec<f64> = t.children(r).map(|k| t.cell(k).mass).collect();
                assert!(m <= kids[0].min(kids[1]) * (1.0 + 1e-15));
                if n > 0 {
                    let mp = t.harmonic_mass(t.parent(r).unwrap()).unwrap();
                    assert!(m / mp <= c * (1.0 + 1e-12));
                }
            }
        }
        let t3 = build_pk_filtration(&[3], PkMeasure::Uniform).unwrap();
        assert!(matches!(t3.m_increasing_constant(), Err(Error::NonBinary { .. })));
    }

    #[test]
    fn conditional_expectation_averages() {
        let t = uniform_dyadic(2).unwrap();
        let f = StepFunction::new(t.clone(), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let e1 = conditional_expectation(&t, &f, 1).unwrap();
        assert_eq!(e1.values(), &[0.5, 0.5, 0.0, 0.0]);
        assert!(conditional_expectation(&t, &f, 3).is_err());
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let t = build_nondoubling_measure(6).unwrap();
        let json = serde_json::to_string(&t.to_dump()).unwrap();
        let back = FiltrationTree::from_dump(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_dump(), t.to_dump());
        assert_eq!(back.id(), t.id());
    }

    #[test]
    fn spec_parsing() {
        let s: TreeSpec =
            serde_json::from_str(r#"{"branching":[2,3],"measure":"uniform","depth":2}"#).unwrap();
        assert_eq!(s.build().unwrap().leaf_count(), 6);
        let s: TreeSpec =
            serde_json::from_str(r#"{"branching":[2],"measure":{"leaf_masses":[0.25,0.75]},"depth":1}"#)
                .unwrap();
        assert_eq!(s.build().unwrap().leaf_masses(), &[0.25, 0.75]);
        let s: TreeSpec = serde_json::from_str(r#"{"measure":"nondoubling","depth":4}"#).unwrap();
        assert_eq!(s.build().unwrap().leaf_count(), 16);
    }

    fn random_tree() -> impl Strategy<Value = Arc<FiltrationTree>> {
        prop::collection::vec(2usize..4, 1..4)
            .prop_flat_map(|p| {
                let leaves: usize = p.iter().product();
                (Just(p), prop::collection::vec(0.01f64..1.0, leaves))
            })
            .prop_map(|(p, w)| {
                let total: f64 = w.iter().sum();
                let masses = w.iter().map(|x| x / total).collect();
                build_pk_filtration(&p, PkMeasure::LeafMasses(masses)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn children_partition_their_parent(t in random_tree()) {
            for n in 0..t.depth() {
                for c in t.level(n) {
                    let kids = &t.level(n + 1)[c.children.clone()];
                    prop_assert_eq!(kids[0].start, c.start);
                    prop_assert_eq!(kids[kids.len() - 1].end, c.end);
                    for w in kids.windows(2) {
                        prop_assert_eq!(w[0].end, w[1].start);
                    }
                    let sum: f64 = kids.iter().map(|k| k.mass).sum();
                    prop_assert!((sum - c.mass).abs() <= 1e-14);
                }
            }
        }

        #[test]
        fn conditional_expectations_tower(t in random_tree(), seed in 0u64..1000) {
            let vals: Vec<f64> = (0..t.leaf_count()).map(|i| ((i as u64 * 7919 + seed) % 13) as f64 - 6.0).collect();
            let f = StepFunction::new(t.clone(), vals).unwrap();
            for n in 0..=t.depth() {
                let en = conditional_expectation(&t, &f, n).unwrap();
                prop_assert!((en.integral() - f.integral()).abs() <= 1e-12);
                for m in 0..=n {
                    let direct = conditional_expectation(&t, &f, m).unwrap();
                    let nested = conditional_expectation(&t, &en, m).unwrap();
                    for (a, b) in direct.values().iter().zip(nested.values()) {
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}