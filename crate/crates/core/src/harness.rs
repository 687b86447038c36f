//! Random corpora, verification suites and report emission.
//!
//! Every suite sweeps a set of trees, measures one or more inequalities per
//! random sample and keeps, per inequality and depth, the sample with the
//! largest ratio `lhs/rhs`. Records carry the seed of that sample so it can be
//! reproduced.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commutator::{
    endpoint_report, h1b_norm, kq_certify, random_b_atom, ratio_of, sandwich_check, spread, EndpointCorpus,
    KqConstant, KqCorpus, OpKind,
};
use crate::decomp::{atomic_decompose, davis_decompose, product_decompose, random_atom, AtomKind};
use crate::error::{Error, Result};
use crate::filtration::{build_nondoubling_measure, uniform_dyadic, CellRef, FiltrationTree, TreeDump, TreeSpec};
use crate::martingale::{
    cond_square_function, doob_maximal, integral, lp, norm, square_function, Martingale, NormKind, StepFunction,
    StepFunctionFile,
};
use crate::operators::{
    dyadic_hilbert, dyadic_hilbert_adjoint, hilbert_on_jump, operator_norm_power_iteration, HaarSystem, WalshContext,
};

/// Environment variable read for the worker count when none is configured.
pub const WORKERS_ENV: &str = "MPROD_WORKERS";

/// Mixes `parts` into `base` (splitmix64 finaliser), giving independent sample seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn name_tag(name: &str) -> u64 {
    derive_seed(0, &name.bytes().map(u64::from).collect::<Vec<_>>())
}

/// Shapes of the BMO symbols fed to the suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BmoProfile {
    /// Random combination of centred one-step jumps.
    HaarMix,
    /// Counts the levels shared with a random leaf: logarithmic growth
    /// along a nested chain of cells.
    LogSpike,
    /// Uniform values in `[−1, 1]`, constant on the cells of a random level.
    BoundedRandom,
}

impl BmoProfile {
    pub const ALL: [BmoProfile; 3] = [BmoProfile::HaarMix, BmoProfile::LogSpike, BmoProfile::BoundedRandom];

    pub fn name(self) -> &'static str {
        match self {
            BmoProfile::HaarMix => "haar-mix",
            BmoProfile::LogSpike => "log-spike",
            BmoProfile::BoundedRandom => "bounded-random",
        }
    }
}

impl FromStr for BmoProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BmoProfile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown BMO profile `{s}`")))
    }
}

fn live_cell(tree: &FiltrationTree, n: usize, rng: &mut impl Rng) -> Option<usize> {
    let live: Vec<usize> = (0..tree.level_len(n)).filter(|&i| tree.level(n)[i].mass > 0.0).collect();
    (!live.is_empty()).then(|| live[rng.random_range(0..live.len())])
}

/// A symbol of the given profile, rescaled into `0.5 ≤ ‖b‖_{BMO₂} ≤ 2` when
/// it falls outside that window.
pub fn generate_bmo(tree: &Arc<FiltrationTree>, profile: BmoProfile, seed: u64) -> StepFunction {
    let b = raw_bmo(tree, profile, seed);
    let bmo = bmo2(&b).unwrap_or(0.0);
    if bmo > 2.0 {
        b.scale(2.0 / bmo)
    } else if bmo > 0.0 && bmo < 0.5 {
        b.scale(0.5 / bmo)
    } else {
        b
    }
}

fn raw_bmo(tree: &Arc<FiltrationTree>, profile: BmoProfile, seed: u64) -> StepFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[name_tag(profile.name())]));
    let depth = tree.depth();
    let leaves = tree.leaf_count();
    let mut values = vec![0.0; leaves];
    match profile {
        BmoProfile::HaarMix => {
            for _ in 0..2 * depth + 2 {
                if depth == 0 {
                    break;
                }
                let k = rng.random_range(0..depth);
                let Some(i) = live_cell(tree, k, &mut rng) else { continue };
                let cell = &tree.level(k)[i];
                let kids: Vec<usize> = cell.children.clone().filter(|&c| tree.level(k + 1)[c].mass > 0.0).collect();
                if kids.len() < 2 {
                    continue;
                }
                let child = &tree.level(k + 1)[kids[rng.random_range(0..kids.len())]];
                let c: f64 = rng.sample(StandardNormal);
                let ratio = child.mass / cell.mass;
                for v in &mut values[cell.leaves.clone()] {
                    *v -= c * ratio;
                }
                for v in &mut values[child.leaves.clone()] {
                    *v += c;
                }
            }
        }
        BmoProfile::LogSpike => {
            let x = live_cell(tree, depth, &mut rng).unwrap_or(0);
            for n in 0..=depth {
                let a = tree.ancestor_of(x, n);
                for v in &mut values[tree.level(n)[a].leaves.clone()] {
                    *v += 1.0;
                }
            }
        }
        BmoProfile::BoundedRandom => {
            let m = if depth == 0 { 0 } else { rng.random_range(1..=depth) };
            let cells: Vec<f64> = (0..tree.level_len(m)).map(|_| rng.random_range(-1.0..=1.0)).collect();
            values = tree.broadcast(m, &cells);
        }
    }
    StepFunction::new(tree.clone(), values).expect("leaf count matches")
}

/// Tails of the leaf-value distribution of random martingales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tails {
    Normal,
    /// Normal values with a fifth of the leaves redrawn from a Student t with 3/2 degrees of freedom.
    Heavy,
}

/// Martingale generated by i.i.d. leaf values; the tails alternate with the seed parity.
pub fn random_martingale(tree: &Arc<FiltrationTree>, seed: u64) -> Martingale {
    let tails = if seed.is_multiple_of(2) { Tails::Normal } else { Tails::Heavy };
    random_martingale_with(tree, tails, seed)
}

pub fn random_martingale_with(tree: &Arc<FiltrationTree>, tails: Tails, seed: u64) -> Martingale {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = StudentT::new(1.5).expect("positive degrees of freedom");
    let values = (0..tree.leaf_count())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            match tails {
                Tails::Heavy if rng.random_bool(0.2) => rng.sample(t),
                _ => z,
            }
        })
        .collect();
    Martingale::from_leaf_values(tree.clone(), values).expect("leaf count matches")
}

/// Serde adapter that keeps non-finite floats representable in JSON.
mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            match Option::<Repr>::deserialize(d)? {
                None => Ok(None),
                Some(Repr::Num(v)) => Ok(Some(v)),
                Some(Repr::Text(t)) => t.parse().map(Some).map_err(serde::de::Error::custom),
            }
        }
    }
}

/// One checked or reported inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub suite: String,
    pub anchor: String,
    #[serde(with = "lossless_f64")]
    pub lhs: f64,
    #[serde(with = "lossless_f64")]
    pub rhs: f64,
    #[serde(with = "lossless_f64")]
    pub ratio: f64,
    #[serde(default, with = "lossless_f64::opt")]
    pub claimed: Option<f64>,
    pub pass: bool,
    pub seed: u64,
    #[serde(default, with = "lossless_f64::opt")]
    pub ms: Option<f64>,
}

fn clean_ratio(lhs: f64, rhs: f64) -> f64 {
    let r = ratio_of(lhs, rhs);
    if r.is_nan() {
        f64::INFINITY
    } else {
        r
    }
}

impl VerificationRecord {
    /// Passes iff `lhs/rhs ≤ claimed + slack`.
    pub fn checked(suite: &str, anchor: &str, lhs: f64, rhs: f64, claimed: f64, slack: f64, seed: u64) -> Self {
        let ratio = clean_ratio(lhs, rhs);
        VerificationRecord {
            suite: suite.into(),
            anchor: anchor.into(),
            lhs,
            rhs,
            ratio,
            claimed: Some(claimed),
            pass: ratio <= claimed + slack,
            seed,
            ms: None,
        }
    }

    /// No constant claimed: passes iff the ratio is finite.
    pub fn reported(suite: &str, anchor: &str, lhs: f64, rhs: f64, seed: u64) -> Self {
        let ratio = clean_ratio(lhs, rhs);
        VerificationRecord {
            suite: suite.into(),
            anchor: anchor.into(),
            lhs,
            rhs,
            ratio,
            claimed: None,
            pass: ratio.is_finite(),
            seed,
            ms: None,
        }
    }

    /// A sample that could not be evaluated.
    pub fn failure(suite: &str, anchor: &str, seed: u64) -> Self {
        VerificationRecord {
            suite: suite.into(),
            anchor: anchor.into(),
            lhs: f64::INFINITY,
            rhs: 1.0,
            ratio: f64::INFINITY,
            claimed: None,
            pass: false,
            seed,
            ms: None,
        }
    }
}

/// Numerical tolerances used by the suites.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Relative error of algebraic identities.
    pub identity: f64,
    /// Exact reconstructions and formulas.
    pub exact: f64,
    /// Oracle comparisons for transforms.
    pub oracle: f64,
    /// Slack added to claimed constants.
    pub slack: f64,
    /// Pointwise paraproduct bound.
    pub pointwise: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            identity: 1e-10,
            exact: 1e-12,
            oracle: 1e-10,
            slack: 1e-9,
            pointwise: 1e-12,
        }
    }
}

/// Everything a verification run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Depths of the dyadic trees used by the generic suites.
    pub depths: Vec<usize>,
    /// Replaces the dyadic trees of the generic suites when given.
    pub trees: Option<Vec<TreeSpec>>,
    /// Samples per depth for the decomposition and paraproduct suites.
    pub samples: usize,
    /// Samples per depth for operator suites.
    pub operator_samples: usize,
    /// Samples per depth for suites involving the Walsh–Cesàro maximal operator.
    pub cesaro_samples: usize,
    /// Samples per depth for the endpoint suite; its maxima need a larger
    /// corpus to settle than the other operator suites.
    pub endpoint_samples: usize,
    /// Endpoint samples per depth for the Walsh–Cesàro maximal operator.
    pub cesaro_endpoint_samples: usize,
    /// Atoms or jumps per depth for the atom-driven operator suites.
    pub atom_samples: usize,
    /// Depths of the unbounded-branching tree used for the fractional integral.
    pub fractional_depths: Vec<usize>,
    /// Depth of the non-doubling tree for the Hilbert-transform suite.
    pub hilbert_depth: usize,
    /// Depth of the Walsh oracle comparisons.
    pub walsh_depth: usize,
    /// Depths of the Walsh–Cesàro atom suite.
    pub cesaro_depths: Vec<usize>,
    pub bmo_profiles: Vec<BmoProfile>,
    pub operators: Vec<OpKind>,
    pub tolerances: Tolerances,
    /// Stores wall-clock milliseconds in the records (breaks byte-identical reports).
    pub record_timing: bool,
    /// Worker threads; falls back to `MPROD_WORKERS`, then to rayon's default.
    pub workers: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            depths: vec![6, 8, 10, 12],
            trees: None,
            samples: 1000,
            operator_samples: 200,
            cesaro_samples: 40,
            endpoint_samples: 1000,
            cesaro_endpoint_samples: 600,
            atom_samples: 500,
            fractional_depths: vec![4, 6, 8],
            hilbert_depth: 10,
            walsh_depth: 8,
            cesaro_depths: (6..=12).collect(),
            bmo_profiles: BmoProfile::ALL.to_vec(),
            operators: OpKind::ALL.to_vec(),
            tolerances: Tolerances::default(),
            record_timing: false,
            workers: None,
        }
    }
}

impl CorpusConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: CorpusConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("samples", self.samples),
            ("operator_samples", self.operator_samples),
            ("cesaro_samples", self.cesaro_samples),
            ("endpoint_samples", self.endpoint_samples),
            ("cesaro_endpoint_samples", self.cesaro_endpoint_samples),
            ("atom_samples", self.atom_samples),
        ];
        for (name, c) in counts {
            if c == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, d) in [
            ("depths", &self.depths),
            ("fractional_depths", &self.fractional_depths),
            ("cesaro_depths", &self.cesaro_depths),
        ] {
            if d.is_empty() || d.contains(&0) {
                return Err(Error::Config(format!("{name} must be non-empty and positive")));
            }
        }
        if self.hilbert_depth == 0 || self.walsh_depth == 0 {
            return Err(Error::Config("hilbert_depth and walsh_depth must be positive".into()));
        }
        if self.bmo_profiles.is_empty() {
            return Err(Error::Config("at least one BMO profile is needed".into()));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("identity", t.identity),
            ("exact", t.exact),
            ("oracle", t.oracle),
            ("slack", t.slack),
            ("pointwise", t.pointwise),
        ] {
            if !(v >= 1e-13) || !v.is_finite() {
                return Err(Error::Config(format!("tolerance `{name}` must be a finite value ≥ 1e-13")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Restricts every depth list to the single depth `d` (where applicable).
    pub fn with_depth(mut self, d: usize) -> Self {
        self.depths = vec![d];
        self.cesaro_depths = vec![d];
        if d <= crate::commutator::FRACTIONAL_BRANCHING.len() {
            self.fractional_depths = vec![d];
        }
        self
    }

    fn generic_trees(&self) -> Result<Vec<Arc<FiltrationTree>>> {
        match &self.trees {
            Some(specs) => specs.iter().map(TreeSpec::build).collect(),
            None => self.depths.iter().map(|&d| uniform_dyadic(d)).collect(),
        }
    }

    fn op_depths(&self, op: OpKind) -> Vec<usize> {
        match op {
            OpKind::Fractional => self.fractional_depths.clone(),
            _ => self.depths.clone(),
        }
    }

    fn op_samples(&self, op: OpKind) -> usize {
        match op {
            OpKind::Cesaro => self.cesaro_samples,
            _ => self.operator_samples,
        }
    }

    fn endpoint_samples(&self, op: OpKind) -> usize {
        match op {
            OpKind::Cesaro => self.cesaro_endpoint_samples,
            _ => self.endpoint_samples,
        }
    }

    fn profile(&self, i: usize) -> BmoProfile {
        self.bmo_profiles[i % self.bmo_profiles.len()]
    }

    fn worker_count(&self) -> Option<usize> {
        self.workers
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|&w| w > 0)
    }
}

/// One measured inequality inside a sample.
struct Obs {
    anchor: String,
    lhs: f64,
    rhs: f64,
    /// `(claimed, slack)`; `None` for reported-only quantities.
    claim: Option<(f64, f64)>,
}

impl Obs {
    fn bound(anchor: impl Into<String>, lhs: f64, rhs: f64, claimed: f64, slack: f64) -> Self {
        Obs {
            anchor: anchor.into(),
            lhs,
            rhs,
            claim: Some((claimed, slack)),
        }
    }

    fn reported(anchor: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Obs {
            anchor: anchor.into(),
            lhs,
            rhs,
            claim: None,
        }
    }
}

struct Ctx<'a> {
    suite: &'static str,
    config: &'a CorpusConfig,
}

impl Ctx<'_> {
    fn seed(&self, parts: &[u64]) -> u64 {
        let mut all = vec![name_tag(self.suite)];
        all.extend_from_slice(parts);
        derive_seed(self.config.seed, &all)
    }

    fn timed(&self, start: Instant, mut records: Vec<VerificationRecord>) -> Vec<VerificationRecord> {
        if self.config.record_timing {
            let ms = start.elapsed().as_secs_f64() * 1e3;
            for r in &mut records {
                r.ms = Some(ms);
            }
        }
        records
    }

    /// Runs `count` samples on `tree` and keeps, per anchor, the worst ratio.
    /// Anchors get an `@d<depth>` suffix; failed samples become failure records.
    fn sweep<F>(&self, tree: &Arc<FiltrationTree>, tag: u64, count: usize, sample: F) -> Vec<VerificationRecord>
    where
        F: Fn(&Arc<FiltrationTree>, u64) -> Result<Vec<Obs>> + Sync,
    {
        let start = Instant::now();
        let depth = tree.depth();
        let outcomes: Vec<(u64, Result<Vec<Obs>>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let seed = self.seed(&[tag, depth as u64, i as u64]);
                let out = catch_unwind(AssertUnwindSafe(|| sample(tree, seed)))
                    .unwrap_or_else(|_| Err(Error::Config("sample panicked".into())));
                (seed, out)
            })
            .collect();
        let mut order: Vec<String> = Vec::new();
        let mut worst: BTreeMap<String, (Obs, u64, f64)> = BTreeMap::new();
        let mut records = Vec::new();
        for (seed, out) in outcomes {
            match out {
                Ok(obs) => {
                    for o in obs {
                        let r = clean_ratio(o.lhs, o.rhs);
                        match worst.get(&o.anchor) {
                            Some((_, _, best)) if !(r > *best) => {}
                            existing => {
                                if existing.is_none() {
                                    order.push(o.anchor.clone());
                                }
                                worst.insert(o.anchor.clone(), (o, seed, r));
                            }
                        }
                    }
                }
                Err(e) => {
                    let mut rec = VerificationRecord::failure(self.suite, &format!("sample-error: {e}@d{depth}"), seed);
                    rec.lhs = f64::INFINITY;
                    records.push(rec);
                }
            }
        }
        for anchor in order {
            let (o, seed, _) = worst.remove(&anchor).unwrap();
            let label = format!("{}@d{depth}", o.anchor);
            records.push(match o.claim {
                Some((c, s)) => VerificationRecord::checked(self.suite, &label, o.lhs, o.rhs, c, s, seed),
                None => VerificationRecord::reported(self.suite, &label, o.lhs, o.rhs, seed),
            });
        }
        self.timed(start, records)
    }

    fn error(&self, anchor: &str, e: &Error) -> VerificationRecord {
        VerificationRecord::failure(self.suite, &format!("{anchor}: {e}"), self.config.seed)
    }

    /// Compares the worst ratios of `anchor` across depths: `lhs = max`,
    /// `rhs = min`, passing when `max/min ≤ claimed` (or always, reported).
    fn stability(&self, records: &[VerificationRecord], anchor: &str, claimed: Option<f64>) -> VerificationRecord {
        let prefix = format!("{anchor}@d");
        let values: Vec<f64> = records
            .iter()
            .filter(|r| r.anchor.starts_with(&prefix))
            .map(|r| r.ratio)
            .collect();
        let label = format!("{anchor} (max/min over depths)");
        let hi = values.iter().cloned().fold(0.0, f64::max);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let s = spread(&values);
        let mut rec = match claimed {
            Some(c) => VerificationRecord::checked(self.suite, &label, hi, lo, c, 0.0, self.config.seed),
            None => VerificationRecord::reported(self.suite, &label, hi, lo, self.config.seed),
        };
        rec.ratio = s;
        rec.pass = if values.len() < 2 && values.iter().all(|v| v.is_finite()) {
            true
        } else {
            match claimed {
                Some(c) => s <= c,
                None => s.is_finite(),
            }
        };
        rec
    }
}

/// Floating residue allowed outside an atom's support, relative to its largest value.
pub const SUPPORT_TOLERANCE: f64 = 1e-12;

/// Reading of "stable within ±30%" as a bound on max/min.
pub const STABLE_30: f64 = 1.3 / 0.7;
/// Reading of "stable within ±50%" as a bound on max/min.
pub const STABLE_50: f64 = 3.0;

type SuiteFn = fn(&Ctx) -> Vec<VerificationRecord>;

const SUITES: &[(&str, SuiteFn)] = &[
    ("product-identity", suite_product_identity),
    ("paraproduct-duality", suite_paraproduct_duality),
    ("atom-bounds", suite_atom_bounds),
    ("paraproduct-atoms", suite_paraproduct_atoms),
    ("jump-paraproduct", suite_jump_paraproduct),
    ("square-paraproduct-pointwise", suite_square_pointwise),
    ("log-scalar-inequality", suite_log_scalar),
    ("davis-atomic-reconstruction", suite_davis_atomic),
    ("dyadic-hilbert", suite_dyadic_hilbert),
    ("walsh-system", suite_walsh),
    ("commutator-sandwich", suite_sandwich),
    ("kq-certificate", suite_kq),
    ("commutator-endpoints", suite_endpoints),
    ("cesaro-atom-oscillation", suite_cesaro_atoms),
];

/// Registered suite names, in execution order.
pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

fn with_pool<T: Send>(config: &CorpusConfig, job: impl FnOnce() -> T + Send) -> Result<T> {
    match config.worker_count() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

/// Runs one registered suite. Mathematical failures become failing records;
/// only an unknown name or an invalid config is an error.
pub fn run_suite(name: &str, config: &CorpusConfig) -> Result<Vec<VerificationRecord>> {
    config.validate()?;
    let (suite, run) = SUITES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::UnknownSuite(name.to_string()))?;
    with_pool(config, || {
        let ctx = Ctx { suite, config };
        catch_unwind(AssertUnwindSafe(|| run(&ctx)))
            .unwrap_or_else(|_| vec![VerificationRecord::failure(suite, "suite panicked", config.seed)])
    })
}

/// Runs every registered suite in order.
pub fn run_all(config: &CorpusConfig) -> Result<Vec<VerificationRecord>> {
    let mut out = Vec::new();
    for name in suite_names() {
        out.extend(run_suite(name, config)?);
    }
    Ok(out)
}

fn bmo2(b: &StepFunction) -> Result<f64> {
    norm(&b.martingale(), NormKind::Bmo(2.0))
}

/// A random simple `(s,∞)`-atom (or other kind) with its level.
fn sample_atom(tree: &Arc<FiltrationTree>, kind: AtomKind, seed: u64, b: Option<&StepFunction>) -> Result<(usize, StepFunction)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = tree.depth();
    let mut last = Error::InvalidAtom("no admissible cell".into());
    for _ in 0..32 {
        let n = if kind == AtomKind::Jump {
            rng.random_range(1..=depth)
        } else {
            rng.random_range(0..depth)
        };
        let level = if kind == AtomKind::Jump { n - 1 } else { n };
        let Some(cell) = live_cell(tree, level, &mut rng) else { continue };
        match random_atom(tree, n, &[cell], kind, rng.random(), b) {
            Ok(c) => return Ok((n, c.function)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn suite_product_identity(ctx: &Ctx) -> Vec<VerificationRecord> {
    let trees = match ctx.config.generic_trees() {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("trees", &e)],
    };
    let tol = ctx.config.tolerances.identity;
    trees
        .iter()
        .flat_map(|tree| {
            ctx.sweep(tree, 0, ctx.config.samples, |tree, seed| {
                let f = random_martingale(tree, seed);
                let g = random_martingale(tree, seed ^ 0x9);
                let d = product_decompose(&f, &g)?;
                Ok(vec![Obs::bound("fn·gn = Π₁n + Π₂n + Ln (relative error)", d.identity_error(&f, &g), 1.0, tol, 0.0)])
            })
        })
        .collect()
}

fn suite_paraproduct_duality(ctx: &Ctx) -> Vec<VerificationRecord> {
    let trees = match ctx.config.generic_trees() {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("trees", &e)],
    };
    let slack = ctx.config.tolerances.slack;
    trees
        .iter()
        .flat_map(|tree| {
            ctx.sweep(tree, 0, ctx.config.samples, |tree, seed| {
                // alternate between random martingales and scaled atoms for f
                let f = if seed % 3 == 0 {
                    sample_atom(tree, AtomKind::SimpleSInf, seed, None)?.1.martingale()
                } else {
                    random_martingale(tree, seed)
                };
                let g = generate_bmo(tree, ctx.config.profile(seed as usize), seed ^ 0x7);
                let gm = g.martingale();
                let d = product_decompose(&f, &gm)?;
                let rhs = norm(&f, NormKind::H1)? * norm(&gm, NormKind::Bmo(2.0))?;
                Ok(vec![Obs::bound(
                    "Σk 𝔼|dkf·dkg| ≤ √2‖f‖H1‖g‖BMO2",
                    d.l.variation_norm(),
                    rhs,
                    std::f64::consts::SQRT_2,
                    slack,
                )])
            })
        })
        .collect()
}

fn suite_atom_bounds(ctx: &Ctx) -> Vec<VerificationRecord> {
    let trees = match ctx.config.generic_trees() {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("trees", &e)],
    };
    let slack = ctx.config.tolerances.slack;
    trees
        .iter()
        .flat_map(|tree| {
            ctx.sweep(tree, 0, ctx.config.samples, |tree, seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.random_range(0..tree.depth());
                let cell = live_cell(tree, n, &mut rng).ok_or(Error::InvalidAtom("no live cell".into()))?;
                let c = random_atom(tree, n, &[cell], AtomKind::SimpleSInf, rng.random(), None)?;
                let a = c.function.values();
                let a_sup = c.function.sup_norm();
                let m = c.function.martingale();
                let ops = [
                    ("M(a)", doob_maximal(&m), 2.0),
                    ("S(a)", square_function(&m), 1.0),
                    ("s(a)", cond_square_function(&m), 1.0),
                ];
                let pa = c.support_mass();
                let mask = c.support.leaf_mask(tree);
                let mut obs = Vec::new();
                let mut leaked: f64 = 0.0;
                for p in [1.0, 1.5, 2.0] {
                    let rhs = pa.powf(1.0 / p - 1.0);
                    for (name, g, k) in &ops {
                        obs.push(Obs::bound(
                            format!("‖{name}‖p ≤ {k}·ℙ(A)^(1/p−1), p={p}"),
                            lp(tree, g.values(), p),
                            rhs,
                            *k,
                            slack,
                        ));
                    }
                    obs.push(Obs::bound(format!("‖a‖p ≤ ℙ(A)^(1/p−1), p={p}"), lp(tree, a, p), rhs, 1.0, slack));
                }
                for (_, g, _) in &ops {
                    for (v, &inside) in g.values().iter().zip(&mask) {
                        if !inside {
                            leaked = leaked.max(v.abs());
                        }
                    }
                }
                for (v, &inside) in a.iter().zip(&mask) {
                    if !inside {
                        leaked = leaked.max(v.abs());
                    }
                }
                let scale = ops.iter().map(|(_, g, _)| g.sup_norm()).fold(a_sup, f64::max);
                obs.push(Obs::bound(
                    "supp a, M(a), S(a), s(a) ⊂ A (largest value outside, relative)",
                    leaked,
                    scale,
                    0.0,
                    SUPPORT_TOLERANCE,
                ));
                Ok(obs)
            })
        })
        .collect()
}

fn suite_paraproduct_atoms(ctx: &Ctx) -> Vec<VerificationRecord> {
    let trees = match ctx.config.generic_trees() {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("trees", &e)],
    };
    let slack = ctx.config.tolerances.slack;
    trees
        .iter()
        .flat_map(|tree| {
            ctx.sweep(tree, 0, ctx.config.samples, |tree, seed| {
                let (n, a) = sample_atom(tree, AtomKind::SimpleSInf, seed, None)?;
                let am = a.martingale();
                let g = generate_bmo(tree, ctx.config.profile(seed as usize), seed ^ 0x3);
                let gm = g.martingale();
                let pi1 = product_decompose(&am, &gm)?.pi1;
                let first = Obs::bound(
                    "‖Π₁(a,g)‖h1 ≤ 2‖g‖bmo2",
                    norm(&pi1, NormKind::H1Conditional)?,
                    norm(&gm, NormKind::BmoConditional(2.0))?,
                    2.0,
                    slack,
                );
                let bp = if n == 0 {
                    vec![0.0; tree.leaf_count()]
                } else {
                    tree.broadcast(n - 1, gm.level(n - 1))
                };
                let centred: Vec<f64> = g.values().iter().zip(&bp).map(|(x, y)| x - y).collect();
                let hm = Martingale::from_leaf_values(tree.clone(), centred)?;
                let pi2 = product_decompose(&am, &hm)?.pi2;
                let second = Obs::bound(
                    "‖Π₂(a,b−b_{n−1})‖H1 ≤ 2‖b‖BMO2",
                    norm(&pi2, NormKind::H1)?,
                    norm(&gm, NormKind::Bmo(2.0))?,
                    2.0,
                    slack,
                );
                Ok(vec![first, second])
            })
        })
        .collect()
}

fn suite_jump_paraproduct(ctx: &Ctx) -> Vec<VerificationRecord> {
    let trees = match ctx.config.generic_trees() {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("trees", &e)],
    };
    let slack = ctx.config.tolerances.slack;
    trees
        .iter()
        .flat_map(|tree| {
            ctx.sweep(tree, 0, ctx.config.samples, |tree, seed| {
                let (_, jump) = sample_atom(tree, AtomKind::Jump, seed, None)?;
                let scale = ChaCha8Rng::seed_from_u64(seed ^ 0x11).random_range(0.1..10.0);
                let fm = jump.scale(scale).martingale();
                let g = generate_bmo(tree, ctx.config.profile(seed as usize), seed ^ 0x5);
                let gm = g.martingale();
                let pi1 = product_decompose(&fm, &gm)?.pi1;
                Ok(vec![Obs::bound(
                    "‖Π₁(f,g)‖h1 ≤ ‖g‖bmo2‖f‖h1d for a single jump f",
                    norm(&pi1, NormKind::H1Conditional)?,
                    norm(&gm, NormKind::BmoConditional(2.0))? * norm(&fm, NormKind::H1Jump)?,
                    1.0,
                    slack,
                )])
            })
        })
        .collect()
}

fn suite_square_pointwise(ctx: &Ctx) -> Vec<VerificationRecord> {
    let trees = match ctx.config.generic_trees() {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("trees", &e)],
    };
    let tol = ctx.config.tolerances.pointwise;
    trees
        .iter()
        .flat_map(|tree| {
            ctx.sweep(tree, 0, ctx.config.samples, |tree, seed| {
                let f = random_martingale(tree, seed);
                let g = if seed % 2 == 0 {
                    random_martingale(tree, seed ^ 0x21)
                } else {
                    generate_bmo(tree, ctx.config.profile(seed as usize), seed).martingale()
                };
                let pi2 = product_decompose(&f, &g)?.pi2;
                let lhs = square_function(&pi2);
                let (mg, sf) = (doob_maximal(&g), square_function(&f));
                let mut worst = (0.0, 1.0, 0.0);
                for x in 0..tree.leaf_count() {
                    let (l, r) = (lhs.values()[x], mg.values()[x] * sf.values()[x]);
                    let q = clean_ratio(l, r);
                    if q > worst.2 {
                        worst = (l, r, q);
                    }
                }
                Ok(vec![Obs::bound("S(Π₂(f,g)) ≤ M(g)·S(f) at every leaf", worst.0, worst.1, 1.0, tol)])
            })
        })
        .collect()
}

/// `st/log(e+st)` and `t + e^s`.
pub fn log_scalar_sides(s: f64, t: f64) -> (f64, f64) {
    let st = s * t;
    (st / (std::f64::consts::E + st).ln(), t + s.exp())
}

fn suite_log_scalar(ctx: &Ctx) -> Vec<VerificationRecord> {
    let start = Instant::now();
    let grid: Vec<f64> = (0..200).map(|i| 10f64.powf(-3.0 + 6.0 * (i as f64 + 0.5) / 200.0)).collect();
    let mut worst = (0.0, 1.0, -1.0, 0usize);
    for (i, &s) in grid.iter().enumerate() {
        for &t in &grid {
            let (l, r) = log_scalar_sides(s, t);
            let q = clean_ratio(l, r);
            if q > worst.2 {
                worst = (l, r, q, i);
            }
        }
    }
    let rec = VerificationRecord::checked(
        ctx.suite,
        "st/log(e+st) ≤ t + e^s on a 200×200 log grid",
        worst.0,
        worst.1,
        1.0,
        0.0,
        ctx.config.seed,
    );
    ctx.timed(start, vec![rec])
}

fn suite_davis_atomic(ctx: &Ctx) -> Vec<VerificationRecord> {
    let trees = match ctx.config.generic_trees() {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("trees", &e)],
    };
    let exact = ctx.config.tolerances.exact;
    let mut records: Vec<VerificationRecord> = trees
        .iter()
        .flat_map(|tree| {
            ctx.sweep(tree, 0, ctx.config.operator_samples, |tree, seed| {
                let f = random_martingale(tree, seed);
                let (f1, fd) = davis_decompose(&f)?;
                let scale = f.levels().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
                let mut err: f64 = 0.0;
                for n in 0..=tree.depth() {
                    for i in 0..tree.level_len(n) {
                        err = err.max((f1.level(n)[i] + fd.level(n)[i] - f.level(n)[i]).abs());
                    }
                }
                let h1 = norm(&f, NormKind::H1)?;
                // Atomic decomposition of the mean-zero part.
                let centred = f.terminal().map(|v| v - f.initial()).martingale();
                let atoms = atomic_decompose(&centred)?;
                let mut rebuilt = vec![0.0; tree.leaf_count()];
                let mut mu_sum = 0.0;
                for c in &atoms {
                    mu_sum += c.coefficient.abs();
                    for (r, v) in rebuilt.iter_mut().zip(c.function.values()) {
                        *r += c.coefficient * v;
                    }
                }
                let target = centred.terminal();
                let tscale = target.sup_norm().max(f64::MIN_POSITIVE);
                let rerr = rebuilt
                    .iter()
                    .zip(target.values())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                Ok(vec![
                    Obs::bound("f¹ + fᵈ = f (relative error)", err / scale, 1.0, exact, 0.0),
                    Obs::bound("Σ μk·aᵏ = f (relative error)", rerr / tscale, 1.0, exact, 0.0),
                    Obs::reported("‖f¹‖h1 ≤ C‖f‖H1", norm(&f1, NormKind::H1Conditional)?, h1),
                    Obs::reported("‖fᵈ‖h1d ≤ C‖f‖H1", norm(&fd, NormKind::H1Jump)?, h1),
                    Obs::reported("Σ|μk| ≤ C‖f‖h1", mu_sum, norm(&centred, NormKind::H1Conditional)?),
                ])
            })
        })
        .collect();
    let stab: Vec<VerificationRecord> = ["‖f¹‖h1 ≤ C‖f‖H1", "‖fᵈ‖h1d ≤ C‖f‖H1", "Σ|μk| ≤ C‖f‖h1"]
        .iter()
        .map(|a| ctx.stability(&records, a, Some(STABLE_30)))
        .collect();
    records.extend(stab);
    records
}

fn suite_dyadic_hilbert(ctx: &Ctx) -> Vec<VerificationRecord> {
    let start = Instant::now();
    let cfg = ctx.config;
    let depth = cfg.hilbert_depth;
    let tree = match build_nondoubling_measure(depth) {
        Ok(t) => t,
        Err(e) => return vec![ctx.error("tree", &e)],
    };
    let sys = match HaarSystem::new(tree.clone()) {
        Ok(s) => s,
        Err(e) => return vec![ctx.error("haar system", &e)],
    };
    let tol = cfg.tolerances;
    let suite = ctx.suite;
    let tag = |s: &str| format!("{s}@d{depth}");
    let mut out = Vec::new();

    let seed = ctx.seed(&[1]);
    let est = operator_norm_power_iteration(&tree, |v| sys.apply(v), |v| sys.apply_adjoint(v), 200, seed);
    out.push(VerificationRecord::checked(suite, &tag("‖H_𝒟 f‖L²(μ) ≤ 2‖f‖L²(μ) (power iteration)"), est, 1.0, 2.0, tol.slack, seed));

    // ‖h_I‖_{L¹(μ)} = 2√m(I) on every internal cell, and orthonormality on sampled pairs.
    let internal: Vec<CellRef> = (0..depth)
        .flat_map(|n| (0..tree.level_len(n)).map(move |i| CellRef::new(n, i)))
        .collect();
    let mut l1_err: f64 = 0.0;
    for &r in &internal {
        if let Ok(h) = sys.haar_function(r) {
            let expect = 2.0 * sys.m(r).sqrt();
            l1_err = l1_err.max((lp(&tree, h.values(), 1.0) - expect).abs() / expect);
        }
    }
    out.push(VerificationRecord::checked(suite, &tag("‖h_I‖L¹(μ) = 2√m(I) (relative error)"), l1_err, 1.0, tol.exact, 0.0, cfg.seed));
    let seed = ctx.seed(&[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<CellRef> = (0..64).map(|_| internal[rng.random_range(0..internal.len())]).collect();
    let funcs: Vec<StepFunction> = picks.iter().filter_map(|&r| sys.haar_function(r).ok()).collect();
    let mut ortho: f64 = 0.0;
    for i in 0..funcs.len() {
        for j in 0..funcs.len() {
            let p: Vec<f64> = funcs[i].values().iter().zip(funcs[j].values()).map(|(a, b)| a * b).collect();
            let expect = if picks[i] == picks[j] { 1.0 } else { 0.0 };
            ortho = ortho.max((integral(&tree, &p) - expect).abs());
        }
    }
    out.push(VerificationRecord::checked(suite, &tag("⟨h_I, h_J⟩ = δ_IJ (sampled pairs)"), ortho, 1.0, tol.exact, 0.0, seed));

    out.extend(ctx.sweep(&tree, 3, cfg.operator_samples.min(50), |tree, seed| {
        let f = random_martingale(tree, seed).terminal();
        let g = random_martingale(tree, seed ^ 0x1).terminal();
        let hf = dyadic_hilbert(&sys, &f)?;
        let hg = dyadic_hilbert_adjoint(&sys, &g)?;
        let lhs: Vec<f64> = hf.values().iter().zip(g.values()).map(|(a, b)| a * b).collect();
        let rhs: Vec<f64> = f.values().iter().zip(hg.values()).map(|(a, b)| a * b).collect();
        let scale = lp(tree, hf.values(), 2.0) * lp(tree, g.values(), 2.0);
        let err = (integral(tree, &lhs) - integral(tree, &rhs)).abs();
        Ok(vec![Obs::bound("⟨H_𝒟 f, g⟩ = ⟨f, H_𝒟* g⟩ (relative error)", err, scale, tol.exact, 0.0)])
    }));

    out.extend(ctx.sweep(&tree, 4, cfg.atom_samples, |tree, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=tree.depth());
        let cell = live_cell(tree, n - 1, &mut rng).ok_or(Error::InvalidAtom("no live cell".into()))?;
        let w = random_atom(tree, n, &[cell], AtomKind::Jump, rng.random(), None)?;
        let single = hilbert_on_jump(&sys, &w)?;
        let full = dyadic_hilbert(&sys, &w.function)?;
        let scale = full.sup_norm().max(w.function.sup_norm()).max(f64::MIN_POSITIVE);
        let err = single.values().iter().zip(full.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok(vec![Obs::bound("single-level formula for H_𝒟 on jumps (relative error)", err, scale, tol.exact, 0.0)])
    }));
    let _ = start;
    out
}

fn suite_walsh(ctx: &Ctx) -> Vec<VerificationRecord> {
    let start = Instant::now();
    let cfg = ctx.config;
    let depth = cfg.walsh_depth;
    let w = match WalshContext::new(depth) {
        Ok(w) => w,
        Err(e) => return vec![ctx.error("walsh context", &e)],
    };
    let tree = w.tree().clone();
    let size = w.size();
    let tol = cfg.tolerances;
    let suite = ctx.suite;
    let tag = |s: &str| format!("{s}@d{depth}");
    let mut out = Vec::new();

    // D_{2^m} = 2^m·1_{[0, 2^{−m})}
    let mut dir_err: f64 = 0.0;
    for m in 0..=depth {
        match w.dirichlet_kernel(1 << m) {
            Ok(d) => {
                for (j, v) in d.values().iter().enumerate() {
                    let expect = if j < size >> m { (1u64 << m) as f64 } else { 0.0 };
                    dir_err = dir_err.max((v - expect).abs());
                }
            }
            Err(e) => out.push(ctx.error("dirichlet kernel", &e)),
        }
    }
    out.push(VerificationRecord::checked(suite, &tag("D_{2^m} = 2^m·1[0,2^−m)"), dir_err, 1.0, tol.exact, 0.0, cfg.seed));

    let samples = 8usize;
    let fs: Vec<(u64, StepFunction)> = (0..samples)
        .map(|i| {
            let seed = ctx.seed(&[i as u64]);
            (seed, random_martingale(&tree, seed).terminal())
        })
        .collect();
    let mut worst = |anchor: &str, claimed: f64, eval: &dyn Fn(&StepFunction) -> Result<f64>| {
        let mut best: Option<(f64, u64)> = None;
        for (seed, f) in &fs {
            match eval(f) {
                Ok(e) => {
                    if best.is_none_or(|b| e > b.0) {
                        best = Some((e, *seed));
                    }
                }
                Err(err) => out.push(ctx.error(anchor, &err)),
            }
        }
        if let Some((e, seed)) = best {
            out.push(VerificationRecord::checked(suite, &tag(anchor), e, 1.0, claimed, 0.0, seed));
        }
    };
    worst("S_{2^m} f = 𝔼_m f", tol.exact, &|f| {
        let mut e: f64 = 0.0;
        let scale = f.sup_norm();
        for m in 0..=depth {
            let s = w.walsh_partial_sum(1 << m, f)?;
            let c = f.conditional(m)?;
            for (a, b) in s.values().iter().zip(c.values()) {
                e = e.max((a - b).abs() / scale);
            }
        }
        Ok(e)
    });
    worst("fast Walsh transform = direct inner products", tol.oracle, &|f| {
        let fast = w.fwht(f)?;
        let mut e: f64 = 0.0;
        for (k, c) in fast.iter().enumerate() {
            let direct: f64 = (0..size).map(|j| f.values()[j] * w.walsh_value(k, j)).sum::<f64>() / size as f64;
            e = e.max((c - direct).abs());
        }
        Ok(e / f.sup_norm())
    });
    worst("σ_n spectral = Fejér-kernel convolution", tol.oracle, &|f| {
        let mut e: f64 = 0.0;
        for n in [1, 2, 3, 5, 7, 16, 31, 100, size / 2 + 1, size].into_iter().filter(|&n| n <= size) {
            let spectral = w.cesaro_mean(n, f)?;
            let conv = w.dyadic_convolution(f, &w.fejer_kernel(n)?)?;
            for (a, b) in spectral.values().iter().zip(conv.values()) {
                e = e.max((a - b).abs());
            }
        }
        Ok(e / f.sup_norm())
    });
    ctx.timed(start, out)
}

fn op_trees(config: &CorpusConfig, op: OpKind) -> Vec<Result<Arc<FiltrationTree>>> {
    config.op_depths(op).into_iter().map(|d| op.tree(d)).collect()
}

fn suite_sandwich(ctx: &Ctx) -> Vec<VerificationRecord> {
    let cfg = ctx.config;
    let tol = cfg.tolerances;
    let mut out = Vec::new();
    for &op in &cfg.operators {
        for (j, tree) in op_trees(cfg, op).into_iter().enumerate() {
            let tree = match tree {
                Ok(t) => t,
                Err(e) => {
                    out.push(ctx.error(op.name(), &e));
                    continue;
                }
            };
            let built = match op.build(tree.clone(), ctx.seed(&[j as u64, 0x0b])) {
                Ok(b) => b,
                Err(e) => {
                    out.push(ctx.error(op.name(), &e));
                    continue;
                }
            };
            let name = op.name();
            out.extend(ctx.sweep(&tree, name_tag(name), cfg.op_samples(op), |tree, seed| {
                let f = random_martingale(tree, seed).terminal();
                let b = generate_bmo(tree, cfg.profile(seed as usize), seed ^ 0x2);
                let r = sandwich_check(built.as_ref(), &f, &b)?;
                let mut obs = vec![
                    Obs::bound(format!("|[T,b]f| ≤ R + |T(L)|, T={name}"), r.upper_violation, 1.0, tol.slack, 0.0),
                    Obs::bound(format!("|T(L)| − R ≤ |[T,b]f|, T={name}"), r.lower_violation, 1.0, tol.slack, 0.0),
                ];
                if let Some(res) = r.linear_residual {
                    obs.push(Obs::bound(
                        format!("[T,b]f = T(Π₁) + U + T(L) (relative residual), T={name}"),
                        res,
                        1.0,
                        tol.identity,
                        0.0,
                    ));
                }
                Ok(obs)
            }));
        }
    }
    out
}

fn suite_kq(ctx: &Ctx) -> Vec<VerificationRecord> {
    let cfg = ctx.config;
    let suite = ctx.suite;
    let slack = cfg.tolerances.slack;
    let mut out = Vec::new();
    for &op in &cfg.operators {
        let start = Instant::now();
        let corpus = KqCorpus {
            depths: cfg.op_depths(op),
            samples: cfg.op_samples(op),
            seed: ctx.seed(&[name_tag(op.name())]),
            profiles: cfg.bmo_profiles.clone(),
        };
        let cert = match kq_certify(op, op.default_q(), &corpus) {
            Ok(c) => c,
            Err(e) => {
                out.push(ctx.error(op.name(), &e));
                continue;
            }
        };
        let mut recs = Vec::new();
        for row in &cert.rows {
            for e in &row.estimates {
                let anchor = format!("{}/{}@d{}", op.name(), e.constant.name(), row.depth);
                let explicit = match (op, e.constant) {
                    (OpKind::Maximal, KqConstant::AtomOscillation) => Some(2.0),
                    (OpKind::Maximal, KqConstant::JumpOscillation) => Some(1.0),
                    _ => None,
                };
                recs.push(match explicit {
                    Some(c) => VerificationRecord::checked(suite, &anchor, e.lhs, e.rhs, c, slack, e.witness_seed),
                    None => {
                        let mut r = VerificationRecord::reported(suite, &anchor, e.lhs, e.rhs, e.witness_seed);
                        r.ratio = e.value;
                        r.pass = e.value.is_finite();
                        r
                    }
                });
            }
            if let Some(err) = row.shortcut_error {
                recs.push(VerificationRecord::checked(
                    suite,
                    &format!("{}/commuting identity T(b_(n−1)a) = b_(n−1)T(a) (relative defect)@d{}", op.name(), row.depth),
                    err,
                    1.0,
                    cfg.tolerances.exact,
                    0.0,
                    cert.seed,
                ));
            }
        }
        for c in KqConstant::ALL {
            let claimed = KqConstant::LOCAL.contains(&c).then_some(STABLE_50);
            let anchor = format!("{}/{}", op.name(), c.name());
            let stab = ctx.stability(&recs, &anchor, claimed);
            recs.push(stab);
        }
        out.extend(ctx.timed(start, recs));
    }
    out
}

/// Keeps, per anchor, the record with the largest ratio (first one on ties).
fn worst_per_anchor(records: Vec<VerificationRecord>) -> Vec<VerificationRecord> {
    let mut order: Vec<String> = Vec::new();
    let mut best: BTreeMap<String, VerificationRecord> = BTreeMap::new();
    for r in records {
        match best.get(&r.anchor) {
            Some(b) if !(r.ratio > b.ratio) && b.pass <= r.pass => {}
            existing => {
                if existing.is_none() {
                    order.push(r.anchor.clone());
                }
                best.insert(r.anchor.clone(), r);
            }
        }
    }
    order.into_iter().map(|a| best.remove(&a).unwrap()).collect()
}

/// Symbols drawn per BMO profile and depth in the endpoint suite.
const ENDPOINT_SYMBOLS_PER_PROFILE: usize = 4;

fn suite_endpoints(ctx: &Ctx) -> Vec<VerificationRecord> {
    let cfg = ctx.config;
    let suite = ctx.suite;
    let mut out = Vec::new();
    for &op in &cfg.operators {
        let mut recs = Vec::new();
        for tree in op_trees(cfg, op) {
            let start = Instant::now();
            let tree = match tree {
                Ok(t) => t,
                Err(e) => {
                    recs.push(ctx.error(op.name(), &e));
                    continue;
                }
            };
            let depth = tree.depth();
            let seed = ctx.seed(&[name_tag(op.name()), depth as u64]);
            let built = match op.build(tree.clone(), seed) {
                Ok(b) => b,
                Err(e) => {
                    recs.push(ctx.error(op.name(), &e));
                    continue;
                }
            };
            // several symbols per profile; the depth's record is the worst of them
            let mut per_depth = Vec::new();
            let symbols = ENDPOINT_SYMBOLS_PER_PROFILE * cfg.bmo_profiles.len();
            for j in 0..symbols {
                let b = generate_bmo(&tree, cfg.profile(j), derive_seed(seed, &[j as u64]));
                let corpus = EndpointCorpus {
                    samples: cfg.endpoint_samples(op).div_ceil(symbols),
                    seed: derive_seed(seed, &[j as u64, 1]),
                    max_atoms: 3,
                    suite: suite.to_string(),
                };
                match endpoint_report(built.as_ref(), &b, &corpus) {
                    Ok(r) => per_depth.extend(r),
                    Err(e) => per_depth.push(ctx.error(op.name(), &e)),
                }
            }
            recs.extend(ctx.timed(start, worst_per_anchor(per_depth)));
        }
        for anchor in ["weak-endpoint", "strong-endpoint"] {
            let stab = ctx.stability(&recs, &format!("{anchor}/{}", op.name()), Some(STABLE_50));
            recs.push(stab);
        }
        out.extend(recs);
    }
    // h1b norm of single (b,∞)-atoms, relative to ‖b‖_BMO₂. The worst sample
    // sits in a heavy tail (bounded-random symbols), so depth stability is
    // read off the 99th percentile and the maxima are only reported.
    let anchor = "h1b norm of a single (b,∞)-atom over ‖b‖BMO2";
    let p99 = format!("{anchor}, 99th percentile");
    let trees = match cfg.generic_trees() {
        Ok(t) => t,
        Err(e) => return [out, vec![ctx.error("trees", &e)]].concat(),
    };
    let mut atoms = Vec::new();
    for tree in &trees {
        let start = Instant::now();
        let depth = tree.depth();
        let mut ratios: Vec<(f64, f64, f64, u64)> = Vec::new();
        let mut recs = Vec::new();
        let samples: Vec<(u64, Result<(f64, f64)>)> = (0..cfg.atom_samples)
            .into_par_iter()
            .map(|i| {
                let seed = ctx.seed(&[0xa7, depth as u64, i as u64]);
                let run = || -> Result<(f64, f64)> {
                    let b = generate_bmo(tree, cfg.profile(seed as usize), seed ^ 0xb);
                    let (_, a) = random_b_atom(&b, seed).ok_or(Error::InvalidAtom("no admissible b-atom".into()))?;
                    Ok((h1b_norm(&b, &a)?, bmo2(&b)?))
                };
                let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err(Error::Config("sample panicked".into())));
                (seed, out)
            })
            .collect();
        for (seed, out) in samples {
            match out {
                Ok((lhs, rhs)) => ratios.push((clean_ratio(lhs, rhs), lhs, rhs, seed)),
                Err(e) => recs.push(VerificationRecord::failure(ctx.suite, &format!("sample-error: {e}@d{depth}"), seed)),
            }
        }
        ratios.sort_by(|x, y| x.0.total_cmp(&y.0));
        if let Some(&(_, lhs, rhs, seed)) = ratios.last() {
            recs.push(VerificationRecord::reported(ctx.suite, &format!("{anchor}@d{depth}"), lhs, rhs, seed));
            let (_, lhs, rhs, seed) = ratios[quantile_index(ratios.len(), 0.99)];
            recs.push(VerificationRecord::reported(ctx.suite, &format!("{p99}@d{depth}"), lhs, rhs, seed));
        }
        atoms.extend(ctx.timed(start, recs));
    }
    let max_stab = ctx.stability(&atoms, anchor, None);
    let p99_stab = ctx.stability(&atoms, &p99, Some(STABLE_50));
    atoms.push(max_stab);
    atoms.push(p99_stab);
    out.extend(atoms);
    out
}

/// Index of the `q`-quantile in a sorted sample of length `n ≥ 1`
/// (nearest rank).
fn quantile_index(n: usize, q: f64) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n) - 1
}

fn suite_cesaro_atoms(ctx: &Ctx) -> Vec<VerificationRecord> {
    let cfg = ctx.config;
    let anchor = "‖(b − b_parent(Q))σ(a)‖1 ≤ C‖b‖BMO2 on simple ∞-atoms";
    let mut out = Vec::new();
    for &depth in &cfg.cesaro_depths {
        let w = match WalshContext::new(depth) {
            Ok(w) => w,
            Err(e) => {
                out.push(ctx.error("walsh context", &e));
                continue;
            }
        };
        let tree = w.tree().clone();
        out.extend(ctx.sweep(&tree, 0, cfg.atom_samples, |tree, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(0..tree.depth());
            let cell = rng.random_range(0..tree.level_len(n));
            let a = random_atom(tree, n, &[cell], AtomKind::SimpleInf, rng.random(), None)?.function;
            let b = generate_bmo(tree, cfg.profile(seed as usize), seed ^ 0x4);
            let parent = if n == 0 { CellRef::root() } else { CellRef::new(n - 1, tree.level(n)[cell].parent.unwrap()) };
            let pc = tree.cell(parent);
            let b_parent = b.values()[pc.leaves.clone()]
                .iter()
                .zip(&tree.leaf_masses()[pc.leaves.clone()])
                .map(|(v, m)| v * m)
                .sum::<f64>()
                / pc.mass;
            let sa = w.cesaro_maximal(&a)?;
            let prod: Vec<f64> = b.values().iter().zip(sa.values()).map(|(x, s)| (x - b_parent) * s).collect();
            Ok(vec![Obs::reported(anchor, lp(tree, &prod, 1.0), bmo2(&b)?)])
        }));
    }
    let stab = ctx.stability(&out, anchor, Some(STABLE_50));
    out.push(stab);
    out
}

/// Reads a tree from JSON: either a builder description or a full dump.
pub fn read_tree(path: impl AsRef<Path>) -> Result<Arc<FiltrationTree>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(spec) = serde_json::from_str::<TreeSpec>(&text) {
        return spec.build();
    }
    let dump: TreeDump = serde_json::from_str(&text)?;
    Ok(Arc::new(FiltrationTree::from_dump(&dump)?))
}

/// Reads a step function on `tree`. A bare JSON array of leaf values is
/// accepted as well as the fingerprinted form.
pub fn read_step_function(tree: &Arc<FiltrationTree>, path: impl AsRef<Path>) -> Result<StepFunction> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(values) = serde_json::from_str::<Vec<f64>>(&text) {
        return StepFunction::new(tree.clone(), values);
    }
    let file: StepFunctionFile = serde_json::from_str(&text)?;
    StepFunction::from_file(tree.clone(), file)
}

/// Norms of the three pieces of `f·g`, in print order.
pub fn decomposition_summary(f: &Martingale, g: &Martingale) -> Result<Vec<(&'static str, f64)>> {
    let d = product_decompose(f, g)?;
    Ok(vec![
        ("‖Π₁(f,g)‖h1", norm(&d.pi1, NormKind::H1Conditional)?),
        ("‖Π₁(f,g)‖H1", norm(&d.pi1, NormKind::H1)?),
        ("‖Π₂(f,g)‖H1", norm(&d.pi2, NormKind::H1)?),
        ("‖L(f,g)‖ (total variation)", d.l.variation_norm()),
        ("‖L_N(f,g)‖L1", lp(f.tree(), d.l.terminal().values(), 1.0)),
        ("‖f‖H1", norm(f, NormKind::H1)?),
        ("‖g‖BMO2", norm(g, NormKind::Bmo(2.0))?),
        ("identity relative error", d.identity_error(f, g)),
    ])
}

/// Report formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    #[serde(alias = "markdown")]
    Md,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Md),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Md => "md",
        })
    }
}

/// Records in report order: by suite, then seed (stable otherwise).
pub fn sorted(records: &[VerificationRecord]) -> Vec<VerificationRecord> {
    let mut out = records.to_vec();
    out.sort_by(|a, b| a.suite.cmp(&b.suite).then(a.seed.cmp(&b.seed)));
    out
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Writes `records` in `format` to `out`.
pub fn emit_report(records: &[VerificationRecord], format: ReportFormat, mut out: impl Write) -> Result<()> {
    let records = sorted(records);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &records)?;
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in &records {
                w.serialize(CsvRow::from(r))?;
            }
            if records.is_empty() {
                w.write_record(CSV_COLUMNS)?;
            }
            w.flush()?;
        }
        ReportFormat::Md => {
            let passed = records.iter().filter(|r| r.pass).count();
            writeln!(out, "# Verification summary\n")?;
            writeln!(out, "{passed} of {} records pass.\n", records.len())?;
            writeln!(out, "| suite | anchor | records | failing | max ratio | claimed |")?;
            writeln!(out, "|---|---|---|---|---|---|")?;
            let mut groups: BTreeMap<(&str, &str), (usize, usize, f64, Option<f64>)> = BTreeMap::new();
            for r in &records {
                let g = groups.entry((&r.suite, &r.anchor)).or_insert((0, 0, 0.0, r.claimed));
                g.0 += 1;
                g.1 += usize::from(!r.pass);
                g.2 = if r.ratio > g.2 || r.ratio.is_nan() { r.ratio } else { g.2 };
            }
            for ((suite, anchor), (n, bad, max, claimed)) in groups {
                let claimed = claimed.map_or("reported".to_string(), fmt_num);
                writeln!(out, "| {suite} | {anchor} | {n} | {bad} | {} | {claimed} |", fmt_num(max))?;
            }
        }
    }
    Ok(())
}

/// Writes a report file.
pub fn write_report(records: &[VerificationRecord], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    emit_report(records, format, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses a JSON report.
pub fn parse_json_report(text: &str) -> Result<Vec<VerificationRecord>> {
    Ok(serde_json::from_str(text)?)
}

/// Column order of CSV reports.
pub const CSV_COLUMNS: [&str; 9] = ["suite", "anchor", "lhs", "rhs", "ratio", "claimed", "pass", "seed", "ms"];

#[derive(Serialize, Deserialize)]
struct CsvRow {
    suite: String,
    anchor: String,
    lhs: f64,
    rhs: f64,
    ratio: f64,
    claimed: Option<f64>,
    pass: bool,
    seed: u64,
    ms: Option<f64>,
}

impl From<&VerificationRecord> for CsvRow {
    fn from(r: &VerificationRecord) -> Self {
        CsvRow {
            suite: r.suite.clone(),
            anchor: r.anchor.clone(),
            lhs: r.lhs,
            rhs: r.rhs,
            ratio: r.ratio,
            claimed: r.claimed,
            pass: r.pass,
            seed: r.seed,
            ms: r.ms,
        }
    }
}

/// Parses a CSV report.
pub fn parse_csv_report(text: &str) -> Result<Vec<VerificationRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rd.deserialize::<CsvRow>() {
        let r = row?;
        out.push(VerificationRecord {
            suite: r.suite,
            anchor: r.anchor,
            lhs: r.lhs,
            rhs: r.rhs,
            ratio: r.ratio,
            claimed: r.claimed,
            pass: r.pass,
            seed: r.seed,
            ms: r.ms,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::build_nondoubling_measure;

    fn small() -> CorpusConfig {
        CorpusConfig {
            depths: vec![3, 4],
            samples: 20,
            operator_samples: 6,
            cesaro_samples: 3,
            endpoint_samples: 12,
            cesaro_endpoint_samples: 3,
            atom_samples: 10,
            fractional_depths: vec![2, 3],
            hilbert_depth: 4,
            walsh_depth: 4,
            cesaro_depths: vec![3, 4],
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn nearest_rank_quantile() {
        assert_eq!(quantile_index(1, 0.99), 0);
        assert_eq!(quantile_index(100, 0.99), 98);
        assert_eq!(quantile_index(500, 0.99), 494);
        assert_eq!(quantile_index(500, 1.0), 499);
    }

    #[test]
    fn seeds_are_deterministic_and_spread() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(0, &[0]), derive_seed(0, &[1]));
    }

    #[test]
    fn bounded_random_profile_stays_below_two() {
        let tree = uniform_dyadic(8).unwrap();
        for seed in 0..30 {
            let b = generate_bmo(&tree, BmoProfile::BoundedRandom, seed);
            let n = bmo2(&b).unwrap();
            assert!((0.5 - 1e-12..=2.0 + 1e-12).contains(&n), "{n}");
        }
    }

    #[test]
    fn log_spike_grows_in_sup_but_not_in_bmo() {
        let mut sups = Vec::new();
        for depth in [4, 8, 12] {
            let tree = uniform_dyadic(depth).unwrap();
            let raw = raw_bmo(&tree, BmoProfile::LogSpike, 1);
            assert_eq!(raw.sup_norm(), (depth + 1) as f64);
            let n = bmo2(&raw).unwrap();
            assert!(n < 3.0, "{depth} {n}");
            let b = generate_bmo(&tree, BmoProfile::LogSpike, 1);
            let n = bmo2(&b).unwrap();
            assert!((0.5 - 1e-12..=2.0 + 1e-12).contains(&n), "{n}");
            sups.push(b.sup_norm());
        }
        assert!(sups[2] > 2.0 * sups[0]);
    }

    #[test]
    fn profiles_are_reproducible() {
        let tree = build_nondoubling_measure(6).unwrap();
        for p in BmoProfile::ALL {
            assert_eq!(generate_bmo(&tree, p, 5).values(), generate_bmo(&tree, p, 5).values());
            assert_eq!(p.name().parse::<BmoProfile>().unwrap(), p);
        }
    }

    #[test]
    fn record_pass_rules() {
        let r = VerificationRecord::checked("s", "a", 2.0, 1.0, 2.0, 1e-9, 0);
        assert!(r.pass);
        let r = VerificationRecord::checked("s", "a", 2.1, 1.0, 2.0, 1e-9, 0);
        assert!(!r.pass);
        assert!(VerificationRecord::reported("s", "a", 1.0, 0.0, 0).ratio.is_infinite());
        assert!(!VerificationRecord::reported("s", "a", 1.0, 0.0, 0).pass);
        assert!(VerificationRecord::reported("s", "a", 0.0, 0.0, 0).pass);
    }

    #[test]
    fn config_validation() {
        assert!(CorpusConfig::default().validate().is_ok());
        let bad = CorpusConfig {
            samples: 0,
            ..CorpusConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CorpusConfig {
            tolerances: Tolerances {
                exact: 1e-16,
                ..Tolerances::default()
            },
            ..CorpusConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: CorpusConfig = serde_json::from_str(r#"{"seed": 4, "depths": [5]}"#).unwrap();
        assert_eq!(parsed.seed, 4);
        assert_eq!(parsed.samples, 1000);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(matches!(run_suite("nope", &small()), Err(Error::UnknownSuite(_))));
    }

    #[test]
    fn every_suite_runs_small_and_passes() {
        let cfg = small();
        for name in suite_names() {
            let recs = run_suite(name, &cfg).unwrap();
            assert!(!recs.is_empty(), "{name}");
            for r in &recs {
                assert_eq!(r.suite, name);
                // cross-depth stability needs the full sample counts
                if r.anchor.ends_with("(max/min over depths)") {
                    assert!(!r.ratio.is_nan(), "{r:?}");
                } else {
                    assert!(r.pass, "{r:?}");
                }
            }
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = small();
        let a = run_suite("paraproduct-atoms", &cfg).unwrap();
        let b = run_suite("paraproduct-atoms", &cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        emit_report(&a, ReportFormat::Json, &mut x).unwrap();
        emit_report(&b, ReportFormat::Json, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn json_and_csv_round_trip() {
        let recs = vec![
            VerificationRecord::checked("b", "x", 1.0, 2.0, 1.0, 0.0, 3),
            VerificationRecord::failure("a", "y", 1),
            VerificationRecord::reported("a", "z", 0.25, 0.5, 0),
        ];
        let mut buf = Vec::new();
        emit_report(&recs, ReportFormat::Json, &mut buf).unwrap();
        let back = parse_json_report(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, sorted(&recs));
        let mut buf = Vec::new();
        emit_report(&recs, ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(parse_csv_report(&text).unwrap(), sorted(&recs));
    }

    #[test]
    fn empty_reports_are_valid() {
        for fmt in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Md] {
            let mut buf = Vec::new();
            emit_report(&[], fmt, &mut buf).unwrap();
            assert!(!buf.is_empty());
        }
        let mut buf = Vec::new();
        emit_report(&[], ReportFormat::Json, &mut buf).unwrap();
        assert!(parse_json_report(std::str::from_utf8(&buf).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn log_scalar_sides_hold_on_a_grid() {
        for i in 0..50 {
            for j in 0..50 {
                let s = 10f64.powf(-3.0 + 6.0 * i as f64 / 49.0);
                let t = 10f64.powf(-3.0 + 6.0 * j as f64 / 49.0);
                let (l, r) = log_scalar_sides(s, t);
                assert!(l <= r);
            }
        }
    }
}
