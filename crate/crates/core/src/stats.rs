//! Marginal models, clustering and significance tests for the network
//! analysis.
//!
//! * [`gee_fit`]: GEE with identity link and independence, exchangeable or
//!   AR(1) working correlation; robust (sandwich) standard errors.
//! * [`ward_cluster`]: Ward agglomerative clustering with an optional
//!   automatic cut at 70% of the tallest merge.
//! * [`anova_oneway`] and [`pairwise_permutation_test`] compare model
//!   variants across trials.
//! * [`centrality_outcome_table`] regresses per-user outcomes on centrality.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::centrality::{CentralityTable, DEGREE_BUCKET};
use crate::error::{Error, Result};
use crate::experiment::UserRmse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correlation {
    Independence,
    Exchangeable,
    Ar1,
}

impl std::str::FromStr for Correlation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independence" => Ok(Self::Independence),
            "exchangeable" => Ok(Self::Exchangeable),
            "ar1" => Ok(Self::Ar1),
            other => Err(Error::Config(format!("unknown correlation structure `{other}`"))),
        }
    }
}

/// Responses and covariates of one cluster; rows are in within-cluster
/// (chronological) order.
#[derive(Debug, Clone, PartialEq)]
pub struct GeeCluster {
    pub response: Vec<f64>,
    pub covariates: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeProblem {
    pub clusters: Vec<GeeCluster>,
    pub correlation: Correlation,
    pub max_iter: usize,
    pub tol: f64,
}

impl GeeProblem {
    pub fn new(clusters: Vec<GeeCluster>, correlation: Correlation) -> Self {
        GeeProblem { clusters, correlation, max_iter: 100, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeFit {
    pub beta: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub p_values: Vec<f64>,
    pub alpha_hat: f64,
    pub dispersion: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Columns of `x` that are (numerically) linear combinations of earlier
/// columns, found by modified Gram-Schmidt.
pub fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let proj = q.dot(&r);
            r -= q * proj;
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-9 * norm {
            bad.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    bad
}

fn working_corr(n: usize, corr: Correlation, alpha: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match (i == j, corr) {
        (true, _) => 1.0,
        (false, Correlation::Independence) => 0.0,
        (false, Correlation::Exchangeable) => alpha,
        (false, Correlation::Ar1) => alpha.powi(i.abs_diff(j) as i32),
    })
}

struct Inverses {
    corr: Correlation,
    alpha: f64,
    cache: HashMap<usize, DMatrix<f64>>,
}

impl Inverses {
    fn get(&mut self, n: usize) -> Result<&DMatrix<f64>> {
        if !self.cache.contains_key(&n) {
            let r = working_corr(n, self.corr, self.alpha);
            let inv = r.cholesky().map(|c| c.inverse()).ok_or_else(|| Error::Data(format!("working correlation (alpha={}) is not positive definite", self.alpha)))?;
            self.cache.insert(n, inv);
        }
        Ok(&self.cache[&n])
    }
}

fn gls(problem: &GeeProblem, inv: &mut Inverses, p: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut bread = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for c in &problem.clusters {
        let ri = inv.get(c.response.len())?;
        let xt_ri = c.covariates.transpose() * ri;
        bread += &xt_ri * &c.covariates;
        rhs += &xt_ri * DVector::from_column_slice(&c.response);
    }
    let chol = bread.clone().cholesky().ok_or_else(|| Error::SingularDesign(Vec::new()))?;
    Ok((chol.solve(&rhs), bread))
}

fn residuals(problem: &GeeProblem, beta: &DVector<f64>) -> Vec<DVector<f64>> {
    problem.clusters.iter().map(|c| DVector::from_column_slice(&c.response) - &c.covariates * beta).collect()
}

/// Moment estimates of the dispersion and correlation parameter.
fn moments(problem: &GeeProblem, resid: &[DVector<f64>], p: usize) -> (f64, f64) {
    let n_obs: usize = resid.iter().map(|r| r.len()).sum();
    let ss: f64 = resid.iter().map(|r| r.norm_squared()).sum();
    let phi = ss / (n_obs.saturating_sub(p)).max(1) as f64;
    if phi <= 0.0 {
        return (phi, 0.0);
    }
    let (num, pairs) = match problem.correlation {
        Correlation::Independence => return (phi, 0.0),
        Correlation::Exchangeable => resid.iter().fold((0.0, 0usize), |(s, k), r| {
            let total = r.sum();
            // Σ_{i<j} e_i e_j = ((Σe)² − Σe²) / 2
            (s + 0.5 * (total * total - r.norm_squared()), k + r.len() * (r.len().saturating_sub(1)) / 2)
        }),
        Correlation::Ar1 => resid.iter().fold((0.0, 0usize), |(s, k), r| {
            (s + (1..r.len()).map(|i| r[i] * r[i - 1]).sum::<f64>(), k + r.len().saturating_sub(1))
        }),
    };
    if pairs == 0 {
        return (phi, 0.0);
    }
    let alpha = num / (phi * pairs as f64);
    let lower = match problem.correlation {
        Correlation::Exchangeable => {
            let n_max = resid.iter().map(|r| r.len()).max().unwrap_or(2).max(2);
            -1.0 / (n_max - 1) as f64 + 1e-6
        }
        _ => -0.99,
    };
    (phi, alpha.clamp(lower, 0.99))
}

pub fn gee_fit(problem: &GeeProblem) -> Result<GeeFit> {
    if problem.clusters.len() < 2 {
        return Err(Error::pre(format!("GEE needs at least 2 clusters, got {}", problem.clusters.len())));
    }
    let p = problem.clusters[0].covariates.ncols();
    if p == 0 {
        return Err(Error::pre("GEE needs at least one covariate"));
    }
    for (k, c) in problem.clusters.iter().enumerate() {
        if c.covariates.nrows() != c.response.len() || c.covariates.ncols() != p {
            return Err(Error::shape(
                "gee_fit",
                format!("cluster {k}: {} responses vs {}x{} covariates (expected {p} columns)", c.response.len(), c.covariates.nrows(), c.covariates.ncols()),
            ));
        }
        if c.response.is_empty() {
            return Err(Error::pre(format!("cluster {k} is empty")));
        }
        if c.response.iter().chain(c.covariates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("cluster {k} has non-finite values")));
        }
    }
    let n_obs: usize = problem.clusters.iter().map(|c| c.response.len()).sum();
    let mut pooled = DMatrix::zeros(n_obs, p);
    let mut row = 0;
    for c in &problem.clusters {
        pooled.rows_mut(row, c.response.len()).copy_from(&c.covariates);
        row += c.response.len();
    }
    let bad = collinear_columns(&pooled);
    if !bad.is_empty() {
        return Err(Error::SingularDesign(bad));
    }

    let mut alpha = 0.0;
    let mut inv = Inverses { corr: Correlation::Independence, alpha, cache: HashMap::new() };
    let (mut beta, mut bread) = gls(problem, &mut inv, p)?;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=problem.max_iter.max(1) {
        iterations = it;
        let resid = residuals(problem, &beta);
        alpha = moments(problem, &resid, p).1;
        inv = Inverses { corr: problem.correlation, alpha, cache: HashMap::new() };
        let (next, b) = gls(problem, &mut inv, p)?;
        let delta = (&next - &beta).amax();
        beta = next;
        bread = b;
        if delta < problem.tol {
            converged = true;
            break;
        }
    }

    let resid = residuals(problem, &beta);
    let dispersion = moments(problem, &resid, p).0;
    let mut meat = DMatrix::zeros(p, p);
    for (c, r) in problem.clusters.iter().zip(&resid) {
        let u = c.covariates.transpose() * inv.get(r.len())? * r;
        meat += &u * u.transpose();
    }
    let bread_inv = bread.try_inverse().ok_or_else(|| Error::SingularDesign(Vec::new()))?;
    let cov = &bread_inv * meat * &bread_inv;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let robust_se: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let p_values = beta
        .iter()
        .zip(&robust_se)
        .map(|(b, se)| if *se > 0.0 { (2.0 * normal.sf((b / se).abs())).clamp(0.0, 1.0) } else if *b == 0.0 { 1.0 } else { 0.0 })
        .collect();
    Ok(GeeFit { beta: beta.iter().copied().collect(), robust_se, p_values, alpha_hat: alpha, dispersion, converged, iterations })
}

/// One agglomeration step. Ids below `n` are participants; merge `k`
/// creates id `n + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster ids numbered by first appearance.
    pub labels: Vec<usize>,
    pub n_clusters: usize,
    pub linkage: String,
    pub merges: Vec<Merge>,
}

impl ClusterAssignment {
    /// CSV `user_id,cluster`.
    pub fn write_csv<W: Write>(&self, users: &[String], out: W) -> Result<()> {
        if users.len() != self.labels.len() {
            return Err(Error::shape("write_csv", format!("{} users for {} labels", users.len(), self.labels.len())));
        }
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["user_id", "cluster"])?;
        for (u, l) in users.iter().zip(&self.labels) {
            wtr.write_record([u.as_str(), &l.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Share of the tallest merge height above which merges are cut.
pub const CUT_FRACTION: f64 = 0.7;

fn ward_merges(points: &[Vec<f64>]) -> Vec<Merge> {
    let n = points.len();
    // squared Euclidean distances; Lance-Williams keeps them as 2·ΔSSE
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n.saturating_sub(1) {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && d[i][j] < best.0 {
                    best = (d[i][j], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for m in 0..n {
            if m == i || m == j || !active[m] {
                continue;
            }
            let nm = size[m] as f64;
            let v = ((ni + nm) * d[i][m] + (nj + nm) * d[j][m] - nm * dij) / (ni + nj + nm);
            d[i][m] = v;
            d[m][i] = v;
        }
        active[j] = false;
        let (a, b) = (id[i].min(id[j]), id[i].max(id[j]));
        size[i] += size[j];
        id[i] = n + k;
        merges.push(Merge { left: a, right: b, height: dij.max(0.0).sqrt(), size: size[i] });
    }
    merges
}

fn labels_from(merges: &[Merge], n: usize, k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (step, m) in merges.iter().take(n - k).enumerate() {
        let new = n + step;
        let (a, b) = (find(&mut parent, m.left), find(&mut parent, m.right));
        parent[a] = new;
        parent[b] = new;
    }
    let mut canon = HashMap::new();
    (0..n)
        .map(|i| {
            let root = find(&mut parent, i);
            let next = canon.len();
            *canon.entry(root).or_insert(next)
        })
        .collect()
}

/// Ward clustering of participant trait vectors. Without `n_clusters` the
/// dendrogram is cut at [`CUT_FRACTION`] of its tallest merge.
pub fn ward_cluster(traits: &[Vec<f64>], n_clusters: Option<usize>) -> Result<ClusterAssignment> {
    let n = traits.len();
    if n == 0 {
        return Err(Error::pre("no participants to cluster"));
    }
    let width = traits[0].len();
    if traits.iter().any(|r| r.len() != width) {
        return Err(Error::shape("ward_cluster", "trait rows differ in length"));
    }
    if traits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("trait matrix has missing or non-finite values".into()));
    }
    if let Some(k) = n_clusters {
        if k == 0 || k > n {
            return Err(Error::pre(format!("cannot form {k} clusters from {n} participants")));
        }
    }
    let merges = ward_merges(traits);
    let k = n_clusters.unwrap_or_else(|| {
        let top = merges.iter().map(|m| m.height).fold(0.0, f64::max);
        1 + merges.iter().filter(|m| m.height > CUT_FRACTION * top && top > 0.0).count()
    });
    let labels = labels_from(&merges, n, k);
    Ok(ClusterAssignment { labels, n_clusters: k, linkage: "ward".into(), merges })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<Anova> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::pre("ANOVA needs at least 2 groups of at least 2 samples"));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    if ssw <= 0.0 {
        return Err(Error::Data("zero within-group variance".into()));
    }
    let (df_b, df_w) = (groups.len() - 1, n - groups.len());
    let f = (ssb / df_b as f64) / (ssw / df_w as f64);
    let dist = FisherSnedecor::new(df_b as f64, df_w as f64).expect("positive degrees of freedom");
    Ok(Anova { f, p_value: dist.sf(f).clamp(0.0, 1.0), df_between: df_b, df_within: df_w })
}

/// Enumerate every relabelling exactly when there are at most this many.
pub const EXACT_LIMIT: u64 = 200_000;
pub const MIN_PERMUTATIONS: usize = 10_000;
pub const MIN_TRIALS: usize = 5;
pub const PERMUTATION_NOTE: &str = "pairwise comparisons use a two-sided permutation test on the difference of means in place of Tukey HSD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub exact: bool,
    pub relabelings: u64,
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    c as u64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-sided p-value for the difference of means between `a` and `b`.
fn permutation_p(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> (f64, bool, u64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (na, nb) = (a.len(), b.len());
    let total: f64 = pooled.iter().sum();
    let stat = |sum_a: f64| (sum_a / na as f64 - (total - sum_a) / nb as f64).abs();
    let observed = stat(a.iter().sum());
    let scale = pooled.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let hit = |s: f64| s >= observed - 1e-12 * scale;
    let count = binomial(na + nb, na);
    if count <= EXACT_LIMIT && na + nb < 64 {
        // Gosper's hack walks every na-subset of the pooled indices
        let n = na + nb;
        let mut mask: u64 = (1u64 << na) - 1;
        let mut hits = 0u64;
        let mut seen = 0u64;
        while mask < (1u64 << n) {
            let sum: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| pooled[i]).sum();
            hits += hit(stat(sum)) as u64;
            seen += 1;
            let c = mask & mask.wrapping_neg();
            let r = mask + c;
            mask = (((r ^ mask) >> 2) / c) | r;
        }
        return (hits as f64 / seen as f64, true, seen);
    }
    let b_total = permutations.max(MIN_PERMUTATIONS);
    let shards = rayon::current_num_threads().max(1);
    let per = b_total.div_ceil(shards);
    let hits: usize = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut v = pooled.clone();
            let todo = per.min(b_total.saturating_sub(s * per));
            (0..todo)
                .filter(|_| {
                    v.shuffle(&mut rng);
                    hit(stat(v[..na].iter().sum()))
                })
                .count()
        })
        .sum();
    ((1 + hits) as f64 / (1 + b_total) as f64, false, b_total as u64)
}

/// Pairwise two-sided permutation tests between every pair of models.
/// Small designs are enumerated exactly; larger ones draw at least
/// [`MIN_PERMUTATIONS`] relabelings.
pub fn pairwise_permutation_test(scores: &[(String, Vec<f64>)], permutations: usize, seed: u64) -> Result<Vec<PairTest>> {
    if scores.len() < 2 {
        return Err(Error::pre("need at least two models to compare"));
    }
    for (name, s) in scores {
        if s.len() < MIN_TRIALS {
            return Err(Error::pre(format!("model {name} has {} trials, need at least {MIN_TRIALS}", s.len())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("model {name} has non-finite scores")));
        }
    }
    let mut out = Vec::new();
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            let (a, b) = (&scores[i], &scores[j]);
            let (p, exact, relabelings) = permutation_p(&a.1, &b.1, permutations, seed);
            out.push(PairTest { a: a.0.clone(), b: b.0.clone(), mean_a: mean(&a.1), mean_b: mean(&b.1), p_value: p, exact, relabelings });
        }
    }
    Ok(out)
}

pub const COVARIATES: [&str; 5] = ["small_degree", "large_degree", "eigenvector", "closeness", "pagerank"];
pub const RESPONSES: [&str; 3] = ["rmse", "mean_true", "sd_true"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefP {
    pub coefficient: f64,
    pub robust_se: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub covariate: String,
    /// Set when the column was constant (or empty) and left out of the fit.
    pub dropped: bool,
    /// One entry per response in [`RESPONSES`] order.
    pub fits: Vec<Option<CoefP>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub rows: Vec<OutcomeRow>,
    pub n_observations: usize,
    pub n_clusters: usize,
    pub correlation: Correlation,
    pub notes: Vec<String>,
}

impl OutcomeTable {
    /// One row per covariate, `(coefficient, p-value)` per response.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["covariate".to_string()];
        for r in RESPONSES {
            header.push(format!("{r}_coef"));
            header.push(format!("{r}_p"));
        }
        wtr.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.covariate.clone()];
            for f in &row.fits {
                match f {
                    Some(c) => {
                        rec.push(c.coefficient.to_string());
                        rec.push(c.p_value.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub overall: OutcomeTable,
    /// Per trait group, when group labels are supplied.
    pub groups: BTreeMap<usize, OutcomeTable>,
    pub unmatched: usize,
}

struct Obs {
    user: String,
    x: [f64; 5],
    y: [f64; 3],
}

fn outcome_fit(obs: &[&Obs], correlation: Correlation) -> Result<OutcomeTable> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<&Obs>> = HashMap::new();
    for o in obs {
        by_user.entry(o.user.as_str()).or_insert_with(|| {
            order.push(o.user.as_str());
            Vec::new()
        });
        by_user.get_mut(o.user.as_str()).expect("inserted").push(o);
    }
    // a constant column is kept once as the intercept, otherwise dropped
    let mut keep = Vec::new();
    let mut dropped = [false; 5];
    let mut have_intercept = false;
    for j in 0..5 {
        let first = obs[0].x[j];
        let constant = obs.iter().all(|o| o.x[j] == first);
        if constant && (first == 0.0 || have_intercept) {
            dropped[j] = true;
        } else {
            have_intercept |= constant;
            keep.push(j);
        }
    }
    let mut notes = Vec::new();
    for j in (0..5).filter(|&j| dropped[j]) {
        notes.push(format!("covariate {} is constant and was dropped", COVARIATES[j]));
    }
    let mut fits: Vec<Vec<Option<CoefP>>> = vec![vec![None; 3]; 5];
    for (r, name) in RESPONSES.iter().enumerate() {
        let clusters = order
            .iter()
            .map(|u| {
                let rows = &by_user[u];
                GeeCluster {
                    response: rows.iter().map(|o| o.y[r]).collect(),
                    covariates: DMatrix::from_fn(rows.len(), keep.len(), |i, k| rows[i].x[keep[k]]),
                }
            })
            .collect();
        let fit = gee_fit(&GeeProblem::new(clusters, correlation)).map_err(|e| match e {
            Error::SingularDesign(cols) => Error::SingularDesign(cols.into_iter().map(|c| keep[c]).collect()),
            other => other,
        })?;
        if !fit.converged {
            notes.push(format!("{name}: GEE did not converge in {} iterations", fit.iterations));
        }
        for (k, &j) in keep.iter().enumerate() {
            fits[j][r] = Some(CoefP { coefficient: fit.beta[k], robust_se: fit.robust_se[k], p_value: fit.p_values[k] });
        }
    }
    let rows = (0..5).map(|j| OutcomeRow { covariate: COVARIATES[j].into(), dropped: dropped[j], fits: fits[j].clone() }).collect();
    Ok(OutcomeTable { rows, n_observations: obs.len(), n_clusters: order.len(), correlation, notes })
}

/// Joins per-(user, topology) outcomes with the centrality of that user in
/// that topology and fits one GEE per response, clustering by user.
/// Covariates are small- and large-degree indicators (degree below
/// [`DEGREE_BUCKET`] or not), eigenvector, closeness and PageRank; no
/// separate intercept is added since the two indicators sum to one.
pub fn centrality_outcome_table(
    centrality: &BTreeMap<String, CentralityTable>,
    outcomes: &[UserRmse],
    groups: Option<&HashMap<String, usize>>,
    correlation: Correlation,
) -> Result<OutcomeReport> {
    let mut obs = Vec::new();
    let mut unmatched = 0;
    for o in outcomes {
        let row = centrality.get(&o.topology).and_then(|t| t.rows.iter().find(|r| r.user_id == o.user));
        let Some(c) = row else {
            unmatched += 1;
            continue;
        };
        let small = (c.degree < DEGREE_BUCKET) as u8 as f64;
        obs.push(Obs { user: o.user.clone(), x: [small, 1.0 - small, c.eigenvector, c.closeness, c.pagerank], y: [o.rmse, o.mean_true, o.sd_true] });
    }
    if obs.is_empty() {
        return Err(Error::Data("no outcome rows joined a centrality row".into()));
    }
    let all: Vec<&Obs> = obs.iter().collect();
    let overall = outcome_fit(&all, correlation)?;
    let mut by_group = BTreeMap::new();
    if let Some(g) = groups {
        let mut ids: Vec<usize> = g.values().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let part: Vec<&Obs> = obs.iter().filter(|o| g.get(&o.user) == Some(&id)).collect();
            if part.is_empty() {
                continue;
            }
            // small groups can be degenerate; record the failure rather than abort
            let table = outcome_fit(&part, correlation).unwrap_or_else(|e| OutcomeTable {
                rows: Vec::new(),
                n_observations: part.len(),
                n_clusters: 0,
                correlation,
                notes: vec![format!("fit failed: {e}")],
            });
            by_group.insert(id, table);
        }
    }
    Ok(OutcomeReport { overall, groups: by_group, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centrality::CentralityRow;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ols(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        // QR solve, independent of the normal-equation path in gee_fit
        let qr = x.clone().qr();
        let qty = qr.q().transpose() * DVector::from_column_slice(y);
        qr.r().solve_upper_triangular(&qty).unwrap().iter().copied().collect()
    }

    fn random_problem(seed: u64, sizes: &[usize], p: usize) -> (GeeProblem, DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clusters = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in sizes {
            let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            for i in 0..n {
                xs.push(x.row(i).into_owned());
                ys.push(y[i]);
            }
            clusters.push(GeeCluster { response: y, covariates: x });
        }
        (GeeProblem::new(clusters, Correlation::Independence), DMatrix::from_rows(&xs), ys)
    }

    #[test]
    fn independence_equals_ols() {
        for seed in 0..20 {
            let (prob, x, y) = random_problem(seed, &[3, 5, 2, 7, 4], 3);
            let fit = gee_fit(&prob).unwrap();
            for (a, b) in fit.beta.iter().zip(ols(&x, &y)) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!(fit.converged);
        }
    }

    #[test]
    fn singleton_clusters_ignore_correlation() {
        let (prob, _, _) = random_problem(3, &[1; 12], 2);
        let base = gee_fit(&prob).unwrap();
        for c in [Correlation::Exchangeable, Correlation::Ar1] {
            let fit = gee_fit(&GeeProblem { correlation: c, ..prob.clone() }).unwrap();
            for (a, b) in fit.beta.iter().zip(&base.beta) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in fit.robust_se.iter().zip(&base.robust_se) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_design_names_columns() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 1.0, 0.5, 1.0, 2.0]);
        let clusters = vec![
            GeeCluster { response: vec![1.0, 2.0, 3.0], covariates: x.clone() },
            GeeCluster { response: vec![0.0, 1.0, 2.0], covariates: x },
        ];
        match gee_fit(&GeeProblem::new(clusters, Correlation::Ar1)) {
            Err(Error::SingularDesign(cols)) => assert_eq!(cols, vec![1]),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn gee_rejects_single_cluster_and_ragged_rows() {
        let one = vec![GeeCluster { response: vec![1.0, 2.0], covariates: DMatrix::from_element(2, 1, 1.0) }];
        assert!(gee_fit(&GeeProblem::new(one, Correlation::Ar1)).is_err());
        let ragged = vec![
            GeeCluster { response: vec![1.0, 2.0], covariates: DMatrix::from_element(2, 1, 1.0) },
            GeeCluster { response: vec![1.0], covariates: DMatrix::from_element(2, 1, 1.0) },
        ];
        assert!(matches!(gee_fit(&GeeProblem::new(ragged, Correlation::Ar1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn ar1_recovers_planted_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let alpha: f64 = 0.5;
        let clusters = (0..400)
            .map(|_| {
                let x = DMatrix::from_fn(10, 2, |_, _| StandardNormal.sample(&mut rng));
                let mut e: f64 = StandardNormal.sample(&mut rng);
                let y = (0..10)
                    .map(|i| {
                        if i > 0 {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            e = alpha * e + (1.0 - alpha * alpha).sqrt() * z;
                        }
                        2.0 * x[(i, 0)] - x[(i, 1)] + e
                    })
                    .collect();
                GeeCluster { response: y, covariates: x }
            })
            .collect();
        let fit = gee_fit(&GeeProblem::new(clusters, Correlation::Ar1)).unwrap();
        assert!((fit.alpha_hat - 0.5).abs() < 0.05, "alpha {}", fit.alpha_hat);
        assert!((fit.dispersion - 1.0).abs() < 0.1);
    }

    fn brute_ward_heights(points: &[Vec<f64>]) -> Vec<f64> {
        let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
        let centroid = |c: &[usize]| {
            let mut m = vec![0.0; points[0].len()];
            for &i in c {
                for (a, b) in m.iter_mut().zip(&points[i]) {
                    *a += b / c.len() as f64;
                }
            }
            m
        };
        let mut heights = Vec::new();
        while clusters.len() > 1 {
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let (ci, cj) = (centroid(&clusters[i]), centroid(&clusters[j]));
                    let (ni, nj) = (clusters[i].len() as f64, clusters[j].len() as f64);
                    let dsse = ni * nj / (ni + nj) * ci.iter().zip(&cj).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    if dsse < best.0 {
                        best = (dsse, i, j);
                    }
                }
            }
            heights.push((2.0 * best.0).sqrt());
            let b = clusters.remove(best.2);
            clusters[best.1].extend(b);
        }
        heights
    }

    #[test]
    fn ward_matches_brute_force_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = rng.random_range(2..=8);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
            let fit = ward_cluster(&pts, Some(1)).unwrap();
            let heights: Vec<f64> = fit.merges.iter().map(|m| m.height).collect();
            for (a, b) in heights.iter().zip(brute_ward_heights(&pts)) {
                assert!((a - b).abs() < 1e-9 * b.max(1.0));
            }
            assert!(heights.windows(2).all(|w| w[0] <= w[1] + 1e-9));
        }
    }

    #[test]
    fn ward_recovers_separated_pairs() {
        let pts = vec![vec![0.0, 0.0], vec![100.0, 100.0], vec![0.5, 0.0], vec![100.0, 100.5]];
        let fit = ward_cluster(&pts, Some(2)).unwrap();
        assert_eq!(fit.labels, vec![0, 1, 0, 1]);
        // the automatic cut finds the same split
        assert_eq!(ward_cluster(&pts, None).unwrap().labels, vec![0, 1, 0, 1]);
        let singles = ward_cluster(&pts, Some(4)).unwrap();
        assert_eq!(singles.labels, vec![0, 1, 2, 3]);
        assert!(ward_cluster(&pts, Some(5)).is_err());
    }

    #[test]
    fn anova_examples() {
        let same = anova_oneway(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(same.f, 0.0);
        assert!((same.p_value - 1.0).abs() < 1e-12);
        let apart = anova_oneway(&[vec![1.0, 2.0, 3.0], vec![11.0, 12.0, 13.0]]).unwrap();
        // grand mean 7; SSB = 3·25 + 3·25 = 150 on 1 df; SSW = 2 + 2 = 4 on 4 df
        assert!((apart.f - 150.0).abs() < 1e-9);
        assert!(apart.p_value < 0.01);
        let shifted = anova_oneway(&[vec![101.0, 102.0, 103.0], vec![111.0, 112.0, 113.0]]).unwrap();
        assert!((shifted.f - apart.f).abs() < 1e-9);
        assert!(anova_oneway(&[vec![1.0, 1.0], vec![2.0, 2.0]]).is_err());
        assert!(anova_oneway(&[vec![1.0, 2.0]]).is_err());
    }

    fn exact_oracle(a: &[f64], b: &[f64]) -> f64 {
        // recursive enumeration of all subsets of size |a|
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let obs = (mean(a) - mean(b)).abs();
        fn rec(pool: &[f64], k: usize, start: usize, chosen: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if chosen.len() == k {
                out.push(chosen.clone());
                return;
            }
            for i in start..pool.len() {
                chosen.push(i);
                rec(pool, k, i + 1, chosen, out);
                chosen.pop();
            }
        }
        let mut all = Vec::new();
        rec(&pooled, a.len(), 0, &mut Vec::new(), &mut all);
        let hits = all
            .iter()
            .filter(|idx| {
                let sa: f64 = idx.iter().map(|&i| pooled[i]).sum();
                let sb: f64 = pooled.iter().sum::<f64>() - sa;
                (sa / a.len() as f64 - sb / b.len() as f64).abs() >= obs - 1e-12
            })
            .count();
        hits as f64 / all.len() as f64
    }

    #[test]
    fn permutation_test_examples() {
        let a = vec![0.9, 0.91, 0.92, 0.93, 0.94];
        let b = vec![0.5, 0.51, 0.52, 0.53, 0.54];
        let t = pairwise_permutation_test(&[("a".into(), a.clone()), ("b".into(), b.clone())], 10_000, 1).unwrap();
        assert!(t[0].exact);
        // C(10, 5) = 252 relabelings; only the observed split and its mirror are as extreme
        assert!((t[0].p_value - 2.0 / 252.0).abs() < 1e-15);
        assert!((t[0].p_value - exact_oracle(&a, &b)).abs() < 1e-15);
        let swapped = pairwise_permutation_test(&[("b".into(), b.clone()), ("a".into(), a.clone())], 10_000, 1).unwrap();
        assert_eq!(swapped[0].p_value, t[0].p_value);
        let same = pairwise_permutation_test(&[("a".into(), a.clone()), ("c".into(), a.clone())], 10_000, 1).unwrap();
        assert!((same[0].p_value - 1.0).abs() < 1e-12);
        assert!(pairwise_permutation_test(&[("a".into(), a[..4].to_vec()), ("b".into(), b)], 10_000, 1).is_err());
    }

    #[test]
    fn monte_carlo_path_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(0.2..1.2)).collect();
        let run = |seed| pairwise_permutation_test(&[("a".into(), a.clone()), ("b".into(), b.clone())], 20_000, seed).unwrap();
        let (x, y) = (run(5), run(5));
        assert!(!x[0].exact);
        assert_eq!(x, y);
        assert_eq!(x[0].relabelings, 20_000);
    }

    fn table(rows: &[(&str, usize, f64)]) -> CentralityTable {
        CentralityTable {
            rows: rows
                .iter()
                .map(|&(u, d, e)| CentralityRow { user_id: u.into(), degree: d, closeness: 0.5 * e + 0.1 * d as f64, eigenvector: e, pagerank: 0.3 - 0.2 * e * e })
                .collect(),
        }
    }

    #[test]
    fn outcome_table_recovers_planted_eigenvector_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let users: Vec<String> = (0..40).map(|i| format!("u{i}")).collect();
        let mut cents = BTreeMap::new();
        let mut outcomes = Vec::new();
        for t in 0..8 {
            let topo = format!("t{t}");
            let rows: Vec<(String, usize, f64)> = users.iter().map(|u| (u.clone(), rng.random_range(0..8), rng.random_range(0.0..1.0))).collect();
            let tab = table(&rows.iter().map(|(u, d, e)| (u.as_str(), *d, *e)).collect::<Vec<_>>());
            for (u, d, e) in &rows {
                let small = if *d < 4 { -1.5 } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                outcomes.push(UserRmse { user: u.clone(), topology: topo.clone(), rmse: 10.0 + 3.5 * e + small + 0.5 * noise, n: 5, mean_true: 50.0 + noise, sd_true: 20.0 + noise });
            }
            cents.insert(topo, tab);
        }
        let report = centrality_outcome_table(&cents, &outcomes, None, Correlation::Ar1).unwrap();
        let eig = report.overall.rows.iter().find(|r| r.covariate == "eigenvector").unwrap();
        let fit = eig.fits[0].unwrap();
        assert!((fit.coefficient - 3.5).abs() < 3.0 * fit.robust_se, "{fit:?}");
        assert_eq!(report.overall.rows.len(), 5);
        assert!(report.overall.rows.iter().all(|r| r.fits.len() == 3));
        let mut buf = Vec::new();
        report.overall.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "covariate,rmse_coef,rmse_p,mean_true_coef,mean_true_p,sd_true_coef,sd_true_p");
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn constant_covariate_dropped() {
        let mut cents = BTreeMap::new();
        let mut outcomes = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..4 {
            // every degree below 4: large_degree is all zero
            let rows: Vec<(String, usize, f64)> = (0..10).map(|i| (format!("u{i}"), rng.random_range(0..4), rng.random_range(0.0..1.0))).collect();
            cents.insert(format!("t{t}"), table(&rows.iter().map(|(u, d, e)| (u.as_str(), *d, *e)).collect::<Vec<_>>()));
            for (u, _, e) in &rows {
                outcomes.push(UserRmse { user: u.clone(), topology: format!("t{t}"), rmse: e + rng.random_range(0.0..0.1), n: 3, mean_true: rng.random_range(0.0..100.0), sd_true: rng.random_range(0.0..30.0) });
            }
        }
        let report = centrality_outcome_table(&cents, &outcomes, None, Correlation::Independence).unwrap();
        let large = &report.overall.rows[1];
        assert!(large.dropped && large.fits.iter().all(Option::is_none));
        assert!(!report.overall.rows[0].dropped);
        assert!(report.overall.notes.iter().any(|n| n.contains("large_degree")));
    }

    #[test]
    fn empty_join_is_an_error() {
        let outcomes = vec![UserRmse { user: "x".into(), topology: "t".into(), rmse: 1.0, n: 1, mean_true: 1.0, sd_true: 0.0 }];
        assert!(centrality_outcome_table(&BTreeMap::new(), &outcomes, None, Correlation::Ar1).is_err());
    }

    proptest! {
        #[test]
        fn ward_permutation_invariant(seed in 0u64..500, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
            let k = 1 + (seed as usize % n);
            let a = ward_cluster(&pts, Some(k)).unwrap().labels;
            let b = ward_cluster(&shuffled, Some(k)).unwrap().labels;
            // same partition: i ~ j in a iff perm⁻¹ positions agree in b
            let mut pos = vec![0; n];
            for (p, &i) in perm.iter().enumerate() { pos[i] = p; }
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(a[i] == a[j], b[pos[i]] == b[pos[j]]);
                }
            }
        }

        #[test]
        fn anova_p_decreases_in_f(s1 in 0.0f64..5.0, ds in 0.0f64..5.0) {
            // same within-group spread, so F grows with the shift
            let run = |s: f64| anova_oneway(&[vec![1.0, 2.0, 4.0], vec![1.0 + s, 2.0 + s, 4.0 + s], vec![0.0, 3.0, 3.5]]).unwrap();
            let (a, b) = (run(s1), run(s1 + ds));
            if b.f >= a.f {
                prop_assert!(b.p_value <= a.p_value + 1e-15);
            }
        }
    }
}
