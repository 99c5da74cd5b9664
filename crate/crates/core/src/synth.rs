//! Synthetic cohorts with controllable emotion contagion.
//!
//! The social graph comes from a clipped-normal degree sequence and stub
//! matching. Each user carries two independent latent emotion processes
//! (stress, happiness):
//!
//! ```text
//! e_i[n] = ρ·e_i[n−1] + β·mean_{j ∈ N(i)} e_j[n−1] + ε_i[n]
//! ```
//!
//! Labels are an affine, clipped map of the latent calibrated to target
//! moments. Informative features are noisy linear or `tanh` functions of the
//! day's latent state; noise features are independent of it. Call and SMS
//! logs are generated along graph edges so the graph can be rebuilt from the
//! logs by the ingest path.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::features::{FeaturePanel, Target};
use crate::ingest::{write_call_log, write_sms_log, CallRecord, Interval, SmsClass, SmsRecord, SocialGraph};

pub const TRAIT_NAMES: [&str; 5] = ["extraversion", "agreeableness", "conscientiousness", "openness", "neuroticism"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_days: usize,
    pub mean_degree: f64,
    pub sd_degree: f64,
    pub max_degree: usize,
    /// Contagion coefficient β.
    pub contagion: f64,
    /// Autoregression ρ.
    pub autoregression: f64,
    pub innovation_sd: f64,
    pub happiness_moments: [f64; 2],
    pub stress_moments: [f64; 2],
    pub n_informative_features: usize,
    pub n_noise_features: usize,
    pub feature_noise_sd: f64,
    /// Probability that a whole (user, day) feature row is absent.
    pub missing_row_rate: f64,
    /// Probability that a single feature cell is missing.
    pub missing_cell_rate: f64,
    pub missing_label_rate: f64,
    pub burn_in: usize,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 30,
            n_days: 90,
            mean_degree: 1.2,
            sd_degree: 2.2,
            max_degree: 12,
            contagion: 0.6,
            autoregression: 0.3,
            innovation_sd: 1.0,
            happiness_moments: [61.8, 23.8],
            stress_moments: [54.0, 26.0],
            n_informative_features: 6,
            n_noise_features: 4,
            feature_noise_sd: 0.5,
            missing_row_rate: 0.02,
            missing_cell_rate: 0.02,
            missing_label_rate: 0.05,
            burn_in: 50,
            start_date: NaiveDate::from_ymd_opt(2016, 2, 1).expect("valid date"),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users < 2 {
            return bad(format!("need at least 2 users, got {}", self.n_users));
        }
        if self.n_days < 2 {
            return bad(format!("need at least 2 days, got {}", self.n_days));
        }
        if !(self.mean_degree >= 0.0) || self.mean_degree >= (self.n_users - 1) as f64 {
            return bad(format!("mean degree {} unreachable with {} users", self.mean_degree, self.n_users));
        }
        if !(self.sd_degree >= 0.0) {
            return bad(format!("degree sd must be non-negative, got {}", self.sd_degree));
        }
        if self.max_degree == 0 && self.mean_degree > 0.0 {
            return bad("max_degree 0 cannot reach a positive mean degree".into());
        }
        if !(0.0..=1.0).contains(&self.contagion) {
            return bad(format!("contagion must be in [0, 1], got {}", self.contagion));
        }
        if !(0.0..1.0).contains(&self.autoregression) {
            return bad(format!("autoregression must be in [0, 1), got {}", self.autoregression));
        }
        for (name, p) in [
            ("missing_row_rate", self.missing_row_rate),
            ("missing_cell_rate", self.missing_cell_rate),
            ("missing_label_rate", self.missing_label_rate),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if !(self.innovation_sd > 0.0) || !(self.feature_noise_sd >= 0.0) {
            return bad("innovation_sd must be positive and feature_noise_sd non-negative".into());
        }
        for [m, s] in [self.happiness_moments, self.stress_moments] {
            if !(0.0..=100.0).contains(&m) || !(s > 0.0) {
                return bad(format!("label moments ({m}, {s}) out of range"));
            }
        }
        if self.n_informative_features + self.n_noise_features == 0 {
            return bad("at least one feature is required".into());
        }
        Ok(())
    }
}

/// Per-user personality scores (1–100) and gender (0/1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitRow {
    pub user_id: String,
    pub extraversion: f64,
    pub agreeableness: f64,
    pub conscientiousness: f64,
    pub openness: f64,
    pub neuroticism: f64,
    pub gender: u8,
}

impl TraitRow {
    pub fn values(&self) -> [f64; 6] {
        [self.extraversion, self.agreeableness, self.conscientiousness, self.openness, self.neuroticism, self.gender as f64]
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// Unweighted ground-truth contact graph.
    pub graph: SocialGraph,
    pub panel: FeaturePanel,
    /// `[user][day]` latent states after burn-in.
    pub latent_stress: Vec<Vec<f64>>,
    pub latent_happiness: Vec<Vec<f64>>,
    pub calls: Vec<CallRecord>,
    pub sms: Vec<SmsRecord>,
    pub traits: Vec<TraitRow>,
}

impl SynthDataset {
    pub fn interval(&self) -> Interval {
        study_interval(&self.config)
    }

    /// Writes `roster.csv`, `edges.csv`, `calls.csv`, `sms.csv`,
    /// `features.csv`, `labels.csv` and `traits.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut roster = csv::Writer::from_path(dir.join("roster.csv"))?;
        roster.write_record(["user_id"])?;
        for u in &self.panel.users {
            roster.write_record([u])?;
        }
        roster.flush()?;
        self.graph.write_edge_list(fs::File::create(dir.join("edges.csv"))?)?;
        write_call_log(&self.calls, fs::File::create(dir.join("calls.csv"))?)?;
        write_sms_log(&self.sms, fs::File::create(dir.join("sms.csv"))?)?;
        self.panel.write_features_csv(fs::File::create(dir.join("features.csv"))?)?;
        self.panel.write_labels_csv(fs::File::create(dir.join("labels.csv"))?)?;
        write_traits(&self.traits, fs::File::create(dir.join("traits.csv"))?)?;
        Ok(())
    }
}

pub fn write_traits<W: std::io::Write>(rows: &[TraitRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_traits<R: std::io::Read>(input: R) -> Result<Vec<TraitRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn study_interval(cfg: &SynthConfig) -> Interval {
    let start = Utc.from_utc_datetime(&cfg.start_date.and_hms_opt(0, 0, 0).expect("midnight"));
    let end = start + Duration::days(cfg.n_days as i64) - Duration::seconds(1);
    Interval::new(start, end).expect("n_days >= 2")
}

/// Mean of `clamp(round(X), 0, kmax)` for `X ~ N(mu, sd)`.
fn clipped_mean(mu: f64, sd: f64, kmax: usize) -> f64 {
    if sd == 0.0 {
        return mu.round().clamp(0.0, kmax as f64);
    }
    let n = StatNormal::new(mu, sd).expect("sd > 0");
    (1..=kmax)
        .map(|k| {
            let upper = if k == kmax { 1.0 } else { n.cdf(k as f64 + 0.5) };
            k as f64 * (upper - n.cdf(k as f64 - 0.5))
        })
        .sum()
}

/// Degree sequence from a clipped, rounded normal whose location is shifted
/// so the clipped mean hits `mean`, then nudged so the stub total equals the
/// even integer nearest `mean · n`.
fn degree_sequence(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<usize> {
    let n = cfg.n_users;
    let kmax = cfg.max_degree.min(n - 1);
    let (mut lo, mut hi) = (-100.0 * (cfg.sd_degree + 1.0), kmax as f64 + 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clipped_mean(mid, cfg.sd_degree, kmax) < cfg.mean_degree {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let mut deg: Vec<usize> = if cfg.sd_degree > 0.0 {
        let dist = Normal::new(mu, cfg.sd_degree).expect("sd > 0");
        (0..n).map(|_| dist.sample(rng).round().clamp(0.0, kmax as f64) as usize).collect()
    } else {
        vec![mu.round().clamp(0.0, kmax as f64) as usize; n]
    };
    let mut want = (cfg.mean_degree * n as f64).round() as usize;
    want -= want % 2;
    let mut total: usize = deg.iter().sum();
    while total != want {
        let i = rng.random_range(0..n);
        if total < want && deg[i] < kmax {
            deg[i] += 1;
            total += 1;
        } else if total > want && deg[i] > 0 {
            deg[i] -= 1;
            total -= 1;
        }
    }
    deg
}

/// Stub matching without self-loops or repeated edges; a stub that cannot
/// be paired validly after a bounded number of swaps is discarded.
fn match_stubs(deg: &[usize], rng: &mut impl Rng) -> BTreeSet<(usize, usize)> {
    let mut stubs: Vec<usize> = deg.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect();
    stubs.shuffle(rng);
    let mut edges = BTreeSet::new();
    while stubs.len() >= 2 {
        let a = stubs.pop().expect("len >= 2");
        let ok = |b: usize, edges: &BTreeSet<(usize, usize)>| b != a && !edges.contains(&(a.min(b), a.max(b)));
        let mut placed = false;
        for _ in 0..50 {
            let k = rng.random_range(0..stubs.len());
            if ok(stubs[k], &edges) {
                let b = stubs.swap_remove(k);
                edges.insert((a.min(b), a.max(b)));
                placed = true;
                break;
            }
        }
        if !placed {
            if let Some(k) = stubs.iter().position(|&b| ok(b, &edges)) {
                let b = stubs.swap_remove(k);
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    edges
}

fn simulate_latent(cfg: &SynthConfig, neighbors: &[Vec<usize>], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = cfg.n_users;
    let noise = Normal::new(0.0, cfg.innovation_sd).expect("sd > 0");
    let mut e: Vec<f64> = (0..n).map(|_| noise.sample(rng)).collect();
    let mut out = vec![Vec::with_capacity(cfg.n_days); n];
    for t in 0..cfg.burn_in + cfg.n_days {
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let social = if neighbors[i].is_empty() {
                    0.0
                } else {
                    neighbors[i].iter().map(|&j| e[j]).sum::<f64>() / neighbors[i].len() as f64
                };
                cfg.autoregression * e[i] + cfg.contagion * social + noise.sample(rng)
            })
            .collect();
        e = next;
        if t >= cfg.burn_in {
            for i in 0..n {
                out[i].push(e[i]);
            }
        }
    }
    out
}

/// Affine map `a + b·e` clipped to `[0, 100]`, with `(a, b)` tuned so the
/// clipped values reach the target mean and sd.
fn calibrate(latent: &[f64], [target_mean, target_sd]: [f64; 2]) -> (f64, f64) {
    let n = latent.len() as f64;
    let m = latent.iter().sum::<f64>() / n;
    let s = (latent.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let (mut a, mut b) = (target_mean - target_sd * m / s, target_sd / s);
    for _ in 0..200 {
        let y: Vec<f64> = latent.iter().map(|x| (a + b * x).clamp(0.0, 100.0)).collect();
        let ym = y.iter().sum::<f64>() / n;
        let ys = (y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n).sqrt();
        if (ym - target_mean).abs() < 1e-9 && (ys - target_sd).abs() < 1e-9 {
            break;
        }
        if ys > 0.0 {
            // rescale about the current center, then shift
            let c = (ym - a) / b;
            b *= target_sd / ys;
            a = ym - b * c;
        }
        a += target_mean - ym;
    }
    (a, b)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_users;
    let width = n.to_string().len().max(2);
    let users: Vec<String> = (0..n).map(|i| format!("u{i:0width$}")).collect();

    let deg = degree_sequence(cfg, &mut rng);
    let edges = match_stubs(&deg, &mut rng);
    let mut adjacency = DMatrix::zeros(n, n);
    let mut neighbors = vec![Vec::new(); n];
    for &(a, b) in &edges {
        adjacency[(a, b)] = 1.0;
        adjacency[(b, a)] = 1.0;
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    let interval = study_interval(cfg);
    let graph = SocialGraph::new(users.clone(), adjacency, Some(interval))?;

    let latent_stress = simulate_latent(cfg, &neighbors, &mut rng);
    let latent_happiness = simulate_latent(cfg, &neighbors, &mut rng);

    let mut feature_names = Vec::new();
    for k in 0..cfg.n_informative_features {
        feature_names.push(format!("inf_{k}"));
    }
    for k in 0..cfg.n_noise_features {
        feature_names.push(format!("noise_{k}"));
    }
    let mut panel = FeaturePanel::new(users.clone(), cfg.start_date, cfg.n_days, feature_names);

    // informative feature k loads on stress (even k) or happiness (odd k)
    let loadings: Vec<(f64, bool)> = (0..cfg.n_informative_features)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (sign * rng.random_range(0.6..1.4), rng.random::<bool>())
        })
        .collect();
    let feature_noise = Normal::new(0.0, cfg.feature_noise_sd.max(1e-300)).expect("sd > 0");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for u in 0..n {
        for d in 0..cfg.n_days {
            let mut row = Vec::with_capacity(panel.n_features());
            for (k, &(load, nonlinear)) in loadings.iter().enumerate() {
                let e = if k % 2 == 0 { latent_stress[u][d] } else { latent_happiness[u][d] };
                let signal = if nonlinear { 1.5 * (load * e).tanh() } else { load * e };
                let eps = if cfg.feature_noise_sd > 0.0 { feature_noise.sample(&mut rng) } else { 0.0 };
                row.push(signal + eps);
            }
            for _ in 0..cfg.n_noise_features {
                row.push(unit.sample(&mut rng));
            }
            let row_missing = rng.random::<f64>() < cfg.missing_row_rate;
            for v in row.iter_mut() {
                if rng.random::<f64>() < cfg.missing_cell_rate {
                    *v = f64::NAN;
                }
            }
            if !row_missing {
                panel.set_row(u, d, &row);
            }
        }
    }

    for (target, latent, moments) in [
        (Target::Stress, &latent_stress, cfg.stress_moments),
        (Target::Happiness, &latent_happiness, cfg.happiness_moments),
    ] {
        let observed: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (0..cfg.n_days).map(move |d| (u, d)))
            .filter(|_| rng.random::<f64>() >= cfg.missing_label_rate)
            .collect();
        let values: Vec<f64> = observed.iter().map(|&(u, d)| latent[u][d]).collect();
        let (a, b) = calibrate(&values, moments);
        for &(u, d) in &observed {
            panel.set_label(target, u, d, Some((a + b * latent[u][d]).clamp(0.0, 100.0)))?;
        }
    }

    let (calls, sms) = contact_logs(cfg, &users, &edges, &interval, &mut rng);
    let traits = traits_for(&users, &mut rng);

    Ok(SynthDataset { config: cfg.clone(), graph, panel, latent_stress, latent_happiness, calls, sms, traits })
}

/// At least one call and one text along every edge, in random directions.
fn contact_logs(
    cfg: &SynthConfig,
    users: &[String],
    edges: &BTreeSet<(usize, usize)>,
    interval: &Interval,
    rng: &mut impl Rng,
) -> (Vec<CallRecord>, Vec<SmsRecord>) {
    let span = (interval.end - interval.start).num_seconds();
    let scale = cfg.n_days as f64 / 30.0;
    let n_calls = Poisson::new(3.0 * scale).expect("positive rate");
    let n_texts = Poisson::new(6.0 * scale).expect("positive rate");
    let duration = Exp::new(1.0 / 120.0).expect("positive rate");
    let mut calls = Vec::new();
    let mut sms = Vec::new();
    for &(a, b) in edges {
        let k = 1 + n_calls.sample(rng) as usize;
        for _ in 0..k {
            let (from, to) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            let d: f64 = duration.sample(rng);
            calls.push(CallRecord { timestamp: interval.start + Duration::seconds(rng.random_range(0..=span)), caller: users[from].clone(), callee: users[to].clone(), duration: (d.round()).max(1.0) });
        }
        let k = 1 + n_texts.sample(rng) as usize;
        for _ in 0..k {
            let (from, to) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            let sms_class = if rng.random::<f64>() < 0.8 { SmsClass::Text } else { SmsClass::Flash };
            sms.push(SmsRecord { timestamp: interval.start + Duration::seconds(rng.random_range(0..=span)), sender: users[from].clone(), receiver: users[to].clone(), sms_class });
        }
    }
    calls.sort_by(|x, y| x.timestamp.cmp(&y.timestamp).then_with(|| x.caller.cmp(&y.caller)).then_with(|| x.callee.cmp(&y.callee)));
    sms.sort_by(|x, y| x.timestamp.cmp(&y.timestamp).then_with(|| x.sender.cmp(&y.sender)).then_with(|| x.receiver.cmp(&y.receiver)));
    (calls, sms)
}

/// Traits drawn around three personality prototypes.
fn traits_for(users: &[String], rng: &mut impl Rng) -> Vec<TraitRow> {
    const PROTOTYPES: [[f64; 5]; 3] = [[75.0, 60.0, 45.0, 70.0, 30.0], [35.0, 70.0, 75.0, 40.0, 45.0], [50.0, 35.0, 40.0, 55.0, 75.0]];
    let spread = Normal::new(0.0, 8.0).expect("sd > 0");
    users
        .iter()
        .map(|u| {
            let p = PROTOTYPES[rng.random_range(0..PROTOTYPES.len())];
            let v: Vec<f64> = p.iter().map(|m| (m + spread.sample(rng)).clamp(1.0, 100.0).round()).collect();
            TraitRow {
                user_id: u.clone(),
                extraversion: v[0],
                agreeableness: v[1],
                conscientiousness: v[2],
                openness: v[3],
                neuroticism: v[4],
                gender: rng.random_range(0..=1),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContagionTest {
    pub neighbor_mean: f64,
    pub non_neighbor_mean: f64,
    pub p_value: f64,
    pub permutations: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 3 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// One-sided permutation test of whether `corr(y_i[n], y_j[n−1])` is larger
/// for graph neighbours than for non-neighbours. Pair labels are shuffled;
/// `p = (1 + #{perm ≥ observed}) / (1 + B)`.
pub fn contagion_signal(panel: &FeaturePanel, graph: &SocialGraph, target: Target, permutations: usize, seed: u64) -> Result<ContagionTest> {
    if permutations == 0 {
        return Err(Error::Config("permutations must be positive".into()));
    }
    let idx = graph.index_of();
    let mut corrs = Vec::new();
    let mut is_nb = Vec::new();
    for i in 0..panel.n_users() {
        for j in 0..panel.n_users() {
            if i == j {
                continue;
            }
            let (x, y): (Vec<f64>, Vec<f64>) = (1..panel.n_days())
                .filter_map(|n| Some((panel.label(target, i, n)?, panel.label(target, j, n - 1)?)))
                .unzip();
            let Some(r) = pearson(&x, &y) else { continue };
            let nb = match (idx.get(panel.users[i].as_str()), idx.get(panel.users[j].as_str())) {
                (Some(&a), Some(&b)) => graph.adjacency[(a, b)] != 0.0 || graph.adjacency[(b, a)] != 0.0,
                _ => false,
            };
            corrs.push(r);
            is_nb.push(nb);
        }
    }
    let k = is_nb.iter().filter(|b| **b).count();
    if k == 0 || k == corrs.len() {
        return Err(Error::Data("need both neighbour and non-neighbour pairs".into()));
    }
    let total: f64 = corrs.iter().sum();
    let diff = |labels: &[bool]| {
        let s: f64 = corrs.iter().zip(labels).filter(|(_, b)| **b).map(|(c, _)| c).sum();
        s / k as f64 - (total - s) / (corrs.len() - k) as f64
    };
    let observed = diff(&is_nb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = is_nb.clone();
    let mut hits = 0usize;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        if diff(&labels) >= observed {
            hits += 1;
        }
    }
    let nb_sum: f64 = corrs.iter().zip(&is_nb).filter(|(_, b)| **b).map(|(c, _)| c).sum();
    Ok(ContagionTest {
        neighbor_mean: nb_sum / k as f64,
        non_neighbor_mean: (total - nb_sum) / (corrs.len() - k) as f64,
        p_value: (1 + hits) as f64 / (1 + permutations) as f64,
        permutations,
    })
}
