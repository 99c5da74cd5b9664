//! Feature-panel preprocessing: sparse-feature removal, two-stage k-NN
//! imputation, z-score outlier removal, standardization, sequence windows and
//! label binning.
//!
//! A panel is a dense `user x day x feature` grid. Missing cells are `NaN`;
//! a whole (user, day) row can also be absent (no data that day, or removed as
//! an outlier).

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_Z: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Stress,
    Happiness,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stress" => Ok(Target::Stress),
            "happiness" => Ok(Target::Happiness),
            other => Err(Error::Config(format!("unknown target `{other}` (expected stress|happiness)"))),
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Target::Stress => "stress",
            Target::Happiness => "happiness",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePanel {
    pub users: Vec<String>,
    /// Consecutive calendar days.
    pub days: Vec<NaiveDate>,
    pub feature_names: Vec<String>,
    values: Vec<f64>,
    present: Vec<bool>,
    stress: Vec<f64>,
    happiness: Vec<f64>,
}

impl FeaturePanel {
    /// An all-absent panel over a contiguous day range starting at `first_day`.
    pub fn new(users: Vec<String>, first_day: NaiveDate, n_days: usize, feature_names: Vec<String>) -> Self {
        let days = first_day.iter_days().take(n_days).collect();
        let (nu, nf) = (users.len(), feature_names.len());
        Self {
            users,
            days,
            feature_names,
            values: vec![f64::NAN; nu * n_days * nf],
            present: vec![false; nu * n_days],
            stress: vec![f64::NAN; nu * n_days],
            happiness: vec![f64::NAN; nu * n_days],
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn slot(&self, user: usize, day: usize) -> usize {
        user * self.n_days() + day
    }

    pub fn is_present(&self, user: usize, day: usize) -> bool {
        self.present[self.slot(user, day)]
    }

    pub fn row(&self, user: usize, day: usize) -> &[f64] {
        let nf = self.n_features();
        let s = self.slot(user, day) * nf;
        &self.values[s..s + nf]
    }

    /// Marks the row present and stores its values (`NaN` = missing cell).
    pub fn set_row(&mut self, user: usize, day: usize, values: &[f64]) {
        assert_eq!(values.len(), self.n_features());
        let slot = self.slot(user, day);
        let nf = self.n_features();
        self.present[slot] = true;
        self.values[slot * nf..(slot + 1) * nf].copy_from_slice(values);
    }

    pub fn remove_row(&mut self, user: usize, day: usize) {
        let slot = self.slot(user, day);
        let nf = self.n_features();
        self.present[slot] = false;
        self.values[slot * nf..(slot + 1) * nf].fill(f64::NAN);
    }

    pub fn label(&self, target: Target, user: usize, day: usize) -> Option<f64> {
        let slot = self.slot(user, day);
        let v = match target {
            Target::Stress => self.stress[slot],
            Target::Happiness => self.happiness[slot],
        };
        (!v.is_nan()).then_some(v)
    }

    pub fn set_label(&mut self, target: Target, user: usize, day: usize, value: Option<f64>) -> Result<()> {
        let v = value.unwrap_or(f64::NAN);
        if value.is_some() && !(0.0..=100.0).contains(&v) {
            return Err(Error::Data(format!("label {v} outside [0, 100]")));
        }
        let slot = self.slot(user, day);
        match target {
            Target::Stress => self.stress[slot] = v,
            Target::Happiness => self.happiness[slot] = v,
        }
        Ok(())
    }

    /// Present (user, day) rows in user-major order.
    pub fn present_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_users()).flat_map(move |u| (0..self.n_days()).map(move |d| (u, d))).filter(|&(u, d)| self.is_present(u, d))
    }

    /// Number of missing cells inside present rows.
    pub fn missing_count(&self) -> usize {
        self.present_rows().map(|(u, d)| self.row(u, d).iter().filter(|x| x.is_nan()).count()).sum()
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect()
    }

    fn keep_features(&self, keep: &[usize]) -> FeaturePanel {
        let nf = self.n_features();
        let mut values = Vec::with_capacity(self.present.len() * keep.len());
        for slot in 0..self.present.len() {
            values.extend(keep.iter().map(|&f| self.values[slot * nf + f]));
        }
        FeaturePanel {
            feature_names: keep.iter().map(|&f| self.feature_names[f].clone()).collect(),
            values,
            ..self.clone()
        }
    }

    /// Reads `user_id,date,<features...>` and `user_id,date,stress,happiness`.
    /// Users are ordered by first appearance in the feature file; the day axis
    /// spans the earliest to the latest date in either file.
    pub fn from_csv<R1: Read, R2: Read>(features: R1, labels: R2) -> Result<FeaturePanel> {
        let mut frdr = csv::ReaderBuilder::new().from_reader(features);
        let header = frdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "user_id" || &header[1] != "date" {
            return Err(Error::Parse { line: 1, message: "feature header must start with `user_id,date` and name at least one feature".into() });
        }
        let feature_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let nf = feature_names.len();
        let mut feature_rows = Vec::new();
        for rec in frdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != nf + 2 {
                return Err(Error::Parse { line, message: format!("expected {} fields, got {}", nf + 2, rec.len()) });
            }
            let date = parse_date(&rec[1], line)?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|c| parse_cell(c, line))
                .collect::<Result<Vec<f64>>>()?;
            feature_rows.push((rec[0].trim().to_string(), date, vals));
        }

        let mut lrdr = csv::ReaderBuilder::new().from_reader(labels);
        let lheader: Vec<String> = lrdr.headers()?.iter().map(str::to_string).collect();
        if lheader != ["user_id", "date", "stress", "happiness"] {
            return Err(Error::Parse { line: 1, message: "label header must be `user_id,date,stress,happiness`".into() });
        }
        let mut label_rows = Vec::new();
        for rec in lrdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != 4 {
                return Err(Error::Parse { line, message: format!("expected 4 fields, got {}", rec.len()) });
            }
            let date = parse_date(&rec[1], line)?;
            let s = parse_cell(&rec[2], line)?;
            let h = parse_cell(&rec[3], line)?;
            for v in [s, h] {
                if !v.is_nan() && !(0.0..=100.0).contains(&v) {
                    return Err(Error::Parse { line, message: format!("label {v} outside [0, 100]") });
                }
            }
            label_rows.push((rec[0].trim().to_string(), date, s, h));
        }

        let mut users: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for (u, _, _) in &feature_rows {
            if seen.insert(u.clone()) {
                users.push(u.clone());
            }
        }
        let dates: BTreeSet<NaiveDate> =
            feature_rows.iter().map(|r| r.1).chain(label_rows.iter().map(|r| r.1)).collect();
        let (Some(&first), Some(&last)) = (dates.first(), dates.last()) else {
            return Err(Error::Data("feature file has no rows".into()));
        };
        let n_days = (last - first).num_days() as usize + 1;
        let mut panel = FeaturePanel::new(users, first, n_days, feature_names);
        let index: HashMap<String, usize> = panel.users.iter().cloned().enumerate().map(|(i, u)| (u, i)).collect();
        for (u, date, vals) in feature_rows {
            let d = (date - first).num_days() as usize;
            let ui = index[&u];
            if panel.is_present(ui, d) {
                return Err(Error::Data(format!("duplicate feature row for {u} on {date}")));
            }
            panel.set_row(ui, d, &vals);
        }
        for (u, date, s, h) in label_rows {
            // labels for users without feature rows cannot be used
            let Some(&ui) = index.get(&u) else { continue };
            let d = (date - first).num_days() as usize;
            panel.set_label(Target::Stress, ui, d, (!s.is_nan()).then_some(s))?;
            panel.set_label(Target::Happiness, ui, d, (!h.is_nan()).then_some(h))?;
        }
        Ok(panel)
    }

    /// Writes present rows; missing cells are empty.
    pub fn write_features_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["user_id".to_string(), "date".to_string()];
        header.extend(self.feature_names.iter().cloned());
        wtr.write_record(&header)?;
        for (u, d) in self.present_rows() {
            let mut rec = vec![self.users[u].clone(), self.days[d].format(DATE_FORMAT).to_string()];
            rec.extend(self.row(u, d).iter().map(|v| fmt_cell(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes every (user, day) with at least one label.
    pub fn write_labels_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["user_id", "date", "stress", "happiness"])?;
        for u in 0..self.n_users() {
            for d in 0..self.n_days() {
                let s = self.label(Target::Stress, u, d);
                let h = self.label(Target::Happiness, u, d);
                if s.is_some() || h.is_some() {
                    wtr.write_record([
                        self.users[u].clone(),
                        self.days[d].format(DATE_FORMAT).to_string(),
                        s.map(fmt_label).unwrap_or_default(),
                        h.map(fmt_label).unwrap_or_default(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn fmt_label(v: f64) -> String {
    format!("{v}")
}

fn parse_date(s: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).map_err(|e| Error::Parse { line, message: format!("bad date `{s}`: {e}") })
}

fn parse_cell(s: &str, line: usize) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    let v: f64 = s.parse().map_err(|_| Error::Parse { line, message: format!("bad number `{s}`") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value `{s}`") });
    }
    Ok(v)
}

/// Removes features missing in more than half of the present rows.
pub fn drop_sparse_features(panel: &FeaturePanel) -> Result<(FeaturePanel, Vec<String>)> {
    let total = panel.present_rows().count();
    if total == 0 {
        return Err(Error::pre("panel has no samples"));
    }
    let mut missing = vec![0usize; panel.n_features()];
    for (u, d) in panel.present_rows() {
        for (f, v) in panel.row(u, d).iter().enumerate() {
            if v.is_nan() {
                missing[f] += 1;
            }
        }
    }
    let keep: Vec<usize> = (0..panel.n_features()).filter(|&f| 2 * missing[f] <= total).collect();
    if keep.is_empty() {
        return Err(Error::Data("every feature is missing in more than half of the samples".into()));
    }
    let dropped = (0..panel.n_features())
        .filter(|f| !keep.contains(f))
        .map(|f| panel.feature_names[f].clone())
        .collect();
    Ok((panel.keep_features(&keep), dropped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeScope {
    /// Neighbours drawn only from the same user's rows.
    PerUser,
    /// Neighbours drawn from all users' rows.
    Global,
}

/// Euclidean distance over co-observed coordinates, rescaled by the fraction
/// of coordinates observed.
fn partial_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut common = 0usize;
    for (x, y) in a.iter().zip(b) {
        if !x.is_nan() && !y.is_nan() {
            sum += (x - y) * (x - y);
            common += 1;
        }
    }
    if common == 0 {
        f64::INFINITY
    } else {
        (sum * a.len() as f64 / common as f64).sqrt()
    }
}

/// k-NN imputation within `scope`. Fills are the mean of the `k` nearest rows
/// (by [`partial_distance`], ties by position) that observe the feature; `k`
/// is clamped to the number of such rows. Only originally observed values are
/// used as donors. Per-user scope leaves cells it cannot fill; global scope
/// fails if anything stays missing.
pub fn knn_impute(panel: &FeaturePanel, k: usize, scope: ImputeScope) -> Result<FeaturePanel> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut out = panel.clone();
    let groups: Vec<Vec<(usize, usize)>> = match scope {
        ImputeScope::PerUser => (0..panel.n_users())
            .map(|u| (0..panel.n_days()).filter(|&d| panel.is_present(u, d)).map(|d| (u, d)).collect())
            .collect(),
        ImputeScope::Global => vec![panel.present_rows().collect()],
    };
    let nf = panel.n_features();
    for rows in &groups {
        for &(u, d) in rows {
            let target = panel.row(u, d);
            if !target.iter().any(|v| v.is_nan()) {
                continue;
            }
            let mut by_distance: Vec<(f64, usize, usize)> = rows
                .iter()
                .filter(|&&r| r != (u, d))
                .map(|&(ru, rd)| (partial_distance(target, panel.row(ru, rd)), ru, rd))
                .collect();
            by_distance.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
            let mut filled = target.to_vec();
            for f in 0..nf {
                if !target[f].is_nan() {
                    continue;
                }
                let donors: Vec<f64> = by_distance
                    .iter()
                    .map(|&(_, ru, rd)| panel.row(ru, rd)[f])
                    .filter(|v| !v.is_nan())
                    .take(k)
                    .collect();
                if !donors.is_empty() {
                    filled[f] = donors.iter().sum::<f64>() / donors.len() as f64;
                }
            }
            out.set_row(u, d, &filled);
        }
    }
    if scope == ImputeScope::Global && out.missing_count() > 0 {
        return Err(Error::Data(format!("{} cells still missing after global imputation", out.missing_count())));
    }
    Ok(out)
}

/// Per-user stage followed by the pooled stage.
pub fn impute_two_stage(panel: &FeaturePanel, k: usize) -> Result<FeaturePanel> {
    let stage1 = knn_impute(panel, k, ImputeScope::PerUser)?;
    knn_impute(&stage1, k, ImputeScope::Global)
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    let vals: Vec<f64> = values.filter(|v| !v.is_nan()).collect();
    for v in &vals {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    for v in &vals {
        sq += (v - mean) * (v - mean);
    }
    (mean, (sq / n as f64).sqrt())
}

/// Removes rows with any `|z| > z_threshold`. Zero-variance features never
/// trigger removal.
pub fn remove_outliers(panel: &FeaturePanel, z_threshold: f64) -> Result<(FeaturePanel, usize)> {
    if !(z_threshold > 0.0) {
        return Err(Error::Config(format!("z threshold must be positive, got {z_threshold}")));
    }
    let rows: Vec<(usize, usize)> = panel.present_rows().collect();
    let stats: Vec<(f64, f64)> =
        (0..panel.n_features()).map(|f| moments(rows.iter().map(|&(u, d)| panel.row(u, d)[f]))).collect();
    let mut out = panel.clone();
    let mut removed = 0;
    for &(u, d) in &rows {
        let outlier = panel.row(u, d).iter().zip(&stats).any(|(v, (mean, sd))| *sd > 0.0 && ((v - mean) / sd).abs() > z_threshold);
        if outlier {
            out.remove_row(u, d);
            removed += 1;
        }
    }
    Ok((out, removed))
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Fits on the given rows, or on every present row when `rows` is `None`.
    pub fn fit(panel: &FeaturePanel, rows: Option<&[(usize, usize)]>) -> Standardizer {
        let rows: Vec<(usize, usize)> = match rows {
            Some(r) => r.to_vec(),
            None => panel.present_rows().collect(),
        };
        let (mean, sd) = (0..panel.n_features())
            .map(|f| moments(rows.iter().filter(|&&(u, d)| panel.is_present(u, d)).map(|&(u, d)| panel.row(u, d)[f])))
            .unzip();
        Standardizer { mean, sd }
    }

    pub fn transform_value(&self, f: usize, v: f64) -> f64 {
        if self.sd[f] > 0.0 {
            (v - self.mean[f]) / self.sd[f]
        } else {
            0.0
        }
    }

    pub fn apply(&self, panel: &FeaturePanel) -> FeaturePanel {
        let mut out = panel.clone();
        for (u, d) in panel.present_rows() {
            let row: Vec<f64> = panel.row(u, d).iter().enumerate().map(|(f, v)| self.transform_value(f, *v)).collect();
            out.set_row(u, d, &row);
        }
        out
    }
}

/// Standardizes every present row with statistics fitted on `fit_rows`.
pub fn standardize(panel: &FeaturePanel, fit_rows: Option<&[(usize, usize)]>) -> (FeaturePanel, Standardizer) {
    let s = Standardizer::fit(panel, fit_rows);
    (s.apply(panel), s)
}

/// One training example: the `L` feature rows preceding `day` and the label on
/// `day`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    /// Row-major `seq_len x n_features`, oldest day first.
    pub sequence: Vec<f64>,
    pub seq_len: usize,
    pub n_features: usize,
    pub target: f64,
    pub user: String,
    pub user_index: usize,
    pub day: NaiveDate,
    pub day_index: usize,
    pub topology_id: Option<String>,
}

impl SequenceSample {
    pub fn step(&self, t: usize) -> &[f64] {
        &self.sequence[t * self.n_features..(t + 1) * self.n_features]
    }
}

/// Builds `[x[n-L], …, x[n-1]] -> y[n]` windows. A day is skipped (and
/// counted) when its label is absent or any window row is absent.
pub fn make_sequences(panel: &FeaturePanel, seq_len: usize, target: Target) -> Result<(Vec<SequenceSample>, usize)> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for u in 0..panel.n_users() {
        for n in seq_len..panel.n_days() {
            let Some(y) = panel.label(target, u, n) else { continue };
            if !(n - seq_len..n).all(|d| panel.is_present(u, d)) {
                skipped += 1;
                continue;
            }
            let mut sequence = Vec::with_capacity(seq_len * panel.n_features());
            for d in n - seq_len..n {
                sequence.extend_from_slice(panel.row(u, d));
            }
            out.push(SequenceSample {
                sequence,
                seq_len,
                n_features: panel.n_features(),
                target: y,
                user: panel.users[u].clone(),
                user_index: u,
                day: panel.days[n],
                day_index: n,
                topology_id: None,
            });
        }
    }
    Ok((out, skipped))
}

/// Three-way emotion class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelBin {
    pub class_id: u8,
}

pub const DEFAULT_THRESHOLDS: (f64, f64) = (33.0, 66.0);

/// `< 33` → 0, `[33, 66]` → 1, `> 66` → 2.
pub fn bin_label(score: f64) -> Result<LabelBin> {
    bin_label_with(score, DEFAULT_THRESHOLDS)
}

/// `< lo` → 0, `[lo, hi]` → 1, `> hi` → 2.
pub fn bin_label_with(score: f64, (lo, hi): (f64, f64)) -> Result<LabelBin> {
    if !(0.0..=100.0).contains(&score) {
        return Err(Error::pre(format!("score {score} outside [0, 100]")));
    }
    let class_id = if score < lo {
        0
    } else if score <= hi {
        1
    } else {
        2
    };
    Ok(LabelBin { class_id })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub dropped_features: Vec<String>,
    pub imputed_cells: usize,
    pub outlier_rows: usize,
    pub rows: usize,
}

/// Sparse-feature removal, two-stage imputation and outlier removal.
pub fn preprocess(panel: &FeaturePanel, k: usize, z_threshold: f64) -> Result<(FeaturePanel, PreprocessSummary)> {
    let (dense, dropped_features) = drop_sparse_features(panel)?;
    let imputed_cells = dense.missing_count();
    let filled = impute_two_stage(&dense, k)?;
    let (clean, outlier_rows) = remove_outliers(&filled, z_threshold)?;
    let rows = clean.present_rows().count();
    Ok((clean, PreprocessSummary { dropped_features, imputed_cells, outlier_rows, rows }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2016, 2, 1).unwrap()
    }

    fn panel_from(user_rows: &[Vec<Vec<f64>>]) -> FeaturePanel {
        let nf = user_rows[0][0].len();
        let nd = user_rows[0].len();
        let mut p = FeaturePanel::new(
            (0..user_rows.len()).map(|u| format!("u{u}")).collect(),
            day0(),
            nd,
            (0..nf).map(|f| format!("f{f}")).collect(),
        );
        for (u, rows) in user_rows.iter().enumerate() {
            for (d, r) in rows.iter().enumerate() {
                p.set_row(u, d, r);
            }
        }
        p
    }

    const M: f64 = f64::NAN;

    #[test]
    fn sparse_feature_rule() {
        // f0: 60% missing, f1: full, f2: exactly 50% missing
        let rows = vec![
            vec![M, 1.0, M],
            vec![M, 1.0, M],
            vec![M, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![M, 1.0, M],
            vec![M, 1.0, 1.0],
            vec![1.0, 1.0, M],
            vec![1.0, 1.0, 1.0],
            vec![M, 1.0, M],
        ];
        let (p, dropped) = drop_sparse_features(&panel_from(&[rows])).unwrap();
        assert_eq!(dropped, vec!["f0".to_string()]);
        assert_eq!(p.feature_names, vec!["f1".to_string(), "f2".to_string()]);
    }

    #[test]
    fn all_sparse_is_error() {
        let rows = vec![vec![M], vec![M], vec![1.0]];
        assert!(drop_sparse_features(&panel_from(&[rows])).is_err());
    }

    #[test]
    fn knn_identical_neighbors() {
        let rows = vec![vec![1.0, 0.0], vec![M, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let p = knn_impute(&panel_from(&[rows]), 2, ImputeScope::PerUser).unwrap();
        assert_eq!(p.row(0, 1), &[1.0, 0.0]);
    }

    #[test]
    fn knn_clamps_k() {
        let rows = vec![vec![2.0, 0.0], vec![M, 0.0], vec![4.0, 0.0]];
        let p = knn_impute(&panel_from(&[rows]), 50, ImputeScope::PerUser).unwrap();
        assert_eq!(p.row(0, 1)[0], 3.0);
    }

    #[test]
    fn knn_picks_nearest() {
        let rows = vec![vec![10.0, 0.0], vec![M, 0.1], vec![20.0, 5.0], vec![30.0, 9.0]];
        let p = knn_impute(&panel_from(&[rows]), 1, ImputeScope::PerUser).unwrap();
        assert_eq!(p.row(0, 1)[0], 10.0);
    }

    #[test]
    fn two_stage_fills_user_without_observations() {
        // u0 never observes f0, so only the pooled stage can fill it
        let u0 = vec![vec![M, 1.0], vec![M, 2.0]];
        let u1 = vec![vec![5.0, 1.0], vec![7.0, 2.0]];
        let panel = panel_from(&[u0, u1]);
        let stage1 = knn_impute(&panel, 1, ImputeScope::PerUser).unwrap();
        assert_eq!(stage1.missing_count(), 2);
        let done = impute_two_stage(&panel, 1).unwrap();
        assert_eq!(done.missing_count(), 0);
        assert_eq!(done.row(0, 0)[0], 5.0);
        assert_eq!(done.row(0, 1)[0], 7.0);
    }

    #[test]
    fn global_stage_errors_when_unfillable() {
        let rows = vec![vec![M, 1.0], vec![M, 2.0]];
        assert!(knn_impute(&panel_from(&[rows]), 1, ImputeScope::Global).is_err());
    }

    #[test]
    fn outlier_cases() {
        let constant: Vec<Vec<f64>> = (0..10).map(|_| vec![4.0]).collect();
        assert_eq!(remove_outliers(&panel_from(&[constant]), 3.0).unwrap().1, 0);

        let mut spike: Vec<Vec<f64>> = (0..99).map(|_| vec![0.0]).collect();
        spike.push(vec![1000.0]);
        // mean 10, sd 99.5, so the spike sits at z = 9.95
        let (p, removed) = remove_outliers(&panel_from(&[spike.clone()]), 3.0).unwrap();
        assert_eq!(removed, 1);
        assert!(!p.is_present(0, 99));

        let (p, removed) = remove_outliers(&panel_from(&[spike]), f64::INFINITY).unwrap();
        assert_eq!(removed, 0);
        assert!(p.is_present(0, 99));
    }

    #[test]
    fn standardize_cases() {
        let (p, s) = standardize(&panel_from(&[vec![vec![2.0, 7.0], vec![4.0, 7.0]]]), None);
        assert_eq!(s.mean, vec![3.0, 7.0]);
        assert_eq!(s.sd, vec![1.0, 0.0]);
        assert_eq!(p.row(0, 0), &[-1.0, 0.0]);
        assert_eq!(p.row(0, 1), &[1.0, 0.0]);
        let (q, _) = standardize(&p, None);
        for (a, b) in q.row(0, 0).iter().zip(p.row(0, 0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sequences_index_trace() {
        let mut p = panel_from(&[vec![vec![0.0], vec![1.0], vec![2.0]]]);
        p.set_label(Target::Stress, 0, 2, Some(50.0)).unwrap();
        let (s, _) = make_sequences(&p, 2, Target::Stress).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].sequence, vec![0.0, 1.0]);
        assert_eq!(s[0].target, 50.0);
        assert_eq!(s[0].day_index, 2);

        assert!(make_sequences(&p, 5, Target::Stress).unwrap().0.is_empty());
        assert!(make_sequences(&p, 1, Target::Happiness).unwrap().0.is_empty());
    }

    #[test]
    fn sequences_skip_incomplete_windows() {
        let mut p = panel_from(&[vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]]]);
        for d in 0..4 {
            p.set_label(Target::Stress, 0, d, Some(10.0)).unwrap();
        }
        p.remove_row(0, 1);
        let (s, skipped) = make_sequences(&p, 1, Target::Stress).unwrap();
        assert_eq!(s.iter().map(|x| x.day_index).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn bin_cases() {
        assert_eq!(bin_label(20.0).unwrap().class_id, 0);
        assert_eq!(bin_label(70.0).unwrap().class_id, 2);
        assert_eq!(bin_label(33.0).unwrap().class_id, 1);
        assert_eq!(bin_label(66.0).unwrap().class_id, 1);
        assert!(bin_label(100.5).is_err());
        assert!(bin_label(-0.1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut p = panel_from(&[vec![vec![1.5, M], vec![2.0, 3.0]], vec![vec![0.0, 1.0], vec![M, M]]]);
        p.remove_row(1, 1);
        p.set_label(Target::Stress, 0, 1, Some(40.0)).unwrap();
        p.set_label(Target::Happiness, 1, 0, Some(90.5)).unwrap();
        let (mut f, mut l) = (Vec::new(), Vec::new());
        p.write_features_csv(&mut f).unwrap();
        p.write_labels_csv(&mut l).unwrap();
        let q = FeaturePanel::from_csv(f.as_slice(), l.as_slice()).unwrap();
        assert_eq!(q.users, p.users);
        assert_eq!(q.days, p.days);
        assert!(!q.is_present(1, 1));
        assert_eq!(q.row(0, 0)[0], 1.5);
        assert!(q.row(0, 0)[1].is_nan());
        assert_eq!(q.label(Target::Stress, 0, 1), Some(40.0));
        assert_eq!(q.label(Target::Happiness, 1, 0), Some(90.5));
        assert_eq!(q.label(Target::Stress, 1, 0), None);
    }

    proptest! {
        #[test]
        fn bin_is_monotone(a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bin_label(lo).unwrap() <= bin_label(hi).unwrap());
        }

        #[test]
        fn standardized_moments(vals in prop::collection::vec(-1e3f64..1e3, 3..40)) {
            let rows: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v]).collect();
            let (p, s) = standardize(&panel_from(&[rows]), None);
            prop_assume!(s.sd[0] > 1e-6);
            let z: Vec<f64> = (0..vals.len()).map(|d| p.row(0, d)[0]).collect();
            let (m, sd) = moments(z.into_iter());
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((sd - 1.0).abs() < 1e-9);
        }

        #[test]
        fn sequences_never_leak(n_days in 2usize..15, l in 1usize..5) {
            let rows: Vec<Vec<f64>> = (0..n_days).map(|d| vec![d as f64]).collect();
            let mut p = panel_from(&[rows]);
            for d in 0..n_days {
                p.set_label(Target::Stress, 0, d, Some(50.0)).unwrap();
            }
            let (s, _) = make_sequences(&p, l, Target::Stress).unwrap();
            for x in &s {
                // feature value encodes its own day index
                prop_assert!(x.sequence.iter().all(|v| (*v as usize) < x.day_index));
            }
        }
    }
}
