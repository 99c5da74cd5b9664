//! Call/SMS log ingestion and social graph construction.
//!
//! Call graph weights are summed call durations; SMS graph weights are
//! class-weighted message counts. Both are directed. [`combine_graphs`]
//! max-scales each graph and mixes them; [`SocialGraph::symmetrized`] turns the
//! result into the undirected form the models consume.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CALL_HEADER: [&str; 4] = ["timestamp", "caller", "callee", "duration_s"];
pub const SMS_HEADER: [&str; 4] = ["timestamp", "sender", "receiver", "class"];
pub const EDGE_HEADER: [&str; 3] = ["src", "dst", "weight"];

/// Default weight for a class-1 (text body) message.
pub const DEFAULT_W1: f64 = 1.0;
/// Default weight for a class-0 (flash, no body) message.
pub const DEFAULT_W2: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub timestamp: DateTime<Utc>,
    pub caller: String,
    pub callee: String,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SmsClass {
    /// Flash message without a body.
    Flash = 0,
    /// Regular message with a text body.
    Text = 1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmsRecord {
    pub timestamp: DateTime<Utc>,
    pub sender: String,
    pub receiver: String,
    pub sms_class: SmsClass,
}

/// Closed time interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Interval {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        if start >= end {
            return Err(Error::pre(format!("interval start {start} is not before end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        *t >= self.start && *t <= self.end
    }
}

/// Weighted adjacency over an ordered roster of users.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialGraph {
    pub node_ids: Vec<String>,
    pub adjacency: DMatrix<f64>,
    pub interval: Option<Interval>,
}

/// A constructed graph together with the number of log rows that were dropped
/// (unknown users or timestamps outside the interval).
#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: SocialGraph,
    pub dropped: usize,
}

impl SocialGraph {
    pub fn new(node_ids: Vec<String>, adjacency: DMatrix<f64>, interval: Option<Interval>) -> Result<Self> {
        let n = node_ids.len();
        if adjacency.nrows() != n || adjacency.ncols() != n {
            return Err(Error::shape(
                "SocialGraph::new",
                format!("{} ids but {}x{} adjacency", n, adjacency.nrows(), adjacency.ncols()),
            ));
        }
        if adjacency.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::pre("adjacency weights must be finite and non-negative"));
        }
        Ok(Self { node_ids, adjacency, interval })
    }

    pub fn empty(node_ids: Vec<String>, interval: Option<Interval>) -> Self {
        let n = node_ids.len();
        Self { node_ids, adjacency: DMatrix::zeros(n, n), interval }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.len();
        (0..n).all(|i| (i + 1..n).all(|j| (self.adjacency[(i, j)] - self.adjacency[(j, i)]).abs() <= tol))
    }

    /// `A + Aᵀ`.
    pub fn symmetrized(&self) -> SocialGraph {
        let adjacency = &self.adjacency + self.adjacency.transpose();
        SocialGraph { node_ids: self.node_ids.clone(), adjacency, interval: self.interval }
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.node_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    /// Sum of all adjacency entries.
    pub fn total_weight(&self) -> f64 {
        self.adjacency.iter().sum()
    }

    /// Writes every non-zero entry as a `src,dst,weight` row, row-major.
    pub fn write_edge_list<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(EDGE_HEADER)?;
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                let w = self.adjacency[(i, j)];
                if w != 0.0 {
                    wtr.write_record([self.node_ids[i].as_str(), self.node_ids[j].as_str(), &format_weight(w)])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads an edge list over a fixed roster. Entries are set, not summed.
    pub fn read_edge_list<R: Read>(input: R, roster: &[String]) -> Result<SocialGraph> {
        let mut graph = SocialGraph::empty(roster.to_vec(), None);
        let index: HashMap<String, usize> = roster.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        check_header(&mut rdr, &EDGE_HEADER)?;
        for rec in rdr.records() {
            let rec = rec?;
            let line = line_of(&rec);
            let field = |k: usize| rec.get(k).map(str::trim).unwrap_or("");
            let src = *index
                .get(field(0))
                .ok_or_else(|| Error::Parse { line, message: format!("unknown user `{}`", field(0)) })?;
            let dst = *index
                .get(field(1))
                .ok_or_else(|| Error::Parse { line, message: format!("unknown user `{}`", field(1)) })?;
            let w: f64 = field(2)
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("bad weight `{}`", field(2)) })?;
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Parse { line, message: format!("weight must be non-negative, got {w}") });
            }
            graph.adjacency[(src, dst)] = w;
        }
        Ok(graph)
    }
}

fn format_weight(w: f64) -> String {
    // shortest round-trip representation
    format!("{w}")
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse { line: 1, message: format!("expected header `{}`, got `{}`", expected.join(","), got.join(",")) });
    }
    Ok(())
}

fn parse_timestamp(s: &str, line: usize) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::Parse { line, message: format!("bad timestamp `{s}`: {e}") })
}

/// Parses a call log with header `timestamp,caller,callee,duration_s`.
pub fn parse_call_log<R: Read>(input: R) -> Result<Vec<CallRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    check_header(&mut rdr, &CALL_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 4 {
            return Err(Error::Parse { line, message: format!("expected 4 fields, got {}", rec.len()) });
        }
        let timestamp = parse_timestamp(&rec[0], line)?;
        let caller = rec[1].trim().to_string();
        let callee = rec[2].trim().to_string();
        let duration: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("bad duration `{}`", &rec[3]) })?;
        if !duration.is_finite() || duration < 0.0 {
            return Err(Error::Parse { line, message: format!("negative or non-finite duration {duration}") });
        }
        if caller.is_empty() || callee.is_empty() {
            return Err(Error::Parse { line, message: "empty user id".into() });
        }
        if caller == callee {
            return Err(Error::Parse { line, message: format!("self-call by `{caller}`") });
        }
        out.push(CallRecord { timestamp, caller, callee, duration });
    }
    Ok(out)
}

/// Parses an SMS log with header `timestamp,sender,receiver,class`.
pub fn parse_sms_log<R: Read>(input: R) -> Result<Vec<SmsRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    check_header(&mut rdr, &SMS_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 4 {
            return Err(Error::Parse { line, message: format!("expected 4 fields, got {}", rec.len()) });
        }
        let timestamp = parse_timestamp(&rec[0], line)?;
        let sender = rec[1].trim().to_string();
        let receiver = rec[2].trim().to_string();
        let sms_class = match rec[3].trim() {
            "0" => SmsClass::Flash,
            "1" => SmsClass::Text,
            other => return Err(Error::Parse { line, message: format!("sms class must be 0 or 1, got `{other}`") }),
        };
        if sender.is_empty() || receiver.is_empty() {
            return Err(Error::Parse { line, message: "empty user id".into() });
        }
        if sender == receiver {
            return Err(Error::Parse { line, message: format!("self-message by `{sender}`") });
        }
        out.push(SmsRecord { timestamp, sender, receiver, sms_class });
    }
    Ok(out)
}

pub fn write_call_log<W: Write>(records: &[CallRecord], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CALL_HEADER)?;
    for r in records {
        wtr.write_record([
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            r.caller.clone(),
            r.callee.clone(),
            format_weight(r.duration),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_sms_log<W: Write>(records: &[SmsRecord], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(SMS_HEADER)?;
    for r in records {
        wtr.write_record([
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            r.sender.clone(),
            r.receiver.clone(),
            (r.sms_class as u8).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn roster_index(roster: &[String]) -> Result<HashMap<&str, usize>> {
    if roster.is_empty() {
        return Err(Error::pre("roster is empty"));
    }
    let index: HashMap<&str, usize> = roster.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if index.len() != roster.len() {
        return Err(Error::pre("roster contains duplicate user ids"));
    }
    Ok(index)
}

/// Call graph: `A[i][j]` is the total duration of calls from `i` to `j`
/// inside `interval`.
pub fn build_call_graph(records: &[CallRecord], roster: &[String], interval: Interval) -> Result<GraphBuild> {
    let index = roster_index(roster)?;
    let mut graph = SocialGraph::empty(roster.to_vec(), Some(interval));
    let mut dropped = 0;
    for r in records {
        match (index.get(r.caller.as_str()), index.get(r.callee.as_str())) {
            (Some(&i), Some(&j)) if interval.contains(&r.timestamp) => graph.adjacency[(i, j)] += r.duration,
            _ => dropped += 1,
        }
    }
    Ok(GraphBuild { graph, dropped })
}

/// SMS graph: `A[i][j] = w1 * #text(i→j) + w2 * #flash(i→j)` inside `interval`.
pub fn build_sms_graph(
    records: &[SmsRecord],
    roster: &[String],
    interval: Interval,
    w1: f64,
    w2: f64,
) -> Result<GraphBuild> {
    if !(w2 > 0.0 && w1 > w2) || !w1.is_finite() {
        return Err(Error::Config(format!("sms weights need w1 > w2 > 0, got w1={w1}, w2={w2}")));
    }
    let index = roster_index(roster)?;
    let n = roster.len();
    let mut text = DMatrix::<f64>::zeros(n, n);
    let mut flash = DMatrix::<f64>::zeros(n, n);
    let mut dropped = 0;
    for r in records {
        match (index.get(r.sender.as_str()), index.get(r.receiver.as_str())) {
            (Some(&i), Some(&j)) if interval.contains(&r.timestamp) => match r.sms_class {
                SmsClass::Text => text[(i, j)] += 1.0,
                SmsClass::Flash => flash[(i, j)] += 1.0,
            },
            _ => dropped += 1,
        }
    }
    let adjacency = text * w1 + flash * w2;
    Ok(GraphBuild { graph: SocialGraph { node_ids: roster.to_vec(), adjacency, interval: Some(interval) }, dropped })
}

fn max_scaled(a: &DMatrix<f64>) -> DMatrix<f64> {
    let max = a.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        a / max
    } else {
        a.clone()
    }
}

/// `mix * call/max(call) + (1 - mix) * sms/max(sms)`; all-zero inputs are
/// left unscaled.
pub fn combine_graphs(call: &SocialGraph, sms: &SocialGraph, mix: f64) -> Result<SocialGraph> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Config(format!("mix must lie in [0, 1], got {mix}")));
    }
    if call.node_ids != sms.node_ids {
        return Err(Error::pre("call and sms graphs have different rosters"));
    }
    if call.interval != sms.interval {
        return Err(Error::pre("call and sms graphs cover different intervals"));
    }
    let adjacency = max_scaled(&call.adjacency) * mix + max_scaled(&sms.adjacency) * (1.0 - mix);
    Ok(SocialGraph { node_ids: call.node_ids.clone(), adjacency, interval: call.interval })
}
