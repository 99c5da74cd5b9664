//! `socialgcn`: synthetic data, graph extraction, GEDD, training, sweeps and
//! network analysis from the command line.

mod output;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Duration, TimeZone, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use socialgcn_core::centrality::CentralityTable;
use socialgcn_core::experiment::{self, ExperimentData, ExperimentReport, RunConfig, SweepAxis};
use socialgcn_core::features::{preprocess, FeaturePanel, Target};
use socialgcn_core::graphcore::{check_gedd_invariants, gedd};
use socialgcn_core::ingest::{self, Interval, SocialGraph};
use socialgcn_core::models::ModelKind;
use socialgcn_core::stats::{self, Correlation};
use socialgcn_core::synth::{self, SynthConfig};
use socialgcn_core::{Error, Result};

use output::Artifacts;

const EXAMPLE_ROSTER: &str = include_str!("../data/example/roster.csv");
const EXAMPLE_EDGES: &str = include_str!("../data/example/edges.csv");

#[derive(Debug, Parser)]
#[command(name = "socialgcn", version, about = "Emotion prediction from social graphs", propagate_version = true)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "SOCIALGCN_OUT", default_value = "socialgcn-out")]
    out: PathBuf,
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with controllable emotion contagion.
    Synth(SynthArgs),
    /// Build call, SMS and combined graphs from communication logs.
    BuildGraph(BuildGraphArgs),
    /// Split a graph into fixed-size subgraphs.
    Gedd(GeddArgs),
    /// Degree, closeness, eigenvector and PageRank centrality.
    Centrality(GraphInput),
    /// Drop sparse features, impute and remove outliers.
    Preprocess(PreprocessArgs),
    /// Train and evaluate models over repeated random splits.
    Train(TrainArgs),
    /// Repeat training over graph sizes or sequence lengths.
    Sweep(SweepArgs),
    /// Relate per-user error to centrality and cluster participants by traits.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    /// Contagion coefficient in [0, 1].
    #[arg(long)]
    contagion: Option<f64>,
    /// Autoregression coefficient in [0, 1).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    mean_degree: Option<f64>,
    #[arg(long)]
    sd_degree: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    informative: Option<usize>,
    #[arg(long)]
    noise_features: Option<usize>,
}

#[derive(Debug, Args)]
struct BuildGraphArgs {
    /// Directory holding `calls.csv`, `sms.csv` and `roster.csv`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    calls: Option<PathBuf>,
    #[arg(long)]
    sms: Option<PathBuf>,
    #[arg(long)]
    roster: Option<PathBuf>,
    /// Interval start (RFC 3339); defaults to the earliest record.
    #[arg(long)]
    start: Option<DateTime<Utc>>,
    /// Interval end (RFC 3339); defaults to the latest record.
    #[arg(long)]
    end: Option<DateTime<Utc>>,
    /// Weight of the call graph in the combination.
    #[arg(long)]
    mix: Option<f64>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
}

#[derive(Debug, Args)]
struct GraphInput {
    /// Edge list `src,dst,weight`; the bundled 15-node example when omitted.
    #[arg(long, requires = "roster")]
    graph: Option<PathBuf>,
    /// Roster CSV with a `user_id` column.
    #[arg(long)]
    roster: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GeddArgs {
    #[command(flatten)]
    input: GraphInput,
    /// Subgraph size.
    #[arg(long, visible_alias = "graph-size")]
    w: usize,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Neighbours used for imputation.
    #[arg(long)]
    k: Option<usize>,
    /// Outlier z-score threshold.
    #[arg(long)]
    z: Option<f64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding `features.csv`, `labels.csv`, `calls.csv`, `sms.csv`.
    #[arg(long)]
    data: PathBuf,
    /// Precomputed edge list used instead of the communication logs.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    target: Option<Target>,
    /// Model kinds, comma separated.
    #[arg(long, value_delimiter = ',')]
    model: Vec<ModelKind>,
    #[arg(long)]
    graph_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    vary: Option<SweepAxis>,
    /// Sweep values, comma separated.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `report.json` written by `train`.
    #[arg(long)]
    report: PathBuf,
    /// Trait CSV; defaults to `traits.csv` in the data directory.
    #[arg(long)]
    traits: Option<PathBuf>,
    #[arg(long, default_value = "gcn-lstm")]
    model: ModelKind,
    #[arg(long, default_value = "ar1")]
    correlation: Correlation,
    /// Number of trait clusters; chosen by the dendrogram cut when omitted.
    #[arg(long)]
    clusters: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    error: ErrorBody<'a>,
}

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Precondition(_) => "precondition",
        Error::Shape { .. } => "shape",
        Error::NotConverged { .. } => "not-converged",
        Error::NonFiniteGradient(_) => "non-finite-gradient",
        Error::SingularDesign(_) => "singular-design",
        Error::Data(_) => "data",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn report_error(kind: &str, message: String) {
    let rec = ErrorRecord { error: ErrorBody { kind, message } };
    eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            report_error("usage", e.to_string().trim().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(error_kind(&e), e.to_string());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::BuildGraph(_) => "build-graph",
        Command::Gedd(_) => "gedd",
        Command::Centrality(_) => "centrality",
        Command::Preprocess(_) => "preprocess",
        Command::Train(_) => "train",
        Command::Sweep(_) => "sweep",
        Command::Analyze(_) => "analyze",
    };
    let mut art = Artifacts::new(name);
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a, &mut art)?,
        Command::BuildGraph(a) => cmd_build_graph(&cli, a, &mut art)?,
        Command::Gedd(a) => cmd_gedd(a, &mut art)?,
        Command::Centrality(a) => cmd_centrality(a, &mut art)?,
        Command::Preprocess(a) => cmd_preprocess(&cli, a, &mut art)?,
        Command::Train(a) => cmd_train(&cli, a, &mut art)?,
        Command::Sweep(a) => cmd_sweep(&cli, a, &mut art)?,
        Command::Analyze(a) => cmd_analyze(&cli, a, &mut art)?,
    }
    art.commit(&cli.out)
}

fn config_text(art: &mut Artifacts, path: &Option<PathBuf>) -> Result<Option<String>> {
    match path {
        Some(p) => {
            let bytes = art.read_input(p)?;
            String::from_utf8(bytes).map(Some).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(None),
    }
}

fn run_config(cli: &Cli, art: &mut Artifacts) -> Result<RunConfig> {
    match config_text(art, &cli.config)? {
        Some(text) => RunConfig::from_toml_str(&text),
        None => Ok(RunConfig::default()),
    }
}

fn finish_config(art: &mut Artifacts, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    art.set_config(cfg.to_toml_string()?, Some(cfg.train.seed));
    Ok(())
}

fn csv_bytes<F>(write: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn cmd_synth(cli: &Cli, a: &SynthArgs, art: &mut Artifacts) -> Result<()> {
    let mut cfg: SynthConfig = match config_text(art, &cli.config)? {
        Some(text) => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { cfg.$field = v; })* };
    }
    set!(users => n_users, days => n_days, contagion => contagion, rho => autoregression, mean_degree => mean_degree,
         sd_degree => sd_degree, feature_noise => feature_noise_sd, informative => n_informative_features, noise_features => n_noise_features);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    art.set_config(toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?, Some(cfg.seed));
    let d = synth::generate(&cfg)?;
    art.add_with("roster.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["user_id"])?;
        for u in &d.panel.users {
            w.write_record([u])?;
        }
        w.flush()?;
        Ok(())
    })?;
    art.add("edges.csv", csv_bytes(|b| d.graph.write_edge_list(b))?);
    art.add("calls.csv", csv_bytes(|b| ingest::write_call_log(&d.calls, b))?);
    art.add("sms.csv", csv_bytes(|b| ingest::write_sms_log(&d.sms, b))?);
    art.add("features.csv", csv_bytes(|b| d.panel.write_features_csv(b))?);
    art.add("labels.csv", csv_bytes(|b| d.panel.write_labels_csv(b))?);
    art.add("traits.csv", csv_bytes(|b| synth::write_traits(&d.traits, b))?);
    art.add_with("latent.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["user_id", "date", "stress", "happiness"])?;
        for (u, user) in d.panel.users.iter().enumerate() {
            for (t, day) in d.panel.days.iter().enumerate() {
                w.write_record([user.clone(), day.to_string(), d.latent_stress[u][t].to_string(), d.latent_happiness[u][t].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

fn read_roster(bytes: &[u8]) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["user_id"] {
        return Err(Error::Parse { line: 1, message: format!("roster header must be `user_id`, got `{}`", header.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut users = Vec::new();
    for rec in rdr.records() {
        users.push(rec?.get(0).unwrap_or("").trim().to_string());
    }
    Ok(users)
}

fn pick(dir: &Option<PathBuf>, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match (explicit, dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.join(name)),
        (None, None) => Err(Error::Config(format!("need --data or an explicit path for {name}"))),
    }
}

fn span_interval(times: impl Iterator<Item = DateTime<Utc>>) -> Result<Interval> {
    let (mut lo, mut hi) = (None::<DateTime<Utc>>, None::<DateTime<Utc>>);
    for t in times {
        lo = Some(lo.map_or(t, |l| l.min(t)));
        hi = Some(hi.map_or(t, |h| h.max(t)));
    }
    match (lo, hi) {
        (Some(l), Some(h)) => Interval::new(l, if h > l { h } else { l + Duration::seconds(1) }),
        _ => Err(Error::Data("no communication records".into())),
    }
}

fn cmd_build_graph(cli: &Cli, a: &BuildGraphArgs, art: &mut Artifacts) -> Result<()> {
    let mut cfg = run_config(cli, art)?;
    if let Some(v) = a.mix {
        cfg.data.mix = v;
    }
    if let Some(v) = a.w1 {
        cfg.data.w1 = v;
    }
    if let Some(v) = a.w2 {
        cfg.data.w2 = v;
    }
    finish_config(art, &cfg)?;
    let roster = read_roster(&art.read_input(&pick(&a.data, &a.roster, "roster.csv")?)?)?;
    let calls = ingest::parse_call_log(art.read_input(&pick(&a.data, &a.calls, "calls.csv")?)?.as_slice())?;
    let sms = ingest::parse_sms_log(art.read_input(&pick(&a.data, &a.sms, "sms.csv")?)?.as_slice())?;
    let span = span_interval(calls.iter().map(|c| c.timestamp).chain(sms.iter().map(|s| s.timestamp)));
    let interval = match (a.start, a.end) {
        (Some(s), Some(e)) => Interval::new(s, e)?,
        (s, e) => {
            let span = span?;
            Interval::new(s.unwrap_or(span.start), e.unwrap_or(span.end))?
        }
    };
    let call = ingest::build_call_graph(&calls, &roster, interval)?;
    let text = ingest::build_sms_graph(&sms, &roster, interval, cfg.data.w1, cfg.data.w2)?;
    let combined = ingest::combine_graphs(&call.graph, &text.graph, cfg.data.mix)?;
    art.add("call_graph.csv", csv_bytes(|b| call.graph.write_edge_list(b))?);
    art.add("sms_graph.csv", csv_bytes(|b| text.graph.write_edge_list(b))?);
    art.add("graph.csv", csv_bytes(|b| combined.write_edge_list(b))?);
    #[derive(Serialize)]
    struct Summary {
        nodes: usize,
        directed_edges: usize,
        dropped_calls: usize,
        dropped_sms: usize,
        interval: Interval,
        mix: f64,
    }
    let directed_edges = combined.adjacency.iter().filter(|w| **w > 0.0).count();
    art.add_json("graph_summary.json", &Summary { nodes: combined.len(), directed_edges, dropped_calls: call.dropped, dropped_sms: text.dropped, interval, mix: cfg.data.mix })
}

fn load_graph(input: &GraphInput, art: &mut Artifacts) -> Result<SocialGraph> {
    match (&input.graph, &input.roster) {
        (Some(g), Some(r)) => {
            let roster = read_roster(&art.read_input(r)?)?;
            SocialGraph::read_edge_list(art.read_input(g)?.as_slice(), &roster)
        }
        (None, None) => {
            art.bundled_input("roster.csv", EXAMPLE_ROSTER.as_bytes());
            art.bundled_input("edges.csv", EXAMPLE_EDGES.as_bytes());
            let roster = read_roster(EXAMPLE_ROSTER.as_bytes())?;
            SocialGraph::read_edge_list(EXAMPLE_EDGES.as_bytes(), &roster)
        }
        _ => Err(Error::Config("--graph and --roster go together".into())),
    }
}

fn cmd_gedd(a: &GeddArgs, art: &mut Artifacts) -> Result<()> {
    art.set_config(format!("w = {}\n", a.w), None);
    let graph = load_graph(&a.input, art)?;
    let graph = if graph.is_symmetric(1e-12) { graph } else { graph.symmetrized() };
    let out = gedd(&graph, a.w)?;
    check_gedd_invariants(&graph, &out, a.w).map_err(|v| Error::Data(format!("GEDD invariants violated: {}", v.join("; "))))?;
    let width = out.batches.len().to_string().len().max(3);
    for (i, b) in out.batches.iter().enumerate() {
        art.add_json(&format!("subgraph_{i:0width$}.json"), &b.to_export(out.cut_weight))?;
    }
    #[derive(Serialize)]
    struct Summary {
        w: usize,
        nodes: usize,
        subgraphs: usize,
        components: usize,
        cut_weight: f64,
        split_events: usize,
        padded_slots: usize,
    }
    let padded_slots = out.batches.iter().map(|b| b.duplicate_mask.iter().filter(|m| **m).count()).sum();
    art.add_json(
        "gedd.json",
        &Summary { w: a.w, nodes: graph.len(), subgraphs: out.batches.len(), components: out.components.len(), cut_weight: out.cut_weight, split_events: out.split_events, padded_slots },
    )
}

fn cmd_centrality(a: &GraphInput, art: &mut Artifacts) -> Result<()> {
    let graph = load_graph(a, art)?;
    let graph = if graph.is_symmetric(1e-12) { graph } else { graph.symmetrized() };
    let table = CentralityTable::compute(&graph)?;
    art.add("centrality.csv", csv_bytes(|b| table.write_csv(b))?);
    Ok(())
}

fn cmd_preprocess(cli: &Cli, a: &PreprocessArgs, art: &mut Artifacts) -> Result<()> {
    let mut cfg = run_config(cli, art)?;
    if let Some(k) = a.k {
        cfg.data.k = k;
    }
    if let Some(z) = a.z {
        cfg.data.z = z;
    }
    finish_config(art, &cfg)?;
    let features = art.read_input(&pick(&a.data, &a.features, "features.csv")?)?;
    let labels = art.read_input(&pick(&a.data, &a.labels, "labels.csv")?)?;
    let panel = FeaturePanel::from_csv(features.as_slice(), labels.as_slice())?;
    let (clean, summary) = preprocess(&panel, cfg.data.k, cfg.data.z)?;
    art.add("features.csv", csv_bytes(|b| clean.write_features_csv(b))?);
    art.add("labels.csv", csv_bytes(|b| clean.write_labels_csv(b))?);
    art.add_json("preprocess.json", &summary)
}

fn apply_model_args(cli: &Cli, cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(t) = m.target {
        cfg.data.target = t;
    }
    if !m.model.is_empty() {
        cfg.model.kinds = m.model.clone();
    }
    if let Some(w) = m.graph_size {
        cfg.model.w = w;
    }
    if let Some(l) = m.seq_len {
        cfg.model.seq_len = l;
    }
    if let Some(t) = m.trials {
        cfg.train.trials = t;
    }
    if let Some(e) = m.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(p) = m.patience {
        cfg.train.patience = p;
    }
    if let Some(lr) = m.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
}

/// Preprocessed panel plus the graph built from the logs over the panel's
/// day range (or read from `--graph`).
fn load_experiment(cfg: &RunConfig, d: &DataArgs, art: &mut Artifacts) -> Result<ExperimentData> {
    let features = art.read_input(&d.data.join("features.csv"))?;
    let labels = art.read_input(&d.data.join("labels.csv"))?;
    let panel = FeaturePanel::from_csv(features.as_slice(), labels.as_slice())?;
    let roster_path = d.data.join("roster.csv");
    let roster = if roster_path.exists() { read_roster(&art.read_input(&roster_path)?)? } else { panel.users.clone() };
    let graph = match &d.graph {
        Some(g) => SocialGraph::read_edge_list(art.read_input(g)?.as_slice(), &roster)?,
        None => {
            let first = panel.days.first().ok_or_else(|| Error::Data("panel has no days".into()))?;
            let start = Utc.from_utc_datetime(&first.and_hms_opt(0, 0, 0).expect("midnight"));
            let end = start + Duration::days(panel.n_days() as i64) - Duration::seconds(1);
            let interval = Interval::new(start, end)?;
            let calls = ingest::parse_call_log(art.read_input(&d.data.join("calls.csv"))?.as_slice())?;
            let sms = ingest::parse_sms_log(art.read_input(&d.data.join("sms.csv"))?.as_slice())?;
            let call = ingest::build_call_graph(&calls, &roster, interval)?.graph;
            let text = ingest::build_sms_graph(&sms, &roster, interval, cfg.data.w1, cfg.data.w2)?.graph;
            ingest::combine_graphs(&call, &text, cfg.data.mix)?
        }
    };
    let (clean, _) = preprocess(&panel, cfg.data.k, cfg.data.z)?;
    ExperimentData::new(&graph, clean)
}

#[derive(Debug, Serialize)]
struct Comparison {
    metric: &'static str,
    anova: Option<stats::Anova>,
    pairwise: Vec<stats::PairTest>,
    note: &'static str,
    skipped: Option<String>,
}

fn compare(report: &ExperimentReport, seed: u64) -> Comparison {
    let scores: Vec<(String, Vec<f64>)> = report.aggregates.iter().map(|a| (a.model.to_string(), report.f1_by_trial(a.model))).collect();
    let mut c = Comparison { metric: "micro_f1", anova: None, pairwise: Vec::new(), note: stats::PERMUTATION_NOTE, skipped: None };
    let groups: Vec<Vec<f64>> = scores.iter().map(|(_, s)| s.clone()).collect();
    match stats::anova_oneway(&groups) {
        Ok(a) => c.anova = Some(a),
        Err(e) => c.skipped = Some(format!("anova: {e}")),
    }
    match stats::pairwise_permutation_test(&scores, stats::MIN_PERMUTATIONS, seed) {
        Ok(p) => c.pairwise = p,
        Err(e) => {
            let prev = c.skipped.take().map(|s| format!("{s}; ")).unwrap_or_default();
            c.skipped = Some(format!("{prev}pairwise: {e}"));
        }
    }
    c
}

fn per_user_csv(report: &ExperimentReport, buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["trial", "model", "user", "topology", "rmse", "n", "mean_true", "sd_true"])?;
    for t in &report.trials {
        for r in &t.results {
            let Some(m) = &r.metrics else { continue };
            for u in &m.per_user {
                w.write_record([
                    t.trial.to_string(),
                    r.model.to_string(),
                    u.user.clone(),
                    u.topology.clone(),
                    u.rmse.to_string(),
                    u.n.to_string(),
                    u.mean_true.to_string(),
                    u.sd_true.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs, art: &mut Artifacts) -> Result<()> {
    let mut cfg = run_config(cli, art)?;
    apply_model_args(cli, &mut cfg, &a.model);
    finish_config(art, &cfg)?;
    let data = load_experiment(&cfg, &a.data, art)?;
    let report = experiment::run_experiment(&cfg, &data)?;
    art.add_json("report.json", &report)?;
    art.add("summary.csv", csv_bytes(|b| experiment::write_summary_csv(&[(report.w, &report.aggregates)], b))?);
    art.add("per_user_rmse.csv", csv_bytes(|b| per_user_csv(&report, b))?);
    art.add_json("comparison.json", &compare(&report, cfg.train.seed))
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs, art: &mut Artifacts) -> Result<()> {
    let mut cfg = run_config(cli, art)?;
    apply_model_args(cli, &mut cfg, &a.model);
    if let Some(v) = a.vary {
        cfg.sweep.vary = v;
    }
    if !a.values.is_empty() {
        cfg.sweep.values = a.values.clone();
    }
    finish_config(art, &cfg)?;
    let data = load_experiment(&cfg, &a.data, art)?;
    let report = experiment::sweep(&cfg, &data)?;
    art.add("sweep.csv", csv_bytes(|b| report.write_csv(b))?);
    art.add_json("sweep.json", &report)
}

#[derive(Debug, Serialize)]
struct Analysis {
    model: ModelKind,
    w: usize,
    outcomes: usize,
    report: stats::OutcomeReport,
    clusters: Option<ClusterSummary>,
}

#[derive(Debug, Serialize)]
struct ClusterSummary {
    users: Vec<String>,
    assignment: stats::ClusterAssignment,
}

fn cmd_analyze(cli: &Cli, a: &AnalyzeArgs, art: &mut Artifacts) -> Result<()> {
    let cfg = run_config(cli, art)?;
    let report: ExperimentReport = serde_json::from_slice(&art.read_input(&a.report)?)?;
    let mut cfg = cfg;
    cfg.model.w = report.w;
    cfg.model.seq_len = report.seq_len;
    cfg.data.target = report.target;
    finish_config(art, &cfg)?;
    let data = load_experiment(&cfg, &a.data, art)?;

    let parts = gedd(&data.graph, report.w)?;
    let mut centrality = BTreeMap::new();
    for (b, batch) in parts.batches.iter().enumerate() {
        let keep: Vec<usize> = (0..batch.size()).filter(|&s| !batch.duplicate_mask[s]).collect();
        let adj = nalgebra::DMatrix::from_fn(keep.len(), keep.len(), |i, j| batch.adjacency[(keep[i], keep[j])]);
        let ids = keep.iter().map(|&s| batch.node_ids[s].clone()).collect();
        let sub = SocialGraph::new(ids, adj, None)?;
        centrality.insert(experiment::topology_id(report.w, b), CentralityTable::compute(&sub)?);
    }
    let outcomes: Vec<_> = report
        .trials
        .iter()
        .flat_map(|t| t.results.iter())
        .filter(|r| r.model == a.model)
        .filter_map(|r| r.metrics.as_ref())
        .flat_map(|m| m.per_user.iter().cloned())
        .collect();

    let traits_path = a.traits.clone().unwrap_or_else(|| a.data.data.join("traits.csv"));
    let clusters = if traits_path.exists() {
        let traits = synth::read_traits(art.read_input(&traits_path)?.as_slice())?;
        let users: Vec<String> = traits.iter().map(|t| t.user_id.clone()).collect();
        let matrix: Vec<Vec<f64>> = traits.iter().map(|t| t.values().to_vec()).collect();
        let assignment = stats::ward_cluster(&matrix, a.clusters)?;
        art.add("clusters.csv", csv_bytes(|b| assignment.write_csv(&users, b))?);
        Some(ClusterSummary { users, assignment })
    } else if a.traits.is_some() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", traits_path.display()))));
    } else {
        None
    };
    let groups: Option<HashMap<String, usize>> =
        clusters.as_ref().map(|c| c.users.iter().cloned().zip(c.assignment.labels.iter().copied()).collect());
    let outcome = stats::centrality_outcome_table(&centrality, &outcomes, groups.as_ref(), a.correlation)?;
    art.add("outcome_table.csv", csv_bytes(|b| outcome.overall.write_csv(b))?);
    art.add_json("analysis.json", &Analysis { model: a.model, w: report.w, outcomes: outcomes.len(), report: outcome, clusters })
}
