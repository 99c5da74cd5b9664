use std::collections::BTreeMap;

use nalgebra::DMatrix;
use socialgcn_core::centrality::CentralityTable;
use socialgcn_core::experiment::{run_experiment, topology_id, ExperimentData, RunConfig};
use socialgcn_core::features::preprocess;
use socialgcn_core::graphcore::{check_gedd_invariants, gedd};
use socialgcn_core::ingest::{
    build_call_graph, build_sms_graph, combine_graphs, parse_call_log, parse_sms_log, write_call_log, write_sms_log, DEFAULT_W1,
    DEFAULT_W2,
};
use socialgcn_core::stats::{centrality_outcome_table, Correlation};
use socialgcn_core::synth::{generate, SynthConfig};
use socialgcn_core::{ModelKind, SocialGraph};

fn small_cohort(seed: u64) -> socialgcn_core::synth::SynthDataset {
    generate(&SynthConfig { n_users: 16, n_days: 40, mean_degree: 2.0, seed, ..SynthConfig::default() }).unwrap()
}

fn graph_from_logs(d: &socialgcn_core::synth::SynthDataset) -> SocialGraph {
    let mut calls = Vec::new();
    write_call_log(&d.calls, &mut calls).unwrap();
    let mut sms = Vec::new();
    write_sms_log(&d.sms, &mut sms).unwrap();
    let calls = parse_call_log(calls.as_slice()).unwrap();
    let sms = parse_sms_log(sms.as_slice()).unwrap();
    assert_eq!(calls, d.calls);
    assert_eq!(sms, d.sms);
    let users = &d.panel.users;
    let call = build_call_graph(&calls, users, d.interval()).unwrap();
    let text = build_sms_graph(&sms, users, d.interval(), DEFAULT_W1, DEFAULT_W2).unwrap();
    assert_eq!(call.dropped + text.dropped, 0);
    combine_graphs(&call.graph, &text.graph, 0.5).unwrap()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.w = 4;
    cfg.model.seq_len = 3;
    cfg.model.gcn_layers = vec![4];
    cfg.model.lstm_hidden = 4;
    cfg.model.conv_channels = 2;
    cfg.model.dense_widths = vec![4];
    cfg.train.trials = 2;
    cfg.train.max_epochs = 3;
    cfg.train.patience = 2;
    cfg
}

#[test]
fn logs_recover_the_generating_graph() {
    let d = small_cohort(3);
    let g = graph_from_logs(&d);
    let sym = g.symmetrized();
    let n = g.len();
    for i in 0..n {
        for j in 0..n {
            assert_eq!(sym.adjacency[(i, j)] > 0.0, d.graph.adjacency[(i, j)] > 0.0, "pair ({i}, {j})");
        }
    }
}

#[test]
fn partitions_of_a_log_graph_hold_invariants() {
    let d = small_cohort(4);
    let g = graph_from_logs(&d).symmetrized();
    for w in [1, 3, 5, 16] {
        let out = gedd(&g, w).unwrap();
        check_gedd_invariants(&g, &out, w).unwrap();
    }
}

#[test]
fn training_through_outcome_table() {
    let d = small_cohort(5);
    let graph = graph_from_logs(&d);
    let (panel, summary) = preprocess(&d.panel, 5, 3.0).unwrap();
    assert!(summary.outlier_rows < summary.rows);
    let data = ExperimentData::new(&graph, panel).unwrap();
    let cfg = tiny_config();

    let report = run_experiment(&cfg, &data).unwrap();
    assert_eq!(report.trials.len(), 2);
    for kind in ModelKind::ALL {
        let agg = report.aggregate_for(kind).unwrap();
        assert_eq!(agg.trials_ok, 2);
        assert!((0.0..=1.0).contains(&agg.f1_mean) && agg.rmse_mean.is_finite());
    }
    assert_eq!(report, run_experiment(&cfg, &data).unwrap());

    let parts = gedd(&data.graph, cfg.model.w).unwrap();
    let mut tables = BTreeMap::new();
    for (b, batch) in parts.batches.iter().enumerate() {
        let keep: Vec<usize> = (0..batch.size()).filter(|&s| !batch.duplicate_mask[s]).collect();
        let adj = DMatrix::from_fn(keep.len(), keep.len(), |i, j| batch.adjacency[(keep[i], keep[j])]);
        let ids = keep.iter().map(|&s| batch.node_ids[s].clone()).collect();
        tables.insert(topology_id(cfg.model.w, b), CentralityTable::compute(&SocialGraph::new(ids, adj, None).unwrap()).unwrap());
    }
    let outcomes: Vec<_> = report
        .trials
        .iter()
        .flat_map(|t| &t.results)
        .filter(|r| r.model == ModelKind::GcnLstm)
        .flat_map(|r| r.metrics.as_ref().unwrap().per_user.clone())
        .collect();
    assert!(!outcomes.is_empty());
    let table = centrality_outcome_table(&tables, &outcomes, None, Correlation::Exchangeable).unwrap();
    assert_eq!(table.unmatched, 0);
    assert_eq!(table.overall.n_observations, outcomes.len());
    assert_eq!(table.overall.rows.len(), 5);
}
