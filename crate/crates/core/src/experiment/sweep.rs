//! The (method x scenario x seed) grid.

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::ExperimentError;
use crate::baselines::{adapt_and_predict, Method, MethodKind};
use crate::adapt::AdaptTraces;
use crate::diffnet::ParamNet;
use crate::eval::{accuracy, ErrorGrid, GroupAccuracy, RunRecord};
use crate::scenarios::{compose_batches, LabeledBatch, ScenarioSpec, SourceSpec};
use crate::sampler::write_trace_csv;
use crate::seeds::{hash_str, mix_seed};

/// Run identifiers carry no timestamp, so reruns overwrite rather than pile up.
pub fn run_id(scenario: &str, method: MethodKind, seed: u64) -> String {
    format!("{scenario}__{}__s{seed}", method.name())
}

/// The scenario spec with its stream seed resolved for run seed `seed`.
pub fn resolve_scenario(spec: &ScenarioSpec, seed: u64) -> ScenarioSpec {
    let stream = mix_seed(spec.seed ^ hash_str(&spec.name), seed);
    spec.clone().with_seed(stream)
}

/// Hex SHA-256 prefix identifying the exact test stream a run consumed.
pub fn scenario_fingerprint(source: &SourceSpec, resolved: &ScenarioSpec) -> String {
    let payload = serde_json::to_vec(&(source, resolved)).expect("specs serialise");
    let digest = Sha256::digest(&payload);
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, Serialize)]
struct BatchTrace<'a> {
    batch: usize,
    adapt: Option<&'a AdaptTraces>,
    entropy: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub record: RunRecord,
    /// Predicted labels for every row of every batch, in stream order.
    pub labels: Vec<usize>,
}

/// Runs one method over one scenario stream. Batches are adapted
/// independently from the source net unless `cfg.online` is set, in which case
/// each batch starts from the previous batch's adapted net.
pub fn run_cell(
    cfg: &ExperimentConfig,
    source_net: &ParamNet,
    clean_test: &LabeledBatch,
    scenario: &ScenarioSpec,
    method_kind: MethodKind,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<CellResult, ExperimentError> {
    let started = Instant::now();
    let id = run_id(&scenario.name, method_kind, seed);
    let resolved = resolve_scenario(scenario, seed);
    let batches = compose_batches(&resolved, clean_test)?;
    let method = Method::from_kind(method_kind, &cfg.method_settings);

    let mut net = source_net.clone();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    let mut tags = Vec::new();
    let mut outputs = Vec::with_capacity(batches.len());
    for (b, batch) in batches.iter().enumerate() {
        let adapt_seed = mix_seed(resolved.seed, 0xADA0 + b as u64);
        let out = adapt_and_predict(&method, &net, &batch.x, adapt_seed).map_err(|source| ExperimentError::Method {
            run_id: id.clone(),
            batch: b,
            source,
        })?;
        labels.extend_from_slice(&out.labels);
        truth.extend_from_slice(&batch.y_hidden);
        tags.extend_from_slice(&batch.tags);
        if cfg.online {
            if let Some(adapted) = &out.adapted_net {
                net = adapted.clone();
            }
        }
        outputs.push(out);
    }
    let acc = accuracy(&labels, &truth, &tags)?;
    let error_grid = grid_for(&resolved, &acc)?;

    let data_energy = mean_pair(outputs.iter().filter_map(|o| {
        let t = &o.adapt_traces.as_ref()?.data_energy;
        Some((*t.first()?, *t.last()?))
    }));
    let cd_loss = mean_pair(outputs.iter().filter_map(|o| {
        let t = &o.adapt_traces.as_ref()?.inference.cd_loss;
        Some((*t.first()?, *t.last()?))
    }));

    let mut trace_files = Vec::new();
    if let Some(dir) = out_dir {
        let has_traces = outputs.iter().any(|o| o.adapt_traces.is_some() || o.entropy_trace.is_some());
        if has_traces {
            let traces: Vec<BatchTrace> = outputs
                .iter()
                .enumerate()
                .map(|(b, o)| BatchTrace {
                    batch: b,
                    adapt: o.adapt_traces.as_ref(),
                    entropy: o.entropy_trace.as_deref(),
                })
                .collect();
            let rel = format!("traces/{id}.json");
            let path = dir.join(&rel);
            fs::create_dir_all(path.parent().expect("has parent"))?;
            let body = serde_json::json!({ "run_id": id, "batches": traces });
            fs::write(&path, serde_json::to_string_pretty(&body).expect("traces serialise"))?;
            trace_files.push(rel);
        }
        if cfg.trace {
            for (b, o) in outputs.iter().enumerate() {
                for (u, chain) in o.chains.iter().enumerate() {
                    let rel = format!("traces/{id}/b{b}_u{u}.csv");
                    let path = dir.join(&rel);
                    fs::create_dir_all(path.parent().expect("has parent"))?;
                    write_trace_csv(chain, BufWriter::new(fs::File::create(&path)?))?;
                    trace_files.push(rel);
                }
            }
        }
    }

    let record = RunRecord {
        run_id: id,
        method: method_kind,
        scenario: scenario.name.clone(),
        scenario_fingerprint: scenario_fingerprint(&cfg.source, &resolved),
        regime: resolved.regime,
        dist_a: resolved.dist_a.label(),
        dist_b: resolved.dist_b.map(|s| s.label()),
        ratio: resolved.ratio,
        seed,
        num_batches: resolved.num_batches,
        accuracy: acc,
        error_grid,
        data_energy,
        cd_loss,
        trace_files,
        wall_time_s: started.elapsed().as_secs_f64(),
        config: effective_config(cfg, &resolved, &method, seed),
    };
    Ok(CellResult { record, labels })
}

fn mean_pair(it: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in it {
        a += x;
        b += y;
        n += 1;
    }
    (n > 0).then(|| (a / n as f64, b / n as f64))
}

/// Pure streams fill one cell. Mixtures fill one cell per group, or a single
/// cell when both groups share the same shift and severity.
fn grid_for(spec: &ScenarioSpec, acc: &GroupAccuracy) -> Result<ErrorGrid, ExperimentError> {
    let mut g = ErrorGrid::new();
    let err = |a: f64| (1.0 - a / 100.0).clamp(0.0, 1.0);
    match (&spec.dist_b, acc.a, acc.b) {
        (Some(b), Some(aa), Some(ab)) if *b != spec.dist_a => {
            g.insert(spec.dist_a.kind.name(), spec.dist_a.severity, err(aa))?;
            g.insert(b.kind.name(), b.severity, err(ab))?;
        }
        _ => {
            g.insert(spec.dist_a.kind.name(), spec.dist_a.severity, err(acc.all))?;
        }
    }
    Ok(g)
}

fn effective_config(cfg: &ExperimentConfig, scenario: &ScenarioSpec, method: &Method, seed: u64) -> serde_json::Value {
    let settings = match method {
        Method::Source | Method::BnStats => serde_json::Value::Null,
        Method::TentEntropy(c) => serde_json::to_value(c).expect("serialises"),
        Method::ModelOnly(c) => serde_json::to_value(c).expect("serialises"),
        Method::MitaWoM(c) => serde_json::to_value(c).expect("serialises"),
        Method::Mita(c) | Method::MitaSame(c) => serde_json::to_value(c).expect("serialises"),
    };
    serde_json::json!({
        "source": cfg.source,
        "net": cfg.net,
        "training": cfg.training,
        "scenario": scenario,
        "method": method.kind(),
        "method_settings": settings,
        "seed": seed,
        "online": cfg.online,
    })
}

/// Every cell of the grid in deterministic order: scenarios as configured,
/// then methods, then seeds. Cells run in parallel; output order is fixed.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    source_net: &ParamNet,
    clean_test: &LabeledBatch,
    out_dir: Option<&Path>,
) -> Result<Vec<RunRecord>, ExperimentError> {
    cfg.validate_for_run()?;
    let cells: Vec<(&ScenarioSpec, MethodKind, u64)> = cfg
        .scenarios
        .iter()
        .flat_map(|s| cfg.methods.iter().flat_map(move |m| cfg.seeds.iter().map(move |seed| (s, *m, *seed))))
        .collect();
    let results: Vec<Result<RunRecord, ExperimentError>> = cells
        .par_iter()
        .map(|(s, m, seed)| {
            let rec = run_cell(cfg, source_net, clean_test, s, *m, *seed, out_dir)?.record;
            if let Some(dir) = out_dir {
                write_record(dir, &rec)?;
            }
            Ok(rec)
        })
        .collect();
    results.into_iter().collect()
}

/// Writes `records/<run_id>.jsonl`, replacing any earlier run with that id.
pub fn write_record(out_dir: &Path, rec: &RunRecord) -> Result<(), ExperimentError> {
    let path = out_dir.join("records").join(format!("{}.jsonl", rec.run_id));
    if path.exists() {
        fs::remove_file(&path)?;
    }
    crate::eval::persist(&path, std::slice::from_ref(rec))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{init_net, NetSpec};
    use crate::scenarios::{gen_source, ShiftKind, ShiftSpec};

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.source.n_train_per_class = 10;
        cfg.source.n_test_per_class = 10;
        cfg.net = NetSpec::new(2, vec![6], 4).with_norm(true);
        cfg.method_settings.mita.inference.chain.steps = 3;
        cfg.method_settings.mita.generator.chain.steps = 3;
        cfg.method_settings.mita.generator.steps = 3;
        cfg.method_settings.tent.steps = 2;
        cfg.scenarios = vec![ScenarioSpec::mixture(
            "mix",
            ShiftSpec::new(ShiftKind::Rotate, 3),
            ShiftSpec::new(ShiftKind::GaussianNoise, 2),
            0.25,
            8,
            2,
        )];
        cfg
    }

    #[test]
    fn run_ids_and_fingerprints_are_stable() {
        assert_eq!(run_id("s1", MethodKind::MitaSame, 4), "s1__mita_same__s4");
        let cfg = small_cfg();
        let r1 = resolve_scenario(&cfg.scenarios[0], 1);
        let r2 = resolve_scenario(&cfg.scenarios[0], 2);
        assert_ne!(r1.seed, r2.seed);
        let f1 = scenario_fingerprint(&cfg.source, &r1);
        assert_eq!(f1.len(), 16);
        assert_eq!(f1, scenario_fingerprint(&cfg.source, &r1));
        assert_ne!(f1, scenario_fingerprint(&cfg.source, &r2));
    }

    #[test]
    fn every_method_runs_and_records_are_deterministic() {
        let cfg = small_cfg();
        let (_, test) = gen_source(&cfg.source).unwrap();
        let net = init_net(&cfg.net, 3).unwrap();
        let a = run_sweep(&cfg, &net, &test, None).unwrap();
        let b = run_sweep(&cfg, &net, &test, None).unwrap();
        assert_eq!(a.len(), MethodKind::ALL.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.without_timing(), y.without_timing());
            assert_eq!(x.accuracy.n_a + x.accuracy.n_b, 16);
            assert_eq!(x.accuracy.n_a, 4);
        }
        let mita = a.iter().find(|r| r.method == MethodKind::Mita).unwrap();
        assert!(mita.data_energy.is_some() && mita.cd_loss.is_some());
        let src = a.iter().find(|r| r.method == MethodKind::Source).unwrap();
        assert!(src.data_energy.is_none());
        assert_eq!(src.error_grid.cells().count(), 2);
    }

    #[test]
    fn files_are_written() {
        let mut cfg = small_cfg();
        cfg.methods = vec![MethodKind::Source, MethodKind::ModelOnly];
        cfg.trace = true;
        let (_, test) = gen_source(&cfg.source).unwrap();
        let net = init_net(&cfg.net, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let recs = run_sweep(&cfg, &net, &test, Some(dir.path())).unwrap();
        let loaded = crate::eval::load_dir(&dir.path().join("records")).unwrap();
        assert_eq!(loaded.len(), 2);
        let mo = recs.iter().find(|r| r.method == MethodKind::ModelOnly).unwrap();
        // one JSON plus one CSV per model update per batch
        assert_eq!(mo.trace_files.len(), 1 + 2 * 3);
        for f in &mo.trace_files {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        run_sweep(&cfg, &net, &test, Some(dir.path())).unwrap();
        assert_eq!(crate::eval::load_dir(&dir.path().join("records")).unwrap().len(), 2);
    }
}
