//! Command implementations behind the `hcattn` binary: data generation,
//! codebook training, pipeline runs with oracle error reports, ablation
//! sweeps, and budget reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::engine::{
    exact_attention, train_layer_codebooks, CodebookSet, DecodeEngine, EngineConfig, ExecMode,
};
use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::quantizer::{quantization_error, train_codebook, Codebook, QuantizerConfig};
use crate::rng::{mix, SplitMix64};
use crate::tensor_io::{gen_synthetic, read_tensor, write_tensor, SyntheticSpec, TensorDump};

/// Report rendering: human tables or machine-readable `key=value` lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    KeyValue,
}

/// One emitted report: a list of (key, value) pairs that renders either
/// as aligned text or as `key=value` lines.
pub struct Report {
    pub title: String,
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Text => {
                out.push_str(&format!("== {} ==\n", self.title));
                let width = self.entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                for (k, v) in &self.entries {
                    out.push_str(&format!("  {k:<width$}  {v}\n"));
                }
            }
            ReportFormat::KeyValue => {
                for (k, v) in &self.entries {
                    out.push_str(&format!("{k}={v}\n"));
                }
            }
        }
        out
    }
}

/// Session description accepted via `--config`; flags override nothing
/// here, the file is the whole run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Tensor dump paths; omit to generate synthetic data instead.
    pub keys_path: Option<PathBuf>,
    pub values_path: Option<PathBuf>,
    pub queries_path: Option<PathBuf>,
    /// Pre-trained codebook; omit to train on the run's keys.
    pub codebook_path: Option<PathBuf>,

    /// Synthetic fallback when paths are absent.
    pub n: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,

    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub d: usize,
    pub tau: f64,
    pub recent_window: Option<usize>,

    /// Key quantization; absent = value-offload-only mode.
    pub groups: Option<usize>,
    pub centroids: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{path:?}: {e}")))
    }
}

/// Inputs resolved for one engine session: per-(layer, head) tensors are
/// derived from a single dump (replicated) or generated per slot with
/// seeds mixed from (seed, slot).
struct SessionData {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    /// queries[step][layer][query_head]
    queries: Vec<Vec<Vec<Vec<f32>>>>,
}

fn load_or_generate(cfg: &RunConfig) -> Result<SessionData> {
    let slots = cfg.layers * cfg.kv_heads;
    let steps = cfg.steps.unwrap_or(32);
    let seed = cfg.seed.unwrap_or(0);

    let (keys, values) = match (&cfg.keys_path, &cfg.values_path) {
        (Some(kp), Some(vp)) => {
            let k = read_tensor(kp)?.to_matrix()?;
            let v = read_tensor(vp)?.to_matrix()?;
            if k.rows() != v.rows() || k.cols() != cfg.d || v.cols() != cfg.d {
                return Err(Error::ShapeMismatch(format!(
                    "keys {}x{} and values {}x{} must both be n x {}",
                    k.rows(),
                    k.cols(),
                    v.rows(),
                    v.cols(),
                    cfg.d
                )));
            }
            // one dump replicated across every (layer, head) slot
            (vec![k; slots], vec![v; slots])
        }
        (None, None) => {
            let n = cfg.n.ok_or_else(|| {
                Error::InvalidConfig("either tensor paths or n must be given".into())
            })?;
            let mut keys = Vec::with_capacity(slots);
            let mut values = Vec::with_capacity(slots);
            for slot in 0..slots {
                keys.push(
                    gen_synthetic(&SyntheticSpec::gaussian(n, cfg.d, mix(seed, slot as u64)))?
                        .to_matrix()?,
                );
                values.push(
                    gen_synthetic(&SyntheticSpec::gaussian(
                        n,
                        cfg.d,
                        mix(seed, 0x1000 + slot as u64),
                    ))?
                    .to_matrix()?,
                );
            }
            (keys, values)
        }
        _ => {
            return Err(Error::InvalidConfig(
                "keys_path and values_path must be given together".into(),
            ))
        }
    };

    let queries = match &cfg.queries_path {
        Some(qp) => {
            let q = read_tensor(qp)?.to_matrix()?;
            if q.cols() != cfg.d {
                return Err(Error::ShapeMismatch(format!(
                    "queries have width {}, expected {}",
                    q.cols(),
                    cfg.d
                )));
            }
            // rows cycle over steps; every layer/head sees the same row
            (0..steps.min(q.rows()))
                .map(|s| {
                    (0..cfg.layers)
                        .map(|_| vec![q.row(s).to_vec(); cfg.query_heads])
                        .collect()
                })
                .collect()
        }
        None => {
            let mut rng = SplitMix64::new(mix(seed, 0x2000));
            (0..steps)
                .map(|_| {
                    (0..cfg.layers)
                        .map(|_| {
                            (0..cfg.query_heads)
                                .map(|_| {
                                    let mut q = vec![0.0f32; cfg.d];
                                    rng.fill_normal(&mut q);
                                    q
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }
    };

    Ok(SessionData {
        keys,
        values,
        queries,
    })
}

/// `gen`: write keys/values/queries dumps for a synthetic spec.
///
/// Keys follow the requested kind; values and queries are always
/// Gaussian, with stream seeds mixed from the key seed.
#[allow(clippy::too_many_arguments)]
pub fn cmd_gen(
    kind: &str,
    n: usize,
    d: usize,
    clusters: usize,
    groups: Option<usize>,
    noise: f64,
    queries: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Report> {
    let groups = groups.unwrap_or_else(|| (d / 2).max(1));
    let key_spec = match kind {
        "gaussian" => SyntheticSpec::gaussian(n, d, seed),
        "planted" => SyntheticSpec::planted(n, d, groups, clusters, noise, seed),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown kind {other:?}; expected gaussian or planted"
            )))
        }
    };
    std::fs::create_dir_all(out_dir)?;
    let keys = gen_synthetic(&key_spec)?;
    let values = gen_synthetic(&SyntheticSpec::gaussian(n, d, mix(seed, 0xA)))?;
    let query_dump = gen_synthetic(&SyntheticSpec::gaussian(queries, d, mix(seed, 0xB)))?;

    let keys_path = out_dir.join("keys.hcat");
    let values_path = out_dir.join("values.hcat");
    let queries_path = out_dir.join("queries.hcat");
    write_tensor(&keys_path, &keys)?;
    write_tensor(&values_path, &values)?;
    write_tensor(&queries_path, &query_dump)?;

    let mut report = Report::new("generated tensors");
    report.push("kind", kind);
    report.push("n", n);
    report.push("d", d);
    report.push("seed", seed);
    report.push("keys", keys_path.display());
    report.push("values", values_path.display());
    report.push("queries", queries_path.display());
    Ok(report)
}

/// `train`: fit a codebook on a key dump and save it.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    keys_path: &Path,
    out_path: &Path,
    g: usize,
    c: usize,
    shared: bool,
    batch_size: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<Report> {
    let keys = read_tensor(keys_path)?.to_matrix()?;
    let mut qcfg = QuantizerConfig::new(keys.cols(), g, c);
    qcfg.shared_codebook = shared;
    qcfg.kmeans_batch_size = batch_size;
    qcfg.kmeans_max_iters = max_iters;
    qcfg.kmeans_restarts = restarts;
    qcfg.seed = seed;
    let cb = train_codebook(&keys, &qcfg)?;
    cb.save(out_path)?;

    let mut report = Report::new("trained codebook");
    report.push("keys", keys_path.display());
    report.push("d", qcfg.d);
    report.push("g", qcfg.g);
    report.push("c", qcfg.c);
    report.push("shared_codebook", qcfg.shared_codebook);
    report.push("kmeans_batch_size", qcfg.kmeans_batch_size);
    report.push("kmeans_max_iters", qcfg.kmeans_max_iters);
    report.push("kmeans_restarts", qcfg.kmeans_restarts);
    report.push("seed", qcfg.seed);
    report.push("inertia", format!("{:.6e}", cb.inertia()));
    report.push("codebook", out_path.display());
    Ok(report)
}

/// Error metrics of a finished run.
struct RunOutcome {
    max_rel_error: f64,
    mean_rel_error: f64,
    per_layer_ratio: Vec<f64>,
    ledger_bytes_weights: u64,
    ledger_bytes_indices: u64,
    ledger_messages: u64,
    resolved_quantizer: Option<(usize, usize)>,
}

fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    num / den.max(1e-30)
}

fn execute_session(cfg: &RunConfig, data: &SessionData) -> Result<RunOutcome> {
    let mut engine_cfg = EngineConfig::new(cfg.layers, cfg.query_heads, cfg.kv_heads, cfg.d)
        .with_tau(cfg.tau)
        .with_recent_window(cfg.recent_window.unwrap_or(0));

    let codebooks = match (cfg.groups, cfg.centroids, &cfg.codebook_path) {
        (Some(g), Some(c), path) => {
            let mut qcfg = QuantizerConfig::new(cfg.d, g, c);
            qcfg.seed = cfg.seed.unwrap_or(0);
            engine_cfg = engine_cfg.with_quantizer(qcfg);
            match path {
                Some(path) => {
                    let cb = Codebook::load(path)?;
                    Some(CodebookSet::PerLayer(vec![cb; cfg.layers]))
                }
                None => Some(train_layer_codebooks(
                    &data.keys,
                    cfg.layers,
                    cfg.kv_heads,
                    &qcfg,
                )?),
            }
        }
        // a codebook file alone supplies g and c
        (None, None, Some(path)) => {
            let cb = Codebook::load(path)?;
            engine_cfg = engine_cfg.with_quantizer(*cb.config());
            Some(CodebookSet::PerLayer(vec![cb; cfg.layers]))
        }
        (None, None, None) => None,
        _ => {
            return Err(Error::InvalidConfig(
                "groups and centroids must be given together".into(),
            ))
        }
    };

    let mut engine = DecodeEngine::prefill(&data.keys, &data.values, engine_cfg, codebooks)?;

    let mut max_err = 0.0f64;
    let mut err_sum = 0.0f64;
    let mut err_count = 0u64;
    for step_queries in &data.queries {
        let outputs = engine.decode_pass(step_queries, ExecMode::Overlapped)?;
        for layer in 0..cfg.layers {
            for head in 0..cfg.query_heads {
                let kv = engine.config().kv_head_for(head);
                let slot = layer * cfg.kv_heads + kv;
                let oracle = exact_attention(
                    &step_queries[layer][head],
                    &data.keys[slot],
                    &data.values[slot],
                )?;
                let err = rel_l2(&outputs[layer][head], &oracle);
                max_err = max_err.max(err);
                err_sum += err;
                err_count += 1;
            }
        }
    }

    let per_layer_ratio = (0..cfg.layers)
        .map(|l| engine.mean_selection_ratio(l).unwrap_or(0.0))
        .collect();
    let resolved = engine
        .config()
        .quantize_keys
        .then(|| (engine.config().quantizer.g, engine.config().quantizer.c));
    let ledger = engine.store().ledger();
    Ok(RunOutcome {
        max_rel_error: max_err,
        mean_rel_error: err_sum / err_count.max(1) as f64,
        per_layer_ratio,
        ledger_bytes_weights: ledger.bytes_weights,
        ledger_bytes_indices: ledger.bytes_indices,
        ledger_messages: ledger.messages,
        resolved_quantizer: resolved,
    })
}

/// `run`: execute a session and report output error against the dense
/// oracle plus per-layer selection ratios and ledger totals.
pub fn cmd_run(cfg: &RunConfig) -> Result<Report> {
    let data = load_or_generate(cfg)?;
    let outcome = execute_session(cfg, &data)?;

    let mut report = Report::new("pipeline run");
    report.push("layers", cfg.layers);
    report.push("query_heads", cfg.query_heads);
    report.push("kv_heads", cfg.kv_heads);
    report.push("d", cfg.d);
    report.push("tau", cfg.tau);
    report.push("recent_window", cfg.recent_window.unwrap_or(0));
    report.push("seed", cfg.seed.unwrap_or(0));
    if let Some(n) = cfg.n {
        report.push("n", n);
    }
    report.push("quantize_keys", outcome.resolved_quantizer.is_some());
    if let Some((g, c)) = outcome.resolved_quantizer {
        report.push("g", g);
        report.push("c", c);
    }
    report.push("steps", data.queries.len());
    report.push("max_rel_error", format!("{:.6e}", outcome.max_rel_error));
    report.push("mean_rel_error", format!("{:.6e}", outcome.mean_rel_error));
    for (layer, ratio) in outcome.per_layer_ratio.iter().enumerate() {
        report.push(format!("selection_ratio_layer_{layer}"), format!("{ratio:.6}"));
    }
    report.push("ledger_bytes_weights", outcome.ledger_bytes_weights);
    report.push("ledger_bytes_indices", outcome.ledger_bytes_indices);
    report.push("ledger_messages", outcome.ledger_messages);
    Ok(report)
}

/// One row of a sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub tau: f64,
    pub g: usize,
    pub c: usize,
    pub quant_error: f64,
    pub mean_rel_error: f64,
    pub mean_selection_ratio: f64,
    pub key_budget: f64,
    pub total_budget: f64,
}

/// `sweep`: evaluate every (g, c) cell once (training one codebook per
/// cell on shared data) and run every tau against it.
pub fn cmd_sweep(
    base: &RunConfig,
    taus: &[f64],
    gs: &[usize],
    cs: &[usize],
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() || gs.is_empty() || cs.is_empty() {
        return Err(Error::InvalidConfig("sweep axes must be non-empty".into()));
    }
    let data = load_or_generate(base)?;
    let mut rows = Vec::new();
    for &g in gs {
        for &c in cs {
            let mut qcfg = QuantizerConfig::new(base.d, g, c);
            qcfg.seed = base.seed.unwrap_or(0);
            let codebooks =
                train_layer_codebooks(&data.keys, base.layers, base.kv_heads, &qcfg)?;
            // quantization error measured on the first slot's keys
            let cb0 = codebooks.get(0, 0, base.kv_heads);
            let qerr = quantization_error(&data.keys[0], cb0)?;
            let budget = accounting::memory_budget(base.d, Some(g), true)?;

            for &tau in taus {
                let mut cfg = base.clone();
                cfg.tau = tau;
                cfg.groups = Some(g);
                cfg.centroids = Some(c);

                let mut engine_cfg =
                    EngineConfig::new(cfg.layers, cfg.query_heads, cfg.kv_heads, cfg.d)
                        .with_tau(tau)
                        .with_quantizer(qcfg);
                engine_cfg.quantizer.seed = qcfg.seed;
                let mut engine = DecodeEngine::prefill(
                    &data.keys,
                    &data.values,
                    engine_cfg,
                    Some(codebooks.clone()),
                )?;

                let mut err_sum = 0.0;
                let mut count = 0u64;
                for step_queries in &data.queries {
                    let outputs = engine.decode_pass(step_queries, ExecMode::Sequential)?;
                    for layer in 0..cfg.layers {
                        for head in 0..cfg.query_heads {
                            let kv = engine.config().kv_head_for(head);
                            let slot = layer * cfg.kv_heads + kv;
                            let oracle = exact_attention(
                                &step_queries[layer][head],
                                &data.keys[slot],
                                &data.values[slot],
                            )?;
                            err_sum += rel_l2(&outputs[layer][head], &oracle);
                            count += 1;
                        }
                    }
                }
                let ratio_sum: f64 = (0..cfg.layers)
                    .map(|l| engine.mean_selection_ratio(l).unwrap_or(0.0))
                    .sum();
                rows.push(SweepRow {
                    tau,
                    g,
                    c,
                    quant_error: qerr,
                    mean_rel_error: err_sum / count.max(1) as f64,
                    mean_selection_ratio: ratio_sum / cfg.layers as f64,
                    key_budget: budget.key_budget_fraction,
                    total_budget: budget.total_fraction,
                });
            }
        }
    }
    Ok(rows)
}

pub fn render_sweep(rows: &[SweepRow], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            out.push_str(
                "tau      g      c    quant_err     out_err   sel_ratio  key_budget  total\n",
            );
            for r in rows {
                out.push_str(&format!(
                    "{:<6} {:>4} {:>6}  {:>10.4e}  {:>10.4e}  {:>9.4}  {:>9.2}%  {:>5.2}%\n",
                    r.tau,
                    r.g,
                    r.c,
                    r.quant_error,
                    r.mean_rel_error,
                    r.mean_selection_ratio,
                    r.key_budget * 100.0,
                    r.total_budget * 100.0
                ));
            }
        }
        ReportFormat::KeyValue => {
            for (i, r) in rows.iter().enumerate() {
                out.push_str(&format!(
                    "row_{i}.tau={}\nrow_{i}.g={}\nrow_{i}.c={}\nrow_{i}.quant_error={:.6e}\nrow_{i}.mean_rel_error={:.6e}\nrow_{i}.mean_selection_ratio={:.6}\nrow_{i}.key_budget={}\nrow_{i}.total_budget={}\n",
                    r.tau, r.g, r.c, r.quant_error, r.mean_rel_error, r.mean_selection_ratio,
                    r.key_budget, r.total_budget
                ));
            }
        }
    }
    out
}

/// `report`: memory budget for a strategy.
pub fn cmd_report_budget(d: usize, g: Option<usize>, offload: bool) -> Result<Report> {
    let budget = accounting::memory_budget(d, g, offload)?;
    let mut report = Report::new("memory budget");
    report.push("d", d);
    match g {
        Some(g) => report.push("g", g),
        None => report.push("g", "none"),
    }
    report.push("value_offloaded", offload);
    report.push(
        "key_budget_percent",
        format!("{}", budget.key_budget_fraction * 100.0),
    );
    report.push(
        "value_budget_percent",
        format!("{}", budget.value_budget_fraction * 100.0),
    );
    report.push(
        "total_percent",
        format!("{}", budget.total_fraction * 100.0),
    );
    report.push(
        "assumed_element_bytes",
        budget.assumptions.element_bytes,
    );
    report.push("assumed_index_bytes", budget.assumptions.index_bytes);
    Ok(report)
}

/// `report --comm`: communication overhead of one decode pass.
pub fn cmd_report_comm(
    n: usize,
    layers: usize,
    heads: usize,
    frac: f64,
    bytes_per_score: usize,
) -> Result<Report> {
    let bytes = accounting::comm_overhead(n, layers, heads, frac, bytes_per_score)?;
    let mut report = Report::new("communication overhead");
    report.push("n", n);
    report.push("layers", layers);
    report.push("heads", heads);
    report.push("retain_fraction", frac);
    report.push("bytes_per_score", bytes_per_score);
    report.push("bytes", format!("{bytes}"));
    report.push("megabytes", format!("{}", accounting::bytes_to_mb(bytes)));
    Ok(report)
}

/// Round-trip helper the binary uses to dump score vectors when asked.
pub fn dump_scores(path: &Path, scores: &[f32]) -> Result<()> {
    let dump = TensorDump::f32(vec![scores.len()], scores.to_vec())?;
    write_tensor(path, &dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn gen_then_train_round_trip() {
        let dir = tempdir().unwrap();
        let report = cmd_gen(
            "planted",
            64,
            8,
            2,
            Some(4),
            0.0,
            16,
            1,
            dir.path(),
        )
        .unwrap();
        assert!(report.render(ReportFormat::KeyValue).contains("keys="));

        let cb_path = dir.path().join("cb.hccb");
        let report = cmd_train(
            &dir.path().join("keys.hcat"),
            &cb_path,
            4,
            2,
            false,
            10_000,
            200,
            3,
            7,
        )
        .unwrap();
        let rendered = report.render(ReportFormat::KeyValue);
        assert!(rendered.contains("inertia=0.000000e0"), "{rendered}");
        assert!(cb_path.exists());
    }

    #[test]
    fn gen_is_deterministic_across_invocations() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        cmd_gen("gaussian", 32, 8, 2, None, 0.0, 8, 9, dir_a.path()).unwrap();
        cmd_gen("gaussian", 32, 8, 2, None, 0.0, 8, 9, dir_b.path()).unwrap();
        for name in ["keys.hcat", "values.hcat", "queries.hcat"] {
            assert_eq!(
                std::fs::read(dir_a.path().join(name)).unwrap(),
                std::fs::read(dir_b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn gen_rejects_unknown_kind() {
        let dir = tempdir().unwrap();
        assert!(matches!(
            cmd_gen("weird", 8, 4, 2, None, 0.0, 4, 1, dir.path()),
            Err(Error::InvalidConfig(_))
        ));
    }

    fn small_run_config() -> RunConfig {
        RunConfig {
            keys_path: None,
            values_path: None,
            queries_path: None,
            codebook_path: None,
            n: Some(64),
            steps: Some(4),
            seed: Some(5),
            layers: 2,
            query_heads: 2,
            kv_heads: 1,
            d: 8,
            tau: 1.0,
            recent_window: None,
            groups: None,
            centroids: None,
        }
    }

    #[test]
    fn vo_only_run_is_near_exact() {
        let report = cmd_run(&small_run_config()).unwrap();
        let rendered = report.render(ReportFormat::KeyValue);
        let max_err: f64 = rendered
            .lines()
            .find_map(|l| l.strip_prefix("max_rel_error="))
            .unwrap()
            .parse()
            .unwrap();
        assert!(max_err <= 1e-6, "{max_err}");
        assert!(rendered.contains("selection_ratio_layer_0="));
        assert!(rendered.contains("selection_ratio_layer_1="));
    }

    #[test]
    fn sweep_selection_ratio_monotone_in_tau() {
        let mut cfg = small_run_config();
        cfg.tau = 0.9;
        let rows = cmd_sweep(&cfg, &[0.3, 0.5, 0.7, 0.9, 1.0], &[4], &[8]).unwrap();
        assert_eq!(rows.len(), 5);
        for pair in rows.windows(2) {
            assert!(
                pair[1].mean_selection_ratio >= pair[0].mean_selection_ratio - 1e-12,
                "ratio not monotone: {pair:?}"
            );
        }
    }

    #[test]
    fn sweep_quant_error_non_increasing_in_c() {
        let rows = cmd_sweep(&small_run_config(), &[1.0], &[4], &[4, 16, 32]).unwrap();
        assert_eq!(rows.len(), 3);
        for pair in rows.windows(2) {
            assert!(
                pair[1].quant_error <= pair[0].quant_error,
                "quant error not monotone: {pair:?}"
            );
        }
        // budget columns come straight from the formula
        assert_eq!(rows[0].key_budget, 0.5); // g=4 at d=8
        assert_eq!(rows[0].total_budget, 0.25);
    }

    #[test]
    fn score_dump_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.hcat");
        dump_scores(&path, &[0.25, -1.5, 3.0]).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), &[3]);
        assert_eq!(back.to_f32_vec(), vec![0.25, -1.5, 3.0]);
    }

    #[test]
    fn run_config_toml_round_trip() {
        let cfg = small_run_config();
        let text = toml::to_string(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, &text).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back.layers, cfg.layers);
        assert_eq!(back.tau, cfg.tau);
        assert_eq!(back.n, cfg.n);
    }

    #[test]
    fn budget_report_matches_table_rows() {
        let r = cmd_report_budget(128, Some(64), true).unwrap();
        let rendered = r.render(ReportFormat::KeyValue);
        assert!(rendered.contains("total_percent=25"), "{rendered}");
        let r = cmd_report_budget(128, None, true).unwrap();
        assert!(r.render(ReportFormat::KeyValue).contains("total_percent=50"));
    }

    #[test]
    fn comm_report_headline() {
        let r = cmd_report_comm(1_000_000, 32, 8, 0.2, 2).unwrap();
        let rendered = r.render(ReportFormat::KeyValue);
        assert!(rendered.contains("bytes=102400000"), "{rendered}");
        assert!(rendered.contains("megabytes=102.4"), "{rendered}");
    }
}
