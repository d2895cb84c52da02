//! Scenario configuration, seeded Monte Carlo trials, sweeps and result files.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codebook::{assign_codewords, binomial, generate_codebook};
use crate::dictlearn::{atom_budget, DeadAtomPolicy, DictInit, DlConfig};
use crate::error::{Result, UraError};
use crate::fec::{make_ldpc, LdpcCode};
use crate::metrics::{aggregate, evaluate, DetectedEntry, Summary, TrialMetrics, TruthEntry};
use crate::phy::{channel_apply, db_to_linear, eb_n0, Scene};
use crate::receiver::{receive, ReceiveContext, ReceiverConfig, TrialResult};
use crate::seed::{stream, streams};

/// Per-column nonzero budget used by the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomBudget {
    /// `max(1, ceil(Ka S / L))`.
    Optimized,
    /// One atom per active user.
    UpperBound,
    Explicit(usize),
}

/// Decomposition knobs exposed in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlSettings {
    /// Atoms to learn; defaults to the (known or estimated) active count.
    pub dict_size: Option<usize>,
    pub max_iters: usize,
    pub residual_tol: f64,
    pub improvement_tol: f64,
    pub reg: Option<f64>,
    pub init: DictInit,
    pub cluster_threshold: f64,
    pub dead_atoms: DeadAtomPolicy,
}

impl Default for DlSettings {
    fn default() -> Self {
        let d = DlConfig::default();
        DlSettings {
            dict_size: None,
            max_iters: d.max_iters,
            residual_tol: d.residual_tol,
            improvement_tol: d.improvement_tol,
            reg: d.reg,
            init: d.init,
            cluster_threshold: d.cluster_threshold,
            dead_atoms: d.dead_atoms,
        }
    }
}

/// A named parameter and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Scenario field, dotted for nested fields (`dl.max_iters`).
    pub param: String,
    pub values: Vec<Value>,
    /// Trials per point; defaults to the scenario's.
    #[serde(default)]
    pub trials: Option<usize>,
}

fn default_true() -> bool {
    true
}
fn default_noise_var() -> f64 {
    1.0
}
fn default_code_rate() -> f64 {
    0.5
}
fn default_m_rep() -> usize {
    2
}
fn default_trials() -> usize {
    100
}
fn default_budget() -> AtomBudget {
    AtomBudget::Optimized
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub ktot: usize,
    pub ka: usize,
    #[serde(default = "default_true")]
    pub ka_known: bool,
    /// Power the active-count estimator assumes; defaults to the actual per-symbol power.
    #[serde(default)]
    pub rho_min: Option<f64>,
    /// Receive antennas.
    pub antennas: usize,
    pub frame_len: usize,
    /// Occupied slots per frame.
    #[serde(default)]
    pub weight: Option<usize>,
    /// `frame_len / weight`.
    #[serde(default)]
    pub frame_sparsity: Option<usize>,
    #[serde(default)]
    pub info_bits: Option<usize>,
    #[serde(default = "default_code_rate")]
    pub code_rate: f64,
    /// Per-symbol received power over noise variance.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub ebn0_db: Option<f64>,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default)]
    pub collision_ratio: f64,
    #[serde(default = "default_m_rep")]
    pub m_rep: usize,
    #[serde(default = "default_budget")]
    pub atom_budget: AtomBudget,
    #[serde(default)]
    pub dl: DlSettings,
    #[serde(default)]
    pub receiver: ReceiverConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

/// Every derived quantity of a validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScenario {
    pub config: ScenarioConfig,
    pub weight: usize,
    pub info_bits: usize,
    pub code_len: usize,
    /// Per-symbol received power of every user.
    pub rho: f64,
    pub rho_min: f64,
    pub snr_db: f64,
    pub ebn0_db: f64,
    pub atoms_per_column: usize,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| UraError::Parse {
            path: "<inline>".into(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every invariant and materializes derived values.
    pub fn resolve(&self) -> Result<ResolvedScenario> {
        let cfg = self;
        let bad = |m: String| Err(UraError::Config(m));
        if cfg.ktot == 0 || cfg.antennas == 0 || cfg.frame_len == 0 {
            return bad("ktot, antennas and frame_len must be positive".into());
        }
        if cfg.ka > cfg.ktot {
            return bad(format!("Ka={} exceeds Ktot={}", cfg.ka, cfg.ktot));
        }
        if !(cfg.code_rate > 0.0 && cfg.code_rate < 1.0) {
            return bad(format!("code rate must lie in (0, 1), got {}", cfg.code_rate));
        }
        let l = cfg.frame_len;
        let from_sparsity = match cfg.frame_sparsity {
            Some(0) => return bad("frame_sparsity must be positive".into()),
            Some(r) if l % r != 0 => return bad(format!("frame_len {l} is not a multiple of frame_sparsity {r}")),
            Some(r) => Some(l / r),
            None => None,
        };
        let from_bits = match cfg.info_bits {
            Some(b) => {
                let n = b as f64 / cfg.code_rate;
                if (n - n.round()).abs() > 1e-9 || n.round() as usize % 2 != 0 {
                    return bad(format!(
                        "B={b} at rate {} does not give an even code length, so S=(B+p)/2 is not an integer",
                        cfg.code_rate
                    ));
                }
                Some(n.round() as usize / 2)
            }
            None => None,
        };
        let candidates: Vec<usize> = [cfg.weight, from_sparsity, from_bits].into_iter().flatten().collect();
        let Some(&weight) = candidates.first() else {
            return bad("one of weight, frame_sparsity or info_bits is required".into());
        };
        if candidates.iter().any(|&s| s != weight) {
            return bad(format!(
                "inconsistent frame weight: S=(B+p)/2 must agree with weight and frame_len/frame_sparsity (got {candidates:?})"
            ));
        }
        if weight == 0 || weight >= l {
            return bad(format!("weight S={weight} must satisfy 0 < S < L={l}"));
        }
        if 2 * weight > l {
            return bad(format!("sparsity ratio S/L = {weight}/{l} exceeds 0.5"));
        }
        let code_len = 2 * weight;
        let info = code_len as f64 * cfg.code_rate;
        if (info - info.round()).abs() > 1e-9 || info.round() < 1.0 {
            return bad(format!(
                "code length {code_len} at rate {} gives no integer B",
                cfg.code_rate
            ));
        }
        let info_bits = info.round() as usize;
        if (cfg.ktot as u128) > binomial(l, weight) {
            return bad(format!("Ktot={} exceeds binom({l}, {weight})", cfg.ktot));
        }
        if !(cfg.noise_var > 0.0) {
            return bad("noise_var must be positive".into());
        }
        let rho = match (cfg.snr_db, cfg.ebn0_db) {
            (Some(s), None) => db_to_linear(s) * cfg.noise_var,
            (None, Some(e)) => crate::phy::rho_for_eb_n0(db_to_linear(e), weight, l, cfg.noise_var),
            _ => return bad("exactly one of snr_db and ebn0_db is required".into()),
        };
        if !(0.0..=1.0).contains(&cfg.collision_ratio) {
            return bad(format!(
                "collision ratio must lie in [0, 1], got {}",
                cfg.collision_ratio
            ));
        }
        if cfg.m_rep == 0 {
            return bad("m_rep must be at least 1".into());
        }
        if cfg.trials == 0 {
            return bad("trials must be positive".into());
        }
        let atoms = match cfg.atom_budget {
            AtomBudget::Optimized => atom_budget(cfg.ka, weight, l),
            AtomBudget::UpperBound => cfg.ka.max(1),
            AtomBudget::Explicit(0) => return bad("explicit atom budget must be positive".into()),
            AtomBudget::Explicit(m) => m,
        };
        if let Some(k) = cfg.dl.dict_size {
            if k < atoms.min(cfg.antennas) {
                return bad(format!("dl.dict_size {k} is below the atom budget {atoms}"));
            }
        }
        cfg.receiver.validate()?;
        let rho_min = cfg.rho_min.unwrap_or(rho);
        if !(rho_min > 0.0) {
            return bad("rho_min must be positive".into());
        }
        if let Some(s) = &cfg.sweep {
            if s.values.is_empty() {
                return bad("sweep needs at least one value".into());
            }
        }
        let ebn0 = eb_n0(rho, weight, l, cfg.noise_var).db;
        let mut config = cfg.clone();
        config.weight = Some(weight);
        config.info_bits = Some(info_bits);
        config.frame_sparsity = (l % weight == 0).then_some(l / weight);
        config.rho_min = Some(rho_min);
        config.receiver.ka_estimator.rho_min = rho_min;
        Ok(ResolvedScenario {
            config,
            weight,
            info_bits,
            code_len,
            rho,
            rho_min,
            snr_db: 10.0 * (rho / cfg.noise_var).log10(),
            ebn0_db: ebn0,
            atoms_per_column: atoms,
        })
    }

    /// Copy with one (possibly dotted) field replaced.
    ///
    /// Fields that would conflict with the new value are cleared: the SNR and
    /// Eb/n0 targets exclude each other, and weight, frame sparsity and info
    /// bits are re-derived from whichever one is set.
    pub fn with_param(&self, param: &str, value: &Value) -> Result<Self> {
        let mut json = serde_json::to_value(self).expect("config serializes");
        let obj = json.as_object_mut().expect("config is an object");
        match param {
            "snr_db" => {
                obj.remove("ebn0_db");
            }
            "ebn0_db" => {
                obj.remove("snr_db");
            }
            "weight" | "frame_sparsity" | "info_bits" => {
                for k in ["weight", "frame_sparsity", "info_bits"] {
                    obj.remove(k);
                }
            }
            "frame_len" => {
                if obj.get("frame_sparsity").is_some_and(|v| !v.is_null()) {
                    obj.remove("weight");
                    obj.remove("info_bits");
                }
            }
            _ => {}
        }
        let value = match (param, value) {
            ("atom_budget", Value::Number(n)) => serde_json::json!({ "explicit": n }),
            _ => value.clone(),
        };
        let mut slot = &mut json;
        let parts: Vec<&str> = param.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = slot
                .as_object_mut()
                .ok_or_else(|| UraError::Config(format!("{param} is not a scenario field")))?;
            if i + 1 == parts.len() {
                map.insert(part.to_string(), value.clone());
                break;
            }
            slot = map
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        let out: ScenarioConfig =
            serde_json::from_value(json).map_err(|e| UraError::Config(format!("cannot set {param} = {value}: {e}")))?;
        Ok(out)
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| UraError::io(path, e))?;
    let cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| UraError::Parse {
        path: path.to_path_buf(),
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

const PRESETS: &[(&str, &str, &str)] = &[
    (
        "paper_default",
        "full-scale setting, SNR 10 dB",
        include_str!("../presets/paper_default.json"),
    ),
    (
        "desk",
        "desk-scale setting, SNR 10 dB",
        include_str!("../presets/desk.json"),
    ),
    (
        "fig4a_atoms",
        "detection ratio versus atom budget",
        include_str!("../presets/fig4a_atoms.json"),
    ),
    (
        "fig5_sparsity",
        "detection ratio versus frame sparsity",
        include_str!("../presets/fig5_sparsity.json"),
    ),
    (
        "fig6_framelen",
        "error probability versus frame length",
        include_str!("../presets/fig6_framelen.json"),
    ),
    (
        "fig7_ebn0",
        "error probability versus Eb/n0",
        include_str!("../presets/fig7_ebn0.json"),
    ),
    (
        "fig9_collision",
        "error probability versus collision ratio",
        include_str!("../presets/fig9_collision.json"),
    ),
    (
        "fig10_kaest",
        "unknown active count versus Eb/n0",
        include_str!("../presets/fig10_kaest.json"),
    ),
];

/// `(name, description)` of every bundled preset.
pub fn preset_names() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|(n, d, _)| (*n, *d)).collect()
}

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let (_, _, text) = PRESETS
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| UraError::Config(format!("unknown preset {name}")))?;
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| UraError::Parse {
        path: format!("preset {name}").into(),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

/// Objects shared by every trial of one scenario.
#[derive(Debug, Clone)]
pub struct ScenarioContext {
    pub resolved: ResolvedScenario,
    pub code: LdpcCode,
}

impl ScenarioContext {
    /// Resolves the config and draws its LDPC code from the base seed.
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let resolved = cfg.resolve()?;
        let mut rng = stream(cfg.seed, streams::LDPC, 0);
        let code = make_ldpc(resolved.info_bits, cfg.code_rate, &mut rng)?;
        Ok(ScenarioContext { resolved, code })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.resolved.config
    }

    /// Decomposition config handed to the receiver.
    pub fn dl_config(&self) -> DlConfig {
        let s = &self.config().dl;
        DlConfig {
            atoms_per_column: self.resolved.atoms_per_column,
            dict_size: s.dict_size.unwrap_or(self.config().ka),
            max_iters: s.max_iters,
            residual_tol: s.residual_tol,
            improvement_tol: s.improvement_tol,
            reg: s.reg,
            init: s.init,
            cluster_threshold: s.cluster_threshold,
            dead_atoms: s.dead_atoms,
        }
    }
}

/// Ground truth, received block and receiver output of one trial.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub index: u64,
    pub scene: Scene,
    pub codewords: Vec<usize>,
    pub result: TrialResult,
    pub metrics: TrialMetrics,
}

/// Generates, transmits and receives one trial; every stage draws from its own stream.
pub fn run_trial(ctx: &ScenarioContext, index: u64) -> Result<TrialRecord> {
    let r = &ctx.resolved;
    let cfg = &r.config;
    let seed = cfg.seed;
    let wrap = |e: UraError| UraError::Trial {
        trial: index as usize,
        message: e.to_string(),
    };
    let cb = generate_codebook(
        cfg.frame_len,
        r.weight,
        cfg.ktot,
        &mut stream(seed, streams::CODEBOOK, index),
    )
    .map_err(wrap)?;
    let assignment = assign_codewords(
        &cb,
        cfg.ka,
        cfg.collision_ratio,
        cfg.m_rep,
        &mut stream(seed, streams::ASSIGNMENT, index),
    )
    .map_err(wrap)?;
    let scene = Scene::generate(
        cfg.antennas,
        r.info_bits,
        &assignment,
        cfg.ktot,
        vec![r.rho; cfg.ka],
        cfg.noise_var,
        &mut stream(seed, streams::MESSAGES, index),
        &mut stream(seed, streams::CHANNEL, index),
    )
    .map_err(wrap)?;
    let rows = scene.frame_rows(&ctx.code, &cb).map_err(wrap)?;
    let y = if rows.is_empty() {
        crate::phy::noise_block(
            cfg.antennas,
            cfg.frame_len,
            cfg.noise_var,
            &mut stream(seed, streams::NOISE, index),
        )
    } else {
        channel_apply(&scene, &rows, &mut stream(seed, streams::NOISE, index))
            .map_err(wrap)?
            .y
    };
    let rx_ctx = ReceiveContext {
        ka: cfg.ka_known.then_some(cfg.ka),
        ktot: cfg.ktot,
        noise_var: cfg.noise_var,
        m_rep: cfg.m_rep,
        dl: ctx.dl_config(),
    };
    let mut dl_rng = stream(seed, streams::DL_INIT, index);
    let result = receive(&y, &cb, &ctx.code, &cfg.receiver, &rx_ctx, &mut dl_rng).map_err(wrap)?;
    let truth: Vec<TruthEntry> = scene
        .messages
        .iter()
        .zip(&scene.codewords)
        .map(|(bits, &c)| {
            Ok(TruthEntry {
                codeword: c,
                bits: bits.clone(),
                coded: ctx.code.encode(bits)?,
            })
        })
        .collect::<Result<_>>()
        .map_err(wrap)?;
    let detected: Vec<DetectedEntry> = result
        .rows
        .iter()
        .map(|d| DetectedEntry {
            codeword: d.codeword,
            bits: d.bits.clone(),
            coded: d.coded.clone(),
            parity_errors: d.parity_errors,
        })
        .collect();
    let metrics = evaluate(&truth, &detected, cfg.ka_known);
    Ok(TrialRecord {
        index,
        codewords: scene.codewords.clone(),
        scene,
        result,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Record wall time per trial.
    pub timing: bool,
}

/// Aggregated outcome of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_param: Option<String>,
    pub sweep_value: Option<String>,
    pub trials: usize,
    pub p_md: f64,
    pub p_md_stderr: f64,
    pub p_fa: f64,
    pub p_fa_stderr: f64,
    pub p_e: Option<f64>,
    pub p_e_stderr: Option<f64>,
    pub ser: Option<f64>,
    pub ser_stderr: Option<f64>,
    pub k_est_mean: f64,
    pub runtime_ms_mean: Option<f64>,
    pub seed_base: u64,
    #[serde(default)]
    pub detection_ratio: f64,
    #[serde(default)]
    pub failed_trials: usize,
}

impl ResultRow {
    fn from_summary(s: &Summary, seed: u64, runtime: Option<f64>, failed: usize) -> Self {
        ResultRow {
            sweep_param: None,
            sweep_value: None,
            trials: s.trials,
            p_md: s.p_md.mean,
            p_md_stderr: s.p_md.stderr,
            p_fa: s.p_fa.mean,
            p_fa_stderr: s.p_fa.stderr,
            p_e: s.p_e.map(|e| e.mean),
            p_e_stderr: s.p_e.map(|e| e.stderr),
            ser: s.ser.map(|e| e.mean),
            ser_stderr: s.ser.map(|e| e.stderr),
            k_est_mean: s.k_est_mean,
            runtime_ms_mean: runtime,
            seed_base: seed,
            detection_ratio: s.detection_ratio.mean,
            failed_trials: failed,
        }
    }
}

/// Per-trial metrics of a scenario, in trial order, plus failures.
pub fn run_trials(
    ctx: &ScenarioContext,
    trials: usize,
    opts: RunOptions,
) -> Result<(Vec<TrialMetrics>, Vec<f64>, usize)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| UraError::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<(Result<TrialMetrics>, f64)> = pool.install(|| {
        (0..trials as u64)
            .into_par_iter()
            .map(|t| {
                let start = Instant::now();
                let m = run_trial(ctx, t).map(|r| r.metrics);
                (m, start.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    });
    let mut metrics = Vec::with_capacity(trials);
    let mut times = Vec::with_capacity(trials);
    let mut failed = 0;
    for (m, ms) in outcomes {
        match m {
            Ok(m) => {
                metrics.push(m);
                times.push(ms);
            }
            Err(e) => {
                log::warn!("{e}");
                failed += 1;
            }
        }
    }
    Ok((metrics, times, failed))
}

/// Runs one scenario and aggregates it.
pub fn run_scenario(cfg: &ScenarioConfig, opts: RunOptions) -> Result<ResultRow> {
    let ctx = ScenarioContext::new(cfg)?;
    let (metrics, times, failed) = run_trials(&ctx, cfg.trials, opts)?;
    if metrics.is_empty() {
        return Err(UraError::Trial {
            trial: 0,
            message: format!("all {failed} trials failed"),
        });
    }
    let summary = aggregate(&metrics)?;
    let runtime = opts.timing.then(|| times.iter().sum::<f64>() / times.len() as f64);
    Ok(ResultRow::from_summary(&summary, cfg.seed, runtime, failed))
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One aggregated row per sweep value. Every point reuses the base seed.
pub fn run_sweep(cfg: &ScenarioConfig, sweep: &SweepSpec, opts: RunOptions) -> Result<Vec<ResultRow>> {
    let mut points = Vec::with_capacity(sweep.values.len());
    for v in &sweep.values {
        let mut point = cfg.with_param(&sweep.param, v)?;
        point.sweep = None;
        if let Some(t) = sweep.trials {
            point.trials = t;
        }
        point.resolve()?;
        points.push(point);
    }
    let mut rows = Vec::with_capacity(points.len());
    for (point, v) in points.iter().zip(&sweep.values) {
        log::info!("{} = {}: {} trials", sweep.param, value_label(v), point.trials);
        let mut row = run_scenario(point, opts)?;
        row.sweep_param = Some(sweep.param.clone());
        row.sweep_value = Some(value_label(v));
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "sweep_param",
    "sweep_value",
    "trials",
    "p_md",
    "p_md_stderr",
    "p_fa",
    "p_fa_stderr",
    "p_e",
    "p_e_stderr",
    "ser",
    "ser_stderr",
    "k_est_mean",
    "runtime_ms_mean",
    "seed_base",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| UraError::Config(format!("CSV encoding failed: {e}"));
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record([
            r.sweep_param.clone().unwrap_or_default(),
            r.sweep_value.clone().unwrap_or_default(),
            r.trials.to_string(),
            r.p_md.to_string(),
            r.p_md_stderr.to_string(),
            r.p_fa.to_string(),
            r.p_fa_stderr.to_string(),
            cell(r.p_e),
            cell(r.p_e_stderr),
            cell(r.ser),
            cell(r.ser_stderr),
            r.k_est_mean.to_string(),
            cell(r.runtime_ms_mean),
            r.seed_base.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| UraError::Config(format!("CSV encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV is UTF-8"))
}

/// Parses a results CSV written by [`results_to_csv`].
pub fn results_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let perr = |m: String| UraError::Parse {
        path: "<csv>".into(),
        message: m,
    };
    let headers = rd.headers().map_err(|e| perr(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(perr("unexpected CSV header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let line = i + 2;
        let num = |k: usize| -> Result<Option<f64>> {
            let s = &rec[k];
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| perr(format!("line {line}: {e}")))
        };
        let req =
            |k: usize| -> Result<f64> { num(k)?.ok_or_else(|| perr(format!("line {line}: empty {}", CSV_COLUMNS[k]))) };
        let text = |k: usize| (!rec[k].is_empty()).then(|| rec[k].to_string());
        rows.push(ResultRow {
            sweep_param: text(0),
            sweep_value: text(1),
            trials: rec[2].parse().map_err(|e| perr(format!("line {line}: {e}")))?,
            p_md: req(3)?,
            p_md_stderr: req(4)?,
            p_fa: req(5)?,
            p_fa_stderr: req(6)?,
            p_e: num(7)?,
            p_e_stderr: num(8)?,
            ser: num(9)?,
            ser_stderr: num(10)?,
            k_est_mean: req(11)?,
            runtime_ms_mean: num(12)?,
            seed_base: rec[13].parse().map_err(|e| perr(format!("line {line}: {e}")))?,
            detection_ratio: 0.0,
            failed_trials: 0,
        });
    }
    Ok(rows)
}

pub fn results_to_json(rows: &[ResultRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

pub fn write_results(rows: &[ResultRow], path: &Path, format: OutputFormat) -> Result<()> {
    if rows.is_empty() {
        return Err(UraError::Config("no result rows to write".into()));
    }
    let text = match format {
        OutputFormat::Csv => results_to_csv(rows)?,
        OutputFormat::Json => results_to_json(rows) + "\n",
    };
    std::fs::write(path, text).map_err(|e| UraError::io(path, e))
}

/// Writes the resolved scenario (all defaults filled in) as pretty JSON.
pub fn write_resolved_config(resolved: &ResolvedScenario, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(resolved).expect("resolved config serializes") + "\n";
    std::fs::write(path, text).map_err(|e| UraError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small() -> ScenarioConfig {
        ScenarioConfig::from_json(
            r#"{"ktot": 20, "ka": 3, "antennas": 8, "frame_len": 60, "weight": 6,
                "snr_db": 20.0, "trials": 6, "seed": 7}"#,
        )
        .unwrap()
    }

    #[test]
    fn presets_parse_and_resolve() {
        for (name, _) in preset_names() {
            let cfg = preset(name).unwrap();
            cfg.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
            if let Some(sweep) = &cfg.sweep {
                for v in &sweep.values {
                    cfg.with_param(&sweep.param, v).unwrap().resolve().unwrap();
                }
            }
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn preset_dimensions() {
        let dims = |c: &ScenarioConfig| (c.ktot, c.ka, c.antennas, c.frame_len, c.resolve().unwrap().weight);
        assert_eq!(dims(&preset("paper_default").unwrap()), (1000, 100, 64, 1600, 40));
        assert_eq!(dims(&preset("desk").unwrap()), (200, 20, 32, 400, 10));
    }

    #[test]
    fn weight_sources_must_agree() {
        let mut cfg = small();
        cfg.frame_sparsity = Some(10);
        cfg.info_bits = Some(6);
        let r = cfg.resolve().unwrap();
        assert_eq!((r.weight, r.code_len, r.info_bits), (6, 12, 6));

        cfg.frame_sparsity = Some(6);
        assert!(matches!(cfg.resolve(), Err(UraError::Config(m)) if m.contains("inconsistent")));

        let mut odd = small();
        odd.weight = None;
        odd.code_rate = 0.6;
        odd.info_bits = Some(3);
        assert!(matches!(odd.resolve(), Err(UraError::Config(_))));
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let cases: Vec<Box<dyn Fn(&mut ScenarioConfig)>> = vec![
            Box::new(|c| c.ka = 21),
            Box::new(|c| c.code_rate = 1.0),
            Box::new(|c| c.collision_ratio = 1.5),
            Box::new(|c| c.m_rep = 0),
            Box::new(|c| c.trials = 0),
            Box::new(|c| c.noise_var = 0.0),
            Box::new(|c| c.ebn0_db = Some(3.0)),
            Box::new(|c| c.weight = Some(31)),
            Box::new(|c| c.atom_budget = AtomBudget::Explicit(0)),
        ];
        for (i, f) in cases.iter().enumerate() {
            let mut c = small();
            f(&mut c);
            assert!(c.resolve().is_err(), "case {i} resolved");
        }
        assert!(ScenarioConfig::from_json(r#"{"ktot": 1, "bogus": 2}"#).is_err());
    }

    #[test]
    fn snr_and_ebn0_agree() {
        let mut cfg = small();
        let r = cfg.resolve().unwrap();
        cfg = cfg.with_param("ebn0_db", &json!(r.ebn0_db)).unwrap();
        assert_eq!(cfg.snr_db, None);
        let back = cfg.resolve().unwrap();
        assert!((back.rho - r.rho).abs() < 1e-9 * r.rho);
        assert!((back.snr_db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn with_param_sets_nested_fields_and_clears_conflicts() {
        let cfg = small();
        let c = cfg.with_param("dl.max_iters", &json!(7)).unwrap();
        assert_eq!(c.dl.max_iters, 7);
        let c = cfg.with_param("atom_budget", &json!(3)).unwrap();
        assert_eq!(c.atom_budget, AtomBudget::Explicit(3));
        let c = cfg.with_param("atom_budget", &json!("upper_bound")).unwrap();
        assert_eq!(c.resolve().unwrap().atoms_per_column, 3);
        let c = cfg.with_param("frame_sparsity", &json!(12)).unwrap();
        assert_eq!((c.weight, c.resolve().unwrap().weight), (None, 5));
        assert!(cfg.with_param("ktot", &json!("many")).is_err());
        assert!(cfg.with_param("nonsense", &json!(1)).is_err());
    }

    #[test]
    fn runs_are_deterministic_and_ignore_worker_count() {
        let cfg = small();
        let one = run_scenario(
            &cfg,
            RunOptions {
                workers: 1,
                timing: false,
            },
        )
        .unwrap();
        let four = run_scenario(
            &cfg,
            RunOptions {
                workers: 4,
                timing: false,
            },
        )
        .unwrap();
        assert_eq!(one, four);
        assert_eq!(one.runtime_ms_mean, None);
        assert_eq!(one.trials, 6);
        let timed = run_scenario(
            &cfg,
            RunOptions {
                workers: 2,
                timing: true,
            },
        )
        .unwrap();
        assert!(timed.runtime_ms_mean.unwrap() > 0.0);
    }

    #[test]
    fn streams_are_isolated_between_stages() {
        let cfg = small();
        let ctx = ScenarioContext::new(&cfg).unwrap();
        let a = run_trial(&ctx, 2).unwrap();
        let mut other = cfg.clone();
        other.snr_db = Some(0.0);
        let b = run_trial(&ScenarioContext::new(&other).unwrap(), 2).unwrap();
        // the noise level changes the received block but nothing drawn before it
        assert_eq!(a.codewords, b.codewords);
        assert_eq!(a.scene.messages, b.scene.messages);
        assert_eq!(a.scene.fading, b.scene.fading);
        let c = run_trial(&ctx, 3).unwrap();
        assert_ne!(a.scene.messages, c.scene.messages);
    }

    #[test]
    fn sweep_labels_rows_by_value() {
        let cfg = small();
        let sweep = SweepSpec {
            param: "snr_db".into(),
            values: vec![json!(5.0), json!(25.0)],
            trials: Some(3),
        };
        let rows = run_sweep(&cfg, &sweep, RunOptions::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].sweep_param.as_deref(), Some("snr_db"));
        assert_eq!(rows[1].sweep_value.as_deref(), Some("25.0"));
        assert!(rows.iter().all(|r| r.trials == 3 && r.seed_base == 7));
    }

    #[test]
    fn csv_round_trips_and_matches_json() {
        let cfg = small();
        let mut row = run_scenario(&cfg, RunOptions::default()).unwrap();
        row.runtime_ms_mean = Some(1.25);
        row.sweep_param = Some("ka".into());
        row.sweep_value = Some("3".into());
        let mut unknown = row.clone();
        unknown.p_e = None;
        unknown.p_e_stderr = None;
        unknown.ser = None;
        unknown.ser_stderr = None;
        unknown.runtime_ms_mean = None;
        let rows = vec![row, unknown];
        let text = results_to_csv(&rows).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        let back = results_from_csv(&text).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            let mut a = a.clone();
            a.detection_ratio = 0.0;
            a.failed_trials = 0;
            assert_eq!(&a, b);
        }
        let json: Vec<ResultRow> = serde_json::from_str(&results_to_json(&rows)).unwrap();
        assert_eq!(json, rows);
        assert!(results_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn files_are_written_with_resolved_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let row = run_scenario(&cfg, RunOptions::default()).unwrap();
        let out = dir.path().join("r.csv");
        write_results(&[row], &out, OutputFormat::Csv).unwrap();
        assert!(std::fs::read_to_string(&out).unwrap().starts_with("sweep_param,"));
        let resolved = dir.path().join("r.resolved.json");
        write_resolved_config(&cfg.resolve().unwrap(), &resolved).unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&resolved).unwrap()).unwrap();
        assert_eq!(v["weight"], json!(6));
        assert_eq!(v["config"]["m_rep"], json!(2));
        assert!(write_results(&[], &out, OutputFormat::Json).is_err());

        let path = dir.path().join("s.json");
        std::fs::write(&path, cfg.to_json()).unwrap();
        assert_eq!(load_scenario(&path).unwrap(), cfg);
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_scenario(&path), Err(UraError::Parse { .. })));
    }
}
