//! Receive pipeline: decomposition, pattern extraction, codeword detection,
//! decoder-driven refinement, collision resolution and active-count estimation.

use nalgebra::Cholesky;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::dictlearn::{
    cluster_directions, default_reg, dl_decompose, mod_update, sparse_code, DecompositionResult, DlConfig,
};
use crate::error::{Result, UraError};
use crate::fec::{LdpcCode, DEFAULT_LLR_CLAMP};
use crate::phy::{qpsk_modulate, CMatrix};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ROTATIONS: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

/// Magnitude cut used when reading the sparsity pattern off the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum PatternThreshold {
    /// Keep entries whose magnitude exceeds this value.
    Absolute(f64),
    /// Keep entries above this fraction of the RMS of the row's nonzero entries.
    RowRms(f64),
}

impl Default for PatternThreshold {
    fn default() -> Self {
        PatternThreshold::Absolute(0.0)
    }
}

/// Binary pattern `K x L`, stored as the sorted support of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternMatrix {
    pub len: usize,
    pub rows: Vec<Vec<usize>>,
}

impl PatternMatrix {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.rows[row].binary_search(&col).is_ok()
    }

    /// Row `k` of `P = Omega C`: overlap of the row pattern with every codeword.
    pub fn scores(&self, row: usize, cb: &Codebook) -> Vec<usize> {
        let mut mask = vec![false; self.len];
        for &p in &self.rows[row] {
            mask[p] = true;
        }
        cb.columns()
            .iter()
            .map(|c| c.iter().filter(|&&p| mask[p]).count())
            .collect()
    }
}

pub fn extract_pattern(x: &CMatrix, threshold: PatternThreshold) -> Result<PatternMatrix> {
    let rows = (0..x.nrows())
        .map(|k| {
            let row = x.row(k);
            let cut = match threshold {
                PatternThreshold::Absolute(t) => t,
                PatternThreshold::RowRms(f) => {
                    let nz: Vec<f64> = row.iter().filter(|v| **v != ZERO).map(|v| v.norm_sqr()).collect();
                    if nz.is_empty() {
                        0.0
                    } else {
                        f * (nz.iter().sum::<f64>() / nz.len() as f64).sqrt()
                    }
                }
            };
            (0..x.ncols())
                .filter(|&l| row[l].norm() > cut && row[l] != ZERO)
                .collect()
        })
        .collect();
    match threshold {
        PatternThreshold::Absolute(t) | PatternThreshold::RowRms(t) if !(t >= 0.0) => Err(UraError::Config(format!(
            "pattern threshold must be non-negative, got {t}"
        ))),
        _ => Ok(PatternMatrix { len: x.ncols(), rows }),
    }
}

/// One coefficient row paired with a codeword.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub row: usize,
    pub codeword: usize,
    pub score: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionResult {
    /// Matches in the order they were taken.
    pub matches: Vec<Match>,
    /// Largest entry of each row of `P` before any masking.
    pub row_max: Vec<usize>,
}

impl DetectionResult {
    pub fn codewords(&self) -> Vec<usize> {
        self.matches.iter().map(|m| m.codeword).collect()
    }

    pub fn multiplicity(&self, codeword: usize) -> usize {
        self.matches.iter().filter(|m| m.codeword == codeword).count()
    }
}

/// Greedy global-argmax matching of pattern rows to codewords.
///
/// Every pick masks its row. With `zero_column` it also masks the codeword so
/// each codeword is claimed at most once. Ties go to the smallest `(row, codeword)`.
pub fn detect_active(omega: &PatternMatrix, cb: &Codebook, k_target: usize, zero_column: bool) -> DetectionResult {
    detect_excluding(omega, cb, k_target, zero_column, &[])
}

fn detect_excluding(
    omega: &PatternMatrix,
    cb: &Codebook,
    k_target: usize,
    zero_column: bool,
    excluded: &[usize],
) -> DetectionResult {
    let rows = omega.num_rows();
    let mut target = k_target;
    if target > rows {
        log::warn!("detection target {k_target} capped at {rows} rows");
        target = rows;
    }
    if zero_column && target > cb.size() {
        target = cb.size();
    }
    let p: Vec<Vec<usize>> = (0..rows).map(|k| omega.scores(k, cb)).collect();
    let row_max = p.iter().map(|r| r.iter().copied().max().unwrap_or(0)).collect();
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cb.size()];
    for &n in excluded {
        col_used[n] = true;
    }
    let mut matches = Vec::with_capacity(target);
    for _ in 0..target {
        let mut best: Option<Match> = None;
        for (k, pk) in p.iter().enumerate() {
            if row_used[k] {
                continue;
            }
            for (n, &score) in pk.iter().enumerate() {
                if col_used[n] {
                    continue;
                }
                if best.is_none_or(|b| score > b.score) {
                    best = Some(Match {
                        row: k,
                        codeword: n,
                        score,
                    });
                }
            }
        }
        let Some(m) = best else { break };
        row_used[m.row] = true;
        if zero_column {
            col_used[m.codeword] = true;
        }
        matches.push(m);
    }
    DetectionResult { matches, row_max }
}

/// Outcome of the four-rotation scalar search on one extracted row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarResolution {
    pub gain: Complex64,
    /// Index `k` of the winning rotation `j^k`.
    pub rotation: u8,
    pub bits: Vec<u8>,
    pub codeword: Vec<u8>,
    pub parity_errors: usize,
    /// Hard decisions the decoder had to flip.
    pub corrections: usize,
}

/// Resolves the unknown complex scalar of an extracted row by decoding under
/// each of the four QPSK rotations.
pub fn resolve_scalar(symbols: &[Complex64], code: &LdpcCode, noise_var: f64) -> Result<ScalarResolution> {
    resolve_scalar_weighted(symbols, &vec![noise_var; symbols.len()], code)
}

/// [`resolve_scalar`] with a separate noise variance for every symbol.
pub fn resolve_scalar_weighted(symbols: &[Complex64], noise_vars: &[f64], code: &LdpcCode) -> Result<ScalarResolution> {
    if 2 * symbols.len() != code.code_len() || noise_vars.len() != symbols.len() {
        return Err(UraError::Dimension(format!(
            "{} symbols for a length-{} code",
            symbols.len(),
            code.code_len()
        )));
    }
    let power = symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / symbols.len() as f64;
    if power == 0.0 || !power.is_finite() {
        return Err(UraError::UndefinedGain("extracted row is all zero".into()));
    }
    // QPSK points satisfy s^4 = -1, so the fourth power exposes the phase modulo pi/2
    let q: Complex64 = symbols.iter().map(|s| s.powu(4)).sum();
    let phase = if q.norm() > 0.0 { (-q).arg() / 4.0 } else { 0.0 };
    let gain = Complex64::from_polar(power.sqrt(), phase);
    let mut best: Option<ScalarResolution> = None;
    for (r, rot) in ROTATIONS.iter().enumerate() {
        let g = gain * rot;
        let scale = 2.0 * std::f64::consts::SQRT_2 * g.norm_sqr();
        let mut llrs = Vec::with_capacity(code.code_len());
        for (&y, &v) in symbols.iter().zip(noise_vars) {
            let z = y / g;
            let w = if v > 0.0 && v.is_finite() {
                scale / v
            } else if v == 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            for part in [z.re, z.im] {
                let l = if w.is_infinite() {
                    part.signum() * DEFAULT_LLR_CLAMP
                } else {
                    w * part
                };
                llrs.push(l.clamp(-DEFAULT_LLR_CLAMP, DEFAULT_LLR_CLAMP));
            }
        }
        let dec = code.decode_bp(&llrs, code.max_iters)?;
        let corrections = llrs
            .iter()
            .zip(&dec.codeword)
            .filter(|(l, b)| u8::from(**l < 0.0) != **b)
            .count();
        let cand = ScalarResolution {
            gain: g,
            rotation: r as u8,
            bits: dec.bits,
            codeword: dec.codeword,
            parity_errors: dec.parity_errors,
            corrections,
        };
        let better = match &best {
            None => true,
            Some(b) => (cand.parity_errors, cand.corrections) < (b.parity_errors, b.corrections),
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("four hypotheses evaluated"))
}

/// Blind upper bound on the active count from received energy.
///
/// `K = round((||Y||^2 / M - L sigma^2) / (rho_min S))`, clamped to `[0, ktot]`.
pub fn estimate_ka_upper(y: &CMatrix, rho_min: f64, weight: usize, noise_var: f64, ktot: usize) -> usize {
    let (m, l) = y.shape();
    if m == 0 || rho_min <= 0.0 || weight == 0 {
        return 0;
    }
    let raw = (y.norm_squared() / m as f64 - l as f64 * noise_var) / (rho_min * weight as f64);
    if !(raw > 0.0) {
        return 0;
    }
    (raw.round() as usize).min(ktot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KaEstimatorConfig {
    /// Smallest received per-symbol power the estimator assumes.
    pub rho_min: f64,
    /// Minimum normalized match score a row needs.
    pub tau_match: f64,
    /// Minimum row energy as a fraction of the median matched-row energy.
    pub tau_pow: f64,
}

impl Default for KaEstimatorConfig {
    fn default() -> Self {
        KaEstimatorConfig {
            rho_min: 1.0,
            tau_match: 0.5,
            tau_pow: 0.1,
        }
    }
}

impl KaEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0) {
            return Err(UraError::Config("rho_min must be positive".into()));
        }
        for (name, t) in [("tau_match", self.tau_match), ("tau_pow", self.tau_pow)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(UraError::Config(format!("{name} must lie in (0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

/// Drops matched rows with a weak pattern match or low energy.
pub fn trim(x: &CMatrix, det: &DetectionResult, weight: usize, cfg: &KaEstimatorConfig) -> DetectionResult {
    let energy: Vec<f64> = det.matches.iter().map(|m| x.row(m.row).norm_squared()).collect();
    let mut sorted = energy.clone();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let matches: Vec<Match> = det
        .matches
        .iter()
        .zip(&energy)
        .filter(|(m, &e)| m.score as f64 / weight as f64 >= cfg.tau_match && e >= cfg.tau_pow * median)
        .map(|(m, _)| *m)
        .collect();
    if matches.is_empty() && !det.matches.is_empty() {
        log::warn!("trimming removed every matched row");
    }
    DetectionResult {
        matches,
        row_max: det.row_max.clone(),
    }
}

/// Re-examines codewords claimed by more than `m_rep` rows.
///
/// Each contested row tries its `candidates` best-scoring codewords, decoding
/// the row read through each codeword's support. The lowest parity-error count
/// wins, then the higher pattern score, then the smaller index.
#[allow(clippy::too_many_arguments)]
pub fn resolve_collisions(
    det: &DetectionResult,
    omega: &PatternMatrix,
    x: &CMatrix,
    cb: &Codebook,
    code: &LdpcCode,
    m_rep: usize,
    noise_var: f64,
    candidates: usize,
) -> Result<(DetectionResult, usize)> {
    let mut out = det.clone();
    let mut changed = 0;
    let mut contested: Vec<usize> = det.codewords();
    contested.sort_unstable();
    contested.dedup();
    contested.retain(|&c| det.multiplicity(c) > m_rep);
    for c in contested {
        for slot in 0..out.matches.len() {
            let m = out.matches[slot];
            if m.codeword != c {
                continue;
            }
            let scores = omega.scores(m.row, cb);
            let mut order: Vec<usize> = (0..cb.size()).collect();
            order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
            order.truncate(candidates.max(1));
            if !order.contains(&c) {
                order.push(c);
            }
            let row: Vec<Complex64> = x.row(m.row).iter().copied().collect();
            let mut best = (usize::MAX, 0usize, c);
            for &n in &order {
                let symbols = cb.extraction_map(n)?.apply(&row)?;
                let pe = match resolve_scalar(&symbols, code, noise_var) {
                    Ok(r) => r.parity_errors,
                    Err(UraError::UndefinedGain(_)) => code.num_checks(),
                    Err(e) => return Err(e),
                };
                let key = (pe, scores[n], n);
                if key.0 < best.0 || (key.0 == best.0 && (key.1 > best.1 || (key.1 == best.1 && key.2 < best.2))) {
                    best = key;
                }
            }
            if best.2 != c {
                changed += 1;
                out.matches[slot] = Match {
                    row: m.row,
                    codeword: best.2,
                    score: scores[best.2],
                };
            }
        }
    }
    Ok((out, changed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Upper bound on decode, re-encode, update passes.
    pub passes: usize,
    /// Stop once the summed parity errors are at or below this.
    pub max_total_parity_errors: usize,
    /// Re-estimate every matched row jointly on its codeword support before
    /// decoding; `false` reads symbols straight from the coefficient rows.
    pub support_refit: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            passes: 2,
            max_total_parity_errors: 0,
            support_refit: true,
        }
    }
}

/// One decoded row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedRow {
    pub row: usize,
    pub codeword: usize,
    pub score: usize,
    pub bits: Vec<u8>,
    pub coded: Vec<u8>,
    pub parity_errors: usize,
    pub gain: Complex64,
    pub rotation: u8,
    /// `sum |z - g s|^2 / sum |g s|^2` with `s` the re-encoded symbols and
    /// `g` their least-squares gain; small when the row is one user plus noise.
    pub misfit: f64,
}

impl DecodedRow {
    /// Decoded without parity errors and explained by its own symbols.
    pub fn is_clean(&self, misfit_limit: f64) -> bool {
        self.parity_errors == 0 && self.misfit <= misfit_limit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedOutput {
    /// Refined channel estimate, one column per decoded row.
    pub channels: CMatrix,
    pub rows: Vec<DecodedRow>,
    /// `||Y - G f(X)||_F` for the returned rows.
    pub residual: f64,
    pub passes: usize,
}

impl RefinedOutput {
    pub fn total_parity_errors(&self) -> usize {
        self.rows.iter().map(|r| r.parity_errors).sum()
    }
}

/// Re-encoded frame matrix `f(X)` (`rows x L`), zero off every support.
pub fn reencode(rows: &[DecodedRow], cb: &Codebook) -> Result<CMatrix> {
    let mut f = CMatrix::zeros(rows.len(), cb.len());
    for (i, r) in rows.iter().enumerate() {
        let sym = qpsk_modulate(&r.coded)?;
        for (&p, s) in cb.support(r.codeword).iter().zip(sym) {
            f[(i, p)] = s;
        }
    }
    Ok(f)
}

/// Joint least-squares estimate of every matched row on its own support.
/// Returns per-row symbols and their noise variances.
fn support_refit(
    y: &CMatrix,
    dict: &CMatrix,
    atoms: &[usize],
    codewords: &[usize],
    cb: &Codebook,
    noise_var: f64,
) -> Vec<(Vec<Complex64>, Vec<f64>)> {
    let n = atoms.len();
    let mut at: Vec<Vec<usize>> = vec![Vec::new(); cb.len()];
    for (i, &c) in codewords.iter().enumerate() {
        for &p in cb.support(c) {
            at[p].push(i);
        }
    }
    let per_col: Vec<Vec<(usize, Complex64, f64)>> = (0..cb.len())
        .into_par_iter()
        .map(|l| {
            let rows = &at[l];
            if rows.is_empty() {
                return Vec::new();
            }
            let k = rows.len();
            let mut gram = CMatrix::zeros(k, k);
            let mut rhs = CMatrix::zeros(k, 1);
            for (a, &i) in rows.iter().enumerate() {
                let ci = dict.column(atoms[i]);
                for (b, &j) in rows.iter().enumerate() {
                    gram[(a, b)] = ci.dotc(&dict.column(atoms[j]));
                }
                rhs[(a, 0)] = ci.dotc(&y.column(l));
            }
            let scale = (0..k).map(|i| gram[(i, i)].re).fold(0.0, f64::max);
            for i in 0..k {
                gram[(i, i)] += Complex64::new(1e-12 * scale.max(f64::MIN_POSITIVE), 0.0);
            }
            match Cholesky::new(gram) {
                Some(ch) => {
                    let sol = ch.solve(&rhs);
                    let inv = ch.inverse();
                    rows.iter()
                        .enumerate()
                        .map(|(a, &i)| (i, sol[(a, 0)], noise_var * inv[(a, a)].re.max(0.0)))
                        .collect()
                }
                None => rows.iter().map(|&i| (i, ZERO, f64::INFINITY)).collect(),
            }
        })
        .collect();
    let s = cb.weight();
    let mut out: Vec<(Vec<Complex64>, Vec<f64>)> =
        (0..n).map(|_| (Vec::with_capacity(s), Vec::with_capacity(s))).collect();
    // supports are sorted, so visiting columns in order fills symbols in support order
    for col in per_col {
        for (i, v, var) in col {
            out[i].0.push(v);
            out[i].1.push(var);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn decode_refit(
    y: &CMatrix,
    dict: &CMatrix,
    atoms: &[usize],
    matches: &[Match],
    cb: &Codebook,
    code: &LdpcCode,
    noise_var: f64,
) -> Vec<DecodedRow> {
    let codewords: Vec<usize> = matches.iter().map(|m| m.codeword).collect();
    let inputs = support_refit(y, dict, atoms, &codewords, cb, noise_var);
    matches
        .par_iter()
        .zip(inputs.par_iter())
        .map(|(m, (symbols, vars))| decode_one(symbols, vars, m, code))
        .collect()
}

fn misfit(symbols: &[Complex64], coded: &[u8]) -> f64 {
    let Ok(s) = qpsk_modulate(coded) else {
        return f64::INFINITY;
    };
    let g: Complex64 = s.iter().zip(symbols).map(|(a, z)| a.conj() * z).sum::<Complex64>() / s.len() as f64;
    let err: f64 = symbols.iter().zip(&s).map(|(z, a)| (z - g * a).norm_sqr()).sum();
    let t = err / (g.norm_sqr() * s.len() as f64);
    if t.is_nan() {
        f64::INFINITY
    } else {
        t
    }
}

fn decode_one(symbols: &[Complex64], vars: &[f64], m: &Match, code: &LdpcCode) -> DecodedRow {
    match resolve_scalar_weighted(symbols, vars, code) {
        Ok(r) => DecodedRow {
            row: m.row,
            codeword: m.codeword,
            score: m.score,
            misfit: misfit(symbols, &r.codeword),
            bits: r.bits,
            coded: r.codeword,
            parity_errors: r.parity_errors,
            gain: r.gain,
            rotation: r.rotation,
        },
        Err(_) => DecodedRow {
            row: m.row,
            codeword: m.codeword,
            score: m.score,
            bits: vec![0; code.info_len()],
            coded: vec![0; code.code_len()],
            parity_errors: code.num_checks(),
            gain: ZERO,
            rotation: 0,
            misfit: f64::INFINITY,
        },
    }
}

/// Decoder-driven refinement of the matched rows.
///
/// Each pass reads every row's symbols, resolves its scalar, decodes,
/// re-encodes and fits the channel matrix to the re-encoded frames by MOD.
/// Later passes read symbols through the refined channels. The pass with the
/// fewest parity errors is returned.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    y: &CMatrix,
    decomposition: &DecompositionResult,
    det: &DetectionResult,
    cb: &Codebook,
    code: &LdpcCode,
    noise_var: f64,
    cfg: &RefineConfig,
) -> Result<RefinedOutput> {
    if det.matches.is_empty() {
        return Ok(RefinedOutput {
            channels: CMatrix::zeros(y.nrows(), 0),
            rows: Vec::new(),
            residual: y.norm(),
            passes: 0,
        });
    }
    let atoms: Vec<usize> = det.matches.iter().map(|m| m.row).collect();
    let mut rows = if cfg.support_refit {
        decode_refit(y, &decomposition.dictionary, &atoms, &det.matches, cb, code, noise_var)
    } else {
        let x = &decomposition.coeffs;
        det.matches
            .par_iter()
            .map(|m| {
                let row: Vec<Complex64> = x.row(m.row).iter().copied().collect();
                let symbols = cb.extraction_map(m.codeword)?.apply(&row)?;
                let vars = vec![noise_var; symbols.len()];
                Ok(decode_one(&symbols, &vars, m, code))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut best: Option<RefinedOutput> = None;
    let passes = cfg.passes.max(1);
    for pass in 0..passes {
        let f = reencode(&rows, cb)?;
        let g = match mod_update(y, &f, default_reg(&f)) {
            Ok(g) => g,
            Err(UraError::Singular(_)) => {
                log::debug!("refinement MOD update singular; keeping previous channels");
                match &best {
                    Some(b) => b.channels.clone(),
                    None => CMatrix::zeros(y.nrows(), rows.len()),
                }
            }
            Err(e) => return Err(e),
        };
        let residual = (y - &g * &f).norm();
        let out = RefinedOutput {
            channels: g,
            rows,
            residual,
            passes: pass + 1,
        };
        let total = out.total_parity_errors();
        let improved = best.as_ref().is_none_or(|b| total <= b.total_parity_errors());
        let done = total <= cfg.max_total_parity_errors || pass + 1 == passes;
        let g_next = out.channels.clone();
        if improved {
            best = Some(out);
        }
        if done {
            break;
        }
        let idx: Vec<usize> = (0..det.matches.len()).collect();
        rows = decode_refit(y, &g_next, &idx, &det.matches, cb, code, noise_var);
    }
    Ok(best.expect("at least one pass"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverConfig {
    pub pattern_threshold: PatternThreshold,
    /// Mask a codeword once claimed during detection.
    pub zero_column: bool,
    /// Run collision resolution when a codeword is claimed more than `m_rep` times.
    pub collision_resolution: bool,
    /// Candidate codewords tried per contested row.
    pub collision_candidates: usize,
    pub refine: RefineConfig,
    /// Rounds of cancelling cleanly decoded users and re-detecting the rest
    /// from what remains.
    pub cancellation_rounds: usize,
    /// Largest row misfit still counted as a clean decode.
    pub misfit_limit: f64,
    pub ka_estimator: KaEstimatorConfig,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            pattern_threshold: PatternThreshold::default(),
            zero_column: true,
            collision_resolution: false,
            collision_candidates: 8,
            refine: RefineConfig::default(),
            cancellation_rounds: 0,
            misfit_limit: 0.5,
            ka_estimator: KaEstimatorConfig::default(),
        }
    }
}

impl ReceiverConfig {
    pub fn validate(&self) -> Result<()> {
        match self.pattern_threshold {
            PatternThreshold::Absolute(t) | PatternThreshold::RowRms(t) if !(t >= 0.0) => {
                return Err(UraError::Config(format!(
                    "pattern threshold must be non-negative, got {t}"
                )))
            }
            _ => {}
        }
        if self.refine.passes == 0 {
            return Err(UraError::Config("refinement needs at least one pass".into()));
        }
        self.ka_estimator.validate()
    }
}

/// Per-trial inputs the receiver is allowed to know.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiveContext {
    /// Active count if known.
    pub ka: Option<usize>,
    pub ktot: usize,
    pub noise_var: f64,
    pub m_rep: usize,
    /// Decomposition settings; `dict_size` is overridden by the active count.
    pub dl: DlConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub rows: Vec<DecodedRow>,
    pub channels: CMatrix,
    /// Number of detected messages after trimming.
    pub k_est: usize,
    /// Energy-based upper bound, when the active count was unknown.
    pub k_upper: Option<usize>,
    pub dl_residual_history: Vec<f64>,
    pub dl_residual: f64,
    pub refine_residual: f64,
    pub refine_passes: usize,
    pub collisions_changed: usize,
    pub skipped_mod_updates: usize,
}

impl TrialResult {
    pub fn codewords(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.codeword).collect()
    }

    fn empty(y: &CMatrix, k_upper: Option<usize>) -> Self {
        TrialResult {
            rows: Vec::new(),
            channels: CMatrix::zeros(y.nrows(), 0),
            k_est: 0,
            k_upper,
            dl_residual_history: Vec::new(),
            dl_residual: y.norm(),
            refine_residual: y.norm(),
            refine_passes: 0,
            collisions_changed: 0,
            skipped_mod_updates: 0,
        }
    }
}

/// Number of atoms the decomposition should learn.
pub fn dictionary_size(
    y: &CMatrix,
    cb: &Codebook,
    cfg: &ReceiverConfig,
    ctx: &ReceiveContext,
) -> (usize, Option<usize>) {
    match ctx.ka {
        Some(ka) => (ka, None),
        None => {
            let k = estimate_ka_upper(y, cfg.ka_estimator.rho_min, cb.weight(), ctx.noise_var, ctx.ktot);
            (k, Some(k))
        }
    }
}

/// Full pipeline from the received block to decoded messages.
pub fn receive<R: Rng + ?Sized>(
    y: &CMatrix,
    cb: &Codebook,
    code: &LdpcCode,
    cfg: &ReceiverConfig,
    ctx: &ReceiveContext,
    rng: &mut R,
) -> Result<TrialResult> {
    cfg.validate()?;
    let (k, k_upper) = dictionary_size(y, cb, cfg, ctx);
    if k == 0 {
        return Ok(TrialResult::empty(y, k_upper));
    }
    let mut dl = ctx.dl.clone();
    dl.dict_size = k;
    dl.atoms_per_column = dl.atoms_per_column.min(k);
    let decomposition = dl_decompose(y, &dl, rng)?;
    receive_from_decomposition(y, &decomposition, cb, code, cfg, ctx, k, k_upper)
}

fn clean_rows(rows: &[DecodedRow], limit: f64) -> usize {
    rows.iter().filter(|r| r.is_clean(limit)).count()
}

/// Subtracts the rows that decoded cleanly, learns directions for the users
/// left in the remainder, and refines old and new rows jointly.
///
/// With the active count known the row count is kept. Otherwise the search
/// also covers rows trimmed below the energy bound `k_upper`, and new rows
/// that do not decode cleanly are dropped. Returns `None` unless more rows
/// decode cleanly afterwards.
#[allow(clippy::too_many_arguments)]
fn cancel_and_redetect(
    y: &CMatrix,
    stage: &(CMatrix, CMatrix, DetectionResult),
    refined: &RefinedOutput,
    cb: &Codebook,
    code: &LdpcCode,
    cfg: &ReceiverConfig,
    ctx: &ReceiveContext,
    k_upper: Option<usize>,
) -> Result<Option<((CMatrix, CMatrix, DetectionResult), RefinedOutput)>> {
    let (dict, coeffs, det) = stage;
    let (ok, failed): (Vec<usize>, Vec<usize>) =
        (0..refined.rows.len()).partition(|&i| refined.rows[i].is_clean(cfg.misfit_limit));
    let spare = match (ctx.ka, k_upper) {
        (None, Some(k)) => k.saturating_sub(refined.rows.len()),
        _ => 0,
    };
    if failed.len() + spare == 0 {
        return Ok(None);
    }
    let ok_rows: Vec<DecodedRow> = ok.iter().map(|&i| refined.rows[i].clone()).collect();
    let g_ok = refined.channels.select_columns(&ok);
    let remainder = y - g_ok * reencode(&ok_rows, cb)?;
    let dirs = cluster_directions(&remainder, failed.len() + spare, ctx.dl.cluster_threshold)?;
    if dirs.is_empty() {
        return Ok(None);
    }
    let extra = CMatrix::from_columns(&dirs);
    let extra_x = sparse_code(&extra, &remainder, 1, ctx.dl.residual_tol)?.x;
    let omega = extract_pattern(&extra_x, cfg.pattern_threshold)?;
    let claimed: Vec<usize> = ok_rows.iter().map(|r| r.codeword).collect();
    let found = detect_excluding(&omega, cb, dirs.len(), cfg.zero_column, &claimed);

    let offset = dict.ncols();
    let mut matches: Vec<Match> = ok.iter().map(|&i| det.matches[i]).collect();
    matches.extend(found.matches.iter().map(|m| Match {
        row: m.row + offset,
        ..*m
    }));
    // keep the row count when fewer new users were found than rows failed
    let shortfall = failed.len().saturating_sub(found.matches.len());
    matches.extend(failed.iter().take(shortfall).map(|&i| det.matches[i]));
    let mut row_max = det.row_max.clone();
    row_max.extend(&found.row_max);
    let joint_det = DetectionResult { matches, row_max };

    let joint_dict = CMatrix::from_fn(y.nrows(), offset + extra.ncols(), |r, c| {
        if c < offset {
            dict[(r, c)]
        } else {
            extra[(r, c - offset)]
        }
    });
    let joint_x = CMatrix::from_fn(offset + extra.ncols(), y.ncols(), |r, c| {
        if r < offset {
            coeffs[(r, c)]
        } else {
            extra_x[(r - offset, c)]
        }
    });
    let joint = DecompositionResult {
        dictionary: joint_dict,
        coeffs: joint_x,
        residual_history: Vec::new(),
        skipped_updates: 0,
        replaced_atoms: 0,
    };
    let mut next = refine(y, &joint, &joint_det, cb, code, ctx.noise_var, &cfg.refine)?;
    let mut joint_det = joint_det;
    if ctx.ka.is_none() {
        let new = ok.len()..ok.len() + found.matches.len();
        let keep: Vec<usize> = (0..next.rows.len())
            .filter(|i| !new.contains(i) || next.rows[*i].is_clean(cfg.misfit_limit))
            .collect();
        if keep.len() < next.rows.len() {
            let rows: Vec<DecodedRow> = keep.iter().map(|&i| next.rows[i].clone()).collect();
            let channels = next.channels.select_columns(&keep);
            next.residual = (y - &channels * reencode(&rows, cb)?).norm();
            next.rows = rows;
            next.channels = channels;
            joint_det.matches = keep.iter().map(|&i| joint_det.matches[i]).collect();
        }
    }
    if clean_rows(&next.rows, cfg.misfit_limit) <= clean_rows(&refined.rows, cfg.misfit_limit) {
        return Ok(None);
    }
    Ok(Some(((joint.dictionary, joint.coeffs, joint_det), next)))
}

/// Pipeline after the decomposition: detection onwards.
#[allow(clippy::too_many_arguments)]
pub fn receive_from_decomposition(
    y: &CMatrix,
    decomposition: &DecompositionResult,
    cb: &Codebook,
    code: &LdpcCode,
    cfg: &ReceiverConfig,
    ctx: &ReceiveContext,
    k_target: usize,
    k_upper: Option<usize>,
) -> Result<TrialResult> {
    let x = &decomposition.coeffs;
    let omega = extract_pattern(x, cfg.pattern_threshold)?;
    let mut det = detect_active(&omega, cb, k_target, cfg.zero_column);
    if ctx.ka.is_none() {
        det = trim(x, &det, cb.weight(), &cfg.ka_estimator);
    }
    let mut collisions_changed = 0;
    if cfg.collision_resolution {
        let (d, changed) = resolve_collisions(
            &det,
            &omega,
            x,
            cb,
            code,
            ctx.m_rep,
            ctx.noise_var,
            cfg.collision_candidates,
        )?;
        det = d;
        collisions_changed = changed;
    }
    let mut refined = refine(y, decomposition, &det, cb, code, ctx.noise_var, &cfg.refine)?;
    let mut stage = (decomposition.dictionary.clone(), decomposition.coeffs.clone(), det);
    for _ in 0..cfg.cancellation_rounds {
        match cancel_and_redetect(y, &stage, &refined, cb, code, cfg, ctx, k_upper)? {
            Some((next_stage, next)) => {
                stage = next_stage;
                refined = next;
            }
            None => break,
        }
    }
    Ok(TrialResult {
        k_est: refined.rows.len(),
        rows: refined.rows,
        channels: refined.channels,
        k_upper,
        dl_residual_history: decomposition.residual_history.clone(),
        dl_residual: decomposition.residual(y),
        refine_residual: refined.residual,
        refine_passes: refined.passes,
        collisions_changed,
        skipped_mod_updates: decomposition.skipped_updates,
    })
}
