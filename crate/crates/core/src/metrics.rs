//! Per-user error probabilities, symbol error rate and Monte Carlo aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UraError};

/// What one active user actually sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthEntry {
    pub codeword: usize,
    pub bits: Vec<u8>,
    /// Coded bits, two per QPSK symbol.
    pub coded: Vec<u8>,
}

/// One message the receiver reported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectedEntry {
    pub codeword: usize,
    pub bits: Vec<u8>,
    pub coded: Vec<u8>,
    pub parity_errors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub ka: usize,
    pub ka_known: bool,
    pub n_md: usize,
    pub n_fa: usize,
    /// Number of reported messages.
    pub detected: usize,
    pub symbol_errors: usize,
    pub symbols_compared: usize,
    /// Active users whose codeword was found.
    pub detection_successes: usize,
}

impl TrialMetrics {
    pub fn p_md(&self) -> f64 {
        if self.ka == 0 {
            0.0
        } else {
            self.n_md as f64 / self.ka as f64
        }
    }

    pub fn p_fa(&self) -> f64 {
        if self.detected == 0 {
            0.0
        } else {
            self.n_fa as f64 / self.detected as f64
        }
    }

    /// Common error probability, defined only when the active count is known.
    pub fn p_e(&self) -> Option<f64> {
        self.ka_known.then(|| self.p_md())
    }

    pub fn ser(&self) -> Option<f64> {
        (self.symbols_compared > 0).then(|| self.symbol_errors as f64 / self.symbols_compared as f64)
    }

    pub fn detection_ratio(&self) -> f64 {
        if self.ka == 0 {
            1.0
        } else {
            self.detection_successes as f64 / self.ka as f64
        }
    }

    /// `detected = n_fa + Ka - n_md`.
    pub fn identity_holds(&self) -> bool {
        self.detected + self.n_md == self.n_fa + self.ka
    }
}

/// `(p_md, p_fa, p_e)` from the counters.
pub fn pupe(n_md: usize, n_fa: usize, ka: usize, ka_known: bool) -> Result<(f64, f64, Option<f64>)> {
    if n_md > ka {
        return Err(UraError::Dimension(format!("{n_md} misses among {ka} users")));
    }
    let detected = n_fa + ka - n_md;
    if ka_known && n_fa != n_md {
        return Err(UraError::Dimension(format!(
            "known active count requires n_fa = n_md, got {n_fa} and {n_md}"
        )));
    }
    let m = TrialMetrics {
        ka,
        ka_known,
        n_md,
        n_fa,
        detected,
        ..TrialMetrics::default()
    };
    Ok((m.p_md(), m.p_fa(), m.p_e()))
}

/// Symbols (bit pairs) that differ between two coded words.
pub fn symbol_errors(truth: &[u8], decoded: &[u8]) -> usize {
    truth.chunks(2).zip(decoded.chunks(2)).filter(|(a, b)| a != b).count()
}

/// Symbol error rate over matched `(truth, decoded)` coded words; `None` when nothing is compared.
pub fn ser(pairs: &[(&[u8], &[u8])]) -> Option<f64> {
    let compared: usize = pairs.iter().map(|(t, _)| t.len() / 2).sum();
    let errors: usize = pairs.iter().map(|(t, d)| symbol_errors(t, d)).sum();
    (compared > 0).then(|| errors as f64 / compared as f64)
}

/// Scores one trial.
///
/// Users and reports are grouped by codeword. A user alone on its codeword
/// counts as found only if some report on that codeword carries its exact
/// message. Users sharing a codeword count as found up to the number of
/// reports on it. Every report not consumed by a found user is a false alarm.
/// Symbol errors are taken over users whose codeword was found; users sharing
/// a codeword enter only through reports that decoded without parity errors.
pub fn evaluate(truth: &[TruthEntry], detected: &[DetectedEntry], ka_known: bool) -> TrialMetrics {
    let mut codewords: Vec<usize> = truth.iter().map(|t| t.codeword).collect();
    codewords.sort_unstable();
    codewords.dedup();
    let mut found = 0;
    let mut detection_successes = 0;
    let mut symbol_errs = 0;
    let mut compared = 0;
    for &c in &codewords {
        let users: Vec<&TruthEntry> = truth.iter().filter(|t| t.codeword == c).collect();
        let reports: Vec<&DetectedEntry> = detected.iter().filter(|d| d.codeword == c).collect();
        if reports.is_empty() {
            continue;
        }
        detection_successes += users.len().min(reports.len());
        if users.len() == 1 {
            let u = users[0];
            let exact = reports.iter().position(|d| d.bits == u.bits);
            found += usize::from(exact.is_some());
            let r = reports[exact.unwrap_or_else(|| best_report(&reports, &u.coded))];
            symbol_errs += symbol_errors(&u.coded, &r.coded);
            compared += u.coded.len() / 2;
        } else {
            found += users.len().min(reports.len());
            let mut free: Vec<bool> = vec![true; reports.len()];
            for u in &users {
                let pick = (0..reports.len())
                    .filter(|&i| free[i])
                    .min_by_key(|&i| (symbol_errors(&u.coded, &reports[i].coded), i));
                let Some(i) = pick else { break };
                free[i] = false;
                if reports[i].parity_errors == 0 {
                    symbol_errs += symbol_errors(&u.coded, &reports[i].coded);
                    compared += u.coded.len() / 2;
                }
            }
        }
    }
    TrialMetrics {
        ka: truth.len(),
        ka_known,
        n_md: truth.len() - found,
        n_fa: detected.len() - found,
        detected: detected.len(),
        symbol_errors: symbol_errs,
        symbols_compared: compared,
        detection_successes,
    }
}

fn best_report(reports: &[&DetectedEntry], coded: &[u8]) -> usize {
    (0..reports.len())
        .min_by_key(|&i| (symbol_errors(coded, &reports[i].coded), i))
        .unwrap_or(0)
}

/// Mean and standard error of one rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Sample mean with the standard error `s / sqrt(n)`, `s` the unbiased deviation.
    pub fn from_samples(xs: &[f64]) -> Option<Estimate> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Estimate { mean, stderr })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub p_md: Estimate,
    pub p_fa: Estimate,
    pub p_e: Option<Estimate>,
    pub ser: Option<Estimate>,
    pub detection_ratio: Estimate,
    pub k_est_mean: f64,
}

/// Averages per-trial rates. SER averages over trials that compared any symbol.
pub fn aggregate(trials: &[TrialMetrics]) -> Result<Summary> {
    if trials.is_empty() {
        return Err(UraError::Config("cannot aggregate zero trials".into()));
    }
    let col = |f: &dyn Fn(&TrialMetrics) -> f64| -> Vec<f64> { trials.iter().map(f).collect() };
    let p_e: Vec<f64> = trials.iter().filter_map(|t| t.p_e()).collect();
    let ser: Vec<f64> = trials.iter().filter_map(|t| t.ser()).collect();
    Ok(Summary {
        trials: trials.len(),
        p_md: Estimate::from_samples(&col(&|t| t.p_md())).expect("non-empty"),
        p_fa: Estimate::from_samples(&col(&|t| t.p_fa())).expect("non-empty"),
        p_e: if p_e.len() == trials.len() {
            Estimate::from_samples(&p_e)
        } else {
            None
        },
        ser: Estimate::from_samples(&ser),
        detection_ratio: Estimate::from_samples(&col(&|t| t.detection_ratio())).expect("non-empty"),
        k_est_mean: trials.iter().map(|t| t.detected as f64).sum::<f64>() / trials.len() as f64,
    })
}
