//! Sparse dictionary learning: OMP sparse coding alternated with MOD updates.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UraError};
use crate::phy::{complex_gaussian, CMatrix};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// How the starting dictionary is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictInit {
    /// Unit-norm complex Gaussian columns.
    RandomGaussian,
    /// Distinct nonzero columns of the observation, normalized.
    DataColumns,
    /// Observation columns drawn one at a time with probability proportional
    /// to their energy left unexplained by the atoms already drawn.
    ResidualSeeding,
    /// Leading directions of groups of nearly collinear observation columns,
    /// largest group first; slots occupied by a single user form such groups.
    ColumnClusters,
}

/// What replaces an atom that no column uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadAtomPolicy {
    Keep,
    Rerandomize,
    /// The observation column with the largest residual.
    WorstColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlConfig {
    /// Nonzeros allowed per coefficient column.
    pub atoms_per_column: usize,
    /// Number of dictionary atoms.
    pub dict_size: usize,
    pub max_iters: usize,
    /// OMP stops once the residual norm drops to this value.
    pub residual_tol: f64,
    /// Alternation stops when the relative residual improvement falls below this.
    pub improvement_tol: f64,
    /// MOD ridge term; `None` uses `1e-8 * trace(X X^H) / K`.
    pub reg: Option<f64>,
    pub init: DictInit,
    /// Minimum `|cos|` between two columns to count as collinear for `ColumnClusters`.
    pub cluster_threshold: f64,
    pub dead_atoms: DeadAtomPolicy,
}

impl Default for DlConfig {
    fn default() -> Self {
        DlConfig {
            atoms_per_column: 1,
            dict_size: 1,
            max_iters: 30,
            residual_tol: 0.0,
            improvement_tol: 1e-4,
            reg: None,
            init: DictInit::RandomGaussian,
            cluster_threshold: 0.8,
            dead_atoms: DeadAtomPolicy::WorstColumn,
        }
    }
}

impl DlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms_per_column == 0 {
            return Err(UraError::Config("atom budget must be at least 1".into()));
        }
        if self.dict_size < self.atoms_per_column {
            return Err(UraError::Config(format!(
                "dictionary size {} is below the atom budget {}",
                self.dict_size, self.atoms_per_column
            )));
        }
        if !(self.residual_tol >= 0.0) || !(self.improvement_tol >= 0.0) {
            return Err(UraError::Config("tolerances must be non-negative".into()));
        }
        if let Some(r) = self.reg {
            if !(r >= 0.0) {
                return Err(UraError::Config("MOD regularization must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// `max(1, ceil(Ka * S / L))`.
pub fn atom_budget(ka: usize, weight: usize, len: usize) -> usize {
    if len == 0 {
        return 1;
    }
    (ka * weight).div_ceil(len).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    /// Selected atoms in selection order.
    pub support: Vec<usize>,
    pub coeffs: Vec<Complex64>,
    pub residual_norm: f64,
    /// Residual norm after each selection, starting with `||y||`.
    pub residual_trace: Vec<f64>,
    /// The last candidate made the least-squares system singular and was dropped.
    pub singular: bool,
}

fn column_norms(d: &CMatrix) -> Vec<f64> {
    d.column_iter().map(|c| c.norm()).collect()
}

/// Least squares of `y` on the columns `support` of `d`, via a fresh Cholesky
/// factorization of the Gram matrix.
fn ls_fit(d: &CMatrix, y: &[Complex64], support: &[usize]) -> Option<Vec<Complex64>> {
    let k = support.len();
    let m = d.nrows();
    let mut gram = CMatrix::zeros(k, k);
    let mut rhs = DVector::from_element(k, ZERO);
    for (a, &i) in support.iter().enumerate() {
        let ci = d.column(i);
        for (b, &j) in support.iter().enumerate().skip(a) {
            let cj = d.column(j);
            let v = ci.dotc(&cj);
            gram[(a, b)] = v;
            gram[(b, a)] = v.conj();
        }
        let mut s = ZERO;
        for r in 0..m {
            s += ci[r].conj() * y[r];
        }
        rhs[a] = s;
    }
    let scale = (0..k).map(|i| gram[(i, i)].re).fold(0.0, f64::max);
    let chol = Cholesky::new(gram)?;
    // reject numerically rank-deficient supports
    let l = chol.l_dirty();
    let min_pivot = (0..k).map(|i| l[(i, i)].re).fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > 1e-13 * scale) {
        return None;
    }
    Some(chol.solve(&rhs).iter().copied().collect())
}

fn residual(d: &CMatrix, y: &[Complex64], support: &[usize], coeffs: &[Complex64]) -> Vec<Complex64> {
    let mut r = y.to_vec();
    for (&k, &c) in support.iter().zip(coeffs) {
        for (ri, di) in r.iter_mut().zip(d.column(k).iter()) {
            *ri -= di * c;
        }
    }
    r
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Orthogonal matching pursuit with at most `m` atoms.
pub fn omp(d: &CMatrix, y: &[Complex64], m: usize, tol: f64) -> Result<OmpResult> {
    let norms = column_norms(d);
    omp_with_norms(d, &norms, y, m, tol)
}

fn omp_with_norms(d: &CMatrix, norms: &[f64], y: &[Complex64], m: usize, tol: f64) -> Result<OmpResult> {
    let (rows, cols) = d.shape();
    if y.len() != rows {
        return Err(UraError::Dimension(format!(
            "target has {} rows, dictionary {rows}",
            y.len()
        )));
    }
    if m > rows.min(cols) {
        return Err(UraError::Dimension(format!(
            "atom budget {m} exceeds min(M, K) = {}",
            rows.min(cols)
        )));
    }
    if norms.iter().any(|&n| n == 0.0) {
        return Err(UraError::Dimension("dictionary has a zero column".into()));
    }
    let mut support = Vec::with_capacity(m);
    let mut coeffs = Vec::new();
    let mut r = y.to_vec();
    let mut rnorm = norm(&r);
    let mut trace = vec![rnorm];
    let mut singular = false;
    let floor = 1e-13 * rnorm;
    while support.len() < m && rnorm > tol && rnorm > floor {
        let mut best = None;
        let mut best_score = 0.0;
        for k in 0..cols {
            if support.contains(&k) {
                continue;
            }
            let col = d.column(k);
            let mut s = ZERO;
            for i in 0..rows {
                s += col[i].conj() * r[i];
            }
            let score = s.norm() / norms[k];
            if score > best_score {
                best_score = score;
                best = Some(k);
            }
        }
        let Some(k) = best else { break };
        support.push(k);
        match ls_fit(d, y, &support) {
            Some(c) => {
                coeffs = c;
                r = residual(d, y, &support, &coeffs);
                rnorm = norm(&r);
                trace.push(rnorm);
            }
            None => {
                support.pop();
                singular = true;
                break;
            }
        }
    }
    Ok(OmpResult {
        support,
        coeffs,
        residual_norm: rnorm,
        residual_trace: trace,
        singular,
    })
}

/// Sparse coding outcome for a whole block.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub x: CMatrix,
    /// Columns whose OMP hit a singular system.
    pub singular_columns: usize,
}

/// Column-wise OMP of `y` on `d`; columns run in parallel, output is order-independent.
pub fn sparse_code(d: &CMatrix, y: &CMatrix, m: usize, tol: f64) -> Result<SparseCode> {
    if d.nrows() != y.nrows() {
        return Err(UraError::Dimension(format!(
            "dictionary has {} rows, observation {}",
            d.nrows(),
            y.nrows()
        )));
    }
    let norms = column_norms(d);
    let cols: Vec<OmpResult> = (0..y.ncols())
        .into_par_iter()
        .map(|l| {
            let col: Vec<Complex64> = y.column(l).iter().copied().collect();
            omp_with_norms(d, &norms, &col, m, tol)
        })
        .collect::<Result<_>>()?;
    let mut x = CMatrix::zeros(d.ncols(), y.ncols());
    let mut singular_columns = 0;
    for (l, res) in cols.iter().enumerate() {
        for (&k, &c) in res.support.iter().zip(&res.coeffs) {
            x[(k, l)] = c;
        }
        singular_columns += usize::from(res.singular);
    }
    Ok(SparseCode { x, singular_columns })
}

/// Default ridge term `1e-8 * trace(X X^H) / K`.
pub fn default_reg(x: &CMatrix) -> f64 {
    1e-8 * x.norm_squared() / x.nrows().max(1) as f64
}

/// `D = Y X^H (X X^H + reg I)^-1`.
pub fn mod_update(y: &CMatrix, x: &CMatrix, reg: f64) -> Result<CMatrix> {
    if y.ncols() != x.ncols() {
        return Err(UraError::Dimension(format!(
            "observation has {} columns, coefficients {}",
            y.ncols(),
            x.ncols()
        )));
    }
    let k = x.nrows();
    let mut a = x * x.adjoint();
    for i in 0..k {
        a[(i, i)] += Complex64::new(reg, 0.0);
    }
    let scale = (0..k).map(|i| a[(i, i)].re).fold(0.0, f64::max);
    let b = y * x.adjoint();
    let chol = Cholesky::new(a).ok_or_else(|| UraError::Singular("MOD normal equations".into()))?;
    let l = chol.l_dirty();
    let min_pivot = (0..k).map(|i| l[(i, i)].re).fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > 1e-14 * scale) {
        return Err(UraError::Singular("MOD normal equations".into()));
    }
    // A is Hermitian, so D^H = A^-1 B^H
    Ok(chol.solve(&b.adjoint()).adjoint())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    /// Learned dictionary, unit-norm atoms (`M x K`).
    pub dictionary: CMatrix,
    /// Coefficients (`K x L`), at most `m` nonzeros per column.
    pub coeffs: CMatrix,
    /// Frobenius residual after each alternation.
    pub residual_history: Vec<f64>,
    /// MOD steps skipped because the normal equations were singular.
    pub skipped_updates: usize,
    pub replaced_atoms: usize,
}

impl DecompositionResult {
    pub fn residual(&self, y: &CMatrix) -> f64 {
        (y - &self.dictionary * &self.coeffs).norm()
    }
}

fn initial_dictionary<R: Rng + ?Sized>(y: &CMatrix, cfg: &DlConfig, rng: &mut R) -> Result<CMatrix> {
    let (m, k) = (y.nrows(), cfg.dict_size);
    let mut d = CMatrix::from_fn(m, k, |_, _| complex_gaussian(rng, 1.0));
    if cfg.init == DictInit::DataColumns {
        let candidates: Vec<usize> = (0..y.ncols()).filter(|&l| y.column(l).norm() > 0.0).collect();
        let take = k.min(candidates.len());
        let picks = sample(rng, candidates.len(), take);
        for (j, p) in picks.iter().enumerate() {
            d.set_column(j, &y.column(candidates[p]));
        }
    }
    if cfg.init == DictInit::ResidualSeeding {
        let mut left: Vec<f64> = y.column_iter().map(|c| c.norm_squared()).collect();
        for j in 0..k {
            let total: f64 = left.iter().sum();
            if !(total > 0.0) {
                break;
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = left.len() - 1;
            for (l, &w) in left.iter().enumerate() {
                if u < w {
                    pick = l;
                    break;
                }
                u -= w;
            }
            let atom = y.column(pick) / Complex64::new(y.column(pick).norm(), 0.0);
            for (l, w) in left.iter_mut().enumerate() {
                let explained = atom.dotc(&y.column(l)).norm_sqr();
                *w = (y.column(l).norm_squared() - explained).max(0.0).min(*w);
            }
            d.set_column(j, &atom);
        }
    }
    if cfg.init == DictInit::ColumnClusters {
        let atoms = cluster_directions(y, k, cfg.cluster_threshold)?;
        for (j, a) in atoms.iter().enumerate() {
            d.set_column(j, a);
        }
    }
    normalize_atoms(&mut d, None);
    Ok(d)
}

/// Leading left singular vector of the selected columns, by power iteration from `v`.
fn dominant_direction(y: &CMatrix, cols: &[usize], members: &[usize], mut v: DVector<Complex64>) -> DVector<Complex64> {
    for _ in 0..20 {
        let mut next = DVector::from_element(y.nrows(), ZERO);
        for &j in members {
            let yj = y.column(cols[j]);
            next += yj * yj.dotc(&v);
        }
        let nn = next.norm();
        if nn == 0.0 {
            break;
        }
        v = next / Complex64::new(nn, 0.0);
    }
    v
}

/// Up to `k` unit atoms, each the dominant direction of a group of columns
/// whose pairwise `|cos|` with the group's seed is at least `threshold`.
pub fn cluster_directions(y: &CMatrix, k: usize, threshold: f64) -> Result<Vec<DVector<Complex64>>> {
    let cols: Vec<usize> = (0..y.ncols()).filter(|&l| y.column(l).norm() > 0.0).collect();
    let unit: Vec<DVector<Complex64>> = cols
        .iter()
        .map(|&l| y.column(l) / Complex64::new(y.column(l).norm(), 0.0))
        .collect();
    let n = cols.len();
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if unit[i].dotc(&unit[j]).norm() >= threshold {
                neighbours[i].push(j);
                neighbours[j].push(i);
            }
        }
    }
    let mut taken = vec![false; n];
    let mut atoms = Vec::with_capacity(k);
    while atoms.len() < k {
        let mut best: Option<(usize, usize)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let size = neighbours[i].iter().filter(|&&j| !taken[j]).count();
            if size > 0 && best.is_none_or(|(_, s)| size > s) {
                best = Some((i, size));
            }
        }
        let Some((seed, _)) = best else { break };
        let start: Vec<usize> = std::iter::once(seed)
            .chain(neighbours[seed].iter().copied().filter(|&j| !taken[j]))
            .collect();
        let mut members = cohesive(start, &neighbours);
        let mut v = unit[seed].clone();
        for _ in 0..4 {
            v = dominant_direction(y, &cols, &members, v);
            let near: Vec<usize> = (0..n)
                .filter(|&j| !taken[j] && unit[j].dotc(&v).norm() >= threshold)
                .collect();
            let next = cohesive(near, &neighbours);
            if next.is_empty() || next == members {
                break;
            }
            members = next;
        }
        for &j in &members {
            taken[j] = true;
        }
        if !is_mixture(&atoms, &v)? {
            atoms.push(v);
        }
    }
    Ok(atoms)
}

/// Drops the least connected member until each one neighbours more than half
/// of the others, so a column shared by two users cannot bridge their groups.
fn cohesive(mut members: Vec<usize>, neighbours: &[Vec<usize>]) -> Vec<usize> {
    members.sort_unstable();
    while members.len() > 2 {
        let degree = |i: usize| {
            neighbours[i]
                .iter()
                .filter(|j| members.binary_search(j).is_ok())
                .count()
        };
        let (pos, low) = members
            .iter()
            .enumerate()
            .map(|(p, &i)| (p, degree(i)))
            .min_by_key(|&(p, d)| (d, std::cmp::Reverse(p)))
            .expect("non-empty");
        if 2 * low > members.len() - 1 {
            break;
        }
        members.remove(pos);
    }
    members
}

/// Largest residual norm of a unit direction, fitted by two chosen atoms,
/// at which it is taken as a superposition of those atoms' users.
const MIXTURE_RESIDUAL: f64 = 0.5;

fn is_mixture(atoms: &[DVector<Complex64>], v: &DVector<Complex64>) -> Result<bool> {
    if atoms.is_empty() {
        return Ok(false);
    }
    let d = CMatrix::from_columns(atoms);
    let fit = omp(&d, v.as_slice(), atoms.len().min(2), 0.0)?;
    Ok(fit.residual_norm <= MIXTURE_RESIDUAL)
}

/// Scales atoms to unit norm, moving the gain onto the coefficient rows.
fn normalize_atoms(d: &mut CMatrix, mut x: Option<&mut CMatrix>) {
    for k in 0..d.ncols() {
        let n = d.column(k).norm();
        if n > 0.0 && n.is_finite() {
            d.column_mut(k).unscale_mut(n);
            if let Some(x) = x.as_deref_mut() {
                x.row_mut(k).scale_mut(n);
            }
        }
    }
}

/// Per-column least squares restricted to the current support of `x`.
fn refit_on_support(d: &CMatrix, y: &CMatrix, x: &CMatrix) -> CMatrix {
    let mut out = CMatrix::zeros(x.nrows(), x.ncols());
    for l in 0..x.ncols() {
        let support: Vec<usize> = (0..x.nrows()).filter(|&k| x[(k, l)] != ZERO).collect();
        if support.is_empty() {
            continue;
        }
        let col: Vec<Complex64> = y.column(l).iter().copied().collect();
        if let Some(c) = ls_fit(d, &col, &support) {
            for (&k, &v) in support.iter().zip(&c) {
                out[(k, l)] = v;
            }
        } else {
            for &k in &support {
                out[(k, l)] = x[(k, l)];
            }
        }
    }
    out
}

fn column_residual_sq(d: &CMatrix, y: &CMatrix, x: &CMatrix, l: usize) -> f64 {
    (y.column(l) - d * x.column(l)).norm_squared()
}

/// Alternates sparse coding and MOD from an initial dictionary.
///
/// Each sparse-coding pass keeps, column by column, the better of the fresh OMP
/// solution and a least-squares refit on the previous support, and a MOD
/// update is only accepted if it does not raise the residual.
pub fn dl_decompose<R: Rng + ?Sized>(y: &CMatrix, cfg: &DlConfig, rng: &mut R) -> Result<DecompositionResult> {
    cfg.validate()?;
    let (rows, _) = y.shape();
    let m = cfg.atoms_per_column.min(rows).min(cfg.dict_size);
    if m < cfg.atoms_per_column {
        log::warn!("atom budget {} capped at {m}", cfg.atoms_per_column);
    }
    let mut d = initial_dictionary(y, cfg, rng)?;
    let mut x = sparse_code(&d, y, m, cfg.residual_tol)?.x;
    let mut res = (y - &d * &x).norm();
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut replaced = 0;
    let y_norm = y.norm();
    if y_norm == 0.0 {
        history.push(0.0);
        return Ok(DecompositionResult {
            dictionary: d,
            coeffs: x,
            residual_history: history,
            skipped_updates: 0,
            replaced_atoms: 0,
        });
    }
    for _ in 0..cfg.max_iters {
        let prev = res;
        let reg = cfg.reg.unwrap_or_else(|| default_reg(&x));
        match mod_update(y, &x, reg) {
            Ok(mut nd) => {
                let mut nx = x.clone();
                normalize_atoms(&mut nd, Some(&mut nx));
                let nres = (y - &nd * &nx).norm();
                if nres <= res {
                    // atoms with no coefficients collapse to zero under the ridge; keep the old ones
                    for k in 0..nd.ncols() {
                        if nd.column(k).norm() > 0.0 {
                            d.set_column(k, &nd.column(k));
                        }
                    }
                    x = nx;
                }
            }
            Err(UraError::Singular(_)) => {
                log::debug!("MOD update skipped: singular normal equations");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
        replaced += replace_dead_atoms(&mut d, &x, y, cfg.dead_atoms, rng);
        let fresh = sparse_code(&d, y, m, cfg.residual_tol)?.x;
        let kept = refit_on_support(&d, y, &x);
        for l in 0..y.ncols() {
            if column_residual_sq(&d, y, &fresh, l) <= column_residual_sq(&d, y, &kept, l) {
                x.set_column(l, &fresh.column(l));
            } else {
                x.set_column(l, &kept.column(l));
            }
        }
        res = (y - &d * &x).norm();
        history.push(res);
        if prev - res < cfg.improvement_tol * y_norm.max(prev) || res == 0.0 {
            break;
        }
    }
    if history.is_empty() {
        history.push(res);
    }
    Ok(DecompositionResult {
        dictionary: d,
        coeffs: x,
        residual_history: history,
        skipped_updates: skipped,
        replaced_atoms: replaced,
    })
}

fn replace_dead_atoms<R: Rng + ?Sized>(
    d: &mut CMatrix,
    x: &CMatrix,
    y: &CMatrix,
    policy: DeadAtomPolicy,
    rng: &mut R,
) -> usize {
    if policy == DeadAtomPolicy::Keep {
        return 0;
    }
    let dead: Vec<usize> = (0..x.nrows())
        .filter(|&k| x.row(k).iter().all(|v| *v == ZERO))
        .collect();
    if dead.is_empty() {
        return 0;
    }
    let mut order: Vec<(usize, f64)> = Vec::new();
    if policy == DeadAtomPolicy::WorstColumn {
        order = (0..y.ncols()).map(|l| (l, column_residual_sq(d, y, x, l))).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    }
    for (i, &k) in dead.iter().enumerate() {
        match order.get(i) {
            Some(&(l, r)) if r > 0.0 => {
                let col = y.column(l) - &*d * x.column(l);
                let n = col.norm();
                d.set_column(k, &(col / Complex64::new(n, 0.0)));
            }
            _ => {
                let v = DVector::from_fn(d.nrows(), |_, _| complex_gaussian(rng, 1.0));
                let n = v.norm();
                d.set_column(k, &(v / Complex64::new(n, 0.0)));
            }
        }
    }
    dead.len()
}

/// Nonzeros per coefficient column.
pub fn column_sparsity(x: &CMatrix) -> Vec<usize> {
    x.column_iter()
        .map(|c| c.iter().filter(|v| **v != ZERO).count())
        .collect()
}

/// Dense matrix of i.i.d. `CN(0, 1)` entries.
pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    DMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn budget_examples() {
        assert_eq!(atom_budget(100, 40, 1600), 3);
        assert_eq!(atom_budget(100, 1600, 1600), 100);
        assert_eq!(atom_budget(1, 10, 400), 1);
        assert_eq!(atom_budget(20, 10, 400), 1);
    }

    #[test]
    fn omp_identity() {
        let d = CMatrix::identity(3, 3);
        let r = omp(&d, &[c(1.0), c(0.0), c(0.0)], 1, 0.0).unwrap();
        assert_eq!(r.support, vec![0]);
        assert!((r.coeffs[0] - c(1.0)).norm() < 1e-15);
        assert!(r.residual_norm < 1e-15);
    }

    #[test]
    fn omp_best_single_atom() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = CMatrix::from_row_slice(2, 3, &[c(1.0), c(0.0), c(h), c(0.0), c(1.0), c(h)]);
        let r = omp(&d, &[c(1.0), c(1.0)], 1, 0.0).unwrap();
        assert_eq!(r.support, vec![2]);
        assert!((r.coeffs[0] - c(std::f64::consts::SQRT_2)).norm() < 1e-12);
    }

    #[test]
    fn omp_rejects_oversized_budget_and_zero_columns() {
        let d = CMatrix::identity(3, 2);
        assert!(omp(&d, &[c(1.0); 3], 3, 0.0).is_err());
        let z = CMatrix::zeros(3, 2);
        assert!(omp(&z, &[c(1.0); 3], 1, 0.0).is_err());
    }

    #[test]
    fn omp_residual_is_monotone() {
        let mut r = rng(1);
        for _ in 0..50 {
            let d = random_matrix(10, 20, &mut r);
            let y: Vec<Complex64> = (0..10).map(|_| complex_gaussian(&mut r, 1.0)).collect();
            let res = omp(&d, &y, 8, 0.0).unwrap();
            for w in res.residual_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn omp_duplicate_atoms_flag_singular() {
        let mut d = CMatrix::zeros(3, 3);
        d[(0, 0)] = c(1.0);
        d[(0, 1)] = c(1.0);
        d[(1, 1)] = c(1e-9);
        d[(2, 2)] = c(1.0);
        let r = omp(&d, &[c(1.0), c(1e-9), c(0.5)], 3, 0.0).unwrap();
        assert!(r.support.len() <= 3);
        assert!(r.residual_norm < 1.0);
    }

    #[test]
    fn sparse_code_examples() {
        let mut r = rng(2);
        let d = random_matrix(16, 6, &mut r);
        let x = sparse_code(&d, &d, 1, 0.0).unwrap().x;
        for k in 0..6 {
            for j in 0..6 {
                if k == j {
                    assert!((x[(k, j)] - c(1.0)).norm() < 1e-10);
                } else {
                    assert_eq!(x[(k, j)], ZERO);
                }
            }
        }
        let zero = sparse_code(&d, &CMatrix::zeros(16, 5), 2, 0.0).unwrap().x;
        assert!(zero.iter().all(|v| *v == ZERO));
    }

    fn planted(m: usize, k: usize, l: usize, s: usize, r: &mut ChaCha8Rng) -> (CMatrix, CMatrix) {
        let g = random_matrix(m, k, r);
        let mut x = CMatrix::zeros(k, l);
        for col in 0..l {
            for idx in sample(r, k, s) {
                x[(idx, col)] = complex_gaussian(r, 1.0);
            }
        }
        (g, x)
    }

    #[test]
    fn sparse_code_planted_reconstruction() {
        let mut r = rng(3);
        let (g, x) = planted(32, 10, 100, 2, &mut r);
        let y = &g * &x;
        let xt = sparse_code(&g, &y, 2, 0.0).unwrap().x;
        let rel = (&y - &g * &xt).norm() / y.norm();
        assert!(rel < 1e-6, "{rel}");
        assert!(column_sparsity(&xt).iter().all(|&n| n <= 2));
    }

    #[test]
    fn mod_examples() {
        let mut r = rng(4);
        let y = random_matrix(5, 4, &mut r);
        let d = mod_update(&y, &CMatrix::identity(4, 4), 0.0).unwrap();
        assert!((&d - &y).norm() < 1e-12);

        let (g, x) = planted(8, 4, 30, 3, &mut r);
        let y = &g * &x;
        let d = mod_update(&y, &x, 0.0).unwrap();
        assert!((&d - &g).norm() < 1e-9);

        let x0 = CMatrix::zeros(3, 10);
        assert!(mod_update(&random_matrix(4, 10, &mut r), &x0, 0.0).is_err());
        // ridge keeps the solve defined and zeroes unused atoms
        let d = mod_update(&random_matrix(4, 10, &mut r), &x0, 1e-6).unwrap();
        assert!(d.norm() == 0.0);
    }

    #[test]
    fn decompose_planted_noiseless() {
        let mut r = rng(5);
        let (g, x) = planted(32, 8, 200, 2, &mut r);
        let y = &g * &x;
        let cfg = DlConfig {
            atoms_per_column: 2,
            dict_size: 8,
            max_iters: 200,
            improvement_tol: 0.0,
            init: DictInit::DataColumns,
            ..DlConfig::default()
        };
        let res = dl_decompose(&y, &cfg, &mut rng(6)).unwrap();
        let rel = res.residual(&y) / y.norm();
        assert!(rel < 1e-3, "{rel} {:?}", res.residual_history);
        for w in res.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(column_sparsity(&res.coeffs).iter().all(|&n| n <= 2));
    }

    #[test]
    fn decompose_zero_block() {
        let y = CMatrix::zeros(6, 20);
        let cfg = DlConfig {
            atoms_per_column: 1,
            dict_size: 3,
            ..DlConfig::default()
        };
        let res = dl_decompose(&y, &cfg, &mut rng(7)).unwrap();
        assert!(res.coeffs.iter().all(|v| *v == ZERO));
        assert_eq!(res.residual_history, vec![0.0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DlConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.atoms_per_column = 0;
        assert!(cfg.validate().is_err());
        cfg.atoms_per_column = 3;
        cfg.dict_size = 2;
        assert!(cfg.validate().is_err());
    }
}
