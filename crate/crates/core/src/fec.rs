//! LDPC code: parity-check construction, systematic encoding and
//! sum-product belief-propagation decoding.
//!
//! LLR sign convention, shared with the modulator: a positive LLR favours
//! bit 0.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, UraError};
use crate::gf2::{BitVec, XorBasis};

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_LLR_CLAMP: f64 = 30.0;

const COLUMN_WEIGHT: usize = 3;
const CONSTRUCTION_ATTEMPTS: usize = 64;

#[derive(Debug, Clone)]
pub struct LdpcCode {
    info_len: usize,
    code_len: usize,
    /// Variable indices of each parity check (row of H).
    checks: Vec<Vec<usize>>,
    /// Check indices of each variable (column of H).
    vars: Vec<Vec<usize>>,
    /// Parity bit `i` equals `parity_rows[i] . message` over GF(2).
    parity_rows: Vec<BitVec>,
    rotation_unique: bool,
    pub max_iters: usize,
    pub llr_clamp: f64,
}

/// Output of [`LdpcCode::decode_bp`].
#[derive(Debug, Clone, PartialEq)]
pub struct BpDecode {
    /// Hard-decided information bits.
    pub bits: Vec<u8>,
    /// Hard-decided full codeword.
    pub codeword: Vec<u8>,
    /// Checks that are unsatisfied or touch an erased (zero-posterior) bit.
    pub parity_errors: usize,
    pub converged: bool,
    pub iterations: usize,
}

/// Builds a rate-`rate` code carrying `info_len` message bits.
///
/// Column weight 3 with near-regular row weights (at least one row of odd
/// weight, so the all-ones word is never a codeword). Short cycles are
/// removed by degree-preserving edge swaps as far as the dimensions allow.
/// Among full-rank draws the first whose QPSK rotations by j, -1 and -j never
/// map a codeword onto another codeword is kept; otherwise the first
/// full-rank draw is used.
pub fn make_ldpc<R: Rng + ?Sized>(info_len: usize, rate: f64, rng: &mut R) -> Result<LdpcCode> {
    if info_len == 0 || info_len % 2 != 0 {
        return Err(UraError::Config(format!("B must be even and positive, got {info_len}")));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(UraError::Config(format!("code rate must lie in (0, 1), got {rate}")));
    }
    let parity = parity_len(info_len, rate)?;
    let n = info_len + parity;
    let dv = COLUMN_WEIGHT.min(parity);
    let degrees = row_degrees(n, parity, dv)?;

    let mut fallback = None;
    for _ in 0..CONSTRUCTION_ATTEMPTS {
        let Some(mut cols) = draw_edges(n, &degrees, dv, rng) else {
            continue;
        };
        remove_short_cycles(&mut cols, parity, rng);
        let mut checks = vec![Vec::new(); parity];
        for (v, cs) in cols.iter().enumerate() {
            for &c in cs {
                checks[c].push(v);
            }
        }
        let Ok(code) = LdpcCode::from_checks(n, checks) else {
            continue;
        };
        if code.info_len != info_len {
            continue;
        }
        if code.rotation_unique {
            return Ok(code);
        }
        fallback.get_or_insert(code);
    }
    fallback.ok_or_else(|| {
        UraError::Construction(format!(
            "no full-rank parity-check matrix for B={info_len}, p={parity} after {CONSTRUCTION_ATTEMPTS} draws"
        ))
    })
}

fn parity_len(info_len: usize, rate: f64) -> Result<usize> {
    let exact = info_len as f64 * (1.0 - rate) / rate;
    let p = exact.round();
    if (exact - p).abs() > 1e-9 || p < 1.0 {
        return Err(UraError::Config(format!(
            "B={info_len} at rate {rate} gives non-integer parity length {exact}"
        )));
    }
    Ok(p as usize)
}

fn row_degrees(n: usize, rows: usize, dv: usize) -> Result<Vec<usize>> {
    let edges = n * dv;
    let base = edges / rows;
    let rem = edges % rows;
    let mut deg: Vec<usize> = (0..rows).map(|r| base + usize::from(r < rem)).collect();
    if deg.iter().all(|d| d % 2 == 0) && rows >= 2 && deg[0] >= 2 {
        deg[0] -= 1;
        deg[1] += 1;
    }
    if deg.iter().any(|&d| d > n || d == 0) {
        return Err(UraError::Config(format!(
            "cannot place {edges} edges over {rows} checks of a length-{n} code"
        )));
    }
    Ok(deg)
}

/// Random socket matching without multi-edges. Returns check lists per column.
fn draw_edges<R: Rng + ?Sized>(n: usize, degrees: &[usize], dv: usize, rng: &mut R) -> Option<Vec<Vec<usize>>> {
    let mut sockets: Vec<usize> = degrees
        .iter()
        .enumerate()
        .flat_map(|(c, &d)| std::iter::repeat_n(c, d))
        .collect();
    sockets.shuffle(rng);
    let total = sockets.len();
    // repair duplicate checks within a column by swapping sockets
    for _ in 0..50 * total {
        let mut bad = None;
        'scan: for v in 0..n {
            let s = &sockets[v * dv..(v + 1) * dv];
            for i in 0..dv {
                for j in i + 1..dv {
                    if s[i] == s[j] {
                        bad = Some(v * dv + j);
                        break 'scan;
                    }
                }
            }
        }
        let Some(pos) = bad else {
            return Some(sockets.chunks(dv).map(|c| c.to_vec()).collect());
        };
        let other = rng.random_range(0..total);
        sockets.swap(pos, other);
    }
    None
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

fn cycle_load(cols: &[Vec<usize>], v: usize) -> usize {
    cols.iter()
        .enumerate()
        .filter(|&(u, _)| u != v)
        .map(|(_, c)| {
            let o = overlap(&cols[v], c);
            o * o.saturating_sub(1) / 2
        })
        .sum()
}

/// Degree-preserving edge swaps that never increase the 4-cycle count.
fn remove_short_cycles<R: Rng + ?Sized>(cols: &mut [Vec<usize>], _rows: usize, rng: &mut R) {
    let n = cols.len();
    if n < 2 {
        return;
    }
    let dv = cols[0].len();
    let attempts = 20 * n * dv;
    for _ in 0..attempts {
        // pick a column that sits on a 4-cycle
        let start = rng.random_range(0..n);
        let Some(a) = (0..n).map(|i| (start + i) % n).find(|&v| cycle_load(cols, v) > 0) else {
            return;
        };
        let b = rng.random_range(0..n);
        if b == a {
            continue;
        }
        let ia = rng.random_range(0..dv);
        let ib = rng.random_range(0..dv);
        let (ca, cb) = (cols[a][ia], cols[b][ib]);
        if ca == cb || cols[a].contains(&cb) || cols[b].contains(&ca) {
            continue;
        }
        let before = cycle_load(cols, a) + cycle_load(cols, b);
        cols[a][ia] = cb;
        cols[b][ib] = ca;
        let after = cycle_load(cols, a) + cycle_load(cols, b);
        if after > before {
            cols[a][ia] = ca;
            cols[b][ib] = cb;
        }
    }
}

impl LdpcCode {
    /// Builds a code from the check lists of a parity-check matrix with
    /// `code_len` columns.
    ///
    /// Variables are reordered so that the code is systematic: the first
    /// `B = code_len - rank(H)` positions carry the message. Redundant rows are
    /// kept for parity counting.
    pub fn from_checks(code_len: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        let rows = checks.len();
        if rows == 0 {
            return Err(UraError::Construction("parity-check matrix has no rows".into()));
        }
        let mut dense: Vec<BitVec> = Vec::with_capacity(rows);
        for (r, vars) in checks.iter().enumerate() {
            let mut row = BitVec::zeros(code_len);
            for &v in vars {
                if v >= code_len {
                    return Err(UraError::Dimension(format!(
                        "check {r} references variable {v} beyond length {code_len}"
                    )));
                }
                row.flip(v);
            }
            dense.push(row);
        }

        // Reduced row echelon form, pivoting from the last column backwards so
        // that parity positions end up at the tail whenever possible.
        let mut ech = dense.clone();
        let mut pivots: Vec<usize> = Vec::new();
        let mut rank = 0;
        for col in (0..code_len).rev() {
            if rank == rows {
                break;
            }
            let Some(pr) = (rank..rows).find(|&r| ech[r].get(col)) else {
                continue;
            };
            ech.swap(rank, pr);
            let pivot_row = ech[rank].clone();
            for (r, row) in ech.iter_mut().enumerate() {
                if r != rank && row.get(col) {
                    row.xor_assign(&pivot_row);
                }
            }
            pivots.push(col);
            rank += 1;
        }
        let info_len = code_len - rank;
        if info_len == 0 {
            return Err(UraError::Construction(
                "parity-check matrix has full column rank".into(),
            ));
        }

        // New variable order: information columns ascending, then pivot
        // columns ascending.
        let mut is_pivot = vec![false; code_len];
        for &p in &pivots {
            is_pivot[p] = true;
        }
        let mut pivot_rows: Vec<(usize, usize)> = pivots.iter().enumerate().map(|(r, &c)| (c, r)).collect();
        pivot_rows.sort_unstable();
        let mut order: Vec<usize> = (0..code_len).filter(|&c| !is_pivot[c]).collect();
        order.extend(pivot_rows.iter().map(|&(c, _)| c));
        let mut position = vec![0usize; code_len];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }

        let parity_rows: Vec<BitVec> = pivot_rows
            .iter()
            .map(|&(_, r)| {
                let row = &ech[r];
                let mut a = BitVec::zeros(info_len);
                for (j, &old) in order[..info_len].iter().enumerate() {
                    if row.get(old) {
                        a.set(j, true);
                    }
                }
                a
            })
            .collect();

        let mut new_checks: Vec<Vec<usize>> = checks
            .iter()
            .map(|vs| {
                let mut row = BitVec::zeros(code_len);
                for &v in vs {
                    row.flip(position[v]);
                }
                (0..code_len).filter(|&i| row.get(i)).collect()
            })
            .collect();
        new_checks.retain(|c: &Vec<usize>| !c.is_empty());
        let mut vars = vec![Vec::new(); code_len];
        for (c, vs) in new_checks.iter().enumerate() {
            for &v in vs {
                vars[v].push(c);
            }
        }

        let mut code = LdpcCode {
            info_len,
            code_len,
            checks: new_checks,
            vars,
            parity_rows,
            rotation_unique: false,
            max_iters: DEFAULT_MAX_ITERS,
            llr_clamp: DEFAULT_LLR_CLAMP,
        };
        code.rotation_unique = code.code_len % 2 == 0 && code.check_rotation_uniqueness();
        Ok(code)
    }

    /// Loads H from a coordinate list: one `row col` pair per line, `#`
    /// comments and blank lines ignored, zero-based indices.
    pub fn load_sparse_h(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UraError::io(path, e))?;
        Self::parse_sparse_h(&text).map_err(|message| UraError::Parse {
            path: path.to_path_buf(),
            message,
        })?
    }

    fn parse_sparse_h(text: &str) -> std::result::Result<Result<Self>, String> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> std::result::Result<usize, String> {
                tok.ok_or_else(|| format!("line {}: expected `row col`", lineno + 1))?
                    .parse::<usize>()
                    .map_err(|e| format!("line {}: {e}", lineno + 1))
            };
            let r = parse(it.next())?;
            let c = parse(it.next())?;
            if it.next().is_some() {
                return Err(format!("line {}: trailing tokens", lineno + 1));
            }
            entries.push((r, c));
        }
        if entries.is_empty() {
            return Err("no entries".into());
        }
        let rows = entries.iter().map(|e| e.0).max().unwrap() + 1;
        let cols = entries.iter().map(|e| e.1).max().unwrap() + 1;
        let mut checks = vec![Vec::new(); rows];
        for (r, c) in entries {
            if !checks[r].contains(&c) {
                checks[r].push(c);
            }
        }
        Ok(LdpcCode::from_checks(cols, checks))
    }

    /// Writes H in the coordinate-list format read by [`Self::load_sparse_h`].
    pub fn save_sparse_h(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (r, vs) in self.checks.iter().enumerate() {
            for v in vs {
                out.push_str(&format!("{r} {v}\n"));
            }
        }
        std::fs::write(path, out).map_err(|e| UraError::io(path, e))
    }

    /// Message length `B`.
    pub fn info_len(&self) -> usize {
        self.info_len
    }

    /// Parity length `p = n - B`.
    pub fn parity_len(&self) -> usize {
        self.code_len - self.info_len
    }

    /// Codeword length `B + p`.
    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn rate(&self) -> f64 {
        self.info_len as f64 / self.code_len as f64
    }

    pub fn num_checks(&self) -> usize {
        self.checks.len()
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    /// Column weight of variable `v` in H.
    pub fn column_weight(&self, v: usize) -> usize {
        self.vars[v].len()
    }

    /// Whether no QPSK rotation by j, -1 or -j of a codeword is a codeword.
    pub fn rotation_unique(&self) -> bool {
        self.rotation_unique
    }

    /// Dense 0/1 parity-check matrix.
    pub fn parity_check_dense(&self) -> Vec<Vec<u8>> {
        self.checks
            .iter()
            .map(|vs| {
                let mut row = vec![0u8; self.code_len];
                for &v in vs {
                    row[v] = 1;
                }
                row
            })
            .collect()
    }

    /// Systematic encoding `[bits, parity]`.
    pub fn encode(&self, bits: &[u8]) -> Result<Vec<u8>> {
        if bits.len() != self.info_len {
            return Err(UraError::Dimension(format!(
                "message has {} bits, code expects {}",
                bits.len(),
                self.info_len
            )));
        }
        let msg = BitVec::from_bits(bits);
        let mut out = Vec::with_capacity(self.code_len);
        out.extend(bits.iter().map(|b| b & 1));
        out.extend(self.parity_rows.iter().map(|row| u8::from(row.dot(&msg))));
        Ok(out)
    }

    /// Number of rows of H with odd parity on `word`.
    pub fn parity_error_count(&self, word: &[u8]) -> Result<usize> {
        if word.len() != self.code_len {
            return Err(UraError::Dimension(format!(
                "word has {} bits, code length is {}",
                word.len(),
                self.code_len
            )));
        }
        Ok(self
            .checks
            .iter()
            .filter(|vs| vs.iter().fold(0u8, |acc, &v| acc ^ (word[v] & 1)) == 1)
            .count())
    }

    /// Sum-product decoding with the tanh rule, flooding schedule and early
    /// exit once every check is satisfied. Non-convergence is reported, not
    /// raised.
    pub fn decode_bp(&self, llrs: &[f64], max_iters: usize) -> Result<BpDecode> {
        if llrs.len() != self.code_len {
            return Err(UraError::Dimension(format!(
                "{} LLRs supplied, code length is {}",
                llrs.len(),
                self.code_len
            )));
        }
        let clamp = self.llr_clamp;
        let channel: Vec<f64> = llrs
            .iter()
            .map(|&l| if l.is_finite() { l.clamp(-clamp, clamp) } else { 0.0 })
            .collect();

        // Edge storage grouped by check.
        let mut offsets = Vec::with_capacity(self.checks.len() + 1);
        let mut edge_var = Vec::new();
        offsets.push(0);
        for vs in &self.checks {
            edge_var.extend_from_slice(vs);
            offsets.push(edge_var.len());
        }
        let mut to_check: Vec<f64> = edge_var.iter().map(|&v| channel[v]).collect();
        let mut to_var = vec![0.0; edge_var.len()];
        let mut posterior = channel.clone();
        let mut scratch = Vec::new();

        let mut iterations = 0;
        let mut result = self.hard_decision(&posterior);
        for it in 1..=max_iters.max(1) {
            iterations = it;
            for c in 0..self.checks.len() {
                let (lo, hi) = (offsets[c], offsets[c + 1]);
                scratch.clear();
                scratch.extend(to_check[lo..hi].iter().map(|&m| (0.5 * m).tanh()));
                // exclusive products via prefix/suffix sweeps
                let d = hi - lo;
                let mut prefix = 1.0;
                for k in 0..d {
                    to_var[lo + k] = prefix;
                    prefix *= scratch[k];
                }
                let mut suffix = 1.0;
                for k in (0..d).rev() {
                    let prod = (to_var[lo + k] * suffix).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                    to_var[lo + k] = (2.0 * prod.atanh()).clamp(-clamp, clamp);
                    suffix *= scratch[k];
                }
            }
            posterior.copy_from_slice(&channel);
            for (e, &v) in edge_var.iter().enumerate() {
                posterior[v] += to_var[e];
            }
            for (e, &v) in edge_var.iter().enumerate() {
                to_check[e] = (posterior[v] - to_var[e]).clamp(-clamp, clamp);
            }
            result = self.hard_decision(&posterior);
            if result.1 == 0 {
                break;
            }
        }
        let (codeword, parity_errors) = result;
        Ok(BpDecode {
            bits: codeword[..self.info_len].to_vec(),
            codeword,
            parity_errors,
            converged: parity_errors == 0,
            iterations,
        })
    }

    fn hard_decision(&self, posterior: &[f64]) -> (Vec<u8>, usize) {
        let word: Vec<u8> = posterior.iter().map(|&l| u8::from(l < 0.0)).collect();
        let erased: Vec<bool> = posterior.iter().map(|&l| l == 0.0).collect();
        let errors = self
            .checks
            .iter()
            .filter(|vs| vs.iter().any(|&v| erased[v]) || vs.iter().fold(0u8, |acc, &v| acc ^ word[v]) == 1)
            .count();
        (word, errors)
    }

    /// Syndrome of `word` as a packed vector.
    fn syndrome(&self, word: &BitVec) -> BitVec {
        let mut s = BitVec::zeros(self.checks.len());
        for (r, vs) in self.checks.iter().enumerate() {
            if vs.iter().filter(|&&v| word.get(v)).count() % 2 == 1 {
                s.set(r, true);
            }
        }
        s
    }

    fn check_rotation_uniqueness(&self) -> bool {
        let n = self.code_len;
        (1..4).all(|k| {
            // bit-level effect of multiplying every QPSK symbol by j^k,
            // seen by a decoder that assumes no rotation
            let (swap, offset_even, offset_odd) = match k {
                1 => (true, true, false),
                2 => (false, true, true),
                _ => (true, false, true),
            };
            let transform = |c: &BitVec, with_offset: bool| {
                let mut out = BitVec::zeros(n);
                for s in 0..n / 2 {
                    let (b0, b1) = (c.get(2 * s), c.get(2 * s + 1));
                    let (mut x0, mut x1) = if swap { (b1, b0) } else { (b0, b1) };
                    if with_offset {
                        x0 ^= offset_even;
                        x1 ^= offset_odd;
                    }
                    out.set(2 * s, x0);
                    out.set(2 * s + 1, x1);
                }
                out
            };
            let mut basis = XorBasis::new();
            for i in 0..self.info_len {
                let mut e = vec![0u8; self.info_len];
                e[i] = 1;
                let c = BitVec::from_bits(&self.encode(&e).expect("unit message"));
                basis.insert(&self.syndrome(&transform(&c, false)));
            }
            let target = self.syndrome(&transform(&BitVec::zeros(n), true));
            // a solution exists iff the offset syndrome is in the span
            !basis.contains(&target)
        })
    }
}
