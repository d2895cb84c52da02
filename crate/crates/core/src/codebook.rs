//! Shared sparse common codebook.
//!
//! Each codeword is an exactly-weight-`S` binary vector of length `L`, stored
//! as the sorted list of its support positions. The dense `L x Ktot` matrix is
//! never materialized.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UraError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    len: usize,
    weight: usize,
    columns: Vec<Vec<usize>>,
    seed: Option<u64>,
}

/// Number of `k`-subsets of an `n`-set, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Draws `ktot` distinct uniform weight-`weight` supports of `[0, len)`.
pub fn generate_codebook<R: Rng + ?Sized>(len: usize, weight: usize, ktot: usize, rng: &mut R) -> Result<Codebook> {
    if weight == 0 || weight > len || ktot == 0 {
        return Err(UraError::Config(format!(
            "codebook needs 0 < S <= L and Ktot >= 1 (got L={len}, S={weight}, Ktot={ktot})"
        )));
    }
    let available = binomial(len, weight);
    if (ktot as u128) > available {
        return Err(UraError::InfeasibleCodebook {
            requested: ktot as u128,
            available,
        });
    }
    if weight as f64 / len as f64 > 0.1 {
        log::warn!("codebook sparsity ratio S/L = {weight}/{len} exceeds 0.1");
    }

    // Rejection sampling stalls when the request is a large share of all
    // supports; enumerate small spaces instead.
    let columns = if available <= (1 << 20) && 2 * ktot as u128 > available {
        let mut all = k_subsets(len, weight);
        all.shuffle(rng);
        all.truncate(ktot);
        all
    } else {
        let mut seen = HashSet::with_capacity(ktot);
        let mut columns = Vec::with_capacity(ktot);
        while columns.len() < ktot {
            let mut support = sample(rng, len, weight).into_vec();
            support.sort_unstable();
            if seen.insert(support.clone()) {
                columns.push(support);
            }
        }
        columns
    };

    Ok(Codebook {
        len,
        weight,
        columns,
        seed: None,
    })
}

impl Codebook {
    /// Builds a codebook from explicit supports, validating every column.
    pub fn from_columns(len: usize, weight: usize, columns: Vec<Vec<usize>>) -> Result<Self> {
        if weight == 0 || weight > len || columns.is_empty() {
            return Err(UraError::Config(format!(
                "invalid codebook dimensions L={len}, S={weight}, Ktot={}",
                columns.len()
            )));
        }
        let mut seen = HashSet::with_capacity(columns.len());
        let mut sorted = Vec::with_capacity(columns.len());
        for (i, col) in columns.into_iter().enumerate() {
            let mut col = col;
            col.sort_unstable();
            col.dedup();
            if col.len() != weight || col.iter().any(|&p| p >= len) {
                return Err(UraError::Config(format!(
                    "codeword {i} must hold exactly {weight} distinct positions in [0, {len})"
                )));
            }
            if !seen.insert(col.clone()) {
                return Err(UraError::Config(format!("codeword {i} duplicates an earlier column")));
            }
            sorted.push(col);
        }
        Ok(Codebook {
            len,
            weight,
            columns: sorted,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Frame length `L`.
    pub fn len(&self) -> usize {
        self.len
    }

    /// Symbols per frame `S`.
    pub fn weight(&self) -> usize {
        self.weight
    }

    /// Number of codewords `Ktot`.
    pub fn size(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Sparsity ratio `S / L`.
    pub fn sparsity(&self) -> f64 {
        self.weight as f64 / self.len as f64
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn support(&self, index: usize) -> &[usize] {
        &self.columns[index]
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    /// Dense 0/1 form of one codeword.
    pub fn dense(&self, index: usize) -> Vec<u8> {
        let mut v = vec![0u8; self.len];
        for &p in &self.columns[index] {
            v[p] = 1;
        }
        v
    }

    /// Inner product `c_a . c_b`, i.e. the size of the support overlap.
    pub fn overlap(&self, a: usize, b: usize) -> usize {
        let (x, y) = (&self.columns[a], &self.columns[b]);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn extraction_map(&self, index: usize) -> Result<ExtractionMap> {
        if index >= self.columns.len() {
            return Err(UraError::Dimension(format!(
                "codeword index {index} out of range for Ktot={}",
                self.columns.len()
            )));
        }
        Ok(ExtractionMap {
            codeword: index,
            positions: self.columns[index].clone(),
        })
    }

    pub fn to_file(&self) -> CodebookFile {
        CodebookFile {
            len: self.len,
            weight: self.weight,
            ktot: self.columns.len(),
            seed: self.seed,
            columns: self.columns.clone(),
        }
    }

    pub fn from_file(file: CodebookFile) -> Result<Self> {
        if file.ktot != file.columns.len() {
            return Err(UraError::Config(format!(
                "Ktot={} but {} columns supplied",
                file.ktot,
                file.columns.len()
            )));
        }
        let mut cb = Codebook::from_columns(file.len, file.weight, file.columns)?;
        cb.seed = file.seed;
        Ok(cb)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file()).expect("codebook serializes");
        std::fs::write(path, text).map_err(|e| UraError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UraError::io(path, e))?;
        let file: CodebookFile = serde_json::from_str(&text).map_err(|e| UraError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Codebook::from_file(file)
    }
}

/// JSON fixture layout `{L, S, Ktot, seed, columns}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookFile {
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(rename = "S")]
    pub weight: usize,
    #[serde(rename = "Ktot")]
    pub ktot: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    pub columns: Vec<Vec<usize>>,
}

/// Pattern-extraction map of one codeword: output coordinate `m` reads frame
/// position `positions[m]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionMap {
    pub codeword: usize,
    pub positions: Vec<usize>,
}

impl ExtractionMap {
    pub fn apply<T: Copy>(&self, row: &[T]) -> Result<Vec<T>> {
        if let Some(&last) = self.positions.last() {
            if last >= row.len() {
                return Err(UraError::Dimension(format!(
                    "row of length {} shorter than support position {last}",
                    row.len()
                )));
            }
        }
        Ok(self.positions.iter().map(|&p| row[p]).collect())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Mean overlap of two independent uniform weight-`S` supports of `[0, L)`.
pub fn cross_match_expectation(len: usize, weight: usize) -> f64 {
    (weight * weight) as f64 / len as f64
}

/// Codeword choice of the active users. `codewords[u]` is user `u`'s codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub codewords: Vec<usize>,
    pub collision_ratio: f64,
    pub max_repetition: usize,
}

impl Assignment {
    pub fn active(&self) -> usize {
        self.codewords.len()
    }

    /// Largest number of users sharing one codeword.
    pub fn max_multiplicity(&self) -> usize {
        let mut counts = std::collections::HashMap::new();
        for &c in &self.codewords {
            *counts.entry(c).or_insert(0usize) += 1;
        }
        counts.values().copied().max().unwrap_or(0)
    }

    /// Users whose codeword is shared with at least one other user.
    pub fn collided_users(&self) -> Vec<usize> {
        let mut counts = std::collections::HashMap::new();
        for &c in &self.codewords {
            *counts.entry(c).or_insert(0usize) += 1;
        }
        (0..self.codewords.len())
            .filter(|&u| counts[&self.codewords[u]] > 1)
            .collect()
    }
}

/// Assigns codewords to `ka` active users with a controlled collision ratio.
///
/// `round(cr * ka)` users are placed into shared groups of at most
/// `max_repetition` users each (a group needs at least two members); every
/// other user gets a distinct codeword.
pub fn assign_codewords<R: Rng + ?Sized>(
    cb: &Codebook,
    ka: usize,
    cr: f64,
    max_repetition: usize,
    rng: &mut R,
) -> Result<Assignment> {
    if !(0.0..=1.0).contains(&cr) || max_repetition == 0 {
        return Err(UraError::Config(format!(
            "collision ratio must lie in [0, 1] and m_rep >= 1 (got CR={cr}, m_rep={max_repetition})"
        )));
    }
    if ka > cb.size() {
        return Err(UraError::Config(format!(
            "Ka={ka} exceeds codebook size Ktot={}",
            cb.size()
        )));
    }
    let mut collided = (cr * ka as f64).round() as usize;
    if collided > 0 && max_repetition < 2 {
        return Err(UraError::Config(format!(
            "CR={cr} demands {collided} collided users but m_rep={max_repetition} forbids repetition"
        )));
    }
    let groups = collided.div_ceil(max_repetition.max(1));
    collided = collided.max(2 * groups);
    if collided > ka {
        return Err(UraError::Config(format!(
            "CR={cr} demands {collided} collided users out of Ka={ka}"
        )));
    }
    let distinct = groups + (ka - collided);
    let picks = sample(rng, cb.size(), distinct).into_vec();

    let mut codewords = Vec::with_capacity(ka);
    // Spread collided users over the groups as evenly as possible.
    for g in 0..groups {
        let members = collided / groups + usize::from(g < collided % groups);
        codewords.extend(std::iter::repeat_n(picks[g], members));
    }
    codewords.extend_from_slice(&picks[groups..]);
    codewords.shuffle(rng);

    Ok(Assignment {
        codewords,
        collision_ratio: cr,
        max_repetition,
    })
}

/// Independent uniform codeword picks, i.e. uncontrolled random access.
pub fn assign_uniform<R: Rng + ?Sized>(cb: &Codebook, ka: usize, rng: &mut R) -> Assignment {
    let codewords = (0..ka).map(|_| rng.random_range(0..cb.size())).collect();
    Assignment {
        codewords,
        collision_ratio: f64::NAN,
        max_repetition: ka,
    }
}
