//! Modulation, sparse spreading and the MIMO superposition channel.

use std::f64::consts::FRAC_1_SQRT_2;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codebook::{Assignment, Codebook};
use crate::error::{Result, UraError};
use crate::fec::{LdpcCode, DEFAULT_LLR_CLAMP};

pub type CMatrix = DMatrix<Complex64>;

/// Gray QPSK: bit pair `(b0, b1)` maps to `((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)`.
pub fn qpsk_modulate(bits: &[u8]) -> Result<Vec<Complex64>> {
    if bits.len() % 2 != 0 {
        return Err(UraError::Dimension(format!(
            "QPSK needs an even number of bits, got {}",
            bits.len()
        )));
    }
    Ok(bits
        .chunks_exact(2)
        .map(|p| {
            let re = 1.0 - 2.0 * f64::from(p[0] & 1);
            let im = 1.0 - 2.0 * f64::from(p[1] & 1);
            Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
        })
        .collect())
}

/// Exact per-bit LLRs of Gray QPSK observed as `gain * s + n`, `n ~ CN(0, noise_var)`.
///
/// For `b0` the LLR is `2 sqrt(2) |gain|^2 Re(y / gain) / noise_var`, and the
/// same with `Im` for `b1`. Positive favours bit 0. Clamped to +-30.
pub fn qpsk_demod_llr(symbols: &[Complex64], noise_var: f64, gain: Complex64) -> Result<Vec<f64>> {
    if gain.norm() == 0.0 || !gain.norm().is_finite() {
        return Err(UraError::UndefinedGain("demodulation gain is zero".into()));
    }
    if !(noise_var > 0.0) {
        return Err(UraError::Config(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let scale = 2.0 * std::f64::consts::SQRT_2 * gain.norm_sqr() / noise_var;
    let clamp = DEFAULT_LLR_CLAMP;
    let mut out = Vec::with_capacity(2 * symbols.len());
    for &y in symbols {
        let z = y / gain;
        out.push((scale * z.re).clamp(-clamp, clamp));
        out.push((scale * z.im).clamp(-clamp, clamp));
    }
    Ok(out)
}

/// One user's transmitted frame: `symbols[k]` sits at `support[k]`, silent
/// slots elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub len: usize,
    pub codeword: usize,
    pub support: Vec<usize>,
    pub symbols: Vec<Complex64>,
}

impl FrameRow {
    pub fn to_dense(&self) -> Vec<Complex64> {
        let mut row = vec![Complex64::new(0.0, 0.0); self.len];
        for (&p, &s) in self.support.iter().zip(&self.symbols) {
            row[p] = s;
        }
        row
    }

    pub fn nonzeros(&self) -> usize {
        self.symbols.iter().filter(|s| s.norm() != 0.0).count()
    }
}

/// Places the `k`-th symbol on the `k`-th support position of the codeword.
pub fn spread(symbols: &[Complex64], cb: &Codebook, codeword: usize) -> Result<FrameRow> {
    if codeword >= cb.size() {
        return Err(UraError::Dimension(format!("codeword {codeword} out of range")));
    }
    if symbols.len() != cb.weight() {
        return Err(UraError::Dimension(format!(
            "{} symbols for a weight-{} codeword",
            symbols.len(),
            cb.weight()
        )));
    }
    Ok(FrameRow {
        len: cb.len(),
        codeword,
        support: cb.support(codeword).to_vec(),
        symbols: symbols.to_vec(),
    })
}

/// The transmit map `f`: LDPC encode, QPSK modulate, spread.
pub fn encode_user(bits: &[u8], code: &LdpcCode, cb: &Codebook, codeword: usize) -> Result<FrameRow> {
    if code.code_len() != 2 * cb.weight() {
        return Err(UraError::Config(format!(
            "code length {} does not fill S={} QPSK symbols",
            code.code_len(),
            cb.weight()
        )));
    }
    let coded = code.encode(bits)?;
    let symbols = qpsk_modulate(&coded)?;
    spread(&symbols, cb, codeword)
}

/// Circularly-symmetric complex Gaussian sample with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Ground truth of one trial.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Device ids of the active users, drawn from `[0, Ktot)`.
    pub active: Vec<usize>,
    /// `B`-bit message per active user.
    pub messages: Vec<Vec<u8>>,
    /// Codeword index per active user.
    pub codewords: Vec<usize>,
    /// Unit-covariance Rayleigh channels, one column per active user.
    pub fading: CMatrix,
    /// Received power per symbol of each user.
    pub powers: Vec<f64>,
    pub noise_var: f64,
}

impl Scene {
    /// Draws messages and device ids from `msg_rng`, fading from `chan_rng`.
    pub fn generate<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        antennas: usize,
        info_len: usize,
        assignment: &Assignment,
        ktot: usize,
        powers: Vec<f64>,
        noise_var: f64,
        msg_rng: &mut R1,
        chan_rng: &mut R2,
    ) -> Result<Scene> {
        let ka = assignment.active();
        if powers.len() != ka {
            return Err(UraError::Dimension(format!("{} powers for {ka} users", powers.len())));
        }
        if ka > ktot {
            return Err(UraError::Config(format!("Ka={ka} exceeds Ktot={ktot}")));
        }
        let mut active = sample(msg_rng, ktot, ka).into_vec();
        active.sort_unstable();
        let messages = (0..ka)
            .map(|_| (0..info_len).map(|_| msg_rng.random_range(0..2u8)).collect())
            .collect();
        let fading = CMatrix::from_fn(antennas, ka, |_, _| complex_gaussian(chan_rng, 1.0));
        Ok(Scene {
            active,
            messages,
            codewords: assignment.codewords.clone(),
            fading,
            powers,
            noise_var,
        })
    }

    pub fn antennas(&self) -> usize {
        self.fading.nrows()
    }

    pub fn active_count(&self) -> usize {
        self.codewords.len()
    }

    /// Effective channel matrix `G = [sqrt(rho_u) h_u]`.
    pub fn channel_matrix(&self) -> CMatrix {
        let mut g = self.fading.clone();
        for (u, &p) in self.powers.iter().enumerate() {
            g.column_mut(u).scale_mut(p.sqrt());
        }
        g
    }

    /// Average received power per symbol.
    pub fn rho_bar(&self) -> f64 {
        if self.powers.is_empty() {
            return 0.0;
        }
        self.powers.iter().sum::<f64>() / self.powers.len() as f64
    }

    /// Smallest received power per symbol.
    pub fn rho_min(&self) -> f64 {
        self.powers.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Transmitted rows `f(x_u)` of every active user.
    pub fn frame_rows(&self, code: &LdpcCode, cb: &Codebook) -> Result<Vec<FrameRow>> {
        self.messages
            .iter()
            .zip(&self.codewords)
            .map(|(bits, &c)| encode_user(bits, code, cb, c))
            .collect()
    }
}

/// Received block `Y` (`M x L`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedBlock {
    pub y: CMatrix,
    pub seed: Option<u64>,
}

impl ReceivedBlock {
    /// Row-major, interleaved re/im, little-endian `f64`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.y.len() * 16);
        for r in 0..self.y.nrows() {
            for c in 0..self.y.ncols() {
                let v = self.y[(r, c)];
                buf.extend_from_slice(&v.re.to_le_bytes());
                buf.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| UraError::io(path, e))?;
        f.write_all(&buf).map_err(|e| UraError::io(path, e))
    }

    pub fn read_binary(path: &Path, rows: usize, cols: usize) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| UraError::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| UraError::io(path, e))?;
        if buf.len() != rows * cols * 16 {
            return Err(UraError::Dimension(format!(
                "{} bytes cannot hold a {rows}x{cols} complex block",
                buf.len()
            )));
        }
        let word = |i: usize| f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().unwrap());
        let y = CMatrix::from_fn(rows, cols, |r, c| {
            let k = 2 * (r * cols + c);
            Complex64::new(word(k), word(k + 1))
        });
        Ok(ReceivedBlock { y, seed: None })
    }
}

/// `Y = sum_u sqrt(rho_u) h_u f(x_u) + N`, `N` i.i.d. `CN(0, noise_var)`.
pub fn channel_apply<R: Rng + ?Sized>(scene: &Scene, rows: &[FrameRow], rng: &mut R) -> Result<ReceivedBlock> {
    if rows.len() != scene.active_count() {
        return Err(UraError::Dimension(format!(
            "{} frame rows for {} active users",
            rows.len(),
            scene.active_count()
        )));
    }
    let len = rows.first().map(|r| r.len);
    if rows.iter().any(|r| Some(r.len) != len) {
        return Err(UraError::Dimension("frame rows differ in length".into()));
    }
    let len = len.ok_or_else(|| UraError::Dimension("frame length unknown without users".into()))?;
    let mut y = noise_block(scene.antennas(), len, scene.noise_var, rng);
    superpose(&mut y, &scene.channel_matrix(), rows);
    Ok(ReceivedBlock { y, seed: None })
}

/// Noise-only block for an empty active set.
pub fn noise_block<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMatrix {
    if var == 0.0 {
        return CMatrix::zeros(rows, cols);
    }
    // row-major draw order keeps the stream independent of storage layout
    let mut n = CMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            n[(r, c)] = complex_gaussian(rng, var);
        }
    }
    n
}

/// Adds `g_u * row_u` for every user onto `y`.
pub fn superpose(y: &mut CMatrix, g: &CMatrix, rows: &[FrameRow]) {
    for (u, row) in rows.iter().enumerate() {
        let col = g.column(u);
        for (&p, &s) in row.support.iter().zip(&row.symbols) {
            let mut target = y.column_mut(p);
            target.axpy(s, &col, Complex64::new(1.0, 0.0));
        }
    }
}

/// Energy per bit over noise density, `rho_bar S / (2 L sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EbN0 {
    pub linear: f64,
    pub db: f64,
}

pub fn eb_n0(rho_bar: f64, weight: usize, len: usize, noise_var: f64) -> EbN0 {
    let linear = rho_bar * weight as f64 / (2.0 * len as f64 * noise_var);
    EbN0 {
        linear,
        db: 10.0 * linear.log10(),
    }
}

/// Inverse of [`eb_n0`]: the per-symbol power reaching a target `Eb/n0` (linear).
pub fn rho_for_eb_n0(ebn0_linear: f64, weight: usize, len: usize, noise_var: f64) -> f64 {
    ebn0_linear * 2.0 * len as f64 * noise_var / weight as f64
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
