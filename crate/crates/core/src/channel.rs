//! Discrete-time ISI channel with additive circular Gaussian noise.
//!
//! `y_k = Σ_{l=0}^{L} h_l c_{k-l} + w_k` for `k = 1..K+L`. The `L` symbols
//! before and after the information block are known boundary symbols.

use alloc::string::ToString;
use alloc::vec::Vec;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::modem::{sample_symbols, Constellation};

/// Names accepted by [`reference_channel`].
pub const REFERENCE_CHANNELS: [&str; 3] = ["proakis-a", "proakis-b", "proakis-c"];

/// Tabulated impulse responses of the three classic Proakis test channels.
pub fn reference_channel(name: &str) -> Result<Vec<Complex64>> {
    let taps: &[f64] = match name.to_ascii_lowercase().as_str() {
        "proakis-a" => &[0.04, -0.05, 0.07, -0.21, -0.5, 0.72, 0.36, 0.0, 0.21, 0.03, 0.07],
        "proakis-b" => &[0.407, 0.815, 0.407],
        "proakis-c" => &[0.227, 0.46, 0.688, 0.46, 0.227],
        _ => return Err(Error::UnknownChannel(name.to_string())),
    };
    Ok(taps.iter().map(|&t| Complex64::new(t, 0.0)).collect())
}

/// A static channel: taps `h` (memory `L = len - 1`) and total complex noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    taps: Vec<Complex64>,
    noise_var: f64,
}

impl ChannelModel {
    pub fn new(taps: Vec<Complex64>, noise_var: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidChannel("empty impulse response"));
        }
        if taps.iter().any(|t| !t.re.is_finite() || !t.im.is_finite()) {
            return Err(Error::InvalidChannel("non-finite tap"));
        }
        if energy(&taps) == 0.0 {
            return Err(Error::InvalidChannel("all-zero impulse response"));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::InvalidChannel("noise variance must be finite and non-negative"));
        }
        Ok(Self { taps, noise_var })
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.taps
    }

    pub fn memory(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        Self::new(self.taps.clone(), noise_var)
    }

    pub fn energy(&self) -> f64 {
        energy(&self.taps)
    }
}

/// ‖h‖².
pub fn energy(taps: &[Complex64]) -> f64 {
    taps.iter().map(|t| t.norm_sqr()).sum()
}

/// Noise variance for a given Eb/N0: `σ² = ‖h‖² / (m · 10^{ebno/10})` (unit symbol energy).
pub fn noise_sigma(ebno_db: f64, taps: &[Complex64], bits_per_symbol: usize) -> f64 {
    energy(taps) / (bits_per_symbol as f64 * math::pow(10.0, ebno_db / 10.0))
}

/// Dense row-major complex matrix; used for convolution matrices and reference products.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: alloc::vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c).conj());
            }
        }
        out
    }

    pub fn mul(&self, rhs: &CMatrix) -> Self {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for i in 0..self.cols {
                let a = self.get(r, i);
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for c in 0..rhs.cols {
                    out.data[r * rhs.cols + c] += a * rhs.get(i, c);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, v.len(), "vector length differs");
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// The (K+L) × (K+2L) banded Toeplitz matrix with `H[r][c] = h[r - c + L]`.
pub fn convolution_matrix(taps: &[Complex64], k: usize) -> CMatrix {
    let l = taps.len() - 1;
    let mut h = CMatrix::zeros(k + l, k + 2 * l);
    for r in 0..k + l {
        for (i, &t) in taps.iter().enumerate() {
            // r - c + L = i
            let c = r + l - i;
            h.set(r, c, t);
        }
    }
    h
}

/// Direct convolution of the extended sequence, `y_r = Σ_i h_i č_{r+L-i}`.
pub fn convolve(taps: &[Complex64], extended: &[Complex64]) -> Vec<Complex64> {
    let l = taps.len() - 1;
    let n = extended.len() - l;
    (0..n)
        .map(|r| taps.iter().enumerate().map(|(i, t)| t * extended[r + l - i]).sum())
        .collect()
}

/// One simulated block.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionBlock {
    /// Information symbol indices c_1..c_K.
    pub info_symbols: Vec<usize>,
    /// č = [c_{1-L} .. c_{K+L}] as point indices.
    pub extended_symbols: Vec<usize>,
    /// y_1..y_{K+L}.
    pub observation: Vec<Complex64>,
    pub seed: u64,
}

impl TransmissionBlock {
    pub fn block_len(&self) -> usize {
        self.info_symbols.len()
    }

    /// Known boundary points: the first `L` and the last `L` entries of č.
    pub fn boundary_points(&self, constellation: &Constellation, memory: usize) -> Vec<Complex64> {
        let n = self.extended_symbols.len();
        self.extended_symbols[..memory]
            .iter()
            .chain(&self.extended_symbols[n - memory..])
            .map(|&i| constellation.point(i))
            .collect()
    }
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Sends `info` through the channel; noise is drawn from stream 1 of `seed`.
pub fn transmit(
    info: &[usize],
    model: &ChannelModel,
    constellation: &Constellation,
    boundary_symbol: usize,
    seed: u64,
) -> TransmissionBlock {
    let l = model.memory();
    let mut extended = alloc::vec![boundary_symbol; info.len() + 2 * l];
    extended[l..l + info.len()].copy_from_slice(info);
    let points: Vec<Complex64> = extended.iter().map(|&i| constellation.point(i)).collect();
    let mut y = convolve(model.taps(), &points);
    if model.noise_var() > 0.0 {
        let std = math::sqrt(model.noise_var() / 2.0);
        let mut rng = noise_rng(seed);
        for v in y.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(re * std, im * std);
        }
    }
    TransmissionBlock {
        info_symbols: info.to_vec(),
        extended_symbols: extended,
        observation: y,
        seed,
    }
}

/// Draws K uniform symbols from stream 0 of `seed` and transmits them.
pub fn random_block(
    k: usize,
    model: &ChannelModel,
    constellation: &Constellation,
    boundary_symbol: usize,
    seed: u64,
) -> TransmissionBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let info = sample_symbols(k, constellation.order(), &mut rng);
    transmit(&info, model, constellation, boundary_symbol, seed)
}
