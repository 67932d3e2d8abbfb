//! Constellations, bit labels and symbol sources.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math;

/// A unit-energy constellation with a bit label per point.
///
/// Point `i` carries the label whose binary representation (most significant
/// bit first) is `labels[i]`; bit index 0 is the most significant one.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    name: String,
    points: Vec<Complex64>,
    labels: Vec<u32>,
    bits_per_symbol: usize,
    /// `bit_subsets[i][b]` lists the point indices whose bit `i` equals `b`.
    bit_subsets: Vec<[Vec<usize>; 2]>,
}

impl Constellation {
    fn from_parts(name: &str, points: Vec<Complex64>, labels: Vec<u32>) -> Self {
        let m = points.len().trailing_zeros() as usize;
        let bit_subsets = (0..m)
            .map(|i| {
                let mut sets = [Vec::new(), Vec::new()];
                for (idx, &label) in labels.iter().enumerate() {
                    sets[((label >> (m - 1 - i)) & 1) as usize].push(idx);
                }
                sets
            })
            .collect();
        Self {
            name: name.to_string(),
            points,
            labels,
            bits_per_symbol: m,
            bit_subsets,
        }
    }

    /// Looks a constellation up by name: `bpsk`, `qpsk`, `16qam`, `64qam`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "bpsk" => Ok(make_bpsk()),
            "qpsk" | "4qam" => make_qam(4),
            "16qam" | "16-qam" => make_qam(16),
            "64qam" | "64-qam" => make_qam(64),
            _ => Err(Error::UnknownConstellation(name.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of points M.
    pub fn order(&self) -> usize {
        self.points.len()
    }

    /// Bits per symbol m = log2 M.
    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    /// Bit `i` (0 = most significant) of the label of point `index`.
    pub fn bit(&self, index: usize, i: usize) -> u8 {
        ((self.labels[index] >> (self.bits_per_symbol - 1 - i)) & 1) as u8
    }

    pub fn bit_subset(&self, i: usize, b: u8) -> &[usize] {
        &self.bit_subsets[i][b as usize]
    }

    /// Index of the point closest to `z`.
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }
}

/// Binary phase shift keying: label 0 maps to +1, label 1 to -1.
pub fn make_bpsk() -> Constellation {
    Constellation::from_parts(
        "bpsk",
        alloc::vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        alloc::vec![0, 1],
    )
}

fn gray(i: u32) -> u32 {
    i ^ (i >> 1)
}

/// Square QAM with a per-axis reflected Gray code.
///
/// The label is the I-axis Gray word followed by the Q-axis Gray word. On each
/// axis the amplitude index `a` maps to the level `(sqrt(M)-1) - 2a`, so the
/// all-zeros word sits at the positive corner. Point indices equal label values.
pub fn make_qam(order: usize) -> Result<Constellation> {
    let side = match order {
        4 => 2u32,
        16 => 4,
        64 => 8,
        _ => return Err(Error::UnsupportedOrder(order)),
    };
    let half_bits = side.trailing_zeros();
    let mut levels = alloc::vec![0.0; side as usize];
    for a in 0..side {
        levels[gray(a) as usize] = (side - 1) as f64 - 2.0 * a as f64;
    }
    let energy = 2.0 * levels.iter().map(|l| l * l).sum::<f64>() / side as f64;
    let scale = 1.0 / math::sqrt(energy);
    let mut points = Vec::with_capacity(order);
    let mut labels = Vec::with_capacity(order);
    for label in 0..order as u32 {
        let i_word = label >> half_bits;
        let q_word = label & (side - 1);
        points.push(Complex64::new(
            levels[i_word as usize] * scale,
            levels[q_word as usize] * scale,
        ));
        labels.push(label);
    }
    let name = if order == 4 {
        "qpsk".to_string()
    } else {
        alloc::format!("{order}qam")
    };
    Ok(Constellation::from_parts(&name, points, labels))
}

/// Draws `k` iid uniform point indices.
pub fn sample_symbols<R: Rng + ?Sized>(k: usize, order: usize, rng: &mut R) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..order)).collect()
}
