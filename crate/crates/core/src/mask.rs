//! ±1 mask vectors and the separable binary mask they induce.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng;

/// Fibonacci LFSR taps (exponents of the primitive feedback polynomial,
/// highest first) for orders 2 through 16.
pub const MLS_TAPS: [&[u32]; 15] = [
    &[2, 1],
    &[3, 1],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 11, 10, 4],
    &[13, 12, 11, 8],
    &[14, 13, 12, 2],
    &[15, 14],
    &[16, 15, 13, 4],
];

/// A gene / mask vector with entries in {-1, +1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskVector(Vec<i8>);

impl MaskVector {
    pub fn new(entries: Vec<i8>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::invalid(format!(
                "mask vector needs at least 2 entries, got {}",
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|&e| e != 1 && e != -1) {
            return Err(Error::invalid(format!(
                "mask vector entry {pos} is {}, expected ±1",
                entries[pos]
            )));
        }
        Ok(MaskVector(entries))
    }

    /// Reads a vector from real values (e.g. a loaded 1xK matrix).
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let entries = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 1.0 {
                    Ok(1)
                } else if v == -1.0 {
                    Ok(-1)
                } else {
                    Err(Error::invalid(format!("mask vector entry {i} is {v}, expected ±1")))
                }
            })
            .collect::<Result<Vec<i8>>>()?;
        MaskVector::new(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[i8] {
        &self.0
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [i8] {
        &mut self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&e| e as f64).collect()
    }

    /// 1xK row matrix for LTM1 export.
    pub fn to_mat(&self) -> Mat {
        Mat::from_raw(1, self.len(), self.to_f64())
    }

    pub fn negated(&self) -> MaskVector {
        MaskVector(self.0.iter().map(|e| -e).collect())
    }

    pub fn hamming(&self, other: &MaskVector) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

/// The binary KxK mask `(1 1^T + phi phi^T) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPattern {
    k: usize,
    grid: Vec<u8>,
    /// Physical size of one mask cell in micrometres.
    pub feature_size: f64,
}

impl MaskPattern {
    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.grid[i * self.k + j]
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_raw(self.k, self.k, self.grid.iter().map(|&v| v as f64).collect())
    }

    /// 8-bit binary PGM with open cells at 255, one pixel per feature.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.k, self.k).into_bytes();
        out.extend(self.grid.iter().map(|&v| v * 255));
        out
    }
}

pub fn assemble_mask(phi: &MaskVector, feature_size: f64) -> MaskPattern {
    let e = phi.entries();
    let k = e.len();
    let mut grid = Vec::with_capacity(k * k);
    for &a in e {
        for &b in e {
            grid.push(((1 + a * b) / 2) as u8);
        }
    }
    MaskPattern { k, grid, feature_size }
}

/// One period of the maximum-length sequence of the given order, as 0/1 bits.
pub fn mls_bits(order: u32) -> Result<Vec<u8>> {
    if !(2..=16).contains(&order) {
        let supported: Vec<String> = MLS_TAPS
            .iter()
            .map(|t| {
                t.iter()
                    .map(|e| format!("x^{e}"))
                    .chain(std::iter::once("1".to_string()))
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .collect();
        return Err(Error::invalid(format!(
            "unsupported MLS order {order}; supported orders 2..=16 with feedback polynomials [{}]",
            supported.join(", ")
        )));
    }
    let taps = MLS_TAPS[order as usize - 2];
    let n = order as usize;
    let period = (1usize << n) - 1;
    // s[t+n] = s[t] xor s[t+k] for every lower tap k
    let mut s = vec![0u8; period + n];
    s[n - 1] = 1;
    for t in 0..period {
        let mut next = s[t];
        for &k in &taps[1..] {
            next ^= s[t + k as usize];
        }
        s[t + n] = next;
    }
    s.truncate(period);
    Ok(s)
}

/// MLS of length `2^order - 1` mapped 0 -> -1, 1 -> +1 and tiled `repeats` times.
pub fn mls_vector(order: u32, repeats: usize) -> Result<MaskVector> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let bits = mls_bits(order)?;
    let period: Vec<i8> = bits.iter().map(|&b| if b == 1 { 1 } else { -1 }).collect();
    MaskVector::new(period.repeat(repeats))
}

/// Uniform random ±1 vector, reproducible for a given seed.
pub fn random_vector(k: usize, seed: u64) -> Result<MaskVector> {
    let mut r = rng::stream(seed, "mask/random");
    random_vector_with(k, &mut r)
}

pub fn random_vector_with(k: usize, r: &mut rng::Rng) -> Result<MaskVector> {
    if k < 2 {
        return Err(Error::invalid(format!("mask vector length must be >= 2, got {k}")));
    }
    MaskVector::new((0..k).map(|_| if r.random::<bool>() { 1 } else { -1 }).collect())
}
