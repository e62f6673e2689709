//! EMA-updated vector quantizer codebook.

use super::VqError;
use crate::signal::BandId;
use serde::{Deserialize, Serialize};

/// Laplace smoothing constant for the EMA count normalization.
pub const EMA_SMOOTHING: f64 = 1e-5;

/// One band's code vectors with their EMA statistics. Vectors move by EMA,
/// never by gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub band: BandId,
    pub dim: usize,
    /// K x dim, row-major.
    pub vectors: Vec<f32>,
    pub ema_count: Vec<f32>,
    /// K x dim, row-major.
    pub ema_sum: Vec<f32>,
    pub decay: f32,
}

impl Codebook {
    /// Codebook with the given entries; EMA state is seeded so that the
    /// first updates are stable (count 1, sum = entry).
    pub fn from_entries(band: BandId, dim: usize, entries: Vec<f32>, decay: f32) -> Self {
        let k = entries.len() / dim.max(1);
        Codebook {
            band,
            dim,
            ema_count: vec![1.0; k],
            ema_sum: entries.clone(),
            vectors: entries,
            decay,
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.vectors.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// EMA update from one batch of encoder outputs and their assignments.
    ///
    /// `batch_z_e` is row-major `rows x dim`. Counts and sums decay toward
    /// the batch statistics; vectors are re-normalized with Laplace
    /// smoothing over the total count. An empty batch leaves the codebook
    /// unchanged.
    pub fn ema_update(&mut self, batch_z_e: &[f32], assignments: &[usize]) -> Result<(), VqError> {
        let rows = if self.dim == 0 {
            0
        } else {
            batch_z_e.len() / self.dim
        };
        if assignments.len() != rows {
            return Err(VqError::AssignmentCount {
                assignments: assignments.len(),
                rows,
            });
        }
        if assignments.is_empty() {
            return Ok(());
        }
        let k = self.len();
        for &a in assignments {
            if a >= k {
                return Err(VqError::AssignmentOutOfRange { index: a, k });
            }
        }
        let d = self.dim;
        let mut counts = vec![0f32; k];
        let mut sums = vec![0f32; k * d];
        for (row, &a) in assignments.iter().enumerate() {
            counts[a] += 1.0;
            let src = &batch_z_e[row * d..(row + 1) * d];
            let dst = &mut sums[a * d..(a + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        let decay = self.decay;
        let one_minus = 1.0 - decay;
        for i in 0..k {
            self.ema_count[i] = decay * self.ema_count[i] + one_minus * counts[i];
        }
        for (o, &s) in self.ema_sum.iter_mut().zip(&sums) {
            *o = decay * *o + one_minus * s;
        }
        let total: f64 = self.ema_count.iter().map(|&c| c as f64).sum();
        if total > 0.0 {
            let denom = total + k as f64 * EMA_SMOOTHING;
            for i in 0..k {
                let smoothed = (self.ema_count[i] as f64 + EMA_SMOOTHING) / denom * total;
                let dst = &mut self.vectors[i * d..(i + 1) * d];
                for (v, &s) in dst.iter_mut().zip(&self.ema_sum[i * d..(i + 1) * d]) {
                    *v = (s as f64 / smoothed) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Nearest codebook entry by squared Euclidean distance, lowest index on
/// ties. Distances accumulate in f64 so the scan is deterministic and
/// agrees with an exhaustive oracle.
pub fn quantize(z_e: &[f32], cb: &Codebook) -> Result<(usize, Vec<f32>), VqError> {
    if cb.is_empty() {
        return Err(VqError::EmptyCodebook);
    }
    if z_e.len() != cb.dim {
        return Err(VqError::DimMismatch {
            got: z_e.len(),
            want: cb.dim,
        });
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for k in 0..cb.len() {
        let entry = cb.entry(k);
        let mut dist = 0f64;
        for (&a, &b) in z_e.iter().zip(entry) {
            let diff = a as f64 - b as f64;
            dist += diff * diff;
        }
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    Ok((best, cb.entry(best).to_vec()))
}
