//! PGSE (pulsed-gradient spin-echo) acquisition handling.
//!
//! Two rectangular gradient pulses of duration delta, onsets separated by
//! Delta, gradient direction d and amplitude G. A spin's net phase is
//!   phi = gamma G d . (int_{pulse1} x(t) dt - int_{pulse2} x(t) dt),
//! discretized as per-step position sums over the two pulse windows. The
//! static-field term cancels in the difference and is never simulated.

use nalgebra::Vector3;
use thiserror::Error;

use crate::units::GAMMA_RAD_PER_MS_T;

#[derive(Error, Debug)]
pub enum SequenceError {
    #[error("pulse timing must satisfy Delta >= delta > 0, got delta={delta} Delta={big_delta}")]
    BadTiming { delta: f64, big_delta: f64 },
    #[error("b-values must be non-negative, got {0}")]
    NegativeB(f64),
    #[error("gradient direction must be a nonzero vector")]
    ZeroDirection,
    #[error("scheme is empty")]
    EmptyScheme,
    #[error(
        "walk too short for the echo: {steps} steps of {dt} ms < pulse window end {needed} steps"
    )]
    DurationMismatch { steps: usize, dt: f64, needed: u32 },
    #[error("no spins to synthesize a signal from")]
    NoSpins,
    #[error("scheme has {scheme} acquisitions but the walk accumulated {walk}")]
    SchemeMismatch { scheme: usize, walk: usize },
}

/// One diffusion-weighted acquisition.
#[derive(Clone, Debug)]
pub struct PgseAcquisition {
    /// Unit gradient direction.
    pub direction: Vector3<f64>,
    /// Gradient amplitude, T/um.
    pub g_amplitude: f64,
    /// Pulse duration delta, ms.
    pub delta: f64,
    /// Pulse onset separation Delta, ms.
    pub big_delta: f64,
    /// Diffusion weighting, ms/um^2 (1 ms/um^2 = 1000 s/mm^2).
    pub b: f64,
}

/// b = gamma^2 G^2 delta^2 (Delta - delta/3).
pub fn b_value(g: f64, delta: f64, big_delta: f64) -> f64 {
    let gd = GAMMA_RAD_PER_MS_T * g * delta;
    gd * gd * (big_delta - delta / 3.0)
}

/// Gradient amplitude (T/um) that yields the requested b on the given timing.
pub fn g_for_b(b: f64, delta: f64, big_delta: f64) -> f64 {
    (b / (big_delta - delta / 3.0)).sqrt() / (GAMMA_RAD_PER_MS_T * delta)
}

/// Ordered acquisition list; entry 0 is always the b=0 normalization scan.
#[derive(Clone, Debug)]
pub struct GradientScheme {
    pub acquisitions: Vec<PgseAcquisition>,
}

impl GradientScheme {
    /// Cartesian product of directions and b-values with a b=0 scan prepended.
    pub fn make(
        directions: &[Vector3<f64>],
        b_list: &[f64],
        delta: f64,
        big_delta: f64,
    ) -> Result<Self, SequenceError> {
        if !(delta > 0.0 && big_delta >= delta) {
            return Err(SequenceError::BadTiming { delta, big_delta });
        }
        let mut acquisitions = vec![PgseAcquisition {
            direction: Vector3::z(),
            g_amplitude: 0.0,
            delta,
            big_delta,
            b: 0.0,
        }];
        for dir in directions {
            let norm = dir.norm();
            if norm < 1e-12 {
                return Err(SequenceError::ZeroDirection);
            }
            let unit = dir / norm;
            for &b in b_list {
                if b < 0.0 {
                    return Err(SequenceError::NegativeB(b));
                }
                acquisitions.push(PgseAcquisition {
                    direction: unit,
                    g_amplitude: g_for_b(b, delta, big_delta),
                    delta,
                    big_delta,
                    b,
                });
            }
        }
        Ok(GradientScheme { acquisitions })
    }

    /// The scheme used throughout: x/y/z directions, 25 b-values uniformly
    /// spaced on [0, 3] ms/um^2, delta = 6 ms, Delta = 18 ms (76 acquisitions).
    pub fn default_three_axis() -> Self {
        let dirs = [Vector3::x(), Vector3::y(), Vector3::z()];
        let bs: Vec<f64> = (0..25).map(|i| 3.0 * i as f64 / 24.0).collect();
        Self::make(&dirs, &bs, 6.0, 18.0).expect("default scheme is valid")
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    /// Index of the normalization scan.
    pub fn b0_index(&self) -> usize {
        0
    }

    /// Longest echo time delta + Delta over the scheme, ms.
    pub fn echo_span(&self) -> f64 {
        self.acquisitions
            .iter()
            .map(|a| a.delta + a.big_delta)
            .fold(0.0, f64::max)
    }
}

/// Inclusive 1-based step-index ranges of the two gradient pulses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimingWindows {
    pub w1: (u32, u32),
    pub w2: (u32, u32),
}

/// Pulse windows shared across acquisitions with identical (delta, Delta),
/// mapped onto walk step indices. Phase accrual reduces to two per-window
/// position sums per group, turned into per-acquisition phases afterwards.
#[derive(Clone, Debug)]
pub struct TimingGrid {
    pub windows: Vec<TimingWindows>,
    /// Timing-group index of each acquisition.
    pub group_of: Vec<usize>,
    /// Walk timestep, ms.
    pub dt: f64,
}

impl TimingGrid {
    pub fn build(scheme: &GradientScheme, dt: f64) -> Result<Self, SequenceError> {
        if scheme.is_empty() {
            return Err(SequenceError::EmptyScheme);
        }
        let mut windows: Vec<TimingWindows> = Vec::new();
        let mut keys: Vec<(u64, u64)> = Vec::new();
        let mut group_of = Vec::with_capacity(scheme.len());
        for acq in &scheme.acquisitions {
            let key = (acq.delta.to_bits(), acq.big_delta.to_bits());
            let g = match keys.iter().position(|&k| k == key) {
                Some(g) => g,
                None => {
                    // Pulse 1 spans (0, delta], pulse 2 spans (Delta, Delta+delta];
                    // step i covers ((i-1) dt, i dt], sampled at its endpoint.
                    let per_pulse = (acq.delta / dt).round() as u32;
                    let w2_start = (acq.big_delta / dt).round() as u32 + 1;
                    keys.push(key);
                    windows.push(TimingWindows {
                        w1: (1, per_pulse),
                        w2: (w2_start, w2_start + per_pulse - 1),
                    });
                    windows.len() - 1
                }
            };
            group_of.push(g);
        }
        Ok(TimingGrid { windows, group_of, dt })
    }

    pub fn n_groups(&self) -> usize {
        self.windows.len()
    }

    /// Last step index any pulse window needs.
    pub fn required_steps(&self) -> u32 {
        self.windows.iter().map(|w| w.w2.1).max().unwrap_or(0)
    }

    /// Fold the position at `step` into the per-spin window sums
    /// (layout: [group][window], length 2 * n_groups).
    #[inline]
    pub fn accumulate(&self, step: u32, pos: &Vector3<f64>, sums: &mut [Vector3<f64>]) {
        for (g, w) in self.windows.iter().enumerate() {
            if step >= w.w1.0 && step <= w.w1.1 {
                sums[2 * g] += pos;
            } else if step >= w.w2.0 && step <= w.w2.1 {
                sums[2 * g + 1] += pos;
            }
        }
    }

    /// Net phase of one spin for one acquisition, from its window sums.
    #[inline]
    pub fn phase(&self, acq_index: usize, acq: &PgseAcquisition, sums: &[Vector3<f64>]) -> f64 {
        let g = self.group_of[acq_index];
        let diff = sums[2 * g] - sums[2 * g + 1];
        GAMMA_RAD_PER_MS_T * acq.g_amplitude * self.dt * acq.direction.dot(&diff)
    }
}

/// Ensemble-averaged normalized signal.
#[derive(Clone, Debug)]
pub struct SignalVector {
    /// |mean phasor| / |mean phasor at b=0| per acquisition.
    pub s: Vec<f64>,
    /// Real-part estimator, for diagnostics.
    pub real_part: Vec<f64>,
    /// Raw complex ensemble means (re, im).
    pub complex_mean: Vec<(f64, f64)>,
    pub n_spins: usize,
}

/// s_k = |(1/N) sum_j e^{-i phi_jk}|, normalized by the b=0 entry.
///
/// `phases(j)` yields spin j's phase for every acquisition into a scratch
/// buffer; summation is chunked in a fixed order so the result is independent
/// of any parallel partitioning upstream.
pub fn synthesize_signal<F>(
    n_spins: usize,
    n_acq: usize,
    b0_index: usize,
    mut phases: F,
) -> Result<SignalVector, SequenceError>
where
    F: FnMut(usize, &mut [f64]),
{
    if n_spins == 0 {
        return Err(SequenceError::NoSpins);
    }
    const CHUNK: usize = 4096;
    let mut total = vec![(0.0f64, 0.0f64); n_acq];
    let mut chunk_acc = vec![(0.0f64, 0.0f64); n_acq];
    let mut phi = vec![0.0f64; n_acq];
    let mut j = 0;
    while j < n_spins {
        let end = (j + CHUNK).min(n_spins);
        for c in chunk_acc.iter_mut() {
            *c = (0.0, 0.0);
        }
        for spin in j..end {
            phases(spin, &mut phi);
            for (c, &p) in chunk_acc.iter_mut().zip(phi.iter()) {
                let (s, co) = p.sin_cos();
                c.0 += co;
                c.1 -= s;
            }
        }
        for (t, c) in total.iter_mut().zip(chunk_acc.iter()) {
            t.0 += c.0;
            t.1 += c.1;
        }
        j = end;
    }
    let inv = 1.0 / n_spins as f64;
    let mean: Vec<(f64, f64)> = total.iter().map(|&(re, im)| (re * inv, im * inv)).collect();
    let s0 = (mean[b0_index].0.powi(2) + mean[b0_index].1.powi(2)).sqrt();
    let s = mean
        .iter()
        .map(|&(re, im)| (re * re + im * im).sqrt() / s0)
        .collect();
    let real_part = mean.iter().map(|&(re, _)| re / s0).collect();
    Ok(SignalVector {
        s,
        real_part,
        complex_mean: mean,
        n_spins,
    })
}
