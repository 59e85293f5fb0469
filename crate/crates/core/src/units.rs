//! Unit conventions and physical constants.
//!
//! Lengths are micrometres, times are milliseconds, diffusivities are
//! um^2/ms (1 um^2/ms = 1e-3 mm^2/s) and b-values are ms/um^2
//! (1 ms/um^2 = 1000 s/mm^2). Gradient amplitudes are T/um.

/// Proton gyromagnetic ratio, rad per ms per tesla (2.675e8 rad s^-1 T^-1).
pub const GAMMA_RAD_PER_MS_T: f64 = 2.675e5;

pub fn diffusivity_to_mm2_per_s(d_um2_per_ms: f64) -> f64 {
    d_um2_per_ms * 1e-3
}

pub fn diffusivity_from_mm2_per_s(d_mm2_per_s: f64) -> f64 {
    d_mm2_per_s * 1e3
}

pub fn b_to_s_per_mm2(b_ms_per_um2: f64) -> f64 {
    b_ms_per_um2 * 1e3
}

pub fn b_from_s_per_mm2(b_s_per_mm2: f64) -> f64 {
    b_s_per_mm2 * 1e-3
}
