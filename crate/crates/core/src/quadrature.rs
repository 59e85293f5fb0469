//! Adaptive Simpson quadrature for smooth one-dimensional integrands.

/// Integrates `f` over `[a, b]` to roughly `rel_tol` relative accuracy.
///
/// The error control is local (tolerance halves with each bisection), so the
/// global error is conservative for integrands of one sign. Endpoint
/// derivative singularities (e.g. sqrt terms) converge too, just with deeper
/// recursion; depth is capped so the call always terminates.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(a, b, fa, fm, fb);
    // Scale the absolute tolerance from a coarse magnitude estimate; the
    // max(..) floor keeps near-zero integrals from demanding infinite work.
    let scale = whole.abs().max(1e-300);
    let tol = rel_tol * scale;
    recurse(&f, a, b, fa, fm, fb, whole, tol, 52)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        // Richardson extrapolation of the two estimates.
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
