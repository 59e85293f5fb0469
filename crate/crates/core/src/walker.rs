//! Monte-Carlo spin random walk with compartment confinement.
//!
//! The substrate lattices repeat beyond the voxel faces as their own mirror
//! images (the geometry module aligns both lattices so every face is a mirror
//! plane), which makes two processes identical: a walk inside the cube with
//! specular face reflection, and a free walk in the extended substrate with
//! no face handling at all. The walk keeps the extended coordinate so that
//! net displacements and gradient phases are those of an unbounded medium;
//! reported positions are folded back into the cube, where classification
//! invariants hold. Walls of the spin's own compartment reflect specularly
//! (single bounce); a step whose reflected endpoint still escapes the
//! compartment is rejected and the spin stays in place.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CellLattice, Compartment, FiberLattice, VoxelGeometry};
use crate::rng::{stream_rng, StreamTag};
use crate::sequence::{GradientScheme, SequenceError, SignalVector, TimingGrid};

/// Physical ceiling on diffusivities, um^2/ms (free water at body temperature).
pub const D_MAX: f64 = 3.0;

#[derive(Error, Debug)]
pub enum WalkError {
    #[error("walk needs at least one spin")]
    NoSpins,
    #[error("timestep must be positive and finite, got {0} ms")]
    BadTimestep(f64),
    #[error("diffusivity {0} um^2/ms outside [0, {D_MAX}]")]
    BadDiffusivity(f64),
    #[error("healthy fraction {0} outside [0, 1]")]
    BadHealthFraction(f64),
    #[error("health mix given but the voxel has no fibers")]
    HealthMixWithoutFibers,
    #[error(
        "step length {step} um must stay below half the {what} pitch {pitch} um \
         (wall detection scans only adjacent lattice cells)"
    )]
    StepTooLong { step: f64, what: &'static str, pitch: f64 },
    #[error("observation time must be positive, got {0} ms")]
    BadTau(f64),
    #[error("no spins match the requested compartment filter")]
    EmptySelection,
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

/// Per-fiber intra-axonal diffusivity split into healthy and diseased axons.
#[derive(Clone, Copy, Debug)]
pub struct HealthMix {
    pub fraction_healthy: f64,
    pub d_healthy: f64,
    pub d_diseased: f64,
}

#[derive(Clone, Debug)]
pub struct WalkConfig {
    pub n_spins: usize,
    /// ms.
    pub timestep: f64,
    pub n_steps: usize,
    /// Intra-axonal diffusivity, um^2/ms; overridden per fiber by `health_mix`.
    pub d_ia: f64,
    pub d_icea: f64,
    pub d_eaec: f64,
    pub seed: u64,
    pub health_mix: Option<HealthMix>,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            n_spins: 100_000,
            timestep: 0.005,
            n_steps: 4800,
            d_ia: 2.0,
            d_icea: 3.0,
            d_eaec: 3.0,
            seed: 0,
            health_mix: None,
        }
    }
}

impl WalkConfig {
    /// Hard errors for invalid parameters; returns soft warnings (resolution
    /// guards) for the caller to surface.
    pub fn validate(&self, g: &VoxelGeometry) -> Result<Vec<String>, WalkError> {
        if self.n_spins == 0 {
            return Err(WalkError::NoSpins);
        }
        if !(self.timestep > 0.0 && self.timestep.is_finite()) {
            return Err(WalkError::BadTimestep(self.timestep));
        }
        let mut ds = vec![self.d_ia, self.d_icea, self.d_eaec];
        if let Some(m) = &self.health_mix {
            if !(0.0..=1.0).contains(&m.fraction_healthy) {
                return Err(WalkError::BadHealthFraction(m.fraction_healthy));
            }
            if g.fiber().is_none() {
                return Err(WalkError::HealthMixWithoutFibers);
            }
            ds.push(m.d_healthy);
            ds.push(m.d_diseased);
        }
        for &d in &ds {
            if !(0.0..=D_MAX).contains(&d) {
                return Err(WalkError::BadDiffusivity(d));
            }
        }
        let l_max = step_length(ds.iter().cloned().fold(0.0, f64::max), self.timestep);
        let mut warnings = Vec::new();
        if let Some(f) = g.fiber() {
            if l_max >= f.pitch / 2.0 {
                return Err(WalkError::StepTooLong { step: l_max, what: "fiber", pitch: f.pitch });
            }
            let l_ia = self
                .health_mix
                .as_ref()
                .map(|m| step_length(m.d_healthy.max(m.d_diseased), self.timestep))
                .unwrap_or_else(|| step_length(self.d_ia, self.timestep));
            if l_ia >= f.radius {
                warnings.push(format!(
                    "intra-axonal step length {:.4} um is not below the fiber radius {} um; \
                     restricted dynamics are under-resolved",
                    l_ia, f.radius
                ));
            }
        }
        if let Some(c) = g.cells() {
            if l_max >= c.pitch / 2.0 {
                return Err(WalkError::StepTooLong { step: l_max, what: "cell", pitch: c.pitch });
            }
            if step_length(self.d_icea, self.timestep) >= c.radius {
                warnings.push(format!(
                    "intra-cellular step length {:.4} um is not below the cell radius {} um",
                    step_length(self.d_icea, self.timestep),
                    c.radius
                ));
            }
        }
        Ok(warnings)
    }
}

/// l = sqrt(6 D t_s).
#[inline]
pub fn step_length(d: f64, timestep: f64) -> f64 {
    (6.0 * d * timestep).sqrt()
}

/// Uniformly distributed unit vector: a normalized 3-D standard normal draw.
#[inline]
pub fn sample_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n2 = v.norm_squared();
        if n2 > 1e-24 {
            return v / n2.sqrt();
        }
    }
}

/// Deterministic healthy/diseased assignment over all fibers: a seeded
/// shuffle marks round(fraction * count) fibers healthy.
pub fn assign_fiber_health(n_fibers: usize, fraction_healthy: f64, seed: u64) -> Vec<bool> {
    let n_healthy = ((fraction_healthy * n_fibers as f64).round() as usize).min(n_fibers);
    let mut order: Vec<usize> = (0..n_fibers).collect();
    let mut rng = stream_rng(seed, StreamTag::FiberHealth, 0);
    for i in (1..n_fibers).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut healthy = vec![false; n_fibers];
    for &k in order.iter().take(n_healthy) {
        healthy[k] = true;
    }
    healthy
}

/// Walked ensemble: start/end positions, per-spin pulse-window position sums
/// (the sufficient statistic for every gradient phase), and labels.
#[derive(Clone, Debug)]
pub struct SpinEnsemble {
    pub start: Vec<Vector3<f64>>,
    /// End positions folded into the voxel cube.
    pub pos: Vec<Vector3<f64>>,
    /// Net displacement in extended (unfolded) coordinates.
    pub displacement: Vec<Vector3<f64>>,
    pub compartment: Vec<Compartment>,
    /// False only for spins walking inside a diseased fiber.
    pub healthy: Vec<bool>,
    window_sums: Vec<Vector3<f64>>,
    grid: TimingGrid,
    /// Total walked time, ms.
    pub elapsed: f64,
    pub rejected_steps: u64,
    pub total_steps: u64,
}

impl SpinEnsemble {
    pub fn n_spins(&self) -> usize {
        self.start.len()
    }

    /// Pulse-window position sums of one spin, layout [group][window].
    pub fn window_sums(&self, spin: usize) -> &[Vector3<f64>] {
        let w = 2 * self.grid.n_groups();
        &self.window_sums[spin * w..(spin + 1) * w]
    }

    /// Ensemble signal for the scheme the walk was run with.
    pub fn signal(&self, scheme: &GradientScheme) -> Result<SignalVector, SequenceError> {
        if self.grid.group_of.len() != scheme.len() {
            return Err(SequenceError::SchemeMismatch {
                scheme: scheme.len(),
                walk: self.grid.group_of.len(),
            });
        }
        crate::sequence::synthesize_signal(
            self.n_spins(),
            scheme.len(),
            scheme.b0_index(),
            |j, out| {
                let sums = self.window_sums(j);
                for (k, acq) in scheme.acquisitions.iter().enumerate() {
                    out[k] = self.grid.phase(k, acq, sums);
                }
            },
        )
    }

    /// Census of starting compartments (IA, ICEA, EAEC).
    pub fn compartment_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for &c in &self.compartment {
            counts[match c {
                Compartment::IntraAxonal => 0,
                Compartment::IntraCellular => 1,
                Compartment::ExtraCellular => 2,
            }] += 1;
        }
        counts
    }
}

/// Displacement statistics of (a compartment of) the ensemble.
#[derive(Clone, Debug)]
pub struct DisplacementTensor {
    /// <R R^T> / (6 tau).
    pub tensor: Matrix3<f64>,
    /// Eigenvalues of `tensor`, descending.
    pub eigenvalues: [f64; 3],
    /// Conventional per-axis estimate <R_i^2> / (2 tau), um^2/ms.
    pub per_axis: Vector3<f64>,
    /// Standard error of each per-axis estimate over spins.
    pub per_axis_stderr: Vector3<f64>,
    /// trace(tensor) / 3.
    pub mean_diffusivity: f64,
    pub n: usize,
}

pub fn displacement_tensor(
    e: &SpinEnsemble,
    tau: f64,
    filter: Option<Compartment>,
) -> Result<DisplacementTensor, WalkError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(WalkError::BadTau(tau));
    }
    let mut m = Matrix3::zeros();
    let mut s2 = Vector3::zeros();
    let mut s4 = Vector3::zeros();
    let mut n = 0usize;
    for (r, &c) in e.displacement.iter().zip(e.compartment.iter()) {
        if filter.map_or(false, |f| f != c) {
            continue;
        }
        m += r * r.transpose();
        let sq = r.component_mul(r);
        s2 += sq;
        s4 += sq.component_mul(&sq);
        n += 1;
    }
    if n == 0 {
        return Err(WalkError::EmptySelection);
    }
    let nf = n as f64;
    let tensor = m / (6.0 * tau * nf);
    let eig = tensor.symmetric_eigen();
    let mut eigenvalues = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let per_axis = s2 / (2.0 * tau * nf);
    // stderr of mean(R_i^2)/(2 tau): sample sd of R_i^2 over sqrt(n).
    let per_axis_stderr = Vector3::from_fn(|i, _| {
        if n < 2 {
            return f64::INFINITY;
        }
        let mean = s2[i] / nf;
        let var = (s4[i] / nf - mean * mean) * nf / (nf - 1.0);
        var.max(0.0).sqrt() / (2.0 * tau * nf.sqrt())
    });
    Ok(DisplacementTensor {
        tensor,
        eigenvalues,
        per_axis,
        per_axis_stderr,
        mean_diffusivity: tensor.trace() / 3.0,
        n,
    })
}

/// Run the full walk and accumulate pulse-window sums for `scheme`.
/// Deterministic for a fixed seed under any thread count.
pub fn simulate(
    g: &VoxelGeometry,
    cfg: &WalkConfig,
    scheme: &GradientScheme,
) -> Result<SpinEnsemble, WalkError> {
    cfg.validate(g)?;
    let grid = TimingGrid::build(scheme, cfg.timestep)?;
    let needed = grid.required_steps();
    if (cfg.n_steps as u64) < needed as u64 {
        return Err(WalkError::Sequence(SequenceError::DurationMismatch {
            steps: cfg.n_steps,
            dt: cfg.timestep,
            needed,
        }));
    }
    let fiber_health = match (&cfg.health_mix, g.fiber()) {
        (Some(m), Some(f)) => Some(assign_fiber_health(f.total(), m.fraction_healthy, cfg.seed)),
        _ => None,
    };

    let n = cfg.n_spins;
    let n_groups = grid.n_groups();
    const CHUNK: usize = 1024;
    let n_chunks = n.div_ceil(CHUNK);
    let chunk_outs: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(n);
            run_chunk(g, cfg, &grid, fiber_health.as_deref(), lo, hi, n_groups)
        })
        .collect();

    let mut ensemble = SpinEnsemble {
        start: Vec::with_capacity(n),
        pos: Vec::with_capacity(n),
        displacement: Vec::with_capacity(n),
        compartment: Vec::with_capacity(n),
        healthy: Vec::with_capacity(n),
        window_sums: Vec::with_capacity(n * 2 * n_groups),
        grid,
        elapsed: cfg.n_steps as f64 * cfg.timestep,
        rejected_steps: 0,
        total_steps: n as u64 * cfg.n_steps as u64,
    };
    for mut c in chunk_outs {
        ensemble.start.append(&mut c.start);
        ensemble.pos.append(&mut c.pos);
        ensemble.displacement.append(&mut c.displacement);
        ensemble.compartment.append(&mut c.compartment);
        ensemble.healthy.append(&mut c.healthy);
        ensemble.window_sums.append(&mut c.window_sums);
        ensemble.rejected_steps += c.rejected;
    }
    Ok(ensemble)
}

/// Folded step-by-step paths of the first `k` spins (same streams as
/// `simulate`, so the paths are exactly the simulated ones).
pub fn trajectories(
    g: &VoxelGeometry,
    cfg: &WalkConfig,
    scheme: &GradientScheme,
    k: usize,
) -> Result<Vec<Vec<[f32; 3]>>, WalkError> {
    cfg.validate(g)?;
    let grid = TimingGrid::build(scheme, cfg.timestep)?;
    let fiber_health = match (&cfg.health_mix, g.fiber()) {
        (Some(m), Some(f)) => Some(assign_fiber_health(f.total(), m.fraction_healthy, cfg.seed)),
        _ => None,
    };
    let mut sums = vec![Vector3::zeros(); 2 * grid.n_groups()];
    let mut out = Vec::new();
    for j in 0..k.min(cfg.n_spins) {
        let mut path = Vec::with_capacity(cfg.n_steps + 1);
        sums.fill(Vector3::zeros());
        walk_one(g, cfg, &grid, fiber_health.as_deref(), j, &mut sums, Some(&mut path));
        out.push(path);
    }
    Ok(out)
}

struct ChunkOut {
    start: Vec<Vector3<f64>>,
    pos: Vec<Vector3<f64>>,
    displacement: Vec<Vector3<f64>>,
    compartment: Vec<Compartment>,
    healthy: Vec<bool>,
    window_sums: Vec<Vector3<f64>>,
    rejected: u64,
}

fn run_chunk(
    g: &VoxelGeometry,
    cfg: &WalkConfig,
    grid: &TimingGrid,
    fiber_health: Option<&[bool]>,
    lo: usize,
    hi: usize,
    n_groups: usize,
) -> ChunkOut {
    let len = hi - lo;
    let w = 2 * n_groups;
    let mut out = ChunkOut {
        start: Vec::with_capacity(len),
        pos: Vec::with_capacity(len),
        displacement: Vec::with_capacity(len),
        compartment: Vec::with_capacity(len),
        healthy: Vec::with_capacity(len),
        window_sums: vec![Vector3::zeros(); len * w],
        rejected: 0,
    };
    for (i, j) in (lo..hi).enumerate() {
        let sums = &mut out.window_sums[i * w..(i + 1) * w];
        let spin = walk_one(g, cfg, grid, fiber_health, j, sums, None);
        out.start.push(spin.start);
        out.pos.push(spin.pos_folded);
        out.displacement.push(spin.end - spin.start);
        out.compartment.push(spin.compartment);
        out.healthy.push(spin.healthy);
        out.rejected += spin.rejected;
    }
    out
}

struct SpinOut {
    start: Vector3<f64>,
    /// End position in extended coordinates.
    end: Vector3<f64>,
    pos_folded: Vector3<f64>,
    compartment: Compartment,
    healthy: bool,
    rejected: u64,
}

enum Owner {
    Cylinder { cx: f64, cy: f64, r: f64 },
    Sphere { center: Vector3<f64>, r: f64 },
    Free,
}

fn walk_one(
    g: &VoxelGeometry,
    cfg: &WalkConfig,
    grid: &TimingGrid,
    fiber_health: Option<&[bool]>,
    j: usize,
    sums: &mut [Vector3<f64>],
    mut record: Option<&mut Vec<[f32; 3]>>,
) -> SpinOut {
    let side = g.side();
    let mut prng = stream_rng(cfg.seed, StreamTag::Placement, j as u64);
    let start = Vector3::new(
        prng.gen::<f64>() * side,
        prng.gen::<f64>() * side,
        prng.gen::<f64>() * side,
    );
    let compartment = g.classify_inside(&start);
    let (d, owner, healthy) = match compartment {
        Compartment::IntraAxonal => {
            let f = g.fiber().expect("IA classification implies fibers");
            let (ix, iy) = f.cell_of(start.x, start.y);
            let (cx, cy) = f.center(ix, iy);
            let healthy = fiber_health.map_or(true, |h| h[f.flat_index(ix, iy)]);
            let d = match &cfg.health_mix {
                Some(m) => {
                    if healthy {
                        m.d_healthy
                    } else {
                        m.d_diseased
                    }
                }
                None => cfg.d_ia,
            };
            (d, Owner::Cylinder { cx, cy, r: f.radius }, healthy)
        }
        Compartment::IntraCellular => {
            let c = g.cells().expect("ICEA classification implies cells");
            let (ix, iy, iz) = c.cell_of(&start);
            (cfg.d_icea, Owner::Sphere { center: c.center(ix, iy, iz), r: c.radius }, true)
        }
        Compartment::ExtraCellular => (cfg.d_eaec, Owner::Free, true),
    };
    let l = step_length(d, cfg.timestep);
    let mut pos = start;
    let mut rejected = 0u64;
    if let Some(rec) = record.as_deref_mut() {
        rec.push(fold3(&pos, side));
    }
    let mut wrng = stream_rng(cfg.seed, StreamTag::Walk, j as u64);
    for step in 1..=cfg.n_steps as u32 {
        if l > 0.0 {
            let u = sample_direction(&mut wrng);
            let next = match &owner {
                Owner::Cylinder { cx, cy, r } => advance_ia(&pos, l, &u, *cx, *cy, *r),
                Owner::Sphere { center, r } => advance_icea(&pos, l, &u, center, *r, g),
                Owner::Free => advance_eaec(&pos, l, &u, g),
            };
            match next {
                Some(q) => pos = q,
                None => rejected += 1,
            }
        }
        grid.accumulate(step, &pos, sums);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(fold3(&pos, side));
        }
    }
    SpinOut {
        start,
        end: pos,
        pos_folded: Vector3::new(
            fold_axis(pos.x, side),
            fold_axis(pos.y, side),
            fold_axis(pos.z, side),
        ),
        compartment,
        healthy,
        rejected,
    }
}

/// Mirror-fold an extended coordinate into [0, side].
#[inline]
fn fold_axis(x: f64, side: f64) -> f64 {
    let period = 2.0 * side;
    let y = x.rem_euclid(period);
    if y > side {
        period - y
    } else {
        y
    }
}

#[inline]
fn fold3(p: &Vector3<f64>, side: f64) -> [f32; 3] {
    [
        fold_axis(p.x, side) as f32,
        fold_axis(p.y, side) as f32,
        fold_axis(p.z, side) as f32,
    ]
}

/// Compartment of an extended-coordinate point (lattices continued over all
/// of space). Agrees with `VoxelGeometry::classify_inside` inside the cube.
#[inline]
fn classify_unfolded(g: &VoxelGeometry, p: &Vector3<f64>) -> Compartment {
    if let Some(f) = g.fiber() {
        let cx = ((p.x / f.pitch).floor() + 0.5) * f.pitch;
        let cy = ((p.y / f.pitch).floor() + 0.5) * f.pitch;
        let dx = p.x - cx;
        let dy = p.y - cy;
        if dx * dx + dy * dy <= f.radius * f.radius {
            return Compartment::IntraAxonal;
        }
    }
    if let Some(c) = g.cells() {
        let cx = ((p.x / c.pitch).floor() + 0.5) * c.pitch;
        let cy = ((p.y / c.pitch).floor() + 0.5) * c.pitch;
        let cz = ((p.z / c.pitch).floor() + 0.5) * c.pitch;
        let d = p - Vector3::new(cx, cy, cz);
        if d.norm_squared() <= c.radius * c.radius {
            return Compartment::IntraCellular;
        }
    }
    Compartment::ExtraCellular
}

/// Specular reflection of the endpoint about the surface tangent plane at
/// the hit point: q' = h + v - 2 (v . n) n, with v the unspent displacement.
#[inline]
fn reflect(h: &Vector3<f64>, v: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    h + (v - 2.0 * v.dot(n) * n)
}

/// Intra-axonal step: confinement to the owning cylinder's interior.
#[inline]
fn advance_ia(
    p: &Vector3<f64>,
    l: f64,
    u: &Vector3<f64>,
    cx: f64,
    cy: f64,
    r: f64,
) -> Option<Vector3<f64>> {
    let q = p + l * u;
    let qx = q.x - cx;
    let qy = q.y - cy;
    let r2 = r * r;
    if qx * qx + qy * qy <= r2 {
        return Some(q);
    }
    // First wall crossing: |a + t w|^2 = r^2 along the planar projection.
    let ax = p.x - cx;
    let ay = p.y - cy;
    let ww = u.x * u.x + u.y * u.y;
    if ww <= 1e-300 {
        return None;
    }
    let b = ax * u.x + ay * u.y;
    let c = ax * ax + ay * ay - r2;
    let t = (-b + (b * b - ww * c).max(0.0).sqrt()) / ww;
    if !(0.0..=l).contains(&t) {
        return None;
    }
    let h = p + t * u;
    let mut n = Vector3::new(h.x - cx, h.y - cy, 0.0);
    let nn = n.norm();
    if nn <= 1e-300 {
        return None;
    }
    n /= nn;
    let qr = reflect(&h, &((l - t) * u), &n);
    let rx = qr.x - cx;
    let ry = qr.y - cy;
    (rx * rx + ry * ry <= r2).then_some(qr)
}

/// Earliest entry of the segment p + t u (t in [0, l]) into any lattice
/// cylinder near the segment. Keeps the running earliest hit in (t, normal).
#[inline]
fn earliest_cylinder_entry(
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    u: &Vector3<f64>,
    l: f64,
    f: &FiberLattice,
    best: &mut (f64, Vector3<f64>),
) {
    let ww = u.x * u.x + u.y * u.y;
    if ww <= 1e-300 {
        return;
    }
    let r2 = f.radius * f.radius;
    // |a| <= r + l is necessary for a crossing.
    let slack = l * (l + 2.0 * f.radius);
    let inv = 1.0 / f.pitch;
    let ix_lo = (p.x.min(q.x) * inv).floor() as i64;
    let ix_hi = (p.x.max(q.x) * inv).floor() as i64;
    let iy_lo = (p.y.min(q.y) * inv).floor() as i64;
    let iy_hi = (p.y.max(q.y) * inv).floor() as i64;
    for ix in ix_lo..=ix_hi {
        let cx = (ix as f64 + 0.5) * f.pitch;
        for iy in iy_lo..=iy_hi {
            let cy = (iy as f64 + 0.5) * f.pitch;
            let ax = p.x - cx;
            let ay = p.y - cy;
            let c = ax * ax + ay * ay - r2;
            if c > slack {
                continue;
            }
            let b = ax * u.x + ay * u.y;
            if b >= 0.0 {
                // Planar distance to this axis is non-decreasing.
                continue;
            }
            let disc = b * b - ww * c;
            if disc <= 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / ww;
            if t >= 0.0 && t <= l && t < best.0 {
                let hx = ax + t * u.x;
                let hy = ay + t * u.y;
                let mut n = Vector3::new(hx, hy, 0.0);
                let nn = n.norm();
                if nn <= 1e-300 {
                    continue;
                }
                n /= nn;
                *best = (t, n);
            }
        }
    }
}

/// Earliest entry of the segment into any lattice sphere near it.
#[inline]
fn earliest_sphere_entry(
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    u: &Vector3<f64>,
    l: f64,
    cl: &CellLattice,
    best: &mut (f64, Vector3<f64>),
) {
    let r2 = cl.radius * cl.radius;
    let slack = l * (l + 2.0 * cl.radius);
    let inv = 1.0 / cl.pitch;
    let ix_lo = (p.x.min(q.x) * inv).floor() as i64;
    let ix_hi = (p.x.max(q.x) * inv).floor() as i64;
    let iy_lo = (p.y.min(q.y) * inv).floor() as i64;
    let iy_hi = (p.y.max(q.y) * inv).floor() as i64;
    let iz_lo = (p.z.min(q.z) * inv).floor() as i64;
    let iz_hi = (p.z.max(q.z) * inv).floor() as i64;
    for ix in ix_lo..=ix_hi {
        for iy in iy_lo..=iy_hi {
            for iz in iz_lo..=iz_hi {
                let center = Vector3::new(
                    (ix as f64 + 0.5) * cl.pitch,
                    (iy as f64 + 0.5) * cl.pitch,
                    (iz as f64 + 0.5) * cl.pitch,
                );
                let a = p - center;
                let c = a.norm_squared() - r2;
                if c > slack {
                    continue;
                }
                let b = a.dot(u);
                if b >= 0.0 {
                    continue;
                }
                let disc = b * b - c;
                if disc <= 0.0 {
                    continue;
                }
                let t = -b - disc.sqrt();
                if t >= 0.0 && t <= l && t < best.0 {
                    let n = (a + t * u) / cl.radius;
                    *best = (t, n);
                }
            }
        }
    }
}

/// Intra-cellular step: confinement to the owning sphere minus any piercing
/// cylinders. Reflects at the earliest of (own wall from inside, cylinder
/// wall from outside).
#[inline]
fn advance_icea(
    p: &Vector3<f64>,
    l: f64,
    u: &Vector3<f64>,
    center: &Vector3<f64>,
    r: f64,
    g: &VoxelGeometry,
) -> Option<Vector3<f64>> {
    let q = p + l * u;
    let mut best = (f64::INFINITY, Vector3::zeros());
    let a = p - center;
    if (q - center).norm_squared() > r * r {
        let b = a.dot(u);
        let t = -b + (b * b - (a.norm_squared() - r * r)).max(0.0).sqrt();
        if t <= l {
            // Outward normal of the compartment at the exit point.
            best = (t, (a + t * u) / r);
        }
    }
    if let Some(f) = g.fiber() {
        earliest_cylinder_entry(p, &q, u, l, f, &mut best);
    }
    if best.0.is_infinite() {
        debug_assert_eq!(classify_unfolded(g, &q), Compartment::IntraCellular);
        return Some(q);
    }
    let (t, n) = best;
    let h = p + t * u;
    let qr = reflect(&h, &((l - t) * u), &n);
    if (qr - center).norm_squared() > r * r {
        return None;
    }
    (classify_unfolded(g, &qr) == Compartment::IntraCellular).then_some(qr)
}

/// Extra-cellular step: every cylinder and sphere wall is impermeable from
/// outside.
#[inline]
fn advance_eaec(p: &Vector3<f64>, l: f64, u: &Vector3<f64>, g: &VoxelGeometry) -> Option<Vector3<f64>> {
    let q = p + l * u;
    let mut best = (f64::INFINITY, Vector3::zeros());
    if let Some(f) = g.fiber() {
        earliest_cylinder_entry(p, &q, u, l, f, &mut best);
    }
    if let Some(cl) = g.cells() {
        earliest_sphere_entry(p, &q, u, l, cl, &mut best);
    }
    if best.0.is_infinite() {
        debug_assert_eq!(classify_unfolded(g, &q), Compartment::ExtraCellular);
        return Some(q);
    }
    let (t, n) = best;
    let h = p + t * u;
    let qr = reflect(&h, &((l - t) * u), &n);
    (classify_unfolded(g, &qr) == Compartment::ExtraCellular).then_some(qr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CellLayout, CellSpec, FiberSpec, VoxelSpec};
    use approx::assert_relative_eq;

    fn free_voxel(side: f64) -> VoxelGeometry {
        VoxelGeometry::build(&VoxelSpec { side, fiber: None, cells: None }).unwrap()
    }

    fn short_scheme(dirs: &[Vector3<f64>], bs: &[f64]) -> GradientScheme {
        // delta 1 ms, Delta 2 ms: 600 steps at the default timestep.
        GradientScheme::make(dirs, bs, 1.0, 2.0).unwrap()
    }

    #[test]
    fn step_length_values() {
        assert_relative_eq!(step_length(3.0, 0.005), 0.3, epsilon = 1e-12);
        assert_eq!(step_length(0.0, 0.005), 0.0);
        assert_relative_eq!(step_length(2.0, 0.005), 0.06f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn sampled_directions_are_unit_and_symmetric() {
        let mut rng = stream_rng(9, StreamTag::Walk, 0);
        let n = 100_000;
        let mut mean = Vector3::zeros();
        for _ in 0..n {
            let v = sample_direction(&mut rng);
            assert!((v.norm() - 1.0).abs() < 1e-12);
            mean += v;
        }
        mean /= n as f64;
        assert!(mean.norm() < 0.02, "mean direction {mean:?}");
        for i in 0..3 {
            assert!(mean[i].abs() < 0.01, "component {i} biased: {}", mean[i]);
        }
    }

    #[test]
    fn fiber_health_rounding() {
        let h = assign_fiber_health(1089, 0.7, 5);
        assert_eq!(h.iter().filter(|&&x| x).count(), 762);
        assert!(assign_fiber_health(1089, 1.0, 5).iter().all(|&x| x));
        assert!(!assign_fiber_health(1089, 0.0, 5).iter().any(|&x| x));
        // Deterministic per seed.
        assert_eq!(assign_fiber_health(64, 0.5, 7), assign_fiber_health(64, 0.5, 7));
        assert_ne!(assign_fiber_health(64, 0.5, 7), assign_fiber_health(64, 0.5, 8));
    }

    #[test]
    fn free_diffusion_satisfies_einstein_relation() {
        let g = free_voxel(100.0);
        let cfg = WalkConfig { n_spins: 30_000, n_steps: 600, seed: 11, ..Default::default() };
        let scheme = short_scheme(&[Vector3::x()], &[1.0]);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        let tau = e.elapsed;
        assert_relative_eq!(tau, 3.0, epsilon = 1e-12);
        let t = displacement_tensor(&e, tau, None).unwrap();
        for i in 0..3 {
            assert!(
                (t.per_axis[i] - 3.0).abs() < 0.09,
                "axis {i}: {} (stderr {})",
                t.per_axis[i],
                t.per_axis_stderr[i]
            );
        }
        // Tensor normalization <R R^T>/(6 tau): each eigenvalue near D/3.
        for ev in t.eigenvalues {
            assert!((ev - 1.0).abs() < 0.05, "eigenvalue {ev}");
        }
        assert!((t.mean_diffusivity - 1.0).abs() < 0.03);
        assert_eq!(t.n, 30_000);
        assert_eq!(e.rejected_steps, 0, "free voxel has nothing to reject");
    }

    #[test]
    fn zero_diffusivity_spins_stay_put() {
        let g = free_voxel(50.0);
        let cfg = WalkConfig {
            n_spins: 200,
            n_steps: 600,
            d_ia: 0.0,
            d_icea: 0.0,
            d_eaec: 0.0,
            seed: 3,
            ..Default::default()
        };
        let scheme = short_scheme(&[Vector3::x(), Vector3::z()], &[1.0, 2.0]);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        for j in 0..e.n_spins() {
            assert_eq!(e.pos[j], e.start[j]);
            assert_eq!(e.displacement[j], Vector3::zeros());
        }
        let t = displacement_tensor(&e, e.elapsed, None).unwrap();
        assert_eq!(t.tensor, Matrix3::zeros());
        let sig = e.signal(&scheme).unwrap();
        for &s in &sig.s {
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn ia_reflection_radial_fixture() {
        // Cylinder center (3,3), r=1. Step +x from (3.8, 3, 10) by 0.5:
        // hits the wall at x=4 with 0.3 unspent, mirrors back to x=3.7.
        let q = advance_ia(&Vector3::new(3.8, 3.0, 10.0), 0.5, &Vector3::x(), 3.0, 3.0, 1.0)
            .expect("reflected step accepted");
        assert_relative_eq!(q.x, 3.7, epsilon = 1e-12);
        assert_relative_eq!(q.y, 3.0, epsilon = 1e-12);
        assert_relative_eq!(q.z, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn ia_reflection_preserves_angle_and_length() {
        let p = Vector3::new(3.9, 3.0, 10.0);
        let u = Vector3::new(0.6, 0.64, 0.48).normalize();
        let l = 0.4;
        let (cx, cy, r) = (3.0, 3.0, 1.0);
        let q = advance_ia(&p, l, &u, cx, cy, r).expect("accepted");
        // Recover the hit point: it is the unique point on the segment p..p+l*u
        // at planar distance r.
        let ax = p.x - cx;
        let ay = p.y - cy;
        let ww = u.x * u.x + u.y * u.y;
        let b = ax * u.x + ay * u.y;
        let c = ax * ax + ay * ay - r * r;
        let t = (-b + (b * b - ww * c).sqrt()) / ww;
        let h = p + t * u;
        assert_relative_eq!(
            ((h.x - cx).powi(2) + (h.y - cy).powi(2)).sqrt(),
            r,
            epsilon = 1e-12
        );
        let n = Vector3::new((h.x - cx) / r, (h.y - cy) / r, 0.0);
        let v_in = (l - t) * u;
        let v_out = q - h;
        // Equal length, mirrored normal component, equal tangential component.
        assert_relative_eq!(v_out.norm(), v_in.norm(), epsilon = 1e-12);
        assert_relative_eq!(v_out.dot(&n), -v_in.dot(&n), epsilon = 1e-12);
        let tangent = Vector3::new(-n.y, n.x, 0.0);
        assert_relative_eq!(v_out.dot(&tangent), v_in.dot(&tangent), epsilon = 1e-12);
        assert_relative_eq!(v_out.z, v_in.z, epsilon = 1e-12);
        // Endpoint strictly inside.
        assert!((q.x - cx).powi(2) + (q.y - cy).powi(2) <= r * r);
    }

    fn small_full_structure() -> VoxelGeometry {
        VoxelGeometry::build(&VoxelSpec {
            side: 24.0,
            fiber: Some(FiberSpec { radius: 1.0, pitch: 3.0 }),
            cells: Some(CellSpec { radius: 5.3, layout: CellLayout::Pitch(12.0) }),
        })
        .unwrap()
    }

    #[test]
    fn confinement_holds_over_full_walks() {
        let g = small_full_structure();
        let cfg = WalkConfig { n_spins: 4000, n_steps: 600, seed: 21, ..Default::default() };
        let scheme = short_scheme(&[Vector3::x()], &[1.0]);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        let counts = e.compartment_counts();
        assert!(counts.iter().all(|&c| c > 0), "expected all compartments: {counts:?}");
        for j in 0..e.n_spins() {
            let c = g.classify(&e.pos[j]).expect("folded position inside the cube");
            assert_eq!(c, e.compartment[j], "spin {j} leaked");
        }
        // Rejections are a rare fallback, not the norm.
        let frac = e.rejected_steps as f64 / e.total_steps as f64;
        assert!(frac < 0.05, "rejected fraction {frac}");
    }

    #[test]
    fn icea_spins_are_restricted() {
        let g = VoxelGeometry::build(&VoxelSpec {
            side: 12.0,
            fiber: None,
            cells: Some(CellSpec { radius: 5.3, layout: CellLayout::Pitch(12.0) }),
        })
        .unwrap();
        let cfg = WalkConfig { n_spins: 3000, n_steps: 600, seed: 4, ..Default::default() };
        let scheme = short_scheme(&[Vector3::z()], &[1.0]);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        let t = displacement_tensor(&e, e.elapsed, Some(Compartment::IntraCellular)).unwrap();
        assert!(t.n > 0);
        for i in 0..3 {
            // Restricted well below the free value over tau = 3 ms.
            assert!(t.per_axis[i] < 2.5, "axis {i}: {}", t.per_axis[i]);
        }
        for (r, c) in e.displacement.iter().zip(e.compartment.iter()) {
            if *c == Compartment::IntraCellular {
                assert!(r.norm() <= 2.0 * 5.3 + 1e-9);
            }
        }
    }

    #[test]
    fn fiber_lattice_signal_is_axis_symmetric() {
        // The substrate is invariant under x <-> y, so those two gradient
        // directions must agree within ensemble noise.
        let g = VoxelGeometry::build(&VoxelSpec {
            side: 24.0,
            fiber: Some(FiberSpec { radius: 1.0, pitch: 3.0 }),
            cells: None,
        })
        .unwrap();
        let cfg = WalkConfig { n_spins: 30_000, n_steps: 600, seed: 8, ..Default::default() };
        let scheme = short_scheme(&[Vector3::x(), Vector3::y()], &[1.0, 2.0]);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        let sig = e.signal(&scheme).unwrap();
        // Acquisitions: [b0, x@1, x@2, y@1, y@2].
        assert!((sig.s[1] - sig.s[3]).abs() < 0.02, "{} vs {}", sig.s[1], sig.s[3]);
        assert!((sig.s[2] - sig.s[4]).abs() < 0.02, "{} vs {}", sig.s[2], sig.s[4]);
    }

    #[test]
    fn free_signal_matches_gaussian_attenuation() {
        let g = free_voxel(100.0);
        let cfg = WalkConfig { n_spins: 50_000, n_steps: 600, seed: 13, ..Default::default() };
        let scheme = short_scheme(&[Vector3::x()], &[0.25, 0.5, 0.75]);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        let sig = e.signal(&scheme).unwrap();
        assert_eq!(sig.s[0], 1.0);
        for (k, acq) in scheme.acquisitions.iter().enumerate().skip(1) {
            let d = -sig.s[k].ln() / acq.b;
            assert!((d - 3.0).abs() < 0.09, "b={}: D={}", acq.b, d);
        }
    }

    #[test]
    fn walks_are_deterministic_across_thread_counts() {
        let g = small_full_structure();
        let cfg = WalkConfig { n_spins: 2000, n_steps: 300, seed: 99, ..Default::default() };
        let scheme = GradientScheme::make(&[Vector3::x(), Vector3::z()], &[1.0], 0.5, 1.0).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| simulate(&g, &cfg, &scheme).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.pos, b.pos);
        assert_eq!(a.displacement, b.displacement);
        assert_eq!(a.window_sums, b.window_sums);
        let sa = a.signal(&scheme).unwrap();
        let sb = b.signal(&scheme).unwrap();
        assert_eq!(sa.s, sb.s);
    }

    #[test]
    fn initial_census_matches_volume_fractions() {
        let g = VoxelGeometry::build(&VoxelSpec {
            side: 100.0,
            fiber: Some(FiberSpec { radius: 1.0, pitch: 3.0 }),
            cells: Some(CellSpec { radius: 5.3, layout: CellLayout::TargetFraction(0.05) }),
        })
        .unwrap();
        let cfg = WalkConfig { n_spins: 50_000, n_steps: 2, seed: 17, ..Default::default() };
        let scheme = GradientScheme::make(&[Vector3::z()], &[0.5], 0.005, 0.005).unwrap();
        let e = simulate(&g, &cfg, &scheme).unwrap();
        let counts = e.compartment_counts();
        let vf = g.volume_fractions();
        let expect = [vf.fiber, vf.cell, vf.free];
        let n = e.n_spins() as f64;
        for i in 0..3 {
            let obs = counts[i] as f64 / n;
            let sigma = (expect[i] * (1.0 - expect[i]) / n).sqrt();
            assert!(
                (obs - expect[i]).abs() < 3.0 * sigma,
                "compartment {i}: {obs} vs {} (3 sigma {})",
                expect[i],
                3.0 * sigma
            );
        }
    }

    #[test]
    fn trajectories_match_simulation_and_stay_in_cube() {
        let g = small_full_structure();
        let cfg = WalkConfig { n_spins: 40, n_steps: 300, seed: 31, ..Default::default() };
        let scheme = GradientScheme::make(&[Vector3::z()], &[1.0], 0.5, 1.0).unwrap();
        let paths = trajectories(&g, &cfg, &scheme, 8).unwrap();
        assert_eq!(paths.len(), 8);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        for (j, path) in paths.iter().enumerate() {
            assert_eq!(path.len(), 301);
            for p in path {
                for (i, &x) in p.iter().enumerate() {
                    assert!((0.0..=24.0).contains(&(x as f64)), "axis {i}: {x}");
                }
            }
            let last = path.last().unwrap();
            for i in 0..3 {
                assert_relative_eq!(last[i] as f64, e.pos[j][i], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn config_validation_errors() {
        let g = free_voxel(50.0);
        let bad = |cfg: WalkConfig| cfg.validate(&g).unwrap_err();
        assert!(matches!(bad(WalkConfig { n_spins: 0, ..Default::default() }), WalkError::NoSpins));
        assert!(matches!(
            bad(WalkConfig { timestep: 0.0, ..Default::default() }),
            WalkError::BadTimestep(_)
        ));
        assert!(matches!(
            bad(WalkConfig { d_eaec: 3.5, ..Default::default() }),
            WalkError::BadDiffusivity(_)
        ));
        assert!(matches!(
            bad(WalkConfig { d_ia: -0.1, ..Default::default() }),
            WalkError::BadDiffusivity(_)
        ));
        let mix = HealthMix { fraction_healthy: 0.5, d_healthy: 2.0, d_diseased: 1.0 };
        assert!(matches!(
            bad(WalkConfig { health_mix: Some(mix), ..Default::default() }),
            WalkError::HealthMixWithoutFibers
        ));
        let mix = HealthMix { fraction_healthy: 1.5, d_healthy: 2.0, d_diseased: 1.0 };
        assert!(matches!(
            bad(WalkConfig { health_mix: Some(mix), ..Default::default() }),
            WalkError::BadHealthFraction(_)
        ));
    }

    #[test]
    fn short_walk_cannot_cover_the_echo() {
        let g = free_voxel(50.0);
        let cfg = WalkConfig { n_spins: 10, n_steps: 100, ..Default::default() };
        let scheme = GradientScheme::default_three_axis(); // needs 4800 steps
        assert!(matches!(
            simulate(&g, &cfg, &scheme),
            Err(WalkError::Sequence(SequenceError::DurationMismatch { .. }))
        ));
    }

    #[test]
    fn health_mix_slows_diseased_fibers() {
        let g = VoxelGeometry::build(&VoxelSpec {
            side: 24.0,
            fiber: Some(FiberSpec { radius: 1.0, pitch: 3.0 }),
            cells: None,
        })
        .unwrap();
        let mk = |fraction_healthy: f64| WalkConfig {
            n_spins: 8000,
            n_steps: 600,
            seed: 5,
            health_mix: Some(HealthMix { fraction_healthy, d_healthy: 2.0, d_diseased: 1.0 }),
            ..Default::default()
        };
        let scheme = short_scheme(&[Vector3::z()], &[1.0]);
        let all_healthy = simulate(&g, &mk(1.0), &scheme).unwrap();
        let half = simulate(&g, &mk(0.5), &scheme).unwrap();
        assert!(all_healthy.healthy.iter().all(|&h| h));
        let n_diseased = half
            .compartment
            .iter()
            .zip(half.healthy.iter())
            .filter(|(c, h)| **c == Compartment::IntraAxonal && !**h)
            .count();
        assert!(n_diseased > 0);
        // Slower diseased axons -> less z attenuation at the same b.
        let s_healthy = all_healthy.signal(&scheme).unwrap().s[1];
        let s_half = half.signal(&scheme).unwrap().s[1];
        assert!(
            s_half > s_healthy + 0.01,
            "half {s_half} vs healthy {s_healthy}"
        );
    }

    #[test]
    fn displacement_tensor_rejects_bad_input() {
        let g = free_voxel(50.0);
        let cfg = WalkConfig { n_spins: 10, n_steps: 300, ..Default::default() };
        let scheme = GradientScheme::make(&[Vector3::z()], &[1.0], 0.5, 1.0).unwrap();
        let e = simulate(&g, &cfg, &scheme).unwrap();
        assert!(matches!(
            displacement_tensor(&e, 0.0, None),
            Err(WalkError::BadTau(_))
        ));
        assert!(matches!(
            displacement_tensor(&e, 1.0, Some(Compartment::IntraAxonal)),
            Err(WalkError::EmptySelection)
        ));
    }

    #[test]
    fn folded_density_stays_uniform() {
        // Uniform initial density must remain uniform in the free voxel:
        // chi-square on an 8^3 occupancy histogram of folded endpoints.
        let g = free_voxel(100.0);
        let cfg = WalkConfig { n_spins: 30_000, n_steps: 600, seed: 23, ..Default::default() };
        let scheme = short_scheme(&[Vector3::x()], &[1.0]);
        let e = simulate(&g, &cfg, &scheme).unwrap();
        let mut counts = vec![0u64; 512];
        for p in &e.pos {
            let ix = ((p.x / 12.5) as usize).min(7);
            let iy = ((p.y / 12.5) as usize).min(7);
            let iz = ((p.z / 12.5) as usize).min(7);
            counts[(ix * 8 + iy) * 8 + iz] += 1;
        }
        let (_chi2, p_value) = crate::stats::chi_square_uniform(&counts).unwrap();
        assert!(p_value > 0.01, "p = {p_value}");
    }
}
