//! Three-compartment voxel substrate.
//!
//! A cubic voxel holds a square lattice of z-parallel axon cylinders and a
//! cubic lattice of cell spheres. Cylinders may pierce spheres; spheres never
//! intersect each other. Both lattices are aligned so the voxel faces are
//! mirror planes of the substrate, which keeps specular face reflection
//! consistent with compartment confinement.

use nalgebra::Vector3;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

use crate::quadrature::adaptive_simpson;

/// Tissue compartment of a point. Precedence when regions overlap:
/// `IntraAxonal` > `IntraCellular` > `ExtraCellular`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Compartment {
    /// Inside an axon cylinder (IA).
    IntraAxonal,
    /// Inside a cell sphere but outside every cylinder (ICEA).
    IntraCellular,
    /// Outside all cylinders and spheres (EAEC).
    ExtraCellular,
}

impl Compartment {
    pub const ALL: [Compartment; 3] = [
        Compartment::IntraAxonal,
        Compartment::IntraCellular,
        Compartment::ExtraCellular,
    ];

    /// Conventional short label used in file output.
    pub fn label(self) -> &'static str {
        match self {
            Compartment::IntraAxonal => "IA",
            Compartment::IntraCellular => "ICEA",
            Compartment::ExtraCellular => "EAEC",
        }
    }
}

#[derive(Error, Debug)]
pub enum GeometryError {
    #[error("voxel side must be positive, got {0}")]
    NonPositiveSide(f64),
    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("lattice pitch must be positive, got {0}")]
    NonPositivePitch(f64),
    #[error("fibers overlap: radius {radius} must be below half the pitch {pitch}")]
    OverlappingFibers { radius: f64, pitch: f64 },
    #[error("cell spheres overlap: radius {radius} exceeds half the pitch {pitch}")]
    OverlappingCells { radius: f64, pitch: f64 },
    #[error(
        "cell fraction target {target} is unreachable; closest achievable is {achieved} \
         with {count} spheres per axis"
    )]
    InfeasibleCellTarget { target: f64, achieved: f64, count: usize },
    #[error("point ({0}, {1}, {2}) lies outside the voxel")]
    OutOfVoxel(f64, f64, f64),
}

/// Requested substrate layout. Lattice pitches are requests: each lattice is
/// snapped to an integer cell count so it tiles the voxel exactly (see
/// [`FiberLattice`]).
#[derive(Clone, Debug)]
pub struct VoxelSpec {
    /// Voxel edge length, um.
    pub side: f64,
    pub fiber: Option<FiberSpec>,
    pub cells: Option<CellSpec>,
}

#[derive(Clone, Debug)]
pub struct FiberSpec {
    /// Cylinder radius, um.
    pub radius: f64,
    /// Requested center-to-center spacing, um.
    pub pitch: f64,
}

#[derive(Clone, Debug)]
pub struct CellSpec {
    /// Sphere radius, um.
    pub radius: f64,
    pub layout: CellLayout,
}

#[derive(Clone, Debug)]
pub enum CellLayout {
    /// Solve the sphere count so the net cell volume fraction lands within
    /// 0.2 percentage points of the target.
    TargetFraction(f64),
    /// Explicit lattice pitch, um.
    Pitch(f64),
}

/// Square lattice of z-parallel cylinders with centers at ((i+1/2)p, (j+1/2)p).
///
/// The requested pitch rarely divides the voxel side exactly, so the unit cell
/// is rescaled uniformly (radius and pitch together, by side/(count*pitch)) to
/// tile the voxel with an integer number of cells. The rescale preserves the
/// area fraction pi r^2 / p^2 exactly and keeps the voxel faces mirror planes.
#[derive(Clone, Debug)]
pub struct FiberLattice {
    pub radius: f64,
    pub pitch: f64,
    /// Cylinders per axis; the voxel holds count^2 fibers.
    pub count: usize,
}

impl FiberLattice {
    fn new(side: f64, spec: &FiberSpec) -> Result<Self, GeometryError> {
        if spec.radius <= 0.0 {
            return Err(GeometryError::NonPositiveRadius(spec.radius));
        }
        if spec.pitch <= 0.0 {
            return Err(GeometryError::NonPositivePitch(spec.pitch));
        }
        let count = (side / spec.pitch).round().max(1.0) as usize;
        let scale = side / (count as f64 * spec.pitch);
        let lattice = FiberLattice {
            radius: spec.radius * scale,
            pitch: spec.pitch * scale,
            count,
        };
        if lattice.radius >= lattice.pitch / 2.0 {
            return Err(GeometryError::OverlappingFibers {
                radius: lattice.radius,
                pitch: lattice.pitch,
            });
        }
        Ok(lattice)
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            (ix as f64 + 0.5) * self.pitch,
            (iy as f64 + 0.5) * self.pitch,
        )
    }

    /// Lattice cell containing (x, y), clamped to the voxel.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        (self.axis_cell(x), self.axis_cell(y))
    }

    #[inline]
    fn axis_cell(&self, v: f64) -> usize {
        let i = (v / self.pitch).floor();
        (i.max(0.0) as usize).min(self.count - 1)
    }

    /// Flat fiber index for per-fiber bookkeeping.
    #[inline]
    pub fn flat_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.count + ix
    }

    pub fn total(&self) -> usize {
        self.count * self.count
    }

    /// Squared planar distance from (x, y) to the nearest cylinder axis.
    #[inline]
    pub fn nearest_axis_dist_sq(&self, x: f64, y: f64) -> f64 {
        let (ix, iy) = self.cell_of(x, y);
        let (cx, cy) = self.center(ix, iy);
        let dx = x - cx;
        let dy = y - cy;
        dx * dx + dy * dy
    }
}

/// Cubic lattice of spheres with centers at ((i+1/2)p, (j+1/2)p, (k+1/2)p).
/// The pitch is snapped to side/count; sphere radii are not rescaled because
/// the cell volume fraction is computed from the substrate itself.
#[derive(Clone, Debug)]
pub struct CellLattice {
    pub radius: f64,
    pub pitch: f64,
    /// Spheres per axis; the voxel holds count^3 spheres.
    pub count: usize,
}

impl CellLattice {
    fn with_count(side: f64, radius: f64, count: usize) -> Result<Self, GeometryError> {
        let pitch = side / count as f64;
        // Pitch >= 2r guarantees both sphere-sphere disjointness and that no
        // sphere pokes through a voxel face.
        if radius > pitch / 2.0 {
            return Err(GeometryError::OverlappingCells { radius, pitch });
        }
        Ok(CellLattice { radius, pitch, count })
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        Vector3::new(
            (ix as f64 + 0.5) * self.pitch,
            (iy as f64 + 0.5) * self.pitch,
            (iz as f64 + 0.5) * self.pitch,
        )
    }

    #[inline]
    pub fn cell_of(&self, p: &Vector3<f64>) -> (usize, usize, usize) {
        (
            self.axis_cell(p.x),
            self.axis_cell(p.y),
            self.axis_cell(p.z),
        )
    }

    #[inline]
    fn axis_cell(&self, v: f64) -> usize {
        let i = (v / self.pitch).floor();
        (i.max(0.0) as usize).min(self.count - 1)
    }

    pub fn total(&self) -> usize {
        self.count * self.count * self.count
    }

    /// Squared distance from p to the nearest sphere center.
    #[inline]
    pub fn nearest_center_dist_sq(&self, p: &Vector3<f64>) -> f64 {
        let (ix, iy, iz) = self.cell_of(p);
        (p - self.center(ix, iy, iz)).norm_squared()
    }
}

/// Net volume fractions of the three compartments; they sum to one.
#[derive(Clone, Copy, Debug)]
pub struct VolumeFractions {
    pub fiber: f64,
    pub cell: f64,
    pub free: f64,
}

/// Immutable voxel substrate shared by every replicate of an experiment.
#[derive(Clone, Debug)]
pub struct VoxelGeometry {
    side: f64,
    fiber: Option<FiberLattice>,
    cells: Option<CellLattice>,
    net_cell_volume: f64,
}

impl VoxelGeometry {
    pub fn build(spec: &VoxelSpec) -> Result<Self, GeometryError> {
        if spec.side <= 0.0 || !spec.side.is_finite() {
            return Err(GeometryError::NonPositiveSide(spec.side));
        }
        let fiber = spec
            .fiber
            .as_ref()
            .map(|f| FiberLattice::new(spec.side, f))
            .transpose()?;
        let cells = spec
            .cells
            .as_ref()
            .map(|c| Self::build_cells(spec.side, c, fiber.as_ref()))
            .transpose()?;
        let net_cell_volume = cells
            .as_ref()
            .map(|c| net_cell_volume_of(c, fiber.as_ref()))
            .unwrap_or(0.0);
        Ok(VoxelGeometry {
            side: spec.side,
            fiber,
            cells,
            net_cell_volume,
        })
    }

    fn build_cells(
        side: f64,
        spec: &CellSpec,
        fiber: Option<&FiberLattice>,
    ) -> Result<CellLattice, GeometryError> {
        if spec.radius <= 0.0 {
            return Err(GeometryError::NonPositiveRadius(spec.radius));
        }
        match spec.layout {
            CellLayout::Pitch(pitch) => {
                if pitch <= 0.0 {
                    return Err(GeometryError::NonPositivePitch(pitch));
                }
                let count = (side / pitch).round().max(1.0) as usize;
                CellLattice::with_count(side, spec.radius, count)
            }
            CellLayout::TargetFraction(target) => {
                // The sphere count per axis is integral, so scan the feasible
                // counts and keep the one whose net fraction is closest.
                let max_count = (side / (2.0 * spec.radius)).floor() as usize;
                let mut best: Option<(f64, usize, f64)> = None;
                for count in 1..=max_count {
                    let lattice = CellLattice::with_count(side, spec.radius, count)?;
                    let frac = net_cell_volume_of(&lattice, fiber) / side.powi(3);
                    let err = (frac - target).abs();
                    if best.map_or(true, |(e, _, _)| err < e) {
                        best = Some((err, count, frac));
                    }
                }
                match best {
                    Some((err, count, _)) if err <= 2e-3 => {
                        CellLattice::with_count(side, spec.radius, count)
                    }
                    Some((_, count, achieved)) => Err(GeometryError::InfeasibleCellTarget {
                        target,
                        achieved,
                        count,
                    }),
                    None => Err(GeometryError::InfeasibleCellTarget {
                        target,
                        achieved: 0.0,
                        count: 0,
                    }),
                }
            }
        }
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn fiber(&self) -> Option<&FiberLattice> {
        self.fiber.as_ref()
    }

    pub fn cells(&self) -> Option<&CellLattice> {
        self.cells.as_ref()
    }

    /// Compartment of a point inside the voxel. Points on a wall (distance
    /// exactly the radius) classify as the interior compartment.
    pub fn classify(&self, p: &Vector3<f64>) -> Result<Compartment, GeometryError> {
        let s = self.side;
        if !(0.0..=s).contains(&p.x) || !(0.0..=s).contains(&p.y) || !(0.0..=s).contains(&p.z) {
            return Err(GeometryError::OutOfVoxel(p.x, p.y, p.z));
        }
        Ok(self.classify_inside(p))
    }

    /// Classification without the bounds check; callers guarantee p is inside.
    #[inline]
    pub fn classify_inside(&self, p: &Vector3<f64>) -> Compartment {
        if let Some(f) = &self.fiber {
            if f.nearest_axis_dist_sq(p.x, p.y) <= f.radius * f.radius {
                return Compartment::IntraAxonal;
            }
        }
        if let Some(c) = &self.cells {
            if c.nearest_center_dist_sq(p) <= c.radius * c.radius {
                return Compartment::IntraCellular;
            }
        }
        Compartment::ExtraCellular
    }

    /// Total sphere volume minus the volume of every cylinder piece inside a
    /// sphere (those pieces are intra-axonal, not cell).
    pub fn net_cell_volume(&self) -> f64 {
        self.net_cell_volume
    }

    /// Exact volume fractions of the substrate. The fiber fraction is the
    /// closed-form lattice ratio pi r^2 / p^2; the free fraction closes the sum.
    pub fn volume_fractions(&self) -> VolumeFractions {
        let fiber = self
            .fiber
            .as_ref()
            .map(|f| PI * f.radius * f.radius / (f.pitch * f.pitch))
            .unwrap_or(0.0);
        let cell = self.net_cell_volume / self.side.powi(3);
        VolumeFractions {
            fiber,
            cell,
            free: 1.0 - fiber - cell,
        }
    }
}

/// Volume of the intersection of a sphere with an infinite z-parallel
/// cylinder whose axis passes through `axis_xy`.
pub fn fiber_in_sphere_volume(
    sphere_center: &Vector3<f64>,
    sphere_radius: f64,
    axis_xy: (f64, f64),
    cyl_radius: f64,
) -> f64 {
    let dx = sphere_center.x - axis_xy.0;
    let dy = sphere_center.y - axis_xy.1;
    cylinder_sphere_overlap(sphere_radius, cyl_radius, (dx * dx + dy * dy).sqrt())
}

/// Overlap volume as a function of the planar distance `d` between the sphere
/// center and the cylinder axis.
///
/// Writing the sphere chord over the cylinder cross-section reduces the triple
/// integral to a single radial one:
///   V = int_0^rs 4 rho psi(rho) sqrt(rs^2 - rho^2) drho,
/// where psi is the half-angle subtended by the cylinder disk at planar
/// radius rho from the sphere center. Evaluated by adaptive quadrature to a
/// relative error around 1e-6, with the integrand split at its angular kinks.
pub fn cylinder_sphere_overlap(r_sphere: f64, r_cyl: f64, d: f64) -> f64 {
    if r_sphere <= 0.0 || r_cyl <= 0.0 {
        return 0.0;
    }
    if d >= r_sphere + r_cyl {
        return 0.0;
    }
    let full_sphere = 4.0 / 3.0 * PI * r_sphere.powi(3);
    if d + r_sphere <= r_cyl {
        return full_sphere;
    }
    let rs2 = r_sphere * r_sphere;
    // Half-angle of the cylinder disk seen from the sphere center at radius rho.
    let psi = move |rho: f64| -> f64 {
        if d <= 1e-12 * r_sphere.max(r_cyl) {
            return if rho <= r_cyl { PI } else { 0.0 };
        }
        if rho <= 1e-300 {
            return if d < r_cyl {
                PI
            } else if d > r_cyl {
                0.0
            } else {
                PI / 2.0
            };
        }
        let c = (rho * rho + d * d - r_cyl * r_cyl) / (2.0 * rho * d);
        c.clamp(-1.0, 1.0).acos()
    };
    let integrand = move |rho: f64| 4.0 * rho * psi(rho) * (rs2 - rho * rho).max(0.0).sqrt();

    // psi has kinks where the clamp saturates; integrate each smooth piece.
    let mut cuts = vec![0.0, r_sphere];
    for candidate in [(d - r_cyl).abs(), d + r_cyl] {
        if candidate > 0.0 && candidate < r_sphere {
            cuts.push(candidate);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += adaptive_simpson(integrand, w[0], w[1], 1e-8);
    }
    total.clamp(0.0, full_sphere)
}

fn net_cell_volume_of(cells: &CellLattice, fiber: Option<&FiberLattice>) -> f64 {
    let sphere_vol = 4.0 / 3.0 * PI * cells.radius.powi(3);
    let Some(f) = fiber else {
        return cells.total() as f64 * sphere_vol;
    };
    // Piercing volume depends only on the planar axis distance, so spheres in
    // the same (x, y) column share it and repeated distances are memoized.
    let reach = cells.radius + f.radius;
    let mut cache: BTreeMap<u64, f64> = BTreeMap::new();
    let mut column_total = 0.0;
    for ix in 0..cells.count {
        for iy in 0..cells.count {
            let cx = (ix as f64 + 0.5) * cells.pitch;
            let cy = (iy as f64 + 0.5) * cells.pitch;
            let mut pierced = 0.0;
            let fx_lo = (((cx - reach) / f.pitch).floor().max(0.0)) as usize;
            let fx_hi = ((((cx + reach) / f.pitch).floor()) as usize).min(f.count - 1);
            let fy_lo = (((cy - reach) / f.pitch).floor().max(0.0)) as usize;
            let fy_hi = ((((cy + reach) / f.pitch).floor()) as usize).min(f.count - 1);
            for fx in fx_lo..=fx_hi {
                for fy in fy_lo..=fy_hi {
                    let (ax, ay) = f.center(fx, fy);
                    let d = ((cx - ax).powi(2) + (cy - ay).powi(2)).sqrt();
                    if d < reach {
                        let v = *cache.entry(d.to_bits()).or_insert_with(|| {
                            cylinder_sphere_overlap(cells.radius, f.radius, d)
                        });
                        pierced += v;
                    }
                }
            }
            column_total += sphere_vol - pierced;
        }
    }
    column_total * cells.count as f64
}
