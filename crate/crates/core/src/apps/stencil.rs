//! Acoustic isotropic wave propagation with a radius-`R` star stencil,
//! decomposed along x over the world endpoints.
//!
//! Every endpoint keeps two time levels in a padded `[x][y][z]` slab
//! (z fastest) with `R` planes of halo on each x side and `R` zero planes
//! of padding in y and z. The domain boundary is zero Dirichlet. A
//! constant-amplitude point source at the grid centre adds `dt² · amp`
//! after every update.

use std::time::{Duration, Instant};

use super::{halo_one_sided, halo_two_sided};
use crate::collectives::{from_bytes, to_bytes};
use crate::error::{Error, Result};
use crate::ids::sha256_hex;
use crate::memory::{AllocRecord, GlobalAddress};
use crate::runtime::Runtime;
use crate::transport::Endpoint;

pub const GRID_SPACING: f64 = 10.0;
pub const VELOCITY: f64 = 1500.0;

/// Central second-derivative weights `c0, c1, ..., cR`.
pub fn coefficients(radius: usize) -> Result<Vec<f64>> {
    Ok(match radius {
        1 => vec![-2.0, 1.0],
        2 => vec![-5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0],
        3 => vec![-49.0 / 18.0, 3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0],
        4 => vec![
            -205.0 / 72.0,
            8.0 / 5.0,
            -1.0 / 5.0,
            8.0 / 315.0,
            -1.0 / 560.0,
        ],
        r => {
            return Err(Error::InvalidConfig(format!(
                "stencil radius {r} not in 1..=4"
            )))
        }
    })
}

/// Half the leapfrog stability limit `2h / (v · sqrt(3 · Σ|c|))`, where the
/// sum runs over the full symmetric stencil.
pub fn time_step(coeffs: &[f64]) -> f64 {
    let s: f64 = coeffs[0].abs() + 2.0 * coeffs[1..].iter().map(|c| c.abs()).sum::<f64>();
    0.5 * 2.0 * GRID_SPACING / (VELOCITY * (3.0 * s).sqrt())
}

/// Inclusive global x range owned by block `r` of `nranks`.
pub fn rank_xmin_xmax(r: usize, nranks: usize, nx: usize) -> (usize, usize) {
    (r * nx / nranks, (r + 1) * nx / nranks - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaloMode {
    /// Two puts into the neighbours' halos, then fence and barrier.
    OneSided,
    /// Matched sends and receives through staged messages.
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub steps: usize,
    pub radius: usize,
    /// Source amplitude; zero disables the source.
    pub amplitude: f64,
    pub halo: HaloMode,
}

impl StencilSpec {
    pub fn cube(n: usize, steps: usize) -> Self {
        StencilSpec {
            nx: n,
            ny: n,
            nz: n,
            steps,
            radius: 4,
            amplitude: 1.0,
            halo: HaloMode::OneSided,
        }
    }
}

/// Geometry shared by every endpoint of the decomposition.
#[derive(Debug, Clone)]
pub struct Slab {
    pub ring: Vec<Endpoint>,
    pub radius: usize,
    pub ny: usize,
    pub nz: usize,
    pub xmin: Vec<usize>,
    pub widths: Vec<usize>,
}

impl Slab {
    pub fn new(ring: Vec<Endpoint>, spec: &StencilSpec) -> Result<Self> {
        let p = ring.len();
        if p > spec.nx {
            return Err(Error::DecompositionError(format!(
                "{p} endpoints cannot split nx = {}",
                spec.nx
            )));
        }
        let (xmin, widths): (Vec<_>, Vec<_>) = (0..p)
            .map(|r| {
                let (lo, hi) = rank_xmin_xmax(r, p, spec.nx);
                (lo, hi + 1 - lo)
            })
            .unzip();
        if let Some(w) = widths.iter().find(|&&w| w < spec.radius) {
            return Err(Error::DecompositionError(format!(
                "slab width {w} is smaller than the stencil radius {}",
                spec.radius
            )));
        }
        Ok(Slab {
            ring,
            radius: spec.radius,
            ny: spec.ny,
            nz: spec.nz,
            xmin,
            widths,
        })
    }

    pub fn py(&self) -> usize {
        self.ny + 2 * self.radius
    }

    pub fn pz(&self) -> usize {
        self.nz + 2 * self.radius
    }

    /// Elements in one padded x plane.
    pub fn plane(&self) -> usize {
        self.py() * self.pz()
    }

    pub fn plane_bytes(&self) -> u64 {
        (self.plane() * 8) as u64
    }

    /// Bytes of one field buffer; sized for the widest endpoint.
    pub fn buffer_bytes(&self) -> u64 {
        let w = self.widths.iter().copied().max().unwrap_or(0);
        (w + 2 * self.radius) as u64 * self.plane_bytes()
    }

    /// Byte offset of local padded plane `x` within a buffer.
    pub fn plane_offset(&self, x: usize) -> u64 {
        x as u64 * self.plane_bytes()
    }

    /// Bytes of `R` planes: one halo.
    pub fn halo_bytes(&self) -> u64 {
        self.radius as u64 * self.plane_bytes()
    }

    /// Local plane index of the right halo of position `p`.
    pub fn right_halo(&self, p: usize) -> usize {
        self.radius + self.widths[p]
    }

    /// Local plane index of the last `R` interior planes of `p`.
    pub fn last_interior(&self, p: usize) -> usize {
        self.widths[p]
    }

    pub fn left(&self, p: usize) -> Option<usize> {
        p.checked_sub(1)
    }

    pub fn right(&self, p: usize) -> Option<usize> {
        (p + 1 < self.ring.len()).then_some(p + 1)
    }

    pub fn addr(&self, p: usize, buffer_offset: u64, plane: usize) -> GlobalAddress {
        let ep = self.ring[p];
        GlobalAddress::new(ep.rank, ep.device, buffer_offset + self.plane_offset(plane))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checksum {
    pub sum: f64,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct StencilReport {
    /// Global field, x fastest; only on rank 0.
    pub field: Option<Vec<f64>>,
    pub checksum: Option<Checksum>,
    pub elapsed: Duration,
}

/// Little-endian f64 dump of a field.
pub fn field_bytes(field: &[f64]) -> Vec<u8> {
    to_bytes(field)
}

pub fn checksum(field: &[f64]) -> Checksum {
    Checksum {
        sum: field.iter().sum(),
        sha256: sha256_hex(&field_bytes(field)),
    }
}

/// One leapfrog update of the interior of `cur` into `prev` (which becomes
/// the next level). `x_global` is the global index of interior plane 0.
#[allow(clippy::too_many_arguments)]
fn update(
    cur: &[f64],
    prev: &mut [f64],
    width: usize,
    x_global: usize,
    slab: &Slab,
    coeffs: &[f64],
    courant2: f64,
    source: Option<((usize, usize, usize), f64)>,
) {
    let r = slab.radius;
    let (py, pz) = (slab.py(), slab.pz());
    let sx = py * pz;
    let c0 = 3.0 * coeffs[0];
    for x in r..r + width {
        for y in r..r + slab.ny {
            let row = (x * py + y) * pz;
            for z in r..r + slab.nz {
                let i = row + z;
                let mut lap = c0 * cur[i];
                for (k, c) in coeffs.iter().enumerate().skip(1) {
                    let sum = cur[i + k * sx]
                        + cur[i - k * sx]
                        + cur[i + k * pz]
                        + cur[i - k * pz]
                        + cur[i + k]
                        + cur[i - k];
                    lap += c * sum;
                }
                prev[i] = 2.0 * cur[i] - prev[i] + courant2 * lap;
            }
        }
    }
    if let Some(((gx, gy, gz), add)) = source {
        if gx >= x_global && gx < x_global + width {
            let i = ((gx - x_global + r) * py + gy + r) * pz + gz + r;
            prev[i] += add;
        }
    }
}

pub fn stencil_minimod(rt: &Runtime, spec: &StencilSpec) -> Result<StencilReport> {
    let world = rt.world();
    let slab = Slab::new(world.members().to_vec(), spec)?;
    let coeffs = coefficients(spec.radius)?;
    let dt = time_step(&coeffs);
    let courant2 = (VELOCITY * dt / GRID_SPACING).powi(2);
    let source = (spec.amplitude != 0.0).then_some((
        (spec.nx / 2, spec.ny / 2, spec.nz / 2),
        dt * dt * spec.amplitude,
    ));

    let bytes = slab.buffer_bytes();
    let mut levels: Vec<[AllocRecord; 2]> = Vec::new();
    for d in 0..rt.devices_per_rank() {
        levels.push([rt.alloc_symmetric(bytes, d)?, rt.alloc_symmetric(bytes, d)?]);
    }
    let offsets = [levels[0][0].addr.offset, levels[0][1].addr.offset];
    if levels
        .iter()
        .any(|l| l[0].addr.offset != offsets[0] || l[1].addr.offset != offsets[1])
    {
        return Err(Error::CollectiveMismatch(
            "field buffers landed at different offsets on different devices".into(),
        ));
    }
    let mine: Vec<usize> = (0..slab.ring.len())
        .filter(|&p| slab.ring[p].rank == rt.rank())
        .collect();
    let zeros = vec![0u8; bytes as usize];
    for lv in &levels {
        for rec in lv {
            rt.write_local(rec.addr, &zeros)?;
        }
    }
    rt.barrier(&world)?;

    let start = Instant::now();
    let mut cur = 0usize;
    for step in 0..spec.steps {
        let next = 1 - cur;
        for &p in &mine {
            let cur_addr = slab.addr(p, offsets[cur], 0);
            let next_addr = slab.addr(p, offsets[next], 0);
            let u = from_bytes::<f64>(&rt.read_local(cur_addr, bytes)?);
            let mut v = from_bytes::<f64>(&rt.read_local(next_addr, bytes)?);
            update(
                &u,
                &mut v,
                slab.widths[p],
                slab.xmin[p],
                &slab,
                &coeffs,
                courant2,
                source,
            );
            let lo = slab.radius * slab.plane();
            let hi = (slab.radius + slab.widths[p]) * slab.plane();
            rt.write_local(
                slab.addr(p, offsets[next], slab.radius),
                &to_bytes(&v[lo..hi]),
            )?;
        }
        match spec.halo {
            HaloMode::OneSided => halo_one_sided::exchange_halos(rt, &slab, offsets[next])?,
            HaloMode::TwoSided => {
                halo_two_sided::exchange_halos(rt, &slab, offsets[next], step as u64)?
            }
        }
        cur = next;
    }
    let elapsed = start.elapsed();

    let field = if rt.rank() == 0 {
        let (nx, ny, nz) = (spec.nx, spec.ny, spec.nz);
        let mut out = vec![0.0; nx * ny * nz];
        for p in 0..slab.ring.len() {
            let w = slab.widths[p];
            let raw = rt.get_bytes(
                slab.addr(p, offsets[cur], slab.radius),
                w as u64 * slab.plane_bytes(),
            )?;
            let vals = from_bytes::<f64>(&raw);
            for lx in 0..w {
                let gx = slab.xmin[p] + lx;
                for y in 0..ny {
                    for z in 0..nz {
                        let i = (lx * slab.py() + y + slab.radius) * slab.pz() + z + slab.radius;
                        out[(z * ny + y) * nx + gx] = vals[i];
                    }
                }
            }
        }
        Some(out)
    } else {
        None
    };
    rt.barrier(&world)?;
    for lv in &levels {
        for rec in lv {
            rt.free(rec)?;
        }
    }
    let checksum = field.as_deref().map(checksum);
    Ok(StencilReport {
        field,
        checksum,
        elapsed,
    })
}
