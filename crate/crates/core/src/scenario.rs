//! Scenario generation: the driving noise of one Monte Carlo experiment.
//!
//! A `ScenarioBatch` holds, for `P` paths on an `N`-step uniform grid,
//! the Brownian increments `dB[p][i][c]` (variance dt per channel) and the
//! raw Poisson counts `dN[p][i][j]` for each mark of the jump measure.
//! Every entry comes from its own counter-based stream (see [`crate::rng`]),
//! so regeneration with the same seed is bit-identical no matter how the
//! work is scheduled.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::stream;

/// Uniform time grid on [0, T] with N steps, t_i = i * dt.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Invalid("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }
}

/// Seed bundle for scenario generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngSpec {
    pub seed: u64,
}

/// Default memory budget for one batch: 4 GiB.
pub const DEFAULT_BUDGET: u64 = 4 << 30;

const MAGIC: &[u8; 4] = b"FBMP";
const FORMAT_VERSION: u16 = 1;

/// Driving noise for P paths. Immutable after generation.
pub struct ScenarioBatch {
    pub grid: TimeGrid,
    pub paths: usize,
    pub brownian_dim: usize,
    /// Intensity pi_j of each mark; the compensator of mark j over one step
    /// is pi_j * dt.
    pub mark_rates: Vec<f64>,
    pub seed: u64,
    db: Vec<f64>,
    dn: Vec<u32>,
}

impl std::fmt::Debug for ScenarioBatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScenarioBatch")
            .field("paths", &self.paths)
            .field("steps", &self.grid.steps)
            .field("brownian_dim", &self.brownian_dim)
            .field("marks", &self.mark_rates.len())
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl ScenarioBatch {
    /// Draws a fresh batch. dB entries are N(0, dt), dN entries are
    /// Poisson(pi_j * dt) counts, all independent across (path, step, channel).
    pub fn generate(
        grid: TimeGrid,
        paths: usize,
        brownian_dim: usize,
        mark_rates: &[f64],
        rng: RngSpec,
    ) -> Result<Self> {
        Self::generate_with_budget(grid, paths, brownian_dim, mark_rates, rng, DEFAULT_BUDGET)
    }

    pub fn generate_with_budget(
        grid: TimeGrid,
        paths: usize,
        brownian_dim: usize,
        mark_rates: &[f64],
        rng: RngSpec,
        budget: u64,
    ) -> Result<Self> {
        if paths == 0 {
            return Err(Error::Invalid("batch needs at least one path".into()));
        }
        for (j, &rate) in mark_rates.iter().enumerate() {
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(Error::Invalid(format!("mark {j} has non-positive rate {rate}")));
            }
        }
        let n = grid.steps;
        let d = brownian_dim;
        let m = mark_rates.len();
        let required = (paths as u64)
            .saturating_mul(n as u64)
            .saturating_mul(8 * d as u64 + 4 * m as u64);
        if required > budget {
            return Err(Error::ResourceLimit { required, budget });
        }

        let dt = grid.dt();
        let sqrt_dt = dt.sqrt();
        let seed = rng.seed;

        let mut db = vec![0.0f64; paths * n * d];
        let mut dn = vec![0u32; paths * n * m];

        // One path per chunk; every entry has its own stream, so the fill is
        // order-independent and worker-count-independent. The chunked loops
        // need a positive width, hence the guards for channel-free batches.
        if d > 0 {
            db.par_chunks_mut(n * d).enumerate().for_each(|(p, chunk)| {
                for i in 0..n {
                    for c in 0..d {
                        let mut s = stream(seed, p as u64, i as u64, c as u64);
                        chunk[i * d + c] = sqrt_dt * s.normal();
                    }
                }
            });
        }
        if m > 0 {
            dn.par_chunks_mut(n * m).enumerate().for_each(|(p, chunk)| {
                for i in 0..n {
                    for j in 0..m {
                        let mut s = stream(seed, p as u64, i as u64, (d + j) as u64);
                        chunk[i * m + j] = s.poisson(mark_rates[j] * dt);
                    }
                }
            });
        }

        Ok(ScenarioBatch {
            grid,
            paths,
            brownian_dim,
            mark_rates: mark_rates.to_vec(),
            seed,
            db,
            dn,
        })
    }

    #[inline]
    pub fn mark_count(&self) -> usize {
        self.mark_rates.len()
    }

    /// Brownian increment vector of step i on path p (length d).
    #[inline]
    pub fn db(&self, p: usize, i: usize) -> &[f64] {
        let d = self.brownian_dim;
        let base = (p * self.grid.steps + i) * d;
        &self.db[base..base + d]
    }

    /// Raw jump counts of step i on path p (length M).
    #[inline]
    pub fn dn(&self, p: usize, i: usize) -> &[u32] {
        let m = self.mark_count();
        let base = (p * self.grid.steps + i) * m;
        &self.dn[base..base + m]
    }

    /// Compensated increment of mark j over step i: dN - pi_j * dt.
    #[inline]
    pub fn compensated(&self, p: usize, i: usize, j: usize) -> f64 {
        self.dn(p, i)[j] as f64 - self.mark_rates[j] * self.grid.dt()
    }

    /// Terminal Brownian value B_T per channel on path p.
    pub fn brownian_total(&self, p: usize) -> Vec<f64> {
        let d = self.brownian_dim;
        let mut out = vec![0.0; d];
        for i in 0..self.grid.steps {
            for (c, acc) in out.iter_mut().enumerate() {
                *acc += self.db(p, i)[c];
            }
        }
        out
    }

    /// Terminal raw count N_T per mark on path p.
    pub fn counts_total(&self, p: usize) -> Vec<u64> {
        let m = self.mark_count();
        let mut out = vec![0u64; m];
        for i in 0..self.grid.steps {
            for (j, acc) in out.iter_mut().enumerate() {
                *acc += self.dn(p, i)[j] as u64;
            }
        }
        out
    }

    /// Binary dump. Header: magic "FBMP", format version (u16), then
    /// P, N, d, M as little-endian u32 and the seed as u64, followed by the
    /// dB block (row-major f64) and the dN block (row-major u32).
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for value in [
            self.paths as u32,
            self.grid.steps as u32,
            self.brownian_dim as u32,
            self.mark_count() as u32,
        ] {
            w.write_all(&value.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for value in &self.db {
            w.write_all(&value.to_le_bytes())?;
        }
        for value in &self.dn {
            w.write_all(&value.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump back. The header does not carry the horizon or the mark
    /// rates, so the caller must supply the grid and rates it expects; the
    /// stored step, path and channel counts are checked against them.
    pub fn load<R: Read>(mut r: R, grid: TimeGrid, mark_rates: &[f64]) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes in scenario dump".into()));
        }
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let version = u16::from_le_bytes(u16buf);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported scenario format version {version}")));
        }
        let mut u32buf = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let paths = next_u32(&mut r)? as usize;
        let steps = next_u32(&mut r)? as usize;
        let d = next_u32(&mut r)? as usize;
        let m = next_u32(&mut r)? as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);

        if steps != grid.steps {
            return Err(Error::Format(format!(
                "dump has {steps} steps, caller expects {}",
                grid.steps
            )));
        }
        if m != mark_rates.len() {
            return Err(Error::Format(format!(
                "dump has {m} marks, caller expects {}",
                mark_rates.len()
            )));
        }

        let mut db = vec![0.0f64; paths * steps * d];
        let mut f64buf = [0u8; 8];
        for value in &mut db {
            r.read_exact(&mut f64buf)?;
            *value = f64::from_le_bytes(f64buf);
        }
        let mut dn = vec![0u32; paths * steps * m];
        for value in &mut dn {
            r.read_exact(&mut u32buf)?;
            *value = u32::from_le_bytes(u32buf);
        }

        Ok(ScenarioBatch {
            grid,
            paths,
            brownian_dim: d,
            mark_rates: mark_rates.to_vec(),
            seed,
            db,
            dn,
        })
    }
}
