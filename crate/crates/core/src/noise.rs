//! Discretized space-time white noise.
//!
//! Cell (i, j) of a [`NoiseField`] holds W([t_i, t_{i+1}) × [x_j, x_{j+1})), a
//! Normal(0, Δt·Δx) variable. Normals come from ChaCha8 keyed by the seed (and the
//! refinement lineage), with the parent time row as stream and the word position
//! addressing the cell, so any cell can be regenerated without its predecessors.

use std::io::{self, Read, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("noise: grid needs nx >= 2, got {0}")]
    TooFewCells(usize),
    #[error("noise: grid needs nt >= 1, got {0}")]
    TooFewSteps(usize),
    #[error("noise: final time must be positive and finite, got {0}")]
    BadFinalTime(f64),
    #[error("noise: refinement factors must be at least 1, got ({0}, {1})")]
    BadRefinement(usize, usize),
}

/// Uniform space-time grid on [0,T] × [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub nt: usize,
    pub t_final: f64,
}

impl GridSpec {
    pub fn new(nx: usize, nt: usize, t_final: f64) -> Result<Self, GridError> {
        if nx < 2 {
            return Err(GridError::TooFewCells(nx));
        }
        if nt < 1 {
            return Err(GridError::TooFewSteps(nt));
        }
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(GridError::BadFinalTime(t_final));
        }
        Ok(Self { nx, nt, t_final })
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 / self.nx as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t_final * i as f64 / self.nt as f64
    }

    pub fn refined(&self, rx: usize, rt: usize) -> Result<Self, GridError> {
        if rx == 0 || rt == 0 {
            return Err(GridError::BadRefinement(rx, rt));
        }
        Self::new(self.nx * rx, self.nt * rt, self.t_final)
    }
}

/// One realization of the discretized noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    grid: GridSpec,
    seed: u64,
    /// Refinement factors (rx, rt) applied since the base sample, outermost last.
    lineage: Vec<(usize, usize)>,
    increments: Vec<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, lineage: &[(usize, usize)]) -> [u8; 32] {
    // The base level is keyed by the seed alone; refined levels mix in their lineage.
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    if lineage.is_empty() {
        return key;
    }
    let mut state = splitmix(seed ^ splitmix(lineage.len() as u64));
    for &(rx, rt) in lineage {
        state = splitmix(state ^ ((rx as u64) << 32 | rt as u64));
    }
    for w in 1..4 {
        state = splitmix(state ^ w as u64);
        key[8 * w..8 * w + 8].copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// Standard normals q = 0, 1, 2, ... of one stream, generated in Box–Muller pairs.
/// Normal q uses the u64 words 2⌊q/2⌋ and 2⌊q/2⌋+1 of the stream.
struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    fn new(key: [u8; 32], stream: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    fn seek(&mut self, q: u64) {
        // A pair consumes two u64, i.e. four 32-bit words.
        self.rng.set_word_pos(((q / 2) * 4) as u128);
        self.spare = None;
        if q % 2 == 1 {
            self.next();
        }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// Sample the base-level noise for `seed`.
pub fn sample_noise(grid: GridSpec, seed: u64) -> NoiseField {
    let key = derive_key(seed, &[]);
    let scale = (grid.dt() * grid.dx()).sqrt();
    let mut increments = Vec::with_capacity(grid.nt * grid.nx);
    for i in 0..grid.nt {
        let mut normals = NormalStream::new(key, i as u64);
        increments.extend((0..grid.nx).map(|_| scale * normals.next()));
    }
    NoiseField { grid, seed, lineage: Vec::new(), increments }
}

impl NoiseField {
    /// All increments zero (deterministic control runs).
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, seed: 0, lineage: Vec::new(), increments: vec![0.0; grid.nt * grid.nx] }
    }

    /// Wrap explicit increments (row-major, time × space).
    pub fn from_increments(grid: GridSpec, seed: u64, increments: Vec<f64>) -> Self {
        assert_eq!(increments.len(), grid.nt * grid.nx, "increment array does not match the grid");
        Self { grid, seed, lineage: Vec::new(), increments }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lineage(&self) -> &[(usize, usize)] {
        &self.lineage
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.increments[i * self.grid.nx + j]
    }

    /// Row i (time step [t_i, t_{i+1})).
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.increments[i * self.grid.nx..(i + 1) * self.grid.nx]
    }

    /// Split every cell into rx × rt children whose sum is the parent increment.
    ///
    /// Children are K = rx·rt fresh normals of the child variance, shifted by the common
    /// amount that makes them sum to the parent: exactly the conditional law of the
    /// fine cells given their coarse sum.
    pub fn refine(&self, rx: usize, rt: usize) -> Result<NoiseField, GridError> {
        let child = self.grid.refined(rx, rt)?;
        let mut lineage = self.lineage.clone();
        lineage.push((rx, rt));
        let key = derive_key(self.seed, &lineage);
        let k = rx * rt;
        let scale = (child.dt() * child.dx()).sqrt();
        let mut increments = vec![0.0; child.nt * child.nx];
        let mut raw = vec![0.0; k];
        for i in 0..self.grid.nt {
            let mut normals = NormalStream::new(key, i as u64);
            for j in 0..self.grid.nx {
                for r in raw.iter_mut() {
                    *r = scale * normals.next();
                }
                let shift = (raw.iter().sum::<f64>() - self.get(i, j)) / k as f64;
                for a in 0..rt {
                    for b in 0..rx {
                        increments[(i * rt + a) * child.nx + j * rx + b] = raw[a * rx + b] - shift;
                    }
                }
            }
        }
        Ok(NoiseField { grid: child, seed: self.seed, lineage, increments })
    }

    /// Regenerate the raw standard normal behind cell (i, j) of a base-level field.
    pub fn base_normal(seed: u64, i: usize, j: usize) -> f64 {
        let mut normals = NormalStream::new(derive_key(seed, &[]), i as u64);
        normals.seek(j as u64);
        normals.next()
    }

    /// Dump as a flat little-endian file: nx, nt (u32), T (f64), then the increments.
    pub fn write_binary<W: Write>(&self, w: W) -> io::Result<()> {
        write_grid_array(w, self.grid.nx as u32, self.grid.nt as u32, self.grid.t_final, &self.increments)
    }

    /// Inverse of [`NoiseField::write_binary`]; seed and lineage are not stored.
    pub fn read_binary<R: Read>(r: R) -> io::Result<NoiseField> {
        let (nx, nt, t_final, data) = read_grid_array(r, |nx, nt| nx * nt)?;
        let grid = GridSpec::new(nx, nt, t_final).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Ok(NoiseField::from_increments(grid, 0, data))
    }
}

/// Σ_{i,j} integrand(i, j) · W(cell i, j).
pub fn walsh_integral(field: &NoiseField, mut integrand: impl FnMut(usize, usize) -> f64) -> f64 {
    let nx = field.grid.nx;
    let mut acc = 0.0;
    for i in 0..field.grid.nt {
        let row = field.row(i);
        for j in 0..nx {
            acc += integrand(i, j) * row[j];
        }
    }
    acc
}

/// Header (nx, nt as u32 LE; T as f64 LE) followed by f64 LE values.
pub fn write_grid_array<W: Write>(mut w: W, nx: u32, nt: u32, t_final: f64, data: &[f64]) -> io::Result<()> {
    w.write_all(&nx.to_le_bytes())?;
    w.write_all(&nt.to_le_bytes())?;
    w.write_all(&t_final.to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Read a header and `len(nx, nt)` values.
pub fn read_grid_array<R: Read>(mut r: R, len: impl Fn(usize, usize) -> usize) -> io::Result<(usize, usize, f64, Vec<f64>)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    let nx = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let nt = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let t_final = f64::from_le_bytes(head[8..16].try_into().unwrap());
    let n = len(nx, nt);
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((nx, nt, t_final, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert_eq!(GridSpec::new(1, 10, 1.0), Err(GridError::TooFewCells(1)));
        assert_eq!(GridSpec::new(4, 0, 1.0), Err(GridError::TooFewSteps(0)));
        assert!(GridSpec::new(4, 4, 0.0).is_err());
        let g = GridSpec::new(8, 16, 0.5).unwrap();
        assert_eq!(g.dx(), 0.125);
        assert_eq!(g.dt(), 0.5 / 16.0);
        assert_eq!(g.x(8), 1.0);
        assert_eq!(g.t(16), 0.5);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let g = GridSpec::new(16, 8, 1.0).unwrap();
        let a = sample_noise(g, 42);
        let b = sample_noise(g, 42);
        assert_eq!(a, b);
        let c = sample_noise(g, 43);
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn cells_are_addressable() {
        let g = GridSpec::new(7, 5, 0.3).unwrap();
        let f = sample_noise(g, 0xDEAD_BEEF);
        let scale = (g.dt() * g.dx()).sqrt();
        for i in 0..g.nt {
            for j in 0..g.nx {
                let z = NoiseField::base_normal(0xDEAD_BEEF, i, j);
                assert_eq!((scale * z).to_bits(), f.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn refinement_preserves_parent_sums() {
        let g = GridSpec::new(6, 4, 0.5).unwrap();
        let parent = sample_noise(g, 9);
        let child = parent.refine(2, 4).unwrap();
        assert_eq!(child.grid(), GridSpec::new(12, 16, 0.5).unwrap());
        for i in 0..g.nt {
            for j in 0..g.nx {
                let sum: f64 = (0..4).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| child.get(4 * i + a, 2 * j + b)).sum();
                assert!((sum - parent.get(i, j)).abs() < 1e-15);
            }
        }
        let grandchild = child.refine(2, 4).unwrap();
        assert_eq!(grandchild.lineage(), &[(2, 4), (2, 4)]);
        assert_eq!(parent.refine(2, 4).unwrap(), child);
    }

    #[test]
    fn walsh_integral_trivial_cases() {
        let g = GridSpec::new(5, 3, 1.0).unwrap();
        let f = sample_noise(g, 1);
        assert_eq!(walsh_integral(&f, |_, _| 0.0), 0.0);
        let total: f64 = f.increments().iter().sum();
        assert!((walsh_integral(&f, |_, _| 1.0) - total).abs() < 1e-15);
    }

    #[test]
    fn binary_round_trip() {
        let g = GridSpec::new(5, 3, 0.25).unwrap();
        let f = sample_noise(g, 77);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 15 * 8);
        assert_eq!(&buf[0..4], &5u32.to_le_bytes());
        let back = NoiseField::read_binary(&buf[..]).unwrap();
        assert_eq!(back.increments(), f.increments());
        assert_eq!(back.grid(), g);
    }
}
