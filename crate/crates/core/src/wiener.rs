//! Truncated cylindrical Wiener increments with counter-based generation.
//!
//! Entry `(k, j)` of path `(seed, path_id)` is a pure function of those four
//! numbers: a ChaCha20 keystream keyed by `seed`, on stream `path_id`, read
//! at word offset `4·(k·2³² + j)`, fed through the cosine branch of
//! Box–Muller.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SMPWIENR";
const VERSION: u32 = 1;
const FLAG_ANTITHETIC: u32 = 1;
const HEADER_LEN: usize = 16 + 5 * 8;

/// Identity of a path within a batch: the generator stream plus whether the
/// increments are negated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PathId {
    pub path_id: u64,
    pub antithetic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WienerPath {
    increments: Vec<f64>,
    n_steps: usize,
    m_noise: usize,
    dt: f64,
    seed: u64,
    path_id: u64,
    antithetic: bool,
}

fn standard_normal(x1: u64, x2: u64) -> f64 {
    let scale = 1.0 / (1u64 << 53) as f64;
    let u1 = ((x1 >> 11) + 1) as f64 * scale;
    let u2 = (x2 >> 11) as f64 * scale;
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn check_shape(n_steps: usize, m_noise: usize, dt: f64) -> Result<()> {
    if n_steps == 0 || m_noise == 0 {
        return Err(Error::invalid("n_steps and m_noise must be positive"));
    }
    if m_noise > u32::MAX as usize {
        return Err(Error::invalid("m_noise exceeds the 2^32 counter range"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt must be positive"));
    }
    Ok(())
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl WienerPath {
    /// Increments with entry `(k, j) ~ N(0, dt)`.
    pub fn generate(seed: u64, path_id: u64, n_steps: usize, m_noise: usize, dt: f64) -> Result<Self> {
        check_shape(n_steps, m_noise, dt)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(path_id);
        let sd = dt.sqrt();
        let mut increments = Vec::with_capacity(n_steps * m_noise);
        for k in 0..n_steps {
            rng.set_word_pos(((k as u128) << 32) * 4);
            for _ in 0..m_noise {
                let (x1, x2) = (rng.next_u64(), rng.next_u64());
                increments.push(sd * standard_normal(x1, x2));
            }
        }
        Ok(Self {
            increments,
            n_steps,
            m_noise,
            dt,
            seed,
            path_id,
            antithetic: false,
        })
    }

    /// Single entry, computed without generating the rest of the path.
    pub fn entry(seed: u64, path_id: u64, k: usize, j: usize, dt: f64) -> f64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(path_id);
        rng.set_word_pos((((k as u128) << 32) + j as u128) * 4);
        let (x1, x2) = (rng.next_u64(), rng.next_u64());
        dt.sqrt() * standard_normal(x1, x2)
    }

    /// Path with identically zero increments, for deterministic runs.
    pub fn zeros(n_steps: usize, m_noise: usize, dt: f64) -> Result<Self> {
        check_shape(n_steps, m_noise, dt)?;
        Ok(Self {
            increments: vec![0.0; n_steps * m_noise],
            n_steps,
            m_noise,
            dt,
            seed: 0,
            path_id: 0,
            antithetic: false,
        })
    }

    pub fn from_increments(
        increments: Vec<f64>,
        n_steps: usize,
        m_noise: usize,
        dt: f64,
        seed: u64,
        path_id: u64,
    ) -> Result<Self> {
        check_shape(n_steps, m_noise, dt)?;
        crate::error::check_len(n_steps * m_noise, increments.len())?;
        if increments.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            increments,
            n_steps,
            m_noise,
            dt,
            seed,
            path_id,
            antithetic: false,
        })
    }

    /// Entrywise negation; an involution.
    pub fn antithetic(&self) -> Self {
        Self {
            increments: self.increments.iter().map(|x| -x).collect(),
            antithetic: !self.antithetic,
            ..self.clone()
        }
    }

    /// Sums of `factor` consecutive increments: the same Brownian path on a
    /// grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "factor {factor} does not divide n_steps = {}",
                self.n_steps
            )));
        }
        let m = self.m_noise;
        let n_steps = self.n_steps / factor;
        let mut increments = vec![0.0; n_steps * m];
        for (k, row) in self.increments.chunks(m).enumerate() {
            let dst = &mut increments[(k / factor) * m..(k / factor + 1) * m];
            for (d, x) in dst.iter_mut().zip(row) {
                *d += x;
            }
        }
        Ok(Self {
            increments,
            n_steps,
            dt: self.dt * factor as f64,
            ..self.clone()
        })
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `dW_k`, of length `m_noise`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.increments[k * self.m_noise..(k + 1) * self.m_noise]
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn m_noise(&self) -> usize {
        self.m_noise
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_id(&self) -> u64 {
        self.path_id
    }

    pub fn is_antithetic(&self) -> bool {
        self.antithetic
    }

    pub fn id(&self) -> PathId {
        PathId {
            path_id: self.path_id,
            antithetic: self.antithetic,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let flags = if self.antithetic { FLAG_ANTITHETIC } else { 0 };
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&(self.n_steps as u64).to_le_bytes())?;
        w.write_all(&(self.m_noise as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.path_id.to_le_bytes())?;
        for x in &self.increments {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::decode(&bytes).map_err(|reason| format_err(path, reason))
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if &bytes[..8] != MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let flags = u32_at(12);
        if flags & !FLAG_ANTITHETIC != 0 {
            return Err(format!("unknown flags {flags:#x}"));
        }
        let n_steps = usize::try_from(u64_at(16)).map_err(|_| "n_steps overflows")?;
        let m_noise = usize::try_from(u64_at(24)).map_err(|_| "m_noise overflows")?;
        let dt = f64::from_bits(u64_at(32));
        let seed = u64_at(40);
        let path_id = u64_at(48);
        check_shape(n_steps, m_noise, dt).map_err(|e| e.to_string())?;
        let count = n_steps
            .checked_mul(m_noise)
            .ok_or_else(|| "payload size overflows".to_string())?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * 8 {
            return Err(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                count * 8
            ));
        }
        let increments = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            increments,
            n_steps,
            m_noise,
            dt,
            seed,
            path_id,
            antithetic: flags & FLAG_ANTITHETIC != 0,
        })
    }
}

/// Paths sharing one time grid and noise dimension, with distinct ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    paths: Vec<WienerPath>,
}

impl PathBatch {
    pub fn new(paths: Vec<WienerPath>) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| Error::invalid("a batch needs at least one path"))?;
        let (n, m, dt) = (first.n_steps, first.m_noise, first.dt);
        if paths.iter().any(|p| p.n_steps != n || p.m_noise != m || p.dt != dt) {
            return Err(Error::WienerMismatch("paths in a batch must share the grid".into()));
        }
        let mut ids: Vec<PathId> = paths.iter().map(|p| p.id()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate path ids in batch"));
        }
        Ok(Self { paths })
    }

    /// Paths `first_id .. first_id + count`.
    pub fn generate(
        seed: u64,
        first_id: u64,
        count: usize,
        n_steps: usize,
        m_noise: usize,
        dt: f64,
    ) -> Result<Self> {
        check_shape(n_steps, m_noise, dt)?;
        let paths = (0..count as u64)
            .into_par_iter()
            .map(|i| WienerPath::generate(seed, first_id + i, n_steps, m_noise, dt))
            .collect::<Result<Vec<_>>>()?;
        Self::new(paths)
    }

    /// `n_pairs` paths each followed by its negation.
    pub fn antithetic_pairs(
        seed: u64,
        n_pairs: usize,
        n_steps: usize,
        m_noise: usize,
        dt: f64,
    ) -> Result<Self> {
        let plain = Self::generate(seed, 0, n_pairs, n_steps, m_noise, dt)?;
        let paths = plain
            .paths
            .into_iter()
            .flat_map(|p| {
                let a = p.antithetic();
                [p, a]
            })
            .collect();
        Self::new(paths)
    }

    /// Batch matching the grid of `spec`.
    pub fn for_spec(spec: &crate::ProblemSpec, seed: u64, count: usize) -> Result<Self> {
        Self::generate(seed, 0, count, spec.n_steps, spec.m_noise(), spec.dt())
    }

    pub fn paths(&self) -> &[WienerPath] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.paths[0].n_steps
    }

    pub fn m_noise(&self) -> usize {
        self.paths[0].m_noise
    }

    pub fn dt(&self) -> f64 {
        self.paths[0].dt
    }

    pub fn iter(&self) -> std::slice::Iter<'_, WienerPath> {
        self.paths.iter()
    }
}

impl<'a> IntoIterator for &'a PathBatch {
    type Item = &'a WienerPath;
    type IntoIter = std::slice::Iter<'a, WienerPath>;

    fn into_iter(self) -> Self::IntoIter {
        self.paths.iter()
    }
}
