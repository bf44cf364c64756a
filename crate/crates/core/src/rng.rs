//! Counter-based seeded random streams.
//!
//! A stream is addressed by a global seed plus a [`StreamKey`]. Keys map onto a
//! ChaCha20 key/stream pair injectively, so distinct keys never share a keystream
//! and the same key always reproduces the same sequence.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// What a stream is used for. Part of the key so that e.g. data generation and
/// adapter initialization with the same task id never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u64)]
pub enum Purpose {
    AdapterInit = 1,
    BaseModel = 2,
    TaskData = 3,
    Shuffle = 4,
    Dare = 5,
    Ortho = 6,
    Scratch = 7,
}

impl Purpose {
    pub const ALL: [Purpose; 7] = [
        Purpose::AdapterInit,
        Purpose::BaseModel,
        Purpose::TaskData,
        Purpose::Shuffle,
        Purpose::Dare,
        Purpose::Ortho,
        Purpose::Scratch,
    ];

    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn from_code(code: u64) -> Result<Self> {
        Purpose::ALL
            .into_iter()
            .find(|p| p.code() == code)
            .ok_or_else(|| Error::arg(alloc::format!("unknown stream purpose {code}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub task_id: u64,
    pub layer: u64,
    /// Projection or sub-stream index.
    pub slot: u64,
}

impl StreamKey {
    pub fn new(purpose: Purpose, task_id: u64, layer: u64, slot: u64) -> Self {
        Self { purpose, task_id, layer, slot }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub key: StreamKey,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        Self { seed, key }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.key.task_id.to_le_bytes());
        key[16..24].copy_from_slice(&(self.key.purpose as u64).to_le_bytes());
        key[24..32].copy_from_slice(&self.key.layer.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(self.key.slot);
        StreamRng { inner, spare_normal: None }
    }
}

pub struct StreamRng {
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[-a, a)`.
    pub fn symmetric(&mut self, a: f64) -> f64 {
        a * (2.0 * self.uniform() - 1.0)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(radius * libm::sin(theta));
        radius * libm::cos(theta)
    }

    /// Uniform integer in `0..n` (Lemire-style rejection, unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }
}

/// Half-width of the Kaiming-uniform interval for fan-in `d_in`.
pub fn kaiming_bound(d_in: usize) -> f64 {
    libm::sqrt(3.0 / d_in as f64)
}

/// `d_in x r` matrix with i.i.d. entries on `[-sqrt(3/d_in), sqrt(3/d_in)]` (variance `1/d_in`).
pub fn kaiming_uniform(d_in: usize, r: usize, stream: &RngStream) -> Result<Matrix> {
    if d_in == 0 || r == 0 {
        return Err(Error::arg(alloc::format!("kaiming_uniform needs d_in, r >= 1, got {d_in}, {r}")));
    }
    let a = kaiming_bound(d_in);
    let mut rng = stream.rng();
    Ok(Matrix::from_fn(d_in, r, |_, _| rng.symmetric(a)))
}
