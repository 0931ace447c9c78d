//! Portable random streams for synthetic worlds.
//!
//! Every stream is ChaCha20 seeded with `seed_from_u64(seed)` and selected by
//! `set_stream(stream)`. Uniforms take the top 53 bits of `next_u64`; normals
//! use the Box-Muller transform on pairs of uniforms (cosine branch first).

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub struct Stream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        (self.uniform() * n as f64) as u64
    }
}
