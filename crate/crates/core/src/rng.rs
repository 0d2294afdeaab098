//! Counter-based deterministic RNG.
//!
//! Everything random in this crate (parameter init, synthetic examples,
//! layer-drop coins) is keyed: the value at (seed, k1, k2, ...) never depends
//! on how many draws happened before it. That is what makes examples
//! random-access (example i is the same whether you generate 1 or 10^6),
//! drop masks replayable per step, and init independent of construction
//! order changes elsewhere.

/// splitmix64 finalizer. Full-avalanche 64-bit mixer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Collapse a key tuple into one 64-bit state. Position-dependent so that
/// (a, b) and (b, a) land in different streams.
pub fn key(parts: &[u64]) -> u64 {
    let mut h = 0x5851f42d4c957f2d_u64;
    for (i, &p) in parts.iter().enumerate() {
        h = mix64(h ^ mix64(p ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15)));
    }
    h
}

/// A small sequential generator over one keyed stream.
pub struct CounterRng {
    state: u64,
    ctr: u64,
}

impl CounterRng {
    pub fn from_key(parts: &[u64]) -> Self {
        CounterRng {
            state: key(parts),
            ctr: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.ctr += 1;
        mix64(self.state ^ mix64(self.ctr))
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be nonzero. Modulo bias is
    /// negligible for the small n used here (vocab sizes, slot counts).
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// One keyed Bernoulli coin: true with probability p.
pub fn coin(parts: &[u64], p: f64) -> bool {
    let u = (key(parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    u < p
}
