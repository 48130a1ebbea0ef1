//! Seeded normal sampling that any language can reproduce bit for bit.
//!
//! The stream is SplitMix64. Normals are produced in Box–Muller pairs:
//!
//! 1. `a = next_u64()`, `b = next_u64()` (in that order)
//! 2. `u1 = ((a >> 11) + 1) · 2⁻⁵³` in (0, 1], `u2 = (b >> 11) · 2⁻⁵³` in [0, 1)
//! 3. `r = sqrt(−2 ln u1)`, `θ = 2π u2`
//! 4. the pair is `(r cos θ, r sin θ)`, consumed cosine first
//!
//! A single requested normal takes the cosine half and caches the sine half
//! for the next request.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const UNIT: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * UNIT
    }
}

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::new(seed),
            spare: None,
        }
    }

    /// One Box–Muller pair, ignoring any cached value.
    pub fn next_pair(&mut self) -> (f64, f64) {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * UNIT;
        let u2 = (b >> 11) as f64 * UNIT;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(x) = self.spare.take() {
            return x;
        }
        let (c, s) = self.next_pair();
        self.spare = Some(s);
        c
    }

    pub fn fill(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }
}
