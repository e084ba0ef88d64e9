//! Seeded random source.
//!
//! The generator is xoshiro256++ seeded through SplitMix64 (the reference
//! seeding procedure of the xoshiro authors). Derived draws are defined
//! here so that fixtures can be reproduced in other languages:
//!
//! ```text
//! uniform()  = (next_u64() >> 11) * 2^-53              in [0, 1)
//! range(a,b) = a + (b - a) * uniform()
//! below(n)   = floor(uniform() * n)                    in [0, n)
//! normal()   = sqrt(-2 ln(1 - u1)) * cos(2π u2)        Box–Muller, one draw per call
//! ```

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Debug, Clone)]
pub struct SceneRng {
    inner: Xoshiro256PlusPlus,
}

impl SceneRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, stream)`; used to give every frame and
    /// every baseline mask its own generator.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mixed = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
        Self::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle driven by [`SceneRng::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
