//! Counter-based deterministic random number generator.
//!
//! The generator is a pure function of `(seed, counter)`: the i-th output is
//!
//! ```text
//! out_i = mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)
//! ```
//!
//! where `mix64` is the 64-bit finalizer
//!
//! ```text
//! z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9;
//! z ^= z >> 27;  z *= 0x94D049BB133111EB;
//! z ^= z >> 31;
//! ```
//!
//! (all arithmetic wrapping). Because the stream is integer-only and fully
//! specified, every platform produces identical draws for a fixed seed.
//! Substreams are derived with [`Rng::fork`], which hashes a label into a new
//! seed, so independent consumers (per-image targets, per-layer init, noise
//! maps) never share or race a single sequence.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizing 64-bit mix with full avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Deterministic counter-based generator. Cloning yields an identical stream
/// continuation; two generators with the same seed produce the same sequence.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { seed, counter: 0 }
    }

    /// Derive an independent substream identified by `label`. Deterministic:
    /// `fork` does not consume any state from the parent stream.
    pub fn fork(&self, label: u64) -> Rng {
        let child = mix64(self.seed ^ mix64(label.wrapping_mul(GOLDEN) ^ 0xD1B5_4A32_D192_ED03));
        Rng::new(child)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in [0,1) with 24 bits of mantissa, exact in f32.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        const SCALE: f32 = 1.0 / (1u32 << 24) as f32;
        ((self.next_u64() >> 40) as u32) as f32 * SCALE
    }

    /// Uniform draw in [0,1) with 53 bits of mantissa.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform draw in [low, high). The value is computed in f64 and nudged
    /// down one ulp if rounding to f32 lands exactly on `high`.
    #[inline]
    pub fn uniform(&mut self, low: f32, high: f32) -> f32 {
        debug_assert!(low < high);
        let u = self.next_f64();
        let v = low as f64 + u * (high as f64 - low as f64);
        let mut x = v as f32;
        if x >= high && high > 0.0 {
            x = f32::from_bits(high.to_bits() - 1);
        }
        x
    }

    /// Uniform f64 draw in [low, high).
    #[inline]
    pub fn uniform_f64(&mut self, low: f64, high: f64) -> f64 {
        debug_assert!(low < high);
        low + self.next_f64() * (high - low)
    }

    /// Unbiased-to-2^-64 integer draw in [0, n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn counter_reference_values() {
        // out_i = mix64(seed + (i+1)*GOLDEN), checked against a by-hand
        // evaluation of the finalizer so the stream definition is pinned.
        let mut r = Rng::new(42);
        let first = r.next_u64();
        assert_eq!(first, mix64(42u64.wrapping_add(GOLDEN)));
        let second = r.next_u64();
        assert_eq!(second, mix64(42u64.wrapping_add(GOLDEN.wrapping_mul(2))));
    }

    #[test]
    fn unit_interval_bounds_and_mean() {
        let mut r = Rng::new(123);
        let n = 1_000_000usize;
        let mut acc = 0.0f64;
        for _ in 0..n {
            let x = r.next_f32();
            assert!((0.0..1.0).contains(&x));
            acc += x as f64;
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_respects_half_open_range() {
        let mut r = Rng::new(5);
        for _ in 0..10_000 {
            let x = r.uniform(0.0, 0.1);
            assert!((0.0..0.1).contains(&x), "{x}");
            let y = r.uniform(-0.3, 0.3);
            assert!((-0.3..0.3).contains(&y), "{y}");
        }
    }

    #[test]
    fn fork_is_deterministic_and_distinct() {
        let r = Rng::new(9);
        let mut a1 = r.fork(1);
        let mut a2 = r.fork(1);
        let mut b = r.fork(2);
        let x = a1.next_u64();
        assert_eq!(x, a2.next_u64());
        assert_ne!(x, b.next_u64());
    }

    #[test]
    fn below_covers_range_uniformly() {
        let mut r = Rng::new(77);
        let mut counts = [0usize; 10];
        for _ in 0..100_000 {
            counts[r.below(10)] += 1;
        }
        for &c in &counts {
            assert!((8_000..12_000).contains(&c), "count {c}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = Rng::new(3);
        let mut xs: Vec<usize> = (0..50).collect();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(xs, (0..50).collect::<Vec<_>>());
    }
}
