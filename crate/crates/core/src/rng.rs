//! Counter-based random number streams.
//!
//! Every noise value in a scenario batch is a pure function of
//! `(seed, path, step, channel)`. Streams never share state, so batches can
//! be filled in any order, by any number of worker threads, in chunks of any
//! size, and the bytes come out identical. This is the property the
//! determinism guarantees elsewhere in the crate rest on.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const MUL_PATH: u64 = 0xbf58_476d_1ce4_e5b9;
const MUL_STEP: u64 = 0x94d0_49bb_1331_11eb;
const MUL_CHANNEL: u64 = 0xd6e8_feb8_6659_fd93;

/// SplitMix64 finalizer. Bijective on u64 with full avalanche.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MUL_PATH);
    z = (z ^ (z >> 27)).wrapping_mul(MUL_STEP);
    z ^ (z >> 31)
}

/// One independent stream, keyed by its coordinates.
pub struct StreamRng {
    state: u64,
}

/// Stream for coordinate `(seed, path, step, channel)`.
///
/// Channel layout used by scenario generation: channels `0..d` carry the
/// Brownian increments, channels `d..d+M` the Poisson counts per mark.
pub fn stream(seed: u64, path: u64, step: u64, channel: u64) -> StreamRng {
    let mut key = mix64(seed ^ GOLDEN);
    key = mix64(key ^ (path.wrapping_add(1)).wrapping_mul(MUL_PATH));
    key = mix64(key ^ (step.wrapping_add(1)).wrapping_mul(MUL_STEP));
    key = mix64(key ^ (channel.wrapping_add(1)).wrapping_mul(MUL_CHANNEL));
    StreamRng { state: key }
}

impl StreamRng {
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in (0, 1]; safe as a logarithm argument.
    #[inline]
    pub fn uniform_pos(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_pos();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson count with the given mean, by Knuth's product method.
    ///
    /// Exact for any finite mean: means above 500 are split into chunks so
    /// that exp(-mean) never underflows, and a Poisson variable is the sum
    /// of independent Poisson variables over the chunks.
    pub fn poisson(&mut self, mean: f64) -> u32 {
        debug_assert!(mean.is_finite() && mean >= 0.0);
        let mut remaining = mean;
        let mut total: u64 = 0;
        while remaining > 0.0 {
            let chunk = remaining.min(500.0);
            remaining -= chunk;
            let limit = (-chunk).exp();
            let mut k: u64 = 0;
            let mut prod = 1.0f64;
            loop {
                k += 1;
                prod *= self.uniform_pos();
                if prod <= limit {
                    break;
                }
            }
            total += k - 1;
        }
        total.min(u32::MAX as u64) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_pure_functions_of_coordinates() {
        let mut s1 = stream(7, 3, 5, 1);
        let mut s2 = stream(7, 3, 5, 1);
        for _ in 0..100 {
            assert_eq!(s1.next_u64(), s2.next_u64());
        }
    }

    #[test]
    fn neighboring_streams_decorrelate() {
        // First draws of adjacent coordinates must not collide.
        let mut seen = std::collections::HashSet::new();
        for path in 0..50u64 {
            for step in 0..20u64 {
                for channel in 0..4u64 {
                    assert!(seen.insert(stream(42, path, step, channel).next_u64()));
                }
            }
        }
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = stream(1, 0, 0, 0);
        let n = 200_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        // SE of the mean is 1/sqrt(12 n) ~ 6.5e-4; allow 4 SE.
        assert!((mean - 0.5).abs() < 2.6e-3, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream(2, 0, 0, 0);
        let n = 200_000;
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            m1 += x;
            m2 += x * x;
            m4 += x * x * x * x;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        m4 /= n as f64;
        assert!(m1.abs() < 0.01, "mean {m1}");
        assert!((m2 - 1.0).abs() < 0.02, "var {m2}");
        assert!((m4 - 3.0).abs() < 0.15, "4th moment {m4}");
    }

    #[test]
    fn poisson_moments_small_and_chunked_mean() {
        for &mean in &[0.05, 1.7, 650.0] {
            let mut rng = stream(3, 0, 0, 0);
            let n = if mean > 100.0 { 20_000 } else { 200_000 };
            let (mut m1, mut m2) = (0.0, 0.0);
            for _ in 0..n {
                let x = rng.poisson(mean) as f64;
                m1 += x;
                m2 += x * x;
            }
            m1 /= n as f64;
            let var = m2 / n as f64 - m1 * m1;
            let se = (mean / n as f64).sqrt();
            assert!((m1 - mean).abs() < 4.0 * se, "mean {m1} vs {mean}");
            // Poisson variance equals the mean.
            assert!((var - mean).abs() < mean.max(0.05) * 0.1, "var {var} vs {mean}");
        }
    }
}
