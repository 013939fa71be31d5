//! Counter-based random numbers for reproducible parallel Monte Carlo.
//!
//! Every variate is a pure function of `(seed, path, step, component)`:
//! there is no generator state, so draws are identical regardless of
//! evaluation order or thread count, and distinct (path, step, component)
//! triples get independent streams.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer. Bijective mixer with full avalanche.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw 64-bit word keyed by the full counter tuple.
#[inline]
pub fn keyed_u64(seed: u64, path: u64, step: u64, component: u64, word: u64) -> u64 {
    let mut z = seed;
    z = mix64(z.wrapping_add(GOLDEN).wrapping_add(path));
    z = mix64(z.wrapping_add(GOLDEN).wrapping_add(step));
    z = mix64(z.wrapping_add(GOLDEN).wrapping_add(component));
    z = mix64(z.wrapping_add(GOLDEN).wrapping_add(word));
    z
}

/// Uniform in (0, 1]; never returns 0 so it is safe under `ln`.
#[inline]
fn unit_open(x: u64) -> f64 {
    ((x >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0)
}

/// Standard normal variate for `(seed, path, step, component)` via Box-Muller.
#[inline]
pub fn standard_normal(seed: u64, path: u64, step: u64, component: u64) -> f64 {
    let u1 = unit_open(keyed_u64(seed, path, step, component, 0));
    let u2 = unit_open(keyed_u64(seed, path, step, component, 1));
    let mag = (-2.0 * u1.ln()).sqrt();
    mag * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Brownian increment over a step of length `dt`: an N(0, dt) variate fully
/// determined by `(seed, path, step, component)`.
#[inline]
pub fn brownian_increment(seed: u64, path: u64, step: u64, component: u64, dt: f64) -> f64 {
    dt.sqrt() * standard_normal(seed, path, step, component)
}

/// Uniform in [0, 1) on an auxiliary stream (used by sampled diagnostics).
#[inline]
pub fn uniform(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    (keyed_u64(seed, a, b, c, 2) >> 11) as f64 * (1.0 / 9007199254740992.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::mean_var;

    #[test]
    fn same_key_same_value() {
        let a = brownian_increment(42, 7, 13, 0, 0.01);
        let b = brownian_increment(42, 7, 13, 0, 0.01);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn distinct_keys_differ() {
        let a = standard_normal(42, 0, 0, 0);
        assert_ne!(a, standard_normal(42, 1, 0, 0));
        assert_ne!(a, standard_normal(42, 0, 1, 0));
        assert_ne!(a, standard_normal(42, 0, 0, 1));
        assert_ne!(a, standard_normal(43, 0, 0, 0));
    }

    #[test]
    fn increment_variance_matches_dt() {
        // 1e5 increments at dt = 0.01; chi-square 5-sigma window.
        let dt = 0.01;
        let xs: Vec<f64> = (0..100_000)
            .map(|i| brownian_increment(1234, i, 0, 0, dt))
            .collect();
        let (mean, var) = mean_var(&xs);
        assert!(mean.abs() < 5.0 * (dt / 1e5).sqrt(), "mean {mean}");
        assert!((0.0095..=0.0105).contains(&var), "variance {var}");
    }

    #[test]
    fn adjacent_seeds_uncorrelated() {
        let n = 100_000u64;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for i in 0..n {
            let x = standard_normal(9000, i, 0, 0);
            let y = standard_normal(9001, i, 0, 0);
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        let corr = sxy / (sxx.sqrt() * syy.sqrt());
        assert!(corr.abs() < 0.02, "correlation {corr}");
    }

    #[test]
    fn normal_moments() {
        let xs: Vec<f64> = (0..200_000)
            .map(|i| standard_normal(5, i, 3, 1))
            .collect();
        let (mean, var) = mean_var(&xs);
        assert!(mean.abs() < 0.012, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
