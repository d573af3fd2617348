//! Frequency-domain hierarchical masking.
//!
//! A quarter-disc "sector" anchored at the DC corner of the DCT grid splits
//! the coefficients: `u² + v² < r²` is the low band, everything else
//! (including ties on the boundary) is the high band. The masking rate is
//! the fraction of coefficients routed to the high band.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::spectral::SpectralPlan;
use crate::tensor::Tensor;

/// Range the per-image masking rate is drawn from.
pub const MASK_RATE_RANGE: (f64, f64) = (0.20, 0.30);

/// Which band the masking rate counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RateSide {
    #[default]
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub m: usize,
    pub n: usize,
    /// Requested fraction of coefficients in the counted band.
    pub target_rate: f64,
    /// Sector radius in coefficient-index units.
    pub realized_radius: usize,
    /// Achieved fraction of coefficients in the counted band.
    pub realized_rate: f64,
    pub side: RateSide,
    pub seed: u64,
}

fn high_count(m: usize, n: usize, r: usize) -> usize {
    let r2 = r * r;
    let mut low = 0;
    for u in 0..m {
        let u2 = u * u;
        if u2 >= r2 {
            break;
        }
        // Count v with u² + v² < r², i.e. v < sqrt(r² - u²).
        let rem = r2 - u2;
        let mut v = (rem as f64).sqrt() as usize;
        while v * v >= rem && v > 0 {
            v -= 1;
        }
        while (v + 1) * (v + 1) < rem {
            v += 1;
        }
        low += (v + 1).min(n);
    }
    m * n - low
}

impl MaskSpec {
    /// Draws a rate uniformly from [`MASK_RATE_RANGE`] and fits the radius.
    pub fn sample(m: usize, n: usize, seed: u64) -> Result<Self> {
        let mut rng = Xoshiro256pp::seed_from(seed);
        let rate = rng.uniform_in(MASK_RATE_RANGE.0, MASK_RATE_RANGE.1);
        Self::for_rate(m, n, rate, RateSide::High, seed)
    }

    /// Radius whose counted-band fraction is closest to `rate`.
    pub fn for_rate(m: usize, n: usize, rate: f64, side: RateSide, seed: u64) -> Result<Self> {
        if m < 2 || n < 2 {
            return Err(Error::Contract(format!(
                "mask needs at least 2x2 coefficients, got {m}x{n}"
            )));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "masking rate {rate} outside [0, 1]"
            )));
        }
        let total = (m * n) as f64;
        let high_target = match side {
            RateSide::High => rate,
            RateSide::Low => 1.0 - rate,
        };
        let frac = |r: usize| high_count(m, n, r) as f64 / total;
        // Smallest radius at which the whole grid is low.
        let r_max = ((((m - 1) * (m - 1) + (n - 1) * (n - 1)) as f64).sqrt() as usize) + 2;
        // frac is non-increasing in r: find the first r with frac(r) <= target.
        let (mut lo, mut hi) = (0usize, r_max);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if frac(mid) <= high_target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let mut radius = lo;
        if radius > 0 && (frac(radius - 1) - high_target).abs() < (frac(radius) - high_target).abs()
        {
            radius -= 1;
        }
        let high = frac(radius);
        let realized_rate = match side {
            RateSide::High => high,
            RateSide::Low => 1.0 - high,
        };
        Ok(Self {
            m,
            n,
            target_rate: rate,
            realized_radius: radius,
            realized_rate,
            side,
            seed,
        })
    }

    /// `true` where coefficient `(u, v)` belongs to the low band.
    pub fn is_low(&self, u: usize, v: usize) -> bool {
        u * u + v * v < self.realized_radius * self.realized_radius
    }

    /// Low-band indicator as an `[m, n]` 0/1 tensor.
    pub fn low_mask(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.m * self.n);
        for u in 0..self.m {
            for v in 0..self.n {
                data.push(if self.is_low(u, v) { 1.0 } else { 0.0 });
            }
        }
        Tensor::new(&[self.m, self.n], data).expect("mask shape")
    }

    pub fn high_mask(&self) -> Tensor {
        self.low_mask().map(|v| 1.0 - v)
    }

    /// `key = value` sidecar text.
    pub fn to_sidecar(&self) -> String {
        format!(
            "m = {}\nn = {}\nseed = {}\nrate_side = {}\ntarget_rate = {}\nrealized_radius = {}\nrealized_rate = {}\n",
            self.m,
            self.n,
            self.seed,
            match self.side {
                RateSide::High => "high",
                RateSide::Low => "low",
            },
            self.target_rate,
            self.realized_radius,
            self.realized_rate
        )
    }
}

/// Low and high frequency components of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub low: Tensor,
    pub high: Tensor,
    pub mask: MaskSpec,
}

/// `low = idct2(M_low ⊙ dct2(x))`, `high = idct2(M_high ⊙ dct2(x))`.
pub fn split_frequency(
    plan: &SpectralPlan,
    x: &Tensor,
    mask: &MaskSpec,
) -> Result<(Tensor, Tensor)> {
    plan.check_shape(x.shape())?;
    if mask.m != plan.rows() || mask.n != plan.cols() {
        return Err(Error::shape(
            "split_frequency",
            format!(
                "mask {}x{} for plan {}x{}",
                mask.m,
                mask.n,
                plan.rows(),
                plan.cols()
            ),
        ));
    }
    let freq = plan.dct2(x)?;
    let plane = mask.m * mask.n;
    let low_m = mask.low_mask();
    let mut low_f = freq.data().to_vec();
    let mut high_f = freq.data().to_vec();
    for (i, (l, h)) in low_f.iter_mut().zip(high_f.iter_mut()).enumerate() {
        if low_m.data()[i % plane] == 1.0 {
            *h = 0.0;
        } else {
            *l = 0.0;
        }
    }
    let low = plan.idct2(&Tensor::with_dtype(x.shape(), low_f, x.dtype())?)?;
    let high = plan.idct2(&Tensor::with_dtype(x.shape(), high_f, x.dtype())?)?;
    Ok((low, high))
}

pub fn decompose(plan: &SpectralPlan, x: &Tensor, seed: u64) -> Result<Components> {
    let mask = MaskSpec::sample(plan.rows(), plan.cols(), seed)?;
    let (low, high) = split_frequency(plan, x, &mask)?;
    Ok(Components { low, high, mask })
}

/// Components of one optical/SAR pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairComponents {
    pub optical: Components,
    pub sar: Components,
}

/// Masks every image of a batch with an independent draw. Item `i` uses the
/// sub-streams `derive_seed(seed, [i, 0])` (optical) and `[i, 1]` (SAR).
pub fn mask_batch(
    plan: &SpectralPlan,
    batch: &[(Tensor, Tensor)],
    seed: u64,
) -> Result<Vec<PairComponents>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, (opt, sar))| {
            Ok(PairComponents {
                optical: decompose(plan, opt, derive_seed(seed, &[i as u64, 0]))?,
                sar: decompose(plan, sar, derive_seed(seed, &[i as u64, 1]))?,
            })
        })
        .collect()
}

/// Spatial patch masking baseline: zeroes a random `rate` fraction of
/// `patch×patch` tiles. Used only as an ablation toggle.
pub fn patch_mask(x: &Tensor, patch: usize, rate: f64, seed: u64) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape(
            "patch_mask",
            format!("{s:?} with patch {patch}"),
        ));
    }
    let (gh, gw) = (s[1] / patch, s[2] / patch);
    let tiles = gh * gw;
    let masked = ((tiles as f64) * rate).round() as usize;
    let mut order: Vec<usize> = (0..tiles).collect();
    let mut rng = Xoshiro256pp::seed_from(seed);
    for i in (1..tiles).rev() {
        let j = rng.int_in(0, i);
        order.swap(i, j);
    }
    let mut data = x.data().to_vec();
    for &tile in &order[..masked] {
        let (ty, tx) = (tile / gw, tile % gw);
        for c in 0..s[0] {
            for y in ty * patch..(ty + 1) * patch {
                for xx in tx * patch..(tx + 1) * patch {
                    data[(c * s[1] + y) * s[2] + xx] = 0.0;
                }
            }
        }
    }
    Tensor::with_dtype(s, data, x.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::TransformPath;

    fn brute_high(m: usize, n: usize, r: usize) -> usize {
        let mut c = 0;
        for u in 0..m {
            for v in 0..n {
                if ((u * u + v * v) as f64).sqrt() >= r as f64 {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn high_count_matches_brute_force() {
        for (m, n) in [(2, 2), (5, 9), (16, 16), (33, 20)] {
            for r in 0..50 {
                assert_eq!(high_count(m, n, r), brute_high(m, n, r), "{m}x{n} r={r}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = MaskSpec::sample(32, 32, 17).unwrap();
        let b = MaskSpec::sample(32, 32, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.target_rate >= 0.2 && a.target_rate < 0.3);
    }

    #[test]
    fn zero_rate_keeps_everything_low() {
        let m = MaskSpec::for_rate(12, 9, 0.0, RateSide::High, 0).unwrap();
        assert_eq!(m.realized_rate, 0.0);
        assert_eq!(m.low_mask().sum(), 108.0);
        let plan = SpectralPlan::new(12, 9, TransformPath::Matmul).unwrap();
        let mut rng = Xoshiro256pp::seed_from(1);
        let x = Tensor::uniform(&[1, 12, 9], 0.0, 1.0, &mut rng);
        let (low, high) = split_frequency(&plan, &x, &m).unwrap();
        assert!(low.max_abs_diff(&x) < 1e-12);
        assert!(high.max_abs() < 1e-12);
    }

    #[test]
    fn low_side_interpretation() {
        let hi = MaskSpec::for_rate(64, 64, 0.25, RateSide::High, 0).unwrap();
        let lo = MaskSpec::for_rate(64, 64, 0.75, RateSide::Low, 0).unwrap();
        assert_eq!(hi.realized_radius, lo.realized_radius);
        assert!((hi.realized_rate + lo.realized_rate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rate_is_closest_achievable() {
        let (m, n) = (40, 24);
        for &rate in &[0.05, 0.2, 0.25, 0.3, 0.9] {
            let spec = MaskSpec::for_rate(m, n, rate, RateSide::High, 0).unwrap();
            let best = (0..60)
                .map(|r| (brute_high(m, n, r) as f64 / (m * n) as f64 - rate).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(((spec.realized_rate - rate).abs() - best).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_extents_rejected() {
        assert!(MaskSpec::sample(1, 8, 0).is_err());
    }

    #[test]
    fn constant_image_routes_to_low() {
        let plan = SpectralPlan::new(16, 16, TransformPath::Matmul).unwrap();
        let x = Tensor::full(&[3, 16, 16], 0.4);
        let c = decompose(&plan, &x, 5).unwrap();
        assert!(c.low.max_abs_diff(&x) < 1e-12);
        assert!(c.high.max_abs() < 1e-12);
    }

    #[test]
    fn patch_mask_fraction() {
        let x = Tensor::ones(&[2, 8, 8]);
        let y = patch_mask(&x, 2, 0.25, 3).unwrap();
        assert_eq!(y.sum(), 2.0 * 64.0 * 0.75);
    }
}
