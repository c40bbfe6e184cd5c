//! Poissonian-Gaussian simulation of complementary Hadamard acquisitions.
//!
//! One measurement of coefficient `i` is
//! `[a·Pois(H⁺ᵢx / a) + N(0, b)] − [a·Pois(H⁻ᵢx / a) + N(0, b)]`
//! with all four components independent. Averaging `S` such measurements is
//! sampled in aggregated form, one Poisson draw with rate scaled by `S` per
//! pattern, which has the same distribution.
//!
//! The variance of the average is `(1/S)[a·H⁺ᵢx + b] + (1/S)[a·H⁻ᵢx + b]`:
//! the two acquisitions are independent, so their variances add.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::wht::{self, HadamardSpec};

/// Conversion gain `a` (signal units per detected photon) and Gaussian
/// variance `b` of the detector model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    a: f64,
    b: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { a: 1.0, b: 0.01 }
    }
}

impl NoiseParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::invalid(format!("noise gain a must be > 0, got {a}")));
        }
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::invalid(format!("noise variance b must be >= 0, got {b}")));
        }
        Ok(NoiseParams { a, b })
    }

    /// Accept externally calibrated parameters, replacing a negative `b` by 0.
    pub fn calibrated(a: f64, b: f64) -> Result<Self> {
        if b < 0.0 {
            log::warn!("calibrated noise variance b = {b} is negative, using 0");
            return Self::new(a, 0.0);
        }
        Self::new(a, b)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

/// How individual coefficient measurements are produced from ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    PoissonGaussian(NoiseParams),
    /// `yᵢ = Hᵢx` exactly.
    Noiseless,
}

/// A `(seed, stream)` pair naming one reproducible random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededRng {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        SeededRng { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Independent sub-stream, e.g. one per training step or image.
    pub fn child(&self, key: u64) -> SeededRng {
        SeededRng {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(key)),
        }
    }
}

/// `a·Pois(rate / a)` in signal units; rate is clamped at 0 against round-off.
pub(crate) fn scaled_poisson<R: Rng + ?Sized>(rate: f64, a: f64, rng: &mut R) -> f64 {
    let lambda = rate.max(0.0) / a;
    if lambda == 0.0 {
        return 0.0;
    }
    let k: f64 = Poisson::new(lambda)
        .expect("finite positive Poisson rate")
        .sample(rng);
    a * k
}

/// One averaged Poissonian-Gaussian measurement given the two pattern sums.
pub fn draw_averaged<R: Rng + ?Sized>(
    plus: f64,
    minus: f64,
    s_count: u32,
    params: &NoiseParams,
    rng: &mut R,
) -> f64 {
    let s = s_count as f64;
    let sd = (s * params.b).sqrt();
    let g1: f64 = rng.sample(StandardNormal);
    let g2: f64 = rng.sample(StandardNormal);
    let p = scaled_poisson(s * plus, params.a, rng) + sd * g1;
    let m = scaled_poisson(s * minus, params.a, rng) + sd * g2;
    (p - m) / s
}

/// Precomputed pattern sums `H⁺ᵢx`, `H⁻ᵢx` and `Hᵢx` for every coefficient of
/// one image, in natural order.
#[derive(Debug, Clone)]
pub struct CoefficientSampler {
    coeffs: Vec<f64>,
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl CoefficientSampler {
    pub fn new(x: &Image) -> Result<Self> {
        if !x.is_nonnegative() {
            return Err(Error::invalid("image has negative pixel values"));
        }
        let spec = HadamardSpec::image(x.side())?;
        let coeffs = wht::wht_forward(x.data(), &spec)?;
        let total = x.sum();
        // H⁺ = (J + H)/2, H⁻ = (J − H)/2
        let plus = coeffs.iter().map(|c| ((total + c) / 2.0).max(0.0)).collect();
        let minus = coeffs.iter().map(|c| ((total - c) / 2.0).max(0.0)).collect();
        Ok(CoefficientSampler { coeffs, plus, minus })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Noise-free coefficients `H·x`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn pattern_sums(&self, i: usize) -> (f64, f64) {
        (self.plus[i], self.minus[i])
    }

    /// Average of `s_count` measurements of coefficient `i`.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, s_count: u32, model: &NoiseModel, rng: &mut R) -> f64 {
        match model {
            NoiseModel::Noiseless => self.coeffs[i],
            NoiseModel::PoissonGaussian(p) => draw_averaged(self.plus[i], self.minus[i], s_count, p, rng),
        }
    }

    /// Exact `Var(y_avg)` for `s_count` averaged measurements.
    pub fn variance(&self, i: usize, s_count: u32, params: &NoiseParams) -> f64 {
        let s = s_count as f64;
        (params.a * self.plus[i] + params.b) / s + (params.a * self.minus[i] + params.b) / s
    }
}

fn check_index(x: &Image, i: usize) -> Result<()> {
    if i >= x.len() {
        return Err(Error::invalid(format!(
            "coefficient index {i} out of range for {} coefficients",
            x.len()
        )));
    }
    Ok(())
}

/// One measurement `yᵢ` of natural-order coefficient `i` of image `x`.
pub fn sample_coefficient<R: Rng + ?Sized>(x: &Image, i: usize, params: &NoiseParams, rng: &mut R) -> Result<f64> {
    sample_averaged(x, i, 1, params, rng)
}

/// Mean of `s_count` independent measurements of coefficient `i`.
pub fn sample_averaged<R: Rng + ?Sized>(
    x: &Image,
    i: usize,
    s_count: u32,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<f64> {
    if s_count < 1 {
        return Err(Error::invalid("measurement count must be at least 1"));
    }
    check_index(x, i)?;
    let sampler = CoefficientSampler::new(x)?;
    let (plus, minus) = sampler.pattern_sums(i);
    Ok(draw_averaged(plus, minus, s_count, params, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize) -> Image {
        Image::new(side, (0..side * side).map(|v| 1.0 + (v % 7) as f64).collect()).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(NoiseParams::new(0.0, 0.1).is_err());
        assert!(NoiseParams::new(1.0, -0.1).is_err());
        assert_eq!(NoiseParams::calibrated(2.0, -0.5).unwrap().b(), 0.0);
        assert_eq!(NoiseParams::calibrated(2.0, 0.5).unwrap().b(), 0.5);
    }

    #[test]
    fn zero_image_without_read_noise_is_exactly_zero() {
        let x = Image::zeros(4);
        let p = NoiseParams::new(1.0, 0.0).unwrap();
        let mut rng = SeededRng::new(1, 0).rng();
        for i in 0..16 {
            assert_eq!(sample_coefficient(&x, i, &p, &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = SeededRng::new(1, 0).rng();
        let p = NoiseParams::default();
        let neg = Image::new(2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        assert!(sample_coefficient(&neg, 0, &p, &mut rng).is_err());
        assert!(sample_averaged(&ramp(2), 0, 0, &p, &mut rng).is_err());
        assert!(sample_coefficient(&ramp(2), 4, &p, &mut rng).is_err());
    }

    #[test]
    fn determinism_per_stream() {
        let x = ramp(4);
        let p = NoiseParams::default();
        let draw = |s: SeededRng| {
            let mut rng = s.rng();
            (0..16).map(|i| sample_averaged(&x, i, 5, &p, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(SeededRng::new(3, 1)), draw(SeededRng::new(3, 1)));
        assert_ne!(draw(SeededRng::new(3, 1)), draw(SeededRng::new(3, 2)));
        assert_ne!(SeededRng::new(3, 1).child(0), SeededRng::new(3, 1).child(1));
    }

    #[test]
    fn noiseless_model_returns_coefficient() {
        let x = ramp(4);
        let s = CoefficientSampler::new(&x).unwrap();
        let mut rng = SeededRng::new(0, 0).rng();
        for i in 0..16 {
            assert_eq!(s.sample(i, 3, &NoiseModel::Noiseless, &mut rng), s.coefficients()[i]);
            let (p, m) = s.pattern_sums(i);
            assert!((p - m - s.coefficients()[i]).abs() < 1e-9);
            assert!((p + m - x.sum()).abs() < 1e-9);
        }
    }

    /// Monte-Carlo mean and variance of coefficient draws, checked against
    /// `Hᵢx` and the summed-variance formula.
    #[test]
    fn single_and_averaged_moments() {
        let x = ramp(4);
        let params = NoiseParams::new(0.7, 0.3).unwrap();
        let sampler = CoefficientSampler::new(&x).unwrap();
        let draws = 100_000;
        for (s_count, i) in [(1u32, 3usize), (50, 9)] {
            let mut rng = SeededRng::new(17, s_count as u64).rng();
            let ys: Vec<f64> = (0..draws)
                .map(|_| sampler.sample(i, s_count, &NoiseModel::PoissonGaussian(params), &mut rng))
                .collect();
            let mean = ys.iter().sum::<f64>() / draws as f64;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            let target = sampler.coefficients()[i];
            assert!((mean - target).abs() < 4.0 * se, "S={s_count} mean {mean} vs {target}");
            let (p, m) = sampler.pattern_sums(i);
            let expected_var = (params.a() * (p + m) + 2.0 * params.b()) / s_count as f64;
            assert!((var / expected_var - 1.0).abs() < 0.05, "var {var} vs {expected_var}");
            assert!((sampler.variance(i, s_count, &params) - expected_var).abs() < 1e-12);
        }
    }

    /// Two-sample Kolmogorov–Smirnov test: the aggregated sampler at S = 1
    /// against the per-draw definition built from scratch.
    #[test]
    fn aggregated_form_matches_per_draw_at_s1() {
        let x = ramp(4);
        let params = NoiseParams::new(1.0, 0.5).unwrap();
        let sampler = CoefficientSampler::new(&x).unwrap();
        let i = 6;
        let (plus, minus) = {
            let spec = HadamardSpec::image(4).unwrap();
            let (hp, hm) = wht::complementary_patterns(i, &spec).unwrap();
            let dot = |h: &[u8]| h.iter().zip(x.data()).map(|(&m, v)| m as f64 * v).sum::<f64>();
            (dot(&hp), dot(&hm))
        };
        let n = 10_000;
        let mut rng = SeededRng::new(5, 0).rng();
        let mut a: Vec<f64> = (0..n)
            .map(|_| sampler.sample(i, 1, &NoiseModel::PoissonGaussian(params), &mut rng))
            .collect();
        let mut rng = SeededRng::new(6, 0).rng();
        let mut b: Vec<f64> = (0..n)
            .map(|_| {
                let p: f64 = Poisson::new(plus).unwrap().sample(&mut rng);
                let m: f64 = Poisson::new(minus).unwrap().sample(&mut rng);
                let g1: f64 = rng.sample(StandardNormal);
                let g2: f64 = rng.sample(StandardNormal);
                (p + 0.5f64.sqrt() * g1) - (m + 0.5f64.sqrt() * g2)
            })
            .collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut ia, mut ib, mut d) = (0, 0, 0.0f64);
        while ia < n && ib < n {
            if a[ia] <= b[ib] {
                ia += 1;
            } else {
                ib += 1;
            }
            d = d.max((ia as f64 - ib as f64).abs() / n as f64);
        }
        // asymptotic critical value for p = 0.01
        let crit = 1.628 * (2.0 / n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }
}
