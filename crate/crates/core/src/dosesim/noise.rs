use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

use super::drf_class;

/// Below this mean the sampler inverts the CDF; above it, it rounds a
/// normal approximation.
const INVERSION_LIMIT: f64 = 10.0;

/// One Poisson draw.
pub fn poisson(mean: f64, rng: &mut Rng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < INVERSION_LIMIT {
        let u = rng.uniform();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u32;
        // The tail beyond 100 is below 1e-60 for means under 10.
        while u > cdf && k < 100 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        (mean + mean.sqrt() * rng.normal()).round().max(0.0)
    }
}

/// Count-thinning model of a shortened acquisition: each voxel draws
/// `c ~ Poisson(y·κ/drf)` and reports `c·drf/κ`, which keeps the
/// expectation and raises the noise with the reduction factor.
pub fn simulate_low_dose(standard: &Tensor, drf: u32, counts_scale: f64, rng: &mut Rng) -> Result<Tensor> {
    drf_class(drf)?;
    if !(counts_scale > 0.0 && counts_scale.is_finite()) {
        return Err(Error::invalid(format!("counts scale must be positive, got {counts_scale}")));
    }
    if let Some(v) = standard.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("standard-dose voxel {v} is negative or NaN")));
    }
    let d = drf as f64;
    let data = standard
        .data()
        .iter()
        .map(|&y| (poisson(y as f64 * counts_scale / d, rng) * d / counts_scale) as f32)
        .collect();
    Tensor::new(standard.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dosesim::DRF_LEVELS;

    #[test]
    fn zero_stays_zero() {
        let y = Tensor::zeros(vec![1, 1, 4, 4, 4]);
        for drf in DRF_LEVELS {
            let x = simulate_low_dose(&y, drf, 1000.0, &mut Rng::new(1)).unwrap();
            assert!(x.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unbiased_at_unit_intensity() {
        let y = Tensor::ones(vec![1, 1, 1, 1, 1]);
        for drf in DRF_LEVELS {
            let n = 10_000;
            let samples: Vec<f64> = (0..n)
                .map(|s| simulate_low_dose(&y, drf, 1000.0, &mut Rng::new(s)).unwrap().data()[0] as f64)
                .collect();
            let mean = samples.iter().sum::<f64>() / n as f64;
            // Var(x) = drf/κ for unit intensity.
            let sigma = (drf as f64 / 1000.0 / n as f64).sqrt();
            assert!((mean - 1.0).abs() < 3.0 * sigma, "drf {drf}: mean {mean}");
        }
    }

    #[test]
    fn small_means_use_exact_pmf() {
        // Empirical frequencies of the inversion sampler at mean 2.
        let mut rng = Rng::new(9);
        let n = 20_000;
        let mut hist = [0usize; 6];
        for _ in 0..n {
            let k = poisson(2.0, &mut rng) as usize;
            if k < 6 {
                hist[k] += 1;
            }
        }
        let mut pmf = (-2f64).exp();
        for (k, &h) in hist.iter().enumerate() {
            if k > 0 {
                pmf *= 2.0 / k as f64;
            }
            let f = h as f64 / n as f64;
            let sd = (pmf * (1.0 - pmf) / n as f64).sqrt();
            assert!((f - pmf).abs() < 4.0 * sd, "k={k}: {f} vs {pmf}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let y = Tensor::ones(vec![1, 1, 2, 2, 2]);
        assert!(simulate_low_dose(&y, 7, 1000.0, &mut Rng::new(0)).is_err());
        assert!(simulate_low_dose(&y, 4, 0.0, &mut Rng::new(0)).is_err());
        let neg = Tensor::full(vec![1, 1, 2, 2, 2], -1.0);
        assert!(simulate_low_dose(&neg, 4, 1000.0, &mut Rng::new(0)).is_err());
    }
}
