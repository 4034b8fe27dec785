use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GeometryError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Residual units depend on the problem.
    pub inlier_threshold: f64,
    pub min_inliers_accept: usize,
    /// Probability of having drawn one outlier-free sample at termination.
    pub confidence: f64,
    pub rng_seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_threshold: 1.0,
            min_inliers_accept: 0,
            confidence: 0.99,
            rng_seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.max_iterations == 0 {
            return Err(GeometryError::InvalidInput("max_iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(GeometryError::InvalidInput("inlier threshold must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.confidence) {
            return Err(GeometryError::InvalidInput("confidence must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

/// Mixes a context value into a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, context: u64) -> u64 {
    let mut z = base ^ context.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RansacOutcome<M> {
    pub model: M,
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    pub iterations: usize,
}

fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    if inlier_ratio >= 1.0 {
        return 0;
    }
    let good = inlier_ratio.powi(sample_size as i32);
    if good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        n.ceil().max(0.0) as usize
    } else {
        usize::MAX
    }
}

/// Hypothesize-and-verify over `n` data with minimal samples of
/// `sample_size`. `fit` returns `None` for degenerate samples. The model
/// with most inliers wins; the first one found wins ties.
pub fn ransac<M>(
    n: usize,
    sample_size: usize,
    params: &RansacParams,
    mut fit: impl FnMut(&[usize]) -> Option<M>,
    mut is_inlier: impl FnMut(&M, usize) -> bool,
) -> Result<RansacOutcome<M>, GeometryError> {
    params.validate()?;
    if n < sample_size || sample_size == 0 {
        return Err(GeometryError::InvalidInput(format!(
            "{n} data for a sample size of {sample_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(M, Vec<bool>, usize)> = None;
    let mut budget = params.max_iterations;
    let mut it = 0;
    let mut sample = Vec::with_capacity(sample_size);
    while it < budget {
        it += 1;
        sample.clear();
        sample.extend(rand::seq::index::sample(&mut rng, n, sample_size).iter());
        let Some(model) = fit(&sample) else { continue };
        let mask: Vec<bool> = (0..n).map(|i| is_inlier(&model, i)).collect();
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            let need = required_iterations(count as f64 / n as f64, sample_size, params.confidence);
            budget = params.max_iterations.min(need.max(it));
            best = Some((model, mask, count));
        }
    }
    match best {
        Some((model, inliers, n_inliers)) if n_inliers >= params.min_inliers_accept.max(sample_size) => {
            Ok(RansacOutcome { model, inliers, n_inliers, iterations: it })
        }
        b => Err(GeometryError::NotFound {
            best_inliers: b.map_or(0, |b| b.2),
            required: params.min_inliers_accept.max(sample_size),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1D "line through origin" model on (x, y) data, sample size 1.
    fn run(seed: u64) -> RansacOutcome<f64> {
        let data: Vec<(f64, f64)> = (0..50)
            .map(|i| {
                let x = 1.0 + i as f64;
                if i % 5 == 0 {
                    (x, -3.0 * x)
                } else {
                    (x, 2.0 * x)
                }
            })
            .collect();
        let params = RansacParams { inlier_threshold: 1e-6, min_inliers_accept: 10, rng_seed: seed, ..Default::default() };
        ransac(
            data.len(),
            1,
            &params,
            |s| Some(data[s[0]].1 / data[s[0]].0),
            |m, i| (data[i].1 - m * data[i].0).abs() < params.inlier_threshold,
        )
        .unwrap()
    }

    #[test]
    fn finds_planted_model_and_is_deterministic() {
        let a = run(7);
        assert!((a.model - 2.0).abs() < 1e-12);
        assert_eq!(a.n_inliers, 40);
        let b = run(7);
        assert_eq!(a.model.to_bits(), b.model.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn adaptive_stop_cuts_iterations() {
        let r = run(3);
        assert!(r.iterations < 10, "{} iterations", r.iterations);
        assert_eq!(required_iterations(1.0, 3, 0.99), 0);
        assert_eq!(required_iterations(0.5, 1, 0.99), 7);
    }

    #[test]
    fn rejects_bad_params_and_reports_no_consensus() {
        let p = RansacParams { max_iterations: 0, ..Default::default() };
        assert!(ransac(10, 2, &p, |_| Some(()), |_, _| true).is_err());
        let p = RansacParams { min_inliers_accept: 20, ..Default::default() };
        let r = ransac(10, 2, &p, |_| Some(()), |_, i| i < 5);
        assert!(matches!(r, Err(GeometryError::NotFound { best_inliers: 5, required: 20 })));
        assert!(matches!(ransac(1, 2, &RansacParams::default(), |_| Some(()), |_, _| true), Err(GeometryError::InvalidInput(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
