//! Dataset generators and the exact conditional densities behind them.

use pacm_core::distributions::{LogDensity1D, MixtureNormal1D, Sample1D};
use pacm_core::{seeded_rng, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, ExperimentConfig, ToyTruth};
use crate::error::{CliError, CliResult};

pub const X_LO: f64 = -10.5;
pub const X_HI: f64 = 10.5;
pub const SINUSOID_NOISE: f64 = 10.0;

/// Random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    Init = 1,
    Train = 2,
    Eval = 3,
    Solver = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream as u64);
    rng
}

/// `7 sin(3x/4) + x/2`.
pub fn sinusoid_mean(x: f64) -> f64 {
    7.0 * (0.75 * x).sin() + 0.5 * x
}

pub fn evenly_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count).map(|i| lo + step * i as f64).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Empty for the unconditional toy.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub generator_tag: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x_column(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.x.len(), 1), self.x.clone()).expect("column")
    }

    pub fn y_column(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.y.len(), 1), self.y.clone()).expect("column")
    }
}

/// Exact data-generating process.
#[derive(Debug, Clone, PartialEq)]
pub enum GenerativeTruth {
    /// `y ~ N(μ_x, noise)`.
    Sinusoid { noise: f64 },
    /// `y ~ N(Z μ_x, scale)` with Rademacher `Z`.
    Rademacher { scale: f64 },
    /// Unconditional `y ~ ν`.
    Toy(MixtureNormal1D),
}

impl GenerativeTruth {
    pub fn toy(truth: ToyTruth) -> Self {
        let (mu, scale) = match truth {
            ToyTruth::Narrow => (2.0, 1.0),
            ToyTruth::Wide => (4.0, 2.0),
        };
        GenerativeTruth::Toy(
            MixtureNormal1D::new(vec![0.3, 0.7], vec![-mu, mu], vec![scale, scale])
                .expect("valid toy truth"),
        )
    }

    pub fn tag(&self) -> &'static str {
        match self {
            GenerativeTruth::Sinusoid { .. } => "sinusoid",
            GenerativeTruth::Rademacher { .. } => "rademacher-mixture",
            GenerativeTruth::Toy(_) => "toy",
        }
    }

    /// `p*(· | x)` as a Normal mixture.
    pub fn conditional(&self, x: f64) -> MixtureNormal1D {
        let built = match self {
            GenerativeTruth::Sinusoid { noise } => {
                MixtureNormal1D::new(vec![1.0], vec![sinusoid_mean(x)], vec![*noise])
            }
            GenerativeTruth::Rademacher { scale } => {
                let mu = sinusoid_mean(x);
                MixtureNormal1D::new(vec![0.5, 0.5], vec![mu, -mu], vec![*scale, *scale])
            }
            GenerativeTruth::Toy(nu) => return nu.clone(),
        };
        built.expect("valid conditional")
    }

    pub fn log_density(&self, x: f64, y: f64) -> f64 {
        self.conditional(x).log_prob(y)
    }

    /// `(lo, hi)` covering `widths` component scales around every component.
    pub fn y_range(&self, x: f64, widths: f64) -> (f64, f64) {
        let c = self.conditional(x);
        let lo = c
            .locs()
            .iter()
            .zip(c.scales())
            .map(|(m, s)| m - widths * s)
            .fold(f64::INFINITY, f64::min);
        let hi = c
            .locs()
            .iter()
            .zip(c.scales())
            .map(|(m, s)| m + widths * s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Largest component scale, the unit of the evaluation grid.
    pub fn scale(&self, x: f64) -> f64 {
        self.conditional(x).scales().iter().copied().fold(0.0, f64::max)
    }

    pub fn sample(&self, x: f64, rng: &mut Rng) -> f64 {
        self.conditional(x).sample(rng, 1)[0]
    }
}

pub fn truth_for(cfg: &ExperimentConfig) -> CliResult<GenerativeTruth> {
    match cfg.experiment {
        Experiment::Sinusoid => Ok(GenerativeTruth::Sinusoid {
            noise: SINUSOID_NOISE,
        }),
        Experiment::Mixture | Experiment::MixtureMultimodal | Experiment::MixtureWellspec => {
            Ok(GenerativeTruth::Rademacher { scale: 1.0 })
        }
        Experiment::Toy => Ok(GenerativeTruth::toy(cfg.truth)),
        Experiment::Verify => Err(CliError::Config("verify has no dataset".into())),
    }
}

/// Draws `n_train` points with the given seed.
pub fn sample_dataset(truth: &GenerativeTruth, n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, Stream::Data);
    let (x, y) = match truth {
        GenerativeTruth::Toy(nu) => (Vec::new(), nu.sample(&mut rng, n)),
        _ => {
            let x = evenly_spaced(X_LO, X_HI, n);
            let y = x.iter().map(|&xi| truth.sample(xi, &mut rng)).collect();
            (x, y)
        }
    };
    Dataset {
        x,
        y,
        generator_tag: truth.tag().to_string(),
        seed,
    }
}

/// Training set and its truth.
pub fn gen_dataset(cfg: &ExperimentConfig) -> CliResult<(Dataset, GenerativeTruth)> {
    let truth = truth_for(cfg)?;
    Ok((sample_dataset(&truth, cfg.n_train, cfg.seed), truth))
}

/// Test set: an independent draw of the same size with `seed + 1`.
pub fn gen_test_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let truth = truth_for(cfg)?;
    Ok(sample_dataset(&truth, cfg.n_train, cfg.seed.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use pacm_core::numerics::mean_and_se;

    #[test]
    fn sinusoid_mean_examples() {
        assert_eq!(sinusoid_mean(0.0), 0.0);
        let x = 2.0 * std::f64::consts::PI / 3.0;
        // sin(π/2) = 1, so 7 + π/3.
        assert_abs_diff_eq!(sinusoid_mean(x), 7.0 + std::f64::consts::PI / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sinusoid_mean(x), 8.0472, epsilon = 1e-4);
    }

    #[test]
    fn mixture_truth_symmetric() {
        let t = GenerativeTruth::Rademacher { scale: 1.0 };
        for &x in &[-9.0, -1.3, 0.0, 2.2, 10.5] {
            for &y in &[-12.0, -3.0, 0.4, 5.5] {
                assert_abs_diff_eq!(t.log_density(x, y), t.log_density(x, -y), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn x_evenly_spaced_on_interval() {
        let cfg = ExperimentConfig::defaults(Experiment::Sinusoid);
        let (d, _) = gen_dataset(&cfg).unwrap();
        assert_eq!(d.x.len(), 1000);
        assert_eq!(d.y.len(), 1000);
        assert_eq!(d.x[0], X_LO);
        assert_abs_diff_eq!(d.x[999], X_HI, epsilon = 1e-12);
        let step = 21.0 / 999.0;
        for w in d.x.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], step, epsilon = 1e-12);
        }
    }

    #[test]
    fn sinusoid_residuals_have_truth_scale() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Sinusoid);
        cfg.n_train = 20_000;
        let (d, _) = gen_dataset(&cfg).unwrap();
        let resid: Vec<f64> = d.x.iter().zip(&d.y).map(|(x, y)| y - sinusoid_mean(*x)).collect();
        let (mean, se) = mean_and_se(&resid);
        assert!(mean.abs() < 4.0 * se);
        let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
        assert!((var.sqrt() - 10.0).abs() < 0.2, "std {}", var.sqrt());
    }

    #[test]
    fn mixture_signs_balanced() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Mixture);
        cfg.n_train = 10_000;
        let (d, _) = gen_dataset(&cfg).unwrap();
        let (mut plus, mut counted) = (0usize, 0usize);
        for (x, y) in d.x.iter().zip(&d.y) {
            let mu = sinusoid_mean(*x);
            if mu.abs() > 4.0 {
                counted += 1;
                if (y - mu).abs() < (y + mu).abs() {
                    plus += 1;
                }
            }
        }
        let frac = plus as f64 / counted as f64;
        let se = (0.25 / counted as f64).sqrt();
        assert!((frac - 0.5).abs() < 4.0 * se, "plus fraction {frac}");
    }

    #[test]
    fn toy_draws_five_unconditional_points() {
        let cfg = ExperimentConfig::defaults(Experiment::Toy);
        let (d, truth) = gen_dataset(&cfg).unwrap();
        assert!(d.x.is_empty());
        assert_eq!(d.y.len(), 5);
        assert_eq!(truth.tag(), "toy");
    }

    #[test]
    fn test_set_is_independent_and_deterministic() {
        let cfg = ExperimentConfig::defaults(Experiment::Mixture);
        let (train, _) = gen_dataset(&cfg).unwrap();
        let test = gen_test_dataset(&cfg).unwrap();
        assert_eq!(train.x, test.x);
        assert_ne!(train.y, test.y);
        assert_eq!(test, gen_test_dataset(&cfg).unwrap());
    }
}
