//! Linear Gaussian Bayesian network over `pixel, cores -> fps`.
//!
//! The structure is fixed: both configuration variables are parents of the
//! throughput node. Fitting reduces to ordinary least squares of `fps` on the
//! two parents; the residual spread becomes the Gaussian noise of the child.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slo::Variable;

/// Minimum number of rows [`fit`] accepts.
pub const MIN_FIT_ROWS: usize = 10;

/// One logged service state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub service_id: String,
    pub tick: u64,
    pub pixel: u32,
    pub cores: u32,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {required} rows to fit, got {got}")]
    TooFewRows { got: usize, required: usize },
    #[error("parent column {0} has fewer than 2 distinct values")]
    ConstantParent(Variable),
    #[error("parent columns are collinear; design matrix is rank deficient")]
    Collinear,
    #[error("non-finite value in row at tick {0}")]
    NonFinite(u64),
}

/// The fixed network shape, serialized alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub nodes: Vec<Variable>,
    pub edges: Vec<(Variable, Variable)>,
}

impl Default for Structure {
    fn default() -> Self {
        Structure {
            nodes: alloc::vec![Variable::Pixel, Variable::Cores, Variable::Fps],
            edges: alloc::vec![
                (Variable::Pixel, Variable::Fps),
                (Variable::Cores, Variable::Fps)
            ],
        }
    }
}

/// Linear-Gaussian conditional `fps | pixel, cores`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgbnModel {
    #[serde(default)]
    pub structure: Structure,
    pub intercept: f64,
    pub cores_coef: f64,
    pub pixel_coef: f64,
    pub noise_sigma: f64,
    pub sample_count: usize,
}

impl LgbnModel {
    /// A model with the given coefficients, as if fitted on no data.
    pub fn from_coefficients(intercept: f64, cores_coef: f64, pixel_coef: f64, noise_sigma: f64) -> Self {
        LgbnModel {
            structure: Structure::default(),
            intercept,
            cores_coef,
            pixel_coef,
            noise_sigma,
            sample_count: 0,
        }
    }

    /// Conditional mean of fps. Not clamped; may be negative.
    pub fn expect_fps(&self, pixel: u32, cores: u32) -> f64 {
        self.mean_at(f64::from(pixel), f64::from(cores))
    }

    fn mean_at(&self, pixel: f64, cores: f64) -> f64 {
        self.intercept + self.cores_coef * cores + self.pixel_coef * pixel
    }

    /// One draw of fps, clamped at zero.
    ///
    /// Always consumes exactly one standard-normal draw so the generator
    /// sequence does not depend on `noise_sigma`.
    pub fn sample_fps<R: Rng + ?Sized>(&self, pixel: u32, cores: u32, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.expect_fps(pixel, cores) + self.noise_sigma * z).max(0.0)
    }
}

/// Drops snapshots in the settling window `(a, a + window]` after every
/// action tick `a`. Both inputs must be sorted by tick.
pub fn exclude_settling(
    snapshots: &[MetricSnapshot],
    action_ticks: &[u64],
    window: u64,
) -> Vec<MetricSnapshot> {
    let mut out = Vec::with_capacity(snapshots.len());
    // Index of the first action that could still cover the current tick.
    let mut first = 0;
    for snap in snapshots {
        while first < action_ticks.len() && action_ticks[first].saturating_add(window) < snap.tick {
            first += 1;
        }
        let settling = action_ticks[first..]
            .iter()
            .take_while(|&&a| a < snap.tick)
            .any(|&a| snap.tick <= a.saturating_add(window));
        if !settling {
            out.push(snap.clone());
        }
    }
    out
}

/// Least-squares fit of `fps ~ intercept + cores_coef*cores + pixel_coef*pixel`.
pub fn fit(data: &[MetricSnapshot]) -> Result<LgbnModel, FitError> {
    let n = data.len();
    if n < MIN_FIT_ROWS {
        return Err(FitError::TooFewRows {
            got: n,
            required: MIN_FIT_ROWS,
        });
    }
    if let Some(bad) = data.iter().find(|s| !s.fps.is_finite()) {
        return Err(FitError::NonFinite(bad.tick));
    }
    if data.iter().all(|s| s.pixel == data[0].pixel) {
        return Err(FitError::ConstantParent(Variable::Pixel));
    }
    if data.iter().all(|s| s.cores == data[0].cores) {
        return Err(FitError::ConstantParent(Variable::Cores));
    }

    let nf = n as f64;
    let (mut mc, mut mp, mut my) = (0.0, 0.0, 0.0);
    for s in data {
        mc += f64::from(s.cores);
        mp += f64::from(s.pixel);
        my += s.fps;
    }
    mc /= nf;
    mp /= nf;
    my /= nf;

    // Centered normal equations.
    let (mut scc, mut spp, mut scp, mut scy, mut spy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in data {
        let c = f64::from(s.cores) - mc;
        let p = f64::from(s.pixel) - mp;
        let y = s.fps - my;
        scc += c * c;
        spp += p * p;
        scp += c * p;
        scy += c * y;
        spy += p * y;
    }
    let det = scc * spp - scp * scp;
    if !(det > 1e-10 * scc * spp) {
        return Err(FitError::Collinear);
    }
    let cores_coef = (spp * scy - scp * spy) / det;
    let pixel_coef = (scc * spy - scp * scy) / det;
    let intercept = my - cores_coef * mc - pixel_coef * mp;

    let mut model = LgbnModel {
        structure: Structure::default(),
        intercept,
        cores_coef,
        pixel_coef,
        noise_sigma: 0.0,
        sample_count: n,
    };
    let rss: f64 = data
        .iter()
        .map(|s| {
            let r = s.fps - model.mean_at(f64::from(s.pixel), f64::from(s.cores));
            r * r
        })
        .sum();
    model.noise_sigma = libm::sqrt(rss / nf);
    Ok(model)
}
