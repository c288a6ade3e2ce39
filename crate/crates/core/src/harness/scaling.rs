//! Data-scaling curves and the log-log power-law fit `error(m) = alpha * m^beta`.

use serde::{Deserialize, Serialize};

use super::experiment::{run_experiment, ExperimentConfig, RunResult};
use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::prompting::{LabeledExample, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub m: usize,
    pub accuracy: f64,
    /// `1 - accuracy`.
    pub error: f64,
    /// Population std of per-seed accuracy (equal to that of the error).
    pub std: f64,
}

impl ScalingPoint {
    pub fn from_run(run: &RunResult) -> Self {
        Self {
            m: run.config.m,
            accuracy: run.mean,
            error: 1.0 - run.mean,
            std: run.std,
        }
    }
}

/// One full run per `m`, all sharing `config.seeds`.
pub fn scaling_runs<B: Backend + ?Sized>(
    config: &ExperimentConfig,
    m_values: &[usize],
    task: &TaskSpec,
    train_pool: &[LabeledExample],
    test_pool: &[LabeledExample],
    backend: &B,
) -> Result<Vec<RunResult>> {
    if m_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("m values must be strictly ascending".into()));
    }
    m_values
        .iter()
        .map(|&m| {
            let cfg = ExperimentConfig { m, ..config.clone() };
            run_experiment(&cfg, task, train_pool, test_pool, backend)
        })
        .collect()
}

pub fn scaling_curve<B: Backend + ?Sized>(
    config: &ExperimentConfig,
    m_values: &[usize],
    task: &TaskSpec,
    train_pool: &[LabeledExample],
    test_pool: &[LabeledExample],
    backend: &B,
) -> Result<Vec<ScalingPoint>> {
    Ok(scaling_runs(config, m_values, task, train_pool, test_pool, backend)?
        .iter()
        .map(ScalingPoint::from_run)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta: f64,
    /// RMS of the residuals in log space.
    pub residual: f64,
}

impl PowerLawFit {
    pub fn predict(&self, m: f64) -> f64 {
        self.alpha * m.powf(self.beta)
    }
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<PowerLawFit> {
    if xs.len() != ys.len() {
        return Err(Error::DegenerateFit("x and y lengths differ".into()));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} point(s); need at least 2", xs.len())));
    }
    if let Some((x, y)) = xs.iter().zip(ys).find(|(x, y)| !(**x > 0.0 && **y > 0.0)) {
        return Err(Error::DegenerateFit(format!("non-positive value at ({x}, {y})")));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all m values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let beta = sxy / sxx;
    let intercept = my - beta * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + beta * x);
            r * r
        })
        .sum();
    Ok(PowerLawFit {
        alpha: intercept.exp(),
        beta,
        residual: (sse / n).sqrt(),
    })
}

/// Fit `error(m) = alpha * m^beta` over scaling points.
pub fn power_law_fit(points: &[ScalingPoint]) -> Result<PowerLawFit> {
    let xs: Vec<f64> = points.iter().map(|p| p.m as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error).collect();
    fit_log_log(&xs, &ys)
}

/// The same fit over accuracy instead of error.
pub fn power_law_fit_accuracy(points: &[ScalingPoint]) -> Result<PowerLawFit> {
    let xs: Vec<f64> = points.iter().map(|p| p.m as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    fit_log_log(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(m: usize, error: f64) -> ScalingPoint {
        ScalingPoint {
            m,
            accuracy: 1.0 - error,
            error,
            std: 0.0,
        }
    }

    #[test]
    fn exact_power_law() {
        let pts: Vec<_> = [2usize, 8, 32, 128]
            .iter()
            .map(|&m| point(m, 2.0 * (m as f64).powf(-0.5)))
            .collect();
        // errors above 1 are fine for the fit itself
        let fit = power_law_fit(&pts).unwrap();
        assert!((fit.alpha - 2.0).abs() < 1e-9, "{fit:?}");
        assert!((fit.beta + 0.5).abs() < 1e-9);
        assert!(fit.residual < 1e-12);
        assert!((fit.predict(8.0) - pts[1].error).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(power_law_fit(&[point(2, 0.3)]), Err(Error::DegenerateFit(_))));
        assert!(matches!(power_law_fit(&[point(2, 0.3), point(4, 0.0)]), Err(Error::DegenerateFit(_))));
        assert!(matches!(power_law_fit(&[point(2, 0.3), point(2, 0.2)]), Err(Error::DegenerateFit(_))));
    }
}
