//! Forward-noising schedule and the one-step latent restoration.
//!
//! The network predicts noise at a single, fixed timestep `T`. The restored
//! high-resolution latent is
//!
//! ```text
//! Z_H = (Z_L - sqrt(1 - abar_T) * eps) / sqrt(abar_T)
//! ```
//!
//! where `abar_T` is the cumulative alpha product. A perturbation of the
//! noise prediction is therefore amplified into the latent by
//! `lambda(T) / sqrt(abar_T)` with `lambda(T) = sqrt(1 - abar_T)`, which is
//! monotone in `T`. That amplification law is why quantization error hurts
//! least when the backbone is retrained to operate at `T = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{QartError, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_max == 0 {
            return Err(QartError::param("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(QartError::param(format!(
                "beta range ({}, {}) must satisfy 0 < start <= end < 1",
                beta_start, beta_end
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// The conventional 1000-step ramp from 1e-4 to 2e-2.
    pub fn default_linear() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("valid default range")
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(QartError::param(format!(
                "timestep {} outside 1..={}",
                t,
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product of `1 - beta` up to and including `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Noise weight `sqrt(1 - abar_t)` in the one-step restoration.
    pub fn lambda(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// Factor by which a noise-prediction perturbation scales into the
    /// restored latent: `lambda(t) / sqrt(abar_t)`.
    pub fn amplification(&self, t: usize) -> Result<f64> {
        Ok(self.lambda(t)? / self.alpha_bar(t)?.sqrt())
    }

    /// Tape form of the one-step restoration.
    pub fn restore(&self, g: &mut Graph, z_l: Var, eps: Var, t: usize) -> Result<Var> {
        if g.value(z_l).shape() != g.value(eps).shape() {
            return Err(QartError::dim(format!(
                "latent {:?} vs noise {:?}",
                g.value(z_l).shape(),
                g.value(eps).shape()
            )));
        }
        let lam = self.lambda(t)?;
        let root_abar = self.alpha_bar(t)?.sqrt();
        let scaled_eps = g.mul_scalar(eps, lam)?;
        let num = g.sub(z_l, scaled_eps)?;
        let inv = g.scalar(1.0 / root_abar);
        g.mul(num, inv)
    }
}

/// Measured latent-error per candidate timestep, used to pick the
/// retraining target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimestepErrorProfile {
    /// Rows of (t, lambda(t), mean latent error of the quantized model).
    pub rows: Vec<(usize, f64, f64)>,
}

impl TimestepErrorProfile {
    /// Timestep with the smallest measured latent error.
    pub fn best_t(&self) -> Result<usize> {
        self.rows
            .iter()
            .min_by(|a, b| a.2.partial_cmp(&b.2).expect("finite errors"))
            .map(|r| r.0)
            .ok_or_else(|| QartError::Calibration("empty timestep profile".into()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,lambda,latent_error\n");
        for (t, lam, err) in &self.rows {
            out.push_str(&format!("{},{},{}\n", t, lam, err));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn beta_ramp_endpoints_and_monotonicity() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.t_max(), 1000);
        assert!((s.beta(1).unwrap() - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000).unwrap() - 2e-2).abs() < 1e-15);
        for t in 1..1000 {
            assert!(s.beta(t).unwrap() < s.beta(t + 1).unwrap());
            assert!(s.alpha_bar(t).unwrap() > s.alpha_bar(t + 1).unwrap());
            assert!(s.lambda(t).unwrap() < s.lambda(t + 1).unwrap());
        }
        assert!(s.beta(0).is_err());
        assert!(s.beta(1001).is_err());
    }

    #[test]
    fn alpha_bar_matches_a_direct_product() {
        let s = NoiseSchedule::default_linear();
        for t in [1usize, 2, 17, 500, 1000] {
            let mut prod = 1.0;
            for i in 1..=t {
                prod *= 1.0 - s.beta(i).unwrap();
            }
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-15);
        }
    }

    #[test]
    fn amplification_spans_orders_of_magnitude() {
        let s = NoiseSchedule::default_linear();
        // Near t = 1 the latent is barely touched; at t = 1000 the noise
        // term dominates by a factor in the hundreds.
        assert!(s.amplification(1).unwrap() < 0.02);
        assert!(s.amplification(1000).unwrap() > 100.0);
    }

    #[test]
    fn restore_matches_scalar_re_evaluation() {
        let s = NoiseSchedule::default_linear();
        let zl = [0.3, -1.2, 0.07];
        let ep = [0.5, 0.25, -0.125];
        for t in [1usize, 250, 1000] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_vec(vec![3], zl.to_vec()).unwrap());
            let e = g.constant(Tensor::from_vec(vec![3], ep.to_vec()).unwrap());
            let out = s.restore(&mut g, z, e, t).unwrap();
            let abar = s.alpha_bar(t).unwrap();
            for i in 0..3 {
                let want = (zl[i] - (1.0 - abar).sqrt() * ep[i]) / abar.sqrt();
                assert!((g.value(out).data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbation_amplification_closed_form() {
        // Perturb the noise input by delta and compare the latent shift to
        // amplification(t) * delta.
        let s = NoiseSchedule::default_linear();
        let delta = 0.001953125; // exact binary fraction
        for t in [1usize, 250, 500, 750, 1000] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::scalar(0.4));
            let e0 = g.constant(Tensor::scalar(0.2));
            let e1 = g.constant(Tensor::scalar(0.2 + delta));
            let out0 = s.restore(&mut g, z, e0, t).unwrap();
            let out1 = s.restore(&mut g, z, e1, t).unwrap();
            let shift = (g.value(out1).data()[0] - g.value(out0).data()[0]).abs();
            let want = s.amplification(t).unwrap() * delta;
            assert!(
                (shift - want).abs() < 1e-10,
                "t {}: shift {} vs {}",
                t,
                shift,
                want
            );
        }
    }

    #[test]
    fn profile_selects_the_minimum_error_row() {
        let p = TimestepErrorProfile {
            rows: vec![(1, 0.01, 0.002), (500, 0.9, 0.4), (1000, 0.999, 2.0)],
        };
        assert_eq!(p.best_t().unwrap(), 1);
        let csv = p.to_csv();
        assert!(csv.starts_with("t,lambda,latent_error\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn invalid_ramps_are_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
    }
}
