//! Affine fake-quantization.
//!
//! A [`Quantizer`] maps reals onto a `bits`-wide integer grid and back:
//! `x_int = clip(round((x - z) / s), l, u)`, `x_hat = s * x_int + z`.
//! On the tape the same map is built from `clip` and `round_ste` primitives,
//! which makes the backward pass exactly the straight-through estimator for
//! the input (gradient passes iff `(x - z)/s` lies in `[l, u]`) and the
//! learned-step-size rule for `s` and `z`.

use serde::{Deserialize, Serialize};

use crate::error::{QartError, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Smallest representable step; calibration never returns a scale below it.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizerMode {
    /// Identity: values pass through bit-unchanged.
    FpPassthrough,
    /// Range calibrated once from observed extrema, then fixed.
    MaxMinStatic,
    /// Range calibrated as above, then `s` (and `z` when asymmetric)
    /// trained by gradient descent.
    LearnedStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    /// One (scale, zero) pair per row of a `[rows, cols]` tensor.
    PerChannel,
}

#[derive(Debug, Clone)]
pub struct Quantizer {
    pub mode: QuantizerMode,
    pub bits: u32,
    /// Signed grids are symmetric around zero (`z = 0` after calibration);
    /// unsigned grids are asymmetric with a free zero offset.
    pub signed: bool,
    pub granularity: Granularity,
    /// Shape `[1]` per-tensor or `[rows, 1]` per-channel.
    pub scale: Tensor,
    pub zero: Tensor,
}

impl Quantizer {
    pub fn new(
        mode: QuantizerMode,
        bits: u32,
        signed: bool,
        granularity: Granularity,
    ) -> Result<Quantizer> {
        let mode = if bits == 32 {
            QuantizerMode::FpPassthrough
        } else {
            mode
        };
        if bits != 32 && !(2..=8).contains(&bits) {
            return Err(QartError::param(format!("unsupported bit width {}", bits)));
        }
        Ok(Quantizer {
            mode,
            bits,
            signed,
            granularity,
            scale: Tensor::scalar(1.0),
            zero: Tensor::scalar(0.0),
        })
    }

    pub fn is_passthrough(&self) -> bool {
        self.mode == QuantizerMode::FpPassthrough
    }

    /// Lower integer bound of the grid.
    pub fn lo(&self) -> f64 {
        if self.signed {
            -(2f64.powi(self.bits as i32 - 1))
        } else {
            0.0
        }
    }

    /// Upper integer bound of the grid.
    pub fn hi(&self) -> f64 {
        if self.signed {
            2f64.powi(self.bits as i32 - 1) - 1.0
        } else {
            2f64.powi(self.bits as i32) - 1.0
        }
    }

    /// Whether the zero offset is a trained parameter.
    pub fn trains_zero(&self) -> bool {
        self.mode == QuantizerMode::LearnedStep && !self.signed
    }

    /// Fit scale and zero to the extrema of the given samples. Per-channel
    /// granularity fits one pair per row and requires all samples to share
    /// their row count.
    pub fn calibrate(&mut self, samples: &[&Tensor]) -> Result<()> {
        if self.is_passthrough() {
            return Ok(());
        }
        if samples.is_empty() {
            return Err(QartError::Calibration(
                "no samples to calibrate from".into(),
            ));
        }
        match self.granularity {
            Granularity::PerTensor => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for s in samples {
                    for &x in s.data() {
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                let (s, z) = self.fit_range(lo, hi);
                self.scale = Tensor::scalar(s);
                self.zero = Tensor::scalar(z);
            }
            Granularity::PerChannel => {
                let (rows, _) = samples[0].dims2()?;
                let mut lo = vec![f64::INFINITY; rows];
                let mut hi = vec![f64::NEG_INFINITY; rows];
                for s in samples {
                    let (m, n) = s.dims2()?;
                    if m != rows {
                        return Err(QartError::Calibration(format!(
                            "per-channel samples disagree on rows: {} vs {}",
                            m, rows
                        )));
                    }
                    for i in 0..m {
                        for j in 0..n {
                            let x = s.data()[i * n + j];
                            lo[i] = lo[i].min(x);
                            hi[i] = hi[i].max(x);
                        }
                    }
                }
                let mut sv = Vec::with_capacity(rows);
                let mut zv = Vec::with_capacity(rows);
                for i in 0..rows {
                    let (s, z) = self.fit_range(lo[i], hi[i]);
                    sv.push(s);
                    zv.push(z);
                }
                self.scale = Tensor::from_vec(vec![rows, 1], sv)?;
                self.zero = Tensor::from_vec(vec![rows, 1], zv)?;
            }
        }
        Ok(())
    }

    /// Map observed `[lo, hi]` to (scale, zero) under this quantizer's
    /// signedness. Degenerate ranges fall back to the scale floor.
    fn fit_range(&self, lo: f64, hi: f64) -> (f64, f64) {
        if self.signed {
            let absmax = lo.abs().max(hi.abs());
            ((absmax / self.hi()).max(SCALE_FLOOR), 0.0)
        } else {
            let s = ((hi - lo) / (self.hi() - self.lo())).max(SCALE_FLOOR);
            // z = lo - l*s with l = 0: the grid starts exactly at lo.
            (s, lo)
        }
    }

    /// Clamp the scale back above the floor; called after optimizer updates.
    pub fn enforce_scale_floor(&mut self) {
        for s in self.scale.data_mut() {
            if *s < SCALE_FLOOR {
                *s = SCALE_FLOOR;
            }
        }
    }

    fn check_broadcast(&self, x: &Tensor) -> Result<()> {
        if self.granularity == Granularity::PerChannel {
            let rows = self.scale.shape()[0];
            match x.shape() {
                [m, _] if *m == rows => Ok(()),
                other => Err(QartError::dim(format!(
                    "per-channel quantizer over {} rows applied to shape {:?}",
                    rows, other
                ))),
            }
        } else {
            Ok(())
        }
    }

    /// Integer codes under the current grid.
    pub fn quantize_int(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_passthrough() {
            return Err(QartError::param(
                "passthrough quantizer has no integer grid",
            ));
        }
        self.check_broadcast(x)?;
        let (lo, hi) = (self.lo(), self.hi());
        let out = self.map_with_params(x, |v, s, z| (((v - z) / s).round()).clamp(lo, hi));
        Ok(out)
    }

    /// Quantize then dequantize eagerly (no tape).
    pub fn quantize_dequantize(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_passthrough() {
            return Ok(x.clone());
        }
        self.check_broadcast(x)?;
        let (lo, hi) = (self.lo(), self.hi());
        Ok(self.map_with_params(x, |v, s, z| s * (((v - z) / s).round()).clamp(lo, hi) + z))
    }

    fn map_with_params(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let per_channel = self.granularity == Granularity::PerChannel;
        let cols = if per_channel {
            x.numel() / self.scale.shape()[0]
        } else {
            0
        };
        let mut out = x.clone();
        out.requires_grad = false;
        out.grad = None;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let idx = if per_channel { i / cols } else { 0 };
            *v = f(*v, self.scale.data()[idx], self.zero.data()[idx]);
        }
        out
    }

    /// Record the fake-quant map on the tape. `s` and `z` default to this
    /// quantizer's stored parameters as constants; pass tape variables to
    /// make them trainable.
    pub fn fake_quant(&self, g: &mut Graph, x: Var, s: Option<Var>, z: Option<Var>) -> Result<Var> {
        if self.is_passthrough() {
            return Ok(x);
        }
        self.check_broadcast(g.value(x))?;
        let s = s.unwrap_or_else(|| g.constant(self.scale.clone()));
        let z = z.unwrap_or_else(|| g.constant(self.zero.clone()));
        let shifted = g.sub(x, z)?;
        let v = g.div(shifted, s)?;
        let c = g.clip(v, self.lo(), self.hi());
        let q = g.round_ste(c);
        let scaled = g.mul(q, s)?;
        g.add(scaled, z)
    }
}
