//! Channel-wise equivalent transformation and the finetuning quantizer.
//!
//! The transformation moves a shift `gamma` and a positive per-input-channel
//! scale `phi` between a linear layer's input and its weights without
//! changing the output:
//!
//! ```text
//! W @ X + B  ==  (phi ⊙ W) @ ((X - gamma) ⊘ phi)  +  (B + W @ gamma)
//! ```
//!
//! The finetuning quantizer splits the weight into a full-precision low-rank
//! skip `L1 @ L2` plus a quantized residual, adds a trainable low-rank
//! correction `F1 @ F2` inside the quantized branch, and applies the
//! transformation around the quantizers:
//!
//! ```text
//! y = L1 @ (L2 @ x)
//!   + Q_W(phi ⊙ (R + F1 @ F2)) @ Q_A((x - gamma) ⊘ phi)
//!   + Q_B(B + (R + F1 @ F2) @ gamma)            with R = W - L1 @ L2
//! ```
//!
//! With passthrough quantizers and F = 0 this reproduces the original layer
//! exactly for any `phi > 0`, `gamma`; with rank 0 it reduces to plain
//! fake-quantization of weights, activations and bias.

use crate::error::{QartError, Result};
use crate::quant::{Granularity, Quantizer, QuantizerMode};
use crate::rng::randn;
use crate::tensor::svd::svd_truncated;
use crate::tensor::{matmul, BindClass, Binder, Graph, Tensor, Var};

/// Shift-and-scale reparameterization of a layer input, stored as
/// `log(phi)` so the scale stays positive under unconstrained updates.
#[derive(Debug, Clone)]
pub struct EquivalentTransform {
    /// `[n, 1]`, one entry per input channel.
    pub log_phi: Tensor,
    /// `[n, 1]` shift, shared between the input and the bias compensation.
    pub gamma: Tensor,
}

impl EquivalentTransform {
    pub fn identity(n: usize) -> EquivalentTransform {
        EquivalentTransform {
            log_phi: Tensor::zeros(vec![n, 1]),
            gamma: Tensor::zeros(vec![n, 1]),
        }
    }

    pub fn n(&self) -> usize {
        self.log_phi.shape()[0]
    }

    pub fn phi(&self) -> Tensor {
        self.log_phi.map(f64::exp)
    }

    /// `(x - gamma) ⊘ phi` for `x` of shape `[n, cols]`.
    pub fn transform_input(&self, x: &Tensor) -> Result<Tensor> {
        let (n, cols) = x.dims2()?;
        if n != self.n() {
            return Err(QartError::dim(format!(
                "input rows {} vs transform size {}",
                n,
                self.n()
            )));
        }
        let phi = self.phi();
        let mut out = x.clone();
        for i in 0..n {
            let g = self.gamma.data()[i];
            let p = phi.data()[i];
            for j in 0..cols {
                let v = &mut out.data_mut()[i * cols + j];
                *v = (*v - g) / p;
            }
        }
        Ok(out)
    }

    /// Column-scale the weight: `phi ⊙ W` for `W` of shape `[m, n]`.
    pub fn transform_weight(&self, w: &Tensor) -> Result<Tensor> {
        let (m, n) = w.dims2()?;
        if n != self.n() {
            return Err(QartError::dim(format!(
                "weight cols {} vs transform size {}",
                n,
                self.n()
            )));
        }
        let phi = self.phi();
        let mut out = w.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] *= phi.data()[j];
            }
        }
        Ok(out)
    }

    /// Shift compensation folded into the bias: `B + W @ gamma` for bias
    /// `[m, 1]`.
    pub fn transform_bias(&self, b: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (m, n) = w.dims2()?;
        if b.shape() != [m, 1] {
            return Err(QartError::dim(format!(
                "bias shape {:?} vs weight rows {}",
                b.shape(),
                m
            )));
        }
        if n != self.n() {
            return Err(QartError::dim(format!(
                "weight cols {} vs transform size {}",
                n,
                self.n()
            )));
        }
        let shift = matmul(w, &self.gamma)?;
        let mut out = b.clone();
        for i in 0..m {
            out.data_mut()[i] += shift.data()[i];
        }
        Ok(out)
    }
}

/// Configuration for building a [`FinetuneQuantizer`] around a layer.
#[derive(Debug, Clone)]
pub struct FqInit {
    /// Skip rank; None picks `max(1, ceil(min(m,n)/16))`, 0 disables the
    /// skip entirely (plain quantization).
    pub rank: Option<usize>,
    /// Correction rank; None matches the skip rank.
    pub rank_f: Option<usize>,
    pub w_bits: u32,
    pub a_bits: u32,
    pub bias_bits: u32,
    /// When false the bias passes through unquantized.
    pub quantize_bias: bool,
    pub mode: QuantizerMode,
    pub per_channel_weights: bool,
    /// Std of the random init of F1 (F2 starts at zero).
    pub f_std: f64,
}

impl FqInit {
    pub fn new(w_bits: u32, a_bits: u32, mode: QuantizerMode) -> FqInit {
        FqInit {
            rank: None,
            rank_f: None,
            w_bits,
            a_bits,
            bias_bits: 8,
            quantize_bias: true,
            mode,
            per_channel_weights: true,
            f_std: 1e-4,
        }
    }

    pub fn default_rank(m: usize, n: usize) -> usize {
        (m.min(n)).div_ceil(16).max(1)
    }
}

/// Per-layer quantization state: low-rank skip, low-rank correction,
/// equivalent transformation, and the three quantizers.
#[derive(Debug, Clone)]
pub struct FinetuneQuantizer {
    pub name: String,
    pub l1: Tensor,
    pub l2: Tensor,
    pub f1: Tensor,
    pub f2: Tensor,
    pub et: EquivalentTransform,
    pub q_w: Quantizer,
    pub q_a: Quantizer,
    pub q_b: Quantizer,
    pub rank: usize,
    pub rank_f: usize,
}

impl FinetuneQuantizer {
    /// Build the layer state: the skip is the best rank-`r` approximation of
    /// `w` (so the quantized branch starts from the residual), `f1` is a
    /// small random seed for the correction, and the quantizer ranges are
    /// calibrated on exactly the operands they will see at step zero.
    pub fn init(
        name: &str,
        w: &Tensor,
        b: &Tensor,
        act_samples: &[&Tensor],
        cfg: &FqInit,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<FinetuneQuantizer> {
        let (m, n) = w.dims2()?;
        if b.shape() != [m, 1] {
            return Err(QartError::dim(format!(
                "bias shape {:?} for {}x{} weight",
                b.shape(),
                m,
                n
            )));
        }
        let rank = cfg.rank.unwrap_or_else(|| FqInit::default_rank(m, n));
        let rank_f = cfg.rank_f.unwrap_or(rank);
        if rank + rank_f >= m.min(n) {
            return Err(QartError::param(format!(
                "ranks {}+{} must stay below min({}, {})",
                rank, rank_f, m, n
            )));
        }

        let (l1, l2) = if rank == 0 {
            (Tensor::zeros(vec![m, 0]), Tensor::zeros(vec![0, n]))
        } else {
            let f = svd_truncated(w, rank)?;
            let mut l1 = f.u.clone();
            for i in 0..m {
                for j in 0..rank {
                    l1.data_mut()[i * rank + j] *= f.s[j].sqrt();
                }
            }
            let mut l2 = f.vt.clone();
            for i in 0..rank {
                for j in 0..n {
                    l2.data_mut()[i * n + j] *= f.s[i].sqrt();
                }
            }
            (l1, l2)
        };

        let f1 = if rank_f == 0 {
            Tensor::zeros(vec![m, 0])
        } else {
            randn(vec![m, rank_f], cfg.f_std, rng)
        };
        let f2 = Tensor::zeros(vec![rank_f, n]);

        let granularity = if cfg.per_channel_weights {
            Granularity::PerChannel
        } else {
            Granularity::PerTensor
        };
        let mut q_w = Quantizer::new(cfg.mode, cfg.w_bits, true, granularity)?;
        let mut q_a = Quantizer::new(cfg.mode, cfg.a_bits, false, Granularity::PerTensor)?;
        // Bias quantization accompanies weight quantization; with the weight
        // grid disabled (passthrough mode or 32-bit widths) the bias stays
        // full precision too.
        let quantizing = cfg.mode != QuantizerMode::FpPassthrough && cfg.w_bits != 32;
        let mut q_b = if cfg.quantize_bias && quantizing {
            // The bias grid stays static even in learned-step mode: at 8 bits
            // its error is negligible and the compensation term keeps moving
            // anyway through gamma.
            Quantizer::new(
                QuantizerMode::MaxMinStatic,
                cfg.bias_bits,
                true,
                Granularity::PerTensor,
            )?
        } else {
            Quantizer::new(
                QuantizerMode::FpPassthrough,
                32,
                true,
                Granularity::PerTensor,
            )?
        };

        // At init phi = 1, gamma = 0 and F1 @ F2 = 0, so the quantized
        // operands are exactly R, the raw activations, and B.
        let residual = sub(w, &matmul_or_zeros(&l1, &l2, m, n)?)?;
        if !q_w.is_passthrough() {
            q_w.calibrate(&[&residual])?;
        }
        if !q_a.is_passthrough() {
            if act_samples.is_empty() {
                return Err(QartError::Calibration(format!(
                    "activation quantizer for {} needs at least one sample",
                    name
                )));
            }
            q_a.calibrate(act_samples)?;
        }
        if !q_b.is_passthrough() {
            q_b.calibrate(&[b])?;
        }

        Ok(FinetuneQuantizer {
            name: name.to_string(),
            l1,
            l2,
            f1,
            f2,
            et: EquivalentTransform::identity(n),
            q_w,
            q_a,
            q_b,
            rank,
            rank_f,
        })
    }

    /// Record the quantized layer on the tape. `x` is `[n, cols]`; the
    /// original `w`, `b` enter as frozen constants in every mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        w: &Tensor,
        b: &Tensor,
    ) -> Result<Var> {
        let (_, n) = w.dims2()?;
        let (xr, _) = g.value(x).dims2()?;
        if xr != n {
            return Err(QartError::dim(format!(
                "{}: input rows {} vs weight cols {}",
                self.name, xr, n
            )));
        }
        let nm = |field: &str| format!("{}.{}", self.name, field);

        let wc = binder.param(g, &nm("w"), BindClass::Backbone, w);
        let bc = binder.param(g, &nm("b"), BindClass::Backbone, b);
        let l1 = binder.param(g, &nm("l1"), BindClass::Quant, &self.l1);
        let l2 = binder.param(g, &nm("l2"), BindClass::Quant, &self.l2);
        let f1 = binder.param(g, &nm("f1"), BindClass::Quant, &self.f1);
        let f2 = binder.param(g, &nm("f2"), BindClass::Quant, &self.f2);
        let log_phi = binder.param(g, &nm("log_phi"), BindClass::Quant, &self.et.log_phi);
        let gamma = binder.param(g, &nm("gamma"), BindClass::Quant, &self.et.gamma);

        // Full-precision low-rank skip.
        let skip = if self.rank > 0 {
            let l2x = g.matmul(l2, x)?;
            Some(g.matmul(l1, l2x)?)
        } else {
            None
        };

        // Residual plus correction, before and after the channel scaling.
        let mut weff = wc;
        if self.rank > 0 {
            let l1l2 = g.matmul(l1, l2)?;
            weff = g.sub(weff, l1l2)?;
        }
        if self.rank_f > 0 {
            let f1f2 = g.matmul(f1, f2)?;
            weff = g.add(weff, f1f2)?;
        }
        let phi = g.exp(log_phi);
        let phi_row = g.reshape(phi, vec![1, n])?;
        let wt = g.mul(weff, phi_row)?;

        let s_w = self.bind_scale(g, binder, &nm("qw.s"), &self.q_w);
        let wq = self.q_w.fake_quant(g, wt, s_w, None)?;

        // Transformed, quantized input.
        let shifted = g.sub(x, gamma)?;
        let xt = g.div(shifted, phi)?;
        let s_a = self.bind_scale(g, binder, &nm("qa.s"), &self.q_a);
        let z_a = if self.q_a.trains_zero() {
            Some(binder.param(g, &nm("qa.z"), BindClass::Quant, &self.q_a.zero))
        } else {
            None
        };
        let xq = self.q_a.fake_quant(g, xt, s_a, z_a)?;

        let main = g.matmul(wq, xq)?;

        // Bias with the shift compensation, quantized on its own grid.
        let beff = if g.value(gamma).data().iter().all(|&v| v == 0.0) {
            bc
        } else {
            let shift = g.matmul(weff, gamma)?;
            g.add(bc, shift)?
        };
        let bq = self.q_b.fake_quant(g, beff, None, None)?;

        let mut y = g.add(main, bq)?;
        if let Some(skip) = skip {
            y = g.add(y, skip)?;
        }
        Ok(y)
    }

    fn bind_scale(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        name: &str,
        q: &Quantizer,
    ) -> Option<Var> {
        if q.mode == QuantizerMode::LearnedStep {
            Some(binder.param(g, name, BindClass::Quant, &q.scale))
        } else {
            None
        }
    }

    /// The trainable fields, in a fixed order, for optimizer bookkeeping.
    pub fn visit_trainables(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        let base = self.name.clone();
        f(format!("{}.l1", base), &mut self.l1);
        f(format!("{}.l2", base), &mut self.l2);
        f(format!("{}.f1", base), &mut self.f1);
        f(format!("{}.f2", base), &mut self.f2);
        f(format!("{}.log_phi", base), &mut self.et.log_phi);
        f(format!("{}.gamma", base), &mut self.et.gamma);
        if self.q_w.mode == QuantizerMode::LearnedStep {
            f(format!("{}.qw.s", base), &mut self.q_w.scale);
            self.q_w.enforce_scale_floor();
        }
        if self.q_a.mode == QuantizerMode::LearnedStep {
            f(format!("{}.qa.s", base), &mut self.q_a.scale);
            if self.q_a.trains_zero() {
                f(format!("{}.qa.z", base), &mut self.q_a.zero);
            }
            self.q_a.enforce_scale_floor();
        }
    }

    /// Named tensors for checkpointing, in a fixed order. Together with the
    /// `meta` entry this is enough to rebuild the layer state exactly.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let nm = |f: &str| format!("{}.{}", self.name, f);
        let mode_code = |m: QuantizerMode| match m {
            QuantizerMode::FpPassthrough => 0.0,
            QuantizerMode::MaxMinStatic => 1.0,
            QuantizerMode::LearnedStep => 2.0,
        };
        let gran_code = |g: Granularity| match g {
            Granularity::PerTensor => 0.0,
            Granularity::PerChannel => 1.0,
        };
        let meta = Tensor::from_vec(
            vec![10],
            vec![
                self.q_w.bits as f64,
                self.q_a.bits as f64,
                self.q_b.bits as f64,
                mode_code(self.q_w.mode),
                mode_code(self.q_a.mode),
                mode_code(self.q_b.mode),
                self.rank as f64,
                self.rank_f as f64,
                gran_code(self.q_w.granularity),
                gran_code(self.q_a.granularity),
            ],
        )
        .expect("static shape");
        vec![
            (nm("meta"), meta),
            (nm("l1"), self.l1.clone()),
            (nm("l2"), self.l2.clone()),
            (nm("f1"), self.f1.clone()),
            (nm("f2"), self.f2.clone()),
            (nm("log_phi"), self.et.log_phi.clone()),
            (nm("gamma"), self.et.gamma.clone()),
            (nm("qw.s"), self.q_w.scale.clone()),
            (nm("qw.z"), self.q_w.zero.clone()),
            (nm("qa.s"), self.q_a.scale.clone()),
            (nm("qa.z"), self.q_a.zero.clone()),
            (nm("qb.s"), self.q_b.scale.clone()),
            (nm("qb.z"), self.q_b.zero.clone()),
        ]
    }

    /// Rebuild from [`FinetuneQuantizer::state_tensors`] output; `name` must
    /// match the prefix the state was saved under.
    pub fn from_state(name: &str, tensors: &[(String, Tensor)]) -> Result<FinetuneQuantizer> {
        let find = |field: &str| -> Result<&Tensor> {
            let key = format!("{}.{}", name, field);
            tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| QartError::format(0, format!("checkpoint missing {}", key)))
        };
        let meta = find("meta")?;
        if meta.numel() != 10 {
            return Err(QartError::format(
                0,
                format!("{}.meta has {} entries", name, meta.numel()),
            ));
        }
        let mode_of = |code: f64| -> Result<QuantizerMode> {
            match code as i64 {
                0 => Ok(QuantizerMode::FpPassthrough),
                1 => Ok(QuantizerMode::MaxMinStatic),
                2 => Ok(QuantizerMode::LearnedStep),
                other => Err(QartError::format(
                    0,
                    format!("unknown quantizer mode code {}", other),
                )),
            }
        };
        let gran_of = |code: f64| -> Result<Granularity> {
            match code as i64 {
                0 => Ok(Granularity::PerTensor),
                1 => Ok(Granularity::PerChannel),
                other => Err(QartError::format(
                    0,
                    format!("unknown granularity code {}", other),
                )),
            }
        };
        let md = meta.data();
        let build = |bits: f64,
                     mode: f64,
                     signed: bool,
                     gran: f64,
                     s: &str,
                     z: &str|
         -> Result<Quantizer> {
            let mut q = Quantizer::new(mode_of(mode)?, bits as u32, signed, gran_of(gran)?)?;
            q.scale = find(s)?.clone();
            q.zero = find(z)?.clone();
            Ok(q)
        };
        let q_w = build(md[0], md[3], true, md[8], "qw.s", "qw.z")?;
        let q_a = build(md[1], md[4], false, md[9], "qa.s", "qa.z")?;
        let q_b = build(md[2], md[5], true, 0.0, "qb.s", "qb.z")?;
        let fq = FinetuneQuantizer {
            name: name.to_string(),
            l1: find("l1")?.clone(),
            l2: find("l2")?.clone(),
            f1: find("f1")?.clone(),
            f2: find("f2")?.clone(),
            et: EquivalentTransform {
                log_phi: find("log_phi")?.clone(),
                gamma: find("gamma")?.clone(),
            },
            q_w,
            q_a,
            q_b,
            rank: md[6] as usize,
            rank_f: md[7] as usize,
        };
        let (m, r) = fq.l1.dims2()?;
        let (r2, n) = fq.l2.dims2()?;
        if r != fq.rank
            || r2 != fq.rank
            || fq.f1.shape() != [m, fq.rank_f]
            || fq.f2.shape() != [fq.rank_f, n]
        {
            return Err(QartError::format(
                0,
                format!("inconsistent low-rank shapes in checkpoint for {}", name),
            ));
        }
        Ok(fq)
    }
}

fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(QartError::dim(format!(
            "sub shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o -= bv;
    }
    Ok(out)
}

fn matmul_or_zeros(a: &Tensor, b: &Tensor, m: usize, n: usize) -> Result<Tensor> {
    if a.shape()[1] == 0 {
        Ok(Tensor::zeros(vec![m, n]))
    } else {
        matmul(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};
    use crate::tensor::Graph;

    fn random_layer(m: usize, n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = seeded(seed);
        let w = uniform(vec![m, n], -1.0, 1.0, &mut rng);
        let b = uniform(vec![m, 1], -0.5, 0.5, &mut rng);
        let x = uniform(vec![n, 7], -2.0, 2.0, &mut rng);
        (w, b, x)
    }

    fn fp_output(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
        let mut y = matmul(w, x).unwrap();
        let (m, cols) = y.dims2().unwrap();
        for i in 0..m {
            for j in 0..cols {
                y.data_mut()[i * cols + j] += b.data()[i];
            }
        }
        y
    }

    #[test]
    fn equivalent_transform_is_exact() {
        let mut rng = seeded(3);
        for trial in 0..20u64 {
            let (w, b, x) = random_layer(6, 10, 100 + trial);
            let mut et = EquivalentTransform::identity(10);
            et.log_phi = uniform(vec![10, 1], -2.0, 2.0, &mut rng);
            et.gamma = uniform(vec![10, 1], -3.0, 3.0, &mut rng);
            let xt = et.transform_input(&x).unwrap();
            let wt = et.transform_weight(&w).unwrap();
            let bt = et.transform_bias(&b, &w).unwrap();
            let got = fp_output(&wt, &bt, &xt);
            let want = fp_output(&w, &b, &x);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-9);
        }
    }

    fn passthrough_cfg() -> FqInit {
        FqInit::new(32, 32, QuantizerMode::FpPassthrough)
    }

    #[test]
    fn state_round_trip_reproduces_the_layer_bit_for_bit() {
        let (w, b, x) = random_layer(6, 9, 77);
        let cfg = FqInit::new(3, 5, QuantizerMode::LearnedStep);
        let mut fq =
            FinetuneQuantizer::init("blockX.conv", &w, &b, &[&x], &cfg, &mut seeded(9)).unwrap();
        // Perturb a few fields so the round trip is not testing init defaults.
        fq.et.log_phi.data_mut()[2] = 0.31;
        fq.et.gamma.data_mut()[4] = -0.12;
        fq.f2.data_mut()[0] = 0.05;
        let state = fq.state_tensors();
        let back = FinetuneQuantizer::from_state("blockX.conv", &state).unwrap();
        assert_eq!(back.rank, fq.rank);
        assert_eq!(back.rank_f, fq.rank_f);
        assert_eq!(back.q_w.mode, fq.q_w.mode);
        assert_eq!(back.q_a.bits, 5);
        assert_eq!(back.q_b.mode, fq.q_b.mode);

        let run = |f: &FinetuneQuantizer| {
            let mut g = Graph::new();
            let mut binder = Binder::frozen();
            let xv = g.constant(x.clone());
            let y = f.forward(&mut g, &mut binder, xv, &w, &b).unwrap();
            g.value(y).clone()
        };
        let (ya, yb) = (run(&fq), run(&back));
        let a_bits: Vec<u64> = ya.data().iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u64> = yb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);

        let mut missing = state.clone();
        missing.retain(|(n, _)| n != "blockX.conv.gamma");
        assert!(FinetuneQuantizer::from_state("blockX.conv", &missing).is_err());
    }

    #[test]
    fn passthrough_with_arbitrary_transform_reproduces_fp() {
        let mut rng = seeded(5);
        for trial in 0..10u64 {
            let (w, b, x) = random_layer(8, 12, 200 + trial);
            let mut cfg = passthrough_cfg();
            cfg.quantize_bias = false;
            let mut fq =
                FinetuneQuantizer::init("layer", &w, &b, &[&x], &cfg, &mut seeded(trial)).unwrap();
            // Arbitrary positive scale and shift must not change the output.
            fq.et.log_phi = uniform(vec![12, 1], -1.5, 1.5, &mut rng);
            fq.et.gamma = uniform(vec![12, 1], -2.0, 2.0, &mut rng);
            let mut g = Graph::new();
            let mut binder = Binder::frozen();
            let xv = g.constant(x.clone());
            let y = fq.forward(&mut g, &mut binder, xv, &w, &b).unwrap();
            let want = fp_output(&w, &b, &x);
            assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-9);
        }
    }

    #[test]
    fn rank_zero_reduces_to_plain_quantization() {
        let (w, b, x) = random_layer(6, 9, 42);
        let mut cfg = FqInit::new(4, 4, QuantizerMode::MaxMinStatic);
        cfg.rank = Some(0);
        cfg.rank_f = Some(0);
        let fq = FinetuneQuantizer::init("layer", &w, &b, &[&x], &cfg, &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let xv = g.constant(x.clone());
        let y = fq.forward(&mut g, &mut binder, xv, &w, &b).unwrap();

        // Independent composition from standalone quantizers.
        let mut q_w = Quantizer::new(
            QuantizerMode::MaxMinStatic,
            4,
            true,
            Granularity::PerChannel,
        )
        .unwrap();
        q_w.calibrate(&[&w]).unwrap();
        let mut q_a = Quantizer::new(
            QuantizerMode::MaxMinStatic,
            4,
            false,
            Granularity::PerTensor,
        )
        .unwrap();
        q_a.calibrate(&[&x]).unwrap();
        let mut q_b =
            Quantizer::new(QuantizerMode::MaxMinStatic, 8, true, Granularity::PerTensor).unwrap();
        q_b.calibrate(&[&b]).unwrap();
        let want = fp_output(
            &q_w.quantize_dequantize(&w).unwrap(),
            &q_b.quantize_dequantize(&b).unwrap(),
            &q_a.quantize_dequantize(&x).unwrap(),
        );
        assert_eq!(g.value(y).data(), want.data());
    }

    #[test]
    fn skip_plus_residual_equals_weight_at_init() {
        // With passthrough quantizers the init must reproduce FP exactly:
        // L1 @ L2 + (W - L1 @ L2) telescopes back to W.
        let (w, b, x) = random_layer(10, 16, 77);
        let cfg = passthrough_cfg();
        let fq = FinetuneQuantizer::init("layer", &w, &b, &[&x], &cfg, &mut seeded(1)).unwrap();
        assert_eq!(fq.rank, 1);
        assert_eq!(fq.rank_f, 1);
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let xv = g.constant(x.clone());
        let y = fq.forward(&mut g, &mut binder, xv, &w, &b).unwrap();
        let want = fp_output(&w, &b, &x);
        assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-9);
    }

    #[test]
    fn rank_precondition_is_enforced() {
        let (w, b, x) = random_layer(4, 6, 9);
        let mut cfg = passthrough_cfg();
        cfg.rank = Some(2);
        cfg.rank_f = Some(2);
        assert!(FinetuneQuantizer::init("layer", &w, &b, &[&x], &cfg, &mut seeded(0)).is_err());
        cfg.rank_f = Some(1);
        assert!(FinetuneQuantizer::init("layer", &w, &b, &[&x], &cfg, &mut seeded(0)).is_ok());
    }

    #[test]
    fn quant_mode_trains_quant_fields_only() {
        let (w, b, x) = random_layer(6, 8, 13);
        let cfg = FqInit::new(4, 4, QuantizerMode::LearnedStep);
        let fq = FinetuneQuantizer::init("layer", &w, &b, &[&x], &cfg, &mut seeded(2)).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::training(BindClass::Quant);
        let xv = g.constant(x.clone());
        let y = fq.forward(&mut g, &mut binder, xv, &w, &b).unwrap();
        let loss = {
            let sq = g.mul(y, y).unwrap();
            g.mean(sq).unwrap()
        };
        g.backward(loss).unwrap();
        let names: Vec<&str> = binder.bound().iter().map(|(n, _)| n.as_str()).collect();
        for field in [
            "layer.l1",
            "layer.l2",
            "layer.f1",
            "layer.f2",
            "layer.log_phi",
            "layer.gamma",
            "layer.qw.s",
            "layer.qa.s",
            "layer.qa.z",
        ] {
            assert!(names.contains(&field), "missing {}", field);
        }
        assert!(!names.contains(&"layer.w"));
        assert!(!names.contains(&"layer.b"));
        for (name, grad) in binder.collect_grads(&g) {
            assert!(grad.is_some(), "no gradient reached {}", name);
        }
    }

    #[test]
    fn finite_difference_through_the_transform() {
        // Check d loss / d log_phi and d loss / d gamma against central
        // differences with passthrough quantizers (smooth everywhere).
        let (w, b, x) = random_layer(5, 6, 21);
        let mut cfg = passthrough_cfg();
        cfg.quantize_bias = false;
        let mut fq = FinetuneQuantizer::init("layer", &w, &b, &[&x], &cfg, &mut seeded(3)).unwrap();
        fq.et.log_phi = uniform(vec![6, 1], -0.5, 0.5, &mut seeded(31));
        fq.et.gamma = uniform(vec![6, 1], -0.5, 0.5, &mut seeded(32));

        let loss_of = |fq: &FinetuneQuantizer| -> f64 {
            let mut g = Graph::new();
            let mut binder = Binder::frozen();
            let xv = g.constant(x.clone());
            let y = fq.forward(&mut g, &mut binder, xv, &w, &b).unwrap();
            let sq = g.mul(y, y).unwrap();
            let m = g.mean(sq).unwrap();
            g.value(m).item().unwrap()
        };

        let mut g = Graph::new();
        let mut binder = Binder::training(BindClass::Quant);
        let xv = g.constant(x.clone());
        let y = fq.forward(&mut g, &mut binder, xv, &w, &b).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap();
        let grads = binder.collect_grads(&g);

        let h = 1e-6;
        for (field, idx) in [("log_phi", 2usize), ("gamma", 4)] {
            let name = format!("layer.{}", field);
            let analytic = grads
                .iter()
                .find(|(n, _)| *n == name)
                .and_then(|(_, g)| g.as_ref().map(|v| v[idx]))
                .unwrap();
            let mut plus = fq.clone();
            let mut minus = fq.clone();
            match field {
                "log_phi" => {
                    plus.et.log_phi.data_mut()[idx] += h;
                    minus.et.log_phi.data_mut()[idx] -= h;
                }
                _ => {
                    plus.et.gamma.data_mut()[idx] += h;
                    minus.et.gamma.data_mut()[idx] -= h;
                }
            }
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(
                (analytic - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                "{}: analytic {} vs fd {}",
                field,
                analytic,
                fd
            );
        }
    }
}
