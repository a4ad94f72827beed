//! Toy one-step super-resolution network.
//!
//! Layout for a `[3, lr*lr]` input (channels x pixels, row-major):
//!
//! ```text
//! encoder   conv 3->c  k3 s2 p1, act        (stays full precision)
//!           conv c->2c k3 s2 p1             -> latent Z_L [2c, (lr/4)^2]
//! denoiser  `blocks` blocks of:
//!             conv 2c->2c k3 s1 p1
//!             + timestep embedding projected to a per-channel bias
//!             -> act
//!           conditioning vector c_y added midway
//!           output is the noise estimate eps
//! restore   Z_H = (Z_L - sqrt(1-abar_T) eps) / sqrt(abar_T)
//! decoder   upsample x4, conv 2c->c k3 s1 p1, act
//!           upsample x4, conv c->3  k3 s1 p1, clamp [0,1]
//! ```
//!
//! The quantizable surface is the module registry: the denoiser blocks and
//! the two decoder layers, in inference order. The encoder is excluded; the
//! restoration, conditioning add and output clamp are glue between modules.

use serde::{Deserialize, Serialize};

use crate::error::{QartError, Result};
use crate::metrics::{LayerCost, LayerInventory};
use crate::reparam::{FinetuneQuantizer, FqInit};
use crate::rng::{randn, seeded};
use crate::schedule::NoiseSchedule;
use crate::tensor::{BindClass, Binder, ConvGeom, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Silu,
    /// Linear blocks; exists so tests can instantiate exactly solvable nets.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Encoder mid width `c`; the latent and denoiser run at `2c`.
    pub base_channels: usize,
    pub blocks: usize,
    /// Low-resolution input side length; the output side is 4x this.
    pub lr_size: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> NetConfig {
        NetConfig {
            base_channels: 16,
            blocks: 4,
            lr_size: 32,
            activation: Activation::Silu,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.blocks < 2 {
            return Err(QartError::param(format!(
                "need base_channels > 0 and at least 2 blocks, got {} and {}",
                self.base_channels, self.blocks
            )));
        }
        if self.lr_size % 4 != 0 || self.lr_size < 8 {
            return Err(QartError::param(format!(
                "lr_size {} must be a multiple of 4 and at least 8",
                self.lr_size
            )));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub fn latent_size(&self) -> usize {
        self.lr_size / 4
    }

    pub fn hr_size(&self) -> usize {
        self.lr_size * 4
    }

    pub fn emb_dim(&self) -> usize {
        2 * self.base_channels
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> ConvLayer {
        let fan_in = c_in * k * k;
        ConvLayer {
            w: randn(vec![c_out, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(vec![c_out, 1]),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            c_in: self.c_in,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn weight_count(&self) -> u64 {
        self.w.numel() as u64
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let g = self.geom(h, w);
        (self.c_out * g.patch_len() * g.out_pixels()) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    fn new(n_out: usize, n_in: usize, rng: &mut rand_chacha::ChaCha8Rng) -> LinearLayer {
        LinearLayer {
            w: randn(vec![n_out, n_in], (2.0 / n_in as f64).sqrt(), rng),
            b: Tensor::zeros(vec![n_out, 1]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserBlock {
    pub conv: ConvLayer,
    pub emb: LinearLayer,
}

/// One quantizable unit: the layers that are swapped for their quantized
/// counterparts together.
#[derive(Debug, Clone)]
pub struct ModuleQuant {
    pub conv: FinetuneQuantizer,
    /// Present for denoiser blocks (their embedding projection), absent for
    /// decoder layers.
    pub emb: Option<FinetuneQuantizer>,
}

impl ModuleQuant {
    pub fn visit_trainables(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        self.conv.visit_trainables(&mut f);
        if let Some(e) = &mut self.emb {
            e.visit_trainables(&mut f);
        }
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.conv.state_tensors();
        if let Some(e) = &self.emb {
            out.extend(e.state_tensors());
        }
        out
    }
}

/// Position of a module in the inference order, with a stable name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleHandle {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct OsdsrNet {
    pub cfg: NetConfig,
    pub enc1: ConvLayer,
    pub enc2: ConvLayer,
    pub blocks: Vec<DenoiserBlock>,
    /// Learned conditioning vector `[2c, 1]`, added between the middle blocks.
    pub c_y: Tensor,
    pub dec1: ConvLayer,
    pub dec2: ConvLayer,
    /// Timestep this backbone was trained to operate at, once trained.
    pub train_t: Option<usize>,
}

/// Everything a tail run (from some module to the image) exposes.
pub struct TailTrace {
    /// Final image, clamped to [0, 1].
    pub img: Var,
    /// Noise estimate, when the tail covered the denoiser output.
    pub eps: Option<Var>,
    /// Restored latent, when the tail covered the restoration.
    pub z_h: Option<Var>,
    /// Per-module (input, output), indexed by registry position; None for
    /// modules before the tail's start.
    pub module_io: Vec<Option<(Var, Var)>>,
}

pub struct FullTrace {
    pub z_l: Var,
    pub tail: TailTrace,
}

/// Which modules run quantized in a forward pass.
pub type QuantMap<'a> = Vec<Option<&'a ModuleQuant>>;

pub fn no_quant(modules: usize) -> QuantMap<'static> {
    vec![None; modules]
}

impl OsdsrNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<OsdsrNet> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let c = cfg.base_channels;
        let c2 = cfg.latent_channels();
        let enc1 = ConvLayer::new(3, c, 3, 2, 1, &mut rng);
        let enc2 = ConvLayer::new(c, c2, 3, 2, 1, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| DenoiserBlock {
                conv: ConvLayer::new(c2, c2, 3, 1, 1, &mut rng),
                emb: LinearLayer::new(c2, cfg.emb_dim(), &mut rng),
            })
            .collect();
        let c_y = randn(vec![c2, 1], 0.01, &mut rng);
        let dec1 = ConvLayer::new(c2, c, 3, 1, 1, &mut rng);
        let mut dec2 = ConvLayer::new(c, 3, 3, 1, 1, &mut rng);
        // Start the output at mid-gray so the clamp is not saturated at init.
        for v in dec2.b.data_mut() {
            *v = 0.5;
        }
        Ok(OsdsrNet {
            cfg,
            enc1,
            enc2,
            blocks,
            c_y,
            dec1,
            dec2,
            train_t: None,
        })
    }

    /// Denoiser blocks then decoder layers, in inference order.
    pub fn registry(&self) -> Vec<ModuleHandle> {
        let mut out: Vec<ModuleHandle> = (0..self.cfg.blocks)
            .map(|i| ModuleHandle {
                index: i,
                name: format!("block{}", i),
            })
            .collect();
        out.push(ModuleHandle {
            index: self.cfg.blocks,
            name: "dec1".into(),
        });
        out.push(ModuleHandle {
            index: self.cfg.blocks + 1,
            name: "dec2".into(),
        });
        out
    }

    pub fn module_count(&self) -> usize {
        self.cfg.blocks + 2
    }

    /// Index of the block after which the conditioning vector is added.
    fn cond_after(&self) -> usize {
        self.cfg.blocks / 2 - 1
    }

    /// Sinusoidal embedding of an integer timestep, `[emb_dim, 1]`.
    pub fn embed_timestep(&self, t: usize) -> Tensor {
        let d = self.cfg.emb_dim();
        let half = d / 2;
        let mut out = Tensor::zeros(vec![d, 1]);
        for i in 0..half {
            let freq = 10000f64.powf(-(i as f64) / half as f64);
            out.data_mut()[i] = (t as f64 * freq).sin();
            out.data_mut()[half + i] = (t as f64 * freq).cos();
        }
        out
    }

    fn apply_conv_fp(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        name: &str,
        layer: &ConvLayer,
        cols: Var,
    ) -> Result<Var> {
        let w = binder.param(g, &format!("{}.w", name), BindClass::Backbone, &layer.w);
        let b = binder.param(g, &format!("{}.b", name), BindClass::Backbone, &layer.b);
        let y = g.matmul(w, cols)?;
        g.add(y, b)
    }

    /// Convolution as `weight @ im2col(x)`, through the finetuning
    /// quantizer when one is supplied.
    fn apply_conv(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        name: &str,
        layer: &ConvLayer,
        fq: Option<&FinetuneQuantizer>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let cols = g.im2col(x, layer.geom(h, w))?;
        match fq {
            Some(q) => q.forward(g, binder, cols, &layer.w, &layer.b),
            None => self.apply_conv_fp(g, binder, name, layer, cols),
        }
    }

    fn apply_linear(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        name: &str,
        layer: &LinearLayer,
        fq: Option<&FinetuneQuantizer>,
        x: Var,
    ) -> Result<Var> {
        match fq {
            Some(q) => q.forward(g, binder, x, &layer.w, &layer.b),
            None => {
                let w = binder.param(g, &format!("{}.w", name), BindClass::Backbone, &layer.w);
                let b = binder.param(g, &format!("{}.b", name), BindClass::Backbone, &layer.b);
                let y = g.matmul(w, x)?;
                g.add(y, b)
            }
        }
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        match self.cfg.activation {
            Activation::Silu => g.silu(x),
            Activation::Identity => x,
        }
    }

    /// Full-precision encoder: image `[3, lr^2]` to latent `[2c, (lr/4)^2]`.
    pub fn encode(&self, g: &mut Graph, binder: &mut Binder, img: Var) -> Result<Var> {
        let lr = self.cfg.lr_size;
        if g.value(img).shape() != [3, lr * lr] {
            return Err(QartError::dim(format!(
                "encoder input {:?}, expected [3, {}]",
                g.value(img).shape(),
                lr * lr
            )));
        }
        let h1 = self.apply_conv(g, binder, "enc1", &self.enc1, None, img, lr, lr)?;
        let h1 = self.act(g, h1);
        let half = lr / 2;
        self.apply_conv(g, binder, "enc2", &self.enc2, None, h1, half, half)
    }

    /// Run modules `start..` to the final image. For `start` within the
    /// denoiser, `x` is that block's input and `z_l` must carry the latent
    /// for the restoration glue; for decoder starts `z_l` is ignored.
    #[allow(clippy::too_many_arguments)]
    pub fn run_tail(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        sched: &NoiseSchedule,
        t: usize,
        quant: &QuantMap,
        start: usize,
        x: Var,
        z_l: Option<Var>,
    ) -> Result<TailTrace> {
        let nb = self.cfg.blocks;
        let total = self.module_count();
        if start >= total {
            return Err(QartError::param(format!(
                "tail start {} past {} modules",
                start, total
            )));
        }
        if quant.len() != total {
            return Err(QartError::dim(format!(
                "quant map covers {} of {} modules",
                quant.len(),
                total
            )));
        }
        let ls = self.cfg.latent_size();
        let mut module_io: Vec<Option<(Var, Var)>> = vec![None; total];
        let mut eps = None;
        let mut z_h = None;
        let mut cur = x;

        if start < nb {
            let emb = self.embed_timestep(t);
            let embv = g.constant(emb);
            for bi in start..nb {
                let block = &self.blocks[bi];
                let name = format!("block{}", bi);
                let input = cur;
                let fq = quant[bi];
                let conv_out = self.apply_conv(
                    g,
                    binder,
                    &format!("{}.conv", name),
                    &block.conv,
                    fq.map(|m| &m.conv),
                    cur,
                    ls,
                    ls,
                )?;
                let emb_out = self.apply_linear(
                    g,
                    binder,
                    &format!("{}.emb", name),
                    &block.emb,
                    fq.and_then(|m| m.emb.as_ref()),
                    embv,
                )?;
                let summed = g.add(conv_out, emb_out)?;
                let out = self.act(g, summed);
                module_io[bi] = Some((input, out));
                cur = out;
                if bi == self.cond_after() {
                    let cy = binder.param(g, "c_y", BindClass::Backbone, &self.c_y);
                    cur = g.add(cur, cy)?;
                }
            }
            eps = Some(cur);
            let zl = z_l.ok_or_else(|| {
                QartError::param("denoiser tail needs the latent for restoration")
            })?;
            cur = sched.restore(g, zl, cur, t)?;
            z_h = Some(cur);
        }

        if start <= nb {
            let input = cur;
            let up = g.upsample_nearest(cur, self.cfg.latent_channels(), ls, ls, 4)?;
            let conv = self.apply_conv(
                g,
                binder,
                "dec1.conv",
                &self.dec1,
                quant[nb].map(|m| &m.conv),
                up,
                ls * 4,
                ls * 4,
            )?;
            let out = self.act(g, conv);
            module_io[nb] = Some((input, out));
            cur = out;
        }

        {
            let input = cur;
            let mid = self.cfg.lr_size;
            let up = g.upsample_nearest(cur, self.cfg.base_channels, mid, mid, 4)?;
            let out = self.apply_conv(
                g,
                binder,
                "dec2.conv",
                &self.dec2,
                quant[nb + 1].map(|m| &m.conv),
                up,
                mid * 4,
                mid * 4,
            )?;
            module_io[nb + 1] = Some((input, out));
            cur = out;
        }

        let img = g.clip(cur, 0.0, 1.0);
        Ok(TailTrace {
            img,
            eps,
            z_h,
            module_io,
        })
    }

    /// Whole pipeline, image to image.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        sched: &NoiseSchedule,
        t: usize,
        quant: &QuantMap,
        img: Var,
    ) -> Result<FullTrace> {
        let z_l = self.encode(g, binder, img)?;
        let tail = self.run_tail(g, binder, sched, t, quant, 0, z_l, Some(z_l))?;
        Ok(FullTrace { z_l, tail })
    }

    /// Convenience eager forward: returns (Z_L, Z_H, image) values.
    pub fn forward_eager(
        &self,
        img: &Tensor,
        sched: &NoiseSchedule,
        t: usize,
        quant: &QuantMap,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let iv = g.constant(img.clone());
        let trace = self.forward(&mut g, &mut binder, sched, t, quant, iv)?;
        Ok((
            g.value(trace.z_l).clone(),
            g.value(trace.tail.z_h.expect("full forward has a latent"))
                .clone(),
            g.value(trace.tail.img).clone(),
        ))
    }

    /// All backbone parameters in a fixed order.
    pub fn visit_params(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        f("enc1.w".into(), &mut self.enc1.w);
        f("enc1.b".into(), &mut self.enc1.b);
        f("enc2.w".into(), &mut self.enc2.w);
        f("enc2.b".into(), &mut self.enc2.b);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            f(format!("block{}.conv.w", i), &mut blk.conv.w);
            f(format!("block{}.conv.b", i), &mut blk.conv.b);
            f(format!("block{}.emb.w", i), &mut blk.emb.w);
            f(format!("block{}.emb.b", i), &mut blk.emb.b);
        }
        f("c_y".into(), &mut self.c_y);
        f("dec1.conv.w".into(), &mut self.dec1.w);
        f("dec1.conv.b".into(), &mut self.dec1.b);
        f("dec2.conv.w".into(), &mut self.dec2.w);
        f("dec2.conv.b".into(), &mut self.dec2.b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut clone = self.clone();
        clone.visit_params(|_, t| n += t.numel());
        n
    }

    /// The (weight, bias) pair backing a registry module's conv layer, plus
    /// the embedding projection for denoiser blocks.
    pub fn module_layers(&self, index: usize) -> Result<(&ConvLayer, Option<&LinearLayer>)> {
        let nb = self.cfg.blocks;
        match index {
            i if i < nb => Ok((&self.blocks[i].conv, Some(&self.blocks[i].emb))),
            i if i == nb => Ok((&self.dec1, None)),
            i if i == nb + 1 => Ok((&self.dec2, None)),
            i => Err(QartError::Registry(format!(
                "module index {} out of range",
                i
            ))),
        }
    }

    /// Build finetuning quantizers for one module from calibration inputs.
    /// `feature_samples` are the module's input feature maps; conv layers
    /// calibrate on their im2col'd form, the embedding projection on the
    /// timestep embedding it will actually see.
    pub fn build_module_quant(
        &self,
        index: usize,
        feature_samples: &[&Tensor],
        t: usize,
        cfg: &FqInit,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<ModuleQuant> {
        let (conv_layer, emb_layer) = self.module_layers(index)?;
        let nb = self.cfg.blocks;
        let name = self.registry()[index].name.clone();
        let ls = self.cfg.latent_size();
        // Spatial shape of this module's input features.
        let (h, w, pre_up) = if index < nb {
            (ls, ls, false)
        } else if index == nb {
            (ls, ls, true)
        } else {
            (self.cfg.lr_size, self.cfg.lr_size, true)
        };
        let mut col_samples = Vec::with_capacity(feature_samples.len());
        for fs in feature_samples {
            let mut g = Graph::new();
            let mut v = g.constant((*fs).clone());
            let (mut hh, mut ww) = (h, w);
            if pre_up {
                v = g.upsample_nearest(v, conv_layer.c_in, hh, ww, 4)?;
                hh *= 4;
                ww *= 4;
            }
            let cols = g.im2col(v, conv_layer.geom(hh, ww))?;
            col_samples.push(g.value(cols).clone());
        }
        let col_refs: Vec<&Tensor> = col_samples.iter().collect();
        let conv = FinetuneQuantizer::init(
            &format!("{}.conv", name),
            &conv_layer.w,
            &conv_layer.b,
            &col_refs,
            cfg,
            rng,
        )?;
        let emb = match emb_layer {
            Some(layer) => {
                let emb_in = self.embed_timestep(t);
                Some(FinetuneQuantizer::init(
                    &format!("{}.emb", name),
                    &layer.w,
                    &layer.b,
                    &[&emb_in],
                    cfg,
                    rng,
                )?)
            }
            None => None,
        };
        Ok(ModuleQuant { conv, emb })
    }

    /// Per-layer storage and per-image compute inventory. Modules with a
    /// quantizer entry are charged at their quantized widths plus overhead;
    /// everything else (encoder included) is full precision.
    pub fn inventory(&self, quant: &QuantMap) -> Result<Vec<LayerInventory>> {
        let lr = self.cfg.lr_size;
        let ls = self.cfg.latent_size();
        let mut rows = vec![
            LayerInventory {
                name: "enc1".into(),
                cost: LayerCost::Fp {
                    weights: self.enc1.weight_count(),
                    biases: self.enc1.b.numel() as u64,
                    macs: self.enc1.macs(lr, lr),
                },
            },
            LayerInventory {
                name: "enc2".into(),
                cost: LayerCost::Fp {
                    weights: self.enc2.weight_count(),
                    biases: self.enc2.b.numel() as u64,
                    macs: self.enc2.macs(lr / 2, lr / 2),
                },
            },
        ];
        let fq_overhead = |q: &FinetuneQuantizer, out_pixels: usize| -> (u64, u64) {
            let mut params = q.l1.numel()
                + q.l2.numel()
                + q.f1.numel()
                + q.f2.numel()
                + q.et.log_phi.numel()
                + q.et.gamma.numel();
            // Grid parameters are stored only for active quantizers; a
            // passthrough grid ships nothing.
            for grid in [&q.q_w, &q.q_a, &q.q_b] {
                if !grid.is_passthrough() {
                    params += grid.scale.numel() + grid.zero.numel();
                }
            }
            let (m, r) = (q.l1.shape()[0], q.rank);
            let n = q.l2.shape()[1];
            let macs = (r * (m + n) * out_pixels) as u64;
            (params as u64, macs)
        };
        let conv_row =
            |name: &str, layer: &ConvLayer, h: usize, w: usize, fq: Option<&FinetuneQuantizer>| {
                let cost = match fq {
                    None => LayerCost::Fp {
                        weights: layer.weight_count(),
                        biases: layer.b.numel() as u64,
                        macs: layer.macs(h, w),
                    },
                    Some(q) => {
                        let (op, om) = fq_overhead(q, layer.geom(h, w).out_pixels());
                        LayerCost::Quantized {
                            weights: layer.weight_count(),
                            biases: layer.b.numel() as u64,
                            macs: layer.macs(h, w),
                            w_bits: q.q_w.bits,
                            a_bits: q.q_a.bits,
                            bias_bits: if q.q_b.is_passthrough() {
                                32
                            } else {
                                q.q_b.bits
                            },
                            overhead_params: op,
                            overhead_macs: om,
                        }
                    }
                };
                LayerInventory {
                    name: name.into(),
                    cost,
                }
            };
        let nb = self.cfg.blocks;
        for (i, blk) in self.blocks.iter().enumerate() {
            let fq = quant.get(i).copied().flatten();
            rows.push(conv_row(
                &format!("block{}.conv", i),
                &blk.conv,
                ls,
                ls,
                fq.map(|m| &m.conv),
            ));
            let emb_fq = fq.and_then(|m| m.emb.as_ref());
            let emb_macs = blk.emb.w.numel() as u64;
            rows.push(LayerInventory {
                name: format!("block{}.emb", i),
                cost: match emb_fq {
                    None => LayerCost::Fp {
                        weights: blk.emb.w.numel() as u64,
                        biases: blk.emb.b.numel() as u64,
                        macs: emb_macs,
                    },
                    Some(q) => {
                        let (op, om) = fq_overhead(q, 1);
                        LayerCost::Quantized {
                            weights: blk.emb.w.numel() as u64,
                            biases: blk.emb.b.numel() as u64,
                            macs: emb_macs,
                            w_bits: q.q_w.bits,
                            a_bits: q.q_a.bits,
                            bias_bits: if q.q_b.is_passthrough() {
                                32
                            } else {
                                q.q_b.bits
                            },
                            overhead_params: op,
                            overhead_macs: om,
                        }
                    }
                },
            });
        }
        rows.push(conv_row(
            "dec1.conv",
            &self.dec1,
            ls * 4,
            ls * 4,
            quant.get(nb).copied().flatten().map(|m| &m.conv),
        ));
        rows.push(conv_row(
            "dec2.conv",
            &self.dec2,
            lr * 4,
            lr * 4,
            quant.get(nb + 1).copied().flatten().map(|m| &m.conv),
        ));
        rows.push(LayerInventory {
            name: "c_y".into(),
            cost: LayerCost::Fp {
                weights: self.c_y.numel() as u64,
                biases: 0,
                macs: 0,
            },
        });
        Ok(rows)
    }

    /// Named tensors capturing the full backbone, plus shape metadata.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut clone = self.clone();
        let mut out = vec![
            (
                "meta.base_channels".to_string(),
                Tensor::scalar(self.cfg.base_channels as f64),
            ),
            (
                "meta.blocks".to_string(),
                Tensor::scalar(self.cfg.blocks as f64),
            ),
            (
                "meta.lr_size".to_string(),
                Tensor::scalar(self.cfg.lr_size as f64),
            ),
            (
                "meta.activation".to_string(),
                Tensor::scalar(match self.cfg.activation {
                    Activation::Silu => 0.0,
                    Activation::Identity => 1.0,
                }),
            ),
            (
                "meta.train_t".to_string(),
                Tensor::scalar(self.train_t.map(|t| t as f64).unwrap_or(-1.0)),
            ),
        ];
        clone.visit_params(|name, t| out.push((format!("param.{}", name), t.clone())));
        out
    }

    /// Rebuild a backbone from [`OsdsrNet::state_tensors`] output.
    pub fn from_state(tensors: &[(String, Tensor)]) -> Result<OsdsrNet> {
        let find = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| QartError::format(0, format!("checkpoint missing {}", name)))
        };
        let meta = |name: &str| -> Result<f64> { find(name)?.item() };
        let cfg = NetConfig {
            base_channels: meta("meta.base_channels")? as usize,
            blocks: meta("meta.blocks")? as usize,
            lr_size: meta("meta.lr_size")? as usize,
            activation: if meta("meta.activation")? == 1.0 {
                Activation::Identity
            } else {
                Activation::Silu
            },
        };
        let mut net = OsdsrNet::new(cfg, 0)?;
        let tt = meta("meta.train_t")?;
        net.train_t = if tt < 0.0 { None } else { Some(tt as usize) };
        let mut missing = Vec::new();
        net.visit_params(|name, t| match find(&format!("param.{}", name)) {
            Ok(saved) if saved.shape() == t.shape() => {
                t.data_mut().copy_from_slice(saved.data());
            }
            _ => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(QartError::format(
                0,
                format!("checkpoint missing or mis-shaped params: {:?}", missing),
            ));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform;

    fn small_cfg() -> NetConfig {
        NetConfig {
            base_channels: 4,
            blocks: 2,
            lr_size: 8,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn default_parameter_count_matches_hand_enumeration() {
        // enc1 3*9*16+16, enc2 16*9*32+32, 4 blocks of (32*9*32+32 conv and
        // 32*32+32 emb), c_y 32, dec1 32*9*16+16, dec2 16*9*3+3.
        let net = OsdsrNet::new(NetConfig::default(), 0).unwrap();
        let want = 448 + 4640 + 4 * (9248 + 1056) + 32 + 4624 + 435;
        assert_eq!(net.param_count(), want);
        assert_eq!(want, 51_395);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small_cfg();
        let net = OsdsrNet::new(cfg, 7).unwrap();
        let sched = NoiseSchedule::default_linear();
        let img = uniform(vec![3, 64], 0.0, 1.0, &mut crate::rng::seeded(1));
        let quant = no_quant(net.module_count());
        let (zl, zh, out) = net.forward_eager(&img, &sched, 500, &quant).unwrap();
        assert_eq!(zl.shape(), &[8, 4]);
        assert_eq!(zh.shape(), &[8, 4]);
        assert_eq!(out.shape(), &[3, 32 * 32]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let net2 = OsdsrNet::new(cfg, 7).unwrap();
        let (_, _, out2) = net2.forward_eager(&img, &sched, 500, &quant).unwrap();
        assert_eq!(out.data(), out2.data());
        let net3 = OsdsrNet::new(cfg, 8).unwrap();
        let (_, _, out3) = net3.forward_eager(&img, &sched, 500, &quant).unwrap();
        assert_ne!(out.data(), out3.data());
    }

    #[test]
    fn timestep_conditioning_is_live() {
        let net = OsdsrNet::new(small_cfg(), 3).unwrap();
        let sched = NoiseSchedule::default_linear();
        let img = uniform(vec![3, 64], 0.0, 1.0, &mut crate::rng::seeded(2));
        let quant = no_quant(net.module_count());
        let (_, _, a) = net.forward_eager(&img, &sched, 1, &quant).unwrap();
        let (_, _, b) = net.forward_eager(&img, &sched, 777, &quant).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn registry_is_blocks_then_decoder() {
        let net = OsdsrNet::new(NetConfig::default(), 0).unwrap();
        let names: Vec<String> = net.registry().into_iter().map(|h| h.name).collect();
        assert_eq!(
            names,
            vec!["block0", "block1", "block2", "block3", "dec1", "dec2"]
        );
        for (i, h) in net.registry().iter().enumerate() {
            assert_eq!(h.index, i);
        }
    }

    /// Hand-built linear net whose output is exactly the 4x-upscaled input
    /// divided by sqrt(abar_1): encoder layers are 2x2 box averages,
    /// denoiser is zeroed (eps = 0), decoder layers are identity taps.
    #[test]
    fn linear_identity_configuration_is_exactly_solvable() {
        let cfg = NetConfig {
            base_channels: 4,
            blocks: 2,
            lr_size: 8,
            activation: Activation::Identity,
        };
        let mut net = OsdsrNet::new(cfg, 0).unwrap();

        let box_avg = |layer: &mut ConvLayer| {
            let k = layer.k;
            for v in layer.w.data_mut() {
                *v = 0.0;
            }
            for v in layer.b.data_mut() {
                *v = 0.0;
            }
            // Stride-2 k3 p1: taps (1,1),(1,2),(2,1),(2,2) average the 2x2
            // block under each output pixel.
            let copies = layer.c_in.min(layer.c_out).min(3);
            for c in 0..copies {
                for (ky, kx) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
                    layer.w.data_mut()[c * layer.c_in * k * k + (c * k + ky) * k + kx] = 0.25;
                }
            }
        };
        let identity = |layer: &mut ConvLayer| {
            let k = layer.k;
            for v in layer.w.data_mut() {
                *v = 0.0;
            }
            for v in layer.b.data_mut() {
                *v = 0.0;
            }
            let copies = layer.c_in.min(layer.c_out).min(3);
            for c in 0..copies {
                layer.w.data_mut()[c * layer.c_in * k * k + (c * k + 1) * k + 1] = 1.0;
            }
        };
        box_avg(&mut net.enc1);
        box_avg(&mut net.enc2);
        for blk in &mut net.blocks {
            for v in blk.conv.w.data_mut() {
                *v = 0.0;
            }
            for v in blk.conv.b.data_mut() {
                *v = 0.0;
            }
            for v in blk.emb.w.data_mut() {
                *v = 0.0;
            }
            for v in blk.emb.b.data_mut() {
                *v = 0.0;
            }
        }
        for v in net.c_y.data_mut() {
            *v = 0.0;
        }
        identity(&mut net.dec1);
        identity(&mut net.dec2);

        // Input constant on 4x4 blocks, so the box averages lose nothing.
        let mut img = Tensor::zeros(vec![3, 64]);
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let block_val = ((y / 4) * 2 + (x / 4)) as f64 * 0.2 + ch as f64 * 0.1;
                    img.data_mut()[ch * 64 + y * 8 + x] = block_val;
                }
            }
        }
        let sched = NoiseSchedule::default_linear();
        let quant = no_quant(net.module_count());
        let (_, _, out) = net.forward_eager(&img, &sched, 1, &quant).unwrap();
        let gain = 1.0 / sched.alpha_bar(1).unwrap().sqrt();
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let want = img.data()[ch * 64 + (y / 4) * 8 + x / 4] * gain;
                    let got = out.data()[ch * 1024 + y * 32 + x];
                    assert!(
                        (got - want).abs() < 1e-12,
                        "pixel ({}, {}, {}): {} vs {}",
                        ch,
                        y,
                        x,
                        got,
                        want
                    );
                }
            }
        }
    }

    #[test]
    fn backbone_gradients_reach_every_parameter() {
        let net = OsdsrNet::new(small_cfg(), 5).unwrap();
        let sched = NoiseSchedule::default_linear();
        let img = uniform(vec![3, 64], 0.0, 1.0, &mut crate::rng::seeded(4));
        let target = uniform(vec![3, 1024], 0.0, 1.0, &mut crate::rng::seeded(5));
        let mut g = Graph::new();
        let mut binder = Binder::training(BindClass::Backbone);
        let iv = g.constant(img);
        let quant = no_quant(net.module_count());
        let trace = net
            .forward(&mut g, &mut binder, &sched, 900, &quant, iv)
            .unwrap();
        let tv = g.constant(target);
        let loss = g.mse(trace.tail.img, tv).unwrap();
        g.backward(loss).unwrap();
        let expected = {
            let mut names = Vec::new();
            let mut clone = net.clone();
            clone.visit_params(|n, _| names.push(n));
            names
        };
        let bound: Vec<&str> = binder.bound().iter().map(|(n, _)| n.as_str()).collect();
        for name in &expected {
            assert!(bound.contains(&name.as_str()), "{} not bound", name);
        }
        for (name, grad) in binder.collect_grads(&g) {
            let grad = grad.unwrap_or_default();
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "no gradient signal reached {}",
                name
            );
        }
    }

    #[test]
    fn state_round_trip_preserves_the_forward_pass() {
        let net = OsdsrNet::new(small_cfg(), 11).unwrap();
        let state = net.state_tensors();
        let rebuilt = OsdsrNet::from_state(&state).unwrap();
        let sched = NoiseSchedule::default_linear();
        let img = uniform(vec![3, 64], 0.0, 1.0, &mut crate::rng::seeded(6));
        let quant = no_quant(net.module_count());
        let (_, _, a) = net.forward_eager(&img, &sched, 42, &quant).unwrap();
        let (_, _, b) = rebuilt.forward_eager(&img, &sched, 42, &quant).unwrap();
        assert_eq!(a.data(), b.data());

        let mut broken = state.clone();
        broken.retain(|(n, _)| n != "param.c_y");
        assert!(OsdsrNet::from_state(&broken).is_err());
    }

    #[test]
    fn inventory_macs_match_hand_numbers() {
        let net = OsdsrNet::new(NetConfig::default(), 0).unwrap();
        let rows = net.inventory(&no_quant(net.module_count())).unwrap();
        let find = |name: &str| -> u64 {
            rows.iter()
                .find(|r| r.name == name)
                .map(|r| match r.cost {
                    LayerCost::Fp { macs, .. } => macs,
                    LayerCost::Quantized { macs, .. } => macs,
                })
                .unwrap()
        };
        // c_out * c_in * k^2 * out_pixels for each conv.
        assert_eq!(find("enc1"), 16 * 27 * 256);
        assert_eq!(find("enc2"), 32 * 144 * 64);
        assert_eq!(find("block0.conv"), 32 * 288 * 64);
        assert_eq!(find("block0.emb"), 32 * 32);
        assert_eq!(find("dec1.conv"), 16 * 288 * 1024);
        assert_eq!(find("dec2.conv"), 3 * 144 * 16384);
        let total: u64 = rows
            .iter()
            .map(|r| match r.cost {
                LayerCost::Fp { macs, .. } => macs,
                LayerCost::Quantized { macs, .. } => macs,
            })
            .sum();
        assert_eq!(total, 14_565_376);
    }
}
