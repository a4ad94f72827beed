//! Training, calibration and evaluation pipelines.
//!
//! The flow mirrors how the quantized model is produced end to end:
//!
//! 1. train a full-precision backbone at some timestep;
//! 2. sweep candidate timesteps, measuring how quantization error blows up
//!    in the restored latent, and retrain at the best one;
//! 3. calibrate quantizers per module in reversed inference order, each
//!    stage optimizing the module output match plus a weighted image loss,
//!    then finish with end-to-end image-only tuning (optionally extended);
//! 4. evaluate against the full-precision model and account storage/compute.
//!
//! Original backbone weights are frozen throughout calibration; a SHA-256
//! digest taken before and after every calibration proves it.

use std::collections::HashMap;

use crate::error::{QartError, Result};
use crate::io::checkpoint::digest_tensors;
use crate::io::config::{BackboneTrainConfig, CalibConfig, RunConfig};
use crate::io::data::{generate_dataset, Dataset};
use crate::metrics::{account_cost, image_loss, psnr, ssim, CostReport, MetricReport};
use crate::model::{ModuleQuant, OsdsrNet, QuantMap};
use crate::quant::QuantizerMode;
use crate::reparam::FqInit;
use crate::rng::seeded;
use crate::schedule::{NoiseSchedule, TimestepErrorProfile};
use crate::tensor::optim::Optimizer;
use crate::tensor::{BindClass, Binder, Graph, Tensor, Var};

/// Pixel-loss weights: the image objective is `A1 * perceptual + A2 * mse`.
pub const IMAGE_LOSS_A1: f64 = 1.0;
pub const IMAGE_LOSS_A2: f64 = 1.0;

/// Early-stopping patience for the per-module calibration stages. The
/// straight-through gradients are biased surrogates, so a stage that starts
/// near its optimum can drift upward instead of descending; a stage
/// therefore halts after this many consecutive steps without improving its
/// probe objective, and every stage hands back the best parameters it saw.
pub const STAGE_PATIENCE: usize = 5;

// ── full-precision reference caches ─────────────────────────────────────

/// Everything the calibration stages need from one full-precision forward
/// pass of one item, computed once per (backbone, timestep).
pub struct FpCache {
    pub z_l: Tensor,
    pub module_inputs: Vec<Tensor>,
    pub module_outputs: Vec<Tensor>,
    pub z_h: Tensor,
    pub image: Tensor,
}

pub fn fp_caches(
    net: &OsdsrNet,
    sched: &NoiseSchedule,
    ds: &Dataset,
    t: usize,
) -> Result<Vec<FpCache>> {
    let quant = crate::model::no_quant(net.module_count());
    let mut out = Vec::with_capacity(ds.items.len());
    for item in &ds.items {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let iv = g.constant(item.lr.clone());
        let trace = net.forward(&mut g, &mut binder, sched, t, &quant, iv)?;
        let mut module_inputs = Vec::with_capacity(net.module_count());
        let mut module_outputs = Vec::with_capacity(net.module_count());
        for io in &trace.tail.module_io {
            let (i, o) =
                io.ok_or_else(|| QartError::Training("full forward missed a module".into()))?;
            module_inputs.push(g.value(i).clone());
            module_outputs.push(g.value(o).clone());
        }
        out.push(FpCache {
            z_l: g.value(trace.z_l).clone(),
            module_inputs,
            module_outputs,
            z_h: g
                .value(trace.tail.z_h.expect("full forward restores"))
                .clone(),
            image: g.value(trace.tail.img).clone(),
        });
    }
    Ok(out)
}

// ── backbone training ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub t: usize,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub psnr_vs_truth: f64,
}

impl TrainRecord {
    pub fn start_loss(&self) -> f64 {
        *self.losses.first().unwrap_or(&f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }
}

/// Supervised training of the full-precision backbone at a fixed timestep:
/// plain pixel MSE against the ground-truth high-resolution images, Adam,
/// deterministic batch cycling. Sets `net.train_t` when done.
pub fn train_backbone(
    net: &mut OsdsrNet,
    sched: &NoiseSchedule,
    ds: &Dataset,
    t: usize,
    cfg: &BackboneTrainConfig,
) -> Result<TrainRecord> {
    if cfg.steps == 0 {
        return Err(QartError::Training(
            "backbone training needs at least one step".into(),
        ));
    }
    let n = ds.items.len();
    let quant = crate::model::no_quant(net.module_count());
    let mut opt = Optimizer::adam(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        let mut batch_loss = 0.0;
        for j in 0..cfg.batch {
            let item = &ds.items[(step * cfg.batch + j) % n];
            let mut g = Graph::new();
            let mut binder = Binder::training(BindClass::Backbone);
            let iv = g.constant(item.lr.clone());
            let trace = net.forward(&mut g, &mut binder, sched, t, &quant, iv)?;
            let hv = g.constant(item.hr.clone());
            let loss = g.mse(trace.tail.img, hv)?;
            g.backward(loss)?;
            batch_loss += g.value(loss).item()?;
            for (name, grad) in binder.collect_grads(&g) {
                if let Some(grad) = grad {
                    grads
                        .entry(name)
                        .and_modify(|acc| acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b))
                        .or_insert(grad);
                }
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        net.visit_params(|name, param| {
            if let Some(mut grad) = grads.remove(&name) {
                grad.iter_mut().for_each(|v| *v *= inv);
                param.grad = Some(grad);
                let _ = opt.step(&name, param);
            }
        });
        losses.push(batch_loss * inv);
    }
    net.train_t = Some(t);

    // Reconstruction quality against the ground truth, for the record.
    let mut mean_psnr = 0.0;
    for item in &ds.items {
        let (_, _, img) = net.forward_eager(&item.lr, sched, t, &quant)?;
        mean_psnr += psnr(&img, &item.hr, 1.0)?;
    }
    mean_psnr /= n as f64;
    Ok(TrainRecord {
        t,
        steps: cfg.steps,
        losses,
        psnr_vs_truth: mean_psnr,
    })
}

// ── the quantized model artifact ────────────────────────────────────────

pub struct QuantizedModel {
    pub net: OsdsrNet,
    pub modules: Vec<ModuleQuant>,
    pub t: usize,
    pub w_bits: u32,
    pub a_bits: u32,
    /// Digest of the backbone the quantizers were calibrated against.
    pub backbone_digest: String,
}

impl QuantizedModel {
    pub fn quant_map(&self) -> QuantMap<'_> {
        self.modules.iter().map(Some).collect()
    }

    pub fn forward_eager(
        &self,
        lr: &Tensor,
        sched: &NoiseSchedule,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let map = self.quant_map();
        self.net.forward_eager(lr, sched, self.t, &map)
    }

    pub fn cost_report(&self) -> Result<CostReport> {
        let map = self.quant_map();
        account_cost(self.net.inventory(&map)?)
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("meta.kind".to_string(), Tensor::scalar(1.0)),
            ("meta.t".to_string(), Tensor::scalar(self.t as f64)),
            (
                "meta.w_bits".to_string(),
                Tensor::scalar(self.w_bits as f64),
            ),
            (
                "meta.a_bits".to_string(),
                Tensor::scalar(self.a_bits as f64),
            ),
        ];
        for (name, t) in self.net.state_tensors() {
            out.push((format!("backbone.{}", name), t));
        }
        for (mq, handle) in self.modules.iter().zip(self.net.registry()) {
            let _ = handle;
            out.extend(mq.state_tensors());
        }
        out
    }

    pub fn digest(&self) -> String {
        digest_tensors(&self.state_tensors())
    }

    pub fn from_state(tensors: &[(String, Tensor)]) -> Result<QuantizedModel> {
        let meta = |name: &str| -> Result<f64> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.item())
                .ok_or_else(|| QartError::format(0, format!("checkpoint missing {}", name)))?
        };
        if meta("meta.kind")? != 1.0 {
            return Err(QartError::format(0, "not a quantized-model checkpoint"));
        }
        let backbone: Vec<(String, Tensor)> = tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix("backbone.")
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect();
        let net = OsdsrNet::from_state(&backbone)?;
        let mut modules = Vec::with_capacity(net.module_count());
        for handle in net.registry() {
            let conv = crate::reparam::FinetuneQuantizer::from_state(
                &format!("{}.conv", handle.name),
                tensors,
            )?;
            let emb_key = format!("{}.emb.meta", handle.name);
            let emb = if tensors.iter().any(|(n, _)| *n == emb_key) {
                Some(crate::reparam::FinetuneQuantizer::from_state(
                    &format!("{}.emb", handle.name),
                    tensors,
                )?)
            } else {
                None
            };
            modules.push(ModuleQuant { conv, emb });
        }
        let backbone_digest = digest_tensors(&net.state_tensors());
        Ok(QuantizedModel {
            net,
            modules,
            t: meta("meta.t")? as usize,
            w_bits: meta("meta.w_bits")? as u32,
            a_bits: meta("meta.a_bits")? as u32,
            backbone_digest,
        })
    }
}

// ── plain range-calibrated quantization (the comparison baseline) ───────

/// Quantize every module with static max-min ranges and no training: rank
/// zero, no correction, identity transform. Activation ranges come from the
/// full-precision features at timestep `t`.
pub fn maxmin_baseline(
    net: &OsdsrNet,
    sched: &NoiseSchedule,
    ds: &Dataset,
    t: usize,
    w_bits: u32,
    a_bits: u32,
) -> Result<QuantizedModel> {
    let caches = fp_caches(net, sched, ds, t)?;
    let mut cfg = FqInit::new(w_bits, a_bits, QuantizerMode::MaxMinStatic);
    cfg.rank = Some(0);
    cfg.rank_f = Some(0);
    let mut rng = seeded(0);
    let mut modules = Vec::with_capacity(net.module_count());
    for k in 0..net.module_count() {
        let samples: Vec<&Tensor> = caches.iter().map(|c| &c.module_inputs[k]).collect();
        modules.push(net.build_module_quant(k, &samples, t, &cfg, &mut rng)?);
    }
    Ok(QuantizedModel {
        net: net.clone(),
        modules,
        t,
        w_bits,
        a_bits,
        backbone_digest: digest_tensors(&net.state_tensors()),
    })
}

// ── timestep sweep ──────────────────────────────────────────────────────

/// For each candidate timestep, quantize the backbone with the plain
/// baseline and measure the mean restored-latent error against the
/// full-precision model. The restoration divides by `sqrt(abar_t)`, so the
/// same per-module noise costs orders of magnitude more at late timesteps.
pub fn sweep_timesteps(
    net: &OsdsrNet,
    sched: &NoiseSchedule,
    ds: &Dataset,
    timesteps: &[usize],
    w_bits: u32,
    a_bits: u32,
) -> Result<TimestepErrorProfile> {
    if timesteps.is_empty() {
        return Err(QartError::Calibration("no timesteps to sweep".into()));
    }
    let mut rows = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let qm = maxmin_baseline(net, sched, ds, t, w_bits, a_bits)?;
        let caches = fp_caches(net, sched, ds, t)?;
        let mut err = 0.0;
        for (item, cache) in ds.items.iter().zip(&caches) {
            let (_, z_h_q, _) = qm.forward_eager(&item.lr, sched)?;
            err += z_h_q.mse(&cache.z_h)?;
        }
        rows.push((t, sched.lambda(t)?, err / ds.items.len() as f64));
    }
    Ok(TimestepErrorProfile { rows })
}

// ── calibration ─────────────────────────────────────────────────────────

/// Which training phases run during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodFlags {
    /// Reversed per-module stages before the end-to-end phase.
    pub per_module_stages: bool,
    /// Extra end-to-end steps after the standard budget.
    pub extended: bool,
}

#[derive(Debug, Clone)]
pub struct StageRecord {
    pub name: String,
    /// Optimizer steps actually executed (early stopping may cut a stage
    /// short of its budget).
    pub steps: usize,
    pub start_loss: f64,
    pub end_loss: f64,
    /// Probe objective before training, after every executed step, and
    /// after the closing best-parameter restore (`steps + 2` entries).
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CalibRecord {
    pub stages: Vec<StageRecord>,
    pub backbone_digest: String,
}

impl CalibRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,steps,start_loss,end_loss\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.name, s.steps, s.start_loss, s.end_loss
            ));
        }
        out
    }
}

/// Calibration order: exact reversal of the inference order.
pub fn reversed_order(module_count: usize) -> Vec<usize> {
    (0..module_count).rev().collect()
}

/// The per-stage objective. `module` carries the stage's module index and
/// its cached full-precision outputs; when absent the loss is image-only.
struct StageObjective<'a> {
    start: usize,
    module: Option<usize>,
    caches: &'a [FpCache],
    module_loss_weight: f64,
    hr_size: usize,
}

fn stage_loss_one(
    net: &OsdsrNet,
    sched: &NoiseSchedule,
    t: usize,
    quant: &QuantMap,
    obj: &StageObjective,
    item: usize,
    binder: &mut Binder,
    g: &mut Graph,
) -> Result<Var> {
    let cache = &obj.caches[item];
    let x = g.constant(cache.module_inputs[obj.start].clone());
    let z_l = if obj.start < net.cfg.blocks {
        Some(g.constant(cache.z_l.clone()))
    } else {
        None
    };
    let tail = net.run_tail(g, binder, sched, t, quant, obj.start, x, z_l)?;
    let fp_img = g.constant(cache.image.clone());
    let l_img = image_loss(
        g,
        tail.img,
        fp_img,
        3,
        obj.hr_size,
        obj.hr_size,
        IMAGE_LOSS_A1,
        IMAGE_LOSS_A2,
    )?;
    match obj.module {
        Some(k) => {
            let (_, out) = tail.module_io[k].ok_or_else(|| {
                QartError::Training(format!("stage tail did not visit module {}", k))
            })?;
            let fp_out = g.constant(cache.module_outputs[k].clone());
            let l_m = g.mse(out, fp_out)?;
            let weighted = g.mul_scalar(l_img, 1.0 / obj.module_loss_weight)?;
            g.add(l_m, weighted)
        }
        None => Ok(l_img),
    }
}

/// Mean stage loss over a fixed probe set, without touching any state.
fn probe_loss(
    net: &OsdsrNet,
    sched: &NoiseSchedule,
    t: usize,
    modules: &[Option<ModuleQuant>],
    obj: &StageObjective,
    probe: &[usize],
) -> Result<f64> {
    let quant: QuantMap = modules.iter().map(|o| o.as_ref()).collect();
    let mut total = 0.0;
    for &item in probe {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let loss = stage_loss_one(net, sched, t, &quant, obj, item, &mut binder, &mut g)?;
        total += g.value(loss).item()?;
    }
    Ok(total / probe.len() as f64)
}

/// One training stage; returns the probe objective before training, after
/// every executed step, and once more after the best parameters seen are
/// restored (the last entry, which is also what the stage hands back).
///
/// `train_only` restricts optimizer updates to a single module (the one
/// being introduced); with `None` every active module's quantizer
/// parameters train jointly. `patience` enables early stopping: the stage
/// halts after that many consecutive steps without a new best probe loss.
fn run_stage(
    net: &OsdsrNet,
    sched: &NoiseSchedule,
    t: usize,
    modules: &mut [Option<ModuleQuant>],
    obj: &StageObjective,
    train_only: Option<usize>,
    steps: usize,
    batch: usize,
    n_items: usize,
    opt: &mut Optimizer,
    probe: &[usize],
    patience: Option<usize>,
) -> Result<Vec<f64>> {
    let snapshot = |modules: &mut [Option<ModuleQuant>]| -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (idx, slot) in modules.iter_mut().enumerate() {
            if train_only.is_some_and(|k| k != idx) {
                continue;
            }
            if let Some(mq) = slot {
                mq.visit_trainables(|name, param| out.push((name, param.data().to_vec())));
            }
        }
        out
    };

    let mut trace = Vec::with_capacity(steps + 2);
    trace.push(probe_loss(net, sched, t, modules, obj, probe)?);
    let mut best = trace[0];
    let mut best_params = snapshot(modules);
    let mut flat = 0usize;
    for step in 0..steps {
        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        {
            let quant: QuantMap = modules.iter().map(|o| o.as_ref()).collect();
            for j in 0..batch {
                let item = (step * batch + j) % n_items;
                let mut g = Graph::new();
                let mut binder = Binder::training(BindClass::Quant);
                let loss = stage_loss_one(net, sched, t, &quant, obj, item, &mut binder, &mut g)?;
                g.backward(loss)?;
                for (name, grad) in binder.collect_grads(&g) {
                    if let Some(grad) = grad {
                        grads
                            .entry(name)
                            .and_modify(|acc| acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b))
                            .or_insert(grad);
                    }
                }
            }
        }
        let inv = 1.0 / batch as f64;
        for (idx, slot) in modules.iter_mut().enumerate() {
            if train_only.is_some_and(|k| k != idx) {
                continue;
            }
            if let Some(mq) = slot {
                mq.visit_trainables(|name, param| {
                    if let Some(mut grad) = grads.remove(&name) {
                        grad.iter_mut().for_each(|v| *v *= inv);
                        param.grad = Some(grad);
                        let _ = opt.step(&name, param);
                    }
                });
            }
        }
        let loss = probe_loss(net, sched, t, modules, obj, probe)?;
        trace.push(loss);
        if loss < best {
            best = loss;
            best_params = snapshot(modules);
            flat = 0;
        } else {
            flat += 1;
            if patience.is_some_and(|p| flat >= p) {
                break;
            }
        }
    }

    // Hand back the best parameters seen, and prove the restore by probing
    // once more; the objective at stage end can therefore never exceed the
    // objective at stage start.
    let saved: HashMap<String, Vec<f64>> = best_params.into_iter().collect();
    for (idx, slot) in modules.iter_mut().enumerate() {
        if train_only.is_some_and(|k| k != idx) {
            continue;
        }
        if let Some(mq) = slot {
            mq.visit_trainables(|name, param| {
                if let Some(values) = saved.get(&name) {
                    param.data_mut().copy_from_slice(values);
                }
            });
        }
    }
    trace.push(probe_loss(net, sched, t, modules, obj, probe)?);
    Ok(trace)
}

/// Build and train the full quantized model against its frozen backbone.
///
/// With `per_module_stages` the quantizers activate one module at a time in
/// reversed inference order; each stage optimizes the introduced module's
/// quantizer parameters on `module_mse + image_loss / module_loss_weight`
/// with patience-[`STAGE_PATIENCE`] early stopping, and the run finishes
/// with an image-only end-to-end stage over all of them jointly. Without
/// it, every module activates at once and only the end-to-end phase runs.
/// `extended` appends `et_steps` more end-to-end steps. Every stage keeps
/// the best parameters it visited, so no stage ends worse than it started.
pub fn calibrate(
    net: &OsdsrNet,
    sched: &NoiseSchedule,
    ds: &Dataset,
    t: usize,
    cfg: &CalibConfig,
    seed: u64,
    flags: MethodFlags,
) -> Result<(QuantizedModel, CalibRecord)> {
    let digest_before = digest_tensors(&net.state_tensors());
    let caches = fp_caches(net, sched, ds, t)?;
    let n_items = ds.items.len();
    let n_modules = net.module_count();
    let hr_size = net.cfg.hr_size();
    if ds.hr_size != hr_size {
        return Err(QartError::dim(format!(
            "dataset images are {}, the network outputs {}",
            ds.hr_size, hr_size
        )));
    }

    let mut fq_cfg = FqInit::new(cfg.w_bits, cfg.a_bits, QuantizerMode::LearnedStep);
    fq_cfg.rank = cfg.rank;
    fq_cfg.rank_f = cfg.rank_f;

    let mut rng = seeded(seed);
    let mut modules: Vec<Option<ModuleQuant>> = (0..n_modules).map(|_| None).collect();
    let mut opt = Optimizer::adam(cfg.lr);
    let mut stages = Vec::new();
    // The probe measures the stage objective on the whole calibration set —
    // the same quantity the batched steps descend.
    let probe: Vec<usize> = (0..n_items).collect();

    let init_module =
        |k: usize, modules: &mut Vec<Option<ModuleQuant>>, rng: &mut _| -> Result<()> {
            let samples: Vec<&Tensor> = caches.iter().map(|c| &c.module_inputs[k]).collect();
            modules[k] = Some(net.build_module_quant(k, &samples, t, &fq_cfg, rng)?);
            Ok(())
        };

    if flags.per_module_stages {
        for k in reversed_order(n_modules) {
            init_module(k, &mut modules, &mut rng)?;
            let obj = StageObjective {
                start: k,
                module: Some(k),
                caches: &caches,
                module_loss_weight: cfg.module_loss_weight,
                hr_size,
            };
            let trace = run_stage(
                net,
                sched,
                t,
                &mut modules,
                &obj,
                Some(k),
                cfg.stage_steps,
                cfg.batch,
                n_items,
                &mut opt,
                &probe,
                Some(STAGE_PATIENCE),
            )?;
            stages.push(StageRecord {
                name: net.registry()[k].name.clone(),
                steps: trace.len() - 2,
                start_loss: trace[0],
                end_loss: *trace.last().unwrap(),
                trace,
            });
        }
    } else {
        for k in 0..n_modules {
            init_module(k, &mut modules, &mut rng)?;
        }
    }

    // End-to-end phase: image loss only, from the latent down.
    let e2e = StageObjective {
        start: 0,
        module: None,
        caches: &caches,
        module_loss_weight: cfg.module_loss_weight,
        hr_size,
    };
    let mut e2e_steps = if flags.per_module_stages {
        cfg.stage_steps
    } else {
        0
    };
    if flags.extended {
        e2e_steps += cfg.et_steps;
    }
    if e2e_steps > 0 {
        // The end-to-end phase runs its whole budget (no early stop) but
        // still hands back the best parameters it visited.
        let trace = run_stage(
            net,
            sched,
            t,
            &mut modules,
            &e2e,
            None,
            e2e_steps,
            cfg.batch,
            n_items,
            &mut opt,
            &probe,
            None,
        )?;
        let name = if flags.extended {
            "e2e_extended"
        } else {
            "e2e"
        };
        stages.push(StageRecord {
            name: name.into(),
            steps: trace.len() - 2,
            start_loss: trace[0],
            end_loss: *trace.last().unwrap(),
            trace,
        });
    }

    let digest_after = digest_tensors(&net.state_tensors());
    if digest_before != digest_after {
        return Err(QartError::Training(
            "frozen backbone weights changed during calibration".into(),
        ));
    }
    let modules: Vec<ModuleQuant> = modules
        .into_iter()
        .map(|m| m.ok_or_else(|| QartError::Training("a module was never initialized".into())))
        .collect::<Result<_>>()?;
    Ok((
        QuantizedModel {
            net: net.clone(),
            modules,
            t,
            w_bits: cfg.w_bits,
            a_bits: cfg.a_bits,
            backbone_digest: digest_before.clone(),
        },
        CalibRecord {
            stages,
            backbone_digest: digest_before,
        },
    ))
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Compare a quantized model against its own full-precision backbone on the
/// dataset: mean per-image PSNR (each capped at 99 dB), mean SSIM, and mean
/// restored-latent MSE.
pub fn evaluate(
    qm: &QuantizedModel,
    sched: &NoiseSchedule,
    ds: &Dataset,
    tag: &str,
) -> Result<MetricReport> {
    let caches = fp_caches(&qm.net, sched, ds, qm.t)?;
    let hr = ds.hr_size;
    let mut p = 0.0;
    let mut s = 0.0;
    let mut l = 0.0;
    for (item, cache) in ds.items.iter().zip(&caches) {
        let (_, z_h_q, img_q) = qm.forward_eager(&item.lr, sched)?;
        p += psnr(&img_q, &cache.image, 1.0)?;
        s += ssim(&img_q, &cache.image, 3, hr, hr, 1.0)?;
        l += z_h_q.mse(&cache.z_h)?;
    }
    let n = ds.items.len() as f64;
    Ok(MetricReport {
        tag: tag.to_string(),
        w_bits: qm.w_bits,
        a_bits: qm.a_bits,
        psnr_db: p / n,
        ssim: s / n,
        latent_error: l / n,
    })
}

// ── ablation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: String,
    pub t: usize,
    pub report: MetricReport,
    pub size_reduction: f64,
    pub ops_reduction: f64,
}

pub struct AblationOutcome {
    pub hi_t: usize,
    pub best_t: usize,
    pub profile: TimestepErrorProfile,
    pub arms: Vec<ArmResult>,
}

impl AblationOutcome {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "arm,t,w_bits,a_bits,psnr_db,ssim,latent_error,size_reduction,ops_reduction\n",
        );
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                a.name,
                a.t,
                a.report.w_bits,
                a.report.a_bits,
                a.report.psnr_db,
                a.report.ssim,
                a.report.latent_error,
                a.size_reduction,
                a.ops_reduction
            ));
        }
        out
    }
}

/// The component study: two backbones (trained at the late default timestep
/// and at the swept best one), quantized six ways.
///
/// | arm            | timestep | per-module stages | extended |
/// |----------------|----------|-------------------|----------|
/// | maxmin_hi_t    | late     | (untrained baseline)         |
/// | maxmin_trq     | best     | (untrained baseline)         |
/// | rpq_hi_t       | late     | yes               | no       |
/// | trq_rpq        | best     | yes               | no       |
/// | trq_et         | best     | no                | yes      |
/// | trq_rpq_et     | best     | yes               | yes      |
pub fn ablate(cfg: &RunConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.t_max,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;
    let hi_t = cfg.schedule.t_max;

    let mut net_hi = OsdsrNet::new(cfg.net, cfg.seed)?;
    train_backbone(&mut net_hi, &sched, &ds, hi_t, &cfg.backbone)?;

    let profile = sweep_timesteps(
        &net_hi,
        &sched,
        &ds,
        &cfg.sweep_timesteps,
        cfg.calib.w_bits,
        cfg.calib.a_bits,
    )?;
    let best_t = profile.best_t()?;

    let mut net_best = OsdsrNet::new(cfg.net, cfg.seed)?;
    train_backbone(&mut net_best, &sched, &ds, best_t, &cfg.backbone)?;

    let stages = MethodFlags {
        per_module_stages: true,
        extended: false,
    };
    let extended_only = MethodFlags {
        per_module_stages: false,
        extended: true,
    };
    let full = MethodFlags {
        per_module_stages: true,
        extended: true,
    };

    let mut arms = Vec::new();
    let mut push = |name: &str, t: usize, qm: QuantizedModel| -> Result<()> {
        let report = evaluate(&qm, &sched, &ds, name)?;
        let cost = qm.cost_report()?;
        arms.push(ArmResult {
            name: name.to_string(),
            t,
            report,
            size_reduction: cost.size_reduction,
            ops_reduction: cost.ops_reduction,
        });
        Ok(())
    };

    let (wb, ab) = (cfg.calib.w_bits, cfg.calib.a_bits);
    push(
        "maxmin_hi_t",
        hi_t,
        maxmin_baseline(&net_hi, &sched, &ds, hi_t, wb, ab)?,
    )?;
    push(
        "maxmin_trq",
        best_t,
        maxmin_baseline(&net_best, &sched, &ds, best_t, wb, ab)?,
    )?;
    push(
        "rpq_hi_t",
        hi_t,
        calibrate(&net_hi, &sched, &ds, hi_t, &cfg.calib, cfg.seed, stages)?.0,
    )?;
    push(
        "trq_rpq",
        best_t,
        calibrate(&net_best, &sched, &ds, best_t, &cfg.calib, cfg.seed, stages)?.0,
    )?;
    push(
        "trq_et",
        best_t,
        calibrate(
            &net_best,
            &sched,
            &ds,
            best_t,
            &cfg.calib,
            cfg.seed,
            extended_only,
        )?
        .0,
    )?;
    push(
        "trq_rpq_et",
        best_t,
        calibrate(&net_best, &sched, &ds, best_t, &cfg.calib, cfg.seed, full)?.0,
    )?;

    Ok(AblationOutcome {
        hi_t,
        best_t,
        profile,
        arms,
    })
}

// ── full pipeline ───────────────────────────────────────────────────────

pub struct PipelineRun {
    pub profile: TimestepErrorProfile,
    pub best_t: usize,
    pub train_initial: TrainRecord,
    pub train_best: TrainRecord,
    pub backbone_digest: String,
    pub calib: CalibRecord,
    pub quantized: QuantizedModel,
    pub report: MetricReport,
    pub cost: CostReport,
}

/// The whole method, end to end: train late, sweep, retrain at the best
/// timestep, calibrate per module in reverse with extended end-to-end
/// training, evaluate and account costs.
pub fn run_full_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let sched = NoiseSchedule::linear(
        cfg.schedule.t_max,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;

    let mut net_hi = OsdsrNet::new(cfg.net, cfg.seed)?;
    let train_initial =
        train_backbone(&mut net_hi, &sched, &ds, cfg.schedule.t_max, &cfg.backbone)?;

    let profile = sweep_timesteps(
        &net_hi,
        &sched,
        &ds,
        &cfg.sweep_timesteps,
        cfg.calib.w_bits,
        cfg.calib.a_bits,
    )?;
    let best_t = profile.best_t()?;

    let mut net_best = OsdsrNet::new(cfg.net, cfg.seed)?;
    let train_best = train_backbone(&mut net_best, &sched, &ds, best_t, &cfg.backbone)?;
    let backbone_digest = digest_tensors(&net_best.state_tensors());

    let flags = MethodFlags {
        per_module_stages: true,
        extended: true,
    };
    let (quantized, calib) =
        calibrate(&net_best, &sched, &ds, best_t, &cfg.calib, cfg.seed, flags)?;

    let report = evaluate(&quantized, &sched, &ds, "full_method")?;
    let cost = quantized.cost_report()?;
    Ok(PipelineRun {
        profile,
        best_t,
        train_initial,
        train_best,
        backbone_digest,
        calib,
        quantized,
        report,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;

    fn tiny_net_cfg() -> NetConfig {
        NetConfig {
            base_channels: 4,
            blocks: 2,
            lr_size: 8,
            activation: crate::model::Activation::Silu,
        }
    }

    fn tiny_setup(train_steps: usize, t: usize) -> (OsdsrNet, NoiseSchedule, Dataset) {
        let sched = NoiseSchedule::default_linear();
        let ds = generate_dataset(3, 32, 0.02, 42).unwrap();
        let mut net = OsdsrNet::new(tiny_net_cfg(), 7).unwrap();
        if train_steps > 0 {
            let cfg = BackboneTrainConfig {
                steps: train_steps,
                batch: 2,
                lr: 2e-3,
                timestep: t,
            };
            train_backbone(&mut net, &sched, &ds, t, &cfg).unwrap();
        }
        (net, sched, ds)
    }

    fn tiny_calib_cfg() -> CalibConfig {
        CalibConfig {
            w_bits: 4,
            a_bits: 4,
            rank: None,
            rank_f: None,
            stage_steps: 25,
            et_steps: 25,
            batch: 2,
            lr: 1e-3,
            module_loss_weight: 10.0,
        }
    }

    #[test]
    fn suffix_runs_from_cached_inputs_reproduce_the_full_forward() {
        let (net, sched, ds) = tiny_setup(0, 500);
        let caches = fp_caches(&net, &sched, &ds, 500).unwrap();
        let quant = crate::model::no_quant(net.module_count());
        for cache in &caches {
            for start in 0..net.module_count() {
                let mut g = Graph::new();
                let mut binder = Binder::frozen();
                let x = g.constant(cache.module_inputs[start].clone());
                let z_l = if start < net.cfg.blocks {
                    Some(g.constant(cache.z_l.clone()))
                } else {
                    None
                };
                let tail = net
                    .run_tail(&mut g, &mut binder, &sched, 500, &quant, start, x, z_l)
                    .unwrap();
                let img = g.value(tail.img);
                assert!(
                    img.max_abs_diff(&cache.image).unwrap() < 1e-12,
                    "suffix from module {} diverged",
                    start
                );
            }
        }
    }

    #[test]
    fn backbone_training_reduces_loss_deterministically() {
        let (net_a, sched, ds) = tiny_setup(0, 500);
        let cfg = BackboneTrainConfig {
            steps: 40,
            batch: 2,
            lr: 2e-3,
            timestep: 500,
        };
        let mut a = net_a.clone();
        let rec_a = train_backbone(&mut a, &sched, &ds, 500, &cfg).unwrap();
        let mut b = net_a.clone();
        let rec_b = train_backbone(&mut b, &sched, &ds, 500, &cfg).unwrap();

        let early: f64 = rec_a.losses[..5].iter().sum::<f64>() / 5.0;
        let late: f64 = rec_a.losses[rec_a.losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(late < early, "loss did not fall: {} -> {}", early, late);
        assert_eq!(a.train_t, Some(500));

        assert_eq!(rec_a.losses, rec_b.losses);
        assert_eq!(
            digest_tensors(&a.state_tensors()),
            digest_tensors(&b.state_tensors())
        );
    }

    #[test]
    fn reversed_order_is_the_exact_reversal() {
        assert_eq!(reversed_order(6), vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(reversed_order(1), vec![0]);
    }

    #[test]
    fn baseline_quantization_degrades_but_stays_finite() {
        let (net, sched, ds) = tiny_setup(30, 500);
        let qm = maxmin_baseline(&net, &sched, &ds, 500, 4, 4).unwrap();
        let report = evaluate(&qm, &sched, &ds, "baseline").unwrap();
        assert!(report.psnr_db.is_finite());
        assert!(
            report.psnr_db < 99.0,
            "4-bit quantization should not be lossless"
        );
        assert!(
            report.psnr_db > 3.0,
            "quantized output should stay in range"
        );
        assert!(report.ssim <= 1.0 && report.ssim > 0.0);
        assert!(report.latent_error > 0.0);

        // 32-bit passthrough leaves the model untouched up to clamping.
        let fp = maxmin_baseline(&net, &sched, &ds, 500, 32, 32).unwrap();
        let fp_report = evaluate(&fp, &sched, &ds, "fp").unwrap();
        assert!(fp_report.psnr_db >= 99.0 - 1e-9);
        assert!(fp_report.latent_error < 1e-20);
    }

    #[test]
    fn calibration_improves_on_static_ranges_and_freezes_the_backbone() {
        let (net, sched, ds) = tiny_setup(30, 500);
        let before = digest_tensors(&net.state_tensors());
        let flags = MethodFlags {
            per_module_stages: true,
            extended: false,
        };
        let (qm, record) = calibrate(&net, &sched, &ds, 500, &tiny_calib_cfg(), 3, flags).unwrap();
        assert_eq!(digest_tensors(&net.state_tensors()), before);
        assert_eq!(qm.backbone_digest, before);

        // Per-module stages plus the end-to-end stage.
        assert_eq!(record.stages.len(), net.module_count() + 1);
        let total_start: f64 = record.stages.iter().map(|s| s.start_loss).sum();
        let total_end: f64 = record.stages.iter().map(|s| s.end_loss).sum();
        assert!(
            total_end < total_start,
            "calibration did not reduce loss: {} -> {}",
            total_start,
            total_end
        );
        for s in &record.stages {
            assert!(s.start_loss.is_finite() && s.end_loss.is_finite());
        }

        let cal = evaluate(&qm, &sched, &ds, "calibrated").unwrap();
        let base = evaluate(
            &maxmin_baseline(&net, &sched, &ds, 500, 4, 4).unwrap(),
            &sched,
            &ds,
            "baseline",
        )
        .unwrap();
        assert!(
            cal.psnr_db > base.psnr_db,
            "calibrated {} dB should beat static ranges {} dB",
            cal.psnr_db,
            base.psnr_db
        );
    }

    #[test]
    fn calibration_is_deterministic() {
        let (net, sched, ds) = tiny_setup(20, 500);
        let flags = MethodFlags {
            per_module_stages: true,
            extended: true,
        };
        let mut cfg = tiny_calib_cfg();
        cfg.stage_steps = 8;
        cfg.et_steps = 8;
        let (a, ra) = calibrate(&net, &sched, &ds, 500, &cfg, 5, flags).unwrap();
        let (b, rb) = calibrate(&net, &sched, &ds, 500, &cfg, 5, flags).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(ra.to_csv(), rb.to_csv());
    }

    #[test]
    fn quantized_model_round_trips_through_its_state() {
        let (net, sched, ds) = tiny_setup(20, 500);
        let flags = MethodFlags {
            per_module_stages: false,
            extended: true,
        };
        let mut cfg = tiny_calib_cfg();
        cfg.et_steps = 10;
        let (qm, _) = calibrate(&net, &sched, &ds, 500, &cfg, 1, flags).unwrap();
        let state = qm.state_tensors();
        let back = QuantizedModel::from_state(&state).unwrap();
        assert_eq!(back.t, qm.t);
        assert_eq!(back.w_bits, 4);
        let (_, _, a) = qm.forward_eager(&ds.items[0].lr, &sched).unwrap();
        let (_, _, b) = back.forward_eager(&ds.items[0].lr, &sched).unwrap();
        let a_bits: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
        assert_eq!(back.digest(), qm.digest());
    }

    #[test]
    fn late_timesteps_amplify_quantization_error() {
        let (net, sched, ds) = tiny_setup(30, 1);
        let profile = sweep_timesteps(&net, &sched, &ds, &[1, 500, 1000], 4, 4).unwrap();
        assert_eq!(profile.rows.len(), 3);
        let err_at = |t: usize| profile.rows.iter().find(|r| r.0 == t).unwrap().2;
        assert!(
            err_at(1000) > 100.0 * err_at(1),
            "latent error should explode late: {} vs {}",
            err_at(1),
            err_at(1000)
        );
        assert_eq!(profile.best_t().unwrap(), 1);
    }
}
