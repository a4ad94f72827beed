//! Image quality metrics, rank correlation, and size/ops accounting.

use serde::{Deserialize, Serialize};

use crate::error::{QartError, Result};
use crate::tensor::{ConvGeom, Graph, Tensor, Var};

/// PSNR in decibels, capped at 99 dB when the MSE underflows 1e-12 (the
/// cap stands in for "identical" without producing infinities).
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(QartError::param("psnr peak must be positive"));
    }
    let mse = a.mse(b)?;
    if mse < 1e-12 {
        return Ok(99.0);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM over sliding 8x8 uniform windows (stride 1), averaged across
/// channels. Images are `[c, h*w]` with values nominally in `[0, peak]`.
pub fn ssim(a: &Tensor, b: &Tensor, c: usize, h: usize, w: usize, peak: f64) -> Result<f64> {
    const WIN: usize = 8;
    if a.shape() != b.shape() || a.shape() != [c, h * w] {
        return Err(QartError::dim(format!(
            "ssim shapes {:?} vs {:?} for [{}, {}]",
            a.shape(),
            b.shape(),
            c,
            h * w
        )));
    }
    if h < WIN || w < WIN {
        return Err(QartError::param(format!(
            "ssim needs at least {0}x{0} pixels, got {1}x{2}",
            WIN, h, w
        )));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        let mut windows = 0usize;
        for y0 in 0..=(h - WIN) {
            for x0 in 0..=(w - WIN) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..WIN {
                    let row = (y0 + dy) * w + x0;
                    for dx in 0..WIN {
                        let va = pa[row + dx];
                        let vb = pb[row + dx];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let mua = sa / n;
                let mub = sb / n;
                let vara = saa / n - mua * mua;
                let varb = sbb / n - mub * mub;
                let cov = sab / n - mua * mub;
                acc += ((2.0 * mua * mub + c1) * (2.0 * cov + c2))
                    / ((mua * mua + mub * mub + c1) * (vara + varb + c2));
                windows += 1;
            }
        }
        total += acc / windows as f64;
    }
    Ok(total / c as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(QartError::dim(format!(
            "spearman lengths {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(QartError::param("spearman needs at least two points"));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(QartError::numeric("spearman of a constant sequence"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Average 1-based rank across the tied run [i, j].
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

// ── perceptual proxy ────────────────────────────────────────────────────

/// 5x5 Gaussian taps (sigma 1), normalized to sum exactly to one.
pub(crate) fn gaussian5() -> [f64; 25] {
    let mut k = [0.0; 25];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let dy = (i / 5) as f64 - 2.0;
        let dx = (i % 5) as f64 - 2.0;
        *v = (-(dx * dx + dy * dy) / 2.0).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Block-diagonal conv weight applying the same single-channel kernel to
/// each of `c` channels independently: shape `[c, c*k*k]`.
fn per_channel_weight(c: usize, k: usize, taps: &[f64]) -> Tensor {
    let mut w = Tensor::zeros(vec![c, c * k * k]);
    for ch in 0..c {
        for (t, &v) in taps.iter().enumerate() {
            w.data_mut()[ch * c * k * k + ch * k * k + t] = v;
        }
    }
    w
}

/// Differentiable multi-scale gradient-map dissimilarity between two
/// `[c, h*w]` images: at each of three pyramid levels (Gaussian blur,
/// stride-2 downsampling between levels), take central-difference gradient
/// maps in x and y and accumulate their mean absolute difference. Stands in
/// for a learned perceptual distance with the same multi-scale, structural
/// character while keeping the crate dependency-free.
pub fn perceptual_proxy(
    g: &mut Graph,
    a: Var,
    b: Var,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    const LEVELS: usize = 3;
    if g.value(a).shape() != g.value(b).shape() || g.value(a).shape() != [c, h * w] {
        return Err(QartError::dim(format!(
            "proxy shapes {:?} vs {:?} for [{}, {}]",
            g.value(a).shape(),
            g.value(b).shape(),
            c,
            h * w
        )));
    }
    let dx = per_channel_weight(c, 3, &[0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0]);
    let dy = per_channel_weight(c, 3, &[0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
    let blur = per_channel_weight(c, 5, &gaussian5());
    let dxv = g.constant(dx);
    let dyv = g.constant(dy);
    let blurv = g.constant(blur);

    let (mut la, mut lb) = (a, b);
    let (mut lh, mut lw) = (h, w);
    let mut terms: Option<Var> = None;
    for level in 0..LEVELS {
        if level > 0 {
            if lh < 5 || lw < 5 {
                return Err(QartError::param(format!(
                    "image {}x{} too small for a {}-level pyramid",
                    h, w, LEVELS
                )));
            }
            let geo = ConvGeom {
                c_in: c,
                h: lh,
                w: lw,
                k: 5,
                stride: 2,
                pad: 2,
            };
            let ca = g.im2col(la, geo)?;
            let cb = g.im2col(lb, geo)?;
            la = g.matmul(blurv, ca)?;
            lb = g.matmul(blurv, cb)?;
            lh = geo.out_h();
            lw = geo.out_w();
        }
        let geo = ConvGeom {
            c_in: c,
            h: lh,
            w: lw,
            k: 3,
            stride: 1,
            pad: 1,
        };
        let ca = g.im2col(la, geo)?;
        let cb = g.im2col(lb, geo)?;
        let gxa = g.matmul(dxv, ca)?;
        let gxb = g.matmul(dxv, cb)?;
        let gya = g.matmul(dyv, ca)?;
        let gyb = g.matmul(dyv, cb)?;
        let tx = g.mad(gxa, gxb)?;
        let ty = g.mad(gya, gyb)?;
        let t = g.add(tx, ty)?;
        terms = Some(match terms {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    g.mul_scalar(terms.expect("at least one level"), 1.0 / LEVELS as f64)
}

/// Weighted image dissimilarity used as the training target:
/// `a1 * perceptual_proxy + a2 * mse`.
pub fn image_loss(
    g: &mut Graph,
    got: Var,
    want: Var,
    c: usize,
    h: usize,
    w: usize,
    a1: f64,
    a2: f64,
) -> Result<Var> {
    let prox = perceptual_proxy(g, got, want, c, h, w)?;
    let wp = g.mul_scalar(prox, a1)?;
    let mse = g.mse(got, want)?;
    let wm = g.mul_scalar(mse, a2)?;
    g.add(wp, wm)
}

// ── cost accounting ─────────────────────────────────────────────────────

/// What one layer stores and computes per forward image.
///
/// Conventions: a parameter stored at `bits` wide costs `bits/32` of an
/// fp32 parameter; a MAC between a `wb`-bit weight and an `ab`-bit
/// activation costs `wb*ab/1024` of an fp32 MAC. Low-rank skip factors and
/// transform vectors stay at full precision and are charged as overhead;
/// the low-rank correction and the channel scaling fold into the quantized
/// weight at deployment and add nothing at runtime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerCost {
    Fp {
        weights: u64,
        biases: u64,
        macs: u64,
    },
    Quantized {
        weights: u64,
        biases: u64,
        macs: u64,
        w_bits: u32,
        a_bits: u32,
        bias_bits: u32,
        /// Full-precision parameters carried alongside (skip factors,
        /// transform vectors, quantizer scales/zeros).
        overhead_params: u64,
        /// Full-precision MACs added per forward image (the skip path).
        overhead_macs: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerInventory {
    pub name: String,
    pub cost: LayerCost,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<LayerInventory>,
    /// Sizes in fp32-parameter equivalents.
    pub fp_size: f64,
    pub effective_size: f64,
    pub size_reduction: f64,
    /// Ops in fp32-MAC equivalents per forward image.
    pub fp_macs: f64,
    pub effective_macs: f64,
    pub ops_reduction: f64,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,fp_params,effective_params,fp_macs,effective_macs\n");
        for row in &self.rows {
            let (fs, es, fm, em) = layer_numbers(&row.cost);
            out.push_str(&format!("{},{},{},{},{}\n", row.name, fs, es, fm, em));
        }
        out.push_str(&format!(
            "total,{},{},{},{}\n",
            self.fp_size, self.effective_size, self.fp_macs, self.effective_macs
        ));
        out
    }
}

fn layer_numbers(cost: &LayerCost) -> (f64, f64, f64, f64) {
    match *cost {
        LayerCost::Fp {
            weights,
            biases,
            macs,
        } => {
            let p = (weights + biases) as f64;
            (p, p, macs as f64, macs as f64)
        }
        LayerCost::Quantized {
            weights,
            biases,
            macs,
            w_bits,
            a_bits,
            bias_bits,
            overhead_params,
            overhead_macs,
        } => {
            let fp = (weights + biases) as f64;
            let eff = weights as f64 * w_bits as f64 / 32.0
                + biases as f64 * bias_bits as f64 / 32.0
                + overhead_params as f64;
            let fpm = macs as f64;
            let effm =
                macs as f64 * (w_bits as f64 * a_bits as f64) / 1024.0 + overhead_macs as f64;
            (fp, eff, fpm, effm)
        }
    }
}

/// Aggregate per-layer inventories into totals and reduction ratios.
pub fn account_cost(rows: Vec<LayerInventory>) -> Result<CostReport> {
    if rows.is_empty() {
        return Err(QartError::Accounting("no layers to account".into()));
    }
    let (mut fs, mut es, mut fm, mut em) = (0.0, 0.0, 0.0, 0.0);
    for row in &rows {
        let (a, b, c, d) = layer_numbers(&row.cost);
        // Individual tiny layers may cost more quantized than fp once the
        // low-rank and transform overhead is charged; only a model whose
        // total fails to shrink is flagged.
        fs += a;
        es += b;
        fm += c;
        em += d;
    }
    if es > fs {
        return Err(QartError::Accounting(format!(
            "quantization grows the model ({} -> {} fp32-equivalents)",
            fs, es
        )));
    }
    Ok(CostReport {
        rows,
        fp_size: fs,
        effective_size: es,
        size_reduction: 1.0 - es / fs,
        fp_macs: fm,
        effective_macs: em,
        ops_reduction: 1.0 - em / fm,
    })
}

/// One evaluation row: fidelity of a model against the full-precision
/// reference on an evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub tag: String,
    pub w_bits: u32,
    pub a_bits: u32,
    /// Mean per-image PSNR against the fp reference outputs, dB.
    pub psnr_db: f64,
    pub ssim: f64,
    /// Mean latent MSE against the fp restored latents.
    pub latent_error: f64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "tag,w_bits,a_bits,psnr_db,ssim,latent_error"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.tag, self.w_bits, self.a_bits, self.psnr_db, self.ssim, self.latent_error
        )
    }
}
