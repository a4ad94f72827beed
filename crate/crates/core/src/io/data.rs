//! Synthetic paired dataset: procedurally generated high-resolution images
//! and their degraded low-resolution counterparts (blur, 4x downsample,
//! additive noise), plus on-disk layout with a JSON manifest.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QartError, Result};
use crate::io::image::{read_ppm, write_ppm};
use crate::rng::{normal, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticFamily {
    Gradients,
    Checkers,
    Blobs,
    Strokes,
}

pub const FAMILIES: [SyntheticFamily; 4] = [
    SyntheticFamily::Gradients,
    SyntheticFamily::Checkers,
    SyntheticFamily::Blobs,
    SyntheticFamily::Strokes,
];

/// One high-resolution image of the given family, `[3, size*size]`.
pub fn synth_hr(family: SyntheticFamily, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut img = Tensor::zeros(vec![3, size * size]);
    let s = size as f64;
    match family {
        SyntheticFamily::Gradients => {
            for ch in 0..3 {
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let (dy, dx) = (angle.sin(), angle.cos());
                let phase = rng.random::<f64>();
                for y in 0..size {
                    for x in 0..size {
                        let t = (dy * y as f64 + dx * x as f64) / s + phase;
                        img.data_mut()[ch * size * size + y * size + x] =
                            0.5 + 0.5 * (t * std::f64::consts::TAU * 0.5).sin();
                    }
                }
            }
        }
        SyntheticFamily::Checkers => {
            let cell = [4, 8, 16][rng.random_range(0..3)];
            let oy = rng.random_range(0..cell);
            let ox = rng.random_range(0..cell);
            let a: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            for ch in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let parity = ((y + oy) / cell + (x + ox) / cell) % 2;
                        img.data_mut()[ch * size * size + y * size + x] =
                            if parity == 0 { a[ch] } else { b[ch] };
                    }
                }
            }
        }
        SyntheticFamily::Blobs => {
            let bg: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 0.3).collect();
            for ch in 0..3 {
                for p in 0..size * size {
                    img.data_mut()[ch * size * size + p] = bg[ch];
                }
            }
            let blobs = rng.random_range(3..=6);
            for _ in 0..blobs {
                let cy = rng.random::<f64>() * s;
                let cx = rng.random::<f64>() * s;
                let sigma = s * (0.05 + 0.15 * rng.random::<f64>());
                let color: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
                        for ch in 0..3 {
                            let idx = ch * size * size + y * size + x;
                            let cur = img.data()[idx];
                            img.data_mut()[idx] = cur + wgt * (color[ch] - cur);
                        }
                    }
                }
            }
        }
        SyntheticFamily::Strokes => {
            let bg = rng.random::<f64>() * 0.4 + 0.3;
            for v in img.data_mut() {
                *v = bg;
            }
            let strokes = rng.random_range(4..=8);
            for _ in 0..strokes {
                let (y0, x0) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
                let (y1, x1) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
                let width = 1.0 + rng.random::<f64>() * 3.0;
                let color: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                let (vy, vx) = (y1 - y0, x1 - x0);
                let len2 = (vy * vy + vx * vx).max(1e-9);
                for y in 0..size {
                    for x in 0..size {
                        // Distance from the pixel to the segment.
                        let t = ((y as f64 - y0) * vy + (x as f64 - x0) * vx) / len2;
                        let t = t.clamp(0.0, 1.0);
                        let (py, px) = (y0 + t * vy, x0 + t * vx);
                        let d = ((y as f64 - py).powi(2) + (x as f64 - px).powi(2)).sqrt();
                        let wgt = (-(d / width).powi(2)).exp();
                        if wgt > 1e-3 {
                            for ch in 0..3 {
                                let idx = ch * size * size + y * size + x;
                                let cur = img.data()[idx];
                                img.data_mut()[idx] = cur + wgt * (color[ch] - cur);
                            }
                        }
                    }
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// 5x5 Gaussian blur (sigma 1, replicate padding) on a `[3, size*size]` image.
fn blur_replicate(img: &Tensor, size: usize) -> Tensor {
    let kernel = crate::metrics::gaussian5();
    let mut out = Tensor::zeros(vec![3, size * size]);
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for ky in 0..5 {
                    for kx in 0..5 {
                        let sy =
                            (y as isize + ky as isize - 2).clamp(0, size as isize - 1) as usize;
                        let sx =
                            (x as isize + kx as isize - 2).clamp(0, size as isize - 1) as usize;
                        acc += kernel[ky * 5 + kx] * img.data()[ch * size * size + sy * size + sx];
                    }
                }
                out.data_mut()[ch * size * size + y * size + x] = acc;
            }
        }
    }
    out
}

/// Degrade a high-resolution image to its low-resolution observation:
/// Gaussian blur, 4x box downsample, additive N(0, noise) and clamp.
pub fn degrade(hr: &Tensor, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if hr.shape() != [3, size * size] {
        return Err(QartError::dim(format!(
            "high-res shape {:?}, expected [3, {}]",
            hr.shape(),
            size * size
        )));
    }
    if size % 4 != 0 {
        return Err(QartError::param(format!(
            "size {} not divisible by 4",
            size
        )));
    }
    let blurred = blur_replicate(hr, size);
    let small = size / 4;
    let mut lr = Tensor::zeros(vec![3, small * small]);
    for ch in 0..3 {
        for y in 0..small {
            for x in 0..small {
                let mut acc = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        acc +=
                            blurred.data()[ch * size * size + (y * 4 + dy) * size + (x * 4 + dx)];
                    }
                }
                let v = acc / 16.0 + normal(rng) * noise;
                lr.data_mut()[ch * small * small + y * small + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(lr)
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub index: usize,
    pub family: SyntheticFamily,
    pub hr: Tensor,
    pub lr: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub hr_size: usize,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn lr_size(&self) -> usize {
        self.hr_size / 4
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    count: usize,
    hr_size: usize,
    lr_size: usize,
    seed: u64,
    noise: f64,
    families: Vec<SyntheticFamily>,
}

/// Deterministic dataset: image `i` draws from its own stream seeded with
/// `seed + i`, families cycling through all four.
pub fn generate_dataset(count: usize, hr_size: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(QartError::Data("dataset needs at least one image".into()));
    }
    if hr_size % 4 != 0 || hr_size < 16 {
        return Err(QartError::param(format!(
            "hr_size {} must be a multiple of 4 and at least 16",
            hr_size
        )));
    }
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let family = FAMILIES[i % FAMILIES.len()];
        let mut rng = seeded(seed.wrapping_add(i as u64));
        let hr = synth_hr(family, hr_size, &mut rng);
        let lr = degrade(&hr, hr_size, noise, &mut rng)?;
        items.push(DatasetItem {
            index: i,
            family,
            hr,
            lr,
        });
    }
    Ok(Dataset { hr_size, items })
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset, seed: u64, noise: f64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for item in &ds.items {
        let hs = ds.hr_size;
        let ls = ds.lr_size();
        write_ppm(
            dir.join(format!("hr_{:04}.ppm", item.index)),
            &item.hr,
            hs,
            hs,
        )?;
        write_ppm(
            dir.join(format!("lr_{:04}.ppm", item.index)),
            &item.lr,
            ls,
            ls,
        )?;
    }
    let manifest = Manifest {
        count: ds.items.len(),
        hr_size: ds.hr_size,
        lr_size: ds.lr_size(),
        seed,
        noise,
        families: ds.items.iter().map(|i| i.family).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| QartError::Data(format!("manifest serialization: {}", e)))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| QartError::Data(format!("reading {}: {}", manifest_path.display(), e)))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| QartError::Data(format!("parsing manifest: {}", e)))?;
    if manifest.families.len() != manifest.count {
        return Err(QartError::Data(format!(
            "manifest lists {} families for {} images",
            manifest.families.len(),
            manifest.count
        )));
    }
    let mut items = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let (hr, hh, hw) = read_ppm(dir.join(format!("hr_{:04}.ppm", i)))?;
        let (lr, lh, lw) = read_ppm(dir.join(format!("lr_{:04}.ppm", i)))?;
        if hh != manifest.hr_size || hw != manifest.hr_size {
            return Err(QartError::Data(format!(
                "hr_{:04} is {}x{}, manifest says {}",
                i, hh, hw, manifest.hr_size
            )));
        }
        if lh != manifest.lr_size || lw != manifest.lr_size {
            return Err(QartError::Data(format!(
                "lr_{:04} is {}x{}, manifest says {}",
                i, lh, lw, manifest.lr_size
            )));
        }
        items.push(DatasetItem {
            index: i,
            family: manifest.families[i],
            hr,
            lr,
        });
    }
    Ok(Dataset {
        hr_size: manifest.hr_size,
        items,
    })
}
