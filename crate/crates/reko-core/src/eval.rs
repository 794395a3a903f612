//! Evaluation metrics and visual diagnostics.
//!
//! Quality is measured against ground truth separately inside and outside
//! the object mask, since the synthetic task only changes pixels inside it.
//! Region IoU scores how well attention-selected bottleneck regions line up
//! with the mask; diagonality scores how region-discriminative the student's
//! embeddings are against the teacher's.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attention::RegionSet;
use crate::imageio;
use crate::losses::HeadPair;
use crate::models::Generator;
use crate::synth::{Sample, CHANNELS, IMAGE_SIZE};
use crate::trainer::RunRecord;
use crate::{par, Error, Result};

/// Peak signal value for PSNR: images live in `[-1, 1]`, so the peak-to-peak
/// range is 2.
pub const PSNR_PEAK: f64 = 2.0;
/// PSNR is capped here to keep perfect reconstructions finite.
pub const PSNR_CAP: f64 = 99.0;

/// Reconstruction quality of a model over a sample set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QualityMetrics {
    /// MSE against the target over pixels inside the object mask.
    pub foreground_mse: f64,
    /// MSE against the target over pixels outside the object mask.
    pub background_mse: f64,
    /// PSNR over all pixels, in dB, capped at [`PSNR_CAP`].
    pub psnr_db: f64,
}

/// PSNR in dB for a given overall MSE, capped at [`PSNR_CAP`].
pub fn psnr_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP)
}

/// Runs `model` on every sample and accumulates masked/unmasked MSE.
pub fn quality_metrics(model: &Generator, samples: &[Sample]) -> Result<QualityMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("quality_metrics needs at least one sample".into()));
    }
    let per_sample: Vec<Result<(f64, usize, f64, usize)>> = par::par_map(samples, |s| {
        let (out, _) = model.run(&s.input)?;
        Ok(masked_se(&out, &s.target, &s.mask))
    });
    let (mut fg_se, mut fg_n, mut bg_se, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
    for r in per_sample {
        let (f, fn_, b, bn) = r?;
        fg_se += f;
        fg_n += fn_;
        bg_se += b;
        bg_n += bn;
    }
    if fg_n == 0 || bg_n == 0 {
        return Err(Error::InvalidArg("samples cover no foreground or no background".into()));
    }
    let foreground_mse = fg_se / fg_n as f64;
    let background_mse = bg_se / bg_n as f64;
    let overall = (fg_se + bg_se) / (fg_n + bg_n) as f64;
    Ok(QualityMetrics { foreground_mse, background_mse, psnr_db: psnr_db(overall) })
}

/// Squared-error sums and counts (foreground, background) of one image pair.
fn masked_se(out: &[f64], target: &[f64], mask: &[u8]) -> (f64, usize, f64, usize) {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let (mut fg, mut fg_n, mut bg, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
    for (p, &m) in mask.iter().enumerate() {
        for c in 0..CHANNELS {
            let d = out[c * plane + p] - target[c * plane + p];
            if m != 0 {
                fg += d * d;
                fg_n += 1;
            } else {
                bg += d * d;
                bg_n += 1;
            }
        }
    }
    (fg, fg_n, bg, bg_n)
}

/// Downsamples a pixel mask onto a region grid by majority vote; exact ties
/// count as object.
pub fn mask_to_grid(mask: &[u8], h: usize, w: usize, gh: usize, gw: usize) -> Result<Vec<bool>> {
    if mask.len() != h * w {
        return Err(Error::Shape {
            op: "mask_to_grid",
            detail: format!("{} bytes for {h}x{w}", mask.len()),
        });
    }
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::InvalidArg(format!(
            "grid {gh}x{gw} does not divide mask {h}x{w}"
        )));
    }
    let (bh, bw) = (h / gh, w / gw);
    let block = bh * bw;
    let mut grid = vec![false; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut count = 0usize;
            for y in 0..bh {
                for x in 0..bw {
                    if mask[(gy * bh + y) * w + gx * bw + x] != 0 {
                        count += 1;
                    }
                }
            }
            grid[gy * gw + gx] = 2 * count >= block;
        }
    }
    Ok(grid)
}

/// Intersection-over-union between a selected region set and the
/// ground-truth object grid derived from `mask`.
pub fn region_iou(regions: &RegionSet, mask: &[u8], h: usize, w: usize, gh: usize, gw: usize) -> Result<f64> {
    let grid = mask_to_grid(mask, h, w, gh, gw)?;
    if let Some(&bad) = regions.indices().iter().find(|&&i| i >= grid.len()) {
        return Err(Error::IndexOutOfRange { op: "region_iou", index: bad, bound: grid.len() });
    }
    let mut selected = vec![false; grid.len()];
    for &i in regions.indices() {
        selected[i] = true;
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (s, g) in selected.iter().zip(&grid) {
        if *s && *g {
            inter += 1;
        }
        if *s || *g {
            union += 1;
        }
    }
    if union == 0 {
        return Err(Error::InvalidArg("both region sets are empty".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// How region-discriminative student embeddings are against the teacher's:
/// mean over regions of (cosine to the matching teacher region) minus (mean
/// cosine to all other teacher regions). Constant student features score 0;
/// perfectly aligned, mutually orthogonal embeddings score close to 1.
pub fn diagonality(
    student_features: &[f64],
    teacher_features: &[f64],
    student_channels: usize,
    teacher_channels: usize,
    regions: usize,
    heads: &HeadPair,
) -> Result<f64> {
    if regions < 2 {
        return Err(Error::InvalidArg("diagonality needs at least 2 regions".into()));
    }
    if student_features.len() != student_channels * regions
        || teacher_features.len() != teacher_channels * regions
    {
        return Err(Error::Shape {
            op: "diagonality",
            detail: "feature buffers do not match channels x regions".into(),
        });
    }
    let s_emb = project_normalized(heads.student.weight(), heads.student.embed_dim, student_channels, student_features, regions);
    let t_emb = project_normalized(heads.teacher.weight(), heads.teacher.embed_dim, teacher_channels, teacher_features, regions);
    let d = heads.student.embed_dim;
    let mut score = 0.0;
    for i in 0..regions {
        let mut diag = 0.0;
        let mut off = 0.0;
        for j in 0..regions {
            let mut dot = 0.0;
            for e in 0..d {
                dot += s_emb[e * regions + i] * t_emb[e * regions + j];
            }
            if i == j {
                diag = dot;
            } else {
                off += dot;
            }
        }
        score += diag - off / (regions - 1) as f64;
    }
    Ok(score / regions as f64)
}

/// `weight [d, c] x features [c, m]`, then L2-normalize each column.
fn project_normalized(weight: &[f64], d: usize, c: usize, features: &[f64], m: usize) -> Vec<f64> {
    let mut emb = vec![0.0; d * m];
    for row in 0..d {
        for ch in 0..c {
            let wv = weight[row * c + ch];
            let f_row = &features[ch * m..(ch + 1) * m];
            let e_row = &mut emb[row * m..(row + 1) * m];
            for (ev, fv) in e_row.iter_mut().zip(f_row) {
                *ev += wv * fv;
            }
        }
    }
    for col in 0..m {
        let mut sq = 0.0;
        for row in 0..d {
            let v = emb[row * m + col];
            sq += v * v;
        }
        let n = sq.sqrt().max(crate::tensor::NORM_EPS);
        for row in 0..d {
            emb[row * m + col] /= n;
        }
    }
    emb
}

/// Diagonality of a student/teacher pair on one sample.
pub fn diagonality_on_sample(
    student: &Generator,
    teacher: &Generator,
    heads: &HeadPair,
    sample: &Sample,
) -> Result<f64> {
    let (_, fs) = student.run(&sample.input)?;
    let (_, ft) = teacher.run(&sample.input)?;
    let m = student.spec.bottleneck_size().pow(2);
    diagonality(
        &fs,
        &ft,
        student.spec.bottleneck_channels(),
        teacher.spec.bottleneck_channels(),
        m,
        heads,
    )
}

/// Population variance of the final third of an eval curve (at least the
/// last two points). Low variance late in training means a stable run.
pub fn variance_final_third(curve: &[f64]) -> Result<f64> {
    if curve.len() < 6 {
        return Err(Error::InvalidArg(format!(
            "stability needs at least 6 eval points, got {}",
            curve.len()
        )));
    }
    let tail = &curve[curve.len() - curve.len().div_ceil(3)..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / tail.len() as f64)
}

/// Stability of a run: [`variance_final_third`] of its eval curve.
pub fn stability_score(record: &RunRecord) -> Result<f64> {
    variance_final_third(&record.eval_curve())
}

/// Nearest-neighbor upscaling for small heatmaps.
pub fn upscale_nearest(values: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * factor * w * factor];
    for y in 0..h * factor {
        for x in 0..w * factor {
            out[y * w * factor + x] = values[(y / factor) * w + x / factor];
        }
    }
    out
}

/// Writes an attention map as a min-max normalized PGM, upscaled for
/// inspection.
pub fn write_attention_pgm(path: &Path, attention: &[f64], h: usize, w: usize, factor: usize) -> Result<()> {
    if attention.len() != h * w {
        return Err(Error::Shape {
            op: "write_attention_pgm",
            detail: format!("{} values for {h}x{w}", attention.len()),
        });
    }
    let big = upscale_nearest(attention, h, w, factor);
    imageio::write_pgm(path, w * factor, h * factor, &imageio::to_u8_minmax(&big))
}

/// Writes a cosine-similarity map as a PGM with the fixed affine mapping
/// `[-1, 1] -> [0, 255]`.
pub fn write_similarity_pgm(path: &Path, sims: &[f64], h: usize, w: usize, factor: usize) -> Result<()> {
    if sims.len() != h * w {
        return Err(Error::Shape {
            op: "write_similarity_pgm",
            detail: format!("{} values for {h}x{w}", sims.len()),
        });
    }
    let big = upscale_nearest(sims, h, w, factor);
    imageio::write_pgm(path, w * factor, h * factor, &imageio::to_u8_affine(&big, -1.0, 1.0))
}

/// Writes an `[input | teacher | student | target]` comparison panel.
pub fn write_comparison_panel(
    path: &Path,
    sample: &Sample,
    teacher_out: &[f64],
    student_out: &[f64],
) -> Result<()> {
    imageio::write_ppm_row(
        path,
        IMAGE_SIZE,
        IMAGE_SIZE,
        &[&sample.input, teacher_out, student_out, &sample.target],
    )
}
