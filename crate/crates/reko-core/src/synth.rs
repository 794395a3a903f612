//! Synthetic paired image-to-image task with ground-truth masks.
//!
//! Every sample is a 3x64x64 pair in `[-1, 1]`: the input shows 1-3 flat
//! ellipses on a smooth gradient background, the target repaints the
//! ellipse interiors with period-4 stripes aligned to each ellipse's major
//! axis and is pixel-identical to the input everywhere else. The union of
//! ellipse interiors is stored as a binary mask, which gives evaluation and
//! region-selection tests an exact notion of "where the task happens".
//!
//! Samples are serialized one per file: magic `RKSM`, little-endian u32
//! version, u64 generator seed, input and target as tensor blocks, u32
//! height and width, then `height*width` raw mask bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::tensor::checkpoint;
use crate::{derive_seed, par, seeds, Error, Result};

/// Side length of every image.
pub const IMAGE_SIZE: usize = 64;
/// Channels per image.
pub const CHANNELS: usize = 3;
/// Stripe period in pixels along an ellipse's major axis.
pub const STRIPE_PERIOD: f64 = 4.0;
/// Allowed object area as a fraction of the image.
pub const MASK_FRACTION_BAND: (f64, f64) = (0.15, 0.35);

const SAMPLE_MAGIC: &[u8; 4] = b"RKSM";
const SAMPLE_VERSION: u32 = 1;

/// One paired sample with its ground-truth object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Input image, CHW in `[-1, 1]`.
    pub input: Vec<f64>,
    /// Target image, CHW in `[-1, 1]`; equals `input` wherever `mask` is 0.
    pub target: Vec<f64>,
    /// Row-major object mask, one byte per pixel, values 0 or 1.
    pub mask: Vec<u8>,
    /// Seed this sample was generated from.
    pub seed: u64,
}

impl Sample {
    /// Fraction of pixels covered by the object mask.
    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }

    /// Mean absolute input-target difference inside the mask.
    pub fn mean_abs_delta_in_mask(&self) -> f64 {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, &m) in self.mask.iter().enumerate() {
            if m != 0 {
                for c in 0..CHANNELS {
                    sum += (self.target[c * plane + p] - self.input[c * plane + p]).abs();
                    count += 1;
                }
            }
        }
        if count == 0 { 0.0 } else { sum / count as f64 }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }

    /// Coordinate along the major axis, used as the stripe phase.
    fn axis_coord(&self, x: f64, y: f64) -> f64 {
        (x - self.cx) * self.cos_t + (y - self.cy) * self.sin_t
    }
}

fn draw_ellipses(rng: &mut ChaCha8Rng) -> (Vec<Ellipse>, Vec<u8>, f64) {
    let s = IMAGE_SIZE;
    let n = rng.gen_range(1..=3);
    let ellipses: Vec<Ellipse> = (0..n)
        .map(|_| {
            let cx = rng.gen_range(12.0..52.0);
            let cy = rng.gen_range(12.0..52.0);
            let a = rng.gen_range(8.0..20.0);
            let b = a * rng.gen_range(0.45..0.8);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse { cx, cy, a, b, cos_t: theta.cos(), sin_t: theta.sin() }
        })
        .collect();
    let mut mask = vec![0u8; s * s];
    let mut covered = 0usize;
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if ellipses.iter().any(|e| e.contains(px, py)) {
                mask[y * s + x] = 1;
                covered += 1;
            }
        }
    }
    let fraction = covered as f64 / (s * s) as f64;
    (ellipses, mask, fraction)
}

/// Generates one sample deterministically from `seed`.
pub fn generate_sample(seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = IMAGE_SIZE;
    let plane = s * s;

    // Background: per-channel base color plus a linear gradient.
    let base: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-0.9..-0.1)).collect();
    let grad_x: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let grad_y: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let object: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(0.0..0.9)).collect();

    // Redraw the geometry until the covered area lands in the allowed band.
    let (ellipses, mask, _) = (0..)
        .map(|_| draw_ellipses(&mut rng))
        .take(10_000)
        .find(|(_, _, f)| (MASK_FRACTION_BAND.0..=MASK_FRACTION_BAND.1).contains(f))
        .expect("ellipse area band is reachable within the retry budget");

    let mut input = vec![0.0; CHANNELS * plane];
    for c in 0..CHANNELS {
        for y in 0..s {
            for x in 0..s {
                let fx = x as f64 / (s - 1) as f64 - 0.5;
                let fy = y as f64 / (s - 1) as f64 - 0.5;
                let v = if mask[y * s + x] != 0 {
                    object[c]
                } else {
                    base[c] + grad_x[c] * fx + grad_y[c] * fy
                };
                input[c * plane + y * s + x] = v;
            }
        }
    }
    // Mild sensor noise over the whole input (drawn after geometry so the
    // retry loop cannot shift it).
    for v in input.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(-1.0, 1.0);
    }

    // Target: identical off-mask, striped inside. Each pixel takes its
    // stripe phase from the first ellipse that contains it.
    let mut target = input.clone();
    let half = STRIPE_PERIOD / 2.0;
    for y in 0..s {
        for x in 0..s {
            if mask[y * s + x] == 0 {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let owner = ellipses
                .iter()
                .find(|e| e.contains(px, py))
                .expect("masked pixel lies in some ellipse");
            let band = (owner.axis_coord(px, py) / half).floor() as i64;
            let delta = if band.rem_euclid(2) == 0 { 0.6 } else { -0.6 };
            for c in 0..CHANNELS {
                target[c * plane + y * s + x] = (object[c] + delta).clamp(-1.0, 1.0);
            }
        }
    }

    Sample { input, target, mask, seed }
}

/// Writes one sample file.
pub fn write_sample(path: &Path, sample: &Sample) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(SAMPLE_MAGIC).map_err(io_err)?;
    w.write_all(&SAMPLE_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&sample.seed.to_le_bytes()).map_err(io_err)?;
    let shape = [CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    checkpoint::write_block(&mut w, &shape, &sample.input).map_err(io_err)?;
    checkpoint::write_block(&mut w, &shape, &sample.target).map_err(io_err)?;
    w.write_all(&(IMAGE_SIZE as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(IMAGE_SIZE as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&sample.mask).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Reads one sample file, validating magic, version, shapes and mask values.
pub fn read_sample(path: &Path) -> Result<Sample> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != SAMPLE_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != SAMPLE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
    let seed = u64::from_le_bytes(u64buf);
    let expect = [CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    let (shape_in, input) = checkpoint::read_block(&mut r, path)?;
    let (shape_tg, target) = checkpoint::read_block(&mut r, path)?;
    if shape_in != expect || shape_tg != expect {
        return Err(Error::format(path, format!("image shape {shape_in:?}/{shape_tg:?}")));
    }
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let h = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let w = u32::from_le_bytes(u32buf) as usize;
    if h != IMAGE_SIZE || w != IMAGE_SIZE {
        return Err(Error::format(path, format!("mask dims {h}x{w}")));
    }
    let mut mask = vec![0u8; h * w];
    r.read_exact(&mut mask).map_err(|e| Error::io(path, e))?;
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::format(path, "mask bytes must be 0 or 1"));
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(Sample { input, target, mask, seed }),
        Ok(_) => Err(Error::format(path, "trailing bytes after sample")),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes a `[input | target | mask]` strip for eyeballing a sample.
pub fn export_sample_ppm(path: &Path, sample: &Sample) -> Result<()> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut mask_rgb = vec![0.0; CHANNELS * plane];
    for (p, &m) in sample.mask.iter().enumerate() {
        let v = if m != 0 { 1.0 } else { -1.0 };
        for c in 0..CHANNELS {
            mask_rgb[c * plane + p] = v;
        }
    }
    crate::imageio::write_ppm_row(
        path,
        IMAGE_SIZE,
        IMAGE_SIZE,
        &[&sample.input, &sample.target, &mask_rgb],
    )
}

/// Index entry for one stored sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub split: String,
    pub index: usize,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

/// On-disk dataset index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub samples: Vec<SampleEntry>,
}

/// In-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    /// Generates both splits in memory. Train and eval samples draw from
    /// disjoint seed streams of `seed`.
    pub fn generate(seed: u64, n_train: usize, n_eval: usize) -> Result<Self> {
        if n_train == 0 || n_eval == 0 {
            return Err(Error::InvalidArg("dataset needs at least one sample per split".into()));
        }
        let train = par::par_map_indices(n_train, |i| {
            generate_sample(derive_seed(seed, seeds::TRAIN_SAMPLE_BASE + i as u64))
        });
        let eval = par::par_map_indices(n_eval, |i| {
            generate_sample(derive_seed(seed, seeds::EVAL_SAMPLE_BASE + i as u64))
        });
        Ok(Dataset { seed, train, eval })
    }

    /// Writes every sample plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut samples = Vec::with_capacity(self.train.len() + self.eval.len());
        for (split, set) in [("train", &self.train), ("eval", &self.eval)] {
            for (i, sample) in set.iter().enumerate() {
                let file = format!("{split}_{i:05}.rksm");
                let path = dir.join(&file);
                write_sample(&path, sample)?;
                samples.push(SampleEntry {
                    split: split.to_string(),
                    index: i,
                    seed: sample.seed,
                    file: file.clone(),
                    sha256: checkpoint::sha256_file(&path)?,
                });
            }
        }
        let manifest = DatasetManifest {
            format_version: 1,
            seed: self.seed,
            n_train: self.train.len(),
            n_eval: self.eval.len(),
            samples,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Json { path: path.clone(), source: e })?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a dataset directory, verifying per-file checksums.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Json { path: manifest_path.clone(), source: e })?;
        if manifest.format_version != 1 {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        let mut train = vec![None; manifest.n_train];
        let mut eval = vec![None; manifest.n_eval];
        for entry in &manifest.samples {
            let path = dir.join(&entry.file);
            let sha = checkpoint::sha256_file(&path)?;
            if sha != entry.sha256 {
                return Err(Error::format(&path, "checksum mismatch"));
            }
            let sample = read_sample(&path)?;
            let slot = match entry.split.as_str() {
                "train" => train.get_mut(entry.index),
                "eval" => eval.get_mut(entry.index),
                other => return Err(Error::format(&manifest_path, format!("unknown split {other}"))),
            };
            match slot {
                Some(s @ None) => *s = Some(sample),
                Some(Some(_)) => {
                    return Err(Error::format(
                        &manifest_path,
                        format!("duplicate {} sample {}", entry.split, entry.index),
                    ))
                }
                None => {
                    return Err(Error::format(
                        &manifest_path,
                        format!("{} sample index {} out of range", entry.split, entry.index),
                    ))
                }
            }
        }
        let unwrap_all = |v: Vec<Option<Sample>>, split: &str| -> Result<Vec<Sample>> {
            v.into_iter()
                .enumerate()
                .map(|(i, s)| {
                    s.ok_or_else(|| Error::format(&manifest_path, format!("missing {split} sample {i}")))
                })
                .collect()
        };
        Ok(Dataset {
            seed: manifest.seed,
            train: unwrap_all(train, "train")?,
            eval: unwrap_all(eval, "eval")?,
        })
    }
}

/// Resolves the conventional dataset directory under an output root.
pub fn dataset_dir(out_root: &Path) -> PathBuf {
    out_root.join("data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_fraction_stays_in_band() {
        for seed in 0..25 {
            let s = generate_sample(seed);
            let f = s.mask_fraction();
            assert!(
                (MASK_FRACTION_BAND.0..=MASK_FRACTION_BAND.1).contains(&f),
                "seed {seed}: fraction {f}"
            );
        }
    }

    #[test]
    fn target_matches_input_outside_mask_exactly() {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for seed in [3u64, 77, 2024] {
            let s = generate_sample(seed);
            for (p, &m) in s.mask.iter().enumerate() {
                if m == 0 {
                    for c in 0..CHANNELS {
                        assert_eq!(
                            s.input[c * plane + p].to_bits(),
                            s.target[c * plane + p].to_bits()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn translation_changes_masked_pixels_substantially() {
        let mean: f64 =
            (0..100).map(|seed| generate_sample(seed).mean_abs_delta_in_mask()).sum::<f64>() / 100.0;
        assert!(mean > 0.1, "mean masked |delta| {mean}");
        for seed in 0..100 {
            assert!(generate_sample(seed).mean_abs_delta_in_mask() > 0.1, "seed {seed}");
        }
    }

    #[test]
    fn stripes_put_both_polarities_inside_mask() {
        // Channel-0 deltas inside the mask must include clearly brighter and
        // clearly darker pixels, otherwise there are no stripes to learn.
        let s = generate_sample(11);
        let deltas: Vec<f64> = s
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(p, _)| s.target[p] - s.input[p])
            .collect();
        assert!(deltas.iter().any(|&d| d > 0.2), "no bright stripe");
        assert!(deltas.iter().any(|&d| d < -0.2), "no dark stripe");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sample(99);
        let b = generate_sample(99);
        assert_eq!(a, b);
        let c = generate_sample(100);
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn values_stay_in_range() {
        let s = generate_sample(5);
        for v in s.input.iter().chain(&s.target) {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn sample_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rksm");
        let s = generate_sample(42);
        write_sample(&path, &s).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(back.seed, s.seed);
        assert_eq!(back.mask, s.mask);
        for (a, b) in s.input.iter().zip(&back.input) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in s.target.iter().zip(&back.target) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_sample_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rksm");
        write_sample(&path, &generate_sample(1)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_sample(&path).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_splits_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(7, 4, 2).unwrap();
        // Same base seed must not reuse samples across splits.
        assert_ne!(ds.train[0].mask, ds.eval[0].mask);
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.train.len(), 4);
        assert_eq!(back.eval.len(), 2);
        assert_eq!(back.train[3], ds.train[3]);
        assert_eq!(back.eval[1], ds.eval[1]);
    }

    #[test]
    fn dataset_load_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::generate(7, 2, 1).unwrap().save(dir.path()).unwrap();
        let victim = dir.path().join("train_00001.rksm");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&victim, bytes).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
