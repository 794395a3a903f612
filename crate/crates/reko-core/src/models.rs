//! Toy encoder-decoder generators and a patch discriminator.
//!
//! A generator halves the spatial size `depth` times with strided 3x3 convs,
//! applies two residual blocks at the bottleneck, then mirrors back up with
//! stride-2 transposed convs and a tanh output. Teacher and student share
//! this architecture and differ only in channel width, so the bottleneck
//! grids align region-for-region and distillation can compare them directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;

use crate::attention::FeatureMap;
use crate::tensor::checkpoint;
use crate::tensor::{Graph, TensorId};
use crate::{Error, Result};

const RESIDUAL_BLOCKS: usize = 2;

/// Architecture of a generator; teacher and student differ only in
/// `base_width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Channel count after the first encoder conv; doubles per stage.
    pub base_width: usize,
    /// Number of downsampling stages (and upsampling stages).
    pub depth: usize,
    /// Side length of the square input and output images.
    pub image_size: usize,
    /// Image channel count.
    pub in_channels: usize,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 2 {
            return Err(Error::InvalidArg(format!(
                "base_width must be at least 2, got {}",
                self.base_width
            )));
        }
        if self.depth == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArg("depth and in_channels must be positive".into()));
        }
        let down = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::InvalidArg(format!(
                "image_size {} is not divisible by 2^depth = {down}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Channel count at the bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_width << (self.depth - 1)
    }

    /// Side length of the bottleneck grid.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }

    /// Expected parameter names and shapes, in binding order.
    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut ci = self.in_channels;
        for i in 0..self.depth {
            let co = self.base_width << i;
            out.push((format!("enc{i}.weight"), vec![co, ci, 3, 3]));
            out.push((format!("enc{i}.bias"), vec![co]));
            ci = co;
        }
        let cb = self.bottleneck_channels();
        for j in 0..RESIDUAL_BLOCKS {
            for s in 0..2 {
                out.push((format!("res{j}.conv{s}.weight"), vec![cb, cb, 3, 3]));
                out.push((format!("res{j}.conv{s}.bias"), vec![cb]));
            }
        }
        let mut c = cb;
        for i in 0..self.depth {
            let co = if i + 1 == self.depth { self.in_channels } else { c / 2 };
            out.push((format!("dec{i}.weight"), vec![c, co, 4, 4]));
            out.push((format!("dec{i}.bias"), vec![co]));
            c = co;
        }
        out
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn init_params(specs: &[(String, Vec<usize>)], seed: u64) -> Vec<Param> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    specs
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                // He-style init: weight shapes are [co|ci, c, kh, kw] and the
                // receptive fan-in is c*kh*kw for both conv layouts.
                let fan_in: usize = shape[1] * shape[2] * shape[3];
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| normal.sample(&mut rng) * std).collect()
            };
            Param { name: name.clone(), shape: shape.clone(), data }
        })
        .collect()
}

/// Encoder-decoder generator with concrete parameter values.
#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: Vec<Param>,
}

/// Graph handles for one binding of a model's parameters.
pub struct Bound {
    pub ids: Vec<TensorId>,
}

impl Generator {
    /// Builds a freshly initialized generator.
    pub fn build(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec.param_specs(), seed);
        Ok(Generator { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Inserts every parameter into `g` as a leaf; `trainable` controls
    /// whether gradients will flow into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.data.clone(), &p.shape, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { ids })
    }

    /// Runs the network on one `[in_channels, s, s]` image, returning the
    /// translated image and the bottleneck feature map.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: TensorId) -> Result<(TensorId, FeatureMap)> {
        let s = self.spec.image_size;
        let expect = [self.spec.in_channels, s, s];
        if g.shape(input) != expect {
            return Err(Error::Shape {
                op: "generator_forward",
                detail: format!("input {:?}, expected {expect:?}", g.shape(input)),
            });
        }
        let mut ids = bound.ids.iter().copied();
        let mut next = || ids.next().expect("binding matches param_specs");

        let mut x = input;
        for _ in 0..self.spec.depth {
            let (w, b) = (next(), next());
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.leaky_relu(x)?;
        }
        for _ in 0..RESIDUAL_BLOCKS {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let mut r = g.conv2d(x, w1, Some(b1), 1, 1)?;
            r = g.leaky_relu(r)?;
            r = g.conv2d(r, w2, Some(b2), 1, 1)?;
            x = g.add(x, r)?;
            x = g.leaky_relu(x)?;
        }
        let bs = self.spec.bottleneck_size();
        let cb = self.spec.bottleneck_channels();
        let flat = g.reshape(x, &[cb, bs * bs])?;
        let features = FeatureMap::new(g, flat, bs, bs)?;

        for i in 0..self.spec.depth {
            let (w, b) = (next(), next());
            x = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
            x = if i + 1 == self.spec.depth { g.tanh(x)? } else { g.leaky_relu(x)? };
        }
        Ok((x, features))
    }

    /// Convenience forward without gradient tracking: returns the output
    /// image and bottleneck features as plain buffers.
    pub fn run(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let s = self.spec.image_size;
        let x = g.constant(input.to_vec(), &[self.spec.in_channels, s, s])?;
        let bound = self.bind(&mut g, false)?;
        let (out, feat) = self.forward(&mut g, &bound, x)?;
        Ok((g.data(out).to_vec(), g.data(feat.values).to_vec()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(dir, "generator", json!(self.spec), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (spec_value, params) = load_params(dir, "generator")?;
        let manifest_path = dir.join("manifest.json");
        let spec: GeneratorSpec = serde_json::from_value(spec_value)
            .map_err(|e| Error::Json { path: manifest_path.clone(), source: e })?;
        spec.validate()?;
        check_param_layout(&manifest_path, &spec.param_specs(), &params)?;
        Ok(Generator { spec, params })
    }
}

/// Architecture of the patch discriminator used in adversarial mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub base_width: usize,
    pub depth: usize,
    pub image_size: usize,
    pub in_channels: usize,
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 2 || self.depth == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArg("discriminator spec fields must be positive".into()));
        }
        let down = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::InvalidArg(format!(
                "image_size {} is not divisible by 2^depth = {down}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut ci = self.in_channels;
        for i in 0..self.depth {
            let co = self.base_width << i;
            out.push((format!("dsc{i}.weight"), vec![co, ci, 3, 3]));
            out.push((format!("dsc{i}.bias"), vec![co]));
            ci = co;
        }
        out.push(("head.weight".to_string(), vec![1, ci, 3, 3]));
        out.push(("head.bias".to_string(), vec![1]));
        out
    }
}

/// Patch discriminator: stride-2 convs down to a grid of realness scores
/// (no sigmoid; losses are least-squares).
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub params: Vec<Param>,
}

impl Discriminator {
    pub fn build(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec.param_specs(), seed);
        Ok(Discriminator { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.data.clone(), &p.shape, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { ids })
    }

    /// Scores one image, returning a `[1, s/2^depth, s/2^depth]` patch grid.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: TensorId) -> Result<TensorId> {
        let s = self.spec.image_size;
        let expect = [self.spec.in_channels, s, s];
        if g.shape(input) != expect {
            return Err(Error::Shape {
                op: "discriminator_forward",
                detail: format!("input {:?}, expected {expect:?}", g.shape(input)),
            });
        }
        let mut ids = bound.ids.iter().copied();
        let mut next = || ids.next().expect("binding matches param_specs");
        let mut x = input;
        for _ in 0..self.spec.depth {
            let (w, b) = (next(), next());
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.leaky_relu(x)?;
        }
        let (w, b) = (next(), next());
        g.conv2d(x, w, Some(b), 1, 1)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(dir, "discriminator", json!(self.spec), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (spec_value, params) = load_params(dir, "discriminator")?;
        let manifest_path = dir.join("manifest.json");
        let spec: DiscriminatorSpec = serde_json::from_value(spec_value)
            .map_err(|e| Error::Json { path: manifest_path.clone(), source: e })?;
        spec.validate()?;
        check_param_layout(&manifest_path, &spec.param_specs(), &params)?;
        Ok(Discriminator { spec, params })
    }
}

fn check_param_layout(
    manifest: &Path,
    expected: &[(String, Vec<usize>)],
    params: &[Param],
) -> Result<()> {
    if expected.len() != params.len() {
        return Err(Error::format(
            manifest,
            format!("{} params on disk, architecture needs {}", params.len(), expected.len()),
        ));
    }
    for ((name, shape), p) in expected.iter().zip(params) {
        if &p.name != name || &p.shape != shape {
            return Err(Error::format(
                manifest,
                format!(
                    "param mismatch: disk has {} {:?}, architecture needs {name} {shape:?}",
                    p.name, p.shape
                ),
            ));
        }
    }
    Ok(())
}

/// Writes `manifest.json` plus one tensor file per parameter into `dir`.
pub fn save_params(dir: &Path, kind: &str, spec: serde_json::Value, params: &[Param]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for p in params {
        let file = format!("{}.rktn", p.name);
        let path = dir.join(&file);
        checkpoint::write_tensor(&path, &p.shape, &p.data)?;
        let sha = checkpoint::sha256_file(&path)?;
        entries.push(json!({ "name": p.name, "file": file, "shape": p.shape, "sha256": sha }));
    }
    let manifest = json!({
        "format_version": 1,
        "kind": kind,
        "spec": spec,
        "params": entries,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint directory written by [`save_params`], verifying kind,
/// per-file checksums and tensor shapes.
pub fn load_params(dir: &Path, expected_kind: &str) -> Result<(serde_json::Value, Vec<Param>)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if manifest["format_version"] != 1 {
        return Err(Error::format(&path, format!("unsupported format_version {}", manifest["format_version"])));
    }
    if manifest["kind"] != expected_kind {
        return Err(Error::format(
            &path,
            format!("kind {} where {expected_kind} was expected", manifest["kind"]),
        ));
    }
    let entries = manifest["params"]
        .as_array()
        .ok_or_else(|| Error::format(&path, "params is not an array"))?;
    let mut params = Vec::with_capacity(entries.len());
    for e in entries {
        let name = e["name"]
            .as_str()
            .ok_or_else(|| Error::format(&path, "param entry without name"))?;
        let file = e["file"]
            .as_str()
            .ok_or_else(|| Error::format(&path, format!("param {name} without file")))?;
        let tensor_path = dir.join(file);
        let sha = checkpoint::sha256_file(&tensor_path)?;
        if e["sha256"] != sha.as_str() {
            return Err(Error::format(
                &tensor_path,
                format!("checksum mismatch (manifest {}, file {sha})", e["sha256"]),
            ));
        }
        let (shape, data) = checkpoint::read_tensor(&tensor_path)?;
        params.push(Param { name: name.to_string(), shape, data });
    }
    Ok((manifest["spec"].clone(), params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> GeneratorSpec {
        GeneratorSpec { base_width: 2, depth: 2, image_size: 16, in_channels: 3 }
    }

    #[test]
    fn forward_shapes_line_up() {
        let spec = tiny_spec();
        let gen = Generator::build(spec, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![0.1; 3 * 16 * 16], &[3, 16, 16]).unwrap();
        let bound = gen.bind(&mut g, false).unwrap();
        let (out, feat) = gen.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(out), &[3, 16, 16]);
        assert_eq!(g.shape(feat.values), &[4, 16]);
        assert_eq!(feat.height, 4);
        assert_eq!(feat.width, 4);
        // tanh output stays strictly inside [-1, 1]
        assert!(g.data(out).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn default_widths_give_large_compression_ratio() {
        let teacher = Generator::build(
            GeneratorSpec { base_width: 32, depth: 3, image_size: 64, in_channels: 3 },
            1,
        )
        .unwrap();
        let student = Generator::build(
            GeneratorSpec { base_width: 8, depth: 3, image_size: 64, in_channels: 3 },
            2,
        )
        .unwrap();
        let ratio = teacher.param_count() as f64 / student.param_count() as f64;
        assert!(
            (14.0..18.0).contains(&ratio),
            "teacher {} / student {} = {ratio}",
            teacher.param_count(),
            student.param_count()
        );
    }

    #[test]
    fn spec_rejects_indivisible_image_size() {
        let spec = GeneratorSpec { base_width: 4, depth: 3, image_size: 36, in_channels: 3 };
        assert!(spec.validate().is_err());
        assert!(Generator::build(spec, 1).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let gen = Generator::build(tiny_spec(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 3 * 8 * 8], &[3, 8, 8]).unwrap();
        let bound = gen.bind(&mut g, false).unwrap();
        assert!(gen.forward(&mut g, &bound, x).is_err());
    }

    #[test]
    fn same_seed_same_params_different_seed_different() {
        let a = Generator::build(tiny_spec(), 7).unwrap();
        let b = Generator::build(tiny_spec(), 7).unwrap();
        let c = Generator::build(tiny_spec(), 8).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.data, pb.data);
        }
        assert!(a.params.iter().zip(&c.params).any(|(pa, pc)| pa.data != pc.data));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let gen = Generator::build(tiny_spec(), 3).unwrap();
        gen.save(dir.path()).unwrap();
        let back = Generator::load(dir.path()).unwrap();
        assert_eq!(back.spec, gen.spec);
        for (a, b) in gen.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let gen = Generator::build(tiny_spec(), 3).unwrap();
        gen.save(dir.path()).unwrap();
        // Flip one payload byte in some tensor file.
        let victim = dir.path().join("enc0.weight.rktn");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&victim, bytes).unwrap();
        assert!(Generator::load(dir.path()).is_err());
    }

    #[test]
    fn discriminator_scores_patch_grid() {
        let spec = DiscriminatorSpec { base_width: 4, depth: 2, image_size: 16, in_channels: 3 };
        let d = Discriminator::build(spec, 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![0.2; 3 * 16 * 16], &[3, 16, 16]).unwrap();
        let bound = d.bind(&mut g, false).unwrap();
        let score = d.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(score), &[1, 4, 4]);
    }

    #[test]
    fn load_rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DiscriminatorSpec { base_width: 4, depth: 2, image_size: 16, in_channels: 3 };
        Discriminator::build(spec, 5).unwrap().save(dir.path()).unwrap();
        assert!(Generator::load(dir.path()).is_err());
    }
}
