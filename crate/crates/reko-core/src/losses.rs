//! Contrastive and baseline distillation losses over bottleneck regions.
//!
//! Embeddings come from frozen random linear projection heads: the heads are
//! drawn once per run from a seeded RNG, never updated, and act purely as a
//! fixed measurement basis, so contrastive similarities are meaningful
//! without adding trainable parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_map, gather_regions, AttentionSource, FeatureMap, RegionSet};
use crate::tensor::{Graph, TensorId};
use crate::{Error, Result};

/// Distillation objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Contrastive loss restricted to the teacher's top-K attention regions.
    Reko,
    /// Contrastive loss over all regions (no region selection).
    RegionDis,
    /// Mean squared embedding distance over the top-K regions.
    L2Regions,
    /// Mean absolute error between student and teacher output images.
    HintonL1,
    /// Squared distance between normalized attention maps.
    AttentionTransfer,
    /// No distillation term at all.
    None,
}

impl Baseline {
    pub fn all() -> [Baseline; 6] {
        [
            Baseline::Reko,
            Baseline::RegionDis,
            Baseline::L2Regions,
            Baseline::HintonL1,
            Baseline::AttentionTransfer,
            Baseline::None,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Reko => "reko",
            Baseline::RegionDis => "region_dis",
            Baseline::L2Regions => "l2_regions",
            Baseline::HintonL1 => "hinton_l1",
            Baseline::AttentionTransfer => "attention_transfer",
            Baseline::None => "none",
        }
    }
}

/// Knobs of the distillation objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the distillation term in the student objective.
    pub alpha: f64,
    /// Number of crucial regions selected by teacher attention.
    pub k: usize,
    /// Softmax temperature of the contrastive losses.
    pub tau: f64,
    /// Embedding dimension of the projection heads.
    pub embed_dim: usize,
    /// Whether to L2-normalize embeddings before taking dot products.
    pub normalize_embeddings: bool,
    /// Which distillation term to use.
    pub baseline: Baseline,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            k: 16,
            tau: 0.07,
            embed_dim: 64,
            normalize_embeddings: true,
            baseline: Baseline::Reko,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidArg(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArg(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidArg("embed_dim must be positive".into()));
        }
        let contrastive = matches!(self.baseline, Baseline::Reko | Baseline::RegionDis);
        if contrastive && self.k < 2 {
            return Err(Error::InvalidArg(format!(
                "contrastive losses need k >= 2 regions for negatives, got {}",
                self.k
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArg("k must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen random linear projection `[embed_dim, in_channels]`. Entries are
/// N(0,1)/sqrt(in_channels), drawn once from `seed` and never trained.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    weight: Vec<f64>,
    pub embed_dim: usize,
    pub in_channels: usize,
}

impl ProjectionHead {
    pub fn new(seed: u64, in_channels: usize, embed_dim: usize) -> Result<Self> {
        if in_channels == 0 || embed_dim == 0 {
            return Err(Error::InvalidArg("projection head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = 1.0 / (in_channels as f64).sqrt();
        let weight = (0..embed_dim * in_channels)
            .map(|_| normal.sample(&mut rng) * scale)
            .collect();
        Ok(ProjectionHead { weight, embed_dim, in_channels })
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    /// Projects `[in_channels, m]` features to `[embed_dim, m]` embeddings.
    /// The head enters the graph as an untracked constant, so no gradient
    /// ever flows into it.
    pub fn project(&self, g: &mut Graph, features: TensorId, normalize: bool) -> Result<TensorId> {
        let shape = g.shape(features);
        if shape.len() != 2 || shape[0] != self.in_channels {
            return Err(Error::Shape {
                op: "project",
                detail: format!("expected [{}, m] features, got {shape:?}", self.in_channels),
            });
        }
        let w = g.constant(self.weight.clone(), &[self.embed_dim, self.in_channels])?;
        let projected = g.matmul(w, features)?;
        if normalize {
            g.l2_normalize(projected, 0)
        } else {
            Ok(projected)
        }
    }
}

/// The pair of heads used in one run, one per network, with independent
/// seeds so student and teacher embeddings are not trivially aligned.
#[derive(Clone, Debug)]
pub struct HeadPair {
    pub student: ProjectionHead,
    pub teacher: ProjectionHead,
}

impl HeadPair {
    pub fn new(student_seed: u64, teacher_seed: u64, student_channels: usize, teacher_channels: usize, embed_dim: usize) -> Result<Self> {
        Ok(HeadPair {
            student: ProjectionHead::new(student_seed, student_channels, embed_dim)?,
            teacher: ProjectionHead::new(teacher_seed, teacher_channels, embed_dim)?,
        })
    }
}

/// InfoNCE loss for one query against one positive and a set of negatives,
/// all `[d]` vectors: `-log( e^{q.p/tau} / (e^{q.p/tau} + sum_n e^{q.n/tau}) )`.
pub fn info_nce(
    g: &mut Graph,
    query: TensorId,
    positive: TensorId,
    negatives: &[TensorId],
    tau: f64,
) -> Result<TensorId> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArg(format!("tau must be > 0, got {tau}")));
    }
    if negatives.is_empty() {
        return Err(Error::InvalidArg("info_nce needs at least one negative".into()));
    }
    let d = match g.shape(query) {
        [d] => *d,
        other => {
            return Err(Error::Shape { op: "info_nce", detail: format!("query shape {other:?}") })
        }
    };
    let mut keys = Vec::with_capacity(negatives.len() + 1);
    for &v in std::iter::once(&positive).chain(negatives) {
        if g.shape(v) != [d] {
            return Err(Error::Shape {
                op: "info_nce",
                detail: format!("key shape {:?} vs query [{d}]", g.shape(v)),
            });
        }
        keys.push(g.reshape(v, &[d, 1])?);
    }
    let key_mat = g.concat_columns(&keys)?;
    let q_row = g.reshape(query, &[1, d])?;
    let logits = g.matmul(q_row, key_mat)?;
    let scaled = g.mul_scalar(logits, 1.0 / tau)?;
    let denom = g.logsumexp(scaled, 1)?;
    let pos = g.gather_columns(scaled, &[0])?;
    let pos = g.reshape(pos, &[1])?;
    g.sub(denom, pos)
}

/// Shared core of the contrastive losses: given projected student embeddings
/// `q` and teacher embeddings `k` as `[d, m]` matrices, sums, over columns
/// `i`, the InfoNCE loss of student column `i` against teacher column `i`
/// with the other teacher columns as negatives.
fn contrastive_columns(g: &mut Graph, q: TensorId, k: TensorId, tau: f64, m: usize) -> Result<TensorId> {
    let qt = g.transpose(q)?;
    let logits = g.matmul(qt, k)?;
    let scaled = g.mul_scalar(logits, 1.0 / tau)?;
    let per_query = g.logsumexp(scaled, 1)?;
    let denom_sum = g.sum(per_query, None)?;
    let mut eye = vec![0.0; m * m];
    for i in 0..m {
        eye[i * m + i] = 1.0;
    }
    let eye = g.constant(eye, &[m, m])?;
    let diagonal = g.mul(scaled, eye)?;
    let trace = g.sum(diagonal, None)?;
    g.sub(denom_sum, trace)
}

fn check_spatial_match(op: &'static str, fs: &FeatureMap, ft: &FeatureMap) -> Result<()> {
    if fs.height != ft.height || fs.width != ft.width {
        return Err(Error::Shape {
            op,
            detail: format!(
                "student grid {}x{} vs teacher grid {}x{}",
                fs.height, fs.width, ft.height, ft.width
            ),
        });
    }
    Ok(())
}

/// Contrastive distillation over all regions: every region is a query, its
/// teacher counterpart the positive, all other teacher regions negatives.
pub fn region_dis(
    g: &mut Graph,
    fs: &FeatureMap,
    ft: &FeatureMap,
    heads: &HeadPair,
    cfg: &DistillConfig,
) -> Result<TensorId> {
    check_spatial_match("region_dis", fs, ft)?;
    if !(cfg.tau.is_finite() && cfg.tau > 0.0) {
        return Err(Error::InvalidArg(format!("tau must be > 0, got {}", cfg.tau)));
    }
    let m = fs.regions();
    if m < 2 {
        return Err(Error::InvalidArg("region_dis needs at least 2 regions for negatives".into()));
    }
    let q = heads.student.project(g, fs.values, cfg.normalize_embeddings)?;
    let k = heads.teacher.project(g, ft.values, cfg.normalize_embeddings)?;
    contrastive_columns(g, q, k, cfg.tau, m)
}

/// Region-aware contrastive distillation: like [`region_dis`] but restricted
/// to the crucial regions in `regions` (chosen from teacher attention).
pub fn reko_loss(
    g: &mut Graph,
    fs: &FeatureMap,
    ft: &FeatureMap,
    regions: &RegionSet,
    heads: &HeadPair,
    cfg: &DistillConfig,
) -> Result<TensorId> {
    check_spatial_match("reko_loss", fs, ft)?;
    if !(cfg.tau.is_finite() && cfg.tau > 0.0) {
        return Err(Error::InvalidArg(format!("tau must be > 0, got {}", cfg.tau)));
    }
    if regions.k() < 2 {
        return Err(Error::InvalidArg(
            "reko_loss needs at least 2 selected regions for negatives".into(),
        ));
    }
    let fs_sel = gather_regions(g, fs, regions)?;
    let ft_sel = gather_regions(g, ft, regions)?;
    let q = heads.student.project(g, fs_sel, cfg.normalize_embeddings)?;
    let k = heads.teacher.project(g, ft_sel, cfg.normalize_embeddings)?;
    contrastive_columns(g, q, k, cfg.tau, regions.k())
}

/// Plain L2 baseline on the same embeddings as [`reko_loss`]: mean over the
/// selected regions of the squared embedding distance.
pub fn l2_regions(
    g: &mut Graph,
    fs: &FeatureMap,
    ft: &FeatureMap,
    regions: &RegionSet,
    heads: &HeadPair,
    cfg: &DistillConfig,
) -> Result<TensorId> {
    check_spatial_match("l2_regions", fs, ft)?;
    let fs_sel = gather_regions(g, fs, regions)?;
    let ft_sel = gather_regions(g, ft, regions)?;
    let q = heads.student.project(g, fs_sel, cfg.normalize_embeddings)?;
    let k = heads.teacher.project(g, ft_sel, cfg.normalize_embeddings)?;
    let diff = g.sub(q, k)?;
    let sq = g.mul(diff, diff)?;
    let per_region = g.sum(sq, Some(0))?;
    g.mean(per_region, Some(0))
}

/// Response-distillation baseline: mean absolute difference between two
/// equally shaped tensors (used on output images).
pub fn hinton_l1(g: &mut Graph, student_out: TensorId, teacher_out: TensorId) -> Result<TensorId> {
    if g.shape(student_out) != g.shape(teacher_out) {
        return Err(Error::Shape {
            op: "hinton_l1",
            detail: format!("{:?} vs {:?}", g.shape(student_out), g.shape(teacher_out)),
        });
    }
    let diff = g.sub(student_out, teacher_out)?;
    let mag = g.abs(diff)?;
    g.mean(mag, None)
}

/// Attention-transfer baseline: squared L2 distance between the two
/// L2-normalized attention maps.
pub fn attention_transfer(g: &mut Graph, fs: &FeatureMap, ft: &FeatureMap) -> Result<TensorId> {
    check_spatial_match("attention_transfer", fs, ft)?;
    let a_s = attention_map(g, fs, AttentionSource::Student)?;
    let a_t = attention_map(g, ft, AttentionSource::Teacher)?;
    let n_s = g.l2_normalize(a_s.values, 0)?;
    let n_t = g.l2_normalize(a_t.values, 0)?;
    let diff = g.sub(n_s, n_t)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq, None)
}

/// Cosine similarity of one student region's embedding against every teacher
/// region's embedding, shape `[h*w]`. Used for the similarity heatmaps.
pub fn similarity_map(
    g: &mut Graph,
    fs: &FeatureMap,
    ft: &FeatureMap,
    query_region: usize,
    heads: &HeadPair,
) -> Result<TensorId> {
    check_spatial_match("similarity_map", fs, ft)?;
    if query_region >= fs.regions() {
        return Err(Error::IndexOutOfRange {
            op: "similarity_map",
            index: query_region,
            bound: fs.regions(),
        });
    }
    let q = heads.student.project(g, fs.values, true)?;
    let k = heads.teacher.project(g, ft.values, true)?;
    let q_col = g.gather_columns(q, &[query_region])?;
    let q_row = g.transpose(q_col)?;
    let sims = g.matmul(q_row, k)?;
    g.reshape(sims, &[fs.regions()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(g: &mut Graph, data: Vec<f64>, c: usize, h: usize, w: usize, trainable: bool) -> FeatureMap {
        let values = g.leaf(data, &[c, h * w], trainable).unwrap();
        FeatureMap::new(g, values, h, w).unwrap()
    }

    #[test]
    fn head_is_deterministic_per_seed() {
        let a = ProjectionHead::new(9, 8, 4).unwrap();
        let b = ProjectionHead::new(9, 8, 4).unwrap();
        let c = ProjectionHead::new(10, 8, 4).unwrap();
        assert_eq!(a.weight(), b.weight());
        assert_ne!(a.weight(), c.weight());
    }

    #[test]
    fn head_scale_tracks_fan_in() {
        let head = ProjectionHead::new(3, 256, 64).unwrap();
        let var: f64 =
            head.weight().iter().map(|w| w * w).sum::<f64>() / head.weight().len() as f64;
        // Entries are N(0, 1/256); the sample variance should sit near it.
        assert!((var - 1.0 / 256.0).abs() < 0.2 / 256.0, "variance {var}");
    }

    #[test]
    fn projection_receives_no_gradient() {
        let mut g = Graph::new();
        let head = ProjectionHead::new(1, 3, 2).unwrap();
        let feats = g.leaf(vec![0.3, -0.1, 0.7, 0.2, 0.5, -0.4], &[3, 2], true).unwrap();
        let emb = head.project(&mut g, feats, true).unwrap();
        let s = g.sum(emb, None).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(feats).is_some());

        // With frozen features the whole graph is untracked: the head
        // contributed no trainable leaf, so backward has nothing to reach.
        let mut g2 = Graph::new();
        let feats2 = g2.leaf(vec![0.3, -0.1, 0.7, 0.2, 0.5, -0.4], &[3, 2], false).unwrap();
        let emb2 = head.project(&mut g2, feats2, true).unwrap();
        let s2 = g2.sum(emb2, None).unwrap();
        assert!(g2.backward(s2).is_err());
    }

    #[test]
    fn info_nce_equal_logits_gives_ln2() {
        // One negative, all similarities equal: loss = ln 2.
        let mut g = Graph::new();
        let q = g.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        let p = g.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let n = g.leaf(vec![0.0, 1.0], &[2], false).unwrap();
        let loss = info_nce(&mut g, q, p, &[n], 0.07).unwrap();
        assert!((g.value(loss) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn info_nce_closed_forms() {
        // tau=1, q.p = 1, two negatives with q.n = 0: ln(1 + 2 e^{-1}).
        let mut g = Graph::new();
        let q = g.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let p = g.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let n1 = g.leaf(vec![0.0, 1.0], &[2], false).unwrap();
        let n2 = g.leaf(vec![0.0, -1.0], &[2], false).unwrap();
        let loss = info_nce(&mut g, q, p, &[n1, n2], 1.0).unwrap();
        let expect = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((g.value(loss) - expect).abs() < 1e-9, "{} vs {expect}", g.value(loss));

        // Same geometry at tau=0.5 doubles the logits: ln(1 + 2 e^{-2}).
        let mut g = Graph::new();
        let q = g.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let p = g.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let n1 = g.leaf(vec![0.0, 1.0], &[2], false).unwrap();
        let n2 = g.leaf(vec![0.0, -1.0], &[2], false).unwrap();
        let loss = info_nce(&mut g, q, p, &[n1, n2], 0.5).unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((g.value(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn info_nce_rejects_bad_inputs() {
        let mut g = Graph::new();
        let q = g.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        let p = g.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        assert!(info_nce(&mut g, q, p, &[], 0.07).is_err());
        let n = g.leaf(vec![0.0, 1.0], &[2], false).unwrap();
        assert!(info_nce(&mut g, q, p, &[n], 0.0).is_err());
        assert!(info_nce(&mut g, q, p, &[n], -1.0).is_err());
    }

    #[test]
    fn reko_equals_region_dis_when_all_regions_selected() {
        let mut g = Graph::new();
        let fs = fmap(&mut g, (0..12).map(|i| (i as f64 * 0.37).sin()).collect(), 3, 2, 2, false);
        let ft = fmap(&mut g, (0..8).map(|i| (i as f64 * 0.53).cos()).collect(), 2, 2, 2, false);
        let heads = HeadPair::new(1, 2, 3, 2, 5).unwrap();
        let cfg = DistillConfig { k: 4, ..DistillConfig::default() };
        let all = RegionSet::from_indices(vec![0, 1, 2, 3], 4).unwrap();
        let a = reko_loss(&mut g, &fs, &ft, &all, &heads, &cfg).unwrap();
        let b = region_dis(&mut g, &fs, &ft, &heads, &cfg).unwrap();
        assert!((g.value(a) - g.value(b)).abs() < 1e-12);
    }

    #[test]
    fn losses_reject_mismatched_grids() {
        let mut g = Graph::new();
        let fs = fmap(&mut g, vec![0.0; 8], 2, 2, 2, false);
        let ft = fmap(&mut g, vec![0.0; 18], 2, 3, 3, false);
        let heads = HeadPair::new(1, 2, 2, 2, 4).unwrap();
        let cfg = DistillConfig { k: 2, ..DistillConfig::default() };
        let r = RegionSet::from_indices(vec![0, 1], 4).unwrap();
        assert!(region_dis(&mut g, &fs, &ft, &heads, &cfg).is_err());
        assert!(reko_loss(&mut g, &fs, &ft, &r, &heads, &cfg).is_err());
        assert!(attention_transfer(&mut g, &fs, &ft).is_err());
    }

    #[test]
    fn hinton_l1_of_identical_tensors_is_zero() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.5, -0.25, 0.75], &[3], false).unwrap();
        let b = g.leaf(vec![0.5, -0.25, 0.75], &[3], false).unwrap();
        let loss = hinton_l1(&mut g, a, b).unwrap();
        assert_eq!(g.value(loss), 0.0);
    }

    #[test]
    fn attention_transfer_zero_for_proportional_maps() {
        // Doubling all magnitudes leaves the normalized attention unchanged.
        let mut g = Graph::new();
        let fs = fmap(&mut g, vec![1.0, 2.0, 3.0, 4.0], 1, 2, 2, false);
        let ft = fmap(&mut g, vec![2.0, 4.0, 6.0, 8.0], 1, 2, 2, false);
        let loss = attention_transfer(&mut g, &fs, &ft).unwrap();
        assert!(g.value(loss).abs() < 1e-12);
    }

    #[test]
    fn similarity_map_is_bounded_and_peaks_on_match() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.3).collect();
        let fs = fmap(&mut g, data.clone(), 4, 2, 2, false);
        let ft = fmap(&mut g, data, 4, 2, 2, false);
        // Same head on both sides makes region i exactly aligned with itself.
        let head = ProjectionHead::new(5, 4, 6).unwrap();
        let heads = HeadPair { student: head.clone(), teacher: head };
        let sims = similarity_map(&mut g, &fs, &ft, 2, &heads).unwrap();
        let vals = g.data(sims);
        assert_eq!(vals.len(), 4);
        for &v in vals {
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        }
        assert!((vals[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn similarity_map_rejects_bad_query() {
        let mut g = Graph::new();
        let fs = fmap(&mut g, vec![0.1; 8], 2, 2, 2, false);
        let ft = fmap(&mut g, vec![0.1; 8], 2, 2, 2, false);
        let heads = HeadPair::new(1, 2, 2, 2, 4).unwrap();
        assert!(similarity_map(&mut g, &fs, &ft, 4, &heads).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = DistillConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.07;
        cfg.k = 1;
        assert!(cfg.validate().is_err());
        cfg.baseline = Baseline::L2Regions;
        assert!(cfg.validate().is_ok(), "k=1 is fine for non-contrastive losses");
        cfg.alpha = f64::NAN;
        assert!(cfg.validate().is_err());
    }
}
