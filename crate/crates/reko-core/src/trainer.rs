//! Training drivers: teacher pretraining, student distillation, the
//! ablation grid and the sensitivity sweep.
//!
//! Every run is fully determined by its config and seed: parameter init,
//! shuffling, projection heads and the (frozen) teacher all draw from
//! disjoint streams of the run seed, and the teacher's per-sample outputs,
//! bottleneck features and crucial regions are computed once per run and
//! cached — the teacher never changes during distillation, so caching is
//! observationally identical to recomputing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{top_k_indices, FeatureMap, RegionSet};
use crate::config::ModelConfig;
use crate::eval::{self, QualityMetrics};
use crate::losses::{self, Baseline, DistillConfig, HeadPair};
use crate::models::{Bound, Discriminator, Generator, Param};
use crate::synth::{Dataset, Sample, CHANNELS, IMAGE_SIZE};
use crate::tensor::{Graph, TensorId};
use crate::{derive_seed, par, seeds, Error, Result};

/// Optimization and objective parameters for one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Adds an LSGAN patch-discriminator term to the task loss.
    pub adversarial: bool,
    /// Weight of the adversarial term inside the task loss.
    pub adv_weight: f64,
    /// Evaluate on the eval split every this many epochs.
    pub eval_every: usize,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 1,
            adversarial: false,
            adv_weight: 0.1,
            eval_every: 2,
            distill: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArg(
                "epochs, batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArg(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArg(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adv_weight.is_finite() && self.adv_weight >= 0.0) {
            return Err(Error::InvalidArg("adv_weight must be >= 0".into()));
        }
        self.distill.validate()
    }

    /// Whether the distillation term is active at all.
    pub fn distill_active(&self) -> bool {
        self.distill.alpha > 0.0 && self.distill.baseline != Baseline::None
    }
}

/// Adam optimizer state over a parameter list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, params: &[Param]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// One update. `grads[i]` pairs with `params[i]`; a `None` gradient
    /// leaves that parameter untouched.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<&[f64]>]) -> Result<()> {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(grad) = grad else { continue };
            for i in 0..param.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if !param.data[i].is_finite() {
                    return Err(Error::Train(format!(
                        "parameter {} diverged to a non-finite value",
                        param.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loss composition of one epoch, averaged over the train split.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_task: f64,
    pub loss_distill: f64,
    pub loss_adversarial: f64,
    pub loss_total: f64,
}

/// Eval-split metrics at one point of training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub foreground_mse: f64,
    pub background_mse: f64,
    pub psnr_db: f64,
}

impl EvalPoint {
    fn new(epoch: usize, q: QualityMetrics) -> Self {
        EvalPoint {
            epoch,
            foreground_mse: q.foreground_mse,
            background_mse: q.background_mse,
            psnr_db: q.psnr_db,
        }
    }
}

/// Full log of one training run. Contains no timing information, so two
/// runs of the same config and seed produce byte-identical records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    /// What was trained: `teacher`, or the distillation baseline name.
    pub label: String,
    pub seed: u64,
    /// Metrics of the freshly initialized model, before any step.
    pub init_eval: EvalPoint,
    pub epochs: Vec<EpochStats>,
    /// Eval-split metrics every `eval_every` epochs plus the final epoch.
    pub evals: Vec<EvalPoint>,
}

impl RunRecord {
    pub fn final_eval(&self) -> &EvalPoint {
        self.evals.last().expect("training ran at least one epoch")
    }

    /// Foreground-MSE eval curve (excluding the init point).
    pub fn eval_curve(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.foreground_mse).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
    }
}

/// Per-sample teacher signals, computed once per distillation run. The
/// teacher is frozen, so its forward pass is a pure function of the input
/// and caching cannot change any result.
pub struct TeacherCache {
    pub outputs: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub regions: Vec<RegionSet>,
    pub channels: usize,
    pub grid: usize,
}

impl TeacherCache {
    pub fn build(teacher: &Generator, samples: &[Sample], k: usize) -> Result<Self> {
        let grid = teacher.spec.bottleneck_size();
        let channels = teacher.spec.bottleneck_channels();
        let m = grid * grid;
        if k > m {
            return Err(Error::InvalidArg(format!(
                "k = {k} exceeds the {m} bottleneck regions"
            )));
        }
        let per_sample: Vec<Result<(Vec<f64>, Vec<f64>, RegionSet)>> =
            par::par_map(samples, |s| {
                let (out, feat) = teacher.run(&s.input)?;
                let attention = attention_from_features(&feat, channels, m);
                let indices = top_k_indices(&attention, k)?;
                Ok((out, feat, RegionSet::from_indices(indices, m)?))
            });
        let mut outputs = Vec::with_capacity(samples.len());
        let mut features = Vec::with_capacity(samples.len());
        let mut regions = Vec::with_capacity(samples.len());
        for r in per_sample {
            let (o, f, reg) = r?;
            outputs.push(o);
            features.push(f);
            regions.push(reg);
        }
        Ok(TeacherCache { outputs, features, regions, channels, grid })
    }
}

/// Channel-mean absolute activation per region, on raw buffers (the
/// graph-free twin of the attention op, used for cached teacher features).
pub fn attention_from_features(features: &[f64], channels: usize, regions: usize) -> Vec<f64> {
    debug_assert_eq!(features.len(), channels * regions);
    let mut out = vec![0.0; regions];
    for c in 0..channels {
        for r in 0..regions {
            out[r] += features[c * regions + r].abs();
        }
    }
    let inv = 1.0 / channels as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Projection heads for a run seed; both sides get independent streams.
pub fn heads_for_run(seed: u64, model: &ModelConfig, distill: &DistillConfig) -> Result<HeadPair> {
    HeadPair::new(
        derive_seed(seed, seeds::HEAD_STUDENT),
        derive_seed(seed, seeds::HEAD_TEACHER),
        model.student_spec().bottleneck_channels(),
        model.teacher_spec().bottleneck_channels(),
        distill.embed_dim,
    )
}

fn mean_of(g: &mut Graph, terms: &[TensorId]) -> Result<TensorId> {
    debug_assert!(!terms.is_empty());
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.mul_scalar(acc, 1.0 / terms.len() as f64)
}

fn image_constant(g: &mut Graph, image: &[f64]) -> Result<TensorId> {
    g.constant(image.to_vec(), &[CHANNELS, IMAGE_SIZE, IMAGE_SIZE])
}

/// Mean squared deviation of a score grid from a constant target; the
/// least-squares GAN criterion.
fn lsgan_term(g: &mut Graph, scores: TensorId, target: f64) -> Result<TensorId> {
    let shifted = g.add_scalar(scores, -target)?;
    let sq = g.mul(shifted, shifted)?;
    g.mean(sq, None)
}

fn collect_grads<'g>(g: &'g Graph, bound: &Bound) -> Vec<Option<&'g [f64]>> {
    bound.ids.iter().map(|&id| g.grad(id)).collect()
}

/// Extracts the distillation term for one sample, given the student's
/// bottleneck features and the cached teacher signals.
#[allow(clippy::too_many_arguments)]
fn distill_term(
    g: &mut Graph,
    cfg: &DistillConfig,
    heads: &HeadPair,
    student_out: TensorId,
    student_feat: &FeatureMap,
    cache: &TeacherCache,
    sample_idx: usize,
) -> Result<TensorId> {
    let m = cache.grid * cache.grid;
    let ft_values = g.constant(cache.features[sample_idx].clone(), &[cache.channels, m])?;
    let ft = FeatureMap::new(g, ft_values, cache.grid, cache.grid)?;
    match cfg.baseline {
        Baseline::Reko => {
            losses::reko_loss(g, student_feat, &ft, &cache.regions[sample_idx], heads, cfg)
        }
        Baseline::RegionDis => losses::region_dis(g, student_feat, &ft, heads, cfg),
        Baseline::L2Regions => {
            losses::l2_regions(g, student_feat, &ft, &cache.regions[sample_idx], heads, cfg)
        }
        Baseline::HintonL1 => {
            let t_out = image_constant(g, &cache.outputs[sample_idx])?;
            losses::hinton_l1(g, student_out, t_out)
        }
        Baseline::AttentionTransfer => losses::attention_transfer(g, student_feat, &ft),
        Baseline::None => unreachable!("inactive distillation is filtered by the caller"),
    }
}

/// Everything one epoch accumulates for the record.
#[derive(Default, Clone, Copy)]
struct LossAccum {
    task: f64,
    distill: f64,
    adv: f64,
    total: f64,
    n: usize,
}

impl LossAccum {
    fn add(&mut self, task: f64, distill: f64, adv: f64, total: f64, n: usize) {
        self.task += task * n as f64;
        self.distill += distill * n as f64;
        self.adv += adv * n as f64;
        self.total += total * n as f64;
        self.n += n;
    }

    fn stats(&self, epoch: usize) -> EpochStats {
        let inv = 1.0 / self.n.max(1) as f64;
        EpochStats {
            epoch,
            loss_task: self.task * inv,
            loss_distill: self.distill * inv,
            loss_adversarial: self.adv * inv,
            loss_total: self.total * inv,
        }
    }
}

/// The trainable network of a run plus its optional distillation context.
enum RunKind<'a> {
    Teacher,
    Student { cache: &'a TeacherCache, heads: &'a HeadPair },
}

/// Shared teacher/student training loop. Returns the trained model, the
/// optional discriminator and the run record.
fn train_loop(
    mut model: Generator,
    mut disc: Option<Discriminator>,
    cfg: &TrainConfig,
    data: &Dataset,
    kind: RunKind<'_>,
    label: &str,
) -> Result<(Generator, Option<Discriminator>, RunRecord)> {
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, &model.params);
    let mut opt_d = disc
        .as_ref()
        .map(|d| Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, &d.params));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, seeds::SHUFFLE));

    let init_eval = EvalPoint::new(0, eval::quality_metrics(&model, &data.eval)?);
    let mut record = RunRecord {
        label: label.to_string(),
        seed: cfg.seed,
        init_eval,
        epochs: Vec::with_capacity(cfg.epochs),
        evals: Vec::new(),
    };

    let distill_on = matches!(kind, RunKind::Student { .. }) && cfg.distill_active();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut accum = LossAccum::default();
        for batch in order.chunks(cfg.batch_size) {
            let step = train_batch(
                &mut model,
                disc.as_mut(),
                &mut opt,
                opt_d.as_mut(),
                cfg,
                data,
                batch,
                &kind,
                distill_on,
            )
            .map_err(|e| match e {
                Error::Train(msg) => Error::Train(format!("epoch {epoch}: {msg}")),
                other => Error::Train(format!("epoch {epoch}: {other}")),
            })?;
            accum.add(step.0, step.1, step.2, step.3, batch.len());
        }
        record.epochs.push(accum.stats(epoch));
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let q = eval::quality_metrics(&model, &data.eval)?;
            record.evals.push(EvalPoint::new(epoch, q));
        }
    }
    Ok((model, disc, record))
}

/// One optimizer step over a batch. Returns the batch means of
/// (task, distill, adversarial, total) losses.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut Generator,
    mut disc: Option<&mut Discriminator>,
    opt: &mut Adam,
    opt_d: Option<&mut Adam>,
    cfg: &TrainConfig,
    data: &Dataset,
    batch: &[usize],
    kind: &RunKind<'_>,
    distill_on: bool,
) -> Result<(f64, f64, f64, f64)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let bound_d = match disc.as_deref() {
        Some(d) => Some(d.bind(&mut g, false)?),
        None => None,
    };

    let mut task_terms = Vec::with_capacity(batch.len());
    let mut distill_terms = Vec::with_capacity(batch.len());
    let mut adv_terms = Vec::with_capacity(batch.len());
    let mut fakes: Vec<Vec<f64>> = Vec::new();

    for &i in batch {
        let sample = &data.train[i];
        let x = image_constant(&mut g, &sample.input)?;
        let target = image_constant(&mut g, &sample.target)?;
        let (out, feat) = model.forward(&mut g, &bound, x)?;
        task_terms.push(losses::hinton_l1(&mut g, out, target)?);
        if distill_on {
            let RunKind::Student { cache, heads } = kind else { unreachable!() };
            distill_terms.push(distill_term(&mut g, &cfg.distill, heads, out, &feat, cache, i)?);
        }
        if let (Some(d), Some(bd)) = (disc.as_deref(), bound_d.as_ref()) {
            let scores = d.forward(&mut g, bd, out)?;
            adv_terms.push(lsgan_term(&mut g, scores, 1.0)?);
            fakes.push(g.data(out).to_vec());
        }
    }

    let task = mean_of(&mut g, &task_terms)?;
    let mut total = task;
    let distill_mean = if distill_on {
        let d = mean_of(&mut g, &distill_terms)?;
        let weighted = g.mul_scalar(d, cfg.distill.alpha)?;
        total = g.add(total, weighted)?;
        Some(d)
    } else {
        None
    };
    let adv_mean = if adv_terms.is_empty() {
        None
    } else {
        let a = mean_of(&mut g, &adv_terms)?;
        let weighted = g.mul_scalar(a, cfg.adv_weight)?;
        total = g.add(total, weighted)?;
        Some(a)
    };

    let task_v = g.value(task);
    let distill_v = distill_mean.map_or(0.0, |d| g.value(d));
    let adv_v = adv_mean.map_or(0.0, |a| g.value(a));
    let total_v = g.value(total);

    g.backward(total)?;
    let grads = collect_grads(&g, &bound);
    opt.step(&mut model.params, &grads)?;

    // Discriminator step, against the generator outputs from before this
    // update (both nets advance from the same observed state).
    if let (Some(d), Some(opt_d)) = (disc.as_deref_mut(), opt_d) {
        let mut gd = Graph::new();
        let bd = d.bind(&mut gd, true)?;
        let mut terms = Vec::with_capacity(batch.len() * 2);
        for (&i, fake) in batch.iter().zip(&fakes) {
            let real = image_constant(&mut gd, &data.train[i].target)?;
            let fake = gd.constant(fake.clone(), &[CHANNELS, IMAGE_SIZE, IMAGE_SIZE])?;
            let real_scores = d.forward(&mut gd, &bd, real)?;
            let fake_scores = d.forward(&mut gd, &bd, fake)?;
            let real_term = lsgan_term(&mut gd, real_scores, 1.0)?;
            let fake_term = lsgan_term(&mut gd, fake_scores, 0.0)?;
            let pair = gd.add(real_term, fake_term)?;
            terms.push(gd.mul_scalar(pair, 0.5)?);
        }
        let loss_d = mean_of(&mut gd, &terms)?;
        gd.backward(loss_d)?;
        let grads_d = collect_grads(&gd, &bd);
        opt_d.step(&mut d.params, &grads_d)?;
    }

    Ok((task_v, distill_v, adv_v, total_v))
}

/// Trains a fresh teacher on the paired task.
pub fn train_teacher(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
) -> Result<(Generator, Option<Discriminator>, RunRecord)> {
    cfg.validate()?;
    model_cfg.validate()?;
    let teacher = Generator::build(model_cfg.teacher_spec(), derive_seed(cfg.seed, seeds::TEACHER_INIT))?;
    let disc = if cfg.adversarial {
        Some(Discriminator::build(model_cfg.disc_spec(), derive_seed(cfg.seed, seeds::DISC_INIT))?)
    } else {
        None
    };
    train_loop(teacher, disc, cfg, data, RunKind::Teacher, "teacher")
}

/// Result of one distillation run.
pub struct DistillOutcome {
    pub student: Generator,
    pub discriminator: Option<Discriminator>,
    pub record: RunRecord,
}

/// Distills a fresh student against a frozen teacher.
pub fn distill_student(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
    teacher: &Generator,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let student_spec = model_cfg.student_spec();
    if teacher.spec.bottleneck_size() != student_spec.bottleneck_size()
        || teacher.spec.image_size != student_spec.image_size
    {
        return Err(Error::InvalidArg(format!(
            "teacher bottleneck {}x{} (image {}) does not match student {}x{} (image {})",
            teacher.spec.bottleneck_size(),
            teacher.spec.bottleneck_size(),
            teacher.spec.image_size,
            student_spec.bottleneck_size(),
            student_spec.bottleneck_size(),
            student_spec.image_size,
        )));
    }
    let student = Generator::build(student_spec, derive_seed(cfg.seed, seeds::STUDENT_INIT))?;
    let disc = if cfg.adversarial {
        Some(Discriminator::build(model_cfg.disc_spec(), derive_seed(cfg.seed, seeds::DISC_INIT))?)
    } else {
        None
    };
    let heads = heads_for_run(cfg.seed, model_cfg, &cfg.distill)?;
    let label = cfg.distill.baseline.name().to_string();
    if cfg.distill_active() {
        let cache = TeacherCache::build(teacher, &data.train, cfg.distill.k)?;
        let (student, disc, record) = train_loop(
            student,
            disc,
            cfg,
            data,
            RunKind::Student { cache: &cache, heads: &heads },
            &label,
        )?;
        Ok(DistillOutcome { student, discriminator: disc, record })
    } else {
        // Inactive distillation takes the exact code path of plain training,
        // so an alpha = 0 run is bit-identical to baseline "none".
        let (student, disc, record) = train_loop(student, disc, cfg, data, RunKind::Teacher, &label)?;
        Ok(DistillOutcome { student, discriminator: disc, record })
    }
}

/// One cell of the 2x2 ablation grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    /// `none`, `cd_only` (contrastive, all regions), `cr_only` (crucial
    /// regions, plain L2) or `cr_cd` (both: the full method).
    pub cell: String,
    pub baseline: String,
    pub record: RunRecord,
}

/// Runs the 2x2 grid over {crucial regions} x {contrastive loss}.
pub fn run_ablation_grid(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
    teacher: &Generator,
) -> Result<Vec<AblationCell>> {
    let cells = [
        ("none", Baseline::None),
        ("cd_only", Baseline::RegionDis),
        ("cr_only", Baseline::L2Regions),
        ("cr_cd", Baseline::Reko),
    ];
    let outcomes = par::par_map(&cells, |(cell, baseline)| -> Result<AblationCell> {
        let mut c = *cfg;
        c.distill.baseline = *baseline;
        let outcome = distill_student(&c, model_cfg, data, teacher)?;
        Ok(AblationCell {
            cell: cell.to_string(),
            baseline: baseline.name().to_string(),
            record: outcome.record,
        })
    });
    outcomes.into_iter().collect()
}

/// One point of the sensitivity sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub k: usize,
    pub final_foreground_mse: f64,
    pub record: RunRecord,
}

/// Trains the full (alpha, k) grid with the run seed held fixed.
pub fn run_sensitivity_sweep(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
    teacher: &Generator,
    alphas: &[f64],
    ks: &[usize],
) -> Result<Vec<SweepPoint>> {
    if alphas.is_empty() || ks.is_empty() {
        return Err(Error::InvalidArg("sweep grids must be non-empty".into()));
    }
    let grid: Vec<(f64, usize)> = alphas
        .iter()
        .flat_map(|&a| ks.iter().map(move |&k| (a, k)))
        .collect();
    let outcomes = par::par_map(&grid, |&(alpha, k)| -> Result<SweepPoint> {
        let mut c = *cfg;
        c.distill.alpha = alpha;
        c.distill.k = k;
        c.distill.baseline = Baseline::Reko;
        let outcome = distill_student(&c, model_cfg, data, teacher)?;
        Ok(SweepPoint {
            alpha,
            k,
            final_foreground_mse: outcome.record.final_eval().foreground_mse,
            record: outcome.record,
        })
    });
    outcomes.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GeneratorSpec;

    fn tiny_model() -> ModelConfig {
        ModelConfig { teacher_width: 4, student_width: 2, depth: 3, image_size: 64, disc_width: 2 }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            eval_every: 1,
            seed,
            distill: DistillConfig { k: 4, ..DistillConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        Dataset::generate(3, 8, 2).unwrap()
    }

    #[test]
    fn adam_moves_toward_minimum() {
        // Minimize (x - 3)^2 by gradient descent with Adam.
        let mut params = vec![Param { name: "x".into(), shape: vec![1], data: vec![0.0] }];
        let mut opt = Adam::new(0.1, 0.9, 0.999, &params);
        for _ in 0..500 {
            let g = 2.0 * (params[0].data[0] - 3.0);
            opt.step(&mut params, &[Some(&[g])]).unwrap();
        }
        assert!((params[0].data[0] - 3.0).abs() < 1e-2, "got {}", params[0].data[0]);
    }

    #[test]
    fn adam_skips_missing_gradients() {
        let mut params = vec![Param { name: "x".into(), shape: vec![1], data: vec![1.5] }];
        let mut opt = Adam::new(0.1, 0.9, 0.999, &params);
        opt.step(&mut params, &[None]).unwrap();
        assert_eq!(params[0].data[0], 1.5);
    }

    #[test]
    fn teacher_training_reduces_loss() {
        let data = tiny_data();
        let mut cfg = tiny_train(1);
        cfg.epochs = 3;
        let (_, _, record) = train_teacher(&cfg, &tiny_model(), &data).unwrap();
        assert_eq!(record.epochs.len(), 3);
        assert!(record.epochs[2].loss_total < record.epochs[0].loss_total);
    }

    #[test]
    fn identical_seeds_reproduce_parameters_bitwise() {
        let data = tiny_data();
        let cfg = tiny_train(9);
        let model = tiny_model();
        let (a, _, ra) = train_teacher(&cfg, &model, &data).unwrap();
        let (b, _, rb) = train_teacher(&cfg, &model, &data).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            for (x, y) in pa.data.iter().zip(&pb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(
            serde_json::to_string(&ra).unwrap(),
            serde_json::to_string(&rb).unwrap()
        );
    }

    #[test]
    fn zero_alpha_matches_no_distill_bitwise() {
        let data = tiny_data();
        let model = tiny_model();
        let teacher = Generator::build(model.teacher_spec(), 1).unwrap();
        let mut with_alpha0 = tiny_train(5);
        with_alpha0.distill.alpha = 0.0;
        with_alpha0.distill.baseline = Baseline::Reko;
        let mut none = tiny_train(5);
        none.distill.baseline = Baseline::None;
        let a = distill_student(&with_alpha0, &model, &data, &teacher).unwrap();
        let b = distill_student(&none, &model, &data, &teacher).unwrap();
        for (pa, pb) in a.student.params.iter().zip(&b.student.params) {
            for (x, y) in pa.data.iter().zip(&pb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn distillation_records_loss_composition() {
        let data = tiny_data();
        let model = tiny_model();
        let teacher = Generator::build(model.teacher_spec(), 1).unwrap();
        let mut cfg = tiny_train(2);
        cfg.distill.alpha = 0.5;
        let outcome = distill_student(&cfg, &model, &data, &teacher).unwrap();
        let e = &outcome.record.epochs[0];
        assert!(e.loss_distill > 0.0, "contrastive loss should be positive");
        let reconstructed = e.loss_task + 0.5 * e.loss_distill;
        assert!(
            (e.loss_total - reconstructed).abs() < 1e-9,
            "total {} vs parts {reconstructed}",
            e.loss_total
        );
    }

    #[test]
    fn mismatched_bottlenecks_fail_before_training() {
        let data = tiny_data();
        let model = tiny_model();
        let other = GeneratorSpec {
            base_width: 4,
            depth: 2,
            image_size: 64,
            in_channels: 3,
        };
        let teacher = Generator::build(other, 1).unwrap();
        let err = distill_student(&tiny_train(1), &model, &data, &teacher);
        assert!(err.is_err());
    }

    #[test]
    fn adversarial_mode_trains_and_logs_gan_term() {
        let data = tiny_data();
        let model = tiny_model();
        let teacher = Generator::build(model.teacher_spec(), 1).unwrap();
        let mut cfg = tiny_train(4);
        cfg.adversarial = true;
        let outcome = distill_student(&cfg, &model, &data, &teacher).unwrap();
        assert!(outcome.discriminator.is_some());
        assert!(outcome.record.epochs[0].loss_adversarial != 0.0);
    }

    #[test]
    fn oversized_k_is_rejected_up_front() {
        let data = tiny_data();
        let model = tiny_model();
        let teacher = Generator::build(model.teacher_spec(), 1).unwrap();
        let mut cfg = tiny_train(1);
        cfg.distill.k = 65;
        assert!(distill_student(&cfg, &model, &data, &teacher).is_err());
    }
}
