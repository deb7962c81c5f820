//! Burn-In and teacher-student mutual learning.
//!
//! Burn-In trains one model on strongly augmented labeled samples and copies
//! it into both roles. Each mutual-learning step then:
//!
//! 1. runs the teacher on a weak view of every unlabeled sample, thresholds
//!    its confidences into pseudo masks and scores their quality;
//! 2. runs the student on a strong view sharing the weak view's geometry and
//!    on strongly augmented labeled samples;
//! 3. takes one Adam step on the student and moves the teacher towards it by
//!    EMA. The teacher never sees a gradient.

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{apply, apply_image, AugParams, AugPolicy};
use crate::domain::{ConfidenceMap, DatasetSplit, MaskGrid, PseudoLabel, Sample};
use crate::error::{Error, Result};
use crate::losses::{supervised_objective, unsupervised_objective, KlVariant, LossBreakdown, LossWeights};
use crate::model::{backward, forward, init_params, ArchDescriptor, ModelParams};
use crate::qla::{self, QlaConfig};
use crate::rng::{streams, substream, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::spec(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// `θ_t ← α θ_t + (1 − α) θ_s`, elementwise.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f64) -> Result<ModelParams> {
    if teacher.arch() != student.arch() {
        return Err(Error::spec("ema: teacher and student architectures differ"));
    }
    let values = teacher
        .as_slice()
        .iter()
        .zip(student.as_slice())
        .map(|(&t, &s)| alpha * t + (1.0 - alpha) * s)
        .collect();
    ModelParams::from_vec(*teacher.arch(), values)
}

/// Pixels strictly above `threshold` become foreground.
pub fn pseudo_label(conf: &ConfidenceMap, threshold: f64) -> MaskGrid {
    let (h, w) = conf.dims();
    MaskGrid::from_values(h, w, conf.as_slice().iter().map(|&v| v > threshold).collect())
        .expect("dims carried over")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub burn_in_steps: u64,
    pub ssl_steps: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub adam: AdamConfig,
    pub ema_alpha: f64,
    pub threshold: f64,
    pub weights: LossWeights,
    pub kl_variant: KlVariant,
    pub qla: QlaConfig,
    /// Apply QLA pixel and mask weights. Weights are still computed and
    /// logged when off.
    pub qla_enabled: bool,
    pub aug: AugPolicy,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            burn_in_steps: 300,
            ssl_steps: 1000,
            batch_labeled: 4,
            batch_unlabeled: 4,
            adam: AdamConfig::default(),
            ema_alpha: 0.99,
            threshold: 0.5,
            weights: LossWeights::default(),
            kl_variant: KlVariant::Bernoulli,
            qla: QlaConfig::default(),
            qla_enabled: true,
            aug: AugPolicy::default(),
            hidden: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config("ema_alpha must lie in [0, 1]".into()));
        }
        if self.batch_labeled < 1 || self.batch_unlabeled < 1 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        if self.hidden < 1 {
            return Err(Error::Config("hidden channel count must be at least 1".into()));
        }
        self.weights.validate()?;
        self.qla.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Parameters initialized, Burn-In not run.
    Initialized,
    /// Teacher and student seeded; mutual learning may run.
    Ready,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
    /// Mutual-learning steps taken (drives the τ schedule).
    pub ssl_step: u64,
    pub phase: Phase,
    pub aug_rng: Rng,
    pub batch_rng: Rng,
}

impl TrainState {
    pub fn new(arch: ArchDescriptor, cfg: &TrainConfig) -> Result<Self> {
        let student = init_params(cfg.seed, arch)?;
        Ok(TrainState {
            teacher: student.clone(),
            adam: AdamState::new(student.len()),
            student,
            ssl_step: 0,
            phase: Phase::Initialized,
            aug_rng: substream(cfg.seed, streams::AUGMENT),
            batch_rng: substream(cfg.seed, streams::BATCH),
        })
    }
}

/// Per-step metrics; serialized as one JSON line with exactly these keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_sup_bce: f64,
    pub l_sup_dice: f64,
    pub l_unsup_bce: f64,
    pub l_unsup_dice: f64,
    pub l_unsup_kl: f64,
    pub tau: f64,
    pub mean_w_pixel: f64,
    pub mean_w_mask: f64,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BurnInMetrics {
    pub step: u64,
    pub l_sup_bce: f64,
    pub l_sup_dice: f64,
}

impl BurnInMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// What happened to one unlabeled sample during a step.
#[derive(Clone, Debug)]
pub struct UnlabeledRecord {
    pub weak: AugParams,
    pub strong: AugParams,
    pub teacher_conf: Vec<ConfidenceMap>,
    /// Pseudo-labels with their QLA weights (always computed).
    pub pseudo: Vec<PseudoLabel>,
    pub student_conf: Vec<ConfidenceMap>,
    /// Phrases kept after entropy-based dropout.
    pub retained: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub metrics: StepMetrics,
    /// Batch-mean supervised breakdown.
    pub sup: LossBreakdown,
    /// Batch-mean unsupervised breakdown.
    pub unsup: LossBreakdown,
    pub unlabeled: Vec<UnlabeledRecord>,
}

fn add_into(acc: &mut [f64], g: &[f64], scale: f64) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, scale: f64) {
    acc.bce += scale * b.bce;
    acc.dice += scale * b.dice;
    acc.kl += scale * b.kl;
    acc.total += scale * b.total;
    acc.per_phrase.extend_from_slice(&b.per_phrase);
}

/// Supervised loss and gradient of one augmented labeled sample.
fn supervised_grad(
    params: &ModelParams,
    sample: &Sample,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let truth = sample
        .truth
        .as_ref()
        .ok_or_else(|| Error::spec("labeled batch contains a sample without truth"))?;
    let (preds, trace) = forward(params, &sample.image, &sample.phrases)?;
    let obj = supervised_objective(&preds, truth, weights)?;
    let grad = backward(&trace, &obj.grads)?;
    Ok((obj.breakdown, grad))
}

fn draw_batch<'a>(pool: &'a [Sample], n: usize, rng: &mut Rng) -> Vec<&'a Sample> {
    (0..n).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
}

fn arch_for(split: &DatasetSplit, cfg: &TrainConfig) -> Result<ArchDescriptor> {
    let first = split
        .labeled
        .first()
        .ok_or_else(|| Error::Config("labeled set is empty".into()))?;
    let embed = first
        .phrases
        .first()
        .map(|p| p.embedding.len())
        .ok_or_else(|| Error::Config("labeled sample without phrases".into()))?;
    let (height, width) = first.image.dims();
    Ok(ArchDescriptor {
        hidden: cfg.hidden,
        embed,
        ..ArchDescriptor::new(height, width)
    })
}

/// One supervised step on `batch`; used by Burn-In.
pub fn supervised_step(
    state: &mut TrainState,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let views: Vec<Sample> = batch
        .iter()
        .map(|s| {
            let (h, w) = s.image.dims();
            let weak = cfg.aug.sample_weak(h, w, &mut state.aug_rng);
            let strong = cfg.aug.strengthen(&weak, &mut state.aug_rng);
            apply(s, &strong)
        })
        .collect();
    let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = views
        .par_iter()
        .map(|s| supervised_grad(&state.student, s, &cfg.weights))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; state.student.len()];
    let mut breakdown = LossBreakdown::default();
    for r in results {
        let (b, g) = r?;
        add_into(&mut grad, &g, scale);
        add_breakdown(&mut breakdown, &b, scale);
    }
    adam_step(state.student.as_mut_slice(), &grad, &mut state.adam, &cfg.adam)?;
    Ok(breakdown)
}

/// Fully supervised training on the labeled split, then replication of the
/// trained parameters into teacher and student.
pub fn burn_in(split: &DatasetSplit, cfg: &TrainConfig) -> Result<(TrainState, Vec<BurnInMetrics>)> {
    cfg.validate()?;
    let arch = arch_for(split, cfg)?;
    let mut state = TrainState::new(arch, cfg)?;
    let mut log = Vec::with_capacity(cfg.burn_in_steps as usize);
    for step in 0..cfg.burn_in_steps {
        let batch = draw_batch(&split.labeled, cfg.batch_labeled, &mut state.batch_rng);
        let b = supervised_step(&mut state, &batch, cfg)?;
        log.push(BurnInMetrics {
            step,
            l_sup_bce: b.bce,
            l_sup_dice: b.dice,
        });
    }
    state.teacher = state.student.clone();
    state.phase = Phase::Ready;
    Ok((state, log))
}

/// Teacher pass on one weak view: confidences, pseudo masks and QLA weights.
pub fn teacher_pseudo_labels(
    teacher: &ModelParams,
    sample: &Sample,
    weak: &AugParams,
    tau: f64,
    cfg: &TrainConfig,
) -> Result<(Vec<ConfidenceMap>, Vec<PseudoLabel>)> {
    let view = apply_image(&sample.image, weak);
    let (confs, _) = forward(teacher, &view, &sample.phrases)?;
    let labels = confs
        .iter()
        .map(|m| {
            let mask = pseudo_label(m, cfg.threshold);
            let c = qla::connectivity(&mask, cfg.qla.connectivity);
            PseudoLabel {
                pixel_weights: Some(qla::pixel_weight_grid(m, &cfg.qla)),
                mask_weight: Some(qla::mask_weight(c, tau)),
                mask,
            }
        })
        .collect();
    Ok((confs, labels))
}

struct UnlabeledResult {
    record: UnlabeledRecord,
    breakdown: LossBreakdown,
    grad: Vec<f64>,
}

fn unsupervised_grad(
    student: &ModelParams,
    sample: &Sample,
    mut record: UnlabeledRecord,
    cfg: &TrainConfig,
) -> Result<UnlabeledResult> {
    let view = apply_image(&sample.image, &record.strong);
    let (preds, trace) = forward(student, &view, &sample.phrases)?;

    let kept: Vec<usize> = (0..preds.len()).filter(|&j| record.retained[j]).collect();
    let kept_preds: Vec<ConfidenceMap> = kept.iter().map(|&j| preds[j].clone()).collect();
    let kept_conf: Vec<ConfidenceMap> = kept.iter().map(|&j| record.teacher_conf[j].clone()).collect();
    let kept_labels: Vec<PseudoLabel> = kept
        .iter()
        .map(|&j| {
            let p = &record.pseudo[j];
            if cfg.qla_enabled {
                p.clone()
            } else {
                PseudoLabel {
                    mask: p.mask.clone(),
                    pixel_weights: None,
                    mask_weight: None,
                }
            }
        })
        .collect();
    let obj = unsupervised_objective(&kept_preds, &kept_labels, &kept_conf, &cfg.weights, cfg.kl_variant)?;

    let hw = view.height() * view.width();
    let mut upstream = vec![vec![0.0; hw]; preds.len()];
    for (slot, g) in kept.iter().zip(obj.grads) {
        upstream[*slot] = g;
    }
    let grad = backward(&trace, &upstream)?;
    record.student_conf = preds;
    Ok(UnlabeledResult {
        record,
        breakdown: obj.breakdown,
        grad,
    })
}

/// One teacher-student step. See the module docs for the three stages.
pub fn mutual_learn_step(
    state: &mut TrainState,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if state.phase != Phase::Ready {
        return Err(Error::State("mutual learning requires a burned-in state".into()));
    }
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::spec("mutual learning needs labeled and unlabeled batches"));
    }
    let tau = qla::tau_at(state.ssl_step, &cfg.qla);

    // Augmentation parameters are drawn up front, in order, for determinism.
    let unl_params: Vec<(AugParams, AugParams)> = unlabeled
        .iter()
        .map(|s| {
            let (h, w) = s.image.dims();
            let weak = cfg.aug.sample_weak(h, w, &mut state.aug_rng);
            let strong = cfg.aug.strengthen(&weak, &mut state.aug_rng);
            (weak, strong)
        })
        .collect();
    let lab_views: Vec<Sample> = labeled
        .iter()
        .map(|s| {
            let (h, w) = s.image.dims();
            let weak = cfg.aug.sample_weak(h, w, &mut state.aug_rng);
            let strong = cfg.aug.strengthen(&weak, &mut state.aug_rng);
            apply(s, &strong)
        })
        .collect();

    // Step 1: teacher on weak views.
    let teacher = &state.teacher;
    let teacher_out: Vec<Result<(Vec<ConfidenceMap>, Vec<PseudoLabel>)>> = unlabeled
        .par_iter()
        .zip(&unl_params)
        .map(|(s, (weak, _))| teacher_pseudo_labels(teacher, s, weak, tau, cfg))
        .collect();
    let mut records = Vec::with_capacity(unlabeled.len());
    for (out, (weak, strong)) in teacher_out.into_iter().zip(&unl_params) {
        let (teacher_conf, pseudo) = out?;
        records.push(UnlabeledRecord {
            weak: *weak,
            strong: *strong,
            retained: vec![true; pseudo.len()],
            teacher_conf,
            pseudo,
            student_conf: Vec::new(),
        });
    }

    let mut w_pixel_sum = 0.0;
    let mut w_pixel_n = 0usize;
    let mut w_mask_sum = 0.0;
    let mut w_mask_n = 0usize;
    for r in &records {
        for p in &r.pseudo {
            let pw = p.pixel_weights.as_deref().unwrap_or(&[]);
            w_pixel_sum += pw.iter().sum::<f64>();
            w_pixel_n += pw.len();
            w_mask_sum += p.mask_weight.unwrap_or(1.0);
            w_mask_n += 1;
        }
    }

    if cfg.qla.eds_fraction > 0.0 {
        let all: Vec<&ConfidenceMap> = records.iter().flat_map(|r| r.teacher_conf.iter()).collect();
        let keep = qla::eds_retain(&all, cfg.qla.eds_fraction);
        let mut flags = vec![false; all.len()];
        keep.into_iter().for_each(|i| flags[i] = true);
        let mut it = flags.into_iter();
        for r in &mut records {
            for slot in r.retained.iter_mut() {
                *slot = it.next().unwrap();
            }
        }
    }

    // Step 2: student on strong views.
    let student = &state.student;
    let unl_results: Vec<Result<UnlabeledResult>> = unlabeled
        .par_iter()
        .zip(records)
        .map(|(s, rec)| unsupervised_grad(student, s, rec, cfg))
        .collect();
    let sup_results: Vec<Result<(LossBreakdown, Vec<f64>)>> = lab_views
        .par_iter()
        .map(|s| supervised_grad(student, s, &cfg.weights))
        .collect();

    let mut grad = vec![0.0; state.student.len()];
    let mut sup = LossBreakdown::default();
    let sup_scale = 1.0 / labeled.len() as f64;
    for r in sup_results {
        let (b, g) = r?;
        add_into(&mut grad, &g, sup_scale);
        add_breakdown(&mut sup, &b, sup_scale);
    }
    let mut unsup = LossBreakdown::default();
    let unsup_scale = 1.0 / unlabeled.len() as f64;
    let mut records = Vec::with_capacity(unlabeled.len());
    for r in unl_results {
        let r = r?;
        add_into(&mut grad, &r.grad, cfg.weights.unsup * unsup_scale);
        add_breakdown(&mut unsup, &r.breakdown, unsup_scale);
        records.push(r.record);
    }

    // Step 3: optimizer on the student, EMA on the teacher.
    adam_step(state.student.as_mut_slice(), &grad, &mut state.adam, &cfg.adam)?;
    state.teacher = ema_update(&state.teacher, &state.student, cfg.ema_alpha)?;

    let metrics = StepMetrics {
        step: state.ssl_step,
        l_sup_bce: sup.bce,
        l_sup_dice: sup.dice,
        l_unsup_bce: unsup.bce,
        l_unsup_dice: unsup.dice,
        l_unsup_kl: unsup.kl,
        tau,
        mean_w_pixel: if w_pixel_n > 0 { w_pixel_sum / w_pixel_n as f64 } else { 0.0 },
        mean_w_mask: if w_mask_n > 0 { w_mask_sum / w_mask_n as f64 } else { 0.0 },
    };
    state.ssl_step += 1;
    Ok(StepReport {
        metrics,
        sup,
        unsup,
        unlabeled: records,
    })
}

/// Result of a full semi-supervised run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub burn_in_log: Vec<BurnInMetrics>,
    pub log: Vec<StepMetrics>,
}

/// Burn-In followed by `cfg.ssl_steps` mutual-learning steps.
pub fn train_ssl(split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_ssl_with(split, cfg, |_, _| {})
}

/// Like [`train_ssl`], calling `observe` after every mutual-learning step.
pub fn train_ssl_with<F>(split: &DatasetSplit, cfg: &TrainConfig, observe: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainState, &StepReport),
{
    if cfg.ssl_steps > 0 && split.unlabeled.is_empty() {
        return Err(Error::Config("semi-supervised training needs unlabeled samples".into()));
    }
    let (mut state, burn_in_log) = burn_in(split, cfg)?;
    let log = mutual_learning(&mut state, split, cfg, observe)?;
    Ok(TrainOutcome {
        state,
        burn_in_log,
        log,
    })
}

/// Runs `cfg.ssl_steps` mutual-learning steps from a burned-in state.
pub fn mutual_learning<F>(
    state: &mut TrainState,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<Vec<StepMetrics>>
where
    F: FnMut(&TrainState, &StepReport),
{
    cfg.validate()?;
    if cfg.ssl_steps > 0 && split.unlabeled.is_empty() {
        return Err(Error::Config("semi-supervised training needs unlabeled samples".into()));
    }
    let mut log = Vec::with_capacity(cfg.ssl_steps as usize);
    for _ in 0..cfg.ssl_steps {
        let lab = draw_batch(&split.labeled, cfg.batch_labeled, &mut state.batch_rng);
        let unl = draw_batch(&split.unlabeled, cfg.batch_unlabeled, &mut state.batch_rng);
        let report = mutual_learn_step(state, &lab, &unl, cfg)?;
        observe(state, &report);
        log.push(report.metrics);
    }
    Ok(log)
}
