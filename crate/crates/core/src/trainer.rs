//! Four-phase training: schedule, class weighting, optimizer and epoch loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, LabelCounts, Sample, Split};
use crate::error::{Error, Result};
use crate::evalkit::{mt5r, ScoreSet, TaskRecall};
use crate::model::AnticipationModel;
use crate::params::{ParamGroup, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Warmup,
    Ordinary,
    Finetune,
    FinetuneJointVal,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 4] = [
        PhaseKind::Warmup,
        PhaseKind::Ordinary,
        PhaseKind::Finetune,
        PhaseKind::FinetuneJointVal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Warmup => "warmup",
            PhaseKind::Ordinary => "ordinary",
            PhaseKind::Finetune => "finetune",
            PhaseKind::FinetuneJointVal => "finetune_joint_val",
        }
    }

    /// Only warmup may look at frames inside the anticipation gap.
    pub fn sees_action_frames(self) -> bool {
        self == PhaseKind::Warmup
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub backbone_trainable: bool,
    pub action_frames_visible: bool,
    pub class_weights_active: bool,
    pub include_validation_in_train: bool,
}

impl PhaseSpec {
    /// Spec for `kind` with the flags that phase always carries.
    pub fn new(kind: PhaseKind, epochs: usize, lr_start: f64, lr_end: f64) -> Self {
        Self {
            kind,
            epochs,
            lr_start,
            lr_end,
            backbone_trainable: kind == PhaseKind::Warmup,
            action_frames_visible: kind.sees_action_frames(),
            class_weights_active: matches!(kind, PhaseKind::Finetune | PhaseKind::FinetuneJointVal),
            include_validation_in_train: kind == PhaseKind::FinetuneJointVal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!("{} needs at least one epoch", self.kind)));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite()) || self.lr_end > self.lr_start {
            return Err(Error::Config(format!(
                "{}: learning rates must satisfy 0 < lr_end <= lr_start",
                self.kind
            )));
        }
        if *self != Self::new(self.kind, self.epochs, self.lr_start, self.lr_end) {
            return Err(Error::Config(format!("{}: phase flags do not match the phase kind", self.kind)));
        }
        Ok(())
    }
}

/// Warmup and ordinary training for 50 epochs each, then two 20-epoch
/// finetune phases at a tenth of the rate.
pub fn default_pipeline() -> Vec<PhaseSpec> {
    vec![
        PhaseSpec::new(PhaseKind::Warmup, 50, 1e-4, 1e-6),
        PhaseSpec::new(PhaseKind::Ordinary, 50, 1e-4, 1e-6),
        PhaseSpec::new(PhaseKind::Finetune, 20, 1e-5, 1e-7),
        PhaseSpec::new(PhaseKind::FinetuneJointVal, 20, 1e-5, 1e-7),
    ]
}

/// Epochs spent at `lr_start`: `⌈0.75·E⌉`.
pub fn flat_epochs(epochs: usize) -> usize {
    (3 * epochs).div_ceil(4)
}

fn half_cosine(lr_start: f64, lr_end: f64, p: f64) -> f64 {
    lr_end + (lr_start - lr_end) * (1.0 + num_traits::Float::cos(core::f64::consts::PI * p)) / 2.0
}

/// Continuous schedule: flat for the first 75% of the phase, then a half
/// cosine that reaches `lr_end` as `epoch → E`.
pub fn flatcosine_lr(epoch: f64, spec: &PhaseSpec) -> Result<f64> {
    let e = spec.epochs as f64;
    if !(0.0..e).contains(&epoch) {
        return Err(Error::Contract(format!("epoch {epoch} outside [0, {e})")));
    }
    let switch = 0.75 * e;
    if epoch < switch {
        return Ok(spec.lr_start);
    }
    Ok(half_cosine(spec.lr_start, spec.lr_end, (epoch - switch) / (0.25 * e)))
}

/// Rate applied during integer epoch `epoch`.
///
/// The first `⌈0.75·E⌉` epochs use `lr_start`. The remaining ones walk the
/// half cosine in equal steps so that the last epoch runs at `lr_end`
/// exactly. Phases too short to have a decay epoch stay flat.
pub fn epoch_lr(epoch: usize, spec: &PhaseSpec) -> Result<f64> {
    if epoch >= spec.epochs {
        return Err(Error::Contract(format!("epoch {epoch} outside [0, {})", spec.epochs)));
    }
    let flat = flat_epochs(spec.epochs);
    if epoch < flat {
        return Ok(spec.lr_start);
    }
    let p = (epoch - flat + 1) as f64 / (spec.epochs - flat) as f64;
    Ok(half_cosine(spec.lr_start, spec.lr_end, p))
}

/// `w_c ∝ (1/freq_c)^γ`, scaled to mean 1 over the classes that occur.
/// Classes with no samples get weight 1.
pub fn class_weights_from_freq(freqs: &[usize], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("class-weight exponent {gamma} outside [0, 1]")));
    }
    if freqs.is_empty() {
        return Err(Error::Config("no classes to weight".into()));
    }
    let missing = freqs.iter().filter(|&&c| c == 0).count();
    if missing > 0 {
        log::warn!("{missing} class(es) have no training samples; their weight stays 1");
    }
    let raw: Vec<f64> = freqs
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { num_traits::Float::powf(1.0 / c as f64, gamma) })
        .collect();
    let present = freqs.len() - missing;
    if present == 0 {
        return Ok(raw);
    }
    let mean = raw.iter().zip(freqs).filter(|(_, &c)| c > 0).map(|(w, _)| w).sum::<f64>() / present as f64;
    Ok(raw
        .iter()
        .zip(freqs)
        .map(|(&w, &c)| if c == 0 { 1.0 } else { w / mean })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub gamma: f64,
    pub verb: Vec<f64>,
    pub noun: Vec<f64>,
    pub action: Vec<f64>,
}

impl ClassWeights {
    pub fn from_counts(counts: &LabelCounts, gamma: f64) -> Result<Self> {
        Ok(Self {
            gamma,
            verb: class_weights_from_freq(&counts.verb, gamma)?,
            noun: class_weights_from_freq(&counts.noun, gamma)?,
            action: class_weights_from_freq(&counts.action, gamma)?,
        })
    }
}

/// Batch mean of `w[y_i] · (−log softmax(logits_i)[y_i])`.
pub fn weighted_cross_entropy<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
    }
    let picked = logits.log_softmax().pick(labels)?;
    let b = labels.len() as f64;
    let nll = match weights {
        None => picked.sum(),
        Some(w) => {
            if w.len() != s[1] {
                return Err(Error::dim("cross_entropy weights", &[w.len()], &s));
            }
            let per: Vec<f64> = labels.iter().map(|&y| w[y]).collect();
            let wv = logits.tape().constant(Tensor::from_f64(&[labels.len()], &per)?);
            picked.mul(wv)?.sum()
        }
    };
    Ok(nll.scale(-1.0 / b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.001,
        }
    }
}

/// Heavy-ball momentum with decoupled weight decay:
/// `v ← μv + g`, `θ ← θ − lr·v − lr·λ·θ`.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            velocity: store.entries().iter().map(|e| vec![T::zero(); e.value.numel()]).collect(),
        }
    }

    /// Updates every parameter whose group passes `trainable`; others are
    /// left untouched. Missing gradients count as zero.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("optimizer", &[grads.len()], &[store.len()]));
        }
        let mu = T::from_f64(self.config.momentum);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.config.weight_decay);
        for ((entry, g), v) in store.values_mut().zip(grads).zip(&mut self.velocity) {
            if !trainable(entry.group) {
                continue;
            }
            let theta = entry.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.as_ref().map_or(T::zero(), |g| g[i]);
                v[i] = mu * v[i] + gi;
                theta[i] = theta[i] - lr_t * v[i] - decay * theta[i];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Class-weight exponent.
    pub gamma: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Multiplier on every scheduled rate. The default compensates for plain
    /// momentum SGD needing far larger steps than adaptive optimizers.
    pub lr_scale: f64,
    /// Global gradient-norm ceiling per step; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Weight of the class-token losses of CTP cells.
    pub aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            gamma: 0.5,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            lr_scale: 100.0,
            grad_clip: Some(5.0),
            aux_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_scale > 0.0) || !self.lr_scale.is_finite() {
            return Err(Error::Config("lr_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: PhaseKind,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val: TaskRecall,
}

pub const METRICS_HEADER: &str = "phase,epoch,lr,loss,val_mt5r_verb,val_mt5r_noun,val_mt5r_action";

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:e},{},{},{},{}",
            self.phase, self.epoch, self.lr, self.loss, self.val.verb, self.val.noun, self.val.action
        )
    }
}

fn check_compatible(model: &AnticipationModel<f32>, data: &Dataset) -> Result<()> {
    let (c, m) = (model.config(), &data.manifest);
    if (c.verbs, c.nouns, c.actions) != (m.verbs, m.nouns, m.actions) {
        return Err(Error::Config(format!(
            "model heads {}/{}/{} do not match dataset classes {}/{}/{}",
            c.verbs, c.nouns, c.actions, m.verbs, m.nouns, m.actions
        )));
    }
    if c.frame_shape() != m.frame_shape(c.modality) {
        return Err(Error::Config(format!(
            "model expects {} frames of shape {:?}, dataset has {:?}",
            c.modality,
            c.frame_shape(),
            m.frame_shape(c.modality)
        )));
    }
    Ok(())
}

/// Model inputs for one sample: raw frames, or encoder features when the
/// encoder is frozen for the whole phase.
struct Prepared<'d> {
    sample: &'d Sample,
    inputs: Vec<Tensor<f32>>,
}

fn prepare<'d>(
    model: &AnticipationModel<f32>,
    data: &Dataset,
    samples: &[&'d Sample],
    phase: PhaseKind,
    encode: bool,
) -> Result<Vec<Prepared<'d>>> {
    samples
        .iter()
        .map(|&s| {
            let frames = data.clip(s, model.config().modality, phase)?;
            if !phase.sees_action_frames() {
                assert!(frames.len() <= crate::datagen::OBSERVED_FRAMES, "withheld frames outside warmup");
            }
            let inputs = if encode { model.precompute_features(&frames)? } else { frames };
            Ok(Prepared { sample: s, inputs })
        })
        .collect()
}

/// Validation MT5R of `model` on pre-windowed inputs.
fn evaluate(model: &AnticipationModel<f32>, items: &[Prepared<'_>], encoded: bool) -> Result<TaskRecall> {
    let (v, n, a) = (model.config().verbs, model.config().nouns, model.config().actions);
    let mut scores = [Vec::new(), Vec::new(), Vec::new()];
    let mut labels = [Vec::new(), Vec::new(), Vec::new()];
    for it in items {
        let p = if encoded {
            model.predict_encoded(&it.inputs)?
        } else {
            model.predict(&it.inputs)?
        };
        scores[0].extend_from_slice(p.verb.data());
        scores[1].extend_from_slice(p.noun.data());
        scores[2].extend_from_slice(p.action.data());
        labels[0].push(it.sample.verb);
        labels[1].push(it.sample.noun);
        labels[2].push(it.sample.action);
    }
    let s = items.len();
    let [sv, sn, sa] = scores;
    Ok(TaskRecall {
        verb: mt5r(&Tensor::new(&[s, v], sv)?, &labels[0])?,
        noun: mt5r(&Tensor::new(&[s, n], sn)?, &labels[1])?,
        action: mt5r(&Tensor::new(&[s, a], sa)?, &labels[2])?,
    })
}

/// Validation MT5R on the observed window, for reporting outside a phase.
pub fn validate(model: &AnticipationModel<f32>, data: &Dataset, split: Split) -> Result<TaskRecall> {
    check_compatible(model, data)?;
    let samples: Vec<&Sample> = data.split(split).collect();
    let items = prepare(model, data, &samples, PhaseKind::Ordinary, true)?;
    evaluate(model, &items, true)
}

/// Softmax scores of every clip of `split` on the observed window, in
/// dataset order.
pub fn score_split(model: &AnticipationModel<f32>, data: &Dataset, split: Split, model_id: &str) -> Result<ScoreSet> {
    check_compatible(model, data)?;
    let c = model.config();
    let mut ids = Vec::new();
    let mut scores = [Vec::new(), Vec::new(), Vec::new()];
    for s in data.split(split) {
        let p = model.predict(&data.clip(s, c.modality, PhaseKind::Ordinary)?)?;
        for (acc, t) in scores.iter_mut().zip([&p.verb, &p.noun, &p.action]) {
            t.ensure_finite("scores")?;
            acc.extend_from_slice(t.data());
        }
        ids.push(s.id.clone());
    }
    let n = ids.len();
    let [sv, sn, sa] = scores;
    ScoreSet::new(
        model_id,
        c.modality.name(),
        ids,
        Tensor::new(&[n, c.verbs], sv)?,
        Tensor::new(&[n, c.nouns], sn)?,
        Tensor::new(&[n, c.actions], sa)?,
    )
}

fn phase_seed(seed: u64, phase: PhaseKind, epoch: usize) -> u64 {
    seed ^ ((phase as u64 + 1) << 48) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains `model` through one phase and returns one metrics line per epoch.
/// `on_epoch` sees each line as soon as it is produced.
pub fn run_phase(
    model: &mut AnticipationModel<f32>,
    data: &Dataset,
    spec: &PhaseSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    spec.validate()?;
    cfg.validate()?;
    check_compatible(model, data)?;
    let kind = spec.kind;
    let trainable = |g: ParamGroup| spec.backbone_trainable || g != ParamGroup::Encoder;
    // Frozen encoders are evaluated once per phase.
    let cache = !spec.backbone_trainable;

    let mut train: Vec<&Sample> = data.split(Split::Train).collect();
    if spec.include_validation_in_train {
        train.extend(data.split(Split::Val));
    }
    let val: Vec<&Sample> = data.split(Split::Val).collect();
    let weights = if spec.class_weights_active {
        Some(ClassWeights::from_counts(&LabelCounts::recount(&data.manifest, train.iter().copied()), cfg.gamma)?)
    } else {
        None
    };
    let train_items = prepare(model, data, &train, kind, cache)?;
    let mut val_items = if cache {
        Some(prepare(model, data, &val, PhaseKind::Ordinary, true)?)
    } else {
        None
    };
    let ctp = model.config().cell == crate::model::CellKind::MpnnelCtp;

    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let mut log = Vec::with_capacity(spec.epochs);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 0..spec.epochs {
        let lr = epoch_lr(epoch, spec)? * cfg.lr_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(cfg.seed, kind, epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Vec<f32>>> = vec![None; model.params().len()];
            let inv_b = 1.0 / batch.len() as f64;
            for &i in batch {
                let it = &train_items[i];
                let tape = Tape::new();
                let p = model.params().bind(&tape, trainable);
                let xs: Vec<_> = it.inputs.iter().map(|f| tape.constant(f.clone())).collect();
                let r = if cache {
                    model.rollout_encoded(&p, &xs)?
                } else {
                    model.rollout(&p, &xs)?
                };
                let last = r.last();
                let w = weights.as_ref();
                let s = it.sample;
                let mut loss = weighted_cross_entropy(last.verb, &[s.verb], w.map(|w| w.verb.as_slice()))?
                    .add(weighted_cross_entropy(last.noun, &[s.noun], w.map(|w| w.noun.as_slice()))?)?
                    .add(weighted_cross_entropy(last.action, &[s.action], w.map(|w| w.action.as_slice()))?)?;
                if ctp {
                    if let Some((av, an)) = r.aux {
                        let aux = weighted_cross_entropy(av, &[s.verb], w.map(|w| w.verb.as_slice()))?
                            .add(weighted_cross_entropy(an, &[s.noun], w.map(|w| w.noun.as_slice()))?)?;
                        loss = loss.add(aux.scale(cfg.aux_weight))?;
                    }
                }
                let value = loss.value().data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss of {} in {kind} epoch {epoch}", s.id)));
                }
                loss_sum += value;
                let grads = tape.backward(loss.scale(inv_b))?;
                for (slot, g) in acc.iter_mut().zip(p.gradients(&grads)) {
                    if let Some(g) = g {
                        match slot {
                            Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                            None => *slot = Some(g),
                        }
                    }
                }
            }
            if let Some(limit) = cfg.grad_clip {
                let norm = acc
                    .iter()
                    .flatten()
                    .flat_map(|g| g.iter())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!("gradient in {kind} epoch {epoch}")));
                }
                if norm > limit {
                    let f = (limit / norm) as f32;
                    acc.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= f));
                }
            }
            opt.step(model.params_mut(), &acc, lr, trainable)?;
        }
        let val_recall = match &mut val_items {
            Some(items) => evaluate(model, items, true)?,
            None => {
                let items = prepare(model, data, &val, PhaseKind::Ordinary, false)?;
                evaluate(model, &items, false)?
            }
        };
        let line = EpochMetrics {
            phase: kind,
            epoch,
            lr,
            loss: loss_sum / train_items.len() as f64,
            val: val_recall,
        };
        log::info!("{line}");
        on_epoch(&line);
        log.push(line);
    }
    Ok(log)
}

/// Runs `phases` in order, each resuming from the previous one's parameters.
pub fn run_pipeline(
    model: &mut AnticipationModel<f32>,
    data: &Dataset,
    phases: &[PhaseSpec],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut log = Vec::new();
    for spec in phases {
        log.extend(run_phase(model, data, spec, cfg, &mut on_epoch)?);
    }
    Ok(log)
}
