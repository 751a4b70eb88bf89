//! Synthetic multi-modal anticipation clips with planted class structure.
//!
//! Every clip has 14 frames sampled at a fixed step. The first 11 are the
//! observed context; the last 3 sit inside the anticipation gap and are only
//! readable by phases that declare access to them.
//!
//! Class evidence is planted as smooth spatial templates (one per verb, noun
//! and action) whose amplitude ramps up over the observed span, buried in
//! Gaussian noise. The withheld frames show the action template at full
//! strength.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use core::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalityKind;
use crate::tensor::Tensor;
use crate::trainer::PhaseKind;

/// Frames stored per clip.
pub const CLIP_FRAMES: usize = 14;
/// Frames visible outside warmup.
pub const OBSERVED_FRAMES: usize = 11;
/// Flow frames stacked per snippet.
pub const SNIPPET_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}'")))
    }
}

/// Modalities kept on disk; flow snippets are derived from flow on read.
pub const STORED_MODALITIES: [ModalityKind; 4] =
    [ModalityKind::Rgb, ModalityKind::Flow, ModalityKind::Obj, ModalityKind::MaskedRgb];

fn stored_slot(m: ModalityKind) -> Option<usize> {
    STORED_MODALITIES.iter().position(|&s| s == m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    /// Train, val and test sizes.
    pub sizes: [usize; 3],
    pub verbs: usize,
    pub nouns: usize,
    pub actions: usize,
    /// Action frequencies follow `1 / rank^zipf`.
    pub zipf: f64,
    /// Explicit relative action frequencies; overrides `zipf` when set.
    pub action_weights: Option<Vec<f64>>,
    pub frame_size: usize,
    pub k_obj: usize,
    /// Standard deviation of the pixel noise.
    pub noise: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            sizes: [1200, 300, 300],
            verbs: 6,
            nouns: 8,
            actions: 12,
            zipf: 1.0,
            action_weights: None,
            frame_size: 16,
            k_obj: 20,
            noise: 0.5,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.verbs == 0 || self.nouns == 0 || self.actions == 0 {
            return Err(Error::Config("verbs, nouns and actions must be positive".into()));
        }
        if self.actions > self.verbs * self.nouns {
            return Err(Error::Config(format!(
                "{} actions exceed the {}x{} verb-noun pairs",
                self.actions, self.verbs, self.nouns
            )));
        }
        if let Some(&size) = self.sizes.iter().find(|&&s| s < self.actions) {
            return Err(Error::Config(format!(
                "split size {size} is smaller than the {} action classes",
                self.actions
            )));
        }
        if let Some(w) = &self.action_weights {
            if w.len() != self.actions || w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Config("action_weights must hold one positive weight per action".into()));
            }
        }
        if !(self.zipf >= 0.0) || !self.zipf.is_finite() {
            return Err(Error::Config("zipf exponent must be finite and non-negative".into()));
        }
        if self.frame_size < 4 || self.k_obj < 2 {
            return Err(Error::Config("frame_size must be at least 4 and k_obj at least 2".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    fn class_weights(&self) -> Vec<f64> {
        match &self.action_weights {
            Some(w) => w.clone(),
            None => (0..self.actions).map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf)).collect(),
        }
    }
}

/// Label counts for one split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub verb: Vec<usize>,
    pub noun: Vec<usize>,
    pub action: Vec<usize>,
}

impl LabelCounts {
    fn zeros(v: usize, n: usize, a: usize) -> Self {
        Self {
            verb: vec![0; v],
            noun: vec![0; n],
            action: vec![0; a],
        }
    }

    /// Brute-force recount over labelled samples.
    pub fn recount<'a>(manifest: &DatasetManifest, samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut c = Self::zeros(manifest.verbs, manifest.nouns, manifest.actions);
        for s in samples {
            c.verb[s.verb] += 1;
            c.noun[s.noun] += 1;
            c.action[s.action] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub verbs: usize,
    pub nouns: usize,
    pub actions: usize,
    /// `action_table[a] = [verb, noun]`.
    pub action_table: Vec<[usize; 2]>,
    pub seed: u64,
    pub frame_size: usize,
    pub k_obj: usize,
    pub frames: usize,
    pub observed_frames: usize,
    /// Per-frame shape of each stored modality.
    pub shapes: Vec<(ModalityKind, Vec<usize>)>,
    pub train: LabelCounts,
    pub val: LabelCounts,
    pub test: LabelCounts,
}

impl DatasetManifest {
    pub fn counts(&self, split: Split) -> &LabelCounts {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn counts_mut(&mut self, split: Split) -> &mut LabelCounts {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.counts(split).action.iter().sum()
    }

    pub fn frame_shape(&self, m: ModalityKind) -> Vec<usize> {
        m.frame_shape(self.frame_size, self.k_obj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_table.len() != self.actions {
            return Err(Error::Data("action table length differs from action count".into()));
        }
        let mut seen = Vec::with_capacity(self.actions);
        for &[v, n] in &self.action_table {
            if v >= self.verbs || n >= self.nouns {
                return Err(Error::Data(format!("action table entry ({v},{n}) out of range")));
            }
            if seen.contains(&(v, n)) {
                return Err(Error::Data(format!("verb-noun pair ({v},{n}) listed twice")));
            }
            seen.push((v, n));
        }
        if self.frames != CLIP_FRAMES || self.observed_frames != OBSERVED_FRAMES {
            return Err(Error::Data("unexpected clip length in manifest".into()));
        }
        Ok(())
    }
}

/// Per-task class frequencies of a split, as recorded in the manifest.
pub fn label_frequencies(manifest: &DatasetManifest, split: &str) -> Result<LabelCounts> {
    Ok(manifest.counts(split.parse()?).clone())
}

/// Verb and noun counts implied by action counts through the action table.
pub fn marginal_counts(manifest: &DatasetManifest, action_counts: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut verb = vec![0; manifest.verbs];
    let mut noun = vec![0; manifest.nouns];
    for (a, &c) in action_counts.iter().enumerate() {
        let [v, n] = manifest.action_table[a];
        verb[v] += c;
        noun[n] += c;
    }
    (verb, noun)
}

/// One clip. Frames are reachable through [`Dataset::clip`], which enforces
/// the observation window, or through [`Sample::stored_frames`] for storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    streams: [Vec<Tensor<f32>>; 4],
}

impl Sample {
    pub fn new(
        id: String,
        split: Split,
        labels: [usize; 3],
        streams: [Vec<Tensor<f32>>; 4],
    ) -> Result<Self> {
        for (m, s) in STORED_MODALITIES.iter().zip(&streams) {
            if s.len() != CLIP_FRAMES {
                return Err(Error::Data(format!("{id}: {m} has {} frames, expected {CLIP_FRAMES}", s.len())));
            }
        }
        Ok(Self {
            id,
            split,
            verb: labels[0],
            noun: labels[1],
            action: labels[2],
            streams,
        })
    }

    /// All stored frames of a modality, withheld ones included. Intended for
    /// serialization; training and evaluation go through [`Dataset::clip`].
    pub fn stored_frames(&self, m: ModalityKind) -> Result<&[Tensor<f32>]> {
        stored_slot(m)
            .map(|i| self.streams[i].as_slice())
            .ok_or_else(|| Error::Config(format!("{m} is derived, not stored")))
    }
}

/// Frames visible to a phase: a prefix of the stored frames.
pub fn window<T>(frames: &[T], phase: PhaseKind) -> &[T] {
    let n = if phase.sees_action_frames() {
        CLIP_FRAMES
    } else {
        OBSERVED_FRAMES
    };
    &frames[..n.min(frames.len())]
}

/// Frame `t` becomes the channel stack of frames `t-4..=t`, repeating the
/// first frame where the history is shorter.
pub fn stack_flow_snippets(frames: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    if frames.is_empty() {
        return Err(Error::Contract("snippet stacking needs at least one frame".into()));
    }
    (0..frames.len())
        .map(|t| {
            let parts: Vec<&Tensor<f32>> = (0..SNIPPET_LEN)
                .map(|j| &frames[(t + j).saturating_sub(SNIPPET_LEN - 1)])
                .collect();
            Tensor::concat0(&parts)
        })
        .collect()
}

/// In-memory dataset with an instrumented counter of withheld-frame reads.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    samples: Vec<Sample>,
    withheld_reads: AtomicUsize,
}

impl Dataset {
    /// Checks that samples agree with the manifest's table, counts and shapes.
    pub fn new(manifest: DatasetManifest, samples: Vec<Sample>) -> Result<Self> {
        manifest.validate()?;
        for s in &samples {
            if s.action >= manifest.actions || manifest.action_table[s.action] != [s.verb, s.noun] {
                return Err(Error::Data(format!(
                    "{}: action {} does not map to verb {} noun {}",
                    s.id, s.action, s.verb, s.noun
                )));
            }
            for m in STORED_MODALITIES {
                let want = manifest.frame_shape(m);
                if let Some(f) = s.stored_frames(m)?.iter().find(|f| f.shape() != want.as_slice()) {
                    return Err(Error::Data(format!("{}: {m} frame shape {:?}", s.id, f.shape())));
                }
            }
        }
        for split in Split::ALL {
            let recount = LabelCounts::recount(&manifest, samples.iter().filter(|s| s.split == split));
            if &recount != manifest.counts(split) {
                return Err(Error::Data(format!("{split} label counts disagree with the manifest")));
            }
        }
        Ok(Self {
            manifest,
            samples,
            withheld_reads: AtomicUsize::new(0),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Windowed frames of one modality as seen by `phase`.
    pub fn clip(&self, sample: &Sample, modality: ModalityKind, phase: PhaseKind) -> Result<Vec<Tensor<f32>>> {
        let source = if modality == ModalityKind::FlowSnippets {
            ModalityKind::Flow
        } else {
            modality
        };
        let frames = window(sample.stored_frames(source)?, phase);
        if frames.len() > OBSERVED_FRAMES {
            self.withheld_reads.fetch_add(frames.len() - OBSERVED_FRAMES, Ordering::Relaxed);
        }
        if modality == ModalityKind::FlowSnippets {
            stack_flow_snippets(frames)
        } else {
            Ok(frames.to_vec())
        }
    }

    /// Number of withheld frames handed out by [`clip`](Self::clip) so far.
    pub fn withheld_reads(&self) -> usize {
        self.withheld_reads.load(Ordering::Relaxed)
    }

    pub fn reset_withheld_reads(&self) {
        self.withheld_reads.store(0, Ordering::Relaxed);
    }
}

/// Exact per-class counts for a split: one sample per class, the remainder
/// split by largest remainder in proportion to `weights`.
pub fn quota_counts(size: usize, weights: &[f64]) -> Vec<usize> {
    let k = weights.len();
    let rest = size - k;
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| rest as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| 1 + e.floor() as usize).collect();
    let mut left = size - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

/// Smooth pattern in `[-1, 1]`: per channel a sum of two plane waves with
/// random low frequencies and phases.
fn template<R: Rng>(rng: &mut R, channels: usize, size: usize) -> Vec<f32> {
    let tau = core::f64::consts::TAU;
    let mut out = Vec::with_capacity(channels * size * size);
    for _ in 0..channels {
        let waves: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                let fx = rng.random_range(0..=3) as f64;
                let fy = rng.random_range(if fx == 0.0 { 1..=3 } else { 0..=3 }) as f64;
                (fx, fy, rng.random_range(0.0..tau))
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph)| Float::cos(tau * (fx * x as f64 + fy * y as f64) / size as f64 + ph))
                    .sum();
                out.push((v / 2.0) as f32);
            }
        }
    }
    out
}

/// Peaked object-score prototype.
fn prototype<R: Rng>(rng: &mut R, k: usize, peaks: usize) -> Vec<f64> {
    let mut p = vec![0.0; k];
    for _ in 0..peaks {
        p[rng.random_range(0..k)] += 1.0 / peaks as f64;
    }
    p
}

struct Templates {
    rgb_verb: Vec<Vec<f32>>,
    rgb_noun: Vec<Vec<f32>>,
    rgb_action: Vec<Vec<f32>>,
    flow_verb: Vec<Vec<f32>>,
    flow_action: Vec<Vec<f32>>,
    obj_noun: Vec<Vec<f64>>,
    obj_action: Vec<Vec<f64>>,
}

impl Templates {
    fn new<R: Rng>(rng: &mut R, cfg: &GenerateConfig) -> Self {
        let s = cfg.frame_size;
        let mut many = |n: usize, c: usize| (0..n).map(|_| template(rng, c, s)).collect::<Vec<_>>();
        let rgb_verb = many(cfg.verbs, 3);
        let rgb_noun = many(cfg.nouns, 3);
        let rgb_action = many(cfg.actions, 3);
        let flow_verb = many(cfg.verbs, 2);
        let flow_action = many(cfg.actions, 2);
        Self {
            rgb_verb,
            rgb_noun,
            rgb_action,
            flow_verb,
            flow_action,
            obj_noun: (0..cfg.nouns).map(|_| prototype(rng, cfg.k_obj, 2)).collect(),
            obj_action: (0..cfg.actions).map(|_| prototype(rng, cfg.k_obj, 1)).collect(),
        }
    }
}

fn noisy<R: Rng>(rng: &mut R, signal: impl Iterator<Item = f64>, noise: f64, shape: &[usize]) -> Tensor<f32> {
    let data = signal
        .map(|v| {
            let n: f64 = rng.sample(StandardNormal);
            (v + noise * n).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("template shape")
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: &[f64]) -> Vec<f32> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng).max(1e-12))
        .collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| (d / total) as f32).collect()
}

fn make_sample<R: Rng>(
    rng: &mut R,
    cfg: &GenerateConfig,
    tpl: &Templates,
    table: &[[usize; 2]],
    id: String,
    split: Split,
    action: usize,
) -> Sample {
    let [verb, noun] = table[action];
    let s = cfg.frame_size;
    let rgb_shape = [3, s, s];
    let flow_shape = [2, s, s];
    let (rv, rn, ra) = (&tpl.rgb_verb[verb], &tpl.rgb_noun[noun], &tpl.rgb_action[action]);
    let (fv, fa) = (&tpl.flow_verb[verb], &tpl.flow_action[action]);

    // Rectangular visibility mask, fixed over the clip.
    let (mw, mh) = (rng.random_range(s / 2..=s), rng.random_range(s / 2..=s));
    let (mx, my) = (rng.random_range(0..=s - mw), rng.random_range(0..=s - mh));
    let mask: Vec<f32> = (0..s * s)
        .map(|i| {
            let (y, x) = (i / s, i % s);
            if (mx..mx + mw).contains(&x) && (my..my + mh).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let mut streams: [Vec<Tensor<f32>>; 4] = Default::default();
    for t in 0..CLIP_FRAMES {
        let (wv, wn, wa) = if t < OBSERVED_FRAMES {
            let ramp = 0.4 + 0.6 * t as f64 / (OBSERVED_FRAMES - 1) as f64;
            (0.35 * ramp, 0.35 * ramp, 0.5 * ramp)
        } else {
            (0.2, 0.2, 1.0)
        };
        let rgb = noisy(
            rng,
            (0..3 * s * s).map(|i| wv * rv[i] as f64 + wn * rn[i] as f64 + wa * ra[i] as f64),
            cfg.noise,
            &rgb_shape,
        );
        let flow = noisy(
            rng,
            (0..2 * s * s).map(|i| (wv + wn) * fv[i] as f64 + wa * fa[i] as f64),
            cfg.noise,
            &flow_shape,
        );
        let alpha: Vec<f64> = (0..cfg.k_obj)
            .map(|k| 0.5 + 12.0 * (wn + wa) * (tpl.obj_noun[noun][k] + tpl.obj_action[action][k]))
            .collect();
        let obj = Tensor::new(&[cfg.k_obj], dirichlet(rng, &alpha)).expect("k_obj");
        let masked = Tensor::from_fn(&rgb_shape, |i| rgb.data()[i] * mask[i % (s * s)]);
        streams[0].push(rgb);
        streams[1].push(flow);
        streams[2].push(obj);
        streams[3].push(masked);
    }
    Sample {
        id,
        split,
        verb,
        noun,
        action,
        streams,
    }
}

/// Deterministic dataset for `cfg.seed`.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut pairs: Vec<[usize; 2]> = (0..cfg.verbs)
        .flat_map(|v| (0..cfg.nouns).map(move |n| [v, n]))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(cfg.actions);

    let tpl = Templates::new(&mut rng, cfg);
    let weights = cfg.class_weights();
    let mut manifest = DatasetManifest {
        verbs: cfg.verbs,
        nouns: cfg.nouns,
        actions: cfg.actions,
        action_table: pairs.clone(),
        seed: cfg.seed,
        frame_size: cfg.frame_size,
        k_obj: cfg.k_obj,
        frames: CLIP_FRAMES,
        observed_frames: OBSERVED_FRAMES,
        shapes: STORED_MODALITIES
            .iter()
            .map(|&m| (m, m.frame_shape(cfg.frame_size, cfg.k_obj)))
            .collect(),
        train: LabelCounts::zeros(cfg.verbs, cfg.nouns, cfg.actions),
        val: LabelCounts::zeros(cfg.verbs, cfg.nouns, cfg.actions),
        test: LabelCounts::zeros(cfg.verbs, cfg.nouns, cfg.actions),
    };

    let mut samples = Vec::with_capacity(cfg.sizes.iter().sum());
    for (split, &size) in Split::ALL.iter().zip(&cfg.sizes) {
        let counts = quota_counts(size, &weights);
        let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(a, &c)| core::iter::repeat_n(a, c)).collect();
        labels.shuffle(&mut rng);
        for (i, &a) in labels.iter().enumerate() {
            let id = format!("{split}_{i:05}");
            samples.push(make_sample(&mut rng, cfg, &tpl, &pairs, id, *split, a));
        }
        let c = LabelCounts::recount(&manifest, samples.iter().filter(|s| s.split == *split));
        *manifest.counts_mut(*split) = c;
    }
    log::debug!("generated {} samples with seed {}", samples.len(), cfg.seed);
    Dataset::new(manifest, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> GenerateConfig {
        GenerateConfig {
            seed,
            sizes: [24, 12, 12],
            ..GenerateConfig::default()
        }
    }

    fn f(v: f32) -> Tensor<f32> {
        Tensor::full(&[2, 2, 2], v)
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.samples(), b.samples());
        let c = generate(&small(8)).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn too_many_actions_is_a_config_error() {
        let cfg = GenerateConfig {
            verbs: 2,
            nouns: 3,
            actions: 7,
            ..small(1)
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn labels_follow_action_table() {
        let d = generate(&small(3)).unwrap();
        for s in d.samples() {
            assert_eq!(d.manifest.action_table[s.action], [s.verb, s.noun]);
        }
        let mut pairs = d.manifest.action_table.clone();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 12);
    }

    #[test]
    fn zipf_zero_is_uniform() {
        let counts = quota_counts(1200, &[1.0; 12]);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(*hi as f64 / *lo as f64 <= 1.5);
        assert_eq!(counts, vec![100; 12]);
    }

    #[test]
    fn quotas_follow_weights() {
        // 218 shared 10:1 is 198.18 + 19.82; the larger remainder goes to class 1.
        assert_eq!(quota_counts(220, &[10.0, 1.0]), vec![199, 21]);
        let zipf: Vec<f64> = (1..=12).map(|r| 1.0 / r as f64).collect();
        let c = quota_counts(1200, &zipf);
        assert_eq!(c.iter().sum::<usize>(), 1200);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn window_lengths_and_prefix_law() {
        let frames: Vec<usize> = (0..CLIP_FRAMES).collect();
        assert_eq!(window(&frames, PhaseKind::Warmup).len(), 14);
        for p in [PhaseKind::Ordinary, PhaseKind::Finetune, PhaseKind::FinetuneJointVal] {
            let w = window(&frames, p);
            assert_eq!(w.len(), 11);
            assert_eq!(w, &frames[..11]);
        }
    }

    #[test]
    fn observed_span_is_eleven_frames_at_quarter_seconds() {
        let (start, gap, step) = (3.5f64, 1.0f64, 0.25f64);
        assert_eq!(((start - gap) / step) as usize + 1, OBSERVED_FRAMES);
        assert_eq!(((start - step) / step) as usize + 1, CLIP_FRAMES);
    }

    #[test]
    fn snippet_examples() {
        let constant = stack_flow_snippets(&vec![f(0.5); 4]).unwrap();
        assert!(constant.iter().all(|s| s.shape() == [10, 2, 2] && s.data().iter().all(|&v| v == 0.5)));

        let seq: Vec<_> = (0..6).map(|i| f(i as f32)).collect();
        let st = stack_flow_snippets(&seq).unwrap();
        assert_eq!(st.len(), 6);
        assert!(st[0].data().iter().all(|&v| v == 0.0));
        // Position 6 (index 5) stacks frames 2..=6 (indices 1..=5).
        for (j, chunk) in st[5].data().chunks(8).enumerate() {
            assert!(chunk.iter().all(|&v| v == (j + 1) as f32));
        }
        // Position 3 pads with two copies of the first frame.
        let firsts: Vec<f32> = st[2].data().chunks(8).map(|c| c[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(stack_flow_snippets(&[]).is_err());
    }

    #[test]
    fn clip_counts_withheld_reads() {
        let d = generate(&small(4)).unwrap();
        let s = &d.samples()[0];
        for m in ModalityKind::ALL {
            assert_eq!(d.clip(s, m, PhaseKind::Ordinary).unwrap().len(), 11);
        }
        assert_eq!(d.withheld_reads(), 0);
        let snippets = d.clip(s, ModalityKind::FlowSnippets, PhaseKind::Warmup).unwrap();
        assert_eq!(snippets.len(), 14);
        assert_eq!(snippets[0].shape(), &[10, 16, 16]);
        assert_eq!(d.withheld_reads(), 3);
        d.reset_withheld_reads();
        assert_eq!(d.withheld_reads(), 0);
    }

    #[test]
    fn masked_rgb_is_rgb_under_a_binary_mask() {
        let d = generate(&small(5)).unwrap();
        for s in d.samples().iter().take(5) {
            let rgb = s.stored_frames(ModalityKind::Rgb).unwrap();
            let masked = s.stored_frames(ModalityKind::MaskedRgb).unwrap();
            for (r, m) in rgb.iter().zip(masked) {
                assert!(r.data().iter().zip(m.data()).all(|(&a, &b)| b == a || b == 0.0));
            }
        }
    }

    #[test]
    fn obj_scores_are_distributions() {
        let d = generate(&small(6)).unwrap();
        for s in d.samples() {
            for o in s.stored_frames(ModalityKind::Obj).unwrap() {
                assert!((o.data().iter().sum::<f32>() - 1.0).abs() < 1e-5);
                assert!(o.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn label_frequency_examples() {
        let d = generate(&GenerateConfig::default()).unwrap();
        for split in Split::ALL {
            let c = label_frequencies(&d.manifest, split.name()).unwrap();
            let size = d.manifest.split_size(split);
            for task in [&c.verb, &c.noun, &c.action] {
                assert_eq!(task.iter().sum::<usize>(), size);
            }
            assert_eq!(c, LabelCounts::recount(&d.manifest, d.split(split)));
            assert_eq!(marginal_counts(&d.manifest, &c.action), (c.verb.clone(), c.noun.clone()));
        }
        assert_eq!(d.manifest.split_size(Split::Train), 1200);
        assert!(matches!(label_frequencies(&d.manifest, "holdout"), Err(Error::Config(_))));

        let single = generate(&GenerateConfig {
            verbs: 1,
            nouns: 1,
            actions: 1,
            sizes: [5, 2, 2],
            ..small(9)
        })
        .unwrap();
        let c = label_frequencies(&single.manifest, "train").unwrap();
        assert_eq!(c.action, vec![5]);
    }

    /// Nearest-centroid probe on the time-averaged observed RGB frames.
    #[test]
    fn planted_patterns_are_linearly_decodable() {
        let d = generate(&GenerateConfig::default()).unwrap();
        let a = d.manifest.actions;
        let pooled = |s: &Sample| -> Vec<f32> {
            let frames = d.clip(s, ModalityKind::Rgb, PhaseKind::Ordinary).unwrap();
            let n = frames[0].numel();
            (0..n).map(|i| frames.iter().map(|f| f.data()[i]).sum::<f32>() / frames.len() as f32).collect()
        };
        let mut centroids = vec![vec![0f32; 768]; a];
        let mut counts = vec![0usize; a];
        for s in d.split(Split::Train) {
            for (c, v) in centroids[s.action].iter_mut().zip(pooled(s)) {
                *c += v;
            }
            counts[s.action] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f32);
        }
        let (mut hit, mut total) = (0, 0);
        for s in d.split(Split::Val) {
            let x = pooled(s);
            let best = (0..a)
                .map(|k| -centroids[k].iter().zip(&x).map(|(c, v)| (c - v) * (c - v)).sum::<f32>())
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (k, v)| if v > b.1 { (k, v) } else { b })
                .0;
            hit += (best == s.action) as usize;
            total += 1;
        }
        let acc = hit as f64 / total as f64;
        assert!(acc > 2.0 / a as f64, "probe accuracy {acc}");
        assert_eq!(d.withheld_reads(), 0);
    }

    proptest! {
        #[test]
        fn snippet_stacking_preserves_length_and_causality(len in 1usize..20) {
            let seq: Vec<_> = (0..len).map(|i| f(i as f32)).collect();
            let st = stack_flow_snippets(&seq).unwrap();
            prop_assert_eq!(st.len(), len);
            for (t, s) in st.iter().enumerate() {
                let newest = s.data()[32];
                prop_assert_eq!(newest, t as f32);
                prop_assert!(s.data().iter().all(|&v| v <= t as f32));
            }
        }

        #[test]
        fn quotas_sum_and_cover(size in 12usize..2000, z in 0.0f64..3.0) {
            let w: Vec<f64> = (1..=12).map(|r| 1.0 / (r as f64).powf(z)).collect();
            let c = quota_counts(size, &w);
            prop_assert_eq!(c.iter().sum::<usize>(), size);
            prop_assert!(c.iter().all(|&x| x >= 1));
        }
    }
}
