//! Encoder, recurrent cell and classifier heads assembled into one network.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::horst::{Horst1dCell, HorstCell, HorstConfig};
use crate::mpnnel::{readout, Dense, EdgeKind, MpnnelCell, MpnnelConfig};
use crate::params::{glorot, uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Rgb,
    Flow,
    /// Five consecutive flow frames stacked along channels.
    FlowSnippets,
    /// Per-frame object confidence vector.
    Obj,
    MaskedRgb,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 5] = [
        ModalityKind::Rgb,
        ModalityKind::Flow,
        ModalityKind::FlowSnippets,
        ModalityKind::Obj,
        ModalityKind::MaskedRgb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Rgb => "rgb",
            ModalityKind::Flow => "flow",
            ModalityKind::FlowSnippets => "flow_snippets",
            ModalityKind::Obj => "obj",
            ModalityKind::MaskedRgb => "masked_rgb",
        }
    }

    /// Channel count of spatial modalities; `None` for the 1-D obj stream.
    pub fn channels(self) -> Option<usize> {
        match self {
            ModalityKind::Rgb | ModalityKind::MaskedRgb => Some(3),
            ModalityKind::Flow => Some(2),
            ModalityKind::FlowSnippets => Some(10),
            ModalityKind::Obj => None,
        }
    }

    pub fn is_spatial(self) -> bool {
        self.channels().is_some()
    }

    pub fn frame_shape(self, frame_size: usize, k_obj: usize) -> Vec<usize> {
        match self.channels() {
            Some(c) => vec![c, frame_size, frame_size],
            None => vec![k_obj],
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Horst,
    Mpnnel,
    MpnnelTb,
    MpnnelCtp,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [CellKind::Horst, CellKind::Mpnnel, CellKind::MpnnelTb, CellKind::MpnnelCtp];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Horst => "horst",
            CellKind::Mpnnel => "mpnnel",
            CellKind::MpnnelTb => "mpnnel_tb",
            CellKind::MpnnelCtp => "mpnnel_ctp",
        }
    }

    pub fn edge_kind(self) -> Option<EdgeKind> {
        match self {
            CellKind::Horst => None,
            CellKind::Mpnnel => Some(EdgeKind::Implicit),
            CellKind::MpnnelTb => Some(EdgeKind::TemplateBank),
            CellKind::MpnnelCtp => Some(EdgeKind::ClassToken),
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown cell kind '{s}'")))
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality: ModalityKind,
    pub cell: CellKind,
    pub verbs: usize,
    pub nouns: usize,
    pub actions: usize,
    pub frame_size: usize,
    pub k_obj: usize,
    /// Encoder widths; the last one is the feature channel count `C_f`.
    pub encoder_channels: [usize; 2],
    /// HORST order `S`.
    pub order: usize,
    pub filter_kernel: usize,
    /// MPNNEL vertex width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Template-bank size `M`.
    pub templates: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modality: ModalityKind::Rgb,
            cell: CellKind::Horst,
            verbs: 6,
            nouns: 8,
            actions: 12,
            frame_size: 16,
            k_obj: 20,
            encoder_channels: [16, 32],
            order: 4,
            filter_kernel: 7,
            dim: 32,
            heads: 2,
            templates: 4,
            seed: 0,
        }
    }
}

fn conv_out(n: usize) -> usize {
    // kernel 3, stride 2, padding 1
    (n + 2 - 3) / 2 + 1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.verbs == 0 || self.nouns == 0 || self.actions == 0 {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        if self.modality.is_spatial() && self.frame_size < 2 {
            return Err(Error::Config("frame_size must be at least 2".into()));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        if self.modality == ModalityKind::Obj && self.k_obj == 0 {
            return Err(Error::Config("k_obj must be positive".into()));
        }
        Ok(())
    }

    /// Extent of the encoder output map.
    pub fn feature_size(&self) -> usize {
        conv_out(conv_out(self.frame_size))
    }

    pub fn frame_shape(&self) -> Vec<usize> {
        self.modality.frame_shape(self.frame_size, self.k_obj)
    }

    /// Shape of one encoded frame as seen by the cell.
    pub fn feature_shape(&self) -> Vec<usize> {
        if self.modality.is_spatial() {
            let s = self.feature_size();
            vec![self.encoder_channels[1], s, s]
        } else {
            vec![self.k_obj]
        }
    }
}

/// Two stride-2 3×3 convolutions with ReLU; stands in for a pretrained backbone.
#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, c_in: usize, widths: [usize; 2], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut conv = |name: &str, ci: usize, co: usize| -> Result<(ParamId, ParamId)> {
            let bound = glorot(ci * 9, co * 9);
            Ok((
                store.add(&format!("encoder.{name}.weight"), ParamGroup::Encoder, uniform(rng, &[co, ci, 3, 3], bound))?,
                store.add(&format!("encoder.{name}.bias"), ParamGroup::Encoder, Tensor::zeros(&[co]))?,
            ))
        };
        Ok(Self {
            conv1: conv("conv1", c_in, widths[0])?,
            conv2: conv("conv2", widths[0], widths[1])?,
        })
    }

    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = x.conv2d(p.var(self.conv1.0), p.var(self.conv1.1), 2, 1)?.relu();
        Ok(h.conv2d(p.var(self.conv2.0), p.var(self.conv2.1), 2, 1)?.relu())
    }
}

/// Independent verb, noun and action classifiers over a pooled feature.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub verb: Dense,
    pub noun: Dense,
    pub action: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct TaskLogits<'t, T: Real> {
    pub verb: Var<'t, T>,
    pub noun: Var<'t, T>,
    pub action: Var<'t, T>,
}

impl Heads {
    fn new<T: Real>(store: &mut ParamStore<T>, d: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            verb: Dense::new(store, "head.verb", ParamGroup::Body, d, cfg.verbs, rng)?,
            noun: Dense::new(store, "head.noun", ParamGroup::Body, d, cfg.nouns, rng)?,
            action: Dense::new(store, "head.action", ParamGroup::Body, d, cfg.actions, rng)?,
        })
    }

    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, pooled: Var<'t, T>) -> Result<TaskLogits<'t, T>> {
        Ok(TaskLogits {
            verb: self.verb.apply_vec(p, pooled)?,
            noun: self.noun.apply_vec(p, pooled)?,
            action: self.action.apply_vec(p, pooled)?,
        })
    }
}

#[derive(Clone, Debug)]
enum Cell {
    Horst(HorstCell),
    Horst1d(Horst1dCell),
    Mpnnel(MpnnelCell),
}

/// Per-step logits of a rollout plus the class-token logits of the last step.
pub struct Rollout<'t, T: Real> {
    pub steps: Vec<TaskLogits<'t, T>>,
    /// `(verb[1,V], noun[1,N])` from the class tokens, CTP cells only.
    pub aux: Option<(Var<'t, T>, Var<'t, T>)>,
}

impl<'t, T: Real> Rollout<'t, T> {
    /// Anticipation logits: those of the last observed frame.
    pub fn last(&self) -> &TaskLogits<'t, T> {
        self.steps.last().expect("rollout has at least one step")
    }
}

/// Softmax scores of the final step.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub verb: Tensor<T>,
    pub noun: Tensor<T>,
    pub action: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AnticipationModel<T: Real> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Option<Encoder>,
    cell: Cell,
    heads: Heads,
}

impl<T: Real> AnticipationModel<T> {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = match config.modality.channels() {
            Some(c) => Some(Encoder::new(&mut store, c, config.encoder_channels, &mut rng)?),
            None => None,
        };
        let feature = config.feature_shape();
        let (cell, head_dim) = match (config.cell.edge_kind(), encoder.is_some()) {
            (None, true) => {
                let cfg = HorstConfig {
                    channels: feature[0],
                    order: config.order,
                    filter_kernel: config.filter_kernel,
                };
                (Cell::Horst(HorstCell::new(&mut store, "horst", cfg, &mut rng)?), feature[0])
            }
            (None, false) => (
                Cell::Horst1d(Horst1dCell::new(&mut store, "horst", config.k_obj, config.order, &mut rng)?),
                config.k_obj,
            ),
            (Some(edges), spatial) => {
                let (vertices, input) = if spatial {
                    (feature[1] * feature[2], feature[0])
                } else {
                    (config.k_obj, config.k_obj)
                };
                let cfg = MpnnelConfig {
                    dim: config.dim,
                    heads: config.heads,
                    vertices,
                    edges,
                    templates: config.templates,
                };
                let cell = MpnnelCell::new(
                    &mut store,
                    "mpnnel",
                    cfg,
                    input,
                    !spatial,
                    config.verbs,
                    config.nouns,
                    &mut rng,
                )?;
                (Cell::Mpnnel(cell), config.dim)
            }
        };
        let heads = Heads::new(&mut store, head_dim, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            cell,
            heads,
        })
    }

    /// Rebuilds the layout from `config` and installs `store`, which must
    /// hold exactly the same names and shapes.
    pub fn with_params(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for e in store.entries() {
            model.store.set(&e.name, e.value.clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn cast<U: Real>(&self) -> AnticipationModel<U> {
        AnticipationModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder,
            cell: self.cell.clone(),
            heads: self.heads,
        }
    }

    fn check_frame(&self, frame: &[usize]) -> Result<()> {
        let want = self.config.frame_shape();
        if frame != want.as_slice() {
            return Err(Error::Config(format!(
                "{} frame of shape {frame:?} does not match expected {want:?}",
                self.config.modality
            )));
        }
        Ok(())
    }

    /// Backbone features of one frame. The obj stream passes through unchanged.
    pub fn encode_frame<'t>(&self, p: &Bound<'t, T>, frame: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_frame(&frame.shape())?;
        match &self.encoder {
            Some(enc) => enc.apply(p, frame),
            None => Ok(frame),
        }
    }

    /// Steps the cell over already encoded frames.
    pub fn rollout_encoded<'t>(&self, p: &Bound<'t, T>, features: &[Var<'t, T>]) -> Result<Rollout<'t, T>> {
        if features.is_empty() {
            return Err(Error::Contract("rollout over an empty clip".into()));
        }
        let want = self.config.feature_shape();
        let mut steps = Vec::with_capacity(features.len());
        let mut aux = None;
        match &self.cell {
            Cell::Horst(cell) => {
                let mut queue = cell.new_queue();
                for &f in features {
                    let h = cell.step(p, f, &mut queue)?;
                    steps.push(self.heads.apply(p, h.global_avg_pool()?)?);
                }
            }
            Cell::Horst1d(cell) => {
                let mut queue = cell.new_queue();
                for &f in features {
                    let h = cell.step(p, f, &mut queue)?;
                    steps.push(self.heads.apply(p, h)?);
                }
            }
            Cell::Mpnnel(cell) => {
                let mut state = None;
                for &f in features {
                    if f.shape() != want {
                        return Err(Error::dim("rollout feature", &f.shape(), &want));
                    }
                    let out = cell.step(p, f, state)?;
                    steps.push(self.heads.apply(p, readout(out.state)?)?);
                    state = Some(out.state);
                    aux = out.token_logits;
                }
            }
        }
        Ok(Rollout { steps, aux })
    }

    pub fn rollout<'t>(&self, p: &Bound<'t, T>, frames: &[Var<'t, T>]) -> Result<Rollout<'t, T>> {
        let features = frames
            .iter()
            .map(|&f| self.encode_frame(p, f))
            .collect::<Result<Vec<_>>>()?;
        self.rollout_encoded(p, &features)
    }

    /// Encoder outputs as plain tensors, for phases where the encoder is frozen.
    pub fn precompute_features(&self, frames: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if self.encoder.is_none() {
            for f in frames {
                self.check_frame(f.shape())?;
            }
            return Ok(frames.to_vec());
        }
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        frames
            .iter()
            .map(|f| Ok(self.encode_frame(&p, tape.constant(f.clone()))?.value()))
            .collect()
    }

    fn scores(logits: &TaskLogits<'_, T>) -> Result<Prediction<T>> {
        let soft = |v: Var<'_, T>| -> Result<Tensor<T>> {
            let n = v.shape()[1];
            v.softmax(1)?.value().reshaped(&[n])
        };
        Ok(Prediction {
            verb: soft(logits.verb)?,
            noun: soft(logits.noun)?,
            action: soft(logits.action)?,
        })
    }

    /// Softmax scores from the final observed frame.
    pub fn predict(&self, frames: &[Tensor<T>]) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let vars: Vec<_> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        Self::scores(self.rollout(&p, &vars)?.last())
    }

    /// [`predict`](Self::predict) on frames already passed through the encoder.
    pub fn predict_encoded(&self, features: &[Tensor<T>]) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let vars: Vec<_> = features.iter().map(|f| tape.constant(f.clone())).collect();
        Self::scores(self.rollout_encoded(&p, &vars)?.last())
    }

    /// Parameter names, for diagnostics.
    pub fn param_names(&self) -> Vec<String> {
        self.store.entries().iter().map(|e| e.name.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::params::ParamGroup;

    fn config(cell: CellKind, modality: ModalityKind) -> ModelConfig {
        ModelConfig {
            cell,
            modality,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn frames(cfg: &ModelConfig, t: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| uniform(&mut rng, &cfg.frame_shape(), 1.0)).collect()
    }

    #[test]
    fn encoder_maps_16_to_4() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feature_shape(), vec![32, 4, 4]);
        let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
        let f = m.precompute_features(&frames(&cfg, 1, 1)).unwrap();
        assert_eq!(f[0].shape(), &[32, 4, 4]);
    }

    #[test]
    fn zero_frame_with_zero_bias_encodes_to_zero() {
        let cfg = ModelConfig::default();
        let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
        let f = m.precompute_features(&[Tensor::zeros(&cfg.frame_shape())]).unwrap();
        assert!(f[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_encoder_is_deterministic() {
        let cfg = ModelConfig::default();
        let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
        let x = frames(&cfg, 1, 2);
        assert_eq!(m.precompute_features(&x).unwrap(), m.precompute_features(&x).unwrap());
    }

    #[test]
    fn obj_stream_passes_through() {
        let cfg = config(CellKind::Horst, ModalityKind::Obj);
        let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
        assert!(m.param_names().iter().all(|n| !n.starts_with("encoder")));
        let x = frames(&cfg, 2, 3);
        assert_eq!(m.precompute_features(&x).unwrap(), x);
    }

    #[test]
    fn mismatched_frame_is_a_config_error() {
        let cfg = ModelConfig::default();
        let m = AnticipationModel::<f64>::new(cfg).unwrap();
        let err = m.predict(&[Tensor::zeros(&[2, 16, 16])]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = m.predict(&[]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rollout_emits_one_step_per_frame() {
        for cell in CellKind::ALL {
            for modality in [ModalityKind::Rgb, ModalityKind::Obj, ModalityKind::FlowSnippets] {
                let cfg = config(cell, modality);
                let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
                let tape = Tape::new();
                let p = m.params().bind_frozen(&tape);
                for t in [1, 11] {
                    let x: Vec<_> = frames(&cfg, t, 4).into_iter().map(|f| tape.constant(f)).collect();
                    let r = m.rollout(&p, &x).unwrap();
                    assert_eq!(r.steps.len(), t);
                    assert_eq!(r.aux.is_some(), cell == CellKind::MpnnelCtp);
                    assert_eq!(r.last().action.shape(), vec![1, 12]);
                }
            }
        }
    }

    #[test]
    fn reversing_the_clip_changes_the_prediction() {
        for cell in CellKind::ALL {
            let cfg = config(cell, ModalityKind::Rgb);
            let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
            let mut x = frames(&cfg, 5, 5);
            let fwd = m.predict(&x).unwrap();
            x.reverse();
            let bwd = m.predict(&x).unwrap();
            assert!(fwd.action.max_abs_diff(&bwd.action) > 1e-9, "{cell}");
        }
    }

    #[test]
    fn zero_heads_give_uniform_scores() {
        let cfg = ModelConfig::default();
        let mut m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
        for e in m.params_mut().values_mut() {
            if e.name.starts_with("head.") {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
        let s = m.predict(&frames(&cfg, 3, 6)).unwrap();
        assert!(s.verb.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
        assert!(s.noun.data().iter().all(|&v| (v - 1.0 / 8.0).abs() < 1e-12));
        assert!(s.action.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn scores_sum_to_one() {
        for cell in CellKind::ALL {
            let cfg = config(cell, ModalityKind::Rgb);
            let m = AnticipationModel::<f32>::new(cfg.clone()).unwrap();
            let x: Vec<Tensor<f32>> = frames(&cfg, 4, 7).iter().map(|f| f.cast()).collect();
            let s = m.predict(&x).unwrap();
            for t in [&s.verb, &s.noun, &s.action] {
                assert!((t.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
            let e = m.predict_encoded(&m.precompute_features(&x).unwrap()).unwrap();
            assert_eq!(s, e);
        }
    }

    #[test]
    fn frozen_encoder_receives_no_gradient() {
        let cfg = ModelConfig::default();
        let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
        let tape = Tape::new();
        let p = m.params().bind(&tape, |g| g == ParamGroup::Body);
        let x: Vec<_> = frames(&cfg, 2, 8).into_iter().map(|f| tape.constant(f)).collect();
        let loss = m.rollout(&p, &x).unwrap().last().action.log_softmax().pick(&[0]).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        for (e, grad) in m.params().entries().iter().zip(p.gradients(&g)) {
            if e.group == ParamGroup::Encoder {
                assert!(grad.is_none(), "{}", e.name);
            } else if e.name.starts_with("head.action") || e.name.starts_with("horst.") {
                assert!(grad.is_some(), "{}", e.name);
            }
        }
    }

    #[test]
    fn with_params_round_trips() {
        let cfg = config(CellKind::MpnnelTb, ModalityKind::Rgb);
        let a = AnticipationModel::<f32>::new(cfg.clone()).unwrap();
        let b = AnticipationModel::<f32>::with_params(
            ModelConfig { seed: 99, ..cfg.clone() },
            a.params().clone(),
        )
        .unwrap();
        let x: Vec<Tensor<f32>> = frames(&cfg, 3, 9).iter().map(|f| f.cast()).collect();
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
        let other = AnticipationModel::<f32>::new(config(CellKind::Horst, ModalityKind::Rgb)).unwrap();
        assert!(AnticipationModel::<f32>::with_params(cfg, other.params().clone()).is_err());
    }

    /// Encoder weights stay fixed here: perturbing them moves ReLU inputs
    /// across zero and central differences stop being meaningful. The
    /// encoder ops are checked on their own elsewhere.
    #[test]
    fn end_to_end_gradient_check_through_cells_and_heads() {
        let cases = [
            (CellKind::Horst, ModalityKind::Rgb),
            (CellKind::Horst, ModalityKind::Obj),
            (CellKind::Mpnnel, ModalityKind::Rgb),
            (CellKind::MpnnelTb, ModalityKind::Rgb),
            (CellKind::MpnnelCtp, ModalityKind::Rgb),
            (CellKind::MpnnelCtp, ModalityKind::Obj),
        ];
        for (cell, modality) in cases {
            let cfg = ModelConfig {
                cell,
                modality,
                frame_size: 8,
                k_obj: 4,
                encoder_channels: [2, 4],
                order: 2,
                filter_kernel: 3,
                dim: 4,
                verbs: 2,
                nouns: 2,
                actions: 3,
                ..ModelConfig::default()
            };
            let m = AnticipationModel::<f64>::new(cfg.clone()).unwrap();
            let x = frames(&cfg, 3, 10);
            let entries = m.params().entries();
            let body: Vec<Tensor<f64>> = entries
                .iter()
                .filter(|e| e.group == ParamGroup::Body)
                .map(|e| e.value.clone())
                .collect();
            let err = grad_check_many(
                |tape, vars| {
                    let mut free = vars.iter();
                    let all = entries
                        .iter()
                        .map(|e| match e.group {
                            ParamGroup::Body => *free.next().unwrap(),
                            ParamGroup::Encoder => tape.constant(e.value.clone()),
                        })
                        .collect();
                    let p = Bound::from_vars(all);
                    let xs: Vec<_> = x.iter().map(|f| tape.constant(f.clone())).collect();
                    let r = m.rollout(&p, &xs)?;
                    let mut loss = r.last().action.log_softmax().pick(&[2])?.sum();
                    loss = loss.add(r.last().verb.log_softmax().pick(&[1])?.sum())?;
                    if let Some((v, n)) = r.aux {
                        loss = loss.add(v.log_softmax().pick(&[1])?.sum())?;
                        loss = loss.add(n.log_softmax().pick(&[0])?.sum())?;
                    }
                    Ok(loss)
                },
                &body,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{cell} {modality}: {err}");
        }
    }
}
