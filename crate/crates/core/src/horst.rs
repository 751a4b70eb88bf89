//! Higher-order recurrent space-time attention cell.
//!
//! The cell keeps its last `S` outputs in a FIFO [`StateQueue`]. Each step
//! the encoded frame acts as the query against the queued states through a
//! decomposed attention: a temporal branch produces one softmax weight per
//! queued state from globally pooled query/key features, and a spatial
//! branch produces one `(0,1)` location mask per state from its pooled
//! channel statistics ([`spatial_filter`]). The output is
//!
//! ```text
//! h_t = x_t + proj_out( Σ_i a_i · (m_i ⊙ V_i) )
//! ```
//!
//! and `h_t` is pushed onto the queue, evicting the oldest state once full.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{glorot, uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Bounded FIFO of the most recent states, newest last.
#[derive(Clone, Debug)]
pub struct StateQueue<E> {
    capacity: usize,
    entries: VecDeque<E>,
}

impl<E> StateQueue<E> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("state queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `state`, returning the evicted oldest entry when full.
    pub fn push(&mut self, state: E) -> Option<E> {
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(state);
        evicted
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &E> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&E> {
        self.entries.back()
    }
}

/// `sigmoid(conv([max_c x, mean_c x]) + b)` for `x[C,H,W]`, giving a
/// `[1,H,W]` map in `(0,1)`. The kernel is `[1,2,k,k]` with odd `k`,
/// applied with same-padding.
pub fn spatial_filter<'t, T: Real>(
    x: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let ks = kernel.shape();
    if ks.len() != 4 || ks[0] != 1 || ks[1] != 2 {
        return Err(Error::dim("spatial_filter kernel", &x.shape(), &ks));
    }
    let pooled = Var::concat(&[x.max_pool_channels()?, x.mean_pool_channels()?], 0)?;
    let pad = ks[2] / 2;
    Ok(pooled.conv2d(kernel, bias, 1, pad)?.sigmoid_open())
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialFilterParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
}

impl SpatialFilterParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("spatial filter kernel must be odd, got {size}")));
        }
        let kernel = store.add(
            &format!("{prefix}.kernel"),
            ParamGroup::Body,
            uniform(rng, &[1, 2, size, size], glorot(2 * size * size, size * size)),
        )?;
        let bias = store.add(&format!("{prefix}.bias"), ParamGroup::Body, Tensor::zeros(&[1]))?;
        Ok(Self { kernel, bias, size })
    }

    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        spatial_filter(x, p.var(self.kernel), p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HorstConfig {
    /// State channels `D`.
    pub channels: usize,
    /// Recurrence order `S`: number of past states attended to.
    pub order: usize,
    /// Odd spatial-filter kernel size.
    pub filter_kernel: usize,
}

impl Default for HorstConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            order: 4,
            filter_kernel: 7,
        }
    }
}

impl HorstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("HORST channels must be positive".into()));
        }
        if !(1..=8).contains(&self.order) {
            return Err(Error::Config(format!("HORST order must be in 1..=8, got {}", self.order)));
        }
        if self.filter_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial filter kernel must be odd, got {}",
                self.filter_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Proj {
    weight: ParamId,
    bias: ParamId,
}

impl Proj {
    fn conv1x1<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                &format!("{name}.weight"),
                ParamGroup::Body,
                uniform(rng, &[d, d, 1, 1], glorot(d, d)),
            )?,
            bias: store.add(&format!("{name}.bias"), ParamGroup::Body, Tensor::zeros(&[d]))?,
        })
    }

    fn dense<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                &format!("{name}.weight"),
                ParamGroup::Body,
                uniform(rng, &[d_in, d_out], glorot(d_in, d_out)),
            )?,
            bias: store.add(&format!("{name}.bias"), ParamGroup::Body, Tensor::zeros(&[d_out]))?,
        })
    }

    fn conv<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.var(self.weight), p.var(self.bias), 1, 0)
    }

    fn row<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p.var(self.weight), p.var(self.bias))
    }
}

/// Output of [`HorstCell::st_attention_parts`], exposing both branches.
pub struct AttentionParts<'t, T: Real> {
    pub output: Var<'t, T>,
    /// Temporal weights `[s]`, one per queued state in queue order.
    pub temporal: Var<'t, T>,
    /// Spatial masks `[1,H,W]`, one per queued state.
    pub masks: Vec<Var<'t, T>>,
}

/// HORST cell over `[D,H,W]` feature maps.
#[derive(Clone, Debug)]
pub struct HorstCell {
    config: HorstConfig,
    query: Proj,
    key: Proj,
    value: Proj,
    out: Proj,
    filter: SpatialFilterParams,
}

impl HorstCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: HorstConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        Ok(Self {
            config,
            query: Proj::conv1x1(store, &format!("{prefix}.query"), d, rng)?,
            key: Proj::conv1x1(store, &format!("{prefix}.key"), d, rng)?,
            value: Proj::conv1x1(store, &format!("{prefix}.value"), d, rng)?,
            out: Proj::conv1x1(store, &format!("{prefix}.out"), d, rng)?,
            filter: SpatialFilterParams::new(store, &format!("{prefix}.filter"), config.filter_kernel, rng)?,
        })
    }

    pub fn config(&self) -> &HorstConfig {
        &self.config
    }

    pub fn new_queue<E>(&self) -> StateQueue<E> {
        StateQueue::new(self.config.order).expect("validated order")
    }

    fn check_state<T: Real>(&self, x: Var<'_, T>, reference: Option<&[usize]>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.config.channels {
            return Err(Error::dim("horst state", &s, &[self.config.channels]));
        }
        if let Some(r) = reference {
            if r != s.as_slice() {
                return Err(Error::dim("horst state", &s, r));
            }
        }
        Ok(())
    }

    pub fn st_attention<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        query: Var<'t, T>,
        queue: &StateQueue<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        Ok(self.st_attention_parts(p, query, queue)?.output)
    }

    pub fn st_attention_parts<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        query: Var<'t, T>,
        queue: &StateQueue<Var<'t, T>>,
    ) -> Result<AttentionParts<'t, T>> {
        if queue.is_empty() {
            return Err(Error::Contract("st_attention on an empty state queue".into()));
        }
        self.check_state(query, None)?;
        let qshape = query.shape();
        for state in queue.iter() {
            self.check_state(*state, Some(&qshape))?;
        }
        let d = self.config.channels;
        let inv_sqrt_d = 1.0 / num_traits::Float::sqrt(d as f64);

        let q_bar = self.query.conv(p, query)?.global_avg_pool()?.reshape(&[1, d])?;
        let mut scores = Vec::with_capacity(queue.len());
        let mut gated = Vec::with_capacity(queue.len());
        let mut masks = Vec::with_capacity(queue.len());
        for state in queue.iter() {
            let k = self.key.conv(p, *state)?;
            let v = self.value.conv(p, *state)?;
            let k_bar = k.global_avg_pool()?.reshape(&[d, 1])?;
            scores.push(q_bar.matmul(k_bar)?.reshape(&[1])?.scale(inv_sqrt_d));
            let mask = self.filter.apply(p, k)?;
            gated.push(v.mul_channel_mask(mask)?);
            masks.push(mask);
        }
        let temporal = Var::concat(&scores, 0)?.softmax(0)?;
        let mut mixed: Option<Var<'t, T>> = None;
        for (i, g) in gated.into_iter().enumerate() {
            let term = g.scale_by(temporal.narrow(0, i, 1)?)?;
            mixed = Some(match mixed {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
        let output = self.out.conv(p, mixed.expect("non-empty queue"))?;
        Ok(AttentionParts {
            output,
            temporal,
            masks,
        })
    }

    /// One recurrent step. Seeds an empty queue with `x_t`, computes
    /// `h_t = x_t + st_attention(x_t, queue)` and pushes `h_t`.
    pub fn step<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x_t: Var<'t, T>,
        queue: &mut StateQueue<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        self.check_state(x_t, queue.newest().map(|v| v.shape()).as_deref())?;
        if queue.is_empty() {
            queue.push(x_t);
        }
        let h_t = x_t.add(self.st_attention(p, x_t, queue)?)?;
        queue.push(h_t);
        Ok(h_t)
    }
}

/// HORST cell on `[D]` vectors: dense maps replace the 1×1 convolutions and
/// only the temporal branch remains.
#[derive(Clone, Debug)]
pub struct Horst1dCell {
    dim: usize,
    order: usize,
    query: Proj,
    key: Proj,
    value: Proj,
    out: Proj,
}

impl Horst1dCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        order: usize,
        rng: &mut R,
    ) -> Result<Self> {
        HorstConfig {
            channels: dim,
            order,
            filter_kernel: 1,
        }
        .validate()?;
        Ok(Self {
            dim,
            order,
            query: Proj::dense(store, &format!("{prefix}.query"), dim, dim, rng)?,
            key: Proj::dense(store, &format!("{prefix}.key"), dim, dim, rng)?,
            value: Proj::dense(store, &format!("{prefix}.value"), dim, dim, rng)?,
            out: Proj::dense(store, &format!("{prefix}.out"), dim, dim, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn new_queue<E>(&self) -> StateQueue<E> {
        StateQueue::new(self.order).expect("validated order")
    }

    /// Temporal attention over queued vectors; returns `(output[D], weights[s])`.
    pub fn attention<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        query: Var<'t, T>,
        queue: &StateQueue<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if queue.is_empty() {
            return Err(Error::Contract("attention on an empty state queue".into()));
        }
        let d = self.dim;
        if query.shape() != [d] {
            return Err(Error::dim("horst_1d state", &query.shape(), &[d]));
        }
        let inv_sqrt_d = 1.0 / num_traits::Float::sqrt(d as f64);
        let q = self.query.row(p, query.reshape(&[1, d])?)?;
        let mut scores = Vec::with_capacity(queue.len());
        let mut values = Vec::with_capacity(queue.len());
        for state in queue.iter() {
            if state.shape() != [d] {
                return Err(Error::dim("horst_1d state", &state.shape(), &[d]));
            }
            let row = state.reshape(&[1, d])?;
            let k = self.key.row(p, row)?;
            scores.push(q.matmul(k.transpose()?)?.reshape(&[1])?.scale(inv_sqrt_d));
            values.push(self.value.row(p, row)?);
        }
        let weights = Var::concat(&scores, 0)?.softmax(0)?;
        let mut mixed: Option<Var<'t, T>> = None;
        for (i, v) in values.into_iter().enumerate() {
            let term = v.scale_by(weights.narrow(0, i, 1)?)?;
            mixed = Some(match mixed {
                None => term,
                Some(acc) => acc.add(term)?,
            });
        }
        let out = self.out.row(p, mixed.expect("non-empty queue"))?.reshape(&[d])?;
        Ok((out, weights))
    }

    pub fn step<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x_t: Var<'t, T>,
        queue: &mut StateQueue<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        if x_t.shape() != [self.dim] {
            return Err(Error::dim("horst_1d step", &x_t.shape(), &[self.dim]));
        }
        if queue.is_empty() {
            queue.push(x_t);
        }
        let (att, _) = self.attention(p, x_t, queue)?;
        let h_t = x_t.add(att)?;
        queue.push(h_t);
        Ok(h_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::tape::Tape;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        uniform(rng, shape, 1.0)
    }

    fn cell(d: usize, s: usize, k: usize, seed: u64) -> (ParamStore<f64>, HorstCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = HorstCell::new(
            &mut store,
            "horst",
            HorstConfig {
                channels: d,
                order: s,
                filter_kernel: k,
            },
            &mut rng,
        )
        .unwrap();
        (store, cell)
    }

    fn set_identity_projections(store: &mut ParamStore<f64>, d: usize) {
        for name in ["query", "key", "value", "out"] {
            let eye = Tensor::<f64>::eye(d).reshaped(&[d, d, 1, 1]).unwrap();
            store.set(&format!("horst.{name}.weight"), eye).unwrap();
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn spatial_filter_of_zeros_is_one_half() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[3, 4, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = tape.constant(uniform(&mut rng, &[1, 2, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = spatial_filter(x, k, b).unwrap().value();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn spatial_filter_saturates_with_large_bias() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(rand_tensor(&mut rng, &[2, 3, 3]));
        let k = tape.constant(Tensor::<f64>::zeros(&[1, 2, 7, 7]));
        let b = tape.constant(t(&[1], &[20.0]));
        let y = spatial_filter(x, k, b).unwrap().value();
        assert!(y.data().iter().all(|&v| v >= 1.0 - 1e-6 && v < 1.0));
    }

    #[test]
    fn spatial_filter_hand_evaluation() {
        // w_max = 1, w_avg = -1: sigmoid(max - mean) per pixel.
        let x = [1.0, -2.0, 0.5, 3.0, 4.0, 0.0, 0.5, -1.0];
        let tape = Tape::new();
        let xv = tape.constant(t(&[2, 2, 2], &x));
        let k = tape.constant(t(&[1, 2, 1, 1], &[1.0, -1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = spatial_filter(xv, k, b).unwrap().value();
        for p in 0..4 {
            let (a, c) = (x[p], x[4 + p]);
            let want = sigmoid(a.max(c) - (a + c) / 2.0);
            assert!((y.data()[p] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_filter_rejects_bad_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(spatial_filter(x, k, b), Err(Error::Dimension { .. })));
        let k = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(spatial_filter(x, k, b), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_queue_has_unit_weight() {
        let (store, cell) = cell(3, 4, 3, 7);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = tape.constant(rand_tensor(&mut rng, &[3, 4, 4]));
        let mut queue = cell.new_queue();
        queue.push(tape.constant(rand_tensor(&mut rng, &[3, 4, 4])));
        let parts = cell.st_attention_parts(&p, q, &queue).unwrap();
        assert_eq!(parts.temporal.value().data(), &[1.0]);
    }

    #[test]
    fn identical_states_share_weight_evenly() {
        let (store, cell) = cell(3, 4, 3, 8);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = tape.constant(rand_tensor(&mut rng, &[3, 4, 4]));
        let s = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut queue = cell.new_queue();
        queue.push(tape.constant(s.clone()));
        queue.push(tape.constant(s));
        let w = cell.st_attention_parts(&p, q, &queue).unwrap().temporal.value();
        assert!((w.data()[0] - 0.5).abs() < 1e-12 && (w.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_queue_is_a_contract_error() {
        let (store, cell) = cell(2, 2, 3, 9);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let q = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let queue = cell.new_queue();
        assert!(matches!(cell.st_attention(&p, q, &queue), Err(Error::Contract(_))));
    }

    /// Direct loop evaluation of the attention at S=2, D=2, H=W=2 with
    /// identity projections and a 1×1 spatial-filter kernel.
    #[test]
    fn st_attention_hand_evaluation() {
        let (mut store, cell) = cell(2, 2, 1, 10);
        set_identity_projections(&mut store, 2);
        store.set("horst.filter.kernel", t(&[1, 2, 1, 1], &[0.7, -0.4])).unwrap();
        store.set("horst.filter.bias", t(&[1], &[0.1])).unwrap();
        let q = [0.5, -1.0, 2.0, 0.0, 1.0, 1.5, -0.5, 0.25];
        let s1 = [1.0, 0.0, -1.0, 2.0, 0.5, 0.5, 1.0, -2.0];
        let s2 = [-0.3, 0.8, 0.2, 0.1, 1.2, -0.7, 0.4, 0.9];

        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut queue = cell.new_queue();
        queue.push(tape.constant(t(&[2, 2, 2], &s1)));
        queue.push(tape.constant(t(&[2, 2, 2], &s2)));
        let got = cell
            .st_attention(&p, tape.constant(t(&[2, 2, 2], &q)), &queue)
            .unwrap()
            .value();

        let gap = |x: &[f64]| [(x[0] + x[1] + x[2] + x[3]) / 4.0, (x[4] + x[5] + x[6] + x[7]) / 4.0];
        let qb = gap(&q);
        let score = |s: &[f64]| {
            let kb = gap(s);
            (qb[0] * kb[0] + qb[1] * kb[1]) / 2f64.sqrt()
        };
        let (e1, e2) = (score(&s1).exp(), score(&s2).exp());
        let (a1, a2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let mask = |s: &[f64], px: usize| {
            let (c0, c1) = (s[px], s[4 + px]);
            sigmoid(0.7 * c0.max(c1) - 0.4 * (c0 + c1) / 2.0 + 0.1)
        };
        for c in 0..2 {
            for px in 0..4 {
                let want = a1 * mask(&s1, px) * s1[c * 4 + px] + a2 * mask(&s2, px) * s2[c * 4 + px];
                assert!((got.data()[c * 4 + px] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fifo_keeps_last_states_in_order() {
        let (store, cell) = cell(2, 3, 3, 11);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut queue = cell.new_queue();
        let mut outputs = vec![];
        for step in 0..5 {
            let x = tape.constant(Tensor::full(&[2, 2, 2], step as f64 * 0.1));
            outputs.push(cell.step(&p, x, &mut queue).unwrap());
        }
        let held: Vec<_> = queue.iter().map(|v| v.value()).collect();
        assert_eq!(held.len(), 3);
        for (h, o) in held.iter().zip(&outputs[2..]) {
            assert_eq!(h, &o.value());
        }
    }

    #[test]
    fn zero_projections_pass_input_through() {
        let (mut store, cell) = cell(3, 2, 3, 12);
        for e in store.values_mut() {
            if !e.name.contains("filter") {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut queue = cell.new_queue();
        for _ in 0..3 {
            let x = rand_tensor(&mut rng, &[3, 4, 4]);
            let h = cell.step(&p, tape.constant(x.clone()), &mut queue).unwrap();
            assert_eq!(h.value(), x);
        }
    }

    #[test]
    fn order_one_depends_only_on_previous_state() {
        // With S=1 the queue holds one state, so two histories that end in the
        // same state yield the same next output.
        let (store, cell) = cell(2, 1, 3, 13);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prev = rand_tensor(&mut rng, &[2, 3, 3]);
        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        let run = |history: &[Tensor<f64>]| {
            let mut queue = cell.new_queue();
            for hx in history {
                cell.step(&p, tape.constant(hx.clone()), &mut queue).unwrap();
            }
            queue.push(tape.constant(prev.clone()));
            cell.step(&p, tape.constant(x.clone()), &mut queue).unwrap().value()
        };
        let a = run(&[rand_tensor(&mut rng, &[2, 3, 3])]);
        let b = run(&[rand_tensor(&mut rng, &[2, 3, 3]), rand_tensor(&mut rng, &[2, 3, 3])]);
        assert_eq!(a, b);
    }

    #[test]
    fn step_rejects_mismatched_extents() {
        let (store, cell) = cell(2, 2, 3, 14);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut queue = cell.new_queue();
        let bad = tape.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(matches!(cell.step(&p, bad, &mut queue), Err(Error::Dimension { .. })));
        cell.step(&p, tape.constant(Tensor::zeros(&[2, 2, 2])), &mut queue).unwrap();
        let other = tape.constant(Tensor::zeros(&[2, 3, 3]));
        assert!(matches!(cell.step(&p, other, &mut queue), Err(Error::Dimension { .. })));
    }

    // eps = 1e-4 keeps central differences off the channel-max kinks.
    #[test]
    fn four_step_rollout_matches_finite_differences() {
        let (store, cell) = cell(2, 2, 3, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<_> = (0..4).map(|_| rand_tensor(&mut rng, &[2, 3, 3])).collect();
        let weights = rand_tensor(&mut rng, &[2, 3, 3]);
        let mut inputs: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
        inputs.push(frames[0].clone());
        let n_params = store.len();
        let err = grad_check_many(
            |tape, vars| {
                let p = Bound::from_vars(vars[..n_params].to_vec());
                let mut queue = cell.new_queue();
                let mut h = cell.step(&p, vars[n_params], &mut queue)?;
                for f in &frames[1..] {
                    h = cell.step(&p, tape.constant(f.clone()), &mut queue)?;
                }
                Ok(h.mul(tape.constant(weights.clone()))?.sum())
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn horst_1d_hand_evaluation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cell = Horst1dCell::new(&mut store, "obj", 3, 2, &mut rng).unwrap();
        let wq = [0.2, -0.1, 0.0, 0.3, 0.5, -0.2, 0.1, 0.0, 0.4];
        let wk = [0.1, 0.2, 0.3, -0.3, 0.0, 0.1, 0.2, 0.2, -0.1];
        let wv = [1.0, 0.0, 0.5, 0.0, 1.0, 0.0, -0.5, 0.0, 1.0];
        let wo = [0.3, 0.1, 0.0, 0.0, 0.2, 0.1, 0.1, 0.0, 0.3];
        for (name, w) in [("query", wq), ("key", wk), ("value", wv), ("out", wo)] {
            store.set(&format!("obj.{name}.weight"), t(&[3, 3], &w)).unwrap();
        }
        store.set("obj.out.bias", t(&[3], &[0.01, -0.02, 0.03])).unwrap();
        let s1 = [0.5, 1.0, -0.5];
        let s2 = [-1.0, 0.25, 0.75];
        let x = [1.0, -1.0, 2.0];

        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut queue = cell.new_queue();
        queue.push(tape.constant(t(&[3], &s1)));
        queue.push(tape.constant(t(&[3], &s2)));
        let h = cell.step(&p, tape.constant(t(&[3], &x)), &mut queue).unwrap().value();

        let vm = |v: &[f64], w: &[f64]| -> [f64; 3] {
            let mut o = [0.0; 3];
            for j in 0..3 {
                for i in 0..3 {
                    o[j] += v[i] * w[i * 3 + j];
                }
            }
            o
        };
        let q = vm(&x, &wq);
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let (sc1, sc2) = (dot(q, vm(&s1, &wk)) / 3f64.sqrt(), dot(q, vm(&s2, &wk)) / 3f64.sqrt());
        let (a1, a2) = (sc1.exp() / (sc1.exp() + sc2.exp()), sc2.exp() / (sc1.exp() + sc2.exp()));
        let (v1, v2) = (vm(&s1, &wv), vm(&s2, &wv));
        let mix = [a1 * v1[0] + a2 * v2[0], a1 * v1[1] + a2 * v2[1], a1 * v1[2] + a2 * v2[2]];
        let out = vm(&mix, &wo);
        let bias = [0.01, -0.02, 0.03];
        for j in 0..3 {
            assert!((h.data()[j] - (x[j] + out[j] + bias[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn horst_1d_zero_projections_and_singleton_weight() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cell = Horst1dCell::new(&mut store, "obj", 4, 3, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut queue = cell.new_queue();
        queue.push(tape.constant(uniform(&mut rng, &[4], 1.0)));
        let (_, w) = cell.attention(&p, tape.constant(uniform(&mut rng, &[4], 1.0)), &queue).unwrap();
        assert_eq!(w.value().data(), &[1.0]);

        let mut zeroed = store.clone();
        for e in zeroed.values_mut() {
            e.value = Tensor::zeros(e.value.shape());
        }
        let tape = Tape::new();
        let p = zeroed.bind_frozen(&tape);
        let mut queue = cell.new_queue();
        let x = uniform::<f64, _>(&mut rng, &[4], 1.0);
        let h = cell.step(&p, tape.constant(x.clone()), &mut queue).unwrap();
        assert_eq!(h.value(), x);
    }

    proptest! {
        #[test]
        fn fifo_law(cap in 1usize..=8, n in 1usize..=30) {
            let mut q = StateQueue::new(cap).unwrap();
            for i in 0..n {
                q.push(i);
                prop_assert!(q.len() <= cap);
            }
            let held: Vec<usize> = q.iter().copied().collect();
            let start = n.saturating_sub(cap);
            prop_assert_eq!(held, (start..n).collect::<Vec<_>>());
        }

        #[test]
        fn spatial_filter_is_strictly_bounded(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::new();
            let x = tape.constant(uniform::<f64, _>(&mut rng, &[3, 5, 5], scale));
            let k = tape.constant(uniform(&mut rng, &[1, 2, 3, 3], 1.0));
            let b = tape.constant(uniform(&mut rng, &[1], 1.0));
            let y = spatial_filter(x, k, b).unwrap().value();
            prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn temporal_weights_are_permutation_equivariant(seed in 0u64..200) {
            let (store, cell) = cell(3, 4, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let states: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, &[3, 3, 3])).collect();
            let q = rand_tensor(&mut rng, &[3, 3, 3]);
            let weights = |order: &[usize]| {
                let tape = Tape::new();
                let p = store.bind_frozen(&tape);
                let mut queue = cell.new_queue();
                for &i in order {
                    queue.push(tape.constant(states[i].clone()));
                }
                cell.st_attention_parts(&p, tape.constant(q.clone()), &queue).unwrap().temporal.value()
            };
            let base = weights(&[0, 1, 2]);
            let perm = weights(&[2, 0, 1]);
            prop_assert!((base.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (pi, &src) in [2usize, 0, 1].iter().enumerate() {
                prop_assert!((perm.data()[pi] - base.data()[src]).abs() < 1e-12);
            }
        }
    }
}
