//! Message-passing cell with learned edge estimation.
//!
//! Every timestep the frame is projected onto a fixed set of graph vertices
//! and one round of multi-head self-attention routes information between
//! them. Without further input the attention logits are the pairwise vertex
//! similarities (implicit edges). An explicit [`EdgeEstimate`] `A` may be
//! added to the logits of every head:
//!
//! * [`TemplateBank`]: `A = Σ_m softmax(selector(pool(u_t)))_m · template_m`
//! * [`ClassTokens`]: `A = s_verb ⊗ s_noun` with `s_x[i] = ⟨v_i, c_x⟩ / √D`
//!
//! Vertex features are updated with a GRU-style gate between the previous
//! features and the aggregated messages.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{glorot, uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Source of the explicit edge estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    /// No explicit `A`; attention alone defines connectivity.
    Implicit,
    TemplateBank,
    ClassToken,
}

/// `N×N` additive attention bias and where it came from.
#[derive(Clone, Copy, Debug)]
pub struct EdgeEstimate<'t, T: Real> {
    pub a: Var<'t, T>,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MpnnelConfig {
    /// Vertex feature width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Number of vertices `N`.
    pub vertices: usize,
    pub edges: EdgeKind,
    /// Template count `M` for [`EdgeKind::TemplateBank`].
    pub templates: usize,
}

impl MpnnelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.vertices == 0 {
            return Err(Error::Config("MPNNEL dim, heads and vertices must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "MPNNEL dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.edges == EdgeKind::TemplateBank && self.templates == 0 {
            return Err(Error::Config("template bank needs at least one template".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                &format!("{name}.weight"),
                group,
                uniform(rng, &[d_in, d_out], glorot(d_in, d_out)),
            )?,
            bias: store.add(&format!("{name}.bias"), group, Tensor::zeros(&[d_out]))?,
        })
    }

    /// `x[M,Din] -> [M,Dout]`.
    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p.var(self.weight), p.var(self.bias))
    }

    /// `x[Din] -> [1,Dout]`.
    pub fn apply_vec<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = x.shape().iter().product();
        self.apply(p, x.reshape(&[1, n])?)
    }
}

/// One vertex per spatial location of `feat[C,H,W]`, row-major, projected
/// to `[H·W, D]` by `feat_row · weight[C,D] + bias[D]`.
pub fn build_vertices<'t, T: Real>(
    feat: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::dim("build_vertices", &s, &weight.shape()));
    }
    let (c, plane) = (s[0], s[1] * s[2]);
    feat.reshape(&[c, plane])?.transpose()?.linear(weight, bias)
}

/// `vertex_k = scores[k] · embeddings[k]`.
pub fn build_obj_vertices<'t, T: Real>(scores: Var<'t, T>, embeddings: Var<'t, T>) -> Result<Var<'t, T>> {
    embeddings.scale_rows(scores)
}

/// Learnable adjacency templates fused by input-conditioned softmax weights.
#[derive(Clone, Copy, Debug)]
pub struct TemplateBank {
    pub templates: ParamId,
    pub selector: Dense,
    count: usize,
    vertices: usize,
}

impl TemplateBank {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        count: usize,
        vertices: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            templates: store.add(
                &format!("{prefix}.templates"),
                ParamGroup::Body,
                uniform(rng, &[count, vertices, vertices], 0.1),
            )?,
            selector: Dense::new(store, &format!("{prefix}.selector"), ParamGroup::Body, dim, count, rng)?,
            count,
            vertices,
        })
    }

    /// Fusion weights `[M]` for a pooled frame feature `[D]`.
    pub fn weights<'t, T: Real>(&self, p: &Bound<'t, T>, pooled: Var<'t, T>) -> Result<Var<'t, T>> {
        self.selector.apply_vec(p, pooled)?.reshape(&[self.count])?.softmax(0)
    }

    pub fn estimate<'t, T: Real>(&self, p: &Bound<'t, T>, pooled: Var<'t, T>) -> Result<EdgeEstimate<'t, T>> {
        let w = self.weights(p, pooled)?;
        Ok(EdgeEstimate {
            a: edges_template_bank(w, p.var(self.templates))?,
            kind: EdgeKind::TemplateBank,
        })
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }
}

/// `Σ_m weights[m] · templates[m]` for `weights[M]`, `templates[M,N,N]`.
pub fn edges_template_bank<'t, T: Real>(weights: Var<'t, T>, templates: Var<'t, T>) -> Result<Var<'t, T>> {
    let ts = templates.shape();
    if ts.len() != 3 || ts[1] != ts[2] || weights.shape() != [ts[0]] {
        return Err(Error::dim("edges_template_bank", &weights.shape(), &ts));
    }
    let (m, n) = (ts[0], ts[1]);
    weights
        .reshape(&[1, m])?
        .matmul(templates.reshape(&[m, n * n])?)?
        .reshape(&[n, n])
}

/// `A = s_verb ⊗ s_noun`, `s_x = vertices · c_x / √D`.
pub fn edges_class_token<'t, T: Real>(
    vertices: Var<'t, T>,
    c_verb: Var<'t, T>,
    c_noun: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let vs = vertices.shape();
    if vs.len() != 2 || c_verb.shape() != [vs[1]] || c_noun.shape() != [vs[1]] {
        return Err(Error::dim("edges_class_token", &vs, &c_verb.shape()));
    }
    let d = vs[1];
    let inv = 1.0 / num_traits::Float::sqrt(d as f64);
    let s_verb = vertices.matmul(c_verb.reshape(&[d, 1])?)?.scale(inv);
    let s_noun = vertices.matmul(c_noun.reshape(&[d, 1])?)?.scale(inv);
    s_verb.matmul(s_noun.transpose()?)
}

/// Verb/noun class tokens and their auxiliary classifiers.
#[derive(Clone, Copy, Debug)]
pub struct ClassTokens {
    pub verb: ParamId,
    pub noun: ParamId,
    pub verb_head: Dense,
    pub noun_head: Dense,
}

impl ClassTokens {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        verbs: usize,
        nouns: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / num_traits::Float::sqrt(dim as f64);
        Ok(Self {
            verb: store.add(&format!("{prefix}.verb"), ParamGroup::Body, uniform(rng, &[dim], bound))?,
            noun: store.add(&format!("{prefix}.noun"), ParamGroup::Body, uniform(rng, &[dim], bound))?,
            verb_head: Dense::new(store, &format!("{prefix}.verb_head"), ParamGroup::Body, dim, verbs, rng)?,
            noun_head: Dense::new(store, &format!("{prefix}.noun_head"), ParamGroup::Body, dim, nouns, rng)?,
        })
    }

    pub fn estimate<'t, T: Real>(&self, p: &Bound<'t, T>, vertices: Var<'t, T>) -> Result<EdgeEstimate<'t, T>> {
        Ok(EdgeEstimate {
            a: edges_class_token(vertices, p.var(self.verb), p.var(self.noun))?,
            kind: EdgeKind::ClassToken,
        })
    }

    /// Both tokens as rows `[2,D]`, verb first.
    pub fn rows<'t, T: Real>(&self, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let v = p.var(self.verb);
        let d = v.shape()[0];
        Var::concat(&[v.reshape(&[1, d])?, p.var(self.noun).reshape(&[1, d])?], 0)
    }
}

/// Multi-head attention with a GRU-style vertex update.
#[derive(Clone, Copy, Debug)]
pub struct MessagePassing {
    heads: usize,
    query: Dense,
    key: Dense,
    value: Dense,
    out: Dense,
    reset_in: Dense,
    reset_hidden: Dense,
    update_in: Dense,
    update_hidden: Dense,
    cand_in: Dense,
    cand_hidden: Dense,
}

/// Result of one message-passing round.
pub struct MessageOutput<'t, T: Real> {
    /// Updated vertices `[N,D]` (class-token rows removed).
    pub vertices: Var<'t, T>,
    /// Updated class-token rows `[2,D]` when tokens took part.
    pub tokens: Option<Var<'t, T>>,
    /// Per-head attention matrices over all rows, tokens included.
    pub attention: Vec<Var<'t, T>>,
}

impl MessagePassing {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let mut dense = |name: &str| Dense::new(store, &format!("{prefix}.{name}"), ParamGroup::Body, dim, dim, rng);
        Ok(Self {
            heads,
            query: dense("query")?,
            key: dense("key")?,
            value: dense("value")?,
            out: dense("out")?,
            reset_in: dense("reset_in")?,
            reset_hidden: dense("reset_hidden")?,
            update_in: dense("update_in")?,
            update_hidden: dense("update_hidden")?,
            cand_in: dense("cand_in")?,
            cand_hidden: dense("cand_hidden")?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// One round over `state[N,D]`. `edges`, when given, must be `N×N` and is
    /// added to every head's logits. `tokens[2,D]`, when given, are appended
    /// as extra rows (with zero edge bias) and returned separately.
    pub fn apply<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        state: Var<'t, T>,
        edges: Option<Var<'t, T>>,
        tokens: Option<Var<'t, T>>,
    ) -> Result<MessageOutput<'t, T>> {
        let s = state.shape();
        if s.len() != 2 {
            return Err(Error::dim("message_pass", &s, &[]));
        }
        let (n, d) = (s[0], s[1]);
        if d % self.heads != 0 {
            return Err(Error::Config(format!("dim {d} is not divisible by {} heads", self.heads)));
        }
        let tape = state.tape();
        let mut bias = match edges {
            Some(a) => {
                if a.shape() != [n, n] {
                    return Err(Error::dim("message_pass edges", &a.shape(), &[n, n]));
                }
                Some(a)
            }
            None => None,
        };
        let (x, rows) = match tokens {
            Some(tok) => {
                let ts = tok.shape();
                if ts.len() != 2 || ts[1] != d {
                    return Err(Error::dim("message_pass tokens", &ts, &s));
                }
                let extra = ts[0];
                if let Some(a) = bias {
                    let right = tape.constant(Tensor::zeros(&[n, extra]));
                    let bottom = tape.constant(Tensor::zeros(&[extra, n + extra]));
                    bias = Some(Var::concat(&[Var::concat(&[a, right], 1)?, bottom], 0)?);
                }
                (Var::concat(&[state, tok], 0)?, n + extra)
            }
            None => (state, n),
        };

        let dh = d / self.heads;
        let inv = 1.0 / num_traits::Float::sqrt(dh as f64);
        let q = self.query.apply(p, x)?;
        let k = self.key.apply(p, x)?;
        let v = self.value.apply(p, x)?;
        let mut messages = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            let vh = v.narrow(1, h * dh, dh)?;
            let mut logits = qh.matmul(kh.transpose()?)?.scale(inv);
            if let Some(a) = bias {
                logits = logits.add(a)?;
            }
            let attn = logits.softmax(1)?;
            messages.push(attn.matmul(vh)?);
            attention.push(attn);
        }
        let m = self.out.apply(p, Var::concat(&messages, 1)?)?;

        let r = self.reset_in.apply(p, m)?.add(self.reset_hidden.apply(p, x)?)?.sigmoid();
        let u = self.update_in.apply(p, m)?.add(self.update_hidden.apply(p, x)?)?.sigmoid();
        let cand = self
            .cand_in
            .apply(p, m)?
            .add(self.cand_hidden.apply(p, r.mul(x)?)?)?
            .tanh();
        let updated = u.one_minus().mul(cand)?.add(u.mul(x)?)?;

        let (vertices, tokens) = if rows > n {
            (updated.narrow(0, 0, n)?, Some(updated.narrow(0, n, rows - n)?))
        } else {
            (updated, None)
        };
        Ok(MessageOutput {
            vertices,
            tokens,
            attention,
        })
    }
}

/// Mean over vertices: `[N,D] -> [D]`.
pub fn readout<'t, T: Real>(state: Var<'t, T>) -> Result<Var<'t, T>> {
    state.mean_rows()
}

/// How frames become vertices.
#[derive(Clone, Copy, Debug)]
pub enum VertexSource {
    /// Spatial feature map `[C,H,W]`, one vertex per location.
    Spatial(Dense),
    /// Object-score vector `[K]` scaling learnable embeddings `[K,D]`.
    Objects { embeddings: ParamId },
}

#[derive(Clone, Copy, Debug)]
enum EdgeModule {
    Implicit,
    Bank(TemplateBank),
    Tokens(ClassTokens),
}

/// Output of one [`MpnnelCell::step`].
pub struct MpnnelStep<'t, T: Real> {
    pub state: Var<'t, T>,
    pub edges: Option<EdgeEstimate<'t, T>>,
    /// Auxiliary `(verb[1,V], noun[1,N])` logits from the class tokens.
    pub token_logits: Option<(Var<'t, T>, Var<'t, T>)>,
}

/// Complete MPNNEL recurrence: vertex construction, edge estimation and
/// one message-passing round per frame.
#[derive(Clone, Debug)]
pub struct MpnnelCell {
    config: MpnnelConfig,
    source: VertexSource,
    edges: EdgeModule,
    mp: MessagePassing,
}

impl MpnnelCell {
    /// `input_channels` is `C` of the spatial feature map, or `K` for the
    /// object-score variant when `objects` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: MpnnelConfig,
        input_channels: usize,
        objects: bool,
        verbs: usize,
        nouns: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let source = if objects {
            if input_channels != config.vertices {
                return Err(Error::Config(format!(
                    "object vertices ({}) must equal the score length ({input_channels})",
                    config.vertices
                )));
            }
            VertexSource::Objects {
                embeddings: store.add(
                    &format!("{prefix}.embeddings"),
                    ParamGroup::Body,
                    uniform(rng, &[input_channels, d], 1.0),
                )?,
            }
        } else {
            VertexSource::Spatial(Dense::new(
                store,
                &format!("{prefix}.vertex_proj"),
                ParamGroup::Body,
                input_channels,
                d,
                rng,
            )?)
        };
        let edges = match config.edges {
            EdgeKind::Implicit => EdgeModule::Implicit,
            EdgeKind::TemplateBank => EdgeModule::Bank(TemplateBank::new(
                store,
                &format!("{prefix}.bank"),
                d,
                config.templates,
                config.vertices,
                rng,
            )?),
            EdgeKind::ClassToken => EdgeModule::Tokens(ClassTokens::new(
                store,
                &format!("{prefix}.tokens"),
                d,
                verbs,
                nouns,
                rng,
            )?),
        };
        let mp = MessagePassing::new(store, &format!("{prefix}.mp"), d, config.heads, rng)?;
        Ok(Self {
            config,
            source,
            edges,
            mp,
        })
    }

    pub fn config(&self) -> &MpnnelConfig {
        &self.config
    }

    pub fn vertices_of<'t, T: Real>(&self, p: &Bound<'t, T>, frame: Var<'t, T>) -> Result<Var<'t, T>> {
        let u = match self.source {
            VertexSource::Spatial(proj) => build_vertices(frame, p.var(proj.weight), p.var(proj.bias))?,
            VertexSource::Objects { embeddings } => {
                let emb = p.var(embeddings);
                if frame.shape() != [emb.shape()[0]] {
                    return Err(Error::dim("build_obj_vertices", &frame.shape(), &emb.shape()));
                }
                build_obj_vertices(frame, emb)?
            }
        };
        if u.shape()[0] != self.config.vertices {
            return Err(Error::dim("mpnnel vertices", &u.shape(), &[self.config.vertices]));
        }
        Ok(u)
    }

    /// Projects `frame` to vertices `u_t`, injects them into the running
    /// state (`z = u_t + h_{t-1}`), estimates edges and passes messages.
    pub fn step<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        frame: Var<'t, T>,
        prev: Option<Var<'t, T>>,
    ) -> Result<MpnnelStep<'t, T>> {
        let u = self.vertices_of(p, frame)?;
        let z = match prev {
            Some(h) => u.add(h)?,
            None => u,
        };
        let (edges, tokens) = match &self.edges {
            EdgeModule::Implicit => (None, None),
            EdgeModule::Bank(bank) => (Some(bank.estimate(p, u.mean_rows()?)?), None),
            EdgeModule::Tokens(tok) => (Some(tok.estimate(p, z)?), Some(tok.rows(p)?)),
        };
        let out = self.mp.apply(p, z, edges.map(|e| e.a), tokens)?;
        let token_logits = match (&self.edges, out.tokens) {
            (EdgeModule::Tokens(tok), Some(rows)) => Some((
                tok.verb_head.apply(p, rows.narrow(0, 0, 1)?)?,
                tok.noun_head.apply(p, rows.narrow(0, 1, 1)?)?,
            )),
            _ => None,
        };
        Ok(MpnnelStep {
            state: out.vertices,
            edges,
            token_logits,
        })
    }
}
