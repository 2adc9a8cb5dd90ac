//! Layer set used by the Re-ID and completion networks.
//!
//! Layers own only [`ParamId`]s; values live in a [`ParamStore`] and are put
//! on a tape with [`ParamStore::bind`] for each forward pass.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::spatial::GridIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, t: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => t.relu(x),
            Activation::Tanh => t.tanh(x),
            Activation::Sigmoid => t.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), input, output, input, rng)?;
        let b = if bias {
            Some(store.add_uniform(format!("{name}.b"), 1, output, input, rng)?)
        } else {
            None
        };
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = t.matmul(x, p[self.w]);
        match self.b {
            Some(b) => t.add_row(y, p[b]),
            None => y,
        }
    }
}

/// Stack of affine layers, each followed by its own activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; hidden layers use `hidden`, the last
    /// layer uses `last`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Invalid("mlp needs at least input and output dims".into()));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        let mut activations = Vec::with_capacity(n);
        for i in 0..n {
            layers.push(Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], true, rng)?);
            activations.push(if i + 1 == n { last } else { hidden });
        }
        Ok(Self { layers, activations })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (l, a) in self.layers.iter().zip(&self.activations) {
            h = l.forward(t, p, h);
            h = a.apply(t, h);
        }
        h
    }
}

/// Runs `x` through an MLP, checking the input width first.
pub fn mlp_forward(t: &mut Tape, p: &Bound, mlp: &Mlp, x: Var) -> Result<Var> {
    let (r, c) = t.shape(x);
    if c != mlp.input_dim() {
        return Err(Error::Shape {
            op: "mlp_forward",
            lhs: (r, c),
            rhs: (mlp.input_dim(), mlp.layers[0].output),
        });
    }
    Ok(mlp.forward(t, p, x))
}

/// Standard GRU cell:
///
/// ```text
/// r  = sigmoid(x W_ir + h W_hr + b_r)
/// z  = sigmoid(x W_iz + h W_hz + b_z)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    wir: ParamId,
    wiz: ParamId,
    win: ParamId,
    whr: ParamId,
    whz: ParamId,
    whn: ParamId,
    br: ParamId,
    bz: ParamId,
    bin: ParamId,
    bhn: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |suffix: &str, rows: usize, cols: usize| {
            store.add_uniform(format!("{name}.{suffix}"), rows, cols, hidden, rng)
        };
        Ok(Self {
            wir: w("w_ir", input, hidden)?,
            wiz: w("w_iz", input, hidden)?,
            win: w("w_in", input, hidden)?,
            whr: w("w_hr", hidden, hidden)?,
            whz: w("w_hz", hidden, hidden)?,
            whn: w("w_hn", hidden, hidden)?,
            br: w("b_r", 1, hidden)?,
            bz: w("b_z", 1, hidden)?,
            bin: w("b_in", 1, hidden)?,
            bhn: w("b_hn", 1, hidden)?,
            input,
            hidden,
        })
    }

    pub fn step(&self, t: &mut Tape, p: &Bound, x: Var, h: Var) -> Var {
        let gate = |t: &mut Tape, wi: ParamId, wh: ParamId, b: ParamId| {
            let a = t.matmul(x, p[wi]);
            let c = t.matmul(h, p[wh]);
            let s = t.add(a, c);
            let s = t.add_row(s, p[b]);
            t.sigmoid(s)
        };
        let r = gate(t, self.wir, self.whr, self.br);
        let z = gate(t, self.wiz, self.whz, self.bz);
        let xn = t.matmul(x, p[self.win]);
        let xn = t.add_row(xn, p[self.bin]);
        let hn = t.matmul(h, p[self.whn]);
        let hn = t.add_row(hn, p[self.bhn]);
        let rh = t.mul(r, hn);
        let pre = t.add(xn, rh);
        let n = t.tanh(pre);
        // h' = n + z * (h - n)
        let d = t.sub(h, n);
        let zd = t.mul(z, d);
        t.add(n, zd)
    }

    /// Runs the cell over `xs` (each `B x input`). When `masks` is given, a
    /// row whose mask is false at a step keeps its previous state. With
    /// `reverse`, steps are visited from last to first. The returned states
    /// are indexed by step position either way.
    pub fn run(
        &self,
        t: &mut Tape,
        p: &Bound,
        xs: &[Var],
        h0: Var,
        masks: Option<&[Vec<bool>]>,
        reverse: bool,
    ) -> Vec<Var> {
        let n = xs.len();
        let mut out = vec![h0; n];
        let mut h = h0;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for s in order {
            let mask = masks.map(|m| &m[s]);
            let any = mask.is_none_or(|m| m.iter().any(|&b| b));
            if any {
                let hn = self.step(t, p, xs[s], h);
                h = match mask {
                    Some(m) if !m.iter().all(|&b| b) => t.select_rows(hn, h, m.clone()),
                    _ => hn,
                };
            }
            out[s] = h;
        }
        out
    }
}

/// Runs a GRU over a `T x D` sequence. Returns all hidden states (`T x H`)
/// and the last one.
pub fn gru_forward(t: &mut Tape, p: &Bound, cell: &GruCell, seq: Var, h0: Var) -> Result<(Var, Var)> {
    let (steps, width) = t.shape(seq);
    if steps == 0 {
        return Err(Error::Empty("gru_forward sequence".into()));
    }
    if width != cell.input || t.shape(h0) != (1, cell.hidden) {
        return Err(Error::Shape {
            op: "gru_forward",
            lhs: (steps, width),
            rhs: t.shape(h0),
        });
    }
    let xs: Vec<Var> = (0..steps).map(|i| t.row(seq, i)).collect();
    let hs = cell.run(t, p, &xs, h0, None, false);
    let last = hs[steps - 1];
    Ok((t.concat_rows(&hs), last))
}

/// Forward GRU pass followed by a backward pass over the reversed sequence
/// that starts from the forward pass's final state.
#[derive(Debug, Clone)]
pub struct Ugru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl Ugru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fwd: GruCell::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            bwd: GruCell::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    /// Batched encoding of right-padded sequences. Returns the backward
    /// pass's state at every step (original order) and its final state.
    pub fn encode(
        &self,
        t: &mut Tape,
        p: &Bound,
        xs: &[Var],
        h_init: Var,
        masks: Option<&[Vec<bool>]>,
    ) -> (Vec<Var>, Var) {
        let f = self.fwd.run(t, p, xs, h_init, masks, false);
        let hf = *f.last().unwrap_or(&h_init);
        let b = self.bwd.run(t, p, xs, hf, masks, true);
        let fin = *b.first().unwrap_or(&hf);
        (b, fin)
    }
}

/// UGRU over a single `T x D` sequence: (`T x H` outputs, final state).
pub fn ugru_encode(t: &mut Tape, p: &Bound, ugru: &Ugru, seq: Var, h_init: Var) -> Result<(Var, Var)> {
    let (steps, width) = t.shape(seq);
    if steps == 0 {
        return Err(Error::Empty("ugru_encode sequence".into()));
    }
    if width != ugru.fwd.input || t.shape(h_init) != (1, ugru.fwd.hidden) {
        return Err(Error::Shape {
            op: "ugru_encode",
            lhs: (steps, width),
            rhs: t.shape(h_init),
        });
    }
    let xs: Vec<Var> = (0..steps).map(|i| t.row(seq, i)).collect();
    let (outs, fin) = ugru.encode(t, p, &xs, h_init, None);
    Ok((t.concat_rows(&outs), fin))
}

/// Scaled dot-product attention weights, `m x n`. Keys with `mask[j] ==
/// false` get zero weight.
pub fn attention_weights(t: &mut Tape, q: Var, k: Var, mask: Option<&[bool]>) -> Var {
    let d = t.shape(q).1.max(1) as f64;
    let s = t.matmul_t(q, k);
    let s = t.scale(s, 1.0 / d.sqrt());
    let m = t.shape(q).0;
    let full = mask.map(|mk| mk.repeat(m));
    t.masked_softmax(s, full)
}

/// `softmax(Q K^T / sqrt(d)) V` with optional key mask. Also returns, per
/// query, whether every key was masked (that row is all zeros).
pub fn dot_attention(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<bool>)> {
    let (qs, ks, vs) = (t.shape(q), t.shape(k), t.shape(v));
    if qs.1 != ks.1 {
        return Err(Error::Shape { op: "dot_attention(q, k)", lhs: qs, rhs: ks });
    }
    if ks.0 != vs.0 {
        return Err(Error::Shape { op: "dot_attention(k, v)", lhs: ks, rhs: vs });
    }
    if let Some(m) = mask {
        if m.len() != ks.0 {
            return Err(Error::Shape { op: "dot_attention(mask)", lhs: ks, rhs: (m.len(), 1) });
        }
    }
    let empty = ks.0 == 0 || mask.is_some_and(|m| !m.iter().any(|&b| b));
    let w = attention_weights(t, q, k, mask);
    let out = if ks.0 == 0 {
        t.constant(Tensor::zeros(qs.0, vs.1))
    } else {
        t.matmul(w, v)
    };
    Ok((out, vec![empty; qs.0]))
}

/// Self- or cross-attention with learned projections and a residual.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), query_dim, hidden, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), key_dim, hidden, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), key_dim, hidden, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), hidden, query_dim, false, rng)?,
        })
    }

    /// `queries + attend(queries, keys) W_o`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, queries: Var, keys: Var, mask: Option<&[bool]>) -> Var {
        let q = self.q.forward(t, p, queries);
        let k = self.k.forward(t, p, keys);
        let v = self.v.forward(t, p, keys);
        let (a, _) = dot_attention(t, q, k, v, mask).expect("projection shapes agree");
        let o = self.o.forward(t, p, a);
        t.add(queries, o)
    }
}

/// One directed edge of a spatial attention layer. `rel` is the source
/// position minus the destination position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub dst: usize,
    pub src: usize,
    pub rel: [f64; 2],
}

/// Edges from every source strictly within `radius` of each destination,
/// ordered by destination then source.
pub fn radius_edges(dst_pos: &[[f64; 2]], src_pos: &[[f64; 2]], radius: f64) -> Vec<Edge> {
    let index = GridIndex::new(src_pos, radius.max(1.0));
    let mut edges = Vec::new();
    for (d, q) in dst_pos.iter().enumerate() {
        for s in index.within(*q, radius) {
            edges.push(Edge {
                dst: d,
                src: s,
                rel: [src_pos[s][0] - q[0], src_pos[s][1] - q[1]],
            });
        }
    }
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AgentToLane,
    LaneToAgent,
}

/// Radius-gated attention: each destination aggregates messages from the
/// sources on its incoming edges; destinations without edges pass through
/// unchanged.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    rel_k: Linear,
    rel_v: Linear,
    o: Linear,
    hidden: usize,
    pub radius: f64,
}

impl SpatialAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dst_dim: usize,
        src_dim: usize,
        hidden: usize,
        radius: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dst_dim, hidden, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), src_dim, hidden, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), src_dim, hidden, true, rng)?,
            rel_k: Linear::new(store, &format!("{name}.rel_k"), 2, hidden, false, rng)?,
            rel_v: Linear::new(store, &format!("{name}.rel_v"), 2, hidden, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), hidden, dst_dim, false, rng)?,
            hidden,
            radius,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, dst: Var, src: Var, edges: &[Edge]) -> Var {
        if edges.is_empty() {
            return dst;
        }
        let scale = 1.0 / self.radius.max(1e-6);
        let rel = Tensor::from_vec(
            edges.len(),
            2,
            edges.iter().flat_map(|e| [e.rel[0] * scale, e.rel[1] * scale]).collect(),
        )
        .unwrap();
        let rel = t.constant(rel);
        self.attend(t, p, dst, src, rel, edges)
    }

    /// Like [`forward`](Self::forward), but the destination positions are
    /// the tape value `dst_xy` (`n_dst x 2`), so the relative-position terms
    /// carry gradient back to them. Edges are taken as given.
    pub fn forward_moving(
        &self,
        t: &mut Tape,
        p: &Bound,
        dst: Var,
        dst_xy: Var,
        src: Var,
        src_pos: &[[f64; 2]],
        edges: &[Edge],
    ) -> Var {
        if edges.is_empty() {
            return dst;
        }
        let scale = 1.0 / self.radius.max(1e-6);
        let sp = Tensor::from_vec(edges.len(), 2, edges.iter().flat_map(|e| src_pos[e.src]).collect()).unwrap();
        let sp = t.constant(sp);
        let dp = t.gather_rows(dst_xy, edges.iter().map(|e| Some(e.dst)).collect());
        let rel = t.sub(sp, dp);
        let rel = t.scale(rel, scale);
        self.attend(t, p, dst, src, rel, edges)
    }

    fn attend(&self, t: &mut Tape, p: &Bound, dst: Var, src: Var, rel: Var, edges: &[Edge]) -> Var {
        let n_dst = t.shape(dst).0;
        let d_idx: Vec<usize> = edges.iter().map(|e| e.dst).collect();
        let s_idx: Vec<Option<usize>> = edges.iter().map(|e| Some(e.src)).collect();

        let q = self.q.forward(t, p, dst);
        let k = self.k.forward(t, p, src);
        let v = self.v.forward(t, p, src);
        let qe = t.gather_rows(q, d_idx.iter().map(|&d| Some(d)).collect());
        let ke = t.gather_rows(k, s_idx.clone());
        let rk = self.rel_k.forward(t, p, rel);
        let ke = t.add(ke, rk);
        let ve = t.gather_rows(v, s_idx);
        let rv = self.rel_v.forward(t, p, rel);
        let ve = t.add(ve, rv);

        let score = t.row_dot(qe, ke);
        let score = t.scale(score, 1.0 / (self.hidden as f64).sqrt());
        let alpha = t.segment_softmax(score, d_idx.clone(), n_dst);
        let msg = t.mul_col(ve, alpha);
        let agg = t.scatter_add_rows(msg, d_idx, n_dst);
        let o = self.o.forward(t, p, agg);
        t.add(dst, o)
    }
}

/// Radius-gated attention between agents and lanes in the given direction.
#[allow(clippy::too_many_arguments)]
pub fn spatial_attention(
    t: &mut Tape,
    p: &Bound,
    layer: &SpatialAttention,
    agents: (Var, &[[f64; 2]]),
    lanes: (Var, &[[f64; 2]]),
    direction: Direction,
) -> Var {
    match direction {
        Direction::AgentToLane => {
            let edges = radius_edges(lanes.1, agents.1, layer.radius);
            layer.forward(t, p, lanes.0, agents.0, &edges)
        }
        Direction::LaneToAgent => {
            let edges = radius_edges(agents.1, lanes.1, layer.radius);
            layer.forward(t, p, agents.0, lanes.0, &edges)
        }
    }
}
