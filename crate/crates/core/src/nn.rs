//! Parameter storage and the small set of layers the model is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Var;
use crate::tensor::Mat;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Flat, named parameter table. Names are unique and insertion-ordered,
/// which makes checkpoints and gradient vectors line up by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

/// Scoped constructor for parameters: `builder.sub("tst").sub("layer0")`
/// produces names like `tst.layer0.attn.w`.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let m = Mat::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..=bound));
        self.add(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Mat::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(self.rng);
            z * std
        });
        self.add(name, m)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Mat::filled(rows, cols, v))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = pb.uniform("w", in_dim, out_dim, bound);
        let b = bias.then(|| pb.zeros("b", 1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let y = x.matmul(g.param(self.w));
        match self.b {
            Some(b) => y.add_row(g.param(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        Self {
            gamma: pb.constant("gamma", 1, dim, 1.0),
            beta: pb.zeros("beta", 1, dim),
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        x.layer_norm_rows(LN_EPS)
            .mul_row(g.param(self.gamma))
            .add_row(g.param(self.beta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Stack of linear layers with an activation between them (none after
/// the last one).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(pb: &mut ParamBuilder<'_>, dims: &[usize], act: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut pb.sub(&format!("l{i}")), w[0], w[1], true))
            .collect();
        Self { layers, act }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x, |h, (i, l)| {
            let y = l.forward(h);
            if i < last {
                self.act.apply(y)
            } else {
                y
            }
        })
    }
}

/// Gated recurrent unit, gate order (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: pb.uniform("w_ih", in_dim, 3 * hidden, bound),
            w_hh: pb.uniform("w_hh", hidden, 3 * hidden, bound),
            b_ih: pb.uniform("b_ih", 1, 3 * hidden, bound),
            b_hh: pb.uniform("b_hh", 1, 3 * hidden, bound),
            hidden,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>, h: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let d = self.hidden;
        let gi = x.matmul(g.param(self.w_ih)).add_row(g.param(self.b_ih));
        let gh = h.matmul(g.param(self.w_hh)).add_row(g.param(self.b_hh));
        let r = gi.slice_cols(0, d).add(gh.slice_cols(0, d)).sigmoid();
        let z = gi.slice_cols(d, d).add(gh.slice_cols(d, d)).sigmoid();
        let n = gi
            .slice_cols(2 * d, d)
            .add(r.mul(gh.slice_cols(2 * d, d)))
            .tanh();
        // (1 - z) * n + z * h
        n.add(z.mul(h.sub(n)))
    }
}

/// Scaled dot-product attention with softmax over keys:
/// `softmax(q k^T / sqrt(d)) v`, returning the output and the weights.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> (Var<'g>, Var<'g>) {
    attention_masked(q, k, v, None)
}

pub fn attention_masked<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    mask: Option<Var<'g>>,
) -> (Var<'g>, Var<'g>) {
    let d = q.cols() as f64;
    let mut logits = q.matmul_nt(k).scale(1.0 / d.sqrt());
    if let Some(m) = mask {
        logits = logits.add(m);
    }
    let w = logits.softmax_rows();
    (w.matmul(v), w)
}

/// Multi-head attention with fused projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim must divide into heads");
        Self {
            q: Linear::new(&mut pb.sub("q"), dim, dim, true),
            k: Linear::new(&mut pb.sub("k"), kv_dim, dim, true),
            v: Linear::new(&mut pb.sub("v"), kv_dim, dim, true),
            o: Linear::new(&mut pb.sub("o"), dim, dim, true),
            heads,
        }
    }

    pub fn forward<'g>(&self, queries: Var<'g>, context: Var<'g>) -> Var<'g> {
        self.forward_masked(queries, context, None)
    }

    /// Attention with an optional additive logit mask (`-inf` blocks a
    /// query/key pair).
    pub fn forward_masked<'g>(
        &self,
        queries: Var<'g>,
        context: Var<'g>,
        mask: Option<Var<'g>>,
    ) -> Var<'g> {
        let g = queries.graph();
        let q = self.q.forward(queries);
        let k = self.k.forward(context);
        let v = self.v.forward(context);
        let dh = q.cols() / self.heads;
        let out = if self.heads == 1 {
            attention_masked(q, k, v, mask).0
        } else {
            let parts: Vec<Var<'g>> = (0..self.heads)
                .map(|h| {
                    let s = h * dh;
                    let (qh, kh, vh) = (q.slice_cols(s, dh), k.slice_cols(s, dh), v.slice_cols(s, dh));
                    attention_masked(qh, kh, vh, mask).0
                })
                .collect();
            g.hstack(&parts)
        };
        self.o.forward(out)
    }
}

pub fn rng_normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}
