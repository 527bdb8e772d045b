use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormParams, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map over the last axis; `w` is `(in, out)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng));
        Dense { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Stack of affine layers with ReLU between them and none after the last.
#[derive(Clone, Debug)]
pub struct Mnl {
    pub layers: Vec<Dense>,
}

impl Mnl {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Dense::new(store, &format!("{name}.{i}"), d[0], d[1], true, rng))
            .collect();
        Mnl { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            x = l.forward(g, x);
        }
        x
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Dense::ids).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.add_uniform(format!("{name}.w"), &[cout, cin, k, k], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[cout], fan_in, rng));
        Conv { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

pub fn batch_norm(store: &mut ParamStore, name: &str, c: usize, momentum: f64, eps: f64) -> BatchNormParams {
    BatchNormParams {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
        running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
        momentum,
        eps,
    }
}

pub fn bn_ids(p: &BatchNormParams) -> Vec<ParamId> {
    vec![p.gamma, p.beta, p.running_mean, p.running_var]
}

/// `H = F(I) + shortcut(I)` with `F = conv-bn-relu-conv-bn`. The shortcut is
/// the identity unless channels or stride change, then a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: BatchNormParams,
    pub conv2: Conv,
    pub bn2: BatchNormParams,
    pub shortcut: Option<Conv>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        momentum: f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng);
        let bn1 = batch_norm(store, &format!("{name}.bn1"), cout, momentum, eps);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng);
        let bn2 = batch_norm(store, &format!("{name}.bn2"), cout, momentum, eps);
        let shortcut = (cin != cout || stride != 1)
            .then(|| Conv::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride, 0, true, rng));
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.batch_norm2d(h, &self.bn1);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = g.batch_norm2d(h, &self.bn2);
        let s = match &self.shortcut {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(h, s)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.conv1.ids();
        v.extend(bn_ids(&self.bn1));
        v.extend(self.conv2.ids());
        v.extend(bn_ids(&self.bn2));
        if let Some(s) = &self.shortcut {
            v.extend(s.ids());
        }
        v
    }
}

/// `P(n, g) = sin(θ_g n)` for even `g`, `cos(θ_g n)` for odd `g`, with
/// `θ_g = 10000^(-2g / dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub table: Tensor,
}

impl PositionalEncoding {
    pub fn theta(g: usize, dim: usize) -> f64 {
        10000f64.powf(-2.0 * g as f64 / dim as f64)
    }

    pub fn new(max_sequence: usize, dim: usize) -> Self {
        let mut data = Vec::with_capacity(max_sequence * dim);
        for n in 0..max_sequence {
            for g in 0..dim {
                let a = Self::theta(g, dim) * n as f64;
                data.push(if g % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
        PositionalEncoding {
            table: Tensor::new(&[max_sequence, dim], data),
        }
    }

    /// Rows `0..n` of the table.
    pub fn rows(&self, n: usize) -> Option<Tensor> {
        let dim = self.table.dim(1);
        (n <= self.table.dim(0)).then(|| Tensor::new(&[n, dim], self.table.data()[..n * dim].to_vec()))
    }

    /// `x + P` for `x` of shape `(B, n, dim)`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.shape(x)[1];
        let p = self
            .rows(n)
            .unwrap_or_else(|| panic!("sequence of {n} exceeds positional table of {}", self.table.dim(0)));
        let p = g.input(p);
        g.add_broadcast(x, p)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
}

impl AttentionHead {
    /// Row-stochastic `softmax((Y Q)(Y K)ᵀ / sqrt(γ))`, shape `(B, n, n)`.
    pub fn weights(&self, g: &mut Graph, y: Var, gamma: usize) -> Var {
        let q = self.q.forward(g, y);
        let k = self.k.forward(g, y);
        let s = g.bmm(q, k, true);
        let s = g.scale(s, 1.0 / (gamma as f64).sqrt());
        g.softmax(s)
    }

    pub fn forward(&self, g: &mut Graph, y: Var, gamma: usize) -> Var {
        let a = self.weights(g, y, gamma);
        let v = self.v.forward(g, y);
        g.bmm(a, v, false)
    }
}

/// One encoder layer. With `sublayers` the attention output passes through an
/// output map, residual add and layer norm, then a feed-forward block with its
/// own residual and norm; without, the layer is bare attention.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub heads: Vec<AttentionHead>,
    pub gamma: usize,
    pub out: Option<Dense>,
    pub norm1: Option<(ParamId, ParamId)>,
    pub ffn: Option<Mnl>,
    pub norm2: Option<(ParamId, ParamId)>,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        gamma: usize,
        heads: usize,
        ffn_dim: usize,
        sublayers: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let heads: Vec<AttentionHead> = (0..heads)
            .map(|h| AttentionHead {
                q: Dense::new(store, &format!("{name}.h{h}.q"), dim, gamma, false, rng),
                k: Dense::new(store, &format!("{name}.h{h}.k"), dim, gamma, false, rng),
                v: Dense::new(store, &format!("{name}.h{h}.v"), dim, gamma, false, rng),
            })
            .collect();
        let norm = |store: &mut ParamStore, n: &str| {
            (
                store.add(format!("{name}.{n}.gamma"), Tensor::full(&[dim], 1.0)),
                store.add(format!("{name}.{n}.beta"), Tensor::zeros(&[dim])),
            )
        };
        if sublayers {
            let out = Dense::new(store, &format!("{name}.out"), heads.len() * gamma, dim, true, rng);
            let norm1 = norm(store, "norm1");
            let ffn = Mnl::new(store, &format!("{name}.ffn"), &[dim, ffn_dim, dim], rng);
            let norm2 = norm(store, "norm2");
            TransformerLayer {
                heads,
                gamma,
                out: Some(out),
                norm1: Some(norm1),
                ffn: Some(ffn),
                norm2: Some(norm2),
            }
        } else {
            TransformerLayer {
                heads,
                gamma,
                out: None,
                norm1: None,
                ffn: None,
                norm2: None,
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, y: Var) -> Var {
        let outs: Vec<Var> = self.heads.iter().map(|h| h.forward(g, y, self.gamma)).collect();
        let a = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2) };
        let (Some(out), Some(n1), Some(ffn), Some(n2)) = (&self.out, self.norm1, &self.ffn, self.norm2) else {
            return a;
        };
        let a = out.forward(g, a);
        let h = g.add(y, a);
        let (g1, b1) = (g.param(n1.0), g.param(n1.1));
        let h = g.layer_norm(h, g1, b1, 1e-5);
        let f = ffn.forward(g, h);
        let h2 = g.add(h, f);
        let (g2, b2) = (g.param(n2.0), g.param(n2.1));
        g.layer_norm(h2, g2, b2, 1e-5)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self
            .heads
            .iter()
            .flat_map(|h| [h.q.ids(), h.k.ids(), h.v.ids()].concat())
            .collect();
        if let Some(o) = &self.out {
            v.extend(o.ids());
        }
        v.extend(self.norm1.iter().flat_map(|(a, b)| [*a, *b]));
        if let Some(f) = &self.ffn {
            v.extend(f.ids());
        }
        v.extend(self.norm2.iter().flat_map(|(a, b)| [*a, *b]));
        v
    }
}
