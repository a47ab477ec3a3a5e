//! Small neural-network building blocks expressed over the autodiff graph.

use rand::Rng;

use crate::math::graph::{Graph, Node};
use crate::math::params::{ParamId, ParamStore};
use crate::math::tensor::Tensor;
use crate::scalar::Scalar;

/// Whether parameters participate in the current backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

fn feed<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, id: ParamId, bind: Bind) -> Node {
    match bind {
        Bind::Trainable => g.param(store, id),
        Bind::Frozen => g.frozen(store, id),
    }
}

/// Affine layer `x @ w + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::init_scaled(store, name, in_dim, out_dim, 1.0, rng)
    }

    /// Init with weight std `scale / sqrt(in_dim)`; biases start at zero.
    pub fn init_scaled<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let std = S::of_f64(scale / (in_dim as f64).sqrt());
        let w = store.add(&format!("{name}.w"), Tensor::randn(in_dim, out_dim, std, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Node,
        bind: Bind,
    ) -> Node {
        let w = feed(g, store, self.w, bind);
        let b = feed(g, store, self.b, bind);
        let xw = g.matmul(x, w);
        g.add_bias(xw, b)
    }
}

/// Multi-layer perceptron with tanh hidden activations and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::init_scaled_head(store, name, in_dim, hidden, out_dim, 1.0, rng)
    }

    /// Same as `init` but with a custom weight scale on the output layer.
    pub fn init_scaled_head<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        head_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::init(store, &format!("{name}.{i}"), prev, h, rng));
            prev = h;
        }
        layers.push(Linear::init_scaled(
            store,
            &format!("{name}.{}", hidden.len()),
            prev,
            out_dim,
            head_scale,
            rng,
        ));
        Self { layers }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Node,
        bind: Bind,
    ) -> Node {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h, bind);
            if i != last {
                h = g.tanh(h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Gated recurrent cell. Gates take the concatenated input and hidden state.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: Linear, // input -> 3H
    pub wh: Linear, // hidden -> 3H
    pub hidden: usize,
}

impl GruCell {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            wx: Linear::init(store, &format!("{name}.wx"), in_dim, 3 * hidden, rng),
            wh: Linear::init(store, &format!("{name}.wh"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    /// One step: `(x [B x I], h [B x H]) -> h' [B x H]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Node,
        h: Node,
        bind: Bind,
    ) -> Node {
        let hd = self.hidden;
        let gx = self.wx.forward(g, store, x, bind);
        let gh = self.wh.forward(g, store, h, bind);

        let gx_r = g.slice_cols(gx, 0, hd);
        let gx_u = g.slice_cols(gx, hd, 2 * hd);
        let gx_c = g.slice_cols(gx, 2 * hd, 3 * hd);
        let gh_r = g.slice_cols(gh, 0, hd);
        let gh_u = g.slice_cols(gh, hd, 2 * hd);
        let gh_c = g.slice_cols(gh, 2 * hd, 3 * hd);

        let r_pre = g.add(gx_r, gh_r);
        let reset = g.sigmoid(r_pre);
        let u_pre = g.add(gx_u, gh_u);
        let update = g.sigmoid(u_pre);
        let rh = g.mul(reset, gh_c);
        let c_pre = g.add(gx_c, rh);
        let cand = g.tanh(c_pre);

        // h' = u * h + (1 - u) * cand
        let uh = g.mul(update, h);
        let one_minus_u = g.scale(update, -S::one());
        let one_minus_u = g.add_scalar(one_minus_u, S::one());
        let uc = g.mul(one_minus_u, cand);
        g.add(uh, uc)
    }
}

/// Diagonal Gaussian parameter pair living in the graph.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mean: Node,
    pub std: Node,
}

/// Split a `[B x 2D]` head into mean and a softplus-floored stddev.
pub fn gaussian_from_head<S: Scalar>(g: &mut Graph<S>, head: Node, dim: usize, min_std: f64) -> GaussianNodes {
    let mean = g.slice_cols(head, 0, dim);
    let raw = g.slice_cols(head, dim, 2 * dim);
    let sp = g.softplus(raw);
    let std = g.add_scalar(sp, S::of_f64(min_std));
    GaussianNodes { mean, std }
}

/// Reparameterised sample `mean + std * noise` with caller-provided noise.
pub fn gaussian_sample<S: Scalar>(g: &mut Graph<S>, p: GaussianNodes, noise: Node) -> Node {
    let scaled = g.mul(p.std, noise);
    g.add(p.mean, scaled)
}

/// Row-wise KL( N(mean_q, std_q) || N(mean_p, std_p) ) for diagonal Gaussians, `[B x 1]`.
pub fn gaussian_kl<S: Scalar>(
    g: &mut Graph<S>,
    q: GaussianNodes,
    p: GaussianNodes,
) -> Node {
    // ln(std_p / std_q) + (std_q^2 + (mean_q - mean_p)^2) / (2 std_p^2) - 1/2
    let lq = g.ln(q.std);
    let lp = g.ln(p.std);
    let log_ratio = g.sub(lp, lq);
    let var_q = g.square(q.std);
    let dmean = g.sub(q.mean, p.mean);
    let dmean2 = g.square(dmean);
    let num = g.add(var_q, dmean2);
    let var_p = g.square(p.std);
    let denom = g.scale(var_p, S::of_f64(2.0));
    let frac = g.div(num, denom);
    let sum = g.add(log_ratio, frac);
    let sum = g.add_scalar(sum, S::of_f64(-0.5));
    g.sum_cols(sum)
}

/// Row-wise Gaussian NLL with unit variance, dropped constants: `0.5 * sum((x - mean)^2)`.
pub fn gaussian_nll_unit<S: Scalar>(g: &mut Graph<S>, mean: Node, target: Node) -> Node {
    let d = g.sub(mean, target);
    let sq = g.square(d);
    let s = g.sum_cols(sq);
    g.scale(s, S::of_f64(0.5))
}

/// Row-wise Bernoulli NLL from logits: `softplus(logit) - logit * target`.
pub fn bernoulli_nll_logits<S: Scalar>(g: &mut Graph<S>, logits: Node, target: Node) -> Node {
    let sp = g.softplus(logits);
    let lt = g.mul(logits, target);
    let diff = g.sub(sp, lt);
    g.sum_cols(diff)
}
