use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Places parameters on a tape at most once each.
pub(crate) struct Scope<'a, T> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    placed: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Scope {
            g,
            store,
            placed: vec![None; store.len()],
            trainable,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.placed[id.index()] {
            return v;
        }
        let v = if self.trainable {
            self.g.param(self.store, id)
        } else {
            self.g.frozen_param(self.store, id)
        };
        self.placed[id.index()] = Some(v);
        v
    }
}

pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights `[in,out]` drawn from N(0, gain/in).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let std = (gain / d_in as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.weight"), normal(rng, &[d_in, d_out], std)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn apply<T: Scalar>(&self, sc: &mut Scope<'_, T>, x: Var) -> Var {
        let (w, b) = (sc.p(self.w), sc.p(self.b));
        sc.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    /// He-normal 3×3 kernel.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        Conv {
            w: store.add(format!("{name}.weight"), normal(rng, &[c_out, c_in, 3, 3], std)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn apply<T: Scalar>(&self, sc: &mut Scope<'_, T>, x: Var, relu: bool) -> Var {
        let (w, b) = (sc.p(self.w), sc.p(self.b));
        sc.g.conv3x3(x, w, b, relu)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[width], T::one())),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn apply<T: Scalar>(&self, sc: &mut Scope<'_, T>, x: Var) -> Var {
        let (g, b) = (sc.p(self.gamma), sc.p(self.beta));
        sc.g.layer_norm(x, g, b, T::lit(1e-5))
    }
}

/// Multi-head scaled dot-product attention with input/output projections.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), width, width, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), width, width, 1.0),
            v: Linear::new(store, rng, &format!("{name}.v"), width, width, 1.0),
            out: Linear::new(store, rng, &format!("{name}.out"), width, width, 1.0),
            heads,
        }
    }

    /// `query_in [n,C]` attends over `key_in`/`value_in` `[m,C]` → `[n,C]`.
    pub fn apply<T: Scalar>(&self, sc: &mut Scope<'_, T>, query_in: Var, key_in: Var, value_in: Var) -> Var {
        let q = self.q.apply(sc, query_in);
        let k = self.k.apply(sc, key_in);
        let v = self.v.apply(sc, value_in);
        let width = sc.g.shape(q)[1];
        let d = width / self.heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    sc.g.slice_cols(q, h * d, d),
                    sc.g.slice_cols(k, h * d, d),
                    sc.g.slice_cols(v, h * d, d),
                )
            };
            let scores = sc.g.matmul_t(qh, false, kh, true);
            let scores = sc.g.scale(scores, scale);
            let probs = sc.g.softmax_rows(scores);
            outs.push(sc.g.matmul(probs, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { sc.g.concat_cols(&outs) };
        self.out.apply(sc, merged)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), width, hidden, 2.0),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, width, 1.0),
        }
    }

    pub fn apply<T: Scalar>(&self, sc: &mut Scope<'_, T>, x: Var) -> Var {
        let h = self.up.apply(sc, x);
        let h = sc.g.relu(h);
        self.down.apply(sc, h)
    }
}

/// 2-d sinusoidal encoding `[h·w, C]`: the first half of the channels
/// encodes the row, the second half the column, as interleaved sin/cos pairs.
pub(crate) fn positional_encoding<T: Scalar>(h: usize, w: usize, channels: usize) -> Tensor<T> {
    let half = channels / 2;
    let mut out = vec![T::zero(); h * w * channels];
    for r in 0..h {
        for c in 0..w {
            let row = &mut out[(r * w + c) * channels..(r * w + c + 1) * channels];
            for (offset, pos) in [(0, r as f64), (half, c as f64)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[offset + 2 * i] = T::lit((pos * freq).sin());
                    row[offset + 2 * i + 1] = T::lit((pos * freq).cos());
                }
            }
        }
    }
    Tensor::from_vec(&[h * w, channels], out).expect("posenc shape")
}
