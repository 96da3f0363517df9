//! The weather-aware counting network.
//!
//! Pipeline: a VGG-style trunk produces stride-`s` features; the weather
//! encoder pools them into a softmax weight vector over the prototype bank;
//! the weighted prototype sum passes through a token-wise MLP to become the
//! decoder queries; each decoder layer first lets the queries gather from
//! the spatial features and then lets the spatial features read back from
//! the updated queries; a three-conv head regresses the density map.

mod config;
mod layers;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, Preset, QueryMode};
pub(crate) use layers::Scope;
use layers::{normal, positional_encoding, Attention, Conv, FeedForward, Linear, Norm};

use crate::data::WeatherTag;
use crate::error::{Error, Result};
use crate::graph::{mix_rows, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights;

/// Spatial features stored token-major: `tokens[(row·width + col), channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub tokens: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> T {
        self.tokens.at2(row * self.width + col, ch)
    }
}

/// S prototypes of N tokens × C channels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherBank<T> {
    pub prototypes: Tensor<T>,
}

impl<T: Scalar> WeatherBank<T> {
    pub fn new(prototypes: Tensor<T>) -> Result<Self> {
        if prototypes.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "weather bank must be S×N×C, got {:?}",
                prototypes.shape()
            )));
        }
        Ok(WeatherBank { prototypes })
    }

    pub fn len(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.prototypes.shape()[2]
    }

    /// Flattened prototype `s` (length N·C).
    pub fn prototype(&self, s: usize) -> &[T] {
        let m = self.tokens() * self.channels();
        &self.prototypes.data()[s * m..(s + 1) * m]
    }
}

/// N×C query tokens and the S-vector that mixed them.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherQueries<T> {
    pub tokens: Tensor<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> WeatherQueries<T> {
    pub fn flattened(&self) -> &[T] {
        self.tokens.data()
    }
}

/// Non-negative per-cell counts.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap<T> {
    pub grid: Tensor<T>,
}

impl<T: Scalar> DensityMap<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Ok(DensityMap {
            grid: Tensor::from_vec(&[rows, cols], values)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Predicted count: the grid sum.
    pub fn count(&self) -> T {
        self.grid.sum()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub density: DensityMap<T>,
    /// Post-MLP queries (the representation used by the contrastive loss).
    pub queries: WeatherQueries<T>,
    pub weights: Vec<T>,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    tok_norm: Norm,
    feat_norm_a: Norm,
    tok_attn: Attention,
    tok_ffn_norm: Norm,
    tok_ffn: FeedForward,
    feat_norm_b: Norm,
    mem_norm: Norm,
    feat_attn: Attention,
    feat_ffn_norm: Norm,
    feat_ffn: FeedForward,
}

impl DecoderLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let h = cfg.decoder_heads;
        DecoderLayer {
            tok_norm: Norm::new(store, &format!("{name}.tok_norm"), c),
            feat_norm_a: Norm::new(store, &format!("{name}.feat_norm_a"), c),
            tok_attn: Attention::new(store, rng, &format!("{name}.tok_attn"), c, h),
            tok_ffn_norm: Norm::new(store, &format!("{name}.tok_ffn_norm"), c),
            tok_ffn: FeedForward::new(store, rng, &format!("{name}.tok_ffn"), c, cfg.ffn_hidden),
            feat_norm_b: Norm::new(store, &format!("{name}.feat_norm_b"), c),
            mem_norm: Norm::new(store, &format!("{name}.mem_norm"), c),
            feat_attn: Attention::new(store, rng, &format!("{name}.feat_attn"), c, h),
            feat_ffn_norm: Norm::new(store, &format!("{name}.feat_ffn_norm"), c),
            feat_ffn: FeedForward::new(store, rng, &format!("{name}.feat_ffn"), c, cfg.ffn_hidden),
        }
    }

    /// Pre-norm residual sublayers: tokens gather from features, then
    /// features read back from the updated tokens.
    fn trace<T: Scalar>(&self, sc: &mut Scope<'_, T>, x: Var, t: Var, pos: Var) -> (Var, Var) {
        let tn = self.tok_norm.apply(sc, t);
        let xn = self.feat_norm_a.apply(sc, x);
        let xk = sc.g.add(xn, pos);
        let a = self.tok_attn.apply(sc, tn, xk, xn);
        let t = sc.g.add(t, a);
        let tn = self.tok_ffn_norm.apply(sc, t);
        let f = self.tok_ffn.apply(sc, tn);
        let t = sc.g.add(t, f);

        let xn = self.feat_norm_b.apply(sc, x);
        let xq = sc.g.add(xn, pos);
        let mem = self.mem_norm.apply(sc, t);
        let a = self.feat_attn.apply(sc, xq, mem, mem);
        let x = sc.g.add(x, a);
        let xn = self.feat_ffn_norm.apply(sc, x);
        let f = self.feat_ffn.apply(sc, xn);
        let x = sc.g.add(x, f);
        (x, t)
    }
}

/// Traced forward pass.
pub(crate) struct Traced {
    pub density: Var,
    pub queries: Var,
    pub weights: Var,
}

pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Vec<Vec<Conv>>,
    encoder: (Linear, Linear),
    bank: ParamId,
    query_mlp: (Linear, Linear),
    decoder: Vec<DecoderLayer>,
    head: [Conv; 3],
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            backbone: self.backbone.clone(),
            encoder: self.encoder.clone(),
            bank: self.bank,
            query_mlp: self.query_mlp.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }
}

/// Fixed label → prototype index of the label-conditioned variant.
pub fn label_index(label: WeatherTag) -> Result<usize> {
    match label {
        WeatherTag::Haze => Ok(0),
        WeatherTag::Rain => Ok(1),
        WeatherTag::Snow => Ok(2),
        WeatherTag::Clear => Ok(3),
        WeatherTag::Unknown => Err(Error::Validation(
            "label-conditioned queries need a haze/rain/snow/clear label".into(),
        )),
    }
}

fn one_hot<T: Scalar>(len: usize, idx: usize) -> Vec<T> {
    (0..len).map(|i| if i == idx { T::one() } else { T::zero() }).collect()
}

/// `Σ_s weights[s]·prototypes[s]`, accumulated in prototype order.
pub fn synthesize_weather_queries<T: Scalar>(bank: &WeatherBank<T>, weights: &[T]) -> Result<WeatherQueries<T>> {
    if weights.len() != bank.len() {
        return Err(Error::Dimension(format!(
            "weight vector has {} entries, bank has {} prototypes",
            weights.len(),
            bank.len()
        )));
    }
    let rows = bank
        .prototypes
        .clone()
        .reshape(&[bank.len(), bank.tokens() * bank.channels()])?;
    let tokens = Tensor::from_vec(&[bank.tokens(), bank.channels()], mix_rows(weights, &rows))?;
    Ok(WeatherQueries {
        tokens,
        weights: weights.to_vec(),
    })
}

/// Queries of the label-conditioned variant: the labelled prototype itself.
pub fn label_conditioned_queries<T: Scalar>(bank: &WeatherBank<T>, label: WeatherTag) -> Result<WeatherQueries<T>> {
    if bank.len() != 4 {
        return Err(Error::Config(format!(
            "label-conditioned queries need a 4-prototype bank, got {}",
            bank.len()
        )));
    }
    let idx = label_index(label)?;
    Ok(WeatherQueries {
        tokens: Tensor::from_vec(&[bank.tokens(), bank.channels()], bank.prototype(idx).to_vec())?,
        weights: one_hot(4, idx),
    })
}

impl<T: Scalar> Model<T> {
    /// Builds every parameter from `config`; bit-reproducible under `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut backbone = Vec::new();
        let mut c_in = 3;
        for (si, stage) in config.backbone.iter().enumerate() {
            let mut convs = Vec::new();
            for (li, &c_out) in stage.iter().enumerate() {
                convs.push(Conv::new(&mut store, &mut rng, &format!("backbone.{si}.{li}"), c_in, c_out));
                c_in = c_out;
            }
            backbone.push(convs);
        }
        let c = config.channels;
        let s = config.prototypes;
        let encoder = (
            Linear::new(&mut store, &mut rng, "encoder.fc1", c, c, 2.0),
            Linear::new(&mut store, &mut rng, "encoder.fc2", c, s, 1.0),
        );
        let bank = store.add(
            "bank.prototypes",
            normal(&mut rng, &[s, config.tokens, c], config.bank_init_std),
        );
        let query_mlp = (
            Linear::new(&mut store, &mut rng, "query_mlp.fc1", c, c, 2.0),
            Linear::new(&mut store, &mut rng, "query_mlp.fc2", c, c, 1.0),
        );
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &mut rng, &format!("decoder.{i}"), &config))
            .collect();
        let [h1, h2] = config.head_channels;
        let head = [
            Conv::new(&mut store, &mut rng, "head.0", c, h1),
            Conv::new(&mut store, &mut rng, "head.1", h1, h2),
            Conv::new(&mut store, &mut rng, "head.2", h2, 1),
        ];
        Ok(Model {
            config,
            params: store,
            backbone,
            encoder,
            bank,
            query_mlp,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bank_param(&self) -> ParamId {
        self.bank
    }

    pub fn weather_bank(&self) -> WeatherBank<T> {
        WeatherBank {
            prototypes: self.params.get(self.bank).clone(),
        }
    }

    /// Zeroes every additive offset: conv/linear biases, layer-norm shifts
    /// and the prototype bank (the constant source of the query path).
    /// A zeroed-offset model maps an all-zero input to an all-zero density.
    pub fn zero_offsets(&mut self) {
        let ids: Vec<ParamId> = self
            .params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.ends_with(".bias") || id == self.bank
            })
            .collect();
        for id in ids {
            let t = self.params.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    /// Overwrites parameters from a named-tensor file; shape mismatches are
    /// reported together and leave the model untouched.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = weights::read_file::<T>(path.as_ref())?;
        self.params.assign_named(entries)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::write_file(path.as_ref(), self.params.iter())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Dimension(format!("image must be [3,H,W], got {shape:?}")));
        }
        let s = self.config.output_stride;
        if shape[1] == 0 || shape[2] == 0 || shape[1] % s != 0 || shape[2] % s != 0 {
            return Err(Error::Precondition(format!(
                "image {}×{} is not divisible by output stride {s}; pad it first",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }

    // ---- traced building blocks ----

    /// `[3,H,W]` → tokens `[h·w, C]` plus `(h, w)`.
    pub(crate) fn trace_backbone(&self, sc: &mut Scope<'_, T>, image: Var) -> Result<(Var, usize, usize)> {
        self.check_input(sc.g.shape(image))?;
        let mut x = image;
        let last = self.backbone.len() - 1;
        for (si, stage) in self.backbone.iter().enumerate() {
            for conv in stage {
                x = conv.apply(sc, x, true);
            }
            if si != last {
                x = sc.g.max_pool2(x);
            }
        }
        let s = sc.g.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let flat = sc.g.reshape(x, &[c, h * w]);
        Ok((sc.g.transpose(flat), h, w))
    }

    /// Global average pool → MLP → softmax, `[1,S]`.
    pub(crate) fn trace_weights(&self, sc: &mut Scope<'_, T>, tokens: Var) -> Var {
        let pooled = sc.g.mean_rows(tokens);
        let h = self.encoder.0.apply(sc, pooled);
        let h = sc.g.relu(h);
        let logits = self.encoder.1.apply(sc, h);
        sc.g.softmax_rows(logits)
    }

    /// Mixed prototypes `[N,C]` from weights `[1,S]`.
    pub(crate) fn trace_synthesis(&self, sc: &mut Scope<'_, T>, weights: Var) -> Var {
        let cfg = &self.config;
        let bank = sc.p(self.bank);
        let rows = sc.g.reshape(bank, &[cfg.prototypes, cfg.tokens * cfg.channels]);
        let mixed = sc.g.mix_rows(weights, rows);
        sc.g.reshape(mixed, &[cfg.tokens, cfg.channels])
    }

    pub(crate) fn trace_query_mlp(&self, sc: &mut Scope<'_, T>, queries: Var) -> Var {
        let h = self.query_mlp.0.apply(sc, queries);
        let h = sc.g.relu(h);
        self.query_mlp.1.apply(sc, h)
    }

    /// Weight vector `[1,S]` and post-MLP queries `[N,C]` per the configured query mode.
    pub(crate) fn trace_queries(
        &self,
        sc: &mut Scope<'_, T>,
        tokens: Var,
        label: Option<WeatherTag>,
    ) -> Result<(Var, Var)> {
        let s = self.config.prototypes;
        let weights = match self.config.query_mode {
            QueryMode::Adaptive => self.trace_weights(sc, tokens),
            QueryMode::Static => {
                let u = T::one() / T::lit(s as f64);
                sc.g.constant(Tensor::full(&[1, s], u))
            }
            QueryMode::Label => {
                let label = label.ok_or_else(|| {
                    Error::Validation("label-conditioned model needs the image's weather label".into())
                })?;
                let idx = label_index(label)?;
                sc.g.constant(Tensor::from_vec(&[1, s], one_hot(s, idx))?)
            }
        };
        let pre = self.trace_synthesis(sc, weights);
        Ok((weights, self.trace_query_mlp(sc, pre)))
    }

    pub(crate) fn trace_decoder(&self, sc: &mut Scope<'_, T>, tokens: Var, h: usize, w: usize, queries: Var) -> Var {
        let pos = sc.g.constant(positional_encoding(h, w, self.config.channels));
        let (mut x, mut t) = (tokens, queries);
        for layer in &self.decoder {
            (x, t) = layer.trace(sc, x, t, pos);
        }
        x
    }

    /// Tokens `[h·w, C]` → density `[h,w]`.
    pub(crate) fn trace_head(&self, sc: &mut Scope<'_, T>, tokens: Var, h: usize, w: usize) -> Var {
        let c = sc.g.shape(tokens)[1];
        let t = sc.g.transpose(tokens);
        let mut x = sc.g.reshape(t, &[c, h, w]);
        for conv in &self.head {
            x = conv.apply(sc, x, true);
        }
        sc.g.reshape(x, &[h, w])
    }

    pub(crate) fn trace_forward(&self, sc: &mut Scope<'_, T>, image: Var, label: Option<WeatherTag>) -> Result<Traced> {
        let (tokens, h, w) = self.trace_backbone(sc, image)?;
        let (weights, queries) = self.trace_queries(sc, tokens, label)?;
        let decoded = self.trace_decoder(sc, tokens, h, w, queries);
        let density = self.trace_head(sc, decoded, h, w);
        Ok(Traced {
            density,
            queries,
            weights,
        })
    }

    /// Backbone and weather branch only; returns `(weights, post-MLP queries)`.
    pub(crate) fn trace_weather_branch(
        &self,
        sc: &mut Scope<'_, T>,
        image: Var,
        label: Option<WeatherTag>,
    ) -> Result<(Var, Var)> {
        let (tokens, _, _) = self.trace_backbone(sc, image)?;
        self.trace_queries(sc, tokens, label)
    }

    // ---- inference API ----

    /// Features of a standardized `[3,H,W]` image.
    pub fn extract_features(&self, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, &self.params, false);
        let x = sc.g.constant(image.clone());
        let (tokens, height, width) = self.trace_backbone(&mut sc, x)?;
        Ok(FeatureMap {
            tokens: g.value(tokens).clone(),
            height,
            width,
        })
    }

    fn feature_var(&self, sc: &mut Scope<'_, T>, features: &FeatureMap<T>) -> Result<Var> {
        if features.channels() != self.config.channels {
            return Err(Error::Dimension(format!(
                "features have {} channels, model expects {}",
                features.channels(),
                self.config.channels
            )));
        }
        Ok(sc.g.constant(features.tokens.clone()))
    }

    /// Softmax weight vector over the bank (length S).
    pub fn weather_weight_vector(&self, features: &FeatureMap<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, &self.params, false);
        let f = self.feature_var(&mut sc, features)?;
        let w = self.trace_weights(&mut sc, f);
        Ok(g.value(w).data().to_vec())
    }

    /// Token-wise two-layer MLP on the queries.
    pub fn apply_query_mlp(&self, queries: &WeatherQueries<T>) -> Result<WeatherQueries<T>> {
        let (n, c) = (self.config.tokens, self.config.channels);
        if queries.tokens.shape() != [n, c] {
            return Err(Error::Dimension(format!(
                "queries must be {n}×{c}, got {:?}",
                queries.tokens.shape()
            )));
        }
        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, &self.params, false);
        let q = sc.g.constant(queries.tokens.clone());
        let out = self.trace_query_mlp(&mut sc, q);
        Ok(WeatherQueries {
            tokens: g.value(out).clone(),
            weights: queries.weights.clone(),
        })
    }

    pub fn decode_weather_aware(&self, features: &FeatureMap<T>, queries: &WeatherQueries<T>) -> Result<FeatureMap<T>> {
        if queries.tokens.shape().len() != 2 || queries.tokens.shape()[1] != self.config.channels {
            return Err(Error::Dimension(format!(
                "queries {:?} do not have {} channels",
                queries.tokens.shape(),
                self.config.channels
            )));
        }
        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, &self.params, false);
        let f = self.feature_var(&mut sc, features)?;
        let q = sc.g.constant(queries.tokens.clone());
        let out = self.trace_decoder(&mut sc, f, features.height, features.width, q);
        Ok(FeatureMap {
            tokens: g.value(out).clone(),
            height: features.height,
            width: features.width,
        })
    }

    pub fn regress_density(&self, features: &FeatureMap<T>) -> Result<DensityMap<T>> {
        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, &self.params, false);
        let f = self.feature_var(&mut sc, features)?;
        let d = self.trace_head(&mut sc, f, features.height, features.width);
        Ok(DensityMap {
            grid: g.value(d).clone(),
        })
    }

    /// Full pass on a standardized image whose sides are multiples of the output stride.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.forward_labeled(image, None)
    }

    /// As [`Model::forward`]; `label` is consulted only by label-conditioned models.
    pub fn forward_labeled(&self, image: &Tensor<T>, label: Option<WeatherTag>) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, &self.params, false);
        let x = sc.g.constant(image.clone());
        let tr = self.trace_forward(&mut sc, x, label)?;
        let weights = g.value(tr.weights).data().to_vec();
        Ok(ForwardOutput {
            density: DensityMap {
                grid: g.value(tr.density).clone(),
            },
            queries: WeatherQueries {
                tokens: g.value(tr.queries).clone(),
                weights: weights.clone(),
            },
            weights,
        })
    }

    /// Post-MLP queries of an image without running the decoder or head.
    pub fn weather_queries(&self, image: &Tensor<T>, label: Option<WeatherTag>) -> Result<WeatherQueries<T>> {
        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, &self.params, false);
        let x = sc.g.constant(image.clone());
        let (w, q) = self.trace_weather_branch(&mut sc, x, label)?;
        Ok(WeatherQueries {
            tokens: g.value(q).clone(),
            weights: g.value(w).data().to_vec(),
        })
    }
}
