//! Optimization loop: anchor forward, positive queries, negative queue,
//! composite loss, one Adam update per step, checkpoints.

mod adam;
mod checkpoint;
mod queue;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use queue::{NegativeQueue, QueueEntry};

use crate::config::RunConfig;
use crate::data::{sample_crop_pair, CropPair, CropParams, CrowdSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    bayesian_count_loss_grad, compact_prototype_loss_grad, contrastive_loss_grad, posterior_field_for, total_loss,
};
use crate::model::{Model, QueryMode, Scope, WeatherBank};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-step scalars. Terms switched off by a zero weight are `None`; a
/// contrastive term that could not be formed (no valid negative yet) is
/// `None` with `l_con_skipped` set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_cc: f64,
    pub l_con: Option<f64>,
    pub l_cp: Option<f64>,
    pub total: f64,
    pub queue_len: usize,
    #[serde(default)]
    pub l_con_skipped: bool,
    /// The anchor had no points and the background term is disabled.
    #[serde(default)]
    pub sample_skipped: bool,
}

/// Loss terms of one pair plus the unclipped gradient of the total, one
/// tensor per parameter in store order.
#[derive(Clone, Debug)]
pub struct StepGrads<T> {
    pub l_cc: f64,
    pub l_cp: Option<f64>,
    pub l_con: Option<f64>,
    pub l_con_skipped: bool,
    /// Weighted total as computed in the working precision.
    pub total: f64,
    pub grads: Vec<Tensor<T>>,
    /// Anchor queries, pushed to the negative queue after an update.
    pub query: Vec<T>,
}

#[derive(Clone, Debug)]
pub enum StepEval<T> {
    Done(StepGrads<T>),
    /// The anchor has no points and the background term is disabled.
    Skipped(String),
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub queue: NegativeQueue<T>,
    /// Master seed of the data-order and crop streams.
    pub rng_seed: [u8; 32],
    pub config: RunConfig,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; the model is initialised from `train.seed` and, when
    /// configured, overwritten with pretrained weights.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model_config()?, config.train.seed)?;
        if let Some(p) = &config.model.pretrained {
            model.load_weights(config.data.resolve_path(p))?;
        }
        Self::with_model(config, model)
    }

    pub fn with_model(config: RunConfig, model: Model<T>) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let optimizer = Adam::new(model.params(), t.lr, t.beta1, t.beta2, t.adam_eps);
        Ok(TrainState {
            step: 0,
            optimizer,
            queue: NegativeQueue::new(config.loss.negatives),
            rng_seed: ChaCha8Rng::seed_from_u64(t.seed).get_seed(),
            model,
            config,
        })
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(id);
        rng
    }

    /// Index of the sample used at the current step: a fresh shuffle per epoch.
    pub fn sample_index(&self, dataset_len: usize) -> usize {
        let n = dataset_len as u64;
        let epoch = self.step / n;
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut self.stream(2 * epoch + 1));
        order[(self.step % n) as usize]
    }

    /// Crop pair for the current step, a pure function of seed, step and data.
    pub fn next_pair(&self, dataset: &[CrowdSample<T>]) -> Result<CropPair<T>> {
        if dataset.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let sample = &dataset[self.sample_index(dataset.len())];
        let params = CropParams {
            crop_size: self.model.config().crop_size,
            overlap_min: self.config.data.overlap_min,
            flip_prob: self.config.data.flip_prob,
        };
        sample_crop_pair(sample, &params, &mut self.stream(2 * self.step))
    }

    /// Loss terms and parameter gradients on `pair` at the current
    /// parameters, queue and config; nothing is mutated.
    pub fn loss_and_gradients(&self, pair: &CropPair<T>) -> Result<StepEval<T>> {
        let lc = &self.config.loss;
        let mcfg = self.model.config();
        let anchor = &pair.anchor;
        let x = mcfg.normalization.apply(&anchor.image);
        let label = Some(anchor.weather);

        let (rows, cols) = (x.shape()[1] / mcfg.output_stride, x.shape()[2] / mcfg.output_stride);
        let field = match posterior_field_for::<T>(&anchor.points, rows, cols, mcfg.output_stride, lc) {
            Ok(f) => f,
            Err(Error::Validation(msg)) => return Ok(StepEval::Skipped(msg)),
            Err(e) => return Err(e),
        };

        // positive queries first, so the tape below only holds the anchor pass
        let use_con = lc.lambda2 > 0.0 && mcfg.query_mode != QueryMode::Label;
        let negatives: Vec<Vec<T>> = if use_con {
            self.queue
                .negatives(&anchor.image_id)
                .into_iter()
                .map(<[T]>::to_vec)
                .collect()
        } else {
            Vec::new()
        };
        let xp = mcfg.normalization.apply(&pair.positive.image);
        let positive_const = if use_con && !negatives.is_empty() && !lc.positive_gradient {
            Some(self.model.weather_queries(&xp, label)?.tokens)
        } else {
            None
        };

        let mut g = Graph::new();
        let mut sc = Scope::new(&mut g, self.model.params(), true);
        let img = sc.g.constant(x);
        let tr = self.model.trace_forward(&mut sc, img, label)?;

        let (cc_val, cc_grad) = bayesian_count_loss_grad(sc.g.value(tr.density), &field)?;
        let non_finite = |term: &str| Error::NonFinite { term: term.into() };
        if !cc_val.is_finite() {
            return Err(non_finite("l_cc"));
        }
        let l_cc = sc.g.scalar_fn(&[tr.density], cc_val, vec![cc_grad]);
        let mut total = l_cc;
        let mut cp_val = None;
        if lc.lambda1 > 0.0 {
            let bank = sc.p(self.model.bank_param());
            let wb = WeatherBank::new(sc.g.value(bank).clone())?;
            if !wb.prototypes.all_finite() {
                return Err(non_finite("l_cp"));
            }
            let (v, grad) = compact_prototype_loss_grad(&wb)?;
            let node = sc.g.scalar_fn(&[bank], v, vec![grad]);
            let node = sc.g.scale(node, T::lit(lc.lambda1));
            total = sc.g.add(total, node);
            cp_val = Some(v);
        }
        let mut con_val = None;
        let con_skipped = use_con && negatives.is_empty();
        if use_con && !negatives.is_empty() {
            let refs: Vec<&[T]> = negatives.iter().map(Vec::as_slice).collect();
            let (pos_var, pos_vals) = match positive_const {
                Some(t) => (None, t),
                None => {
                    let pimg = sc.g.constant(xp);
                    let (_, q) = self.model.trace_weather_branch(&mut sc, pimg, label)?;
                    (Some(q), sc.g.value(q).clone())
                }
            };
            let v = sc.g.value(tr.queries).clone();
            if !v.all_finite() || !pos_vals.all_finite() {
                return Err(non_finite("l_con"));
            }
            let cg = contrastive_loss_grad(v.data(), pos_vals.data(), &refs, lc.tau)?;
            let dq = Tensor::from_vec(v.shape(), cg.d_query)?;
            let node = match pos_var {
                Some(p) => {
                    let dp = Tensor::from_vec(pos_vals.shape(), cg.d_positive)?;
                    sc.g.scalar_fn(&[tr.queries, p], cg.value, vec![dq, dp])
                }
                None => sc.g.scalar_fn(&[tr.queries], cg.value, vec![dq]),
            };
            let node = sc.g.scale(node, T::lit(lc.lambda2));
            total = sc.g.add(total, node);
            con_val = Some(cg.value);
        }

        total_loss(cc_val, cp_val.unwrap_or(T::zero()), con_val.unwrap_or(T::zero()), lc)?;
        let total_val = g.value(total).data()[0];
        if !total_val.is_finite() {
            return Err(Error::NonFinite { term: "total".into() });
        }
        let query = g.value(tr.queries).data().to_vec();
        let grads = g.backward(total).for_params(self.model.params());
        Ok(StepEval::Done(StepGrads {
            l_cc: cc_val.as_f64(),
            l_cp: cp_val.map(Scalar::as_f64),
            l_con: con_val.map(Scalar::as_f64),
            l_con_skipped: con_skipped,
            total: total_val.as_f64(),
            grads,
            query,
        }))
    }

    /// One optimization step on `pair`.
    pub fn train_step(&mut self, pair: &CropPair<T>) -> Result<LossReport> {
        let ev = match self.loss_and_gradients(pair)? {
            StepEval::Done(ev) => ev,
            StepEval::Skipped(msg) => {
                log::warn!("step {}: skipping {}: {msg}", self.step + 1, pair.anchor.image_id);
                self.step += 1;
                return Ok(LossReport {
                    step: self.step,
                    l_cc: 0.0,
                    l_con: None,
                    l_cp: None,
                    total: 0.0,
                    queue_len: self.queue.len(),
                    l_con_skipped: false,
                    sample_skipped: true,
                });
            }
        };
        let mut grads = ev.grads;
        if let Some(c) = self.config.train.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        self.optimizer.update(self.model.params_mut(), &grads);
        if cfg!(debug_assertions) && !self.model.params().get(self.model.bank_param()).all_finite() {
            return Err(Error::NonFinite {
                term: "weather bank".into(),
            });
        }

        self.step += 1;
        self.queue.push_negative(&ev.query, &pair.anchor.image_id, self.step);
        let lc = &self.config.loss;
        Ok(LossReport {
            step: self.step,
            l_cc: ev.l_cc,
            l_con: ev.l_con,
            l_cp: ev.l_cp,
            total: ev.l_cc + lc.lambda1 * ev.l_cp.unwrap_or(0.0) + lc.lambda2 * ev.l_con.unwrap_or(0.0),
            queue_len: self.queue.len(),
            l_con_skipped: ev.l_con_skipped,
            sample_skipped: false,
        })
    }

    /// Draws the pair for the current step and trains on it.
    pub fn step_on(&mut self, dataset: &[CrowdSample<T>]) -> Result<LossReport> {
        let pair = self.next_pair(dataset)?;
        self.train_step(&pair)
    }

    /// Trains until `step == until`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        dataset: &[CrowdSample<T>],
        until: u64,
        mut on_step: impl FnMut(&Self, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut out = Vec::new();
        while self.step < until {
            let r = self.step_on(dataset)?;
            on_step(self, &r)?;
            out.push(r);
        }
        Ok(out)
    }
}
