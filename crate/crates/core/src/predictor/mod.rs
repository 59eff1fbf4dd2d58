//! Online demand forecasting.
//!
//! Access counts are bucketed into fixed intervals per adapter. A shared LSTM
//! with a learned per-adapter embedding reads the last `window` completed
//! intervals and outputs the probability that the adapter is requested in
//! the interval in progress. Every completed interval yields one labelled
//! example per known adapter; examples go to a bounded replay buffer from
//! which a minibatch is drawn every `train_every` observed requests.

pub mod accuracy;
pub mod adam;
pub mod lstm;
pub mod oracle;
pub mod weights;

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterId;
use crate::{Micros, US_PER_S};
pub use accuracy::{evaluate_accuracy, AccuracyReport, IntervalForecast};
pub use adam::Adam;
use lstm::sigmoid;
pub use lstm::{LstmModel, LstmParams, ModelShape, Workspace};
pub use oracle::OraclePredictor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("window has {got} counts, model expects {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("adapter {0} has no embedding")]
    UnknownAdapter(AdapterId),
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid predictor configuration: {0}")]
    InvalidConfig(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub window: usize,
    pub interval_s: f64,
    pub hidden: usize,
    pub layers: usize,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub train_every: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            window: 30,
            interval_s: 1.0,
            hidden: 64,
            layers: 2,
            embedding_dim: 8,
            learning_rate: 1e-3,
            batch_size: 64,
            replay_capacity: 10_000,
            train_every: 100,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: &str| Err(PredictorError::InvalidConfig(m.into()));
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !(self.interval_s > 0.0) {
            return bad("interval_s must be positive");
        }
        if self.hidden == 0 || self.layers == 0 {
            return bad("hidden and layers must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.train_every == 0 {
            return bad("batch_size, replay_capacity and train_every must be positive");
        }
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            layers: self.layers,
            hidden: self.hidden,
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn interval_us(&self) -> Micros {
        ((self.interval_s * US_PER_S as f64).round() as Micros).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub adapter_id: AdapterId,
    /// Normalized counts, oldest first.
    pub counts: Vec<f64>,
    pub interval_length_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub window: FeatureWindow,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub adapter_id: AdapterId,
    pub probability: f64,
    pub issued_at_us: Micros,
}

/// Bounded FIFO of training examples.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<TrainingExample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 14)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `ex`, dropping the oldest example when full. Returns the
    /// evicted example.
    pub fn push(&mut self, ex: TrainingExample) -> Option<TrainingExample> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(ex);
        evicted
    }

    pub fn get(&self, i: usize) -> Option<&TrainingExample> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainingExample> {
        self.items.iter()
    }

    /// Indices of a minibatch: without replacement when the buffer holds at
    /// least `n` examples, uniform with replacement otherwise.
    pub fn sample_indices(&self, n: usize, rng: &mut Pcg64) -> Vec<usize> {
        let len = self.items.len();
        if len == 0 {
            return Vec::new();
        }
        if len >= n {
            index::sample(rng, len, n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..len)).collect()
        }
    }
}

/// Binary cross-entropy summed over the batch, with probabilities clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn loss(predictions: &[f64], labels: &[bool]) -> Result<f64, PredictorError> {
    if predictions.len() != labels.len() {
        return Err(PredictorError::LengthMismatch(
            predictions.len(),
            labels.len(),
        ));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// Outcome of [`OnlinePredictor::train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainOutcome {
    NotTrained,
    /// Mean batch loss measured before the update.
    Trained {
        loss: f64,
    },
}

#[derive(Debug, Clone)]
struct Series {
    /// Completed interval counts, oldest first, always `window` long.
    history: VecDeque<u32>,
    running_max: u32,
    current: u32,
}

/// LSTM predictor plus the online state feeding it.
#[derive(Debug, Clone)]
pub struct OnlinePredictor {
    cfg: PredictorConfig,
    interval_us: Micros,
    model: LstmModel,
    adam: Adam,
    rng: Pcg64,
    replay: ReplayBuffer,
    rows: HashMap<AdapterId, usize>,
    ids: Vec<AdapterId>,
    series: Vec<Series>,
    current_interval: u64,
    observed: u64,
    train_steps: u64,
    version: u64,
    last_loss: Option<f64>,
    cache: Option<(u64, u64, Vec<(AdapterId, f64)>)>,
    ws: Workspace,
}

impl OnlinePredictor {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self, PredictorError> {
        cfg.validate()?;
        let model = LstmModel::new(cfg.shape(), seed);
        Self::with_model(cfg, model, seed)
    }

    /// Resumes from existing weights. Embedding rows are bound to adapters in
    /// order of first observation.
    pub fn with_model(
        cfg: PredictorConfig,
        model: LstmModel,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        cfg.validate()?;
        if model.shape() != cfg.shape() {
            return Err(PredictorError::InvalidConfig(
                "weights do not match the configured model shape".into(),
            ));
        }
        Ok(Self {
            interval_us: cfg.interval_us(),
            adam: Adam::new(cfg.learning_rate),
            rng: Pcg64::seed_from_u64(seed ^ 0x0005_eed0_fa11),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            cfg,
            model,
            rows: HashMap::new(),
            ids: Vec::new(),
            series: Vec::new(),
            current_interval: 0,
            observed: 0,
            train_steps: 0,
            version: 0,
            last_loss: None,
            cache: None,
            ws: Workspace::default(),
        })
    }

    pub fn load(cfg: PredictorConfig, path: &Path, seed: u64) -> Result<Self, PredictorError> {
        let file = std::fs::File::open(path)?;
        let model = weights::read_weights(std::io::BufReader::new(file), seed)?;
        Self::with_model(cfg, model, seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        weights::write_weights(&self.model, &mut w)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LstmModel {
        &self.model
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn observed(&self) -> u64 {
        self.observed
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn known_adapters(&self) -> &[AdapterId] {
        &self.ids
    }

    pub fn current_interval(&self) -> u64 {
        self.current_interval
    }

    fn row_for(&mut self, adapter: AdapterId) -> usize {
        if let Some(&r) = self.rows.get(&adapter) {
            return r;
        }
        let r = self.ids.len();
        if self.model.embedding_rows() <= r {
            self.model.add_embedding_row();
        }
        self.rows.insert(adapter, r);
        self.ids.push(adapter);
        self.series.push(Series {
            history: std::iter::repeat_n(0, self.cfg.window).collect(),
            running_max: 0,
            current: 0,
        });
        r
    }

    fn normalized(&self, row: usize) -> Vec<f64> {
        let s = &self.series[row];
        let denom = s.running_max.max(1) as f64;
        s.history.iter().map(|&c| c as f64 / denom).collect()
    }

    /// Closes every interval that ended at or before `now`.
    pub fn advance_to(&mut self, now: Micros) {
        let target = now / self.interval_us;
        while self.current_interval < target {
            for row in 0..self.series.len() {
                let label = self.series[row].current > 0;
                let window = FeatureWindow {
                    adapter_id: self.ids[row],
                    counts: self.normalized(row),
                    interval_length_s: self.cfg.interval_s,
                };
                self.replay.push(TrainingExample { window, label });
                let s = &mut self.series[row];
                let c = std::mem::take(&mut s.current);
                s.history.pop_front();
                s.history.push_back(c);
                s.running_max = s.running_max.max(c);
            }
            self.current_interval += 1;
        }
    }

    /// Records one request. Returns the outcome of the training step it
    /// triggered, if any.
    pub fn observe(&mut self, adapter: AdapterId, at: Micros) -> Option<TrainOutcome> {
        self.advance_to(at);
        let row = self.row_for(adapter);
        self.series[row].current += 1;
        self.observed += 1;
        if self.observed % self.cfg.train_every == 0 {
            Some(self.train_step())
        } else {
            None
        }
    }

    /// One Adam step on a minibatch drawn from the replay buffer.
    pub fn train_step(&mut self) -> TrainOutcome {
        let idx = self
            .replay
            .sample_indices(self.cfg.batch_size, &mut self.rng);
        if idx.is_empty() {
            return TrainOutcome::NotTrained;
        }
        let batch: Vec<(usize, &[f64], bool)> = idx
            .iter()
            .map(|&i| {
                let ex = self.replay.get(i).expect("sampled in range");
                (
                    self.rows[&ex.window.adapter_id],
                    ex.window.counts.as_slice(),
                    ex.label,
                )
            })
            .collect();
        let (loss, grads) = self.model.loss_and_gradient(batch, &mut self.ws);
        self.adam.update(self.model.params_mut(), &grads);
        self.train_steps += 1;
        self.version += 1;
        self.last_loss = Some(loss);
        TrainOutcome::Trained { loss }
    }

    pub fn forward(&mut self, window: &FeatureWindow) -> Result<f64, PredictorError> {
        if window.counts.len() != self.cfg.window {
            return Err(PredictorError::WindowLength {
                expected: self.cfg.window,
                got: window.counts.len(),
            });
        }
        let row = *self
            .rows
            .get(&window.adapter_id)
            .ok_or(PredictorError::UnknownAdapter(window.adapter_id))?;
        let p = self.model.probability(row, &window.counts, &mut self.ws);
        Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
    }

    /// One prediction per known adapter for the interval containing `now`.
    /// Results are reused until the interval or the weights change.
    pub fn predict_all(&mut self, now: Micros) -> Vec<Prediction> {
        self.advance_to(now);
        let fresh = matches!(&self.cache, Some((k, v, _)) if *k == self.current_interval && *v == self.version)
            && self
                .cache
                .as_ref()
                .is_some_and(|c| c.2.len() == self.ids.len());
        if !fresh {
            let windows: Vec<Vec<f64>> = (0..self.ids.len())
                .map(|row| self.normalized(row))
                .collect();
            let items: Vec<(usize, &[f64])> = windows
                .iter()
                .enumerate()
                .map(|(r, w)| (r, w.as_slice()))
                .collect();
            let logits = self.model.logits(&items, &mut self.ws);
            let out = self
                .ids
                .iter()
                .zip(logits)
                .map(|(&id, &z)| (id, sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS)))
                .collect();
            self.cache = Some((self.current_interval, self.version, out));
        }
        self.cache
            .as_ref()
            .expect("filled above")
            .2
            .iter()
            .map(|&(adapter_id, probability)| Prediction {
                adapter_id,
                probability,
                issued_at_us: now,
            })
            .collect()
    }
}
