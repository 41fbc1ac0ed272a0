//! Stage 2: momentum-contrast fine-tuning with a FIFO key queue.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentPolicy;
use crate::corpus::{ClipSet, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Parts};
use crate::numeric::{adam_step, AdamState, ParamStore, Real, Tape};
use crate::schedule::{check_finite_loss, derive_seed, fmt_real, patience_from_config, PlateauSchedule};
use crate::tokenizer::cubify;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.csv";
pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,queue_fill,mean_pos_sim,mean_neg_sim";

/// Stored keys must have unit norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-5;

const STREAM_HEAD: u64 = 11;
const STREAM_INIT: u64 = 12;
const STREAM_EPOCH: u64 = 13;
const STREAM_VAL: u64 = 14;

/// Fixed-capacity ring buffer of unit-norm keys. Enqueuing past capacity
/// evicts the oldest keys first.
#[derive(Debug, Clone, PartialEq)]
pub struct MoCoQueue<T> {
    capacity: usize,
    dim: usize,
    buf: Vec<T>,
    head: usize,
    fill: usize,
}

impl<T: Real> MoCoQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue capacity {capacity} and key dim {dim} must be >= 1"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            buf: vec![T::zero(); capacity * dim],
            head: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Appends a `B × dim` block of keys.
    pub fn enqueue(&mut self, keys: &[T]) -> Result<()> {
        if keys.len() % self.dim != 0 {
            return Err(Error::Dimension(format!(
                "{} key values is not a multiple of dim {}",
                keys.len(),
                self.dim
            )));
        }
        let b = keys.len() / self.dim;
        if b > self.capacity {
            return Err(Error::Contract(format!(
                "batch of {b} keys exceeds queue capacity {}",
                self.capacity
            )));
        }
        for (i, k) in keys.chunks(self.dim).enumerate() {
            let n = norm(k);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("key {i} of batch has norm {n}")));
            }
        }
        for k in keys.chunks(self.dim) {
            let at = self.head * self.dim;
            self.buf[at..at + self.dim].copy_from_slice(k);
            self.head = (self.head + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys in storage order, `fill × dim`. Order is irrelevant to
    /// the loss; use [`MoCoQueue::oldest_first`] when it matters.
    pub fn negatives(&self) -> &[T] {
        &self.buf[..self.fill * self.dim]
    }

    pub fn oldest_first(&self) -> Vec<Vec<T>> {
        let start = if self.fill < self.capacity { 0 } else { self.head };
        (0..self.fill)
            .map(|i| {
                let at = ((start + i) % self.capacity) * self.dim;
                self.buf[at..at + self.dim].to_vec()
            })
            .collect()
    }
}

fn norm<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap()).sum()
}

/// One-query InfoNCE in 64-bit: the positive against every queued key,
/// positive included in the denominator.
pub fn infonce_loss<T: Real>(q: &[T], k_pos: &[T], queue: &MoCoQueue<T>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if q.len() != queue.dim || k_pos.len() != queue.dim {
        return Err(Error::Dimension(format!(
            "query {} and key {} for a queue of dim {}",
            q.len(),
            k_pos.len(),
            queue.dim
        )));
    }
    for (what, v) in [("query", q), ("positive key", k_pos)] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("{what} has norm {n}")));
        }
    }
    let pos = dot(q, k_pos) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(queue.negatives().chunks(queue.dim).map(|k| dot(q, k) / tau))
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every tensor.
pub fn momentum_update<T: Real>(key: &mut ParamStore<T>, query: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must be in [0, 1), got {m}")));
    }
    if !key.same_layout(query) {
        return Err(Error::Contract("key and query parameter sets differ in layout".into()));
    }
    let mm = T::lit(m);
    let rest = T::lit(1.0 - m);
    for (k, q) in key.tensors_mut().iter_mut().zip(query.tensors()) {
        for (a, &b) in k.data_mut().iter_mut().zip(q.data()) {
            *a = mm * *a + rest * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// 0 disables decays.
    pub patience: usize,
    pub min_delta: f64,
    pub clip_len: usize,
    pub stride: usize,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            momentum: 0.999,
            queue_size: 1024,
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            patience: 10,
            min_delta: 1e-4,
            clip_len: 16,
            stride: 8,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) {
            return bad(format!("contrast.temperature must be > 0, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("contrast.momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.queue_size < self.batch_size {
            return bad(format!(
                "contrast.queue_size {} must be >= contrast.batch_size {} >= 1",
                self.queue_size, self.batch_size
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) || !(self.min_delta >= 0.0) {
            return bad("contrast.lr, contrast.weight_decay and contrast.min_delta must be >= 0".into());
        }
        if self.stride == 0 || self.clip_len == 0 {
            return bad("contrast.clip_len and contrast.stride must be >= 1".into());
        }
        self.augment.validate()
    }
}

/// Query encoder, momentum encoder, key queue and optimizer.
#[derive(Debug, Clone)]
pub struct ContrastState {
    pub query: ModelParams<f32>,
    pub key: ModelParams<f32>,
    pub queue: MoCoQueue<f32>,
    pub adam: AdamState<f32>,
}

impl ContrastState {
    /// The key encoder starts as a copy of the query encoder.
    pub fn new(query: ModelParams<f32>, cfg: &ContrastConfig) -> Result<Self> {
        if !query.has_head() {
            return Err(Error::Contract("contrastive training needs a projection head".into()));
        }
        let queue = MoCoQueue::new(cfg.queue_size, query.config.d_emb)?;
        let adam = AdamState::new(&query.store, cfg.lr, cfg.weight_decay);
        Ok(Self {
            key: query.clone(),
            query,
            queue,
            adam,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastStats {
    pub mean_loss: f64,
    pub mean_pos_sim: f64,
    /// NaN while the queue is empty.
    pub mean_neg_sim: f64,
    pub queue_fill: usize,
    pub batches: usize,
}

fn view_tokens(clips: &ClipSet, idx: &[usize], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let mut q = Vec::with_capacity(idx.len());
    let mut k = Vec::with_capacity(idx.len());
    for &i in idx {
        let (vq, vk) = policy.two_views(&clips.clip(i)?, rng)?;
        q.push(cubify(&vq)?.cubes);
        k.push(cubify(&vk)?.cubes);
    }
    Ok((q, k))
}

fn mean_sims(q: &[f32], k: &[f32], negatives: &[f32], d: usize) -> (f64, f64) {
    let b = q.len() / d;
    let mut pos = 0.0;
    let mut neg = 0.0;
    let n_neg = negatives.len() / d;
    for (qi, ki) in q.chunks(d).zip(k.chunks(d)) {
        pos += dot(qi, ki);
        if n_neg > 0 {
            neg += negatives.chunks(d).map(|n| dot(qi, n)).sum::<f64>() / n_neg as f64;
        }
    }
    let neg = if n_neg == 0 { f64::NAN } else { neg / b as f64 };
    (pos / b as f64, neg)
}

/// One pass over `clips`: two views per clip, query-encoder step, momentum
/// update, then the batch keys are enqueued.
pub fn finetune_epoch(state: &mut ContrastState, clips: &ClipSet, cfg: &ContrastConfig, epoch: usize) -> Result<ContrastStats> {
    if clips.is_empty() {
        return Err(Error::Config("contrastive training split has no clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPOCH, epoch as u64));
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut rng);
    let d = state.query.config.d_emb;
    let tau = cfg.temperature as f32;
    let (mut loss_sum, mut pos_sum, mut neg_sum, mut neg_batches) = (0.0, 0.0, 0.0, 0usize);
    let mut batches = 0;
    for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (vq, vk) = view_tokens(clips, idx, &cfg.augment, &mut rng)?;
        let keys: Vec<f32> = state.key.embed_tokens(&vk, cfg.batch_size)?.concat();

        let mut tape = Tape::new();
        let b = state.query.bind(&mut tape, false);
        let refs: Vec<&[f32]> = vq.iter().map(|v| v.as_slice()).collect();
        let q = state.query.embed_batch(&mut tape, &b, &refs)?;
        let loss = tape.info_nce(q, &keys, state.queue.negatives(), tau)?;
        let l = tape.scalar(loss) as f64;
        check_finite_loss(l, || {
            format!(
                "epoch {epoch} batch {bi} (clips {:?}, queue fill {})",
                idx,
                state.queue.fill()
            )
        })?;
        let (pos, neg) = mean_sims(tape.value(q), &keys, state.queue.negatives(), d);

        let grads = tape.backward(loss)?.for_params(&state.query.store);
        adam_step(&mut state.query.store, &grads, &mut state.adam)
            .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {bi}: {e}")))?;
        momentum_update(&mut state.key.store, &state.query.store, cfg.momentum)?;
        state.queue.enqueue(&keys)?;

        loss_sum += l;
        pos_sum += pos;
        if !neg.is_nan() {
            neg_sum += neg;
            neg_batches += 1;
        }
        batches += 1;
    }
    Ok(ContrastStats {
        mean_loss: loss_sum / batches as f64,
        mean_pos_sim: pos_sum / batches as f64,
        mean_neg_sim: if neg_batches == 0 { f64::NAN } else { neg_sum / neg_batches as f64 },
        queue_fill: state.queue.fill(),
        batches,
    })
}

/// Mean InfoNCE of `clips` against the current queue, views from a fixed
/// seed, nothing updated.
pub fn validation_loss(state: &ContrastState, clips: &ClipSet, cfg: &ContrastConfig) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Config("validation split has no clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_VAL, 0));
    let order: Vec<usize> = (0..clips.len()).collect();
    let mut total = 0.0;
    for idx in order.chunks(cfg.batch_size) {
        let (vq, vk) = view_tokens(clips, idx, &cfg.augment, &mut rng)?;
        let keys: Vec<f32> = state.key.embed_tokens(&vk, cfg.batch_size)?.concat();
        let mut tape = Tape::new();
        let b = state.query.bind(&mut tape, true);
        let refs: Vec<&[f32]> = vq.iter().map(|v| v.as_slice()).collect();
        let q = state.query.embed_batch(&mut tape, &b, &refs)?;
        let loss = tape.info_nce(q, &keys, state.queue.negatives(), cfg.temperature as f32)?;
        total += tape.scalar(loss) as f64 * idx.len() as f64;
    }
    Ok(total / clips.len() as f64)
}

/// Where the query encoder starts.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Encoder from a stage-1 checkpoint plus a fresh head.
    Pretrained(PathBuf),
    /// Random initialisation of the whole model.
    Scratch,
}

pub fn initial_model(cfg: &ContrastConfig, model: &ModelConfig, init: &Init) -> Result<ModelParams<f32>> {
    match init {
        Init::Pretrained(path) => {
            let pre = ModelParams::load(model, path)?;
            ModelParams::transfer_encoder(&pre, derive_seed(cfg.seed, STREAM_HEAD, 0))
        }
        Init::Scratch => ModelParams::init(model, Parts::Embed, derive_seed(cfg.seed, STREAM_INIT, 0)),
    }
}

/// Trains the query encoder and keeps the best-val checkpoint in `out_dir`.
pub fn run_finetuning(cfg: &ContrastConfig, model: &ModelConfig, corpus: &Corpus, init: &Init, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut state = ContrastState::new(initial_model(cfg, model, init)?, cfg)?;
    let train = ClipSet::from_split(corpus, Split::Train, cfg.clip_len, cfg.stride)?;
    let val = ClipSet::from_split(corpus, Split::Val, cfg.clip_len, cfg.stride)?;
    if val.is_empty() {
        return Err(Error::Config("contrastive training needs a non-empty validation split".into()));
    }
    let log_path = out_dir.join(LOG_FILE);
    let mut log = std::fs::File::create(&log_path)?;
    writeln!(log, "{LOG_HEADER}")?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut schedule = PlateauSchedule::new(patience_from_config(cfg.patience), cfg.min_delta);
    let mut best: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let lr = state.adam.lr;
        let stats = finetune_epoch(&mut state, &train, cfg, epoch)?;
        let val_loss = validation_loss(&state, &val, cfg)?;
        check_finite_loss(val_loss, || format!("validation after epoch {epoch}"))?;
        log::info!(
            "contrast epoch {epoch}: train {:.4} val {:.4} pos {:.3} neg {:.3} lr {lr:e}",
            stats.mean_loss,
            val_loss,
            stats.mean_pos_sim,
            stats.mean_neg_sim
        );
        writeln!(
            log,
            "{epoch},{},{},{},{},{},{}",
            fmt_real(stats.mean_loss),
            fmt_real(val_loss),
            fmt_real(lr),
            stats.queue_fill,
            fmt_real(stats.mean_pos_sim),
            fmt_real(stats.mean_neg_sim)
        )?;
        log.flush()?;
        if best.is_none_or(|b| val_loss < b) {
            best = Some(val_loss);
            state.query.save(&best_path)?;
        }
        if schedule.observe(epoch, val_loss) {
            state.adam.lr = schedule.lr(cfg.lr);
            log::info!("contrast: validation plateau, lr -> {:e}", state.adam.lr);
        }
    }
    if best.is_none() {
        state.query.save(&best_path)?;
    }
    Ok(best_path)
}
