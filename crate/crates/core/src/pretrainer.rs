//! Stage 1: tube-masked reconstruction pre-training.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClipSet, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint, ModelConfig, ModelParams, Parts};
use crate::numeric::{adam_step, AdamState, ParamStore, Real, Tape, Tensor};
use crate::schedule::{check_finite_loss, derive_seed, fmt_real, patience_from_config, PlateauSchedule};
use crate::tokenizer::{cubify, normalize_targets, sample_tube_mask, split_visible};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.csv";
const STATE_CHECKPOINT: &str = "state.ckpt";
const STATE_FILE: &str = "state.json";
const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr";

const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_VAL: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without val improvement before a decay; 0 disables decays.
    pub patience: usize,
    pub min_delta: f64,
    pub clip_len: usize,
    pub stride: usize,
    /// Added to the per-cube std when standardising targets.
    pub target_eps: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.9,
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            patience: 10,
            min_delta: 1e-4,
            clip_len: 16,
            stride: 8,
            target_eps: 1e-6,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("pretrain.mask_ratio must be in [0, 1), got {}", self.mask_ratio));
        }
        if self.epochs == 0 {
            return bad("pretrain.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("pretrain.batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "pretrain.lr {} and pretrain.weight_decay {} must be finite and >= 0",
                self.lr, self.weight_decay
            ));
        }
        if !(self.min_delta >= 0.0) || !(self.target_eps > 0.0) {
            return bad("pretrain.min_delta must be >= 0 and pretrain.target_eps > 0".into());
        }
        if self.stride == 0 || self.clip_len == 0 {
            return bad("pretrain.clip_len and pretrain.stride must be >= 1".into());
        }
        Ok(())
    }
}

/// Mean squared difference over every element of the masked reconstruction.
/// An empty set gives 0.
pub fn mse_masked_loss<T: Real>(reconstructed: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    if reconstructed.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} vs targets {:?}",
            reconstructed.shape(),
            targets.shape()
        )));
    }
    if reconstructed.numel() == 0 {
        log::warn!("masked loss over zero tokens; defined as 0");
        return Ok(T::zero());
    }
    let s = reconstructed
        .data()
        .iter()
        .zip(targets.data())
        .fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
    Ok(s / T::lit(reconstructed.numel() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

/// Builds the masked-reconstruction loss of `clips[idx]` on `tape`.
fn batch_loss(
    params: &ModelParams<f32>,
    tape: &mut Tape<f32>,
    frozen: bool,
    clips: &ClipSet,
    idx: &[usize],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<crate::numeric::Var> {
    let b = params.bind(tape, frozen);
    let mut recon = Vec::with_capacity(idx.len());
    let mut targets = Vec::new();
    for &i in idx {
        let grid = cubify(&clips.clip(i)?)?;
        if grid.dims != params.config.grid {
            return Err(Error::Dimension(format!(
                "clip grid {:?} does not match model grid {:?}",
                grid.dims, params.config.grid
            )));
        }
        let mask = sample_tube_mask(grid.dims, cfg.mask_ratio, rng)?;
        let split = split_visible(&grid, &mask)?;
        let z = params.encode_visible(tape, &b, &split.tokens, &split.visible)?;
        recon.push(params.decode(tape, &b, z, &split.visible, &split.masked)?);
        targets.extend(normalize_targets(&grid, &mask, cfg.target_eps)?);
    }
    let all = if recon.len() == 1 { recon[0] } else { tape.concat_rows(&recon)? };
    tape.mse(all, &targets)
}

fn describe(clips: &ClipSet, idx: &[usize]) -> String {
    idx.iter()
        .map(|&i| {
            let r = clips.refs[i];
            format!("{}@{}", clips.videos[r.video].video_id, r.window.start)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One pass over `clips` in a seeded shuffled order.
pub fn pretrain_epoch(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    clips: &ClipSet,
    cfg: &PretrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if clips.is_empty() {
        return Err(Error::Config("pre-training split has no clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPOCH, epoch as u64));
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut batches = 0;
    for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
        let mut tape = Tape::new();
        let loss = batch_loss(params, &mut tape, false, clips, idx, cfg, &mut rng)
            .map_err(|e| with_batch(e, epoch, bi, clips, idx))?;
        let l = tape.scalar(loss) as f64;
        check_finite_loss(l, || format!("epoch {epoch} batch {bi} ({})", describe(clips, idx)))?;
        let grads = tape.backward(loss)?.for_params(&params.store);
        adam_step(&mut params.store, &grads, adam).map_err(|e| with_batch(e, epoch, bi, clips, idx))?;
        total += l;
        batches += 1;
    }
    Ok(EpochStats {
        mean_loss: total / batches as f64,
        batches,
    })
}

fn with_batch(e: Error, epoch: usize, bi: usize, clips: &ClipSet, idx: &[usize]) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!(
            "epoch {epoch} batch {bi} ({}): {m}",
            describe(clips, idx)
        )),
        other => other,
    }
}

/// Mean masked loss over `clips` with masks from a fixed seed.
pub fn evaluate_loss(params: &ModelParams<f32>, clips: &ClipSet, cfg: &PretrainConfig) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Config("validation split has no clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_VAL, 0));
    let order: Vec<usize> = (0..clips.len()).collect();
    let mut total = 0.0;
    for idx in order.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let loss = batch_loss(params, &mut tape, true, clips, idx, cfg, &mut rng)?;
        total += tape.scalar(loss) as f64 * idx.len() as f64;
    }
    Ok(total / clips.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunState {
    next_epoch: usize,
    adam_steps: u64,
    schedule: PlateauSchedule,
    best_val: Option<f64>,
}

fn save_state(dir: &Path, params: &ModelParams<f32>, adam: &AdamState<f32>, state: &RunState) -> Result<()> {
    let mut store = params.store.clone();
    for (i, (name, t)) in params.store.iter().enumerate() {
        for (prefix, buf) in [("adam.m.", &adam.first_moment[i]), ("adam.v.", &adam.second_moment[i])] {
            store.insert(format!("{prefix}{name}"), Tensor::new(t.shape().to_vec(), buf.clone())?)?;
        }
    }
    write_checkpoint(&dir.join(STATE_CHECKPOINT), &store)?;
    let tmp = dir.join("state.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(state)?)?;
    std::fs::rename(tmp, dir.join(STATE_FILE))?;
    Ok(())
}

fn load_state(
    dir: &Path,
    model: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<(ModelParams<f32>, AdamState<f32>, RunState)> {
    let state: RunState = serde_json::from_str(&std::fs::read_to_string(dir.join(STATE_FILE))?)?;
    let full = read_checkpoint(&dir.join(STATE_CHECKPOINT))?;
    let mut store = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in full.iter() {
        if name.starts_with("adam.") {
            continue;
        }
        let moment = |prefix: &str| -> Result<Vec<f32>> {
            let key = format!("{prefix}{name}");
            let buf = full
                .get(&key)
                .ok_or_else(|| Error::Contract(format!("resume state lacks {key}")))?;
            Ok(buf.data().to_vec())
        };
        m.push(moment("adam.m.")?);
        v.push(moment("adam.v.")?);
        store.insert(name, t.clone())?;
    }
    let params = ModelParams::from_store(model, store)?;
    let mut adam = AdamState::new(&params.store, state.schedule.lr(cfg.lr), cfg.weight_decay);
    adam.first_moment = m;
    adam.second_moment = v;
    adam.step_count = state.adam_steps;
    Ok((params, adam, state))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Keeps the header and the first `rows` data lines of a log.
pub(crate) fn truncate_log(path: &Path, header: &str, rows: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(header);
    out.push('\n');
    for line in text.lines().skip(1).take(rows) {
        out.push_str(line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Trains from a fresh seeded initialisation, writing the best-val
/// checkpoint, resume state and CSV log into `out_dir`.
pub fn run_pretraining(cfg: &PretrainConfig, model: &ModelConfig, corpus: &Corpus, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let params = ModelParams::init(model, Parts::Pretrain, derive_seed(cfg.seed, STREAM_INIT, 0))?;
    let adam = AdamState::new(&params.store, cfg.lr, cfg.weight_decay);
    let state = RunState {
        next_epoch: 0,
        adam_steps: 0,
        schedule: PlateauSchedule::new(patience_from_config(cfg.patience), cfg.min_delta),
        best_val: None,
    };
    std::fs::write(out_dir.join(LOG_FILE), format!("{LOG_HEADER}\n"))?;
    train_loop(cfg, corpus, out_dir, params, adam, state)
}

/// Continues a run from the state files in `out_dir` up to `cfg.epochs`.
pub fn resume_pretraining(cfg: &PretrainConfig, model: &ModelConfig, corpus: &Corpus, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let (params, adam, state) = load_state(out_dir, model, cfg)?;
    truncate_log(&out_dir.join(LOG_FILE), LOG_HEADER, state.next_epoch)?;
    train_loop(cfg, corpus, out_dir, params, adam, state)
}

pub fn has_resume_state(out_dir: &Path) -> bool {
    out_dir.join(STATE_FILE).exists() && out_dir.join(STATE_CHECKPOINT).exists()
}

fn train_loop(
    cfg: &PretrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
    mut params: ModelParams<f32>,
    mut adam: AdamState<f32>,
    mut state: RunState,
) -> Result<PathBuf> {
    let train = ClipSet::from_split(corpus, Split::Train, cfg.clip_len, cfg.stride)?;
    let val = ClipSet::from_split(corpus, Split::Val, cfg.clip_len, cfg.stride)?;
    if val.is_empty() {
        return Err(Error::Config("pre-training needs a non-empty validation split".into()));
    }
    let best_path = out_dir.join(BEST_CHECKPOINT);
    for epoch in state.next_epoch..cfg.epochs {
        let lr = adam.lr;
        let stats = pretrain_epoch(&mut params, &mut adam, &train, cfg, epoch)?;
        let val_loss = evaluate_loss(&params, &val, cfg)?;
        check_finite_loss(val_loss, || format!("validation after epoch {epoch}"))?;
        log::info!(
            "pretrain epoch {epoch}: train {:.5} val {:.5} lr {lr:e}",
            stats.mean_loss,
            val_loss
        );
        append_line(
            &out_dir.join(LOG_FILE),
            &format!("{epoch},{},{},{}", fmt_real(stats.mean_loss), fmt_real(val_loss), fmt_real(lr)),
        )?;
        if state.best_val.is_none_or(|b| val_loss < b) {
            state.best_val = Some(val_loss);
            params.save(&best_path)?;
        }
        if state.schedule.observe(epoch, val_loss) {
            adam.lr = state.schedule.lr(cfg.lr);
            log::info!("pretrain: validation plateau, lr -> {:e}", adam.lr);
        }
        state.next_epoch = epoch + 1;
        state.adam_steps = adam.step_count;
        save_state(out_dir, &params, &adam, &state)?;
    }
    if !best_path.exists() {
        params.save(&best_path)?;
    }
    Ok(best_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_reconstruction_costs_nothing() {
        let t = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(mse_masked_loss(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn one_unit_error_over_a_cube() {
        let zeros = Tensor::<f64>::zeros(vec![1, 1536]);
        let mut one = zeros.clone();
        one.data_mut()[700] = 1.0;
        let l = mse_masked_loss(&one, &zeros).unwrap();
        assert!((l - 1.0 / 1536.0).abs() < 1e-15);
        assert!((l - 6.5104e-4).abs() < 1e-8);
    }

    #[test]
    fn matches_double_loop_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut s = 0.0;
            for r in 0..4 {
                for c in 0..8 {
                    let d = a[r * 8 + c] - b[r * 8 + c];
                    s += d * d;
                }
            }
            let want = s / 32.0;
            let got = mse_masked_loss(
                &Tensor::new(vec![4, 8], a.clone()).unwrap(),
                &Tensor::new(vec![4, 8], b.clone()).unwrap(),
            )
            .unwrap();
            assert!((got - want).abs() < 1e-12);
            // the tape op agrees
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(vec![4, 8], a).unwrap();
            let l = tape.mse(x, &b).unwrap();
            assert!((tape.scalar(l) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_set_and_shape_mismatch() {
        let e = Tensor::<f64>::zeros(vec![0, 1536]);
        assert_eq!(mse_masked_loss(&e, &e).unwrap(), 0.0);
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![3, 2]);
        assert!(matches!(mse_masked_loss(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_bounds() {
        assert!(PretrainConfig::default().validate().is_ok());
        for c in [
            PretrainConfig { mask_ratio: 1.0, ..Default::default() },
            PretrainConfig { mask_ratio: -0.1, ..Default::default() },
            PretrainConfig { epochs: 0, ..Default::default() },
            PretrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    fn toy_model() -> ModelConfig {
        ModelConfig {
            grid: crate::tokenizer::GridDims::new(2, 2, 2),
            d_enc: 16,
            heads: 2,
            depth_enc: 1,
            mlp_ratio: 2,
            d_dec: 8,
            dec_heads: 2,
            depth_dec: 1,
            d_emb: 8,
            ..Default::default()
        }
    }

    fn clips_of(videos: Vec<crate::corpus::VideoClip>) -> ClipSet {
        ClipSet::new(videos, 4, 4).unwrap()
    }

    fn noise_video(seed: u64, id: &str) -> crate::corpus::VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12 * 3 * 32 * 32;
        crate::corpus::VideoClip::unchecked((0..n).map(|_| rng.random::<f32>()).collect(), [12, 3, 32, 32], id).unwrap()
    }

    fn toy_cfg() -> PretrainConfig {
        PretrainConfig {
            mask_ratio: 0.5,
            batch_size: 2,
            clip_len: 4,
            stride: 4,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let clips = clips_of(vec![noise_video(1, "v")]);
        let cfg = PretrainConfig { lr: 0.0, ..toy_cfg() };
        let mut p = ModelParams::init(&toy_model(), Parts::Pretrain, 3).unwrap();
        let before = p.store.clone();
        let mut adam = AdamState::new(&p.store, cfg.lr, cfg.weight_decay);
        let v0 = evaluate_loss(&p, &clips, &cfg).unwrap();
        for e in 0..3 {
            pretrain_epoch(&mut p, &mut adam, &clips, &cfg, e).unwrap();
            assert_eq!(evaluate_loss(&p, &clips, &cfg).unwrap(), v0);
        }
        for (a, b) in p.store.tensors().iter().zip(before.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn constant_clip_targets_are_learned_to_zero() {
        let n = 4 * 3 * 32 * 32;
        let video = crate::corpus::VideoClip::unchecked(vec![0.3; n], [4, 3, 32, 32], "flat").unwrap();
        let clips = clips_of(vec![video]);
        let cfg = PretrainConfig { lr: 1e-2, ..toy_cfg() };
        let mut p = ModelParams::init(&toy_model(), Parts::Pretrain, 3).unwrap();
        let mut adam = AdamState::new(&p.store, cfg.lr, cfg.weight_decay);
        let mut last = f64::INFINITY;
        for e in 0..20 {
            last = pretrain_epoch(&mut p, &mut adam, &clips, &cfg, e).unwrap().mean_loss;
        }
        assert!(last < 1e-3, "loss after 20 epochs {last}");
    }

    #[test]
    fn epoch_is_reproducible_and_order_depends_on_epoch() {
        let clips = clips_of(vec![noise_video(1, "a"), noise_video(2, "b")]);
        let cfg = toy_cfg();
        let run = |epoch: usize| {
            let mut p = ModelParams::init(&toy_model(), Parts::Pretrain, 3).unwrap();
            let mut adam = AdamState::new(&p.store, cfg.lr, cfg.weight_decay);
            let s = pretrain_epoch(&mut p, &mut adam, &clips, &cfg, epoch).unwrap();
            (s, p.store)
        };
        let (s1, p1) = run(0);
        let (s2, p2) = run(0);
        assert_eq!(s1, s2);
        assert_eq!(s1.batches, 3);
        for (a, b) in p1.tensors().iter().zip(p2.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert_ne!(run(1).0.mean_loss, s1.mean_loss);
    }

    #[test]
    fn zero_mask_ratio_val_loss_ignores_mask_seed() {
        let clips = clips_of(vec![noise_video(4, "v")]);
        let p = ModelParams::init(&toy_model(), Parts::Pretrain, 3).unwrap();
        let a = PretrainConfig { mask_ratio: 0.0, ..toy_cfg() };
        let b = PretrainConfig { seed: 99, ..a.clone() };
        assert_eq!(evaluate_loss(&p, &clips, &a).unwrap(), 0.0);
        assert_eq!(evaluate_loss(&p, &clips, &b).unwrap(), 0.0);
    }
}
