use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numeric::{gradient_check, CheckOptions};

/// Some transformer gradients are exactly zero (a key bias shifts every
/// score of a row equally), where central differences return pure
/// round-off near 1e-11. Coordinates below this magnitude are compared
/// absolutely.
const MODEL_DENOM_FLOOR: f64 = 1e-6;

fn toy_config(grid: GridDims, channels: usize) -> ModelConfig {
    ModelConfig {
        grid,
        channels,
        d_enc: 8,
        heads: 2,
        depth_enc: 1,
        mlp_ratio: 2,
        d_dec: 4,
        dec_heads: 2,
        depth_dec: 1,
        d_emb: 4,
        ln_eps: 1e-6,
    }
}

/// Adds N(0, 0.1²) to every tensor so that zero-initialised branches and
/// unit layer-norm gains do not hide any gradient path.
fn jitter<T: Real>(m: &mut ModelParams<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let nd = rand_distr::Normal::new(0.0, 0.1).unwrap();
    for t in m.store.tensors_mut() {
        for v in t.data_mut() {
            *v = *v + T::lit(rand_distr::Distribution::sample(&nd, &mut rng));
        }
    }
}

fn random_tokens<T: Real>(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<T> {
    (0..n * d).map(|_| T::lit(rng.random::<f64>())).collect()
}

#[test]
fn encoder_and_decoder_shapes() {
    let cfg = ModelConfig::default();
    let m = ModelParams::<f32>::init(&cfg, Parts::Pretrain, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let visible: Vec<usize> = (0..16).map(|i| i * 8).collect();
    let masked: Vec<usize> = (0..128).filter(|i| i % 8 != 0).collect();
    let toks = random_tokens::<f32>(&mut rng, 16, 1536);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let z = m.encode_visible(&mut tape, &b, &toks, &visible).unwrap();
    assert_eq!(tape.shape(z), &[16, 96]);
    let r = m.decode(&mut tape, &b, z, &visible, &masked).unwrap();
    assert_eq!(tape.shape(r), &[112, 1536]);
    let e = m.decode(&mut tape, &b, z, &visible, &[]).unwrap();
    assert_eq!(tape.shape(e), &[0, 1536]);
    assert!(matches!(
        m.decode(&mut tape, &b, z, &visible, &[0]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn zero_depth_encoder_is_projection_plus_position() {
    let cfg = ModelConfig {
        depth_enc: 0,
        ..toy_config(GridDims::new(1, 1, 2), 1)
    };
    let m = ModelParams::<f64>::init(&cfg, Parts::Embed, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let toks = random_tokens::<f64>(&mut rng, 2, 512);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, true);
    let z = m.encode_visible(&mut tape, &b, &toks, &[1, 0]).unwrap();
    let w = m.store.get("cube_proj.weight").unwrap().data();
    let bias = m.store.get("cube_proj.bias").unwrap().data();
    let pos = m.store.get("pos_embed").unwrap().data();
    for (row, p) in [1usize, 0].iter().enumerate() {
        for j in 0..8 {
            let mut acc = bias[j];
            for k in 0..512 {
                acc += (toks[row * 512 + k] - 0.5) * w[k * 8 + j];
            }
            acc += pos[p * 8 + j];
            assert!((tape.value(z)[row * 8 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = toy_config(GridDims::new(2, 2, 2), 3);
    let mut m = ModelParams::<f64>::init(&cfg, Parts::Pretrain, 5).unwrap();
    jitter(&mut m, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dc = cfg.cube_dim();
    let pos = vec![0usize, 2, 5, 7, 3];
    let toks = random_tokens::<f64>(&mut rng, pos.len(), dc);
    let perm = [3usize, 0, 4, 1, 2];
    let ptoks: Vec<f64> = perm.iter().flat_map(|&i| toks[i * dc..(i + 1) * dc].to_vec()).collect();
    let ppos: Vec<usize> = perm.iter().map(|&i| pos[i]).collect();
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, true);
    let z = m.encode_visible(&mut tape, &b, &toks, &pos).unwrap();
    let zp = m.encode_visible(&mut tape, &b, &ptoks, &ppos).unwrap();
    let d = cfg.d_enc;
    for (row, &src) in perm.iter().enumerate() {
        for j in 0..d {
            let a = tape.value(zp)[row * d + j];
            let e = tape.value(z)[src * d + j];
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn embeddings_are_unit_norm_and_deterministic() {
    let cfg = ModelConfig::default();
    let m = ModelParams::<f32>::init(&cfg, Parts::Embed, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tokens::<f32>(&mut rng, 128, 1536);
    let c = random_tokens::<f32>(&mut rng, 128, 1536);
    let z = m.embed_tokens(&[a.clone(), c, a], 2).unwrap();
    for e in &z {
        let n: f32 = e.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert_eq!(z[0], z[2]);
}

#[test]
fn init_is_seeded() {
    let cfg = toy_config(GridDims::new(2, 2, 2), 1);
    let a = ModelParams::<f32>::init(&cfg, Parts::Pretrain, 1).unwrap();
    let b = ModelParams::<f32>::init(&cfg, Parts::Pretrain, 1).unwrap();
    let c = ModelParams::<f32>::init(&cfg, Parts::Pretrain, 2).unwrap();
    let flat = |m: &ModelParams<f32>| m.store.tensors().iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn transfer_keeps_encoder_and_adds_head() {
    let cfg = toy_config(GridDims::new(2, 2, 2), 1);
    let pre = ModelParams::<f32>::init(&cfg, Parts::Pretrain, 11).unwrap();
    let emb = ModelParams::transfer_encoder(&pre, 12).unwrap();
    assert!(emb.has_head() && !emb.has_decoder());
    for (name, t) in emb.store.iter() {
        if is_encoder_tensor(name) {
            assert_eq!(t.data(), pre.store.get(name).unwrap().data(), "{name}");
        } else {
            assert!(name.starts_with("head."), "{name}");
        }
    }
}

#[test]
fn checkpoint_round_trip_restores_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(GridDims::new(2, 2, 2), 1);
    let m = ModelParams::<f32>::init(&cfg, Parts::Pretrain, 4).unwrap();
    let p = dir.path().join("m.ckpt");
    m.save(&p).unwrap();
    let back = ModelParams::<f32>::load(&cfg, &p).unwrap();
    assert!(back.has_decoder());
    for ((n1, t1), (n2, t2)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data());
    }
    let other = ModelConfig { d_enc: 16, ..cfg };
    assert!(ModelParams::<f32>::load(&other, &p).is_err());
}

fn masked_loss(
    m: &ModelParams<f64>,
    tape: &mut Tape<f64>,
    vars: &[Var],
    vis_tokens: &[f64],
    visible: &[usize],
    masked: &[usize],
    target: &[f64],
) -> Result<Var> {
    let b = Bound { vars: vars.to_vec() };
    let z = m.encode_visible(tape, &b, vis_tokens, visible)?;
    let r = m.decode(tape, &b, z, visible, masked)?;
    tape.mse(r, target)
}

#[test]
fn masked_reconstruction_path_gradient() {
    // two tokens: one visible, one masked
    for seed in 0..10 {
        let cfg = toy_config(GridDims::new(1, 1, 2), 1);
        let mut m = ModelParams::<f64>::init(&cfg, Parts::Pretrain, seed).unwrap();
        jitter(&mut m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let toks = random_tokens::<f64>(&mut rng, 1, 512);
        let target = random_tokens::<f64>(&mut rng, 1, 512);
        let rep = gradient_check(
            |t, v| masked_loss(&m, t, v, &toks, &[0], &[1], &target),
            &m.store,
            CheckOptions { seed, denom_floor: MODEL_DENOM_FLOOR, ..Default::default() },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn decoder_gradient_reaches_cube_projection() {
    let cfg = toy_config(GridDims::new(2, 2, 2), 1);
    let mut m = ModelParams::<f64>::init(&cfg, Parts::Pretrain, 21).unwrap();
    jitter(&mut m, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let visible = [1usize, 4, 6];
    let masked = [0usize, 2, 3, 5, 7];
    let toks = random_tokens::<f64>(&mut rng, 3, 512);
    let target = random_tokens::<f64>(&mut rng, 5, 512);
    let rep = gradient_check(
        |t, v| masked_loss(&m, t, v, &toks, &visible, &masked, &target),
        &m.store,
        CheckOptions {
            max_coords_per_tensor: Some(64),
            denom_floor: MODEL_DENOM_FLOOR,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn contrastive_path_gradient_with_queue() {
    for seed in 0..10 {
        let cfg = toy_config(GridDims::new(1, 1, 2), 1);
        let mut m = ModelParams::<f64>::init(&cfg, Parts::Embed, seed).unwrap();
        jitter(&mut m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let clips: Vec<Vec<f64>> = (0..2).map(|_| random_tokens(&mut rng, 2, 512)).collect();
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let keys: Vec<f64> = (0..2).flat_map(|_| unit(&mut rng)).collect();
        let queue: Vec<f64> = (0..8).flat_map(|_| unit(&mut rng)).collect();
        let rep = gradient_check(
            |t, v| {
                let b = Bound { vars: v.to_vec() };
                let refs: Vec<&[f64]> = clips.iter().map(|c| c.as_slice()).collect();
                let q = m.embed_batch(t, &b, &refs)?;
                t.info_nce(q, &keys, &queue, 0.2)
            },
            &m.store,
            CheckOptions { seed, denom_floor: MODEL_DENOM_FLOOR, ..Default::default() },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn fresh_embeddings_are_nearly_orthogonal() {
    // 100 pairs of i.i.d. uniform clips, seed 2024, default dims
    let cfg = ModelConfig::default();
    let m = ModelParams::<f32>::init(&cfg, Parts::Embed, 2024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let clips: Vec<Vec<f32>> = (0..200).map(|_| random_tokens(&mut rng, 128, 1536)).collect();
    let z = m.embed_tokens(&clips, 8).unwrap();
    let mean_abs_cos = (0..100)
        .map(|i| z[2 * i].iter().zip(&z[2 * i + 1]).map(|(a, b)| a * b).sum::<f32>().abs())
        .sum::<f32>()
        / 100.0;
    assert!(mean_abs_cos < 0.3, "mean |cos| {mean_abs_cos}");
}
