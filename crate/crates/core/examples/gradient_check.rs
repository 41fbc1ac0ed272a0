//! Central-difference check of the tape gradients: a small op chain, then the
//! masked-reconstruction and contrastive losses through a tiny transformer.
//!
//! cargo run --release --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scrl::model::{Bound, ModelConfig, ModelParams, Parts};
use scrl::numeric::{gradient_check, CheckOptions, ParamStore, Tensor};
use scrl::tokenizer::GridDims;

fn randn(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        grid: GridDims::new(1, 1, 2),
        d_enc: 8,
        heads: 2,
        depth_enc: 1,
        mlp_ratio: 2,
        d_dec: 8,
        dec_heads: 2,
        depth_dec: 1,
        d_emb: 4,
        ..Default::default()
    }
}

// Residual output projections start at zero; perturb everything so no path
// hides behind a zero weight.
fn jittered(parts: Parts, seed: u64) -> scrl::Result<ModelParams<f64>> {
    let mut m = ModelParams::<f64>::init(&tiny(), parts, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for t in m.store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(m)
}

fn main() -> scrl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![3, 4], randn(&mut rng, 12, 1.0))?)?;
    store.insert("b", Tensor::new(vec![1, 4], randn(&mut rng, 4, 1.0))?)?;
    store.insert("g", Tensor::new(vec![1, 4], randn(&mut rng, 4, 1.0))?)?;
    store.insert("beta", Tensor::new(vec![1, 4], randn(&mut rng, 4, 1.0))?)?;
    let x = randn(&mut rng, 6, 1.0);
    let target = randn(&mut rng, 4, 1.0);
    let rep = gradient_check(
        |t, v| {
            let xin = t.constant(vec![2, 3], x.clone())?;
            let h = t.linear(xin, v[0], v[1])?;
            let h = t.layer_norm(h, v[2], v[3], 1e-6)?;
            let h = t.gelu(h)?;
            let h = t.softmax(h, 1)?;
            let h = t.mean_rows(h)?;
            t.mse(h, &target)
        },
        &store,
        CheckOptions::default(),
    )?;
    println!("op chain: max rel err {:.2e} over {} coords", rep.max_rel_error, rep.coords_checked);

    let cube = tiny().cube_dim();
    let opts = CheckOptions { denom_floor: 1e-6, ..Default::default() };
    for seed in 0..3 {
        let m = jittered(Parts::Pretrain, seed)?;
        let toks = randn(&mut rng, cube, 0.5);
        let target = randn(&mut rng, cube, 1.0);
        let rep = gradient_check(
            |t, v| {
                let b = Bound { vars: v.to_vec() };
                let lat = m.encode_visible(t, &b, &toks, &[0])?;
                let rec = m.decode(t, &b, lat, &[0], &[1])?;
                t.mse(rec, &target)
            },
            &m.store,
            opts.clone(),
        )?;
        println!("reconstruction path seed {seed}: max rel err {:.2e} (worst {})", rep.max_rel_error, rep.worst_param);

        let m = jittered(Parts::Embed, seed)?;
        let clips: Vec<Vec<f64>> = (0..2).map(|_| randn(&mut rng, 2 * cube, 0.5)).collect();
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let keys: Vec<f64> = (0..2).flat_map(|_| unit(randn(&mut rng, 4, 1.0))).collect();
        let negs: Vec<f64> = (0..5).flat_map(|_| unit(randn(&mut rng, 4, 1.0))).collect();
        let rep = gradient_check(
            |t, v| {
                let b = Bound { vars: v.to_vec() };
                let refs: Vec<&[f64]> = clips.iter().map(|c| c.as_slice()).collect();
                let q = m.embed_batch(t, &b, &refs)?;
                t.info_nce(q, &keys, &negs, 0.07)
            },
            &m.store,
            opts.clone(),
        )?;
        println!("contrastive path seed {seed}: max rel err {:.2e} (worst {})", rep.max_rel_error, rep.worst_param);
    }
    Ok(())
}
