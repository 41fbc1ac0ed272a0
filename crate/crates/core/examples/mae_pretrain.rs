//! Masked-autoencoder pretraining on a small corpus: 90% tube masking,
//! reconstruction of normalized cubes, plateau lr schedule, best-val checkpoint.
//!
//! cargo run --release --example mae_pretrain -- [work_dir] [epochs]

use std::path::PathBuf;

use scrl::corpus::{generate_paired_corpus, Corpus, GeneratorConfig};
use scrl::model::ModelConfig;
use scrl::pretrainer::{run_pretraining, PretrainConfig, LOG_FILE};
use scrl::tokenizer::GridDims;

fn main() -> scrl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let work = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("scrl-mae"));
    let epochs: usize = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(5);

    // 32x32 frames keep this to seconds per epoch
    let gen = GeneratorConfig {
        n_pairs: 4,
        frames_per_video: 96,
        height: 32,
        width: 32,
        ..Default::default()
    };
    let corpus_dir = work.join("corpus");
    if !corpus_dir.join(scrl::corpus::MANIFEST_FILE).exists() {
        generate_paired_corpus(&gen, &corpus_dir)?;
    }
    let corpus = Corpus::open(&corpus_dir)?;

    let model = ModelConfig {
        grid: GridDims::new(8, 2, 2),
        d_enc: 32,
        heads: 2,
        depth_enc: 2,
        d_dec: 16,
        dec_heads: 2,
        d_emb: 16,
        ..Default::default()
    };
    let cfg = PretrainConfig {
        epochs,
        lr: 1e-3,
        patience: 3,
        seed: 1,
        ..Default::default()
    };
    let out = work.join("pretrain");
    let best = run_pretraining(&cfg, &model, &corpus, &out)?;
    println!("best checkpoint {}", best.display());
    print!("{}", std::fs::read_to_string(out.join(LOG_FILE))?);
    Ok(())
}
