//! Momentum-contrast fine-tuning: a query encoder trained with InfoNCE
//! against a FIFO queue of keys from its slowly moving copy.
//!
//! cargo run --release --example moco_finetune -- [work_dir] [epochs]
//!
//! Starts from the checkpoint written by the mae_pretrain example when one
//! exists under the same work dir, otherwise from random weights.

use std::path::PathBuf;

use scrl::contrast::{run_finetuning, ContrastConfig, Init, LOG_FILE};
use scrl::corpus::{generate_paired_corpus, Corpus, GeneratorConfig};
use scrl::model::ModelConfig;
use scrl::tokenizer::GridDims;

fn main() -> scrl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let work = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("scrl-mae"));
    let epochs: usize = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(5);

    let corpus_dir = work.join("corpus");
    if !corpus_dir.join(scrl::corpus::MANIFEST_FILE).exists() {
        let gen = GeneratorConfig {
            n_pairs: 4,
            frames_per_video: 96,
            height: 32,
            width: 32,
            ..Default::default()
        };
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
    let stage1 = work.join("pretrain").join(scrl::pretrainer::BEST_CHECKPOINT);
    let init = if stage1.exists() { Init::Pretrained(stage1) } else { Init::Scratch };
    println!("init: {init:?}");

    let mut cfg = ContrastConfig {
        epochs,
        queue_size: 64,
        seed: 1,
        ..Default::default()
    };
    cfg.augment.output_size = (32, 32);
    let out = work.join("contrast");
    let best = run_finetuning(&cfg, &model, &corpus, &init, &out)?;
    println!("best checkpoint {}", best.display());
    print!("{}", std::fs::read_to_string(out.join(LOG_FILE))?);
    Ok(())
}
