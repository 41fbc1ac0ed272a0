//! The whole flow the `scrl` binary runs: generate, pretrain, fine-tune,
//! evaluate in both gallery modes, summarize.
//!
//! cargo run --release --example desk_pipeline -- [config]
//!
//! With no config a reduced one (2 pairs, 32x32 frames, a few epochs) is
//! written to a temp dir so the run takes about a minute.

use std::path::PathBuf;

use scrl::cli::{self, Stage, TrainOptions};
use scrl::retrieval::GalleryMode;

const SMALL: &str = "\
seed=3
clip_len=16
paths.corpus=corpus
paths.output=runs
corpus.n_pairs=3
corpus.frames_per_video=96
corpus.height=32
corpus.width=32
model.d_enc=32
model.heads=2
model.depth_enc=2
model.d_dec=16
model.dec_heads=2
model.d_emb=16
pretrain.epochs=3
contrast.epochs=3
contrast.queue_size=32
contrast.momentum=0.99
";

fn main() -> scrl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = std::env::temp_dir().join("scrl-desk");
            std::fs::create_dir_all(&dir)?;
            let p = dir.join("desk.cfg");
            std::fs::write(&p, SMALL)?;
            p
        }
    };
    let force = TrainOptions {
        force: true,
        ..Default::default()
    };
    cli::gen_data(&config, true)?;
    cli::train(&config, Stage::Both, &force)?;
    cli::train(
        &config,
        Stage::Contrast,
        &TrainOptions {
            from_scratch: true,
            force: true,
            resume: false,
        },
    )?;
    let cfg = scrl::config::RunConfig::load(&config)?;
    for dir in [cli::CONTRAST_DIR, cli::SCRATCH_DIR] {
        let ckpt = cfg.output_dir.join(dir).join(scrl::contrast::BEST_CHECKPOINT);
        for mode in [GalleryMode::Sliding, GalleryMode::Annotated] {
            print!("{dir} {mode}: ");
            cli::eval(&config, Some(&ckpt), Some(mode))?;
        }
    }
    cli::report(&config)?;
    println!("summary in {}", cfg.output_dir.join("summary.csv").display());
    Ok(())
}
