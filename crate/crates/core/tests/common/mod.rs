#![allow(dead_code)]

use std::path::Path;

use scrl::corpus::{generate_paired_corpus, Corpus, GeneratorConfig};
use scrl::model::ModelConfig;
use scrl::tokenizer::GridDims;

/// Three pairs of 96-frame 32x32 videos.
pub fn small_gen() -> GeneratorConfig {
    GeneratorConfig {
        n_pairs: 3,
        frames_per_video: 96,
        height: 32,
        width: 32,
        ..Default::default()
    }
}

pub fn small_corpus(dir: &Path) -> Corpus {
    generate_paired_corpus(&small_gen(), dir).unwrap();
    Corpus::open(dir).unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        grid: GridDims::new(8, 2, 2),
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

/// Config text matching `small_gen` / `small_model`.
pub const SMALL_CONFIG: &str = "\
seed=5
paths.corpus=corpus
paths.output=runs
corpus.n_pairs=3
corpus.frames_per_video=96
corpus.height=32
corpus.width=32
model.d_enc=16
model.heads=2
model.depth_enc=1
model.mlp_ratio=2
model.d_dec=8
model.dec_heads=2
model.d_emb=8
pretrain.epochs=2
contrast.epochs=2
contrast.queue_size=16
";

pub fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
