//! Render a small paired corpus and look at what separates the screenings.
//!
//! cargo run --release --example synthetic_corpus -- [out_dir] [landmark_noise]

use std::path::PathBuf;

use scrl::corpus::{generate_paired_corpus, Corpus, GeneratorConfig, Split};

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

fn main() -> scrl::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("scrl-corpus"));
    let noise: f64 = args.next().map(|s| s.parse().expect("noise")).unwrap_or(0.1);

    let cfg = GeneratorConfig {
        n_pairs: 4,
        frames_per_video: 128,
        landmark_noise: noise,
        ..Default::default()
    };
    let manifest = generate_paired_corpus(&cfg, &out)?;
    println!("wrote {} pairs to {}", manifest.pairs.len(), out.display());
    for q in &manifest.queries {
        println!(
            "  query {}[{}..{}) -> {}[{}..{})",
            q.video,
            q.start,
            q.start + q.len,
            q.target_video,
            q.target_start,
            q.target_start + q.target_len
        );
    }

    let corpus = Corpus::open(&out)?;
    corpus.validate_intervals()?;
    for p in &corpus.manifest.pairs {
        let a = corpus.load_video(&p.a)?;
        let b = corpus.load_video(&p.b)?;
        println!("{} vs {}: mean |A-B| = {:.4}", p.a, p.b, mean_abs_diff(a.data(), b.data()));
    }
    let train = corpus.load_split(Split::Train)?;
    println!("train split: {} videos", train.len());
    Ok(())
}
