//! Gallery indexing and scoring. Embeds every sliding window of the second
//! screenings, ranks them for each annotated query and prints R@k / mAP.
//!
//! cargo run --release --example clip_retrieval -- [checkpoint]
//!
//! Without a checkpoint the model is randomly initialised, which gives the
//! chance-level numbers a trained model should beat.

use scrl::corpus::{generate_paired_corpus, Corpus, GeneratorConfig};
use scrl::model::{ModelConfig, ModelParams, Parts};
use scrl::retrieval::{evaluate, GalleryIndex, GalleryMode, RetrievalConfig};

fn main() -> scrl::Result<()> {
    env_logger::init();
    let dir = std::env::temp_dir().join("scrl-retrieval-corpus");
    if !dir.join(scrl::corpus::MANIFEST_FILE).exists() {
        let gen = GeneratorConfig {
            n_pairs: 4,
            frames_per_video: 160,
            ..Default::default()
        };
        generate_paired_corpus(&gen, &dir)?;
    }
    let corpus = Corpus::open(&dir)?;
    let cfg = ModelConfig::default();
    let model = match std::env::args().nth(1) {
        Some(p) => ModelParams::load(&cfg, p.as_ref())?,
        None => ModelParams::init(&cfg, Parts::Embed, 0)?,
    };

    for mode in [GalleryMode::Sliding, GalleryMode::Annotated] {
        let rc = RetrievalConfig { mode, ..Default::default() };
        let (index, report) = evaluate(&model, &corpus, &rc)?;
        println!("{mode}: {} gallery entries", index.len());
        for row in &report.rows {
            let q = &row.query;
            let top = &index.entries[row.ranked.hits[0].entry];
            println!(
                "  {}@{}: top hit {}@{} ({:.3}), first relevant at {:?}, AP {:.3}",
                q.video,
                q.start,
                top.video_id,
                top.start,
                row.ranked.hits[0].score,
                row.ranked.first_relevant(),
                row.average_precision
            );
        }
        println!("  {}", report.metric_line());

        // the index survives a round trip through its binary form
        let path = std::env::temp_dir().join(format!("scrl-{mode}.cidx"));
        index.save(&path)?;
        assert_eq!(GalleryIndex::load(&path)?, index);
    }
    Ok(())
}
