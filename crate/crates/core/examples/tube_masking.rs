//! Cut a clip into 2x16x16 cubes, hide 90% of the spatial positions in one
//! tube mask and print the map and the visible/masked split.
//!
//! cargo run --release --example tube_masking -- [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrl::corpus::{render_pair, GeneratorConfig};
use scrl::tokenizer::{cubify, normalize_targets, sample_tube_mask, split_visible, uncubify};

fn main() -> scrl::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let gen = GeneratorConfig {
        n_pairs: 1,
        frames_per_video: 64,
        ..Default::default()
    };
    let pair = render_pair(&gen, 0)?;
    let clip = pair.a.window(0, 16)?;

    let grid = cubify(&clip)?;
    println!(
        "clip {:?} -> {} tokens on a {}x{}x{} grid, {} values each",
        clip.dims(),
        grid.n_tokens(),
        grid.dims.t,
        grid.dims.h,
        grid.dims.w,
        grid.cube_dim()
    );
    // cubes are a pure re-layout
    assert_eq!(uncubify(&grid, &clip.video_id)?.data(), clip.data());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = sample_tube_mask(grid.dims, 0.9, &mut rng)?;
    println!("spatial map ({} of {} hidden, same in every temporal group):", mask.n_masked_spatial(), grid.dims.spatial());
    for y in 0..grid.dims.h {
        let row: String = (0..grid.dims.w)
            .map(|x| if mask.spatial[y * grid.dims.w + x] { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }

    let split = split_visible(&grid, &mask)?;
    let targets = normalize_targets(&grid, &mask, 1e-6)?;
    println!("visible tokens {:?}", split.visible);
    println!("{} masked tokens, {} normalized target values", split.masked.len(), targets.len());
    let first = &targets[..grid.cube_dim()];
    let mean = first.iter().map(|&v| v as f64).sum::<f64>() / first.len() as f64;
    let var = first.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / first.len() as f64;
    println!("first target cube: mean {mean:.2e}, var {var:.4}");
    Ok(())
}
