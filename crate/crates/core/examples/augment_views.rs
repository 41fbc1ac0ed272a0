//! Clip-consistent augmentation: one parameter draw per view, applied to
//! every frame of the clip. Writes the first frame of each view as a PPM.
//!
//! cargo run --release --example augment_views -- [out_dir]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrl::augment::{apply, AugmentPolicy};
use scrl::corpus::{render_pair, GeneratorConfig, VideoClip};

fn write_ppm(path: &std::path::Path, clip: &VideoClip, t: usize) -> std::io::Result<()> {
    let (h, w) = (clip.height(), clip.width());
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((clip.at(t, c, y, x) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, buf)
}

fn main() -> scrl::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("scrl-views"));
    std::fs::create_dir_all(&out)?;
    let gen = GeneratorConfig {
        n_pairs: 1,
        frames_per_video: 64,
        ..Default::default()
    };
    let clip = render_pair(&gen, 0)?.a.window(8, 16)?;
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    for i in 0..4 {
        let p = policy.sample_params(clip.height(), clip.width(), &mut rng);
        let view = apply(&clip, &p, policy.output_size)?;
        println!(
            "view {i}: crop {}x{} at ({},{}), flip {}, blur {:.2}, b/c/s {:+.2}/{:+.2}/{:+.2}",
            p.crop.height, p.crop.width, p.crop.top, p.crop.left, p.flip, p.blur_sigma, p.brightness, p.contrast, p.saturation
        );
        write_ppm(&out.join(format!("view{i}.ppm")), &view, 0)?;
    }
    write_ppm(&out.join("original.ppm"), &clip, 0)?;

    let identity = AugmentPolicy::identity((clip.height(), clip.width()));
    let (a, b) = identity.two_views(&clip, &mut rng)?;
    assert_eq!(a.data(), clip.data());
    assert_eq!(b.data(), clip.data());
    println!("identity policy leaves the clip unchanged; frames in {}", out.display());
    Ok(())
}
