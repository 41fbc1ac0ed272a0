//! Deterministic synthetic paired-screening corpus.
//!
//! Each pair shares one procedural colon-wall texture (band-limited noise,
//! haustral folds, vessels) scrolled past a virtual camera along a wobbling
//! trajectory. Polyp sites are distinctive localized blobs placed where the
//! first screening's query intervals are centred. The second screening
//! replays the same trajectory with a temporal offset and a perturbed
//! viewpoint and illumination whose magnitude scales with `landmark_noise`;
//! at zero noise both recordings are bit-identical.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::clip::{write_clip, VideoClip, SPATIAL_MULTIPLE};
use super::manifest::{CorpusManifest, PairEntry, QueryEntry, Splits};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub n_polyps_per_video: usize,
    /// Viewpoint / illumination / timing perturbation between screenings.
    pub landmark_noise: f64,
    /// Length of annotated query and target intervals.
    pub query_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_pairs: 10,
            frames_per_video: 600,
            height: 64,
            width: 64,
            n_polyps_per_video: 2,
            landmark_noise: 0.1,
            query_len: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_pairs == 0 || self.n_polyps_per_video == 0 {
            return bad("generator counts must be >= 1".into());
        }
        if !(self.landmark_noise >= 0.0 && self.landmark_noise.is_finite()) {
            return bad(format!("landmark_noise must be >= 0, got {}", self.landmark_noise));
        }
        if self.height == 0
            || self.width == 0
            || self.height % SPATIAL_MULTIPLE != 0
            || self.width % SPATIAL_MULTIPLE != 0
        {
            return bad(format!(
                "frame size {}x{} must be positive multiples of {SPATIAL_MULTIPLE}",
                self.height, self.width
            ));
        }
        if self.query_len == 0 || self.query_len % 2 != 0 {
            return bad(format!("query_len must be even and > 0, got {}", self.query_len));
        }
        let jitter = self.max_jitter();
        let usable = self
            .frames_per_video
            .checked_sub(self.query_len + 2 * (jitter + 2))
            .unwrap_or(0);
        if usable < self.n_polyps_per_video * 4 {
            return bad(format!(
                "{} frames cannot hold {} polyp intervals of {} frames",
                self.frames_per_video, self.n_polyps_per_video, self.query_len
            ));
        }
        Ok(())
    }

    /// Largest temporal offset between the two screenings, in frames.
    fn max_jitter(&self) -> usize {
        60.min(self.frames_per_video.saturating_sub(self.query_len) / 4)
    }
}

/// Both rendered screenings of one pair plus their ground truth.
#[derive(Debug, Clone)]
pub struct RenderedPair {
    pub a: VideoClip,
    pub b: VideoClip,
    pub queries: Vec<QueryEntry>,
}

const CHANNELS: usize = 3;

// rng stream ids per pair
const STREAM_TEXTURE: u64 = 0;
const STREAM_PERTURB: u64 = 1;
const STREAM_SENSOR: u64 = 2;
const STREAM_SPLIT: u64 = u64::MAX;

fn rng_for(seed: u64, pair: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((pair as u64) << 8) | stream);
    rng
}

struct Wave {
    fs: f64,
    fu: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Fold {
    s: f64,
    width: f64,
    depth: f64,
    bend: f64,
    phase: f64,
}

struct Vessel {
    s: f64,
    amp: f64,
    k: f64,
    phase: f64,
    width: f64,
}

struct Polyp {
    s: f64,
    u: f64,
    radius: f64,
    aspect: f64,
    cos_t: f64,
    sin_t: f64,
    lobes: Vec<(f64, f64, f64)>,
    color: [f64; 3],
    highlight: (f64, f64),
    spot_freq: f64,
}

/// Camera path through the texture, in texture pixels.
struct Trajectory {
    s0: f64,
    speed: f64,
    wobble_s: (f64, f64),
    u0: f64,
    wobble_u: (f64, f64),
}

impl Trajectory {
    fn s(&self, tau: f64) -> f64 {
        self.s0 + self.speed * tau + self.wobble_s.0 * (2.0 * PI * tau / 97.0 + self.wobble_s.1).sin()
    }

    fn u(&self, tau: f64) -> f64 {
        self.u0 + self.wobble_u.0 * (2.0 * PI * tau / 233.0 + self.wobble_u.1).sin()
    }
}

/// Procedural colon-wall appearance as a function of `(s, u)`.
struct Wall {
    lanes: f64,
    base: [f64; 3],
    drift_phase: f64,
    waves: Vec<Wave>,
    folds: Vec<Fold>,
    vessels: Vec<Vessel>,
    polyps: Vec<Polyp>,
}

fn wrap(du: f64, period: f64) -> f64 {
    let r = du.rem_euclid(period);
    if r > period / 2.0 {
        r - period
    } else {
        r
    }
}

impl Wall {
    fn new(rng: &mut ChaCha8Rng, lanes: f64, s_lo: f64, s_hi: f64) -> Self {
        let base = [
            0.70 + rng.random_range(-0.04..0.04),
            0.40 + rng.random_range(-0.04..0.04),
            0.34 + rng.random_range(-0.04..0.04),
        ];
        let waves = (0..10)
            .map(|_| {
                let f = rng.random_range(1.0 / 24.0..1.0 / 6.0);
                let th: f64 = rng.random_range(0.0..PI);
                let fu = (f * th.sin() * lanes).round() / lanes;
                let a = rng.random_range(0.015..0.04);
                let tint = rng.random_range(0.8..1.2);
                Wave {
                    fs: f * th.cos(),
                    fu,
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: [a, a * 0.8 * tint, a * 0.6 * tint],
                }
            })
            .collect();
        let mut folds = Vec::new();
        let mut s = s_lo + rng.random_range(0.0..30.0);
        while s < s_hi {
            folds.push(Fold {
                s,
                width: rng.random_range(2.0..4.0),
                depth: rng.random_range(0.12..0.3),
                bend: rng.random_range(-6.0..6.0),
                phase: rng.random_range(0.0..2.0 * PI),
            });
            s += rng.random_range(25.0..55.0);
        }
        let mut vessels = Vec::new();
        let mut s = s_lo + rng.random_range(0.0..15.0);
        while s < s_hi {
            vessels.push(Vessel {
                s,
                amp: rng.random_range(2.0..10.0),
                k: rng.random_range(1..4) as f64,
                phase: rng.random_range(0.0..2.0 * PI),
                width: rng.random_range(0.6..1.3),
            });
            s += rng.random_range(12.0..30.0);
        }
        Self {
            lanes,
            base,
            drift_phase: rng.random_range(0.0..2.0 * PI),
            waves,
            folds,
            vessels,
            polyps: Vec::new(),
        }
    }

    fn add_polyp(&mut self, rng: &mut ChaCha8Rng, s: f64, u: f64) {
        let radius = rng.random_range(5.0..9.0);
        let th: f64 = rng.random_range(0.0..PI);
        let n_lobes = rng.random_range(1..=3);
        let lobes = (0..n_lobes)
            .map(|i| {
                if i == 0 {
                    (0.0, 0.0, 1.0)
                } else {
                    (
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.6..0.6),
                        rng.random_range(0.5..0.8),
                    )
                }
            })
            .collect();
        let redness: f64 = rng.random_range(-0.1..0.15);
        self.polyps.push(Polyp {
            s,
            u,
            radius,
            aspect: rng.random_range(0.7..1.4),
            cos_t: th.cos(),
            sin_t: th.sin(),
            lobes,
            color: [
                (0.78 + redness).min(0.95),
                0.45 - redness * 0.8,
                0.38 - redness * 0.5,
            ],
            highlight: (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)),
            spot_freq: rng.random_range(0.6..1.4),
        });
    }

    fn color(&self, s: f64, u: f64) -> [f64; 3] {
        let drift = 1.0 + 0.04 * (2.0 * PI * s / 300.0 + self.drift_phase).sin();
        let mut c = self.base.map(|b| b * drift);
        for w in &self.waves {
            let v = (2.0 * PI * (w.fs * s + w.fu * u) + w.phase).sin();
            for ch in 0..CHANNELS {
                c[ch] += w.amp[ch] * v;
            }
        }
        let lane_angle = 2.0 * PI * u / self.lanes;
        for f in &self.folds {
            let d = s - f.s - f.bend * (lane_angle + f.phase).sin();
            if d.abs() > 5.0 * f.width {
                continue;
            }
            let shade = f.depth * (-(d / f.width).powi(2)).exp();
            let light = 0.08 * (-((d + 1.5 * f.width) / f.width).powi(2)).exp();
            for v in c.iter_mut() {
                *v = *v * (1.0 - shade) + light;
            }
        }
        for v in &self.vessels {
            let d = s - v.s - v.amp * (v.k * lane_angle + v.phase).sin();
            if d.abs() > 4.0 * v.width {
                continue;
            }
            let i = (-(d / v.width).powi(2)).exp();
            c[0] -= 0.08 * i;
            c[1] -= 0.2 * i;
            c[2] -= 0.15 * i;
        }
        for p in &self.polyps {
            let ds = s - p.s;
            let du = wrap(u - p.u, self.lanes);
            if ds.abs() > 2.0 * p.radius || du.abs() > 2.0 * p.radius {
                continue;
            }
            let rs = (p.cos_t * ds + p.sin_t * du) / p.radius;
            let ru = (-p.sin_t * ds + p.cos_t * du) / (p.radius * p.aspect);
            let rho = p
                .lobes
                .iter()
                .map(|&(os, ou, scale)| (((rs - os).powi(2) + (ru - ou).powi(2)).sqrt()) / scale)
                .fold(f64::INFINITY, f64::min);
            let m = ((1.15 - rho) / 0.3).clamp(0.0, 1.0);
            let dome = 0.85 + 0.3 * (1.0 - rho * rho).max(0.0);
            let spots = 0.05 * (p.spot_freq * ds).sin() * (p.spot_freq * du).sin();
            let rim = 0.15 * (-((rho - 1.0) / 0.12).powi(2)).exp();
            let hl = (((rs - p.highlight.0).powi(2) + (ru - p.highlight.1).powi(2)).sqrt()) * p.radius;
            let spec = 0.35 * (-(hl / 1.5).powi(2)).exp() * m;
            for ch in 0..CHANNELS {
                let own = p.color[ch] * dome + spots;
                c[ch] = c[ch] * (1.0 - m) + own * m - rim + spec;
            }
        }
        c
    }
}

/// Rasterised wall on an integer `(s, u)` grid, sampled bilinearly.
struct Raster {
    s_lo: i64,
    rows: usize,
    lanes: usize,
    data: Vec<[f32; 3]>,
}

impl Raster {
    fn new(wall: &Wall, s_lo: i64, s_hi: i64, lanes: usize) -> Self {
        let rows = (s_hi - s_lo + 1) as usize;
        let mut data = Vec::with_capacity(rows * lanes);
        for r in 0..rows {
            let s = (s_lo + r as i64) as f64;
            for l in 0..lanes {
                let c = wall.color(s, l as f64);
                data.push(c.map(|v| v as f32));
            }
        }
        Self {
            s_lo,
            rows,
            lanes,
            data,
        }
    }

    fn sample(&self, s: f64, u: f64) -> [f64; 3] {
        let fs = s - self.s_lo as f64;
        let r0 = fs.floor();
        let ts = fs - r0;
        let r0 = (r0 as i64).clamp(0, self.rows as i64 - 1) as usize;
        let r1 = (r0 + 1).min(self.rows - 1);
        let fu = u.rem_euclid(self.lanes as f64);
        let l0f = fu.floor();
        let tu = fu - l0f;
        let l0 = (l0f as usize) % self.lanes;
        let l1 = (l0 + 1) % self.lanes;
        let px = |r: usize, l: usize| self.data[r * self.lanes + l];
        let (a, b, c, d) = (px(r0, l0), px(r0, l1), px(r1, l0), px(r1, l1));
        let mut out = [0.0; 3];
        for ch in 0..CHANNELS {
            let top = a[ch] as f64 * (1.0 - tu) + b[ch] as f64 * tu;
            let bot = c[ch] as f64 * (1.0 - tu) + d[ch] as f64 * tu;
            out[ch] = top * (1.0 - ts) + bot * ts;
        }
        out
    }
}

/// How the second screening departs from the first.
#[derive(Debug, Clone, Copy)]
struct Viewpoint {
    delay: i64,
    ds: f64,
    du: f64,
    zoom: f64,
    gain: f64,
    bias: f64,
    cast: [f64; 3],
    sensor_sigma: f64,
}

impl Viewpoint {
    const IDENTITY: Viewpoint = Viewpoint {
        delay: 0,
        ds: 0.0,
        du: 0.0,
        zoom: 1.0,
        gain: 1.0,
        bias: 0.0,
        cast: [0.0; 3],
        sensor_sigma: 0.0,
    };

    fn perturbed(rng: &mut ChaCha8Rng, noise: f64, max_jitter: usize, lanes: f64) -> Self {
        // Directions are drawn independently of `noise`, so every magnitude
        // grows linearly with it.
        let mut z = || {
            let m: f64 = rng.random_range(0.5..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let zd = z();
        let (zs, zu, zz, zg, zb) = (z(), z(), z(), z(), z());
        let cast = [z(), z(), z()];
        let nj = noise.min(1.0);
        Viewpoint {
            delay: (nj * max_jitter as f64 * zd).round() as i64,
            ds: noise * 30.0 * zs,
            du: noise * lanes * 0.4 * zu,
            zoom: 1.0 + (noise * 0.8 * zz).clamp(-0.5, 0.5),
            gain: 1.0 + noise * 2.0 * zg,
            bias: noise * 0.5 * zb,
            cast: cast.map(|c| noise * 0.6 * c),
            sensor_sigma: noise * 0.05,
        }
    }
}

fn render_video(
    raster: &Raster,
    traj: &Trajectory,
    view: &Viewpoint,
    cfg: &GeneratorConfig,
    sensor: &mut ChaCha8Rng,
    video_id: String,
) -> Result<VideoClip> {
    let (t_len, h, w) = (cfg.frames_per_video, cfg.height, cfg.width);
    let plane = h * w;
    let mut data = vec![0.0f32; t_len * CHANNELS * plane];
    let (hc, wc) = (h as f64 / 2.0, w as f64 / 2.0);
    let rmax2 = hc * hc + wc * wc;
    for t in 0..t_len {
        let tau = t as f64 - view.delay as f64;
        let (cs, cu) = (traj.s(tau), traj.u(tau));
        let frame = &mut data[t * CHANNELS * plane..(t + 1) * CHANNELS * plane];
        for y in 0..h {
            let dy = y as f64 + 0.5 - hc;
            for x in 0..w {
                let dx = x as f64 + 0.5 - wc;
                let rgb = raster.sample(cs + dy * view.zoom + view.ds, cu + dx * view.zoom + view.du);
                let vignette = 1.0 - 0.3 * (dy * dy + dx * dx) / rmax2;
                for ch in 0..CHANNELS {
                    let mut v = rgb[ch] * vignette;
                    v = (v * view.gain + view.bias) * (1.0 + view.cast[ch]);
                    if view.sensor_sigma > 0.0 {
                        let n: f64 = sensor.sample(StandardNormal);
                        v += view.sensor_sigma * n;
                    }
                    frame[ch * plane + y * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    VideoClip::new(data, [t_len, CHANNELS, h, w], video_id)
}

pub fn pair_file_names(pair: usize) -> (String, String) {
    (format!("pair{pair:02}_a.cvid"), format!("pair{pair:02}_b.cvid"))
}

/// Renders both screenings of pair `pair` in memory.
pub fn render_pair(cfg: &GeneratorConfig, pair: usize) -> Result<RenderedPair> {
    cfg.validate()?;
    let (t_len, h, w, q_len) = (
        cfg.frames_per_video,
        cfg.height,
        cfg.width,
        cfg.query_len,
    );
    let lanes = 2 * w;
    let jitter = cfg.max_jitter();

    let mut tex_rng = rng_for(cfg.seed, pair, STREAM_TEXTURE);
    let traj = Trajectory {
        s0: 0.0,
        speed: tex_rng.random_range(0.9..1.2),
        wobble_s: (tex_rng.random_range(3.0..7.0), tex_rng.random_range(0.0..2.0 * PI)),
        u0: tex_rng.random_range(0.0..lanes as f64),
        wobble_u: (tex_rng.random_range(5.0..12.0), tex_rng.random_range(0.0..2.0 * PI)),
    };

    // texture bounds generous enough for any admissible viewpoint
    let reach = (h as f64 / 2.0) * 1.5 + 30.0 + 16.0;
    let s_lo = (traj.s(-(jitter as f64)) - reach).floor();
    let s_hi = (traj.s((t_len + jitter) as f64) + reach).ceil();
    let mut wall = Wall::new(&mut tex_rng, lanes as f64, s_lo, s_hi);

    // Query intervals: one per equal segment of the admissible start range.
    let lo = jitter + 2;
    let hi = t_len - q_len - jitter - 2;
    let n = cfg.n_polyps_per_video;
    let seg = (hi - lo) as f64 / n as f64;
    let mut starts = Vec::with_capacity(n);
    for j in 0..n {
        let a = lo as f64 + seg * (j as f64 + 0.2);
        let b = lo as f64 + seg * (j as f64 + 0.8);
        let st = if b > a {
            tex_rng.random_range(a..b).round() as usize
        } else {
            a.round() as usize
        };
        starts.push(st.clamp(lo, hi));
    }
    for &st in &starts {
        let mid = st as f64 + q_len as f64 / 2.0;
        let off = tex_rng.random_range(-0.25..0.25) * w as f64;
        wall.add_polyp(&mut tex_rng, traj.s(mid), traj.u(mid) + off);
    }
    let raster = Raster::new(&wall, s_lo as i64, s_hi as i64, lanes);

    let mut perturb_rng = rng_for(cfg.seed, pair, STREAM_PERTURB);
    let view_b = Viewpoint::perturbed(&mut perturb_rng, cfg.landmark_noise, jitter, lanes as f64);
    let mut sensor = rng_for(cfg.seed, pair, STREAM_SENSOR);

    let (fa, fb) = pair_file_names(pair);
    let (id_a, id_b) = (super::manifest::video_id(&fa), super::manifest::video_id(&fb));
    let a = render_video(&raster, &traj, &Viewpoint::IDENTITY, cfg, &mut sensor, id_a.clone())?;
    let b = render_video(&raster, &traj, &view_b, cfg, &mut sensor, id_b.clone())?;

    let queries = starts
        .iter()
        .map(|&st| QueryEntry {
            video: id_a.clone(),
            start: st,
            len: q_len,
            target_video: id_b.clone(),
            target_start: (st as i64 + view_b.delay) as usize,
            target_len: q_len,
        })
        .collect();
    Ok(RenderedPair { a, b, queries })
}

/// 70/10/20 train/val/test assignment of pair indices.
pub fn split_pairs(n_pairs: usize, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut rng = rng_for(seed, 0, STREAM_SPLIT);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut n_test = (0.2 * n_pairs as f64).round() as usize;
    let n_val = if n_pairs >= 2 {
        ((0.1 * n_pairs as f64).round() as usize).max(1)
    } else {
        0
    };
    while n_pairs < n_val + n_test + 1 && n_test > 0 {
        n_test -= 1;
    }
    let n_train = n_pairs - n_val - n_test;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// Renders every pair into `out_dir` and writes `manifest.json`.
pub fn generate_paired_corpus(cfg: &GeneratorConfig, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut queries = Vec::new();
    for p in 0..cfg.n_pairs {
        let rendered = render_pair(cfg, p)?;
        let (fa, fb) = pair_file_names(p);
        write_clip(&out_dir.join(&fa), &rendered.a)?;
        write_clip(&out_dir.join(&fb), &rendered.b)?;
        pairs.push(PairEntry { a: fa, b: fb });
        queries.extend(rendered.queries);
    }
    let manifest = CorpusManifest {
        pairs,
        queries,
        splits: split_pairs(cfg.n_pairs, cfg.seed),
    };
    manifest.validate()?;
    manifest.save(&out_dir.join(super::MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            seed: 7,
            n_pairs: 3,
            frames_per_video: 64,
            height: 32,
            width: 32,
            n_polyps_per_video: 2,
            landmark_noise: 0.1,
            query_len: 16,
        }
    }

    #[test]
    fn zero_noise_renders_identical_screenings() {
        let cfg = GeneratorConfig {
            landmark_noise: 0.0,
            ..small()
        };
        let p = render_pair(&cfg, 1).unwrap();
        assert_eq!(p.a.data(), p.b.data());
        for q in &p.queries {
            assert_eq!(q.start, q.target_start);
        }
    }

    #[test]
    fn queries_fit_inside_both_videos() {
        for noise in [0.0, 0.1, 0.5, 3.0] {
            let cfg = GeneratorConfig {
                landmark_noise: noise,
                ..small()
            };
            for pair in 0..3 {
                let p = render_pair(&cfg, pair).unwrap();
                assert_eq!(p.queries.len(), 2);
                for q in &p.queries {
                    assert!(q.start + q.len <= p.a.len());
                    assert!(q.target_start + q.target_len <= p.b.len());
                    assert_eq!(q.len, q.target_len);
                }
            }
        }
    }

    #[test]
    fn first_screening_does_not_depend_on_noise() {
        let a0 = render_pair(&GeneratorConfig { landmark_noise: 0.0, ..small() }, 0).unwrap();
        let a1 = render_pair(&GeneratorConfig { landmark_noise: 0.3, ..small() }, 0).unwrap();
        assert_eq!(a0.a.data(), a1.a.data());
        assert_eq!(
            a0.queries.iter().map(|q| q.start).collect::<Vec<_>>(),
            a1.queries.iter().map(|q| q.start).collect::<Vec<_>>()
        );
    }

    #[test]
    fn splits_are_disjoint_and_cover_pairs() {
        let s = split_pairs(10, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let s = split_pairs(2, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(GeneratorConfig { n_pairs: 0, ..small() }.validate().is_err());
        assert!(GeneratorConfig { landmark_noise: -0.1, ..small() }.validate().is_err());
        assert!(GeneratorConfig { width: 40, ..small() }.validate().is_err());
        assert!(GeneratorConfig { frames_per_video: 20, ..small() }.validate().is_err());
    }
}
