//! Space-time cube tokens (2 frames × 16 × 16 pixels) and tube masks.

use rand::seq::index::sample;
use rand::Rng;

use crate::corpus::VideoClip;
use crate::error::{Error, Result};

pub const CUBE_T: usize = 2;
pub const CUBE_S: usize = 16;

/// Token grid size `(T′, H′, W′)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    /// Grid for a `T×H×W` clip.
    pub fn for_clip(t: usize, h: usize, w: usize) -> Result<Self> {
        if t % CUBE_T != 0 || h % CUBE_S != 0 || w % CUBE_S != 0 || t == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "clip {t}x{h}x{w} does not divide into {CUBE_T}x{CUBE_S}x{CUBE_S} cubes"
            )));
        }
        Ok(Self::new(t / CUBE_T, h / CUBE_S, w / CUBE_S))
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    /// `(t′, h′, w′)` of token `i` in lexicographic order.
    pub fn position(&self, i: usize) -> (usize, usize, usize) {
        (i / self.spatial(), (i / self.w) % self.h, i % self.w)
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }
}

/// Cube tokens of one clip, row `i` is token `i` in `(t′, h′, w′)` order.
/// Each row is laid out `(dt, c, dy, dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeGrid {
    pub cubes: Vec<f32>,
    pub dims: GridDims,
    pub channels: usize,
}

impl CubeGrid {
    pub fn cube_dim(&self) -> usize {
        CUBE_T * CUBE_S * CUBE_S * self.channels
    }

    pub fn n_tokens(&self) -> usize {
        self.dims.tokens()
    }

    pub fn cube(&self, i: usize) -> &[f32] {
        let d = self.cube_dim();
        &self.cubes[i * d..(i + 1) * d]
    }
}

pub fn cube_dim(channels: usize) -> usize {
    CUBE_T * CUBE_S * CUBE_S * channels
}

pub fn cubify(clip: &VideoClip) -> Result<CubeGrid> {
    let [t, c, h, w] = clip.dims();
    let dims = GridDims::for_clip(t, h, w)?;
    let d = cube_dim(c);
    let mut cubes = Vec::with_capacity(dims.tokens() * d);
    let data = clip.data();
    for gt in 0..dims.t {
        for gh in 0..dims.h {
            for gw in 0..dims.w {
                for dt in 0..CUBE_T {
                    let frame = gt * CUBE_T + dt;
                    for ch in 0..c {
                        for dy in 0..CUBE_S {
                            let y = gh * CUBE_S + dy;
                            let base = ((frame * c + ch) * h + y) * w + gw * CUBE_S;
                            cubes.extend_from_slice(&data[base..base + CUBE_S]);
                        }
                    }
                }
            }
        }
    }
    Ok(CubeGrid {
        cubes,
        dims,
        channels: c,
    })
}

/// Inverse of [`cubify`].
pub fn uncubify(grid: &CubeGrid, video_id: &str) -> Result<VideoClip> {
    let GridDims { t: gt_n, h: gh_n, w: gw_n } = grid.dims;
    let c = grid.channels;
    let (t, h, w) = (gt_n * CUBE_T, gh_n * CUBE_S, gw_n * CUBE_S);
    if grid.cubes.len() != grid.n_tokens() * grid.cube_dim() {
        return Err(Error::Dimension("cube buffer does not match grid".into()));
    }
    let mut data = vec![0.0f32; t * c * h * w];
    let mut src = grid.cubes.chunks_exact(CUBE_S);
    for gt in 0..gt_n {
        for gh in 0..gh_n {
            for gw in 0..gw_n {
                for dt in 0..CUBE_T {
                    let frame = gt * CUBE_T + dt;
                    for ch in 0..c {
                        for dy in 0..CUBE_S {
                            let y = gh * CUBE_S + dy;
                            let base = ((frame * c + ch) * h + y) * w + gw * CUBE_S;
                            let row = src.next().expect("length checked above");
                            data[base..base + CUBE_S].copy_from_slice(row);
                        }
                    }
                }
            }
        }
    }
    VideoClip::new(data, [t, c, h, w], video_id)
}

/// One spatial mask shared by every temporal group.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeMask {
    pub dims: GridDims,
    pub spatial: Vec<bool>,
    pub ratio: f64,
}

impl TubeMask {
    /// A mask hiding nothing.
    pub fn empty(dims: GridDims) -> Self {
        Self {
            dims,
            spatial: vec![false; dims.spatial()],
            ratio: 0.0,
        }
    }

    pub fn n_masked_spatial(&self) -> usize {
        self.spatial.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.spatial[token % self.dims.spatial()]
    }

    /// Masked token indices (the set Ω), ascending.
    pub fn masked_tokens(&self) -> Vec<usize> {
        (0..self.dims.tokens()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn visible_tokens(&self) -> Vec<usize> {
        (0..self.dims.tokens()).filter(|&i| !self.is_masked(i)).collect()
    }
}

/// Masks `round(ratio·H′·W′)` spatial positions drawn without replacement.
pub fn sample_tube_mask<R: Rng + ?Sized>(dims: GridDims, ratio: f64, rng: &mut R) -> Result<TubeMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let n = dims.spatial();
    let k = (ratio * n as f64).round() as usize;
    let mut spatial = vec![false; n];
    for i in sample(rng, n, k.min(n)) {
        spatial[i] = true;
    }
    Ok(TubeMask {
        dims,
        spatial,
        ratio,
    })
}

/// Visible cubes (in token order) with their positions, plus the masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibleSplit {
    pub tokens: Vec<f32>,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

pub fn split_visible(grid: &CubeGrid, mask: &TubeMask) -> Result<VisibleSplit> {
    if grid.dims != mask.dims || mask.spatial.len() != grid.dims.spatial() {
        return Err(Error::Dimension(format!(
            "mask grid {:?} does not match token grid {:?}",
            mask.dims, grid.dims
        )));
    }
    let visible = mask.visible_tokens();
    let masked = mask.masked_tokens();
    let mut tokens = Vec::with_capacity(visible.len() * grid.cube_dim());
    for &i in &visible {
        tokens.extend_from_slice(grid.cube(i));
    }
    Ok(VisibleSplit {
        tokens,
        visible,
        masked,
    })
}

/// Standardises each masked cube over all of its elements:
/// `(x − mean) / (std + eps)`, rows in masked-token order.
pub fn normalize_targets(grid: &CubeGrid, mask: &TubeMask, eps: f64) -> Result<Vec<f32>> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("normalization eps must be > 0, got {eps}")));
    }
    if grid.dims != mask.dims {
        return Err(Error::Dimension("mask does not match grid".into()));
    }
    let masked = mask.masked_tokens();
    let mut out = Vec::with_capacity(masked.len() * grid.cube_dim());
    for &i in &masked {
        out.extend(normalize_cube(grid.cube(i), eps));
    }
    Ok(out)
}

fn normalize_cube(x: &[f32], eps: f64) -> impl Iterator<Item = f32> + '_ {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    x.iter().map(move |&v| ((v as f64 - mean) / denom) as f32)
}
