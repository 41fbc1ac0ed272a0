//! Clip-wise consistent augmentation: one parameter draw per clip, applied
//! identically to every frame in the order crop, flip, blur, jitter.

use rand::Rng;

use crate::corpus::VideoClip;
use crate::error::{Error, Result};

/// Luma weights used for the saturation jitter.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub crop: CropRect,
    pub flip: bool,
    pub blur_sigma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl AugmentParams {
    /// Full-frame crop and no photometric change.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop: CropRect {
                top: 0,
                left: 0,
                height,
                width,
            },
            flip: false,
            blur_sigma: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the frame.
    pub crop_scale: (f64, f64),
    /// Crop width/height ratio.
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    pub blur_sigma: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub output_size: (usize, usize),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            blur_sigma: (0.0, 1.2),
            brightness: (-0.2, 0.2),
            contrast: (-0.2, 0.2),
            saturation: (-0.2, 0.2),
            output_size: (64, 64),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    // A draw is consumed even for point ranges so that streams stay aligned
    // across policies that differ only in ranges.
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

impl AugmentPolicy {
    /// A policy whose every draw is the identity on `output_size` frames.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            flip_prob: 0.0,
            blur_sigma: (0.0, 0.0),
            brightness: (0.0, 0.0),
            contrast: (0.0, 0.0),
            saturation: (0.0, 0.0),
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("augment.{name} range [{lo}, {hi}] is not ordered")))
            }
        };
        ordered("crop_scale", self.crop_scale)?;
        ordered("crop_aspect", self.crop_aspect)?;
        ordered("blur_sigma", self.blur_sigma)?;
        ordered("brightness", self.brightness)?;
        ordered("contrast", self.contrast)?;
        ordered("saturation", self.saturation)?;
        if !(self.crop_scale.0 > 0.0 && self.crop_scale.1 <= 1.0) {
            return Err(Error::Config(format!(
                "augment.crop_scale must lie in (0, 1], got {:?}",
                self.crop_scale
            )));
        }
        if self.crop_aspect.0 <= 0.0 {
            return Err(Error::Config("augment.crop_aspect must be positive".into()));
        }
        if self.blur_sigma.0 < 0.0 {
            return Err(Error::Config("augment.blur_sigma must be >= 0".into()));
        }
        if self.contrast.0 < -1.0 || self.saturation.0 < -1.0 {
            return Err(Error::Config("contrast and saturation deltas must be >= -1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment.flip_prob {} outside [0,1]", self.flip_prob)));
        }
        let (h, w) = self.output_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "augment.output_size {h}x{w} must be positive multiples of 16"
            )));
        }
        Ok(())
    }

    /// One draw for a clip of `height × width` frames.
    pub fn sample_params<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> AugmentParams {
        let area = height as f64 * width as f64 * uniform(rng, self.crop_scale);
        // Restrict the aspect range to crops that fit in the frame.
        let lo = self.crop_aspect.0.max(area / (height * height) as f64);
        let hi = self.crop_aspect.1.min((width * width) as f64 / area);
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, hi) };
        let aspect = (uniform(rng, (lo.ln(), hi.ln()))).exp();
        let ch = ((area / aspect).sqrt().round() as usize).clamp(1, height);
        let cw = ((area * aspect).sqrt().round() as usize).clamp(1, width);
        let top = rng.random_range(0..=height - ch);
        let left = rng.random_range(0..=width - cw);
        let flip = rng.random::<f64>() < self.flip_prob;
        AugmentParams {
            crop: CropRect {
                top,
                left,
                height: ch,
                width: cw,
            },
            flip,
            blur_sigma: uniform(rng, self.blur_sigma),
            brightness: uniform(rng, self.brightness),
            contrast: uniform(rng, self.contrast),
            saturation: uniform(rng, self.saturation),
        }
    }

    /// Two independent draws applied to the same clip.
    pub fn two_views<R: Rng + ?Sized>(&self, clip: &VideoClip, rng: &mut R) -> Result<(VideoClip, VideoClip)> {
        let pq = self.sample_params(clip.height(), clip.width(), rng);
        let pk = self.sample_params(clip.height(), clip.width(), rng);
        Ok((
            apply(clip, &pq, self.output_size)?,
            apply(clip, &pk, self.output_size)?,
        ))
    }
}

/// Normalised truncated Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernel: &[f32], tmp: &mut Vec<f32>) {
    let r = (kernel.len() / 2) as isize;
    tmp.clear();
    tmp.resize(h * w, 0.0);
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &k) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += k * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &k) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Bilinear sampling grid along one axis (half-pixel centres).
fn resample_axis(src_len: usize, offset: usize, dst_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (offset + i0, offset + i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Applies one parameter set to every frame of `clip`.
pub fn apply(clip: &VideoClip, params: &AugmentParams, output_size: (usize, usize)) -> Result<VideoClip> {
    let [t_len, c_len, h, w] = clip.dims();
    let cr = params.crop;
    if cr.height == 0 || cr.width == 0 || cr.top + cr.height > h || cr.left + cr.width > w {
        return Err(Error::Range(format!(
            "crop {}x{} at ({}, {}) outside {h}x{w} frame",
            cr.height, cr.width, cr.top, cr.left
        )));
    }
    let (oh, ow) = output_size;
    let plane = oh * ow;
    let ys = resample_axis(cr.height, cr.top, oh);
    let xs = resample_axis(cr.width, cr.left, ow);
    let exact = cr.height == oh && cr.width == ow;
    let kernel: Vec<f32> = gaussian_kernel(params.blur_sigma)
        .into_iter()
        .map(|k| k as f32)
        .collect();
    let mut out = vec![0.0f32; t_len * c_len * plane];
    let mut tmp = Vec::new();
    for t in 0..t_len {
        let src = clip.frame(t);
        let dst = &mut out[t * c_len * plane..(t + 1) * c_len * plane];
        for c in 0..c_len {
            let sp = &src[c * h * w..(c + 1) * h * w];
            let dp = &mut dst[c * plane..(c + 1) * plane];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = if exact {
                        sp[(cr.top + oy) * w + cr.left + ox]
                    } else {
                        let top = sp[y0 * w + x0] * (1.0 - fx) + sp[y0 * w + x1] * fx;
                        let bot = sp[y1 * w + x0] * (1.0 - fx) + sp[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bot * fy
                    };
                    let dx = if params.flip { ow - 1 - ox } else { ox };
                    dp[oy * ow + dx] = v;
                }
            }
            if kernel.len() > 1 {
                blur_plane(dp, oh, ow, &kernel, &mut tmp);
            }
        }
        jitter_frame(dst, c_len, plane, params);
    }
    let mut res = VideoClip::unchecked(out, [t_len, c_len, oh, ow], clip.video_id.clone())?;
    res.start_frame = clip.start_frame;
    res.fps = clip.fps;
    Ok(res)
}

fn jitter_frame(frame: &mut [f32], c_len: usize, plane: usize, p: &AugmentParams) {
    if p.brightness != 0.0 {
        let b = p.brightness as f32;
        frame.iter_mut().for_each(|v| *v += b);
    }
    if p.contrast != 0.0 {
        let k = 1.0 + p.contrast as f32;
        frame.iter_mut().for_each(|v| *v = (*v - 0.5) * k + 0.5);
    }
    if p.saturation != 0.0 && c_len == 3 {
        let k = 1.0 + p.saturation as f32;
        for i in 0..plane {
            let l = LUMA[0] * frame[i] + LUMA[1] * frame[plane + i] + LUMA[2] * frame[2 * plane + i];
            for c in 0..3 {
                let v = &mut frame[c * plane + i];
                *v = l + (*v - l) * k;
            }
        }
    }
    frame.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}
