//! `VideoClip` and the CVID on-disk format.
//!
//! Layout: `b"CVID"`, then little-endian `u32` T, C, H, W, then T·C·H·W
//! little-endian `f32` values in \[0,1\], T-major row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CVID_MAGIC: [u8; 4] = *b"CVID";
const HEADER_LEN: u64 = 20;

/// Spatial granularity required by the cube embedding.
pub const SPATIAL_MULTIPLE: usize = 16;

/// A dense `T×C×H×W` pixel block plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<f32>,
    dims: [usize; 4],
    pub video_id: String,
    pub start_frame: usize,
    pub fps: f32,
}

impl VideoClip {
    /// Builds a clip, enforcing even T, H and W multiples of 16 and pixels in \[0,1\].
    pub fn new(frames: Vec<f32>, dims: [usize; 4], video_id: impl Into<String>) -> Result<Self> {
        let clip = Self::unchecked(frames, dims, video_id)?;
        clip.validate()?;
        Ok(clip)
    }

    /// Like [`VideoClip::new`] but only checks the element count. Used for
    /// whole recordings, which may have any length.
    pub fn unchecked(frames: Vec<f32>, dims: [usize; 4], video_id: impl Into<String>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if frames.len() != numel {
            return Err(Error::Dimension(format!(
                "clip dims {dims:?} need {numel} values, got {}",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            dims,
            video_id: video_id.into(),
            start_frame: 0,
            fps: 25.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let [t, _, h, w] = self.dims;
        if t % 2 != 0 {
            return Err(Error::Dimension(format!("clip length {t} is not even")));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Dimension(format!(
                "frame size {h}x{w} is not a multiple of {SPATIAL_MULTIPLE}"
            )));
        }
        self.check_pixels()
    }

    fn check_pixels(&self) -> Result<()> {
        match self
            .frames
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            Some(i) => Err(Error::Range(format!(
                "pixel {i} of {} is {} (outside [0,1])",
                self.video_id, self.frames[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.dims;
        self.frames[((t * ch + c) * h + y) * w + x]
    }

    /// Copies frames `[start, start + len)` into a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<VideoClip> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Range(format!(
                "window [{start}, {}) outside video {} of {} frames",
                start + len,
                self.video_id,
                self.len()
            )));
        }
        let n = self.frame_len();
        let mut clip = VideoClip::new(
            self.frames[start * n..(start + len) * n].to_vec(),
            [len, self.dims[1], self.dims[2], self.dims[3]],
            self.video_id.clone(),
        )?;
        clip.start_frame = self.start_frame + start;
        clip.fps = self.fps;
        Ok(clip)
    }
}

/// Writes a clip (or whole recording) in CVID format.
pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CVID_MAGIC)?;
    for d in clip.dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in &clip.frames {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the four dimensions from a CVID header and checks the payload size.
pub fn read_header(path: &Path) -> Result<[usize; 4]> {
    let mut f = File::open(path)?;
    read_header_from(&mut f, path)
}

fn read_header_from(f: &mut File, path: &Path) -> Result<[usize; 4]> {
    let mut head = [0u8; HEADER_LEN as usize];
    let got = read_fully(f, &mut head)?;
    if got < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{got} bytes, no magic"),
        });
    }
    let magic: [u8; 4] = head[..4].try_into().expect("4 bytes");
    if magic != CVID_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CVID_MAGIC,
            found: magic,
        });
    }
    if got < HEADER_LEN as usize {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header has {got} of {HEADER_LEN} bytes"),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let b: [u8; 4] = head[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes");
        *d = u32::from_le_bytes(b) as usize;
    }
    let want = HEADER_LEN + 4 * dims.iter().map(|&d| d as u64).product::<u64>();
    let have = f.metadata()?.len();
    if have < want {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("payload needs {want} bytes, file has {have}"),
        });
    }
    Ok(dims)
}

fn read_fully(f: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match f.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

fn video_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes frames `[start_frame, start_frame + length)` of a CVID file.
pub fn load_clip(path: &Path, start_frame: usize, length: usize) -> Result<VideoClip> {
    let mut f = File::open(path)?;
    let dims = read_header_from(&mut f, path)?;
    if length == 0 || start_frame + length > dims[0] {
        return Err(Error::Range(format!(
            "window [{start_frame}, {}) outside {} of {} frames",
            start_frame + length,
            path.display(),
            dims[0]
        )));
    }
    let frame_len = dims[1] * dims[2] * dims[3];
    f.seek(SeekFrom::Start(HEADER_LEN + 4 * (start_frame * frame_len) as u64))?;
    let mut bytes = vec![0u8; 4 * length * frame_len];
    BufReader::new(f).read_exact(&mut bytes)?;
    let frames: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut clip = VideoClip::unchecked(frames, [length, dims[1], dims[2], dims[3]], video_id_of(path))?;
    clip.check_pixels()?;
    clip.start_frame = start_frame;
    Ok(clip)
}

/// Loads an entire recording.
pub fn load_video(path: &Path) -> Result<VideoClip> {
    let dims = read_header(path)?;
    load_clip(path, 0, dims[0])
}

/// A `[start, start + len)` frame interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClipWindow {
    pub start: usize,
    pub len: usize,
}

impl ClipWindow {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// All full windows `[i·stride, i·stride + clip_len)` of a `total`-frame video.
pub fn segment_windows(total: usize, clip_len: usize, stride: usize) -> Result<Vec<ClipWindow>> {
    if clip_len == 0 || clip_len % 2 != 0 {
        return Err(Error::Config(format!("clip_len must be even and > 0, got {clip_len}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if clip_len > total {
        return Ok(Vec::new());
    }
    Ok((0..=(total - clip_len) / stride)
        .map(|i| ClipWindow {
            start: i * stride,
            len: clip_len,
        })
        .collect())
}

/// Sliding windows over the video stored at `path`.
pub fn segment_video(path: &Path, clip_len: usize, stride: usize) -> Result<Vec<ClipWindow>> {
    let dims = read_header(path)?;
    segment_windows(dims[0], clip_len, stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(t: usize) -> VideoClip {
        let dims = [t, 3, 16, 32];
        let n: usize = dims.iter().product();
        let data = (0..n).map(|i| (i % 251) as f32 / 250.0).collect();
        VideoClip::new(data, dims, "ramp").unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.cvid");
        let clip = ramp_clip(6);
        write_clip(&path, &clip).unwrap();
        let back = load_video(&path).unwrap();
        assert_eq!(back.data(), clip.data());
        assert_eq!(back.dims(), clip.dims());
        assert_eq!(back.video_id, "ramp");

        let win = load_clip(&path, 2, 4).unwrap();
        assert_eq!(win.data(), clip.window(2, 4).unwrap().data());
        assert_eq!(win.start_frame, 2);
    }

    #[test]
    fn payload_length_follows_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.cvid");
        let clip = VideoClip::new(vec![0.5; 16 * 3 * 64 * 64], [16, 3, 64, 64], "v").unwrap();
        write_clip(&path, &clip).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 20 + 4 * 16 * 3 * 64 * 64);
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.cvid");
        write_clip(&path, &ramp_clip(4)).unwrap();

        assert!(matches!(load_clip(&path, 4, 2), Err(Error::Range(_))));
        assert!(matches!(load_clip(&path, 3, 2), Err(Error::Range(_))));

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.cvid");
        let mut b = bytes.clone();
        b[..4].copy_from_slice(b"XVID");
        std::fs::write(&bad, &b).unwrap();
        assert!(matches!(load_clip(&bad, 0, 2), Err(Error::BadMagic { .. })));

        let short = dir.path().join("short.cvid");
        std::fs::write(&short, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_clip(&short, 0, 2), Err(Error::Truncated { .. })));
        std::fs::write(&short, &bytes[..10]).unwrap();
        assert!(matches!(load_clip(&short, 0, 2), Err(Error::Truncated { .. })));
    }

    #[test]
    fn clip_invariants_are_enforced() {
        assert!(VideoClip::new(vec![0.0; 3 * 3 * 16 * 16], [3, 3, 16, 16], "odd").is_err());
        assert!(VideoClip::new(vec![0.0; 2 * 3 * 8 * 16], [2, 3, 8, 16], "small").is_err());
        assert!(matches!(
            VideoClip::new(vec![1.5; 2 * 16 * 16], [2, 1, 16, 16], "hot"),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn window_counts() {
        assert_eq!(segment_windows(64, 16, 16).unwrap().len(), 4);
        assert_eq!(segment_windows(64, 16, 8).unwrap().len(), 7);
        assert_eq!(
            segment_windows(16, 16, 1).unwrap(),
            vec![ClipWindow { start: 0, len: 16 }]
        );
        assert!(segment_windows(10, 16, 4).unwrap().is_empty());
        assert!(segment_windows(64, 15, 4).is_err());
        assert!(segment_windows(64, 16, 0).is_err());
        let w = segment_windows(70, 16, 9).unwrap();
        assert!(w.iter().enumerate().all(|(i, c)| c.start == 9 * i && c.end() <= 70));
    }
}
