//! Clip data model, on-disk formats, corpus loading and the synthetic
//! paired-screening generator.

mod clip;
mod generator;
mod manifest;

use std::path::{Path, PathBuf};

pub use clip::{
    load_clip, load_video, read_header, segment_video, segment_windows, write_clip, ClipWindow,
    VideoClip, CVID_MAGIC, SPATIAL_MULTIPLE,
};
pub use generator::{
    generate_paired_corpus, pair_file_names, render_pair, split_pairs, GeneratorConfig,
    RenderedPair,
};
pub use manifest::{video_id, CorpusManifest, PairEntry, QueryEntry, Split, Splits};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A corpus directory: manifest plus CVID recordings.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no manifest at {}", path.display()),
            )));
        }
        let manifest = CorpusManifest::load(&path)?;
        manifest.validate()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn load_video(&self, file: &str) -> Result<VideoClip> {
        load_video(&self.path(file))
    }

    /// Every recording of the pairs in `split`, fully decoded.
    pub fn load_split(&self, split: Split) -> Result<Vec<VideoClip>> {
        self.manifest
            .split_files(split)
            .into_iter()
            .map(|f| self.load_video(f))
            .collect()
    }

    /// Checks query intervals against actual video lengths.
    pub fn validate_intervals(&self) -> Result<()> {
        for q in &self.manifest.queries {
            for (id, start, len) in [
                (&q.video, q.start, q.len),
                (&q.target_video, q.target_start, q.target_len),
            ] {
                let file = self
                    .manifest
                    .file_for_video(id)
                    .ok_or_else(|| Error::Contract(format!("unknown video {id}")))?;
                let dims = read_header(&self.path(file))?;
                if start + len > dims[0] {
                    return Err(Error::Contract(format!(
                        "interval [{start}, {}) outside {id} of {} frames",
                        start + len,
                        dims[0]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One training clip: a window into a loaded recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRef {
    pub video: usize,
    pub window: ClipWindow,
}

/// Sliding windows over a set of loaded recordings, in video then time order.
pub fn clip_refs(videos: &[VideoClip], clip_len: usize, stride: usize) -> Result<Vec<ClipRef>> {
    let mut out = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        for w in segment_windows(v.len(), clip_len, stride)? {
            out.push(ClipRef { video: i, window: w });
        }
    }
    Ok(out)
}

/// Loaded recordings plus the sliding windows drawn from them.
#[derive(Debug, Clone)]
pub struct ClipSet {
    pub videos: Vec<VideoClip>,
    pub refs: Vec<ClipRef>,
    pub clip_len: usize,
}

impl ClipSet {
    pub fn new(videos: Vec<VideoClip>, clip_len: usize, stride: usize) -> Result<Self> {
        let refs = clip_refs(&videos, clip_len, stride)?;
        Ok(Self {
            videos,
            refs,
            clip_len,
        })
    }

    pub fn from_split(corpus: &Corpus, split: Split, clip_len: usize, stride: usize) -> Result<Self> {
        Self::new(corpus.load_split(split)?, clip_len, stride)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn clip(&self, i: usize) -> Result<VideoClip> {
        let r = self.refs[i];
        self.videos[r.video].window(r.window.start, r.window.len)
    }
}
