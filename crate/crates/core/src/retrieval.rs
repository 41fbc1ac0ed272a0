//! Gallery embedding, exhaustive cosine search and R@k / mAP scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{load_clip, segment_video, video_id, ClipWindow, Corpus, QueryEntry};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tokenizer::cubify;

pub const CIDX_MAGIC: [u8; 4] = *b"CIDX";
pub const RECALL_KS: [usize; 3] = [1, 5, 10];
/// Stride of the distractor windows in annotated mode.
pub const DISTRACTOR_STRIDE: usize = 32;
const NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GalleryMode {
    /// Every window of every second screening.
    Sliding,
    /// Annotated targets plus non-overlapping distractor windows.
    Annotated,
}

impl FromStr for GalleryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(Self::Sliding),
            "annotated" => Ok(Self::Annotated),
            other => Err(Error::Config(format!("unknown gallery mode {other:?} (sliding|annotated)"))),
        }
    }
}

impl std::fmt::Display for GalleryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sliding => "sliding",
            Self::Annotated => "annotated",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub video_id: String,
    pub start: usize,
    pub embedding: Vec<f32>,
}

/// Embedded gallery windows in segmentation order.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub clip_len: usize,
    pub d_emb: usize,
    pub entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn new(clip_len: usize, d_emb: usize) -> Self {
        Self {
            clip_len,
            d_emb,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry, enforcing unit norm and unique `(video, start)`.
    pub fn push(&mut self, entry: GalleryEntry) -> Result<()> {
        if entry.embedding.len() != self.d_emb {
            return Err(Error::Dimension(format!(
                "embedding of {} values in an index of dim {}",
                entry.embedding.len(),
                self.d_emb
            )));
        }
        let n = entry.embedding.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!(
                "gallery embedding {}@{} has norm {n}",
                entry.video_id, entry.start
            )));
        }
        if self
            .entries
            .iter()
            .any(|e| e.start == entry.start && e.video_id == entry.video_id)
        {
            return Err(Error::Contract(format!(
                "duplicate gallery entry {}@{}",
                entry.video_id, entry.start
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn window(&self, i: usize) -> ClipWindow {
        ClipWindow {
            start: self.entries[i].start,
            len: self.clip_len,
        }
    }

    /// CIDX layout: magic, u32 count, u32 d_emb, u32 clip_len, then per
    /// entry u16 id length, id bytes, u32 start and d_emb f32 values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(16 + self.len() * (self.d_emb * 4 + 32));
        buf.extend_from_slice(&CIDX_MAGIC);
        for v in [self.len(), self.d_emb, self.clip_len] {
            buf.extend_from_slice(&u32::try_from(v).map_err(|_| Error::Range(format!("{v} exceeds u32")))?.to_le_bytes());
        }
        for e in &self.entries {
            let id = e.video_id.as_bytes();
            let n = u16::try_from(id.len()).map_err(|_| Error::Range(format!("video id too long: {}", e.video_id)))?;
            buf.extend_from_slice(&n.to_le_bytes());
            buf.extend_from_slice(id);
            buf.extend_from_slice(&(e.start as u32).to_le_bytes());
            for &v in &e.embedding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let mut r = Cursor { buf: &buf, pos: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CIDX_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: CIDX_MAGIC,
                found: magic,
            });
        }
        let count = r.u32()?;
        let d_emb = r.u32()?;
        let clip_len = r.u32()?;
        let mut index = GalleryIndex::new(clip_len, d_emb);
        for _ in 0..count {
            let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Contract(format!("non-UTF-8 video id in {}", path.display())))?;
            let start = r.u32()?;
            let embedding = r
                .take(4 * d_emb)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            index.push(GalleryEntry {
                video_id: id,
                start,
                embedding,
            })?;
        }
        if r.pos != buf.len() {
            return Err(Error::Contract(format!(
                "{} has {} trailing bytes",
                path.display(),
                buf.len() - r.pos
            )));
        }
        Ok(index)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("need {n} bytes at offset {}", self.pos),
            });
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Gallery windows per second-screening file, in manifest pair order.
pub fn gallery_windows(corpus: &Corpus, clip_len: usize, stride: usize, mode: GalleryMode) -> Result<Vec<(String, Vec<ClipWindow>)>> {
    let mut out = Vec::new();
    for file in corpus.manifest.second_screenings() {
        let path = corpus.path(file);
        let id = video_id(file);
        let windows = match mode {
            GalleryMode::Sliding => segment_video(&path, clip_len, stride)?,
            GalleryMode::Annotated => {
                let targets: Vec<ClipWindow> = corpus
                    .manifest
                    .queries
                    .iter()
                    .filter(|q| q.target_video == id)
                    .map(|q| {
                        if q.target_len != clip_len {
                            return Err(Error::Config(format!(
                                "target {}@{} has length {} but clip_len is {clip_len}",
                                q.target_video, q.target_start, q.target_len
                            )));
                        }
                        Ok(ClipWindow {
                            start: q.target_start,
                            len: q.target_len,
                        })
                    })
                    .collect::<Result<_>>()?;
                let mut w: Vec<ClipWindow> = segment_video(&path, clip_len, DISTRACTOR_STRIDE)?
                    .into_iter()
                    .filter(|d| targets.iter().all(|t| d.end() <= t.start || t.end() <= d.start))
                    .collect();
                for t in targets {
                    if !w.iter().any(|x| x.start == t.start) {
                        w.push(t);
                    }
                }
                w.sort_by_key(|x| x.start);
                w
            }
        };
        out.push((file.to_string(), windows));
    }
    Ok(out)
}

/// Unit embedding of a single clip read from a CVID file.
pub fn embed_window(model: &ModelParams<f32>, path: &Path, window: ClipWindow) -> Result<Vec<f32>> {
    let clip = load_clip(path, window.start, window.len)?;
    let grid = cubify(&clip)?;
    Ok(model.embed_tokens(&[grid.cubes], 1)?.remove(0))
}

/// Embeds every gallery window; `threads` workers split the windows of each
/// video and the result does not depend on the worker count.
pub fn build_index(
    model: &ModelParams<f32>,
    corpus: &Corpus,
    clip_len: usize,
    stride: usize,
    mode: GalleryMode,
    threads: usize,
) -> Result<GalleryIndex> {
    let mut index = GalleryIndex::new(clip_len, model.config.d_emb);
    for (file, windows) in gallery_windows(corpus, clip_len, stride, mode)? {
        let path = corpus.path(&file);
        let id = video_id(&file);
        let embeddings = embed_parallel(model, &path, &windows, threads)?;
        for (w, e) in windows.iter().zip(embeddings) {
            index.push(GalleryEntry {
                video_id: id.clone(),
                start: w.start,
                embedding: e,
            })?;
        }
    }
    if index.is_empty() {
        return Err(Error::Config(format!(
            "empty gallery ({mode} mode, clip_len {clip_len}, stride {stride})"
        )));
    }
    Ok(index)
}

fn embed_parallel(model: &ModelParams<f32>, path: &Path, windows: &[ClipWindow], threads: usize) -> Result<Vec<Vec<f32>>> {
    let threads = threads.clamp(1, windows.len().max(1));
    if threads == 1 {
        return windows.iter().map(|&w| embed_window(model, path, w)).collect();
    }
    let per = windows.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = windows
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().map(|&w| embed_window(model, path, w)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Contract("embedding worker panicked".into()))??);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub entry: usize,
    pub score: f64,
}

/// Top `k` entries by dot product, ties broken by insertion order. `k`
/// larger than the index returns the full ranking.
pub fn query_topk(index: &GalleryIndex, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if query.len() != index.d_emb {
        return Err(Error::Dimension(format!(
            "query of {} values against an index of dim {}",
            query.len(),
            index.d_emb
        )));
    }
    let scores: Vec<f64> = index
        .entries
        .iter()
        .map(|e| e.embedding.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect();
    let mut hits = rank_scores(&scores);
    hits.truncate(k);
    Ok(hits)
}

/// Every index by descending score, ties by ascending index.
pub fn rank_scores(scores: &[f64]) -> Vec<Hit> {
    let mut hits: Vec<Hit> = scores
        .iter()
        .enumerate()
        .map(|(entry, &score)| Hit { entry, score })
        .collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry.cmp(&b.entry)));
    hits
}

pub fn temporal_iou(a: ClipWindow, b: ClipWindow) -> f64 {
    let inter = a.end().min(b.end()).saturating_sub(a.start.max(b.start));
    let union = a.len + b.len - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// True when the window lies in the target video with IoU at least `threshold`.
pub fn relevance(video: &str, window: ClipWindow, query: &QueryEntry, threshold: f64) -> bool {
    video == query.target_video
        && temporal_iou(
            window,
            ClipWindow {
                start: query.target_start,
                len: query.target_len,
            },
        ) >= threshold
}

/// Relevance flags of one query's full ranking, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    pub hits: Vec<Hit>,
    pub relevant: Vec<bool>,
}

impl RankedQuery {
    pub fn n_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_relevant(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }
}

/// Mean precision at the rank of each relevant item; 0 without any.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

fn scored(queries: &[RankedQuery]) -> Vec<&RankedQuery> {
    let kept: Vec<&RankedQuery> = queries.iter().filter(|q| q.n_relevant() > 0).collect();
    if kept.len() < queries.len() {
        log::warn!(
            "{} of {} queries have no relevant gallery item and are excluded",
            queries.len() - kept.len(),
            queries.len()
        );
    }
    kept
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn recall_at_k(queries: &[RankedQuery], k: usize) -> f64 {
    let kept = scored(queries);
    if kept.is_empty() {
        return 0.0;
    }
    let hits = kept.iter().filter(|q| q.first_relevant().is_some_and(|r| r <= k)).count();
    hits as f64 / kept.len() as f64
}

pub fn mean_ap(queries: &[RankedQuery]) -> f64 {
    let kept = scored(queries);
    if kept.is_empty() {
        return 0.0;
    }
    kept.iter().map(|q| average_precision(&q.relevant)).sum::<f64>() / kept.len() as f64
}

/// Full ranking of `query_embedding` with relevance against `query`.
pub fn rank_query(index: &GalleryIndex, query_embedding: &[f32], query: &QueryEntry, iou_threshold: f64) -> Result<RankedQuery> {
    let hits = query_topk(index, query_embedding, index.len().max(1))?;
    let relevant = hits
        .iter()
        .map(|h| relevance(&index.entries[h.entry].video_id, index.window(h.entry), query, iou_threshold))
        .collect();
    Ok(RankedQuery { hits, relevant })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    pub query: QueryEntry,
    pub ranked: RankedQuery,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub mode: GalleryMode,
    pub gallery_size: usize,
    pub rows: Vec<QueryRow>,
    pub recall_at: BTreeMap<usize, f64>,
    pub map_score: f64,
}

/// Value format shared by the metric line and the CSV.
pub fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

impl RetrievalReport {
    pub fn from_rankings(mode: GalleryMode, gallery_size: usize, queries: &[QueryEntry], ranked: Vec<RankedQuery>) -> Self {
        let recall_at = RECALL_KS.iter().map(|&k| (k, recall_at_k(&ranked, k))).collect();
        let map_score = mean_ap(&ranked);
        let rows = queries
            .iter()
            .zip(ranked)
            .map(|(q, r)| QueryRow {
                query: q.clone(),
                average_precision: average_precision(&r.relevant),
                ranked: r,
            })
            .collect();
        Self {
            mode,
            gallery_size,
            rows,
            recall_at,
            map_score,
        }
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(0.0)
    }

    /// `R@1=<v> R@5=<v> R@10=<v> mAP=<v>`
    pub fn metric_line(&self) -> String {
        format!(
            "R@1={} R@5={} R@10={} mAP={}",
            fmt_metric(self.recall(1)),
            fmt_metric(self.recall(5)),
            fmt_metric(self.recall(10)),
            fmt_metric(self.map_score)
        )
    }

    /// One row per query plus an aggregate `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query,video,start,target_video,target_start,n_relevant,first_rank,ap,r@1,r@5,r@10\n");
        for (i, row) in self.rows.iter().enumerate() {
            let first = row.ranked.first_relevant();
            let hit = |k: usize| u8::from(first.is_some_and(|r| r <= k));
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{},{},{},{},{}",
                row.query.video,
                row.query.start,
                row.query.target_video,
                row.query.target_start,
                row.ranked.n_relevant(),
                first.map_or_else(|| "none".to_string(), |r| r.to_string()),
                fmt_metric(row.average_precision),
                hit(1),
                hit(5),
                hit(10)
            );
        }
        let _ = writeln!(
            s,
            "all,{},{},,,,,{},{},{},{}",
            self.mode,
            self.gallery_size,
            fmt_metric(self.map_score),
            fmt_metric(self.recall(1)),
            fmt_metric(self.recall(5)),
            fmt_metric(self.recall(10))
        );
        s
    }

    /// Top-10 ranked list of every query with scores and relevance flags.
    pub fn rankings_csv(&self, index: &GalleryIndex) -> String {
        let mut s = String::from("query,rank,video,start,score,relevant\n");
        for (i, row) in self.rows.iter().enumerate() {
            for (r, (h, &rel)) in row.ranked.hits.iter().zip(&row.ranked.relevant).take(10).enumerate() {
                let e = &index.entries[h.entry];
                let _ = writeln!(s, "{i},{},{},{},{:.6},{}", r + 1, e.video_id, e.start, h.score, u8::from(rel));
            }
        }
        s
    }

    /// Bar chart of R@1, R@5 and R@10.
    pub fn to_svg(&self) -> String {
        bar_chart_svg(
            &format!("{} gallery, {} entries, mAP {}", self.mode, self.gallery_size, fmt_metric(self.map_score)),
            &RECALL_KS.map(|k| (format!("R@{k}"), self.recall(k))),
        )
    }
}

/// Minimal SVG bar chart for values in [0, 1].
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (w, h, pad, bw) = (80 + 90 * bars.len(), 260, 40.0, 60.0);
    let plot = h as f64 - 2.0 * pad;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"{pad}\" y=\"20\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        xml_escape(title),
        h as f64 - pad,
        w as f64 - 10.0,
        h as f64 - pad
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let bh = plot * v.clamp(0.0, 1.0);
        let x = pad + 20.0 + i as f64 * 90.0;
        let y = h as f64 - pad - bh;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{y:.2}\" width=\"{bw}\" height=\"{bh:.2}\" fill=\"#4a7ab5\"/>\n\
             <text x=\"{x}\" y=\"{:.2}\">{}</text>\n\
             <text x=\"{x}\" y=\"{}\">{}</text>",
            y - 4.0,
            fmt_metric(*v),
            h as f64 - pad + 16.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Builds the index and ranks every manifest query against it.
pub fn evaluate(
    model: &ModelParams<f32>,
    corpus: &Corpus,
    cfg: &RetrievalConfig,
) -> Result<(GalleryIndex, RetrievalReport)> {
    cfg.validate()?;
    let index = build_index(model, corpus, cfg.clip_len, cfg.stride, cfg.mode, cfg.threads)?;
    let mut ranked = Vec::with_capacity(corpus.manifest.queries.len());
    for q in &corpus.manifest.queries {
        let file = corpus
            .manifest
            .file_for_video(&q.video)
            .ok_or_else(|| Error::Contract(format!("unknown query video {}", q.video)))?;
        if q.len != cfg.clip_len {
            return Err(Error::Config(format!(
                "query {}@{} has length {} but clip_len is {}",
                q.video, q.start, q.len, cfg.clip_len
            )));
        }
        let e = embed_window(
            model,
            &corpus.path(file),
            ClipWindow {
                start: q.start,
                len: q.len,
            },
        )?;
        ranked.push(rank_query(&index, &e, q, cfg.iou_threshold)?);
    }
    let report = RetrievalReport::from_rankings(cfg.mode, index.len(), &corpus.manifest.queries, ranked);
    Ok((index, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    pub clip_len: usize,
    pub stride: usize,
    pub mode: GalleryMode,
    pub iou_threshold: f64,
    pub threads: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            clip_len: 16,
            stride: 8,
            mode: GalleryMode::Sliding,
            iou_threshold: 0.5,
            threads: 1,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.stride == 0 {
            return Err(Error::Config("retrieval.clip_len and retrieval.stride must be >= 1".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "retrieval.iou_threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
