//! Command implementations behind the `scrl` binary. Each `cmd_*` returns a
//! process exit code: 0 success, 1 configuration or precondition error,
//! 2 I/O or format error, 3 non-finite loss.

use std::path::{Path, PathBuf};

use crate::config::{threads_from_env, RunConfig};
use crate::contrast::{run_finetuning, Init};
use crate::corpus::{generate_paired_corpus, Corpus, CorpusManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pretrainer::{has_resume_state, resume_pretraining, run_pretraining};
use crate::retrieval::{bar_chart_svg, evaluate, fmt_metric, GalleryMode, RetrievalReport};

pub const PRETRAIN_DIR: &str = "pretrain";
pub const CONTRAST_DIR: &str = "contrast";
pub const SCRATCH_DIR: &str = "contrast-scratch";
pub const EVAL_DIR: &str = "eval";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Contrast,
    Both,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "contrast" => Ok(Self::Contrast),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown stage {other:?} (pretrain|contrast|both)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainOptions {
    pub from_scratch: bool,
    pub force: bool,
    pub resume: bool,
}

/// Maps a result to an exit code, reporting errors on stderr.
pub fn exit_code<T>(r: Result<T>) -> i32 {
    match r {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn is_populated(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

fn refuse_overwrite(dir: &Path, force: bool) -> Result<()> {
    if !force && is_populated(dir) {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} already exists; pass --force to overwrite", dir.display()),
        )));
    }
    Ok(())
}

pub fn gen_data(config: &Path, force: bool) -> Result<CorpusManifest> {
    let cfg = RunConfig::load(config)?;
    refuse_overwrite(&cfg.corpus_dir, force)?;
    let manifest = generate_paired_corpus(&cfg.corpus, &cfg.corpus_dir)?;
    cfg.write_copy(&cfg.corpus_dir)?;
    println!(
        "corpus {}: {} pairs, {} queries, {} frames of {}x{}, splits train={} val={} test={}",
        cfg.corpus_dir.display(),
        manifest.pairs.len(),
        manifest.queries.len(),
        cfg.corpus.frames_per_video,
        cfg.corpus.height,
        cfg.corpus.width,
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len()
    );
    Ok(manifest)
}

pub fn cmd_gen_data(config: &Path, force: bool) -> i32 {
    exit_code(gen_data(config, force))
}

fn open_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = Corpus::open(&cfg.corpus_dir)?;
    corpus.validate_intervals()?;
    Ok(corpus)
}

/// Runs the requested stages; returns the checkpoints written.
pub fn train(config: &Path, stage: Stage, opts: &TrainOptions) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(config)?;
    if opts.from_scratch && stage != Stage::Contrast {
        return Err(Error::Config("--from-scratch applies to --stage contrast only".into()));
    }
    let corpus = open_corpus(&cfg)?;
    let pre_dir = cfg.output_dir.join(PRETRAIN_DIR);
    let mut out = Vec::new();
    if matches!(stage, Stage::Pretrain | Stage::Both) {
        let ckpt = if opts.resume && has_resume_state(&pre_dir) {
            resume_pretraining(&cfg.pretrain, &cfg.model, &corpus, &pre_dir)?
        } else {
            refuse_overwrite(&pre_dir, opts.force)?;
            cfg.write_copy(&pre_dir)?;
            run_pretraining(&cfg.pretrain, &cfg.model, &corpus, &pre_dir)?
        };
        println!("stage 1 checkpoint {}", ckpt.display());
        out.push(ckpt);
    }
    if matches!(stage, Stage::Contrast | Stage::Both) {
        let (init, dir) = if opts.from_scratch {
            (Init::Scratch, cfg.output_dir.join(SCRATCH_DIR))
        } else {
            let ckpt = pre_dir.join(crate::pretrainer::BEST_CHECKPOINT);
            if !ckpt.exists() {
                return Err(Error::Config(format!(
                    "no stage-1 checkpoint at {}; run --stage pretrain first or pass --from-scratch",
                    ckpt.display()
                )));
            }
            (Init::Pretrained(ckpt), cfg.output_dir.join(CONTRAST_DIR))
        };
        refuse_overwrite(&dir, opts.force)?;
        cfg.write_copy(&dir)?;
        let ckpt = run_finetuning(&cfg.contrast, &cfg.model, &corpus, &init, &dir)?;
        println!("stage 2 checkpoint {}", ckpt.display());
        out.push(ckpt);
    }
    Ok(out)
}

pub fn cmd_train(config: &Path, stage: Stage, opts: &TrainOptions) -> i32 {
    exit_code(train(config, stage, opts))
}

/// Directory that holds the evaluation of `checkpoint` in `mode`.
pub fn eval_dir(cfg: &RunConfig, checkpoint: &Path, mode: GalleryMode) -> PathBuf {
    let label = checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    cfg.output_dir.join(EVAL_DIR).join(format!("{label}-{mode}"))
}

pub fn eval(config: &Path, checkpoint: Option<&Path>, mode: Option<GalleryMode>) -> Result<RetrievalReport> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = mode {
        cfg.retrieval.mode = m;
    }
    cfg.retrieval.threads = threads_from_env()?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(CONTRAST_DIR).join(crate::contrast::BEST_CHECKPOINT));
    let corpus = open_corpus(&cfg)?;
    let model = ModelParams::load(&cfg.model, &ckpt)?;
    if !model.has_head() {
        return Err(Error::Config(format!(
            "{} has no projection head; evaluate a stage-2 checkpoint",
            ckpt.display()
        )));
    }
    let (index, report) = evaluate(&model, &corpus, &cfg.retrieval)?;
    let dir = eval_dir(&cfg, &ckpt, cfg.retrieval.mode);
    cfg.write_copy(&dir)?;
    index.save(&dir.join("gallery.cidx"))?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(dir.join("rankings.csv"), report.rankings_csv(&index))?;
    std::fs::write(dir.join("report.svg"), report.to_svg())?;
    std::fs::write(dir.join("checkpoint.txt"), format!("{}\n", ckpt.display()))?;
    println!("{}", report.metric_line());
    Ok(report)
}

pub fn cmd_eval(config: &Path, checkpoint: Option<&Path>, mode: Option<GalleryMode>) -> i32 {
    exit_code(eval(config, checkpoint, mode))
}

/// Aggregate row of one evaluation, read back from its CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub mode: String,
    pub gallery_size: usize,
    pub map_score: f64,
    pub recall: [f64; 3],
}

pub fn read_summary_row(label: &str, csv: &str) -> Result<SummaryRow> {
    let last = csv
        .lines()
        .rfind(|l| l.starts_with("all,"))
        .ok_or_else(|| Error::Contract(format!("report {label} has no aggregate row")))?;
    let f: Vec<&str> = last.split(',').collect();
    if f.len() != 11 {
        return Err(Error::Contract(format!("report {label}: malformed aggregate row {last:?}")));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Contract(format!("report {label}: bad number {s:?}")))
    };
    Ok(SummaryRow {
        label: label.to_string(),
        mode: f[1].to_string(),
        gallery_size: f[2]
            .parse()
            .map_err(|_| Error::Contract(format!("report {label}: bad gallery size")))?,
        map_score: num(f[7])?,
        recall: [num(f[8])?, num(f[9])?, num(f[10])?],
    })
}

/// Collects every evaluation under the output directory into
/// `summary.csv` and `summary.svg`.
pub fn report(config: &Path) -> Result<Vec<SummaryRow>> {
    let cfg = RunConfig::load(config)?;
    let root = cfg.output_dir.join(EVAL_DIR);
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", root.display()))))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.csv").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no evaluation reports under {}", root.display()),
        )));
    }
    let mut rows = Vec::new();
    let mut csv = String::from("run,mode,gallery_size,r@1,r@5,r@10,map\n");
    for d in &dirs {
        let label = d.file_name().unwrap().to_string_lossy().into_owned();
        let row = read_summary_row(&label, &std::fs::read_to_string(d.join("report.csv"))?)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.label,
            row.mode,
            row.gallery_size,
            fmt_metric(row.recall[0]),
            fmt_metric(row.recall[1]),
            fmt_metric(row.recall[2]),
            fmt_metric(row.map_score)
        ));
        println!(
            "{}: R@1={} R@5={} R@10={} mAP={}",
            row.label,
            fmt_metric(row.recall[0]),
            fmt_metric(row.recall[1]),
            fmt_metric(row.recall[2]),
            fmt_metric(row.map_score)
        );
        rows.push(row);
    }
    std::fs::write(cfg.output_dir.join("summary.csv"), csv)?;
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (format!("{} mAP", r.label), r.map_score)).collect();
    std::fs::write(cfg.output_dir.join("summary.svg"), bar_chart_svg("mAP per run", &bars))?;
    Ok(rows)
}

pub fn cmd_report(config: &Path) -> i32 {
    exit_code(report(config))
}

/// True when `dir` holds a generated corpus.
pub fn has_corpus(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).exists()
}
