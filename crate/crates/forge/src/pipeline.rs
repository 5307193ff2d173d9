//! The operations behind each command, usable without the binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;
use zigan_core::evaluation::{generate_test_set, score_outputs, train_recognizer, MetricSuite, StyleOutputs, TrainedRecognizer};
use zigan_core::glyph::{codepoint_label, plan_split, GlyphImage, ShotSplit, SplitPlan, UnpairedPool};
use zigan_core::networks::{export_attention_heatmap, Generator};
use zigan_core::tensor::Tensor;
use zigan_core::training::{run_training, StepReport, TrainObserver, TrainState};

use crate::checkpoint::{epoch_dir, latest_checkpoint, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::corpus::{build_unpaired_pool, font_range, glyph_path, list_corpus, materialize_split, par_map, pool_manifest};
use crate::error::{ForgeError, Result, ResultExt};
use crate::imageio::{blank, heat_to_rgb, load_glyph, save_png, to_rgb, write_atomic, Grid};
use crate::losslog::{read_loss_log, rows_for, write_loss_log, LossRow};
use crate::render::SourceFont;

/// Most columns in an evaluation grid.
pub const GRID_COLUMNS: usize = 50;

pub struct Prepared {
    pub font: SourceFont,
    pub split: ShotSplit,
    pub pool: UnpairedPool,
}

/// Builds the shot split and unpaired pool and writes both manifests.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let font = SourceFont::open(cfg.require_font()?)?;
    let style_dir = cfg.require_style_dir()?;
    let corpus = list_corpus(style_dir)?;
    let plan = plan_split(&corpus, cfg.style_id, cfg.shots, cfg.seed).context(|| format!("style_dir {}", style_dir.display()))?;
    let split = materialize_split(&plan, style_dir, &font, cfg.resolution, cfg.workers)?;
    let universe = font_range(&font, cfg.pool_range.0, cfg.pool_range.1);
    let pool =
        build_unpaired_pool(&font, cfg.pool_size, cfg.seed, &universe, cfg.resolution, cfg.workers).context(|| "unpaired pool".into())?;
    write_atomic(&cfg.split_manifest_path(), plan.manifest().as_bytes())?;
    write_atomic(&cfg.pool_manifest_path(), pool_manifest(&pool, cfg.seed).as_bytes())?;
    Ok(Prepared { font, split, pool })
}

/// Writes checkpoints and the loss log while training runs.
struct RunObserver<'a> {
    root: PathBuf,
    log_path: PathBuf,
    every: usize,
    epochs: usize,
    rows: Vec<LossRow>,
    epoch_totals: Vec<f64>,
    epoch_d: Vec<f64>,
    progress: &'a mut dyn FnMut(&str),
}

impl TrainObserver for RunObserver<'_> {
    type Error = ForgeError;

    fn on_step(&mut self, r: &StepReport) -> Result<()> {
        self.rows.extend(rows_for(r));
        self.epoch_totals.push(r.losses.total);
        self.epoch_d.push(r.d_loss);
        Ok(())
    }

    fn on_epoch_end(&mut self, st: &TrainState) -> Result<()> {
        let n = self.epoch_totals.len().max(1) as f64;
        let line = format!(
            "epoch {:>5}/{} step {:>7} lr {:.3e} total {:.4} d {:.4}",
            st.epoch,
            self.epochs,
            st.step,
            st.opt_g.lr,
            self.epoch_totals.iter().sum::<f64>() / n,
            self.epoch_d.iter().sum::<f64>() / n
        );
        (self.progress)(&line);
        self.epoch_totals.clear();
        self.epoch_d.clear();
        if st.epoch.is_multiple_of(self.every) || st.epoch == self.epochs {
            self.checkpoint(st)?;
        }
        Ok(())
    }
}

impl RunObserver<'_> {
    fn checkpoint(&mut self, st: &TrainState) -> Result<()> {
        save_checkpoint(st, &epoch_dir(&self.root, st.epoch))?;
        write_loss_log(&self.log_path, &self.rows)
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Full log including rows restored from a resumed run.
    pub rows: Vec<LossRow>,
    pub checkpoint: PathBuf,
}

/// Trains from scratch or from `resume`, checkpointing every
/// `checkpoint_every` epochs and at the end.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let tc = cfg.train_config()?;
    if let Some(dir) = resume {
        if !dir.is_dir() {
            return Err(ForgeError::Config(format!("--resume {} is not a directory", dir.display())));
        }
    }
    let data = prepare(cfg)?;
    let (mut state, rows) = match resume {
        None => (TrainState::new(tc.clone())?, Vec::new()),
        Some(dir) => {
            let state = load_checkpoint(dir, &tc)?;
            let log = cfg.loss_log_path();
            let rows = if log.is_file() { read_loss_log(&log)? } else { Vec::new() };
            let rows = rows.into_iter().filter(|r| r.step < state.step).collect();
            (state, rows)
        }
    };
    let mut obs = RunObserver {
        root: cfg.checkpoint_root(),
        log_path: cfg.loss_log_path(),
        every: cfg.checkpoint_every,
        epochs: tc.epochs,
        rows,
        epoch_totals: Vec::new(),
        epoch_d: Vec::new(),
        progress,
    };
    if state.epoch >= tc.epochs {
        obs.checkpoint(&state)?;
    } else {
        run_training(&mut state, &data.split, &data.pool, &mut obs)?;
    }
    Ok(TrainOutcome { checkpoint: epoch_dir(&obs.root, state.epoch), rows: obs.rows, state })
}

/// The explicit checkpoint, or the latest one under the work directory.
pub fn resolve_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    latest_checkpoint(&cfg.checkpoint_root())?
        .ok_or_else(|| ForgeError::Config(format!("no checkpoint under {}; run `train` first", cfg.checkpoint_root().display())))
}

pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<TrainState> {
    load_checkpoint(checkpoint, &cfg.train_config()?).context(|| format!("checkpoint {}", checkpoint.display()))
}

fn generate_one(gen: &Generator, source: &GlyphImage, style_id: u32) -> Result<GlyphImage> {
    let out = gen.generate(source.pixels())?;
    Ok(GlyphImage::new(out, source.codepoint, style_id)?)
}

#[derive(Debug, Default)]
pub struct GenerateOutcome {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<(char, String)>,
    pub strip: Option<PathBuf>,
}

/// Stylizes `chars` with a trained model: one PNG per character plus a
/// one-row strip of all of them.
pub fn generate(cfg: &RunConfig, state: &TrainState, chars: &[char], out_dir: &Path) -> Result<GenerateOutcome> {
    if chars.is_empty() {
        return Err(ForgeError::Config("no characters to generate".into()));
    }
    let font = SourceFont::open(cfg.require_font()?)?;
    let mut done = Vec::new();
    let mut outcome = GenerateOutcome::default();
    for &c in chars {
        match font.render(c, cfg.resolution) {
            Ok(src) => done.push(generate_one(&state.model.gen_s, &src, cfg.style_id)?),
            Err(e @ ForgeError::MissingGlyph(_)) => outcome.skipped.push((c, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if done.is_empty() {
        return Err(ForgeError::MissingGlyph(format!("all {} requested characters", chars.len())));
    }
    let mut strip = Grid::new(1, done.len(), cfg.resolution)?;
    for (i, g) in done.iter().enumerate() {
        let tile = to_rgb(g.pixels());
        let path = glyph_path(out_dir, g.codepoint);
        save_png(&path, &tile)?;
        strip.put(0, i, &tile)?;
        outcome.written.push(path);
    }
    let strip_path = out_dir.join("strip.png");
    save_png(&strip_path, &strip.image)?;
    outcome.strip = Some(strip_path);
    Ok(outcome)
}

/// Ground-truth glyphs of every recognizer corpus directory.
pub fn recognizer_corpus(cfg: &RunConfig) -> Result<(Vec<GlyphImage>, Vec<char>)> {
    let mut images = Vec::new();
    for (i, dir) in cfg.recognizer_dirs()?.iter().enumerate() {
        let chars = list_corpus(dir)?;
        let style = i as u32 + 1;
        images.extend(par_map(&chars, cfg.workers, |&c| load_glyph(&glyph_path(dir, c), c, style, cfg.resolution))?);
    }
    let mut classes: Vec<char> = images.iter().map(|g| g.codepoint).collect();
    classes.sort_unstable();
    classes.dedup();
    Ok((images, classes))
}

pub fn fit_recognizer(cfg: &RunConfig) -> Result<TrainedRecognizer> {
    let (images, classes) = recognizer_corpus(cfg)?;
    Ok(train_recognizer(&images, &classes, cfg.recognizer, cfg.seed)?)
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub suite: MetricSuite,
    pub test_size: usize,
    pub grid: Option<(usize, usize)>,
    pub files: Vec<PathBuf>,
}

fn metrics_csv(suite: &MetricSuite) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ForgeError::Data(format!("metrics: {e}"));
    w.write_record(["style_id", "metric", "value"]).map_err(err)?;
    let mut put = |style: String, metric: &str, v: f64| w.write_record([style, metric.to_string(), format!("{v:?}")]);
    for (s, v) in &suite.iou.per_style {
        put(s.to_string(), "iou", *v).map_err(err)?;
    }
    if !suite.iou.empty {
        put("mean".into(), "iou", suite.iou.mean).map_err(err)?;
    }
    if let Some(a) = &suite.accuracy {
        for (s, v) in &a.per_style {
            put(s.to_string(), "top1_accuracy", *v).map_err(err)?;
        }
        if !a.empty {
            put("mean".into(), "top1_accuracy", a.mean).map_err(err)?;
        }
    }
    if let Some(f) = &suite.fid {
        for (s, v) in &f.per_style {
            put(s.to_string(), "fid", *v).map_err(err)?;
            let reg = f.regularized.get(s).copied().unwrap_or(false);
            put(s.to_string(), "fid_regularized", if reg { 1.0 } else { 0.0 }).map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| ForgeError::Data(format!("metrics: {e}")))
}

fn summary_json(suite: &MetricSuite, test_size: usize, grid: Option<(usize, usize)>, checkpoint: &str) -> serde_json::Value {
    let per = |m: &BTreeMap<u32, f64>| m.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>();
    json!({
        "checkpoint": checkpoint,
        "test_size": test_size,
        "iou": { "mean": suite.iou.mean, "per_style": per(&suite.iou.per_style), "empty": suite.iou.empty },
        "accuracy": suite.accuracy.as_ref().map(|a| json!({
            "mean": a.mean, "per_style": per(&a.per_style), "recognizer": a.recognizer, "empty": a.empty,
        })),
        "fid": suite.fid.as_ref().map(|f| json!({
            "per_style": per(&f.per_style),
            "regularized": f.regularized.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "extractor": f.extractor,
            "empty": f.empty,
        })),
        "grid": grid.map(|(r, c)| json!({ "rows": r, "cols": c })),
    })
}

/// Generates every test glyph, scores it and writes `metrics.csv`,
/// `summary.json` and (for a nonempty test set) `grid.png` with source,
/// generated and ground-truth rows.
pub fn evaluate_suite(
    gen: &Generator,
    split: &ShotSplit,
    recognizer: Option<&TrainedRecognizer>,
    threshold: f32,
    out_dir: &Path,
    checkpoint_label: &str,
) -> Result<SuiteOutcome> {
    let outputs: StyleOutputs = generate_test_set(gen, split)?;
    let rec = recognizer.map(|r| (&r.recognizer, r.classes.as_slice()));
    let suite = score_outputs(&[split], std::slice::from_ref(&outputs), threshold, rec)?;
    let n = split.test.len();
    let mut files = Vec::new();
    let grid = if n == 0 {
        None
    } else {
        let cols = n.min(GRID_COLUMNS);
        let mut g = Grid::new(3, cols, gen.config().resolution)?;
        for (i, (p, y)) in split.test.iter().zip(&outputs.generated).take(cols).enumerate() {
            g.put(0, i, &to_rgb(p.source.pixels()))?;
            g.put(1, i, &to_rgb(y.pixels()))?;
            g.put(2, i, &to_rgb(p.target.pixels()))?;
        }
        let path = out_dir.join("grid.png");
        save_png(&path, &g.image)?;
        files.push(path);
        Some((3, cols))
    };
    let csv_path = out_dir.join("metrics.csv");
    write_atomic(&csv_path, &metrics_csv(&suite)?)?;
    files.push(csv_path);
    let json_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary_json(&suite, n, grid, checkpoint_label))
        .map_err(|e| ForgeError::Data(format!("summary: {e}")))?;
    write_atomic(&json_path, text.as_bytes())?;
    files.push(json_path);
    Ok(SuiteOutcome { suite, test_size: n, grid, files })
}

/// Re-materializes the split recorded in the work directory, or plans it
/// afresh when no manifest exists yet.
pub fn load_split(cfg: &RunConfig, font: &SourceFont) -> Result<ShotSplit> {
    let style_dir = cfg.require_style_dir()?;
    let path = cfg.split_manifest_path();
    let plan = if path.is_file() {
        let text = std::fs::read_to_string(&path).map_err(|e| ForgeError::io(&path, e))?;
        SplitPlan::parse_manifest(&text).context(|| path.display().to_string())?
    } else {
        plan_split(&list_corpus(style_dir)?, cfg.style_id, cfg.shots, cfg.seed)?
    };
    materialize_split(&plan, style_dir, font, cfg.resolution, cfg.workers)
}

#[derive(Debug)]
pub struct AttentionOutcome {
    pub sheet: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub heatmaps: Vec<PathBuf>,
    pub degenerate: Vec<char>,
}

/// Attention sheet with rows source, generated, heatmap and ground truth
/// (blank when the style corpus lacks the character), plus one heatmap PNG
/// per character.
pub fn attention(cfg: &RunConfig, state: &TrainState, chars: &[char], out_dir: &Path) -> Result<AttentionOutcome> {
    if chars.is_empty() {
        return Err(ForgeError::Config("no characters for the attention sheet".into()));
    }
    let font = SourceFont::open(cfg.require_font()?)?;
    let res = cfg.resolution;
    let mut sheet = Grid::new(4, chars.len(), res)?;
    let mut out =
        AttentionOutcome { sheet: out_dir.join("attention.png"), rows: 4, cols: chars.len(), heatmaps: Vec::new(), degenerate: Vec::new() };
    for (i, &c) in chars.iter().enumerate() {
        let src = font.render(c, res)?;
        let fake = generate_one(&state.model.gen_s, &src, cfg.style_id)?;
        let d = state.model.disc_t.forward(fake.pixels())?;
        let heat = export_attention_heatmap(&d.attention, 0, res)?;
        if heat.degenerate {
            out.degenerate.push(c);
        }
        let heat_img = heat_to_rgb(&heat.values, res);
        let truth: Tensor = match cfg.style_dir.as_deref().map(|d| glyph_path(d, c)).filter(|p| p.is_file()) {
            Some(p) => load_glyph(&p, c, cfg.style_id, res)?.into_pixels(),
            None => blank(res),
        };
        sheet.put(0, i, &to_rgb(src.pixels()))?;
        sheet.put(1, i, &to_rgb(fake.pixels()))?;
        sheet.put(2, i, &heat_img)?;
        sheet.put(3, i, &to_rgb(&truth))?;
        let path = out_dir.join(format!("{}-heat.png", codepoint_label(c)));
        save_png(&path, &heat_img)?;
        out.heatmaps.push(path);
    }
    save_png(&out.sheet, &sheet.image)?;
    Ok(out)
}
