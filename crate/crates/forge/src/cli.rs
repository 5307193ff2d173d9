//! Command-line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use zigan_core::glyph::{codepoint_label, parse_codepoint};

use crate::checkpoint::{load_recognizer, save_recognizer};
use crate::config::{keys_help, RunConfig};
use crate::corpus::{font_range, write_synthetic_corpus};
use crate::error::{ForgeError, Result};
use crate::pipeline;
use crate::render::SourceFont;

#[derive(Debug, Parser)]
#[command(name = "zigan", version, about = "Few-shot glyph style transfer: data preparation, training, generation and evaluation")]
pub struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CharArgs {
    /// Characters to process, taken literally.
    #[arg(long)]
    pub text: Option<String>,
    /// Comma-separated `U+XXXX` codepoints.
    #[arg(long, value_delimiter = ',')]
    pub codepoints: Vec<String>,
}

impl CharArgs {
    fn chars(&self) -> Result<Vec<char>> {
        let mut out: Vec<char> = self.text.as_deref().unwrap_or("").chars().filter(|c| !c.is_whitespace()).collect();
        for label in &self.codepoints {
            out.push(parse_codepoint(label.trim()).ok_or_else(|| ForgeError::Config(format!("bad codepoint {label:?}")))?);
        }
        if out.is_empty() {
            return Err(ForgeError::Config("give characters with --text or --codepoints".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the shot split and unpaired pool and write their manifests.
    Prepare,
    /// Train a model, checkpointing into <work_dir>/checkpoints.
    Train {
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stylize characters with a trained model.
    Generate {
        #[command(flatten)]
        chars: CharArgs,
        /// Checkpoint directory (default: latest under <work_dir>/checkpoints).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (default: <work_dir>/generate).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the held-out test set: IOU, recognizer accuracy and Fréchet distance.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train the glyph recognizer (saved in <work_dir>/recognizer) first.
        #[arg(long)]
        train_recognizer: bool,
        /// Output directory (default: <work_dir>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discriminator attention sheet: source, generated, heatmap and truth rows.
    Attention {
        #[command(flatten)]
        chars: CharArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (default: <work_dir>/attention).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic style corpus: font renders sheared and thickened.
    Synth {
        /// Codepoint range to render, e.g. U+0041-U+005A (default: pool_range).
        #[arg(long)]
        range: Option<String>,
        /// Horizontal shear per row.
        #[arg(long, default_value_t = 0.15)]
        shear: f32,
        /// Ink dilation in pixels.
        #[arg(long, default_value_t = 1)]
        grow: usize,
        /// Output directory (default: style_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn command() -> clap::Command {
    let help = keys_help();
    Cli::command().after_long_help(help.clone()).mut_subcommands(|s| s.after_long_help(help.clone()))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    let say = |w: &mut dyn Write, s: &str| {
        let _ = writeln!(w, "{s}");
    };
    match &cli.command {
        Command::Prepare => {
            let p = pipeline::prepare(&cfg)?;
            say(
                out,
                &format!(
                    "style {}: {} train, {} test; pool {} glyphs",
                    cfg.style_id,
                    p.split.train.len(),
                    p.split.test.len(),
                    p.pool.size()
                ),
            );
            say(out, &format!("wrote {}", cfg.split_manifest_path().display()));
            say(out, &format!("wrote {}", cfg.pool_manifest_path().display()));
        }
        Command::Train { resume } => {
            let mut progress = |line: &str| say(err, line);
            let r = pipeline::train(&cfg, resume.as_deref(), &mut progress)?;
            say(out, &format!("trained {} epochs, {} steps", r.state.epoch, r.state.step));
            say(out, &format!("checkpoint {}", r.checkpoint.display()));
            say(out, &format!("loss log {}", cfg.loss_log_path().display()));
        }
        Command::Generate { chars, checkpoint, out: dir } => {
            let chars = chars.chars()?;
            let ckpt = pipeline::resolve_checkpoint(&cfg, checkpoint.as_deref())?;
            let state = pipeline::load_model(&cfg, &ckpt)?;
            let dir = dir.clone().unwrap_or_else(|| cfg.work_dir.join("generate"));
            let r = pipeline::generate(&cfg, &state, &chars, &dir)?;
            for (c, why) in &r.skipped {
                say(err, &format!("warning: skipped {}: {why}", codepoint_label(*c)));
            }
            for p in r.written.iter().chain(&r.strip) {
                say(out, &format!("wrote {}", p.display()));
            }
        }
        Command::Eval { checkpoint, train_recognizer, out: dir } => {
            let ckpt = pipeline::resolve_checkpoint(&cfg, checkpoint.as_deref())?;
            let rec_dir = cfg.recognizer_path();
            let font = SourceFont::open(cfg.require_font()?)?;
            cfg.require_style_dir()?;
            let recognizer = if *train_recognizer {
                say(err, "training recognizer");
                let r = pipeline::fit_recognizer(&cfg)?;
                save_recognizer(&r, &rec_dir)?;
                say(err, &format!("recognizer train accuracy {:.4}", r.train_accuracy));
                r
            } else if rec_dir.is_dir() {
                load_recognizer(&rec_dir)?
            } else {
                return Err(ForgeError::Config(format!("no trained recognizer at {}; rerun with --train-recognizer", rec_dir.display())));
            };
            let state = pipeline::load_model(&cfg, &ckpt)?;
            let split = pipeline::load_split(&cfg, &font)?;
            let dir = dir.clone().unwrap_or_else(|| cfg.work_dir.join("eval"));
            let label = ckpt.display().to_string();
            let r = pipeline::evaluate_suite(&state.model.gen_s, &split, Some(&recognizer), cfg.ink_threshold, &dir, &label)?;
            say(out, &format!("test glyphs {}", r.test_size));
            say(out, &format!("iou {:.4}", r.suite.iou.mean));
            if let Some(a) = &r.suite.accuracy {
                say(out, &format!("top1 accuracy {:.4}", a.mean));
            }
            if let Some(f) = &r.suite.fid {
                for (s, v) in &f.per_style {
                    say(out, &format!("fid style {s} {v:.4}"));
                }
            }
            for p in &r.files {
                say(out, &format!("wrote {}", p.display()));
            }
        }
        Command::Attention { chars, checkpoint, out: dir } => {
            let chars = chars.chars()?;
            let ckpt = pipeline::resolve_checkpoint(&cfg, checkpoint.as_deref())?;
            let state = pipeline::load_model(&cfg, &ckpt)?;
            let dir = dir.clone().unwrap_or_else(|| cfg.work_dir.join("attention"));
            let r = pipeline::attention(&cfg, &state, &chars, &dir)?;
            for c in &r.degenerate {
                say(err, &format!("warning: constant attention map for {}", codepoint_label(*c)));
            }
            say(out, &format!("wrote {} ({}x{})", r.sheet.display(), r.rows, r.cols));
        }
        Command::Synth { range, shear, grow, out: dir } => {
            let font = SourceFont::open(cfg.require_font()?)?;
            let (lo, hi) = match range {
                Some(r) => {
                    let mut probe = RunConfig::default();
                    probe.set("pool_range", r)?;
                    probe.pool_range
                }
                None => cfg.pool_range,
            };
            let dir =
                dir.clone().or_else(|| cfg.style_dir.clone()).ok_or_else(|| ForgeError::Config("give --out or set style_dir".into()))?;
            let chars = font_range(&font, lo, hi);
            if chars.is_empty() {
                return Err(ForgeError::Data("the font covers no character in the range".into()));
            }
            write_synthetic_corpus(&font, &chars, &dir, cfg.style_id, *shear, *grow, cfg.resolution)?;
            say(out, &format!("wrote {} glyphs to {}", chars.len(), dir.display()));
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return 2;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
