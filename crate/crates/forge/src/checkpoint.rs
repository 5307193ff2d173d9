//! Checkpoint directories.
//!
//! ```text
//! <dir>/meta                 epoch, step, seed, config hash
//! <dir>/train.txt            training configuration
//! <dir>/manifest             one line per parameter tensor
//! <dir>/params/<net>/<name>.bin
//! <dir>/optimizer/{d,g}/state
//! <dir>/optimizer/{d,g}/manifest
//! <dir>/optimizer/{d,g}/<net>/<name>.{m,v}.bin
//! ```
//!
//! Tensors are raw little-endian f32. Manifest lines read
//! `name shape dtype byteorder layer kind sha256`. Random draws during
//! training are keyed by `(seed, epoch)` and `(seed, step)`, so those two
//! counters are the whole generator state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use zigan_core::evaluation::TrainedRecognizer;
use zigan_core::glyph::{codepoint_label, parse_codepoint};
use zigan_core::networks::{Recognizer, RecognizerConfig};
use zigan_core::optim::{Moments, OptimizerState};
use zigan_core::params::{NetId, ParamKind, ParamSet};
use zigan_core::tensor::{Shape, Tensor};
use zigan_core::training::{TrainConfig, TrainState};

use crate::config::{parse_train_config, train_config_text};
use crate::error::{ForgeError, Result};
use crate::imageio::write_dir_atomic;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "# name shape dtype byteorder layer kind sha256";

pub fn net_tag(net: NetId) -> String {
    match net.0 {
        0 => "gen_s".into(),
        1 => "gen_t".into(),
        2 => "disc_s".into(),
        3 => "disc_t".into(),
        4 => "disc_s_local".into(),
        5 => "disc_t_local".into(),
        6 => "recognizer".into(),
        n => format!("net{n}"),
    }
}

fn corrupt(msg: impl Into<String>) -> ForgeError {
    ForgeError::CorruptCheckpoint(msg.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of the training configuration without `epochs` and
/// `checkpoint_every`, which may change when a run is extended.
pub fn config_hash(config: &TrainConfig) -> String {
    let text: String = train_config_text(config)
        .lines()
        .filter(|l| !l.starts_with("epochs ") && !l.starts_with("checkpoint_every "))
        .map(|l| format!("{l}\n"))
        .collect();
    sha256_hex(text.as_bytes())
}

fn shape_text(s: Shape) -> String {
    format!("{}x{}x{}x{}", s.n, s.c, s.h, s.w)
}

fn parse_shape(text: &str) -> Option<Shape> {
    let d: Vec<usize> = text.split('x').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    (d.len() == 4).then(|| Shape::new(d[0], d[1], d[2], d[3]))
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// A tensor listed in a manifest.
#[derive(Debug, Clone, PartialEq)]
struct Entry {
    shape: Shape,
    layer: usize,
    kind: ParamKind,
    sha: String,
}

fn kind_text(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Trainable => "trainable",
        ParamKind::Buffer => "buffer",
    }
}

/// Writes tensors under `root` plus a manifest; `name` doubles as the
/// relative file path without the `.bin` suffix.
fn write_tensors(root: &Path, items: &[(String, &Tensor, usize, ParamKind)]) -> Result<()> {
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (name, t, layer, kind) in items {
        let bytes = tensor_bytes(t);
        let path = root.join(format!("{name}.bin"));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
        }
        std::fs::write(&path, &bytes).map_err(|e| ForgeError::io(&path, e))?;
        manifest.push_str(&format!("{name} {} f32 le {layer} {} {}\n", shape_text(t.shape()), kind_text(*kind), sha256_hex(&bytes)));
    }
    let path = root.join("manifest");
    std::fs::write(&path, manifest).map_err(|e| ForgeError::io(&path, e))
}

fn read_manifest(root: &Path) -> Result<BTreeMap<String, Entry>> {
    let path = root.join("manifest");
    let text = std::fs::read_to_string(&path).map_err(|_| corrupt(format!("missing {}", path.display())))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || corrupt(format!("bad manifest line {line:?}"));
        if f.len() != 7 || f[2] != "f32" || f[3] != "le" {
            return Err(bad());
        }
        let kind = match f[5] {
            "trainable" => ParamKind::Trainable,
            "buffer" => ParamKind::Buffer,
            _ => return Err(bad()),
        };
        let entry =
            Entry { shape: parse_shape(f[1]).ok_or_else(bad)?, layer: f[4].parse().map_err(|_| bad())?, kind, sha: f[6].to_string() };
        if out.insert(f[0].to_string(), entry).is_some() {
            return Err(corrupt(format!("duplicate manifest entry {}", f[0])));
        }
    }
    Ok(out)
}

fn read_tensor(root: &Path, name: &str, entry: &Entry) -> Result<Tensor> {
    let path = root.join(format!("{name}.bin"));
    let bytes = std::fs::read(&path).map_err(|_| corrupt(format!("missing {}", path.display())))?;
    if bytes.len() != entry.shape.len() * 4 {
        return Err(corrupt(format!("{name}: {} bytes for shape {}", bytes.len(), entry.shape)));
    }
    if sha256_hex(&bytes) != entry.sha {
        return Err(corrupt(format!("{name}: checksum mismatch")));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::from_vec(entry.shape, data)?)
}

/// Fills `sets` from a manifest written by [`write_params`], requiring the
/// same names, shapes, layers and kinds and nothing extra.
fn read_params(root: &Path, sets: &mut [&mut ParamSet]) -> Result<()> {
    let mut manifest = read_manifest(root)?;
    for set in sets.iter_mut() {
        let tag = net_tag(set.net());
        for p in set.iter_mut() {
            let name = format!("params/{tag}/{}", p.name);
            let e = manifest.remove(&name).ok_or_else(|| corrupt(format!("{name} missing from manifest")))?;
            if e.shape != p.tensor.shape() || e.layer != p.layer || e.kind != p.kind {
                return Err(corrupt(format!(
                    "{name}: manifest has {} layer {} {}, model expects {} layer {} {}",
                    e.shape,
                    e.layer,
                    kind_text(e.kind),
                    p.tensor.shape(),
                    p.layer,
                    kind_text(p.kind)
                )));
            }
            p.tensor = read_tensor(root, &name, &e)?;
        }
    }
    if let Some(extra) = manifest.keys().next() {
        return Err(corrupt(format!("unexpected manifest entry {extra}")));
    }
    Ok(())
}

fn param_items<'a>(sets: &[&'a ParamSet]) -> Vec<(String, &'a Tensor, usize, ParamKind)> {
    sets.iter()
        .flat_map(|set| {
            let tag = net_tag(set.net());
            set.iter().map(move |p| (format!("params/{tag}/{}", p.name), &p.tensor, p.layer, p.kind))
        })
        .collect()
}

fn float_line(key: &str, v: f64) -> String {
    format!("{key} = {v:?} {:016x}\n", v.to_bits())
}

fn write_optimizer(root: &Path, opt: &OptimizerState, sets: &[&ParamSet]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| ForgeError::io(root, e))?;
    let mut items = Vec::new();
    for set in sets {
        let tag = net_tag(set.net());
        for (i, p) in set.iter().enumerate() {
            if let Some(m) = opt.moments.get(&set.key(i)) {
                items.push((format!("{tag}/{}.m", p.name), &m.m, p.layer, p.kind));
                items.push((format!("{tag}/{}.v", p.name), &m.v, p.layer, p.kind));
            }
        }
    }
    if items.len() != 2 * opt.moments.len() {
        return Err(corrupt("optimizer holds moments for parameters outside its networks"));
    }
    write_tensors(root, &items)?;
    let state = format!(
        "step = {}\n{}{}{}{}",
        opt.step,
        float_line("lr", opt.lr),
        float_line("beta1", opt.config.beta1),
        float_line("beta2", opt.config.beta2),
        float_line("eps", opt.config.eps)
    );
    let path = root.join("state");
    std::fs::write(&path, state).map_err(|e| ForgeError::io(&path, e))
}

fn key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|_| corrupt(format!("missing {}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once(" = ").ok_or_else(|| corrupt(format!("{}: bad line {l:?}", path.display())))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key).map(String::as_str).ok_or_else(|| corrupt(format!("missing key {key}")))
}

fn parse_int<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    get(kv, key)?.parse().map_err(|_| corrupt(format!("bad {key}")))
}

/// Floats are restored from their bit pattern.
fn parse_float(kv: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    let v = get(kv, key)?;
    let bits = v.split_whitespace().nth(1).ok_or_else(|| corrupt(format!("bad {key}")))?;
    Ok(f64::from_bits(u64::from_str_radix(bits, 16).map_err(|_| corrupt(format!("bad {key}")))?))
}

fn read_optimizer(root: &Path, opt: &mut OptimizerState, sets: &[&ParamSet]) -> Result<()> {
    let kv = key_values(&root.join("state"))?;
    opt.step = parse_int(&kv, "step")?;
    opt.lr = parse_float(&kv, "lr")?;
    let (b1, b2, eps) = (parse_float(&kv, "beta1")?, parse_float(&kv, "beta2")?, parse_float(&kv, "eps")?);
    if (b1, b2, eps) != (opt.config.beta1, opt.config.beta2, opt.config.eps) {
        return Err(corrupt(format!("{}: Adam settings differ from the configuration", root.display())));
    }
    let mut manifest = read_manifest(root)?;
    for set in sets {
        let tag = net_tag(set.net());
        for (i, p) in set.iter().enumerate() {
            let Some(slot) = opt.moments.get_mut(&set.key(i)) else { continue };
            let mut load = |suffix: &str| -> Result<Tensor> {
                let name = format!("{tag}/{}.{suffix}", p.name);
                let e = manifest.remove(&name).ok_or_else(|| corrupt(format!("optimizer entry {name} missing")))?;
                if e.shape != p.tensor.shape() {
                    return Err(corrupt(format!("optimizer entry {name} has shape {}", e.shape)));
                }
                read_tensor(root, &name, &e)
            };
            *slot = Moments { m: load("m")?, v: load("v")? };
        }
    }
    if let Some(extra) = manifest.keys().next() {
        return Err(corrupt(format!("unexpected optimizer entry {extra}")));
    }
    Ok(())
}

/// Writes `state` to `dir`, replacing any previous checkpoint there only
/// once the new one is complete.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    write_dir_atomic(dir, |tmp| {
        let model = &state.model;
        write_tensors(tmp, &param_items(&model.all_sets()))?;
        write_optimizer(&tmp.join("optimizer/d"), &state.opt_d, &model.discriminator_sets())?;
        write_optimizer(&tmp.join("optimizer/g"), &state.opt_g, &model.generator_sets())?;
        let cfg = &state.config;
        let meta = format!(
            "format = {FORMAT_VERSION}\nepoch = {}\nstep = {}\nseed = {}\nconfig_hash = {}\n",
            state.epoch,
            state.step,
            cfg.seed,
            config_hash(cfg)
        );
        std::fs::write(tmp.join("meta"), meta).map_err(|e| ForgeError::io(tmp, e))?;
        std::fs::write(tmp.join("train.txt"), train_config_text(cfg)).map_err(|e| ForgeError::io(tmp, e))
    })
}

/// The training configuration stored in a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    let path = dir.join("train.txt");
    let text = std::fs::read_to_string(&path).map_err(|_| corrupt(format!("missing {}", path.display())))?;
    parse_train_config(&text).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

/// Restores a checkpoint into a model built from `config`. Every tensor must
/// match the model's layout and the stored hash must match `config`.
pub fn load_checkpoint(dir: &Path, config: &TrainConfig) -> Result<TrainState> {
    let kv = key_values(&dir.join("meta"))?;
    let version: u32 = parse_int(&kv, "format")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("format {version}, expected {FORMAT_VERSION}")));
    }
    let mut state = TrainState::new(config.clone())?;
    read_params(dir, &mut state.model.all_sets_mut())?;
    if get(&kv, "config_hash")? != config_hash(config) {
        return Err(corrupt("configuration hash does not match"));
    }
    if parse_int::<u64>(&kv, "seed")? != config.seed {
        return Err(corrupt("seed does not match"));
    }
    state.epoch = parse_int(&kv, "epoch")?;
    state.step = parse_int(&kv, "step")?;
    read_optimizer(&dir.join("optimizer/d"), &mut state.opt_d, &state.model.discriminator_sets())?;
    read_optimizer(&dir.join("optimizer/g"), &mut state.opt_g, &state.model.generator_sets())?;
    Ok(state)
}

/// Loads a checkpoint with the configuration it was saved with, optionally
/// extended to `epochs`.
pub fn resume_checkpoint(dir: &Path, epochs: Option<usize>) -> Result<TrainState> {
    let mut cfg = checkpoint_config(dir)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    load_checkpoint(dir, &cfg)
}

pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch-{epoch:06}"))
}

/// The checkpoint with the highest epoch under `root`.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(root).map_err(|e| ForgeError::io(root, e))? {
        let entry = entry.map_err(|e| ForgeError::io(root, e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|n| n.strip_prefix("epoch-")).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Saves a trained recognizer: parameters, configuration and class list.
pub fn save_recognizer(trained: &TrainedRecognizer, dir: &Path) -> Result<()> {
    write_dir_atomic(dir, |tmp| {
        let rec = &trained.recognizer;
        write_tensors(tmp, &param_items(&[rec.params()]))?;
        let c = rec.config();
        let meta = format!(
            "format = {FORMAT_VERSION}\nclasses = {}\nresolution = {}\nbase_width = {}\ntrain_accuracy = {:?}\n",
            c.classes, c.resolution, c.base_width, trained.train_accuracy
        );
        std::fs::write(tmp.join("meta"), meta).map_err(|e| ForgeError::io(tmp, e))?;
        let classes: String = trained.classes.iter().map(|&ch| codepoint_label(ch) + "\n").collect();
        std::fs::write(tmp.join("classes"), classes).map_err(|e| ForgeError::io(tmp, e))
    })
}

pub fn load_recognizer(dir: &Path) -> Result<TrainedRecognizer> {
    let kv = key_values(&dir.join("meta"))?;
    let cfg = RecognizerConfig {
        classes: parse_int(&kv, "classes")?,
        resolution: parse_int(&kv, "resolution")?,
        base_width: parse_int(&kv, "base_width")?,
    };
    let train_accuracy = get(&kv, "train_accuracy")?.parse().map_err(|_| corrupt("bad train_accuracy"))?;
    let mut rec = Recognizer::init(cfg, 0)?;
    read_params(dir, &mut [rec.params_mut()])?;
    let path = dir.join("classes");
    let text = std::fs::read_to_string(&path).map_err(|_| corrupt(format!("missing {}", path.display())))?;
    let classes: Vec<char> =
        text.lines().map(|l| parse_codepoint(l.trim()).ok_or_else(|| corrupt(format!("bad class {l:?}")))).collect::<Result<_>>()?;
    if classes.len() != cfg.classes {
        return Err(corrupt(format!("{} class labels for {} outputs", classes.len(), cfg.classes)));
    }
    Ok(TrainedRecognizer { recognizer: rec, classes, train_accuracy })
}
