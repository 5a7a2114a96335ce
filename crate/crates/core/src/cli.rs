//! Subcommands of the `mistdrop` binary.
//!
//! Every command reads a [`RunConfig`] (TOML, unknown keys rejected), applies the
//! command-line overrides, and writes the resolved config next to its outputs as
//! `<command>.config.toml`.
//!
//! Files in the output directory:
//!
//! ```text
//! classifier.ckpt  classifier.toml  classifier_log.jsonl
//! generator_<variant>.ckpt  generator_<variant>.toml  train_<variant>_log.jsonl
//! restored/<variant>/<split>/NNNN.png
//! cam/<split>/NNNN.png
//! metrics.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_backgrounds, load_dataset, synth_dataset_from, write_dataset};
use crate::error::{Error, Result};
use crate::image_io::{save_gray_png, save_png, ImageRGB};
use crate::losses::{FeatureNet, FeatureNetSpec};
use crate::networks::{build_ablation, compute_cam, Classifier, ClassifierConfig, Generator, GeneratorConfig, Variant};
use crate::synth::SynthParams;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::{
    mean_scores, restore_image, score_pairs, train_classifier, train_generator, CamSource, ClassifierTrainConfig, GeneratorTrainConfig,
    Pair, PairScore,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    /// Directory of PNG backgrounds; procedural backgrounds when unset.
    pub backgrounds: Option<PathBuf>,
    pub params: SynthParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train: 64,
            val: 8,
            test: 8,
            height: 64,
            width: 64,
            backgrounds: None,
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub network: ClassifierConfig,
    pub train: ClassifierTrainConfig,
    /// Defaults to `<out>/classifier.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    /// Ablation variants, plus `degraded` for the unrestored baseline.
    pub variants: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "test".into(),
            variants: vec!["degraded".into(), "full".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub synth: SynthSection,
    pub classifier: ClassifierSection,
    pub generator: GeneratorConfig,
    pub train: GeneratorTrainConfig,
    pub features: FeatureNetSpec,
    pub eval: EvalSection,
    /// Split used by `restore` and `cam`.
    pub split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "out".into(),
            variant: Variant::Full,
            synth: SynthSection::default(),
            classifier: ClassifierSection::default(),
            generator: GeneratorConfig::default(),
            train: GeneratorTrainConfig::default(),
            features: FeatureNetSpec::default(),
            eval: EvalSection::default(),
            split: "test".into(),
        }
    }
}

/// Sub-seeds derived from the run seed.
const SEED_CLASSIFIER_INIT: u64 = 1;
const SEED_CLASSIFIER_TRAIN: u64 = 2;
const SEED_GENERATOR_INIT: u64 = 3;
const SEED_GENERATOR_TRAIN: u64 = 4;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies overrides and propagates the run seed into the training sections.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(v) = &overrides.variant {
            self.variant = v.parse()?;
        }
        if let Some(out) = &overrides.out {
            self.out_dir = out.clone();
        }
        if let Some(data) = &overrides.data {
            self.data_dir = data.clone();
        }
        self.classifier.train.seed = self.seed.wrapping_add(SEED_CLASSIFIER_TRAIN);
        self.train.seed = self.seed.wrapping_add(SEED_GENERATOR_TRAIN);
        self.synth.params.validate()?;
        self.classifier.network.validate()?;
        self.generator.validate()?;
        self.train.loss.validate()?;
        self.train.augment.validate()?;
        self.classifier.train.augment.validate()?;
        for v in &self.eval.variants {
            if v != BASELINE {
                v.parse::<Variant>()?;
            }
        }
        Ok(self)
    }

    fn classifier_checkpoint(&self) -> PathBuf {
        self.classifier.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("classifier.ckpt"))
    }

    fn snapshot(&self, dir: &Path, command: &str) -> Result<()> {
        create_dir(dir)?;
        write_file(&dir.join(format!("{command}.config.toml")), self.to_toml().as_bytes())
    }
}

/// Pseudo-variant scoring the degraded input itself.
pub const BASELINE: &str = "degraded";

#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// full, non_cam, non_ca, non_sa or non_sd.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Output directory (the dataset root for `synth`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset root read by the other commands.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "mistdrop", version, about = "Adherent mist and raindrop removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train the degradation classifier on the train split.
    TrainClassifier,
    /// Train the restoration network for `--variant`.
    Train,
    /// Restore the configured split with a trained generator.
    Restore,
    /// Score variants on a split and write metrics.csv.
    Eval,
    /// Write class activation maps as grayscale PNGs.
    Cam,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainClassifier => "train-classifier",
            Command::Train => "train",
            Command::Restore => "restore",
            Command::Eval => "eval",
            Command::Cam => "cam",
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let base = match &cli.overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.resolve(&cli.overrides)?;
    if cli.command == Command::Synth && cli.overrides.out.is_some() && cli.overrides.data.is_none() {
        cfg.data_dir = cfg.out_dir.clone();
    }
    run_command(cli.command, &cfg)
}

pub fn run_command(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Synth => cmd_synth(cfg),
        Command::TrainClassifier => cmd_train_classifier(cfg).map(|_| ()),
        Command::Train => cmd_train(cfg).map(|_| ()),
        Command::Restore => cmd_restore(cfg),
        Command::Eval => cmd_eval(cfg).map(|_| ()),
        Command::Cam => cmd_cam(cfg),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("log rows serialize");
        out.push(b'\n');
    }
    write_file(path, &out)
}

/// Writes the dataset to `data_dir`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.synth;
    let backgrounds = match &s.backgrounds {
        Some(dir) => load_backgrounds(dir)?,
        None => Vec::new(),
    };
    let ds = synth_dataset_from([s.train, s.val, s.test], (s.height, s.width), &s.params, cfg.seed, &backgrounds)?;
    create_dir(&cfg.data_dir)?;
    write_dataset(&ds, &cfg.data_dir)?;
    cfg.snapshot(&cfg.data_dir, "synth")?;
    log::info!("wrote {} pairs to {}", s.train + s.val + s.test, cfg.data_dir.display());
    Ok(())
}

fn build_classifier(cfg: &RunConfig) -> Result<(Classifier, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_CLASSIFIER_INIT));
    let cls = Classifier::new(&cfg.classifier.network, &mut store, &mut rng)?;
    Ok((cls, store))
}

/// The classifier described by the config, with weights from its checkpoint.
pub fn load_classifier(cfg: &RunConfig) -> Result<(Classifier, ParamStore<f32>)> {
    let (cls, mut store) = build_classifier(cfg)?;
    load_checkpoint(&mut store, &cfg.classifier_checkpoint())?;
    Ok((cls, store))
}

/// Trains on the train split only; returns the final training accuracy.
pub fn cmd_train_classifier(cfg: &RunConfig) -> Result<f64> {
    let ds = load_dataset(&cfg.data_dir)?;
    let data: Vec<_> = ds.train.iter().map(|p| (p.degraded.clone(), p.label)).collect();
    let (cls, mut store) = build_classifier(cfg)?;
    let logs = train_classifier(&cls, &mut store, &data, &cfg.classifier.train, |l| {
        if let (Some(acc), Some(f1)) = (l.accuracy, l.f1) {
            log::info!("classifier step {} loss {:.5} acc {acc:.4} f1 {f1:.4}", l.step, l.loss);
        }
    })?;
    let out = &cfg.out_dir;
    create_dir(out)?;
    let ckpt = cfg.classifier_checkpoint();
    save_checkpoint(&store, &ckpt)?;
    let net_toml = toml::to_string(&cfg.classifier.network).expect("classifier config serializes");
    write_file(&ckpt.with_extension("toml"), net_toml.as_bytes())?;
    write_jsonl(&out.join("classifier_log.jsonl"), &logs)?;
    cfg.snapshot(out, "train-classifier")?;
    Ok(logs.iter().rev().find_map(|l| l.accuracy).unwrap_or(0.0))
}

fn generator_paths(cfg: &RunConfig, variant: Variant) -> (PathBuf, PathBuf) {
    let stem = format!("generator_{variant}");
    (cfg.out_dir.join(format!("{stem}.ckpt")), cfg.out_dir.join(format!("{stem}.toml")))
}

fn build_generator(cfg: &RunConfig, variant: Variant) -> Result<(Generator, ParamStore<f32>)> {
    let gcfg = build_ablation(&cfg.generator, variant)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_GENERATOR_INIT));
    let gen = Generator::new(&gcfg, &mut store, &mut rng)?;
    Ok((gen, store))
}

/// A trained generator of `variant`; its saved config is authoritative.
pub fn load_generator(cfg: &RunConfig, variant: Variant) -> Result<(Generator, ParamStore<f32>)> {
    let (ckpt, meta) = generator_paths(cfg, variant);
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let gcfg = GeneratorConfig::from_toml(&text)?;
    let mut store = ParamStore::new();
    let gen = Generator::new(&gcfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_checkpoint(&mut store, &ckpt)?;
    Ok((gen, store))
}

fn classifier_if_needed(cfg: &RunConfig, gen: &Generator) -> Result<Option<(Classifier, ParamStore<f32>)>> {
    if gen.config.use_cam {
        load_classifier(cfg).map(Some)
    } else {
        Ok(None)
    }
}

fn cam_source(c: &Option<(Classifier, ParamStore<f32>)>) -> Option<CamSource<'_>> {
    c.as_ref().map(|(classifier, store)| CamSource { classifier, store })
}

/// Trains `cfg.variant`; returns the final mean validation PSNR, if validated.
pub fn cmd_train(cfg: &RunConfig) -> Result<Option<f64>> {
    let ds = load_dataset(&cfg.data_dir)?;
    let (gen, mut store) = build_generator(cfg, cfg.variant)?;
    let cls = classifier_if_needed(cfg, &gen)?;
    let (fnet, fstore) = FeatureNet::new::<f32>(&cfg.features)?;
    let logs = train_generator(&gen, &mut store, &ds.train, &ds.val, cam_source(&cls), (&fnet, &fstore), &cfg.train, |l| {
        if let (Some(p), Some(s)) = (l.val_psnr, l.val_ssim) {
            log::info!("step {} loss {:.5} val psnr {p:.3} ssim {s:.4}", l.step, l.loss_total);
        }
    })?;
    create_dir(&cfg.out_dir)?;
    let (ckpt, meta) = generator_paths(cfg, cfg.variant);
    save_checkpoint(&store, &ckpt)?;
    write_file(&meta, gen.config.to_toml().as_bytes())?;
    write_jsonl(&cfg.out_dir.join(format!("train_{}_log.jsonl", cfg.variant)), &logs)?;
    cfg.snapshot(&cfg.out_dir, "train")?;
    Ok(logs.iter().rev().find_map(|l| l.val_psnr))
}

fn restore_split(cfg: &RunConfig, variant: Variant, pairs: &[Pair]) -> Result<Vec<(String, ImageRGB)>> {
    let (gen, store) = load_generator(cfg, variant)?;
    let cls = classifier_if_needed(cfg, &gen)?;
    pairs
        .iter()
        .map(|p| Ok((p.id.clone(), restore_image(&gen, &store, cam_source(&cls), &p.degraded)?)))
        .collect()
}

fn id_stem(id: &str) -> &str {
    id.rsplit('/').next().unwrap_or(id)
}

pub fn cmd_restore(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(&cfg.data_dir)?;
    let pairs = ds.split(&cfg.split)?;
    let dir = cfg.out_dir.join("restored").join(cfg.variant.as_str()).join(&cfg.split);
    create_dir(&dir)?;
    for (id, img) in restore_split(cfg, cfg.variant, pairs)? {
        save_png(&img, &dir.join(format!("{}.png", id_stem(&id))))?;
    }
    cfg.snapshot(&cfg.out_dir, "restore")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub split: String,
    pub variant: String,
}

/// Id of the per-variant summary rows in `metrics.csv`.
pub const SUMMARY_ID: &str = "mean";

/// Scores every configured variant on the eval split. Rows come per pair, then one
/// summary row per variant whose metrics are the arithmetic means of its rows.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let ds = load_dataset(&cfg.data_dir)?;
    let split = &cfg.eval.split;
    let pairs = ds.split(split)?;
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for name in &cfg.eval.variants {
        let outputs: Vec<(String, ImageRGB)> = if name == BASELINE {
            pairs.iter().map(|p| (p.id.clone(), p.degraded.clone())).collect()
        } else {
            restore_split(cfg, name.parse()?, pairs)?
        };
        let scored: Vec<_> = outputs
            .into_iter()
            .zip(pairs)
            .map(|((id, out), p)| (id, out, p.gt.clone()))
            .collect();
        let scores = score_pairs(&scored)?;
        let row = |s: &PairScore| MetricRow {
            id: s.id.clone(),
            psnr_db: s.psnr_db,
            ssim: s.ssim,
            split: split.clone(),
            variant: name.clone(),
        };
        rows.extend(scores.iter().map(row));
        let (p, s) = mean_scores(&scores);
        log::info!("{name}: psnr {p:.4} dB, ssim {s:.4}");
        summary.push(row(&PairScore {
            id: SUMMARY_ID.into(),
            psnr_db: p,
            ssim: s,
        }));
    }
    rows.extend(summary);
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    cfg.snapshot(&cfg.out_dir, "eval")?;
    Ok(rows)
}

pub fn cmd_cam(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(&cfg.data_dir)?;
    let (cls, store) = load_classifier(cfg)?;
    let dir = cfg.out_dir.join("cam").join(&cfg.split);
    create_dir(&dir)?;
    let mut summary = Vec::new();
    for p in ds.split(&cfg.split)? {
        let cam = compute_cam(&cls, &store, &p.degraded, None)?;
        save_gray_png(&cam.attention, p.degraded.height(), p.degraded.width(), &dir.join(format!("{}.png", id_stem(&p.id))))?;
        writeln!(summary, "{},{},{}", p.id, p.label, cam.predicted_class).expect("in-memory write");
    }
    write_file(&dir.join("predictions.csv"), &[b"id,class_label,predicted\n".as_slice(), &summary].concat())?;
    cfg.snapshot(&cfg.out_dir, "cam")
}
