//! Seeded synthetic splits and their on-disk layout:
//!
//! ```text
//! <root>/labels.csv                 id,class_label   (id like "train/0003")
//! <root>/{train,val,test}/gt/NNNN.png
//! <root>/{train,val,test}/degraded/NNNN.png
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{load_png, resize, save_png, ImageRGB, ResizeKind};
use crate::synth::{draw_label, index_rng, make_sample, procedural_background, ClassLabel, SynthParams};
use crate::train::Pair;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Pair]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    fn split_mut(&mut self, name: &str) -> Result<&mut Vec<Pair>> {
        match name {
            "train" => Ok(&mut self.train),
            "val" => Ok(&mut self.val),
            "test" => Ok(&mut self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Pair number `index` of a seeded stream: procedural background, class drawn from
/// the proportions (or `label` when given), then the degradation.
pub fn synth_pair(
    split: &str,
    index: usize,
    global_index: u64,
    size: (usize, usize),
    params: &SynthParams,
    seed: u64,
    label: Option<ClassLabel>,
) -> Result<Pair> {
    pair_with(split, index, global_index, size, params, seed, label, &[])
}

#[allow(clippy::too_many_arguments)]
fn pair_with(
    split: &str,
    index: usize,
    global_index: u64,
    size: (usize, usize),
    params: &SynthParams,
    seed: u64,
    label: Option<ClassLabel>,
    backgrounds: &[ImageRGB],
) -> Result<Pair> {
    let mut rng = index_rng(seed, global_index);
    let background = if backgrounds.is_empty() {
        procedural_background(size.0, size.1, &mut rng)
    } else {
        let b = &backgrounds[(global_index % backgrounds.len() as u64) as usize];
        resize(b, size.0, size.1, ResizeKind::Bilinear)?
    };
    let label = label.unwrap_or_else(|| draw_label(&params.class_proportions, &mut rng));
    let sample = make_sample(&background, label, params, &mut rng)?;
    Ok(Pair {
        id: format!("{split}/{index:04}"),
        degraded: sample.degraded,
        gt: sample.background,
        label,
    })
}

/// `counts` pairs per split; splits draw from disjoint index ranges of one stream.
pub fn synth_dataset(counts: [usize; 3], size: (usize, usize), params: &SynthParams, seed: u64) -> Result<Dataset> {
    synth_dataset_from(counts, size, params, seed, &[])
}

/// Like [`synth_dataset`], but pair `i` uses `backgrounds[i % len]` resized to
/// `size` instead of a procedural background. An empty slice means procedural.
pub fn synth_dataset_from(
    counts: [usize; 3],
    size: (usize, usize),
    params: &SynthParams,
    seed: u64,
    backgrounds: &[ImageRGB],
) -> Result<Dataset> {
    params.validate()?;
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Empty("image size"));
    }
    let mut ds = Dataset::default();
    let mut next = 0u64;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        let pairs = (0..count)
            .map(|i| pair_with(split, i, next + i as u64, size, params, seed, None, backgrounds))
            .collect::<Result<Vec<_>>>()?;
        next += count as u64;
        *ds.split_mut(split)? = pairs;
    }
    Ok(ds)
}

/// All PNGs directly inside `dir`, in file-name order.
pub fn load_backgrounds(dir: &Path) -> Result<Vec<ImageRGB>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG backgrounds in {}", dir.display())));
    }
    paths.iter().map(|p| load_png(p)).collect()
}

/// Cycles through the classes so every class is equally represented.
pub fn synth_balanced(split: &str, count: usize, size: (usize, usize), params: &SynthParams, seed: u64) -> Result<Vec<Pair>> {
    params.validate()?;
    (0..count)
        .map(|i| synth_pair(split, i, i as u64, size, params, seed, Some(ClassLabel::ALL[i % 3])))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    class_label: ClassLabel,
}

fn image_path(root: &Path, id: &str, kind: &str) -> Result<std::path::PathBuf> {
    let (split, stem) = id
        .split_once('/')
        .ok_or_else(|| Error::Config(format!("malformed sample id `{id}`")))?;
    Ok(root.join(split).join(kind).join(format!("{stem}.png")))
}

pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for split in SPLITS {
        for kind in ["gt", "degraded"] {
            let dir = root.join(split).join(kind);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let labels = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    for split in SPLITS {
        for p in ds.split(split)? {
            save_png(&p.gt, &image_path(root, &p.id, "gt")?)?;
            save_png(&p.degraded, &image_path(root, &p.id, "degraded")?)?;
            w.serialize(LabelRow {
                id: p.id.clone(),
                class_label: p.label,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let labels = root.join("labels.csv");
    if !labels.exists() {
        return Err(Error::io(&labels, std::io::Error::new(std::io::ErrorKind::NotFound, "labels.csv not found")));
    }
    let mut ds = Dataset::default();
    for row in csv::Reader::from_path(&labels)?.deserialize() {
        let row: LabelRow = row?;
        let split = row.id.split('/').next().unwrap_or_default().to_string();
        let pair = Pair {
            degraded: load_png(&image_path(root, &row.id, "degraded")?)?,
            gt: load_png(&image_path(root, &row.id, "gt")?)?,
            id: row.id,
            label: row.class_label,
        };
        ds.split_mut(&split)?.push(pair);
    }
    Ok(ds)
}
