//! Datasets of ground-truth fields of view, optionally with the raw frame
//! stacks they were averaged from.
//!
//! On-disk layouts:
//!
//! * A field of view (FOV) directory holds `frame_###.pgm` (8/16-bit PGM) or
//!   `frame_###.f64` rasters plus `manifest.json` with keys `a`, `b` and an
//!   optional free-text `excitation`.
//! * A dataset directory holds `dataset.json`, one `<id>.f64` ground truth
//!   per item and, for items with frames, `<id>.stack`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{self, NoiseModel, NoiseParams, SeededRng};
use crate::raster::{self, Cursor, Image, STACK_MAGIC};
use crate::sensing::MeasurementSource;

/// `S` same-sized raw acquisitions of one FOV under constant excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    side: usize,
    frames: Vec<Vec<f64>>,
    params: NoiseParams,
}

impl FrameStack {
    /// Negative pixel values are clamped to 0.
    pub fn new(side: usize, frames: Vec<Vec<f64>>, params: NoiseParams) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Format("frame stack has no frames".into()));
        }
        let mut frames = frames;
        for (s, f) in frames.iter_mut().enumerate() {
            if f.len() != side * side {
                return Err(Error::Shape(format!(
                    "frame {s} has {} pixels, expected {side}x{side}",
                    f.len()
                )));
            }
            for v in f.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::Format(format!("frame {s} has a non-finite pixel")));
                }
                *v = v.max(0.0);
            }
        }
        Ok(FrameStack { side, frames, params })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of frames `S`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn params(&self) -> NoiseParams {
        self.params
    }

    /// Pixel-wise mean over all frames.
    pub fn ground_truth(&self) -> Image {
        let n = self.side * self.side;
        let mut acc = vec![0.0; n];
        for f in &self.frames {
            for (a, v) in acc.iter_mut().zip(f) {
                *a += v;
            }
        }
        let s = self.frames.len() as f64;
        acc.iter_mut().for_each(|a| *a /= s);
        Image::new(self.side, acc).expect("stack frames are square")
    }

    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<FrameStack> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                Image::new(self.side, f.clone())
                    .and_then(|img| img.crop(row, col, size))
                    .map(Image::into_data)
            })
            .collect::<Result<_>>()?;
        FrameStack::new(size, frames, self.params)
    }

    /// Frame-stack container: magic, u32 LE count/height/width, f64 LE frames.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(20 + 8 * self.frames.len() * self.side * self.side);
        bytes.extend_from_slice(STACK_MAGIC);
        bytes.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.side as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.side as u32).to_le_bytes());
        for f in &self.frames {
            raster::push_f64s(&mut bytes, f);
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, params: NoiseParams) -> Result<FrameStack> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor::new(&bytes, path);
        cur.magic(STACK_MAGIC)?;
        let count = cur.u32()? as usize;
        let h = cur.u32()? as usize;
        let w = cur.u32()? as usize;
        if h != w {
            return Err(Error::Format(format!("{}: non-square frames {h}x{w}", path.display())));
        }
        let frames = (0..count).map(|_| cur.f64s(h * w)).collect::<Result<Vec<_>>>()?;
        cur.finish()?;
        FrameStack::new(h, frames, params)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct FovManifest {
    a: f64,
    b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    excitation: Option<String>,
}

fn is_frame_file(name: &str) -> bool {
    name.starts_with("frame_") && (name.ends_with(".pgm") || name.ends_with(".f64"))
}

/// Load one FOV directory. Frames are read in lexicographic filename order.
pub fn load_fov(dir: &Path) -> Result<FrameStack> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FovManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let params = NoiseParams::calibrated(manifest.a, manifest.b)?;

    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok()?.file_name().into_string().ok())
        .filter(|name| is_frame_file(name))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!("{}: no frame_### files", dir.display())));
    }

    let mut side = None;
    let mut frames = Vec::with_capacity(names.len());
    for name in &names {
        let path = dir.join(name);
        let (w, h, values) = if name.ends_with(".pgm") {
            raster::read_pgm(&path)?
        } else {
            let img = Image::read_f64(&path)?;
            (img.side(), img.side(), img.into_data())
        };
        if w != h {
            return Err(Error::Shape(format!("{}: non-square frame {w}x{h}", path.display())));
        }
        match side {
            None => side = Some(w),
            Some(s) if s != w => {
                return Err(Error::Shape(format!(
                    "{}: frame is {w}x{w}, earlier frames are {s}x{s}",
                    path.display()
                )))
            }
            _ => {}
        }
        frames.push(values);
    }
    FrameStack::new(side.unwrap(), frames, params)
}

/// Write a FOV directory with 16-bit PGM frames (values rounded and clamped
/// to the u16 range).
pub fn write_fov(dir: &Path, stack: &FrameStack, excitation: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, f) in stack.frames().iter().enumerate() {
        let px: Vec<u16> = f.iter().map(|v| v.round().clamp(0.0, u16::MAX as f64) as u16).collect();
        raster::write_pgm16(&dir.join(format!("frame_{s:03}.pgm")), stack.side(), stack.side(), &px)?;
    }
    let manifest = FovManifest {
        a: stack.params().a(),
        b: stack.params().b(),
        excitation: excitation.map(str::to_owned),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    /// Field of view the item was cut from.
    pub fov: String,
    pub split: Split,
    pub truth: Image,
    pub frames: Option<FrameStack>,
}

impl Item {
    pub fn from_image(id: impl Into<String>, fov: impl Into<String>, split: Split, truth: Image) -> Self {
        Item {
            id: id.into(),
            fov: fov.into(),
            split,
            truth,
            frames: None,
        }
    }

    /// Ground truth is the pixel-wise frame mean.
    pub fn from_frames(id: impl Into<String>, fov: impl Into<String>, split: Split, frames: FrameStack) -> Self {
        Item {
            id: id.into(),
            fov: fov.into(),
            split,
            truth: frames.ground_truth(),
            frames: Some(frames),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let ds = Dataset { items };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    /// Common image side, if the dataset is nonempty.
    pub fn side(&self) -> Option<usize> {
        self.items.first().map(|it| it.truth.side())
    }

    /// Unique ids, one image size, and no FOV shared between splits.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut fov_split = std::collections::BTreeMap::new();
        let side = self.side();
        for it in &self.items {
            if !ids.insert(it.id.as_str()) {
                return Err(Error::Format(format!("duplicate item id `{}`", it.id)));
            }
            if Some(it.truth.side()) != side {
                return Err(Error::Shape(format!("item `{}` differs in size", it.id)));
            }
            if let Some(f) = &it.frames {
                if f.side() != it.truth.side() {
                    return Err(Error::Shape(format!("item `{}`: frames and truth differ in size", it.id)));
                }
            }
            if let Some(prev) = fov_split.insert(it.fov.as_str(), it.split) {
                if prev != it.split {
                    return Err(Error::Format(format!("FOV `{}` appears in both {prev} and {}", it.fov, it.split)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.items.len());
        for it in &self.items {
            check_id(&it.id)?;
            let truth = format!("{}.f64", it.id);
            it.truth.write_f64(&dir.join(&truth))?;
            let (frames, a, b) = match &it.frames {
                Some(f) => {
                    let name = format!("{}.stack", it.id);
                    f.write(&dir.join(&name))?;
                    (Some(name), Some(f.params().a()), Some(f.params().b()))
                }
                None => (None, None, None),
            };
            entries.push(ItemEntry {
                id: it.id.clone(),
                fov: it.fov.clone(),
                split: it.split,
                truth,
                frames,
                a,
                b,
            });
        }
        let manifest = DatasetManifest {
            side: self.side().unwrap_or(0),
            items: entries,
        };
        let path = dir.join("dataset.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut items = Vec::with_capacity(manifest.items.len());
        for e in manifest.items {
            let truth = Image::read_f64(&dir.join(&e.truth))?;
            if truth.side() != manifest.side {
                return Err(Error::Shape(format!("{}: expected side {}", e.truth, manifest.side)));
            }
            let frames = match &e.frames {
                Some(name) => {
                    let params = NoiseParams::calibrated(e.a.unwrap_or(1.0), e.b.unwrap_or(0.0))?;
                    Some(FrameStack::read(&dir.join(name), params)?)
                }
                None => None,
            };
            items.push(Item {
                id: e.id,
                fov: e.fov,
                split: e.split,
                truth,
                frames,
            });
        }
        Dataset::new(items)
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::invalid(format!("item id `{id}` is not a safe file name")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemEntry {
    id: String,
    fov: String,
    split: Split,
    truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    side: usize,
    items: Vec<ItemEntry>,
}

/// How a dataset item is turned into coefficient measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceMode {
    /// Noise simulated from the ground truth.
    Simulated(NoiseModel),
    /// Hadamard patterns applied to the item's raw frames.
    Raw,
}

pub fn make_measurement_source(item: &Item, mode: SourceMode) -> Result<MeasurementSource> {
    match mode {
        SourceMode::Simulated(model) => MeasurementSource::simulated(&item.truth, model),
        SourceMode::Raw => match &item.frames {
            Some(f) => MeasurementSource::raw(f),
            None => Err(Error::invalid(format!("raw mode needs frames, item `{}` has none", item.id))),
        },
    }
}

/// Number of crops per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Cut every source item into non-overlapping `grid × grid` tiles (row-major,
/// anchored at the origin) and assign whole FOVs to splits.
///
/// FOVs are visited in seeded shuffled order and fill the train, val and
/// test quotas in turn; a FOV's surplus tiles beyond the current quota are
/// dropped rather than spilled into the next split, as are FOVs left over
/// once all quotas are met.
pub fn crop_and_split(source: &Dataset, grid: usize, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    if grid == 0 {
        return Err(Error::invalid("crop grid must be positive"));
    }
    let mut fovs: Vec<&str> = source.items.iter().map(|it| it.fov.as_str()).collect();
    fovs.sort();
    fovs.dedup();
    let mut rng = SeededRng::new(seed, 0).rng();
    fovs.shuffle(&mut rng);

    let quotas = [
        (Split::Train, counts.train),
        (Split::Val, counts.val),
        (Split::Test, counts.test),
    ];
    let mut q = 0;
    let mut filled = 0;
    let mut items = Vec::with_capacity(counts.total());
    for fov in fovs {
        while q < quotas.len() && filled == quotas[q].1 {
            q += 1;
            filled = 0;
        }
        if q == quotas.len() {
            break;
        }
        let split = quotas[q].0;
        for it in source.items.iter().filter(|it| it.fov == fov) {
            let side = it.truth.side();
            let per_axis = side / grid;
            for r in 0..per_axis {
                for c in 0..per_axis {
                    if filled == quotas[q].1 {
                        break;
                    }
                    let id = format!("{}_r{}c{}", it.id, r, c);
                    let truth = it.truth.crop(r * grid, c * grid, grid)?;
                    let frames = it.frames.as_ref().map(|f| f.crop(r * grid, c * grid, grid)).transpose()?;
                    items.push(Item {
                        id,
                        fov: it.fov.clone(),
                        split,
                        truth,
                        frames,
                    });
                    filled += 1;
                }
            }
        }
    }
    while q < quotas.len() && filled == quotas[q].1 {
        q += 1;
        filled = 0;
    }
    if q < quotas.len() {
        return Err(Error::Shape(format!(
            "insufficient source area: {grid}x{grid} crops cannot fill {} train / {} val / {} test",
            counts.train, counts.val, counts.test
        )));
    }
    Dataset::new(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    GaussianBlobs,
    PiecewiseConstant,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(SynthKind::GaussianBlobs),
            "piecewise_constant" => Ok(SynthKind::PiecewiseConstant),
            other => Err(Error::invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::GaussianBlobs => "gaussian_blobs",
            SynthKind::PiecewiseConstant => "piecewise_constant",
        })
    }
}

fn gaussian_blobs<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Vec<f64> {
    let s = side as f64;
    let count = rng.random_range(3..=8);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s / 16.0..s / 5.0),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let background = rng.random_range(0.0..0.05);
    let mut data = vec![background; side * side];
    for (r, c, sigma, amp) in blobs {
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 + 0.5 - r).powi(2) + (x as f64 + 0.5 - c).powi(2);
                data[y * side + x] += amp * (-d2 * inv).exp();
            }
        }
    }
    data
}

fn piecewise_constant<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Vec<f64> {
    let mut data = vec![rng.random_range(0.0..0.2); side * side];
    let count = rng.random_range(2..=6);
    for _ in 0..count {
        let h = rng.random_range(side / 8..=side / 2).max(1);
        let w = rng.random_range(side / 8..=side / 2).max(1);
        let r0 = rng.random_range(0..=side - h);
        let c0 = rng.random_range(0..=side - w);
        let level = rng.random_range(0.2..1.0);
        for r in r0..r0 + h {
            data[r * side + c0..r * side + c0 + w].fill(level);
        }
    }
    data
}

/// `count` synthetic FOVs of `side × side` pixels with maximum `peak`, all
/// labelled train. Each image is its own FOV.
pub fn synth_dataset(kind: SynthKind, count: usize, side: usize, peak: f64, seed: u64) -> Result<Dataset> {
    if side < 2 || !side.is_power_of_two() {
        return Err(Error::invalid("side must be a power of two"));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let root = SeededRng::new(seed, 0);
    let items = (0..count)
        .map(|k| {
            let mut rng = root.child(k as u64).rng();
            let data = match kind {
                SynthKind::GaussianBlobs => gaussian_blobs(side, &mut rng),
                SynthKind::PiecewiseConstant => piecewise_constant(side, &mut rng),
            };
            let img = Image::new(side, data).expect("generated at the requested size");
            let id = format!("img{k:04}");
            Item::from_image(id.clone(), id, Split::Train, img.scaled_to_peak(peak))
        })
        .collect();
    Dataset::new(items)
}

/// Relabel items by position: the first `train` train, the next `val` val,
/// the rest test.
pub fn assign_splits(mut ds: Dataset, train: usize, val: usize) -> Result<Dataset> {
    if train + val > ds.len() {
        return Err(Error::invalid(format!(
            "{train} train + {val} val exceeds {} items",
            ds.len()
        )));
    }
    for (k, it) in ds.items.iter_mut().enumerate() {
        it.split = if k < train {
            Split::Train
        } else if k < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Dataset::new(ds.items)
}

/// `count` pixel-wise Poissonian-Gaussian acquisitions of `truth`,
/// `a·Pois(x/a) + N(0, b)`, clamped at 0.
pub fn simulate_frames<R: Rng + ?Sized>(truth: &Image, params: NoiseParams, count: usize, rng: &mut R) -> Result<FrameStack> {
    if !truth.is_nonnegative() {
        return Err(Error::invalid("ground truth has negative pixels"));
    }
    let sd = params.b().sqrt();
    let frames = (0..count)
        .map(|_| {
            truth
                .data()
                .iter()
                .map(|&x| {
                    let g: f64 = rng.sample(StandardNormal);
                    (noise::scaled_poisson(x, params.a(), rng) + sd * g).max(0.0)
                })
                .collect()
        })
        .collect();
    FrameStack::new(truth.side(), frames, params)
}
