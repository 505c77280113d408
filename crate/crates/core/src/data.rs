//! Dataset trees on disk, the synthetic multi-scale anomaly generator, and
//! the VisA split converter.
//!
//! Tree layout per category:
//! `train/good/*.png`, `test/<defect>/*.png`,
//! `ground_truth/<defect>/<stem>_mask.png`, and for synthetic data the
//! retained pre-anomaly images under `source/<defect>/*.png`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::image::{load_mask, save_mask, Image};

pub const NOMINAL: &str = "good";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// File stem.
    pub name: String,
    /// Defect type; [`NOMINAL`] for defect-free samples.
    pub defect: String,
    pub image: Image,
    /// Ground truth at image resolution; all-false for nominal test samples.
    pub mask: Option<Mask>,
    /// Pre-anomaly image, when the generator kept it.
    pub source: Option<Image>,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.defect != NOMINAL
    }

    /// Ground truth, with an empty mask for nominal samples.
    pub fn mask_or_empty(&self) -> Mask {
        self.mask
            .clone()
            .unwrap_or_else(|| Grid::filled(self.image.height(), self.image.width(), false))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub category: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetLayout {
    pub fn train_images(&self) -> Vec<Image> {
        self.train.iter().map(|s| s.image.clone()).collect()
    }

    /// Splits the last `fraction` of the training samples off as nominal
    /// validation data (at least one when the fraction is positive).
    pub fn split_validation(&self, fraction: f64) -> Result<(Vec<Image>, Vec<Image>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let n = self.train.len();
        let n_val = if fraction > 0.0 { ((n as f64 * fraction).round() as usize).max(1) } else { 0 };
        if n_val >= n {
            return Err(Error::EmptyDataset(format!(
                "{} training images leave nothing after a {fraction} validation split",
                n
            )));
        }
        let imgs = self.train_images();
        Ok((imgs[..n - n_val].to_vec(), imgs[n - n_val..].to_vec()))
    }

    /// Writes the tree under `root/<category>`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let base = root.join(&self.category);
        for s in &self.train {
            s.image.save(&base.join("train").join(NOMINAL).join(format!("{}.png", s.name)))?;
        }
        for s in &self.test {
            s.image.save(&base.join("test").join(&s.defect).join(format!("{}.png", s.name)))?;
            if s.is_anomalous() {
                let mask = s.mask.as_ref().ok_or_else(|| Error::Dataset {
                    path: base.join("test").join(&s.defect).join(&s.name),
                    msg: "anomalous sample without a mask".into(),
                })?;
                save_mask(mask, &base.join("ground_truth").join(&s.defect).join(format!("{}_mask.png", s.name)))?;
            }
            if let Some(src) = &s.source {
                src.save(&base.join("source").join(&s.defect).join(format!("{}.png", s.name)))?;
            }
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "bmp" | "jpg" | "jpeg")
    )
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Category directories under a dataset root (those with a `train` folder).
pub fn list_categories(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::Dataset { path: root.to_path_buf(), msg: "dataset root does not exist".into() });
    }
    Ok(sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join("train").is_dir())
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect())
}

fn load_resized(path: &Path, resolution: Option<usize>) -> Result<Image> {
    let img = Image::load(path)?;
    Ok(match resolution {
        Some(r) => img.resize(r, r),
        None => img,
    })
}

/// Loads and validates one category. With `resolution`, images are resized
/// bilinearly and masks by nearest neighbour.
pub fn load_dataset(root: &Path, category: &str, resolution: Option<usize>) -> Result<DatasetLayout> {
    let base = root.join(category);
    if !base.is_dir() {
        return Err(Error::Dataset { path: base, msg: "category directory does not exist".into() });
    }
    let train_dir = base.join("train").join(NOMINAL);
    if !train_dir.is_dir() {
        return Err(Error::Dataset { path: train_dir, msg: "missing train/good directory".into() });
    }
    let mut train = Vec::new();
    for p in image_files(&train_dir)? {
        train.push(Sample { name: stem(&p), defect: NOMINAL.into(), image: load_resized(&p, resolution)?, mask: None, source: None });
    }
    if train.is_empty() {
        return Err(Error::Dataset { path: train_dir, msg: "no training images".into() });
    }
    let test_dir = base.join("test");
    if !test_dir.is_dir() {
        return Err(Error::Dataset { path: test_dir, msg: "missing test directory".into() });
    }
    let mut test = Vec::new();
    for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
        let defect = defect_dir.file_name().unwrap().to_string_lossy().into_owned();
        for p in image_files(&defect_dir)? {
            let name = stem(&p);
            let raw = Image::load(&p)?;
            let mask = if defect == NOMINAL {
                None
            } else {
                let mp = base.join("ground_truth").join(&defect).join(format!("{name}_mask.png"));
                if !mp.is_file() {
                    return Err(Error::Dataset { path: p.clone(), msg: format!("no ground-truth mask at {}", mp.display()) });
                }
                let m = load_mask(&mp)?;
                if m.dims() != (raw.height(), raw.width()) {
                    return Err(Error::Dataset {
                        path: mp,
                        msg: format!(
                            "mask is {}x{} but the image is {}x{}",
                            m.height(),
                            m.width(),
                            raw.height(),
                            raw.width()
                        ),
                    });
                }
                Some(match resolution {
                    Some(r) => m.resize_nearest(r, r),
                    None => m,
                })
            };
            let sp = base.join("source").join(&defect).join(format!("{name}.png"));
            let source = if sp.is_file() { Some(load_resized(&sp, resolution)?) } else { None };
            let image = match resolution {
                Some(r) => raw.resize(r, r),
                None => raw,
            };
            test.push(Sample { name, defect: defect.clone(), image, mask, source });
        }
    }
    if test.is_empty() {
        return Err(Error::Dataset { path: test_dir, msg: "no test images".into() });
    }
    Ok(DatasetLayout { root: root.to_path_buf(), category: category.into(), train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Thin bright line.
    Scratch,
    /// Saturated red ellipse.
    Blob,
    /// Dark rectangle covering a large part of the image.
    MissingComponent,
}

impl AnomalyKind {
    pub fn name(&self) -> &'static str {
        match self {
            AnomalyKind::Scratch => "scratch",
            AnomalyKind::Blob => "blob",
            AnomalyKind::MissingComponent => "missing_component",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub count: usize,
    /// Target mask area as a fraction of the image, `[lo, hi]`.
    pub area: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub category: String,
    pub size: usize,
    pub seed: u64,
    /// Texture period in pixels.
    pub period: f64,
    pub train: usize,
    pub test_good: usize,
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            category: "synthetic".into(),
            size: 64,
            seed: 0,
            period: 16.0,
            train: 220,
            test_good: 30,
            anomalies: vec![
                AnomalySpec { kind: AnomalyKind::Scratch, count: 20, area: (0.005, 0.03) },
                AnomalySpec { kind: AnomalyKind::Blob, count: 20, area: (0.02, 0.06) },
                AnomalySpec { kind: AnomalyKind::MissingComponent, count: 20, area: (0.10, 0.30) },
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.train == 0 || !(self.period > 1.0) {
            return Err(Error::InvalidConfig(format!("bad synthetic spec {self:?}")));
        }
        for a in &self.anomalies {
            if !(a.area.1 > 0.0) || a.area.0 > a.area.1 || a.area.1 > 0.9 || a.area.0 < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "anomaly {} has an empty or invalid area range {:?}",
                    a.kind.name(),
                    a.area
                )));
            }
        }
        Ok(())
    }
}

/// Nominal texture value range is `[0.5 - 0.05 - 0.18, 0.5 + 0.05 + 0.18]`;
/// anomaly colors lie outside it, so every painted pixel changes.
const SCRATCH_VALUE: [f32; 3] = [0.97, 0.97, 0.97];
const BLOB_VALUE: [f32; 3] = [0.95, 0.08, 0.08];
const HOLE_VALUE: [f32; 3] = [0.05, 0.05, 0.05];

fn texture(size: usize, period: f64, rng: &mut ChaCha8Rng) -> Image {
    let means: Vec<f64> = (0..3).map(|_| 0.5 + rng.random_range(-0.05..0.05)).collect();
    let amp = rng.random_range(0.15..0.18);
    let (px, py) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let w = 2.0 * std::f64::consts::PI / period;
    Image::from_fn(3, size, size, |c, y, x| {
        let s = ((x as f64 + px) * w).sin() * ((y as f64 + py) * w).sin();
        (means[c] + amp * s) as f32
    })
}

fn paint(img: &mut Image, mask: &Mask, color: [f32; 3]) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                for (c, v) in color.iter().enumerate() {
                    img.set(c, y, x, *v);
                }
            }
        }
    }
}

fn scratch_mask(n: usize, area: (f64, f64), rng: &mut ChaCha8Rng) -> Mask {
    for _ in 0..1000 {
        let thickness = rng.random_range(1.0..2.2);
        let len = rng.random_range(0.3..0.7) * n as f64;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (cy, cx) = (rng.random_range(0.25..0.75) * n as f64, rng.random_range(0.25..0.75) * n as f64);
        let (dy, dx) = (angle.sin(), angle.cos());
        let m = Grid::from_fn(n, n, |y, x| {
            let (ry, rx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let along = ry * dy + rx * dx;
            let across = (ry * dx - rx * dy).abs();
            along.abs() <= len / 2.0 && across <= thickness / 2.0
        });
        if (area.0..=area.1).contains(&m.area_fraction()) {
            return m;
        }
    }
    Grid::filled(n, n, false)
}

fn blob_mask(n: usize, area: (f64, f64), rng: &mut ChaCha8Rng) -> Mask {
    for _ in 0..1000 {
        let target = rng.random_range(area.0..=area.1) * (n * n) as f64;
        let aspect = rng.random_range(0.6..1.6);
        let ry = (target / std::f64::consts::PI * aspect).sqrt();
        let rx = (target / std::f64::consts::PI / aspect).sqrt();
        let cy = rng.random_range(ry..(n as f64 - ry).max(ry + 1e-9));
        let cx = rng.random_range(rx..(n as f64 - rx).max(rx + 1e-9));
        let m = Grid::from_fn(n, n, |y, x| {
            let (a, b) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
            a * a + b * b <= 1.0
        });
        if (area.0..=area.1).contains(&m.area_fraction()) {
            return m;
        }
    }
    Grid::filled(n, n, false)
}

fn rect_mask(n: usize, area: (f64, f64), rng: &mut ChaCha8Rng) -> Mask {
    for _ in 0..1000 {
        let target = rng.random_range(area.0..=area.1) * (n * n) as f64;
        let aspect = rng.random_range(0.6..1.6);
        let h = ((target * aspect).sqrt().round() as usize).clamp(1, n);
        let w = ((target / h as f64).round() as usize).clamp(1, n);
        let y0 = rng.random_range(0..=n - h);
        let x0 = rng.random_range(0..=n - w);
        let m = Grid::from_fn(n, n, |y, x| (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x));
        if (area.0..=area.1).contains(&m.area_fraction()) {
            return m;
        }
    }
    Grid::filled(n, n, false)
}

/// Pure function of the spec: nominal periodic textures with per-image
/// jitter, and anomalous test images with exact masks and their sources.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let train = (0..spec.train)
        .map(|i| Sample {
            name: format!("{i:04}"),
            defect: NOMINAL.into(),
            image: texture(n, spec.period, &mut rng),
            mask: None,
            source: None,
        })
        .collect();
    let mut test: Vec<Sample> = (0..spec.test_good)
        .map(|i| Sample {
            name: format!("{i:04}"),
            defect: NOMINAL.into(),
            image: texture(n, spec.period, &mut rng),
            mask: None,
            source: None,
        })
        .collect();
    for a in &spec.anomalies {
        for i in 0..a.count {
            let source = texture(n, spec.period, &mut rng);
            let (mask, color) = match a.kind {
                AnomalyKind::Scratch => (scratch_mask(n, a.area, &mut rng), SCRATCH_VALUE),
                AnomalyKind::Blob => (blob_mask(n, a.area, &mut rng), BLOB_VALUE),
                AnomalyKind::MissingComponent => (rect_mask(n, a.area, &mut rng), HOLE_VALUE),
            };
            if mask.count() == 0 {
                return Err(Error::InvalidConfig(format!(
                    "could not place a {} with area in {:?} on a {n}x{n} image",
                    a.kind.name(),
                    a.area
                )));
            }
            let mut image = source.clone();
            paint(&mut image, &mask, color);
            test.push(Sample {
                name: format!("{i:04}"),
                defect: a.kind.name().into(),
                image,
                mask: Some(mask),
                source: Some(source),
            });
        }
    }
    Ok(DatasetLayout { root: PathBuf::new(), category: spec.category.clone(), train, test })
}

#[derive(Debug, Deserialize)]
struct VisaRow {
    object: String,
    split: String,
    label: String,
    image: String,
    #[serde(default)]
    mask: String,
}

/// Rewrites a VisA-style split CSV (`object,split,label,image,mask`, paths
/// relative to `visa_root`) into the internal tree under `out_root`.
/// Non-zero mask pixels are foreground. Returns the categories written.
pub fn convert_visa(visa_root: &Path, split_csv: &Path, out_root: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(split_csv)
        .map_err(|e| Error::Dataset { path: split_csv.to_path_buf(), msg: e.to_string() })?;
    let mut categories = std::collections::BTreeSet::new();
    for (line, row) in reader.deserialize::<VisaRow>().enumerate() {
        let row = row.map_err(|e| Error::Dataset {
            path: split_csv.to_path_buf(),
            msg: format!("row {}: {e}", line + 2),
        })?;
        let src = visa_root.join(&row.image);
        let name = stem(&src);
        let img = Image::load(&src)?;
        let base = out_root.join(&row.object);
        let anomalous = row.label.eq_ignore_ascii_case("anomaly");
        match (row.split.as_str(), anomalous) {
            ("train", false) => img.save(&base.join("train").join(NOMINAL).join(format!("{name}.png")))?,
            ("train", true) => {
                return Err(Error::Dataset { path: src, msg: "anomalous image listed in the train split".into() })
            }
            ("test", false) => img.save(&base.join("test").join(NOMINAL).join(format!("{name}.png")))?,
            ("test", true) => {
                if row.mask.is_empty() {
                    return Err(Error::Dataset { path: src, msg: "anomalous test image without a mask".into() });
                }
                let mp = visa_root.join(&row.mask);
                let gray = image::load_from_memory(&crate::io::read(&mp)?)
                    .map_err(|e| Error::Image { path: mp.clone(), msg: e.to_string() })?
                    .to_luma8();
                let mask = Grid::from_fn(gray.height() as usize, gray.width() as usize, |y, x| {
                    gray.get_pixel(x as u32, y as u32)[0] > 0
                });
                img.save(&base.join("test").join("anomaly").join(format!("{name}.png")))?;
                save_mask(&mask, &base.join("ground_truth").join("anomaly").join(format!("{name}_mask.png")))?;
            }
            (other, _) => {
                return Err(Error::Dataset { path: split_csv.to_path_buf(), msg: format!("unknown split `{other}`") })
            }
        }
        categories.insert(row.object);
    }
    Ok(categories.into_iter().collect())
}
