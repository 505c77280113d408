//! Pixel anomaly maps: feature cosine distance, latent L1 distance, their
//! weighted fusion, smoothing, image scores and thresholds.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Map};
use crate::image::Image;
use crate::io::{self, Reader};
use crate::nets::FeatureExtractor;

/// Added to both sides of the cosine ratio: zero-norm vectors get a finite
/// similarity and two identical zero vectors still count as identical.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Per-image min-max to `[0, 1]`.
    MinMax,
    /// Divide by the maximum seen on nominal calibration images.
    CalibrationMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyMapConfig {
    /// Weight of the latent map in the fusion.
    pub lambda: f32,
    /// Gaussian smoothing width in pixels; `0` disables smoothing.
    pub smoothing_sigma: f32,
    /// Extractor blocks summed into the feature map.
    pub blocks: Vec<usize>,
    pub normalization: Normalization,
    /// Take the image score from the smoothed map rather than the raw fusion.
    pub score_smoothed: bool,
}

impl Default for AnomalyMapConfig {
    fn default() -> Self {
        Self {
            lambda: 0.85,
            smoothing_sigma: 4.0,
            blocks: vec![2, 3],
            normalization: Normalization::CalibrationMax,
            score_smoothed: true,
        }
    }
}

impl AnomalyMapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.smoothing_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("smoothing sigma {} < 0", self.smoothing_sigma)));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("empty feature block set".into()));
        }
        Ok(())
    }
}

/// Per-family maxima of the raw maps on nominal calibration images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub l_max: f32,
    pub f_max: f32,
}

impl Calibration {
    pub fn from_maps<'a>(pairs: impl IntoIterator<Item = (&'a Map, &'a Map)>) -> Self {
        let mut c = Calibration { l_max: 0.0, f_max: 0.0 };
        for (l, f) in pairs {
            c.l_max = c.l_max.max(l.max());
            c.f_max = c.f_max.max(f.max());
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub f_map: Map,
    pub l_map: Map,
    pub a_map: Map,
    pub image_score: f32,
    pub t_hat: usize,
}

/// `1 - cos` across channels at every location: `(N, C, h, w)` -> `(N, h, w)`.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("features {:?} vs {:?}", a.dims(), b.dims())));
    }
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nb = b.sqr()?.sum(1)?.sqrt()?;
    let cos = ((dot + COSINE_EPS)? / ((na * nb)? + COSINE_EPS)?)?;
    Ok(cos.affine(-1.0, 1.0)?)
}

fn tensor_to_maps(t: &Tensor) -> Result<Vec<Map>> {
    let (n, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..n).map(|i| Grid::new(h, w, v[i * h * w..(i + 1) * h * w].to_vec())).collect()
}

/// Sum over blocks of the upsampled per-location cosine distances.
pub fn feature_maps_from_features(fa: &[Tensor], fb: &[Tensor], height: usize, width: usize) -> Result<Vec<Map>> {
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::InvalidConfig("feature map needs one or more matching blocks".into()));
    }
    let mut total: Option<Vec<Map>> = None;
    for (a, b) in fa.iter().zip(fb) {
        let maps: Vec<Map> = tensor_to_maps(&cosine_distance(a, b)?)?
            .into_iter()
            .map(|m| m.resize_bilinear(height, width))
            .collect();
        total = Some(match total {
            None => maps,
            Some(acc) => acc.into_iter().zip(maps).map(|(x, y)| add(&x, &y)).collect(),
        });
    }
    Ok(total.expect("at least one block"))
}

fn add(a: &Map, b: &Map) -> Map {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Grid::new(a.height(), a.width(), data).expect("same dims")
}

/// Feature map for a batch of (input, reconstruction) pairs.
pub fn feature_maps(inputs: &[&Image], recons: &[&Image], phi: &FeatureExtractor, blocks: &[usize]) -> Result<Vec<Map>> {
    let (_, h, w) = inputs
        .first()
        .ok_or_else(|| Error::EmptyDataset("no images for the feature map".into()))?
        .dims();
    let fa = phi.extract_images(inputs, blocks)?;
    let fb = phi.extract_images(recons, blocks)?;
    feature_maps_from_features(&fa, &fb, h, w)
}

pub fn feature_map(x0: &Image, x_hat: &Image, phi: &FeatureExtractor, blocks: &[usize]) -> Result<Map> {
    if x0.dims() != x_hat.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x0.dims(), x_hat.dims())));
    }
    Ok(feature_maps(&[x0], &[x_hat], phi, blocks)?.remove(0))
}

/// Channel-summed absolute latent difference, upsampled to `height x width`.
/// Latents are `(C, h, w)` or `(1, C, h, w)`.
pub fn latent_map(z0: &Tensor, z_hat: &Tensor, height: usize, width: usize) -> Result<Map> {
    if z0.dims() != z_hat.dims() {
        return Err(Error::ShapeMismatch(format!("latents {:?} vs {:?}", z0.dims(), z_hat.dims())));
    }
    let (z0, z_hat) = match z0.rank() {
        3 => (z0.unsqueeze(0)?, z_hat.unsqueeze(0)?),
        4 => (z0.clone(), z_hat.clone()),
        r => return Err(Error::ShapeMismatch(format!("latent rank {r}"))),
    };
    let d = (z0 - z_hat)?.abs()?.sum(1)?;
    let mut maps = tensor_to_maps(&d)?;
    if maps.len() != 1 {
        return Err(Error::ShapeMismatch("latent_map takes a single latent".into()));
    }
    Ok(maps.remove(0).resize_bilinear(height, width))
}

/// Ranges below this count as constant under min-max normalization, so
/// float noise on a zero map is not stretched to `[0, 1]`.
pub const MIN_RANGE: f32 = 1e-6;

/// Normalizes one map. Constant maps under min-max become all zeros.
pub fn normalize(map: &Map, mode: Normalization, calibration_max: Option<f32>) -> Result<Map> {
    match mode {
        Normalization::MinMax => {
            let (lo, hi) = (map.min(), map.max());
            if !(hi - lo > MIN_RANGE) {
                log::warn!("constant anomaly map ({lo}); normalized to zeros");
                return Ok(map.map(|_| 0.0));
            }
            let s = 1.0 / (hi - lo);
            Ok(map.map(|v| (v - lo) * s))
        }
        Normalization::CalibrationMax => {
            let m = calibration_max
                .ok_or_else(|| Error::InvalidConfig("calibration-max normalization needs calibration".into()))?;
            if !(m > 0.0) {
                log::warn!("calibration maximum is {m}; normalized to zeros");
                return Ok(map.map(|_| 0.0));
            }
            Ok(map.map(|v| v.max(0.0) / m))
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma as f64).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian filter truncated at 4 sigma with half-sample
/// symmetric (reflect) padding.
pub fn gaussian_smooth(map: &Map, sigma: f32) -> Map {
    if sigma <= 0.0 || map.is_empty() {
        return map.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dims();
    let rows = Grid::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, wt)| wt * map.get(y, reflect(x as isize + i as isize - r, w)))
            .sum::<f32>()
    });
    Grid::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, wt)| wt * rows.get(reflect(y as isize + i as isize - r, h), x))
            .sum::<f32>()
    })
}

/// `lambda * norm(l) + (1 - lambda) * norm(f)`, smoothed; the image score is
/// the maximum of the smoothed (or raw, per config) fused map.
pub fn fuse(
    f_map: &Map,
    l_map: &Map,
    cfg: &AnomalyMapConfig,
    calibration: Option<&Calibration>,
    t_hat: usize,
) -> Result<AnomalyResult> {
    cfg.validate()?;
    if !f_map.same_dims(l_map) {
        return Err(Error::ShapeMismatch(format!("maps {:?} vs {:?}", f_map.dims(), l_map.dims())));
    }
    let nl = normalize(l_map, cfg.normalization, calibration.map(|c| c.l_max))?;
    let nf = normalize(f_map, cfg.normalization, calibration.map(|c| c.f_max))?;
    let lambda = cfg.lambda;
    let data = nl
        .data()
        .iter()
        .zip(nf.data())
        .map(|(l, f)| lambda * l + (1.0 - lambda) * f)
        .collect();
    let raw = Grid::new(f_map.height(), f_map.width(), data)?;
    let a_map = gaussian_smooth(&raw, cfg.smoothing_sigma);
    let image_score = if cfg.score_smoothed { a_map.max() } else { raw.max() };
    Ok(AnomalyResult { f_map: f_map.clone(), l_map: l_map.clone(), a_map, image_score, t_hat })
}

/// Value at the `(1 - target_fpr)` upper quantile of nominal scores: the
/// `ceil((1 - fpr) * n)`-th smallest.
pub fn threshold(nominal_scores: &[f32], target_fpr: f64) -> Result<f32> {
    if nominal_scores.is_empty() {
        return Err(Error::EmptyDataset("empty calibration set".into()));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::InvalidConfig(format!("target fpr {target_fpr} outside [0, 1]")));
    }
    let mut s = nominal_scores.to_vec();
    s.sort_by(f32::total_cmp);
    let rank = ((1.0 - target_fpr) * s.len() as f64).ceil() as usize;
    Ok(s[rank.clamp(1, s.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub image: f32,
    pub pixel: f32,
}

/// Image and pixel thresholds from nominal calibration results.
pub fn thresholds(calibration: &[AnomalyResult], target_fpr: f64) -> Result<Thresholds> {
    let scores: Vec<f32> = calibration.iter().map(|r| r.image_score).collect();
    let pixels: Vec<f32> = calibration.iter().flat_map(|r| r.a_map.data().iter().copied()).collect();
    Ok(Thresholds { image: threshold(&scores, target_fpr)?, pixel: threshold(&pixels, target_fpr)? })
}

const MAP_MAGIC: &[u8; 4] = b"DMAP";

/// `DMAP`, u32 height, u32 width, then row-major little-endian f32.
pub fn raw_map_bytes(map: &Map) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + map.len() * 4);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    io::push_f32s(&mut out, map.data());
    out
}

pub fn parse_raw_map(bytes: &[u8]) -> Result<Map> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAP_MAGIC {
        return Err(Error::Format("not a raw map file".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let data = r.f32s(h * w)?;
    if r.remaining() != 0 {
        return Err(Error::Format("trailing bytes in raw map".into()));
    }
    Grid::new(h, w, data)
}

pub fn write_raw_map(map: &Map, path: &Path) -> Result<()> {
    io::write_atomic(path, &raw_map_bytes(map))
}

pub fn read_raw_map(path: &Path) -> Result<Map> {
    parse_raw_map(&io::read(path)?)
}

/// 8-bit grayscale rendering, min-max scaled per image.
pub fn heatmap_image(map: &Map) -> Result<Image> {
    let norm = normalize(map, Normalization::MinMax, None)?;
    Image::new(1, map.height(), map.width(), norm.into_data())
}

pub fn write_heatmap(map: &Map, path: &Path) -> Result<()> {
    let norm = normalize(map, Normalization::MinMax, None)?;
    let (h, w) = map.dims();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(norm.get(y as usize, x as usize) * 255.0).round() as u8])
    });
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    io::write_atomic(path, bytes.get_ref())
}

/// Input blended with the heat in the red channel.
pub fn overlay(input: &Image, map: &Map) -> Result<Image> {
    let heat = normalize(map, Normalization::MinMax, None)?;
    if (input.height(), input.width()) != map.dims() {
        return Err(Error::ShapeMismatch("overlay needs a map at image resolution".into()));
    }
    Ok(Image::from_fn(3, input.height(), input.width(), |c, y, x| {
        let v = input.get(c.min(input.channels() - 1), y, x);
        let a = heat.get(y, x) * 0.6;
        let target = if c == 0 { 1.0 } else { 0.0 };
        v * (1.0 - a) + target * a
    }))
}
