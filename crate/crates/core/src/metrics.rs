//! Image-level AUROC, pooled pixel AUROC and the per-region-overlap (PRO) curve.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Map, Mask};

/// Conventional upper FPR bound for the PRO integral.
pub const DEFAULT_PRO_FPR_LIMIT: f64 = 0.3;

fn check_finite(scores: &[f32]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_finite(scores)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the number of correctly ordered pairs, so ties stay integral
    let mut correct_x2: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        let (mut p, mut n) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        correct_x2 += p as u128 * (2 * neg_below as u128 + n as u128);
        neg_below += n;
    }
    Ok(correct_x2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

fn check_pairs(maps: &[Map], masks: &[Mask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if !m.same_dims(k) {
            return Err(Error::ShapeMismatch(format!(
                "map {i} is {:?} but mask is {:?}",
                m.dims(),
                k.dims()
            )));
        }
    }
    Ok(())
}

/// AUROC over the pooled pixels of every image.
pub fn pixel_auroc(maps: &[Map], masks: &[Mask]) -> Result<f64> {
    check_pairs(maps, masks)?;
    if masks.iter().all(|m| m.count() == 0) {
        return Err(Error::Metric("no anomalous pixels in the whole set".into()));
    }
    let scores: Vec<f32> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    auroc(&scores, &labels)
}

/// Labels the 8-connected components of a mask. Background is `0`, regions
/// are numbered from `1`; the second value holds each region's pixel count.
pub fn connected_regions(mask: &Mask) -> (Grid<u32>, Vec<usize>) {
    let (h, w) = mask.dims();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !mask.get(y0, x0) || labels.get(y0, x0) != 0 {
                continue;
            }
            let id = sizes.len() as u32 + 1;
            let mut size = 0;
            labels.set(y0, x0, id);
            stack.push((y0, x0));
            while let Some((y, x)) = stack.pop() {
                size += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) && labels.get(ny, nx) == 0 {
                            labels.set(ny, nx, id);
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Area under the (FPR, mean per-region overlap) curve for FPR in
/// `[0, fpr_limit]`, divided by `fpr_limit`. Every distinct map value is a
/// threshold (`score >= threshold` is positive).
pub fn pro(maps: &[Map], masks: &[Mask], fpr_limit: f64) -> Result<f64> {
    let curve = pro_curve(maps, masks)?;
    integrate_curve(&curve, fpr_limit)
}

/// The exact PRO curve as `(fpr, pro)` points, starting at `(0, 0)`.
pub fn pro_curve(maps: &[Map], masks: &[Mask]) -> Result<Vec<(f64, f64)>> {
    check_pairs(maps, masks)?;
    for m in maps {
        check_finite(m.data())?;
    }
    // per pixel: score and global region id (u32::MAX for nominal pixels)
    let mut pixels: Vec<(f32, u32)> = Vec::with_capacity(maps.iter().map(|m| m.len()).sum());
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let (labels, sizes) = connected_regions(mask);
        let offset = region_sizes.len() as u32;
        region_sizes.extend(sizes);
        for (&s, &l) in map.data().iter().zip(labels.data()) {
            pixels.push((s, if l == 0 { u32::MAX } else { offset + l - 1 }));
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::Metric("no anomalous regions in the whole set".into()));
    }
    let negatives = pixels.iter().filter(|p| p.1 == u32::MAX).count();
    if negatives == 0 {
        return Err(Error::Metric("PRO needs at least one nominal pixel".into()));
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let inv_sizes: Vec<f64> = region_sizes.iter().map(|&s| 1.0 / s as f64).collect();
    let n_regions = region_sizes.len() as f64;
    let mut overlap_sum = 0.0f64;
    let mut false_pos = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pixels.len() {
        let v = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == v {
            match pixels[i].1 {
                u32::MAX => false_pos += 1,
                r => overlap_sum += inv_sizes[r as usize],
            }
            i += 1;
        }
        curve.push((false_pos as f64 / negatives as f64, overlap_sum / n_regions));
    }
    Ok(curve)
}

/// Trapezoid area of a monotone curve up to `limit`, normalised by `limit`.
pub fn integrate_curve(curve: &[(f64, f64)], limit: f64) -> Result<f64> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(Error::InvalidConfig(format!("FPR limit {limit} outside (0, 1]")));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((f0, p0), (f1, p1)) = (w[0], w[1]);
        if f0 >= limit {
            break;
        }
        if f1 <= limit {
            area += (f1 - f0) * (p0 + p1) / 2.0;
        } else {
            let p_lim = p0 + (p1 - p0) * (limit - f0) / (f1 - f0);
            area += (limit - f0) * (p0 + p_lim) / 2.0;
            break;
        }
    }
    Ok(area / limit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub pro: f64,
    pub n_images: usize,
    pub n_anomalous: usize,
    pub n_pixels: usize,
    pub n_regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    /// Unweighted mean over categories.
    pub average: CategoryReport,
}

/// Computes the three metrics for one category. Nominal images carry
/// all-false masks.
pub fn evaluate_category(
    category: &str,
    image_scores: &[f32],
    maps: &[Map],
    labels: &[bool],
    masks: &[Mask],
    fpr_limit: f64,
) -> Result<CategoryReport> {
    if image_scores.len() != maps.len() || labels.len() != maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores, {} maps, {} labels",
            image_scores.len(),
            maps.len(),
            labels.len()
        )));
    }
    Ok(CategoryReport {
        category: category.to_string(),
        i_auroc: auroc(image_scores, labels)?,
        p_auroc: pixel_auroc(maps, masks)?,
        pro: pro(maps, masks, fpr_limit)?,
        n_images: maps.len(),
        n_anomalous: labels.iter().filter(|&&l| l).count(),
        n_pixels: maps.iter().map(|m| m.len()).sum(),
        n_regions: masks.iter().map(|m| connected_regions(m).1.len()).sum(),
    })
}

impl EvalReport {
    pub fn from_categories(categories: Vec<CategoryReport>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Metric("report needs at least one category".into()));
        }
        let n = categories.len() as f64;
        let mean = |f: fn(&CategoryReport) -> f64| categories.iter().map(f).sum::<f64>() / n;
        let average = CategoryReport {
            category: "average".into(),
            i_auroc: mean(|c| c.i_auroc),
            p_auroc: mean(|c| c.p_auroc),
            pro: mean(|c| c.pro),
            n_images: categories.iter().map(|c| c.n_images).sum(),
            n_anomalous: categories.iter().map(|c| c.n_anomalous).sum(),
            n_pixels: categories.iter().map(|c| c.n_pixels).sum(),
            n_regions: categories.iter().map(|c| c.n_regions).sum(),
        };
        Ok(Self { categories, average })
    }

    /// One JSON record per line: every category, then the average.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.categories.iter().chain(std::iter::once(&self.average)) {
            out.push_str(&serde_json::to_string(rec).expect("report records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut recs: Vec<CategoryReport> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("report record: {e}"))))
            .collect::<Result<_>>()?;
        let average = recs
            .pop()
            .filter(|r| r.category == "average")
            .ok_or_else(|| Error::Format("report has no trailing average record".into()))?;
        Ok(Self { categories: recs, average })
    }

    /// Plain-text table in `(I-AUROC, PRO)` tuple form, percentages.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>16} {:>9}", "Category", "(I-AUROC, PRO)", "P-AUROC");
        for rec in self.categories.iter().chain(std::iter::once(&self.average)) {
            let name = if rec.category == "average" { "Average" } else { rec.category.as_str() };
            let _ = writeln!(
                out,
                "{:<20} {:>16} {:>9.1}",
                name,
                format!("({:.1},{:.1})", rec.i_auroc * 100.0, rec.pro * 100.0),
                rec.p_auroc * 100.0
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::io::write_atomic(&dir.join("report.jsonl"), self.to_jsonl().as_bytes())?;
        crate::io::write_atomic(&dir.join("report.txt"), self.to_table().as_bytes())
    }
}
