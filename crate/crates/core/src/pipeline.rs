//! Stage orchestration over a run directory: training, indexing,
//! adaptation, inference, evaluation, ablations and timing.
//!
//! Layout of a run directory:
//! `config.toml`, `report.jsonl`, `report.txt`, `ablate_<mode>.{jsonl,txt}`,
//! `bench.{json,txt}` at the top, and per category `<category>/` with
//! `codec.ckpt`, `denoiser.ckpt`, `backbone.ckpt`, `backbone_adapted.ckpt`,
//! `index.bin`, `calibration.json` and `heatmaps/<defect>/<name>.{png,dmap}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::anomaly_map::{
    feature_maps, fuse, latent_map, overlay, thresholds, write_heatmap, write_raw_map, AnomalyResult, Calibration,
    Normalization, Thresholds,
};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, list_categories, load_dataset, DatasetLayout, Sample};
use crate::dic::DicModel;
use crate::diffusion::NoiseSchedule;
use crate::domain_adapt::{finetune_extractor, mean_lda_loss};
use crate::error::{Error, Result};
use crate::grid::{Map, Mask};
use crate::image::Image;
use crate::metrics::{evaluate_category, CategoryReport, EvalReport};
use crate::nets::{train_codec, train_denoiser, load_backbone, Codec, CodecConfig, FeatureExtractor, LatentCodec, UNet};
use crate::reconstruction::{ReconstructionResult, Reconstructor, SamplerConfig, StepMode};

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn category(&self, cat: &str) -> PathBuf {
        self.root.join(cat)
    }

    pub fn codec(&self, cat: &str) -> PathBuf {
        self.category(cat).join("codec.ckpt")
    }

    pub fn denoiser(&self, cat: &str) -> PathBuf {
        self.category(cat).join("denoiser.ckpt")
    }

    pub fn backbone(&self, cat: &str) -> PathBuf {
        self.category(cat).join("backbone.ckpt")
    }

    pub fn backbone_adapted(&self, cat: &str) -> PathBuf {
        self.category(cat).join("backbone_adapted.ckpt")
    }

    pub fn index(&self, cat: &str) -> PathBuf {
        self.category(cat).join("index.bin")
    }

    pub fn calibration(&self, cat: &str) -> PathBuf {
        self.category(cat).join("calibration.json")
    }

    pub fn heatmaps(&self, cat: &str) -> PathBuf {
        self.category(cat).join("heatmaps")
    }

    /// Writes the resolved config snapshot.
    pub fn snapshot(&self, cfg: &RunConfig) -> Result<()> {
        cfg.save(&self.config())
    }

    /// Reads the snapshot back.
    pub fn load_config(&self) -> Result<RunConfig> {
        RunConfig::load(Some(&require(&self.config())?), &[])
    }
}

/// The path itself, or a missing-artifact error naming it.
pub fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Categories the config refers to.
pub fn categories(cfg: &RunConfig) -> Result<Vec<String>> {
    match &cfg.data.root {
        None => Ok(vec![cfg.data.synthetic.category.clone()]),
        Some(_) if !cfg.data.categories.is_empty() => Ok(cfg.data.categories.clone()),
        Some(root) => {
            let cats = list_categories(root)?;
            if cats.is_empty() {
                return Err(Error::Dataset { path: root.clone(), msg: "no categories found".into() });
            }
            Ok(cats)
        }
    }
}

/// Training, nominal calibration and test data for one category.
#[derive(Debug, Clone)]
pub struct Splits {
    pub category: String,
    pub train: Vec<Image>,
    pub val: Vec<Image>,
    pub test: Vec<Sample>,
}

fn resize_sample(s: Sample, r: usize) -> Sample {
    if (s.image.height(), s.image.width()) == (r, r) {
        return s;
    }
    Sample {
        image: s.image.resize(r, r),
        mask: s.mask.map(|m| m.resize_nearest(r, r)),
        source: s.source.map(|x| x.resize(r, r)),
        ..s
    }
}

pub fn load_layout(cfg: &RunConfig, category: &str) -> Result<DatasetLayout> {
    let r = cfg.data.resolution;
    match &cfg.data.root {
        Some(root) => load_dataset(root, category, Some(r)),
        None => {
            let mut d = generate_synthetic(&cfg.data.synthetic)?;
            d.train = d.train.into_iter().map(|s| resize_sample(s, r)).collect();
            d.test = d.test.into_iter().map(|s| resize_sample(s, r)).collect();
            Ok(d)
        }
    }
}

pub fn load_splits(cfg: &RunConfig, category: &str) -> Result<Splits> {
    let layout = load_layout(cfg, category)?;
    let (train, val) = layout.split_validation(cfg.data.validation_fraction)?;
    Ok(Splits { category: category.into(), train, val, test: layout.test })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Trains (autoencoder) or materializes (fixed codecs) the codec checkpoint.
pub fn train_codec_stage(cfg: &RunConfig, run: &RunDir, splits: &Splits) -> Result<Codec> {
    let path = run.codec(&splits.category);
    ensure_parent(&path)?;
    match &cfg.codec.model {
        CodecConfig::Autoencoder { factor, latent_channels, hidden } => {
            let (codec, history) = train_codec(&splits.train, *factor, *latent_channels, *hidden, &cfg.codec.train)?;
            let val_error = codec_error(&codec, &splits.val)?;
            codec.save(&path, json!({ "train": cfg.codec.train, "history": history, "val_error": val_error }))?;
            Ok(codec)
        }
        fixed => {
            let codec = Codec::fixed(fixed)?;
            codec.save(&path, json!({}))?;
            Ok(codec)
        }
    }
}

/// Mean per-pixel absolute reconstruction error of the codec.
pub fn codec_error(codec: &dyn LatentCodec, images: &[Image]) -> Result<Option<f64>> {
    if images.is_empty() {
        return Ok(None);
    }
    let z = crate::nets::encode_images(codec, images)?;
    let back = crate::image::unbatch(&codec.decode(&z)?)?;
    let total: f64 = images.iter().zip(&back).map(|(a, b)| a.mean_abs_diff(b)).sum::<Result<f64>>()?;
    Ok(Some(total / images.len() as f64))
}

/// Loads the codec, creating the checkpoint for parameter-free codecs.
pub fn load_codec(cfg: &RunConfig, run: &RunDir, category: &str) -> Result<Codec> {
    let path = run.codec(category);
    if path.exists() {
        let codec = Codec::load(&path)?;
        if codec.config() != cfg.codec.model {
            return Err(Error::InvalidConfig(format!(
                "{} holds a {:?} codec but the config asks for {:?}",
                path.display(),
                codec.config(),
                cfg.codec.model
            )));
        }
        return Ok(codec);
    }
    match &cfg.codec.model {
        CodecConfig::Autoencoder { .. } => Err(Error::MissingArtifact(path)),
        fixed => {
            let codec = Codec::fixed(fixed)?;
            ensure_parent(&path)?;
            codec.save(&path, json!({}))?;
            Ok(codec)
        }
    }
}

/// The unadapted extractor, persisted on first use.
pub fn ensure_backbone(cfg: &RunConfig, run: &RunDir, category: &str) -> Result<FeatureExtractor> {
    let path = run.backbone(category);
    if path.exists() {
        return load_backbone(&path);
    }
    let phi = match &cfg.backbone.weights {
        Some(w) => load_backbone(w)?,
        None => FeatureExtractor::init(cfg.backbone.arch.clone(), cfg.backbone.seed)?,
    };
    ensure_parent(&path)?;
    phi.save(&path, json!({ "seed": cfg.backbone.seed }))?;
    Ok(phi)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub category: String,
    pub history: Vec<f32>,
    pub seconds: f64,
}

/// Trains the denoiser on the nominal training split and stores it.
pub fn train_stage(cfg: &RunConfig, run: &RunDir, splits: &Splits) -> Result<TrainSummary> {
    let start = Instant::now();
    let codec = load_codec(cfg, run, &splits.category)?;
    let schedule = cfg.schedule.build()?;
    let trained = train_denoiser(&splits.train, &codec, cfg.denoiser.arch.clone(), &schedule, &cfg.denoiser.train)?;
    let meta = json!({
        "train": cfg.denoiser.train,
        "schedule": cfg.schedule,
        "history": trained.history,
        "latent_stats": trained.latent_stats,
    });
    let path = run.denoiser(&splits.category);
    ensure_parent(&path)?;
    trained.net.to_checkpoint(meta)?.save(&path)?;
    ensure_backbone(cfg, run, &splits.category)?;
    Ok(TrainSummary {
        category: splits.category.clone(),
        history: trained.history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Adapted extractor when present and enabled, the base one otherwise.
pub fn active_backbone(cfg: &RunConfig, run: &RunDir, category: &str) -> Result<FeatureExtractor> {
    let adapted = run.backbone_adapted(category);
    if cfg.adapt.gamma > 0 && adapted.exists() {
        load_backbone(&adapted)
    } else {
        ensure_backbone(cfg, run, category)
    }
}

pub fn fit_index(cfg: &RunConfig, train: &[Image], phi: &FeatureExtractor) -> Result<DicModel> {
    let d = &cfg.dic;
    DicModel::fit(train, phi, d.block, d.k, d.num_bins, d.t_max, d.min_bin, d.rounding)
}

/// Builds the conditioning index with the active extractor.
pub fn build_index_stage(cfg: &RunConfig, run: &RunDir, splits: &Splits) -> Result<DicModel> {
    let phi = active_backbone(cfg, run, &splits.category)?;
    let dic = fit_index(cfg, &splits.train, &phi)?;
    let path = run.index(&splits.category);
    ensure_parent(&path)?;
    dic.save(&path)?;
    Ok(dic)
}

fn load_denoiser(cfg: &RunConfig, run: &RunDir, category: &str) -> Result<UNet> {
    let (net, ckpt) = UNet::load(&require(&run.denoiser(category))?)?;
    if let Ok(s) = ckpt.meta_as::<crate::config::ScheduleConfig>("schedule") {
        if s != cfg.schedule {
            log::warn!("denoiser was trained with schedule {s:?}, config says {:?}", cfg.schedule);
        }
    }
    Ok(net)
}

/// Frozen networks and conditioning state for one category.
pub struct Pipeline {
    pub category: String,
    pub codec: Codec,
    pub denoiser: UNet,
    pub phi: FeatureExtractor,
    pub dic: Option<DicModel>,
    pub schedule: NoiseSchedule,
}

/// Input/reconstruction distances before normalization.
#[derive(Debug, Clone)]
pub struct RawMaps {
    pub recon: ReconstructionResult,
    pub f_map: Map,
    pub l_map: Map,
}

impl Pipeline {
    pub fn new(
        category: &str,
        codec: Codec,
        denoiser: UNet,
        phi: FeatureExtractor,
        dic: Option<DicModel>,
        schedule: NoiseSchedule,
    ) -> Self {
        Self { category: category.into(), codec, denoiser, phi, dic, schedule }
    }

    /// Loads every artifact the configured mode needs.
    pub fn load(cfg: &RunConfig, run: &RunDir, category: &str) -> Result<Self> {
        Self::load_with(cfg, run, category, cfg.dic.mode() == StepMode::Dynamic)
    }

    /// Like [`Pipeline::load`]; a missing index is an error only when
    /// `need_index` is set.
    pub fn load_with(cfg: &RunConfig, run: &RunDir, category: &str, need_index: bool) -> Result<Self> {
        let codec = load_codec(cfg, run, category)?;
        let denoiser = load_denoiser(cfg, run, category)?;
        let phi = active_backbone(cfg, run, category)?;
        let index = run.index(category);
        let dic = if need_index || index.exists() { Some(DicModel::load(&require(&index)?)?) } else { None };
        if let Some(d) = &dic {
            d.check_extractor(&phi)?;
        }
        Ok(Self::new(category, codec, denoiser, phi, dic, cfg.schedule.build()?))
    }

    pub fn reconstructor(&self, sampler: &SamplerConfig) -> Reconstructor<'_> {
        Reconstructor { denoiser: &self.denoiser, codec: &self.codec, schedule: &self.schedule, cfg: sampler.clone() }
    }

    /// Reconstructs and measures one chunk.
    fn analyze_chunk(
        &self,
        images: &[Image],
        ids: &[u64],
        mode: StepMode,
        sampler: &SamplerConfig,
        blocks: &[usize],
    ) -> Result<Vec<RawMaps>> {
        let recons = self.reconstructor(sampler).run(images, mode, self.dic.as_ref(), &self.phi, ids)?;
        let inputs: Vec<&Image> = images.iter().collect();
        let outputs: Vec<&Image> = recons.iter().map(|r| &r.x_hat).collect();
        let f_maps = feature_maps(&inputs, &outputs, &self.phi, blocks)?;
        recons
            .into_iter()
            .zip(f_maps)
            .zip(images)
            .map(|((recon, f_map), img)| {
                let l_map = latent_map(&recon.z0, &recon.z_hat, img.height(), img.width())?;
                Ok(RawMaps { recon, f_map, l_map })
            })
            .collect()
    }

    /// Raw maps for every image. Work is split into fixed chunks so the
    /// result does not depend on how many threads run them.
    pub fn analyze(
        &self,
        images: &[Image],
        ids: &[u64],
        mode: StepMode,
        sampler: &SamplerConfig,
        blocks: &[usize],
    ) -> Result<Vec<RawMaps>> {
        if images.len() != ids.len() {
            return Err(Error::ShapeMismatch("images and ids differ in length".into()));
        }
        let n = sampler.batch_size.max(1);
        let chunks: Vec<Result<Vec<RawMaps>>> = images
            .par_chunks(n)
            .zip(ids.par_chunks(n))
            .map(|(imgs, ids)| self.analyze_chunk(imgs, ids, mode, sampler, blocks))
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Noise-stream ids: test images count from 0, calibration images from 2^32.
const VAL_ID_OFFSET: u64 = 1 << 32;

pub fn fuse_all(raw: &[RawMaps], cfg: &RunConfig, calibration: Option<&Calibration>) -> Result<Vec<AnomalyResult>> {
    raw.iter()
        .map(|r| fuse(&r.f_map, &r.l_map, &cfg.anomaly_map, calibration, r.recon.t_hat))
        .collect()
}

/// Calibration constants and thresholds derived from nominal held-out data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub maxima: Calibration,
    pub thresholds: Thresholds,
    pub target_fpr: f64,
}

pub fn calibrate(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    val: &[Image],
    mode: StepMode,
    sampler: &SamplerConfig,
) -> Result<CalibrationRecord> {
    if val.is_empty() {
        return Err(Error::EmptyDataset(
            "calibration needs nominal held-out images; raise data.validation_fraction".into(),
        ));
    }
    let ids: Vec<u64> = (0..val.len() as u64).map(|i| VAL_ID_OFFSET + i).collect();
    let raw = pipeline.analyze(val, &ids, mode, sampler, &cfg.anomaly_map.blocks)?;
    let maxima = Calibration::from_maps(raw.iter().map(|r| (&r.l_map, &r.f_map)));
    let results = fuse_all(&raw, cfg, Some(&maxima))?;
    Ok(CalibrationRecord { maxima, thresholds: thresholds(&results, cfg.eval.target_fpr)?, target_fpr: cfg.eval.target_fpr })
}

/// Everything measured on one test split under one setting.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: CategoryReport,
    /// Each defect type against the nominal test images.
    pub by_defect: BTreeMap<String, CategoryReport>,
    pub results: Vec<AnomalyResult>,
    pub recons: Vec<ReconstructionResult>,
    pub calibration: CalibrationRecord,
}

fn metrics_for(
    cfg: &RunConfig,
    name: &str,
    test: &[Sample],
    results: &[AnomalyResult],
    keep: impl Fn(&Sample) -> bool,
) -> Result<CategoryReport> {
    let idx: Vec<usize> = (0..test.len()).filter(|&i| keep(&test[i])).collect();
    let scores: Vec<f32> = idx.iter().map(|&i| results[i].image_score).collect();
    let maps: Vec<Map> = idx.iter().map(|&i| results[i].a_map.clone()).collect();
    let labels: Vec<bool> = idx.iter().map(|&i| test[i].is_anomalous()).collect();
    let masks: Vec<Mask> = idx.iter().map(|&i| test[i].mask_or_empty()).collect();
    evaluate_category(name, &scores, &maps, &labels, &masks, cfg.eval.pro_fpr_limit)
}

/// Calibrates on the nominal split, scores the test split and computes
/// metrics overall and per defect type.
pub fn evaluate_split(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    splits: &Splits,
    mode: StepMode,
    sampler: &SamplerConfig,
) -> Result<Evaluation> {
    let calibration = calibrate(cfg, pipeline, &splits.val, mode, sampler)?;
    let images: Vec<Image> = splits.test.iter().map(|s| s.image.clone()).collect();
    let ids: Vec<u64> = (0..images.len() as u64).collect();
    let raw = pipeline.analyze(&images, &ids, mode, sampler, &cfg.anomaly_map.blocks)?;
    let cal = match cfg.anomaly_map.normalization {
        Normalization::CalibrationMax => Some(&calibration.maxima),
        Normalization::MinMax => None,
    };
    let results = fuse_all(&raw, cfg, cal)?;
    let report = metrics_for(cfg, &splits.category, &splits.test, &results, |_| true)?;
    let mut by_defect = BTreeMap::new();
    let defects: std::collections::BTreeSet<&str> =
        splits.test.iter().filter(|s| s.is_anomalous()).map(|s| s.defect.as_str()).collect();
    for d in defects {
        let r = metrics_for(cfg, d, &splits.test, &results, |s| !s.is_anomalous() || s.defect == d)?;
        by_defect.insert(d.to_string(), r);
    }
    Ok(Evaluation {
        report,
        by_defect,
        results,
        recons: raw.into_iter().map(|r| r.recon).collect(),
        calibration,
    })
}

/// Heatmap PNG and raw float map per test image.
pub fn write_maps(cfg: &RunConfig, dir: &Path, test: &[Sample], results: &[AnomalyResult]) -> Result<()> {
    for (s, r) in test.iter().zip(results) {
        let base = dir.join(&s.defect);
        write_heatmap(&r.a_map, &base.join(format!("{}.png", s.name)))?;
        write_raw_map(&r.a_map, &base.join(format!("{}.dmap", s.name)))?;
        if cfg.eval.write_overlays {
            overlay(&s.image, &r.a_map)?.save(&base.join(format!("{}_overlay.png", s.name)))?;
        }
    }
    Ok(())
}

fn save_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    crate::io::write_atomic(path, text.as_bytes())
}

fn sampler_for(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig { keep_trace: cfg.eval.keep_trace, ..cfg.sampler.clone() }
}

/// Evaluates every category with the stored artifacts and writes the report.
pub fn evaluate_stage(cfg: &RunConfig, run: &RunDir) -> Result<EvalReport> {
    let mut reports = Vec::new();
    for cat in categories(cfg)? {
        let pipeline = Pipeline::load(cfg, run, &cat)?;
        let splits = load_splits(cfg, &cat)?;
        let ev = evaluate_split(cfg, &pipeline, &splits, cfg.dic.mode(), &sampler_for(cfg))?;
        save_json(&run.calibration(&cat), &ev.calibration)?;
        if cfg.eval.write_heatmaps {
            write_maps(cfg, &run.heatmaps(&cat), &splits.test, &ev.results)?;
        }
        log::info!(
            "{cat}: I-AUROC {:.3} P-AUROC {:.3} PRO {:.3}",
            ev.report.i_auroc,
            ev.report.p_auroc,
            ev.report.pro
        );
        reports.push(ev.report);
    }
    let report = EvalReport::from_categories(reports)?;
    report.write(run.root())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub category: String,
    pub history: Vec<f32>,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Fine-tunes a copy of the base extractor on (nominal input, frozen
/// reconstruction) pairs without touching the run directory.
pub fn adapt_extractor(cfg: &RunConfig, run: &RunDir, splits: &Splits) -> Result<(FeatureExtractor, AdaptSummary)> {
    let cat = &splits.category;
    let base = ensure_backbone(cfg, run, cat)?;
    let mode = cfg.dic.mode();
    let dic = match mode {
        StepMode::Dynamic => Some(fit_index(cfg, &splits.train, &base)?),
        StepMode::Static(_) => None,
    };
    let pipeline = Pipeline::new(cat, load_codec(cfg, run, cat)?, load_denoiser(cfg, run, cat)?, base, dic, cfg.schedule.build()?);
    let ids: Vec<u64> = (0..splits.train.len() as u64).collect();
    let recons = pipeline.reconstructor(&cfg.sampler).run(&splits.train, mode, pipeline.dic.as_ref(), &pipeline.phi, &ids)?;
    let x_hat: Vec<Image> = recons.into_iter().map(|r| r.x_hat).collect();
    let before = mean_lda_loss(&splits.train, &x_hat, &pipeline.phi, &cfg.adapt.blocks)?;
    let (adapted, history) = finetune_extractor(&pipeline.phi, &splits.train, &x_hat, &cfg.adapt)?;
    let after = mean_lda_loss(&splits.train, &x_hat, &adapted, &cfg.adapt.blocks)?;
    Ok((adapted, AdaptSummary { category: cat.clone(), history, loss_before: before, loss_after: after }))
}

/// Fine-tunes the extractor, stores it, and rebuilds the index with it when
/// configured.
pub fn finetune_stage(cfg: &RunConfig, run: &RunDir, splits: &Splits) -> Result<AdaptSummary> {
    let cat = &splits.category;
    let (adapted, summary) = adapt_extractor(cfg, run, splits)?;
    adapted.save(
        &run.backbone_adapted(cat),
        json!({
            "adapt": cfg.adapt,
            "history": summary.history,
            "loss_before": summary.loss_before,
            "loss_after": summary.loss_after,
        }),
    )?;
    if cfg.adapt.rebuild_index && cfg.adapt.gamma > 0 {
        fit_index(cfg, &splits.train, &adapted)?.save(&run.index(cat))?;
    }
    Ok(summary)
}

/// The category's stored calibration, computed and stored on first use.
fn cached_calibration(
    cfg: &RunConfig,
    run: &RunDir,
    pipeline: &Pipeline,
    category: &str,
    sampler: &SamplerConfig,
) -> Result<CalibrationRecord> {
    let path = run.calibration(category);
    if path.exists() {
        return serde_json::from_slice(&crate::io::read(&path)?).map_err(|e| Error::Format(e.to_string()));
    }
    let splits = load_splits(cfg, category)?;
    let c = calibrate(cfg, pipeline, &splits.val, cfg.dic.mode(), sampler)?;
    save_json(&path, &c)?;
    Ok(c)
}

/// Heatmaps for arbitrary image files, calibrated on the category's nominal
/// held-out split (cached in `calibration.json`).
pub fn infer_stage(
    cfg: &RunConfig,
    run: &RunDir,
    category: &str,
    inputs: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<(PathBuf, AnomalyResult)>> {
    let pipeline = Pipeline::load(cfg, run, category)?;
    let sampler = sampler_for(cfg);
    let calibration = cached_calibration(cfg, run, &pipeline, category, &sampler)?;
    let r = cfg.data.resolution;
    let images: Vec<Image> = inputs.iter().map(|p| Ok(Image::load(p)?.resize(r, r))).collect::<Result<_>>()?;
    let ids: Vec<u64> = (0..images.len() as u64).collect();
    let raw = pipeline.analyze(&images, &ids, cfg.dic.mode(), &sampler, &cfg.anomaly_map.blocks)?;
    let cal = match cfg.anomaly_map.normalization {
        Normalization::CalibrationMax => Some(&calibration.maxima),
        Normalization::MinMax => None,
    };
    let results = fuse_all(&raw, cfg, cal)?;
    let mut records = String::new();
    for (p, (res, img)) in inputs.iter().zip(results.iter().zip(&images)) {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_heatmap(&res.a_map, &out_dir.join(format!("{stem}.png")))?;
        write_raw_map(&res.a_map, &out_dir.join(format!("{stem}.dmap")))?;
        if cfg.eval.write_overlays {
            overlay(img, &res.a_map)?.save(&out_dir.join(format!("{stem}_overlay.png")))?;
        }
        let rec = json!({
            "image": p,
            "score": res.image_score,
            "t_hat": res.t_hat,
            "anomalous": res.image_score > calibration.thresholds.image,
        });
        let _ = writeln!(records, "{rec}");
    }
    crate::io::write_atomic(&out_dir.join("scores.jsonl"), records.as_bytes())?;
    Ok(inputs.iter().cloned().zip(results).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Fixed steps at percentages of `T_max` against dynamic conditioning.
    StaticVsDic,
    /// Fraction of direct-sampling noise at the starting step.
    Omega,
    /// Noiseless scaling and extractor adaptation switched on and off.
    DsDa,
}

impl AblationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::StaticVsDic => "static-vs-dic",
            AblationMode::Omega => "omega",
            AblationMode::DsDa => "ds-da",
        }
    }

    pub fn default_values(&self) -> Vec<f64> {
        match self {
            AblationMode::StaticVsDic => vec![25.0, 50.0, 75.0, 100.0],
            AblationMode::Omega => vec![0.0, 0.5, 1.0],
            AblationMode::DsDa => Vec::new(),
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static-vs-dic" => Ok(AblationMode::StaticVsDic),
            "omega" => Ok(AblationMode::Omega),
            "ds-da" => Ok(AblationMode::DsDa),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation mode `{other}` (static-vs-dic, omega, ds-da)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub category: String,
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub pro: f64,
    /// PRO per defect type against the nominal test images.
    pub pro_by_defect: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mode: AblationMode,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("rows serialize") + "\n").collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let defects: std::collections::BTreeSet<&String> =
            self.rows.iter().flat_map(|r| r.pro_by_defect.keys()).collect();
        let _ = write!(out, "{:<14} {:<14} {:>8} {:>8} {:>8}", "Setting", "Category", "I-AUROC", "PRO", "P-AUROC");
        for d in &defects {
            let _ = write!(out, " {:>18}", format!("PRO[{d}]"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<14} {:<14} {:>8.1} {:>8.1} {:>8.1}",
                r.label,
                r.category,
                r.i_auroc * 100.0,
                r.pro * 100.0,
                r.p_auroc * 100.0
            );
            for d in &defects {
                match r.pro_by_defect.get(*d) {
                    Some(v) => {
                        let _ = write!(out, " {:>18.1}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, " {:>18}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let stem = format!("ablate_{}", self.mode.name());
        crate::io::write_atomic(&dir.join(format!("{stem}.jsonl")), self.to_jsonl().as_bytes())?;
        crate::io::write_atomic(&dir.join(format!("{stem}.txt")), self.to_table().as_bytes())
    }
}

fn row(label: String, ev: &Evaluation) -> AblationRow {
    AblationRow {
        label,
        category: ev.report.category.clone(),
        i_auroc: ev.report.i_auroc,
        p_auroc: ev.report.p_auroc,
        pro: ev.report.pro,
        pro_by_defect: ev.by_defect.iter().map(|(k, v)| (k.clone(), v.pro)).collect(),
    }
}

/// Paired comparisons on one trained denoiser per category.
pub fn ablate(cfg: &RunConfig, run: &RunDir, mode: AblationMode, values: &[f64]) -> Result<AblationTable> {
    let values = if values.is_empty() { mode.default_values() } else { values.to_vec() };
    let mut rows = Vec::new();
    for cat in categories(cfg)? {
        let splits = load_splits(cfg, &cat)?;
        let mut pipeline = Pipeline::load_with(cfg, run, &cat, false)?;
        if pipeline.dic.is_none() {
            pipeline.dic = Some(fit_index(cfg, &splits.train, &pipeline.phi)?);
        }
        let sampler = sampler_for(cfg);
        match mode {
            AblationMode::StaticVsDic => {
                let t_max = cfg.dic.t_max;
                for p in &values {
                    if !(*p > 0.0 && *p <= 100.0) {
                        return Err(Error::InvalidConfig(format!("static percentage {p} outside (0, 100]")));
                    }
                    let t = ((p / 100.0 * t_max as f64).round() as usize).clamp(1, t_max);
                    let ev = evaluate_split(cfg, &pipeline, &splits, StepMode::Static(t), &sampler)?;
                    rows.push(row(format!("{p}%({t})"), &ev));
                }
                let ev = evaluate_split(cfg, &pipeline, &splits, StepMode::Dynamic, &sampler)?;
                rows.push(row("DIC".into(), &ev));
            }
            AblationMode::Omega => {
                for &w in &values {
                    let s = SamplerConfig { omega: w as f32, ..sampler.clone() };
                    s.validate()?;
                    let ev = evaluate_split(cfg, &pipeline, &splits, cfg.dic.mode(), &s)?;
                    rows.push(row(format!("omega={w}"), &ev));
                }
            }
            AblationMode::DsDa => {
                let base = ensure_backbone(cfg, run, &cat)?;
                let adapted_path = run.backbone_adapted(&cat);
                let adapted = if adapted_path.exists() {
                    load_backbone(&adapted_path)?
                } else {
                    // adapted here only for the comparison; nothing is stored
                    let mut c = cfg.clone();
                    c.adapt.gamma = c.adapt.gamma.max(1);
                    adapt_extractor(&c, run, &splits)?.0
                };
                for (da, phi) in [(false, base), (true, adapted)] {
                    pipeline.dic = Some(fit_index(cfg, &splits.train, &phi)?);
                    pipeline.phi = phi;
                    for ds in [false, true] {
                        let s = SamplerConfig { omega: if ds { 0.0 } else { 1.0 }, ..sampler.clone() };
                        let ev = evaluate_split(cfg, &pipeline, &splits, cfg.dic.mode(), &s)?;
                        let label = format!("DS={} DA={}", if ds { "on" } else { "off" }, if da { "on" } else { "off" });
                        rows.push(row(label, &ev));
                    }
                }
            }
        }
    }
    let table = AblationTable { mode, rows };
    table.write(run.root())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub category: String,
    pub batch_size: usize,
    pub repeats: usize,
    pub resolution: usize,
    pub sampler_steps: usize,
    /// Median wall time per image over the timed repeats.
    pub seconds_per_image: f64,
    pub fps: f64,
    /// Steps chosen for the batch; identical on every run.
    pub t_hats: Vec<usize>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        format!(
            "{:<14} {:>6} {:>20} {:>10}\n{:<14} {:>6} {:>20.4} {:>10.2}\n",
            "Category",
            "Batch",
            "Inference Time [s]",
            "FPS",
            self.category,
            self.batch_size,
            self.seconds_per_image,
            self.fps
        )
    }
}

/// Times full inference (conditioning, reconstruction, maps, fusion) on a
/// fixed batch of test images, cycling them when there are fewer.
pub fn bench(cfg: &RunConfig, run: &RunDir) -> Result<Vec<BenchReport>> {
    let mut out = Vec::new();
    for cat in categories(cfg)? {
        let pipeline = Pipeline::load(cfg, run, &cat)?;
        let splits = load_splits(cfg, &cat)?;
        if splits.test.is_empty() {
            return Err(Error::EmptyDataset(format!("{cat}: no test images to time")));
        }
        let n = cfg.bench.batch_size;
        let images: Vec<Image> = (0..n).map(|i| splits.test[i % splits.test.len()].image.clone()).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let sampler = SamplerConfig { batch_size: n, keep_trace: false, ..cfg.sampler.clone() };
        let calibration = match cfg.anomaly_map.normalization {
            Normalization::CalibrationMax => Some(cached_calibration(cfg, run, &pipeline, &cat, &sampler_for(cfg))?),
            Normalization::MinMax => None,
        };
        let run_once = || -> Result<(f64, Vec<usize>)> {
            let start = Instant::now();
            let raw = pipeline.analyze(&images, &ids, cfg.dic.mode(), &sampler, &cfg.anomaly_map.blocks)?;
            let res = fuse_all(&raw, cfg, calibration.as_ref().map(|c| &c.maxima))?;
            Ok((start.elapsed().as_secs_f64(), res.iter().map(|r| r.t_hat).collect()))
        };
        let (_, t_hats) = run_once()?;
        let mut times = Vec::with_capacity(cfg.bench.repeats);
        for _ in 0..cfg.bench.repeats {
            times.push(run_once()?.0);
        }
        times.sort_by(f64::total_cmp);
        let per_image = times[times.len() / 2] / n as f64;
        out.push(BenchReport {
            category: cat.clone(),
            batch_size: n,
            repeats: cfg.bench.repeats,
            resolution: cfg.data.resolution,
            sampler_steps: cfg.sampler.steps,
            seconds_per_image: per_image,
            fps: 1.0 / per_image,
            t_hats,
        });
    }
    save_json(&run.root().join("bench.json"), &out)?;
    let text: String = out.iter().map(|r| r.to_table()).collect();
    crate::io::write_atomic(&run.root().join("bench.txt"), text.as_bytes())?;
    Ok(out)
}
