//! The pipeline stages behind each subcommand.
//!
//! Every stage reads its inputs from the directories named in the config
//! and writes `<stage>_meta.json` next to its outputs with the seed and the
//! config digest. Wall-clock values only ever appear in those meta files,
//! so the remaining artifacts are byte-identical across reruns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _, Result};
use legible_core::corpus::{
    annotate, balance, split, synth_station, CropEntry, DatasetManifest, SegmentTable, Split, Trajectory,
};
use legible_core::legibility::{export_cam, image_cam, legibility_by, CamTarget, GroupKey, Heatmap};
use legible_core::nnet::{
    evaluate, load_checkpoint, save_checkpoint, train, CheckpointMeta, EpochStats, EvalResult, LabeledImage, Model,
    TrainConfig,
};
use legible_core::projection::{standard_crop_set, write_crop_manifest, CropRecord, EquirectPanorama};
use legible_core::similarity::{
    affinity, covariance, layout2d, louvain, modularity, top_pairs, write_layout_csv, write_matrix_csv,
    CommunityPartition, SegmentAffinity, SimilarityGraph,
};
use legible_survey::{
    build_question_pool, eta_distribution, export_csv, filter_bots, read_records, AppState, Catalog, EtaResult,
    MediaRef, ResponseStore, SegmentMedia, SurveyQuestion,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, PipelineConfig};

/// A validated configuration with its digest.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: PipelineConfig,
    pub digest: String,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let digest = config.digest();
        Ok(Self { config, digest })
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_meta(dir: &Path, stage: &str, ctx: &Context, extra: serde_json::Value) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let mut meta = serde_json::json!({
        "stage": stage,
        "seed": ctx.seed(),
        "config_digest": ctx.digest,
        "created_unix": created,
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    let path = dir.join(format!("{stage}_meta.json"));
    fs::write(&path, serde_json::to_string_pretty(&meta)?).with_context(|| format!("cannot write {}", path.display()))
}

/// One row of `panoramas.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanoramaRow {
    pub pano_id: String,
    pub timestamp: f64,
    /// Relative to the corpus directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub panoramas: usize,
    pub segments: usize,
    pub digest: String,
}

pub fn cmd_synth(ctx: &Context) -> Result<SynthSummary> {
    let dir = ctx.config.paths.corpus_dir();
    create_dir(&dir.join("panoramas"))?;
    let station = synth_station(&ctx.config.synth, ctx.seed())?;
    let mut rows = Vec::with_capacity(station.panoramas.len());
    for pano in &station.panoramas {
        let rel = format!("panoramas/{}.png", pano.id());
        pano.image().save(dir.join(&rel)).with_context(|| format!("cannot write {rel}"))?;
        rows.push(PanoramaRow {
            pano_id: pano.id().to_string(),
            timestamp: pano.timestamp().unwrap_or(0.0),
            path: rel,
        });
    }
    let mut w = csv::Writer::from_path(dir.join("panoramas.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    station.trajectory.save(&dir.join("trajectory.csv"))?;
    station.segments.save(&dir.join("segments.json"))?;
    let digest = corpus_digest(&dir)?;
    let summary = SynthSummary {
        panoramas: rows.len(),
        segments: station.segments.len(),
        digest,
    };
    log::info!("synth panoramas={} segments={} digest={}", summary.panoramas, summary.segments, summary.digest);
    write_meta(&dir, "synth", ctx, serde_json::json!({ "corpus_digest": summary.digest, "spec": ctx.config.synth }))?;
    Ok(summary)
}

fn read_panoramas(dir: &Path) -> Result<Vec<PanoramaRow>> {
    let path = dir.join("panoramas.csv");
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("missing corpus index {}", path.display()))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Hash of the corpus index files and the decoded panorama pixels, so it
/// does not depend on how the PNG encoder compresses.
pub fn corpus_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["panoramas.csv", "trajectory.csv", "segments.json"] {
        let path = dir.join(name);
        h.update(fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?);
    }
    for row in read_panoramas(dir)? {
        let img = image::open(dir.join(&row.path))?.to_rgb8();
        h.update(row.pano_id.as_bytes());
        h.update(img.width().to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.as_raw());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub crops: usize,
    pub dropped: usize,
    pub train: usize,
    pub test: usize,
}

fn crop_name(pano_id: &str, yaw: f64, pitch: f64) -> String {
    format!("{pano_id}_p{:+03}_y{:03}.png", pitch.round() as i64, yaw.round() as i64)
}

pub fn cmd_prepare(ctx: &Context) -> Result<PrepareSummary> {
    let corpus = ctx.config.paths.corpus_dir();
    let dir = ctx.config.paths.dataset_dir();
    let panos = read_panoramas(&corpus)?;
    let trajectory = Trajectory::load(&corpus.join("trajectory.csv"))?;
    let segments = SegmentTable::load(&corpus.join("segments.json"))?;
    if panos.is_empty() {
        bail!(legible_core::Error::Input(format!("{} lists no panoramas", corpus.display())));
    }
    let crops_dir = dir.join("crops");
    if crops_dir.exists() {
        fs::remove_dir_all(&crops_dir)?;
    }
    create_dir(&crops_dir)?;
    let p = &ctx.config.prepare;
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for row in &panos {
        let pano = EquirectPanorama::load(&corpus.join(&row.path), row.pano_id.clone(), Some(row.timestamp))?;
        for (spec, img) in standard_crop_set(&pano, p.preset, p.crop_size)? {
            let rel = format!("crops/{}", crop_name(&row.pano_id, spec.yaw, spec.pitch));
            img.save(dir.join(&rel))?;
            records.push(CropRecord {
                pano_id: row.pano_id.clone(),
                yaw: spec.yaw,
                pitch: spec.pitch,
                fov: spec.fov,
                out_path: rel.clone(),
            });
            entries.push(CropEntry {
                image_path: rel,
                pano_id: row.pano_id.clone(),
                timestamp: row.timestamp,
                yaw: spec.yaw,
                pitch: spec.pitch,
            });
        }
    }
    write_crop_manifest(&dir.join("crops.csv"), &records)?;
    let mut manifest = annotate(&entries, trajectory.poses(), &segments)?;
    let dropped = manifest.dropped;
    if let Some(cap) = p.cap {
        manifest = balance(&manifest, cap, ctx.seed())?;
    }
    let (tr, te) = split(&manifest, p.test_fraction, ctx.seed())?;
    tr.merged(&te).save_csv(&dir.join("manifest.csv"))?;
    segments.save(&dir.join("segments.json"))?;
    let summary = PrepareSummary {
        crops: records.len(),
        dropped,
        train: tr.len(),
        test: te.len(),
    };
    log::info!(
        "prepare crops={} dropped={} train={} test={}",
        summary.crops,
        summary.dropped,
        summary.train,
        summary.test
    );
    write_meta(&dir, "prepare", ctx, serde_json::json!({ "summary": summary, "per_segment": manifest.counts() }))?;
    Ok(summary)
}

/// The prepared manifest with its class order.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    /// Segment id of each class index: every segment with images, ascending.
    pub class_ids: Vec<u32>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let segments = SegmentTable::load(&dir.join("segments.json"))?;
        let manifest = DatasetManifest::load_csv(&dir.join("manifest.csv"), segments)?;
        let class_ids: Vec<u32> = manifest.counts().into_iter().filter(|(_, n)| *n > 0).map(|(id, _)| id).collect();
        if class_ids.len() < 2 {
            bail!(legible_core::Error::Input(format!("dataset has {} segment(s) with images, need 2", class_ids.len())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            class_ids,
        })
    }

    pub fn label_of(&self, segment: u32) -> usize {
        self.class_ids.binary_search(&segment).expect("segment has images")
    }

    pub fn images(&self, split: Split) -> Result<Vec<LabeledImage>> {
        let mut entries: Vec<_> = self.manifest.entries.iter().filter(|e| e.split == Some(split)).collect();
        entries.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        entries
            .into_iter()
            .map(|e| {
                let img = image::open(self.dir.join(&e.image_path))
                    .with_context(|| format!("cannot read {}", e.image_path))?
                    .to_rgb8();
                Ok(LabeledImage::new(e.image_path.clone(), img, self.label_of(e.segment_id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    epoch: usize,
    train_loss: f64,
    test_top1: Option<f64>,
    test_top5: Option<f64>,
}

impl From<&EpochStats> for ReportRow {
    fn from(s: &EpochStats) -> Self {
        Self {
            epoch: s.epoch,
            train_loss: s.train_loss,
            test_top1: s.test_top1,
            test_top5: s.test_top5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub start_epoch: usize,
    /// Losses of every epoch recorded so far, including earlier runs.
    pub losses: Vec<f64>,
}

/// Trains from scratch, or continues from the saved checkpoint when
/// `resume` is set. The checkpoint is rewritten after every epoch.
pub fn cmd_train(ctx: &Context, resume: bool) -> Result<TrainSummary> {
    let data = Dataset::load(&ctx.config.paths.dataset_dir())?;
    let dir = ctx.config.paths.model_dir();
    create_dir(&dir)?;
    let ckpt = ctx.config.paths.checkpoint();
    let report_path = dir.join("train_report.csv");
    let mut model_config = ctx.config.model.clone();
    model_config.num_classes = data.class_ids.len();
    let params = &ctx.config.train;

    let (mut model, start, mut rows) = if resume && ckpt.exists() {
        let (model, meta) = load_checkpoint::<f32>(&ckpt)?;
        if meta.class_ids != data.class_ids || *model.config() != model_config || meta.seed != ctx.seed() {
            bail!(ConfigError(format!("checkpoint {} does not match the configuration", ckpt.display())));
        }
        let mut rows: Vec<ReportRow> = if report_path.exists() {
            csv::Reader::from_path(&report_path)?.deserialize().collect::<std::result::Result<_, _>>()?
        } else {
            Vec::new()
        };
        rows.retain(|r| r.epoch < meta.epoch);
        (model, meta.epoch, rows)
    } else {
        (Model::<f32>::new(model_config, ctx.seed())?, 0, Vec::new())
    };

    let train_set = data.images(Split::Train)?;
    let test_set = if params.eval_each_epoch { Some(data.images(Split::Test)?) } else { None };
    log::info!(
        "train images={} classes={} start_epoch={start} epochs={} params={}",
        train_set.len(),
        data.class_ids.len(),
        params.epochs,
        model.param_count()
    );
    let t0 = Instant::now();
    let mut seconds = Vec::new();
    for epoch in start..params.epochs {
        let report = train(
            &mut model,
            &train_set,
            test_set.as_deref(),
            &TrainConfig {
                epochs: epoch + 1,
                batch_size: params.batch_size,
                lr: params.lr,
                seed: ctx.seed(),
                augment: params.augment,
                start_epoch: epoch,
            },
        )?;
        let stats = &report.epochs[0];
        seconds.push(stats.seconds);
        rows.push(stats.into());
        let meta = CheckpointMeta {
            seed: ctx.seed(),
            epoch: epoch + 1,
            class_ids: data.class_ids.clone(),
        };
        save_checkpoint(&ckpt, &model, &meta)?;
        let mut w = csv::Writer::from_path(&report_path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_meta(
        &dir,
        "train",
        ctx,
        serde_json::json!({
            "start_epoch": start,
            "epochs": params.epochs,
            "class_ids": data.class_ids,
            "epoch_seconds": seconds,
            "wall_seconds": t0.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(TrainSummary {
        start_epoch: start,
        losses: rows.iter().map(|r| r.train_loss).collect(),
    })
}

/// Model, dataset and the test-split evaluation shared by the later stages.
pub struct Evaluated {
    pub model: Model<f32>,
    pub data: Dataset,
    pub test: Vec<LabeledImage>,
    pub eval: EvalResult,
}

pub fn load_evaluated(ctx: &Context) -> Result<Evaluated> {
    let data = Dataset::load(&ctx.config.paths.dataset_dir())?;
    let ckpt = ctx.config.paths.checkpoint();
    let (model, meta) = load_checkpoint::<f32>(&ckpt).with_context(|| format!("cannot load {}", ckpt.display()))?;
    if meta.class_ids != data.class_ids {
        bail!(ConfigError(format!(
            "checkpoint classes {:?} differ from the dataset's {:?}",
            meta.class_ids, data.class_ids
        )));
    }
    let test = data.images(Split::Test)?;
    let eval = evaluate(&model, &test)?;
    Ok(Evaluated { model, data, test, eval })
}

pub const GROUP_KEYS: [GroupKey; 5] = [GroupKey::Segment, GroupKey::Program, GroupKey::Hall, GroupKey::Floor, GroupKey::Pitch];

pub fn cmd_evaluate(ctx: &Context) -> Result<EvalResult> {
    let ev = load_evaluated(ctx)?;
    let dir = ctx.config.paths.evaluation_dir();
    create_dir(&dir)?;
    ev.eval.write_predictions_csv(&dir.join("predictions.csv"), &ev.data.class_ids)?;
    ev.eval.write_summary_csv(&dir.join("summary.csv"), &ev.data.class_ids)?;
    for key in GROUP_KEYS {
        legibility_by(&ev.eval, &ev.data.manifest, key)?.write_csv(&dir.join(format!("legibility_{key}.csv")))?;
    }
    log::info!("evaluate images={} top1={:.4} top5={:.4}", ev.eval.predictions.len(), ev.eval.top1, ev.eval.top5);
    write_meta(&dir, "evaluate", ctx, serde_json::json!({ "top1": ev.eval.top1, "top5": ev.eval.top5 }))?;
    Ok(ev.eval)
}

pub struct AnalyzeSummary {
    pub class_ids: Vec<u32>,
    pub covariance: DMatrix<f64>,
    pub affinity: SegmentAffinity,
    pub pairs: Vec<(u32, u32, f64)>,
    pub partition: CommunityPartition,
    pub layout: Vec<[f64; 2]>,
    pub cams: usize,
}

/// Test-set probabilities as an images x classes matrix.
pub fn probability_matrix(eval: &EvalResult) -> DMatrix<f64> {
    DMatrix::from_fn(eval.predictions.len(), eval.num_classes, |r, c| eval.predictions[r].probs[c])
}

pub fn cmd_analyze(ctx: &Context) -> Result<AnalyzeSummary> {
    let ev = load_evaluated(ctx)?;
    let dir = ctx.config.paths.analysis_dir();
    create_dir(&dir)?;
    let ids = &ev.data.class_ids;
    let cov = covariance(&probability_matrix(&ev.eval))?;
    write_matrix_csv(&dir.join("covariance.csv"), ids, &cov)?;
    let aff = affinity(&ev.eval, ids)?;
    write_matrix_csv(&dir.join("affinity.csv"), ids, &aff.p)?;
    let pairs: Vec<(u32, u32, f64)> =
        top_pairs(&aff.p, ctx.config.analyze.top_pairs).into_iter().map(|(i, j, v)| (ids[i], ids[j], v)).collect();
    let mut w = csv::Writer::from_path(dir.join("top_pairs.csv"))?;
    w.write_record(["rank", "segment_a", "segment_b", "affinity"])?;
    for (rank, (a, b, v)) in pairs.iter().enumerate() {
        w.write_record([(rank + 1).to_string(), a.to_string(), b.to_string(), v.to_string()])?;
    }
    w.flush()?;

    let graph = SimilarityGraph::from_affinity(&aff.p)?;
    let partition = louvain(&graph, ctx.seed())?;
    let recomputed = modularity(&graph, &partition.communities)?;
    if (recomputed - partition.modularity).abs() > 1e-9 {
        bail!(legible_core::Error::Numeric(format!(
            "partition modularity {} disagrees with recomputation {recomputed}",
            partition.modularity
        )));
    }
    fs::write(dir.join("partition.json"), serde_json::to_string_pretty(&partition.to_json(ids))?)?;
    let layout = layout2d(&aff.p)?;
    write_layout_csv(&dir.join("layout.csv"), ids, &layout)?;

    // One sample per class, in class order, up to the configured count.
    let cam_dir = dir.join("cams");
    create_dir(&cam_dir)?;
    let a = &ctx.config.analyze;
    let mut seen = BTreeSet::new();
    let mut cams = 0;
    for img in &ev.test {
        if cams >= a.cam_samples {
            break;
        }
        if !seen.insert(img.label) {
            continue;
        }
        let heat = image_cam(&ev.model, &img.path, &img.image, img.label, a.cam_target.into())?;
        let stem = Path::new(&img.path).file_stem().and_then(|s| s.to_str()).unwrap_or("cam");
        export_cam(&cam_dir, stem, &heat, &img.image, a.cam_alpha)?;
        cams += 1;
    }
    log::info!(
        "analyze communities={} modularity={:.6} top_pair={:?} cams={cams}",
        partition.num_communities(),
        partition.modularity,
        pairs.first()
    );
    write_meta(
        &dir,
        "analyze",
        ctx,
        serde_json::json!({ "modularity": partition.modularity, "communities": partition.num_communities() }),
    )?;
    Ok(AnalyzeSummary {
        class_ids: ids.clone(),
        covariance: cov,
        affinity: aff,
        pairs,
        partition,
        layout,
        cams,
    })
}

/// Question pool plus model heatmaps of each control image.
pub struct SurveySetup {
    pub pool: Vec<SurveyQuestion>,
    pub heatmaps: HashMap<String, Heatmap>,
    pub affinity: SegmentAffinity,
}

pub fn survey_setup(ctx: &Context) -> Result<SurveySetup> {
    let ev = load_evaluated(ctx)?;
    let aff = affinity(&ev.eval, &ev.data.class_ids)?;
    let corpus = ctx.config.paths.corpus_dir();
    let pano_paths: HashMap<String, String> =
        read_panoramas(&corpus)?.into_iter().map(|r| (r.pano_id, r.path)).collect();

    let mut by_segment: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    let mut panos: BTreeMap<u32, BTreeSet<&str>> = BTreeMap::new();
    for e in &ev.data.manifest.entries {
        by_segment.entry(e.segment_id).or_default().push(&e.image_path);
        panos.entry(e.segment_id).or_default().insert(&e.pano_id);
    }
    let mut catalog = Catalog::new();
    for (seg, mut crops) in by_segment {
        crops.sort();
        let crops = crops
            .iter()
            .map(|p| MediaRef::probe(&ev.data.dir.join(p)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let panoramas = panos[&seg]
            .iter()
            .filter_map(|id| pano_paths.get(*id))
            .map(|p| MediaRef::probe(&corpus.join(p)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        catalog.insert(seg, SegmentMedia { crops, panoramas });
    }
    let pool = build_question_pool(&aff, &catalog, ctx.config.survey.pool_size, ctx.seed())?;
    let mut heatmaps = HashMap::new();
    for q in &pool {
        let img = image::open(&q.control.path)?.to_rgb8();
        let label = ev.data.label_of(q.segment_a);
        let path = q.control.path.to_string_lossy();
        let heat = image_cam(&ev.model, &path, &img, label, CamTarget::TrueLabel)?;
        heatmaps.insert(q.control.id(), heat.upsampled);
    }
    Ok(SurveySetup {
        pool,
        heatmaps,
        affinity: aff,
    })
}

/// Builds the survey state and records the question pool.
pub fn survey_state(ctx: &Context) -> Result<Arc<AppState>> {
    let setup = survey_setup(ctx)?;
    let dir = ctx.config.paths.survey_dir();
    create_dir(&dir)?;
    fs::write(dir.join("pool.json"), serde_json::to_string_pretty(&setup.pool)?)?;
    write_meta(&dir, "serve", ctx, serde_json::json!({ "questions": setup.pool.len() }))?;
    let store = ResponseStore::open(&ctx.config.paths.response_store())?;
    log::info!("survey questions={} stored_responses={}", setup.pool.len(), store.len());
    Ok(AppState::new(
        setup.pool,
        store,
        setup.heatmaps,
        ctx.config.survey.server.clone(),
        ctx.config.paths.ui.clone(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidateReport {
    pub responses: usize,
    pub rejected: usize,
    pub eta: Option<EtaResult>,
    pub notice: Option<String>,
}

/// Joins stored responses with model heatmaps and reports η.
pub fn cmd_validate(ctx: &Context) -> Result<ValidateReport> {
    let store = ctx.config.paths.response_store();
    let dir = ctx.config.paths.survey_dir();
    create_dir(&dir)?;
    let records = if store.exists() { read_records(&store)? } else { Vec::new() };
    let report = if records.is_empty() {
        let notice = format!("no responses in {}", store.display());
        log::warn!("validate notice=\"{notice}\"");
        ValidateReport {
            responses: 0,
            rejected: 0,
            eta: None,
            notice: Some(notice),
        }
    } else {
        let setup = survey_setup(ctx)?;
        let s = &ctx.config.survey.server;
        let filtered = filter_bots(&records, &s.bot_filter);
        let eta = eta_distribution(&filtered.kept, &setup.heatmaps, s.click_radius, s.eta_denominator)?;
        log::info!(
            "validate responses={} rejected={} scored={} mean_eta={:.4}",
            records.len(),
            filtered.rejected.len(),
            eta.values.len(),
            eta.mean
        );
        ValidateReport {
            responses: records.len(),
            rejected: filtered.rejected.len(),
            eta: Some(eta),
            notice: None,
        }
    };
    export_csv(&dir.join("responses.csv"), &records)?;
    let mut w = csv::Writer::from_path(dir.join("eta.csv"))?;
    w.write_record(["response_id", "eta"])?;
    for (id, e) in report.eta.iter().flat_map(|r| &r.values) {
        w.write_record([id.to_string(), e.to_string()])?;
    }
    w.flush()?;
    fs::write(dir.join("eta_summary.json"), serde_json::to_string_pretty(&report)?)?;
    write_meta(&dir, "validate", ctx, serde_json::json!({ "responses": report.responses }))?;
    Ok(report)
}
