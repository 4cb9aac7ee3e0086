//! Acceptance suite. Runs every headline criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion; exits non-zero on failure.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use legible_cli::pipeline::{self, Context};
use legible_cli::PipelineConfig;
use legible_core::corpus::SynthSpec;
use legible_core::legibility::{cam, Heatmap};
use legible_core::nnet::{grad_check, EvalResult, Model, ModelConfig, Prediction, ProbeScope, Tensor};
use legible_core::projection::{equirect_to_cube, lonlat_to_direction, crop_perspective, CropSpec, CubeFace, EquirectPanorama};
use legible_core::similarity::{
    affinity, best_partner, covariance, delta_q, exhaustive_best, isolate, louvain, modularity, SimilarityGraph,
};
use legible_survey::{eta, read_records, EtaDenominator, ResponseStore, Role};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: Box<dyn FnOnce() -> Outcome>,
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let root = work.path().to_path_buf();
    let r2 = root.clone();
    let r3 = root.clone();
    let criteria = vec![
        Criterion {
            name: "projection fidelity",
            budget: Duration::from_secs(30),
            run: Box::new(projection_fidelity),
        },
        Criterion {
            name: "gradient correctness",
            budget: Duration::from_secs(120),
            run: Box::new(gradient_correctness),
        },
        Criterion {
            name: "end-to-end training",
            budget: Duration::from_secs(30 * 60),
            run: Box::new(move || end_to_end_training(&root)),
        },
        Criterion {
            name: "known-confusion recovery",
            budget: Duration::from_secs(30 * 60),
            run: Box::new(move || known_confusion(&r2)),
        },
        Criterion {
            name: "CAM identity",
            budget: Duration::MAX,
            run: Box::new(cam_identity),
        },
        Criterion {
            name: "covariance/affinity oracles",
            budget: Duration::MAX,
            run: Box::new(covariance_affinity),
        },
        Criterion {
            name: "louvain",
            budget: Duration::MAX,
            run: Box::new(louvain_criterion),
        },
        Criterion {
            name: "eta",
            budget: Duration::MAX,
            run: Box::new(eta_criterion),
        },
        Criterion {
            name: "survey service",
            budget: Duration::from_secs(120),
            run: Box::new(move || survey_service(&r3)),
        },
    ];
    let mut failed = 0;
    for c in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed();
        let outcome = match outcome {
            Ok(d) if secs > c.budget => Err(format!("{d}; took {:.1}s, budget {:.0}s", secs.as_secs_f64(), c.budget.as_secs_f64())),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:<28} {:>7.1}s  {detail}", c.name, secs.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<28} {:>7.1}s  {why}", c.name, secs.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

// ---------------------------------------------------------------- projection

fn face_color(i: usize) -> [u8; 3] {
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180]][i]
}

/// Face whose axis is closest to the direction.
fn nearest_face(d: [f64; 3]) -> usize {
    let dots: Vec<f64> = CubeFace::ALL
        .iter()
        .map(|f| {
            let (yaw, pitch) = f.heading();
            let a = lonlat_to_direction(yaw, pitch);
            a[0] * d[0] + a[1] * d[1] + a[2] * d[2]
        })
        .collect();
    (0..6).max_by(|&a, &b| dots[a].total_cmp(&dots[b])).unwrap()
}

fn projection_fidelity() -> Outcome {
    let (w, h) = (1024u32, 512u32);
    let img = RgbImage::from_fn(w, h, |x, y| {
        let lon = (x as f64 + 0.5) / w as f64 * 360.0 - 180.0;
        let lat = 90.0 - (y as f64 + 0.5) / h as f64 * 180.0;
        Rgb(face_color(nearest_face(lonlat_to_direction(lon, lat))))
    });
    let pano = EquirectPanorama::new("six", img, None).map_err(|e| e.to_string())?;
    let cube = equirect_to_cube(&pano, 128).map_err(|e| e.to_string())?;
    // A pixel recovers its source colour when the nearest palette entry is
    // the face's own; bilinear sampling blends colours on the face rim.
    let decode = |p: [u8; 3]| {
        (0..6)
            .min_by_key(|&k| {
                let c = face_color(k);
                (0..3).map(|ch| (p[ch] as i32 - c[ch] as i32).pow(2)).sum::<i32>()
            })
            .unwrap()
    };
    let mut worst = 1.0f64;
    let mut worst_exact = 1.0f64;
    for (i, face) in CubeFace::ALL.iter().enumerate() {
        let img = cube.face(*face);
        let n = (img.width() * img.height()) as f64;
        let frac = img.pixels().filter(|p| decode(p.0) == i).count() as f64 / n;
        worst = worst.min(frac);
        worst_exact = worst_exact.min(img.pixels().filter(|p| p.0 == face_color(i)).count() as f64 / n);
        ensure!(frac >= 0.99, "face {} recovered {:.4} of pixels", face.name(), frac);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let textured = RgbImage::from_fn(512, 256, |x, y| {
        let v = ((x as f64 / 9.0).sin() * 60.0 + (y as f64 / 7.0).cos() * 50.0 + 128.0) as u8;
        Rgb([v, (x % 256) as u8, (y % 256) as u8])
    });
    let pano = EquirectPanorama::new("tex", textured, None).map_err(|e| e.to_string())?;
    let mut max_err = 0.0f64;
    for _ in 0..8 {
        let shift = rng.random_range(-256i64..256);
        let yaw = rng.random_range(0.0..360.0);
        let pitch = rng.random_range(-40.0..40.0);
        let rotated = pano.rotate_columns(shift);
        let a = crop_perspective(&rotated, &CropSpec::new(yaw, pitch, 90.0, 96).unwrap()).unwrap();
        let b = crop_perspective(&pano, &CropSpec::new(yaw + shift as f64 * 360.0 / 512.0, pitch, 90.0, 96).unwrap())
            .unwrap();
        let err: f64 = a
            .as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(p, q)| (*p as f64 - *q as f64).abs())
            .sum::<f64>()
            / a.as_raw().len() as f64
            / 255.0;
        max_err = max_err.max(err);
    }
    ensure!(max_err < 2.0 / 255.0, "shift equivariance mean abs error {max_err:.5}");
    Ok(format!("worst face {:.4} ({:.4} exact), shift error {:.2e}", worst, worst_exact, max_err))
}

// ------------------------------------------------------------------ gradients

fn random_image(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn gradient_correctness() -> Outcome {
    // Full default architecture (three stages of two residual blocks, head
    // bias on) at a small input so 100+ double-precision probes stay quick.
    let config = ModelConfig {
        input_size: 16,
        num_classes: 12,
        head_bias: true,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(config, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Nonzero biases so no tensor is probed only at its initial zeros.
    for t in model.tensors_mut() {
        if t.len() <= 64 {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    let x = Tensor::<f64>::from_rgb(&random_image(&mut rng, 16));
    let report = grad_check(&model, &x, 3, 120, &ProbeScope::All, 7).map_err(|e| e.to_string())?;
    ensure!(report.probes.len() >= 100, "only {} probes", report.probes.len());
    ensure!(report.max_rel_error < 1e-4, "max relative error {:.3e}", report.max_rel_error);
    Ok(format!(
        "{} probes, max rel error {:.2e}, {} kinks skipped",
        report.probes.len(),
        report.max_rel_error,
        report.skipped_kinks
    ))
}

// ------------------------------------------------------------------ pipeline

/// Desk-scale configuration: 12 rooms, 9 panoramas each, 24 crops per
/// panorama (about 200 crops per segment), 32-pixel crops.
fn desk_config(out: &Path, ambiguity: f64, pairs: Vec<[u32; 2]>) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.seed = 1;
    c.paths.out = out.to_path_buf();
    c.synth = SynthSpec {
        segments: 12,
        panos_per_segment: 9,
        pano_width: 256,
        ambiguity,
        confusable_pairs: pairs,
        ..SynthSpec::default()
    };
    c.prepare.crop_size = 32;
    c.model = ModelConfig {
        input_size: 32,
        stage_channels: vec![8, 16, 32],
        blocks_per_stage: vec![1, 1, 1],
        ..ModelConfig::default()
    };
    c.train.epochs = 8;
    c.train.lr = 0.1;
    c.train.batch_size = 32;
    c
}

fn run_pipeline(config: PipelineConfig) -> Result<(Context, EvalResult), String> {
    let ctx = Context::new(config).map_err(|e| e.to_string())?;
    let e = |e: anyhow::Error| format!("{e:#}");
    pipeline::cmd_synth(&ctx).map_err(e)?;
    let prep = pipeline::cmd_prepare(&ctx).map_err(e)?;
    let per_segment = (prep.train + prep.test) as f64 / ctx.config.synth.segments as f64;
    if !(150.0..=260.0).contains(&per_segment) {
        return Err(format!("{per_segment:.0} crops per segment"));
    }
    pipeline::cmd_train(&ctx, false).map_err(e)?;
    let eval = pipeline::cmd_evaluate(&ctx).map_err(e)?;
    Ok((ctx, eval))
}

fn end_to_end_training(root: &Path) -> Outcome {
    let (_, eval) = run_pipeline(desk_config(&root.join("clean"), 0.0, vec![]))?;
    ensure!(eval.top1 >= 0.90, "top-1 {:.4}", eval.top1);
    ensure!(eval.top5 >= 0.99, "top-5 {:.4}", eval.top5);
    Ok(format!("{} test crops, top-1 {:.4}, top-5 {:.4}", eval.predictions.len(), eval.top1, eval.top5))
}

fn known_confusion(root: &Path) -> Outcome {
    let (ctx, eval) = run_pipeline(desk_config(&root.join("confused"), 1.0, vec![[0, 1]]))?;
    let summary = pipeline::cmd_analyze(&ctx).map_err(|e| format!("{e:#}"))?;
    let (a, b, _) = summary.pairs[0];
    ensure!((a.min(b), a.max(b)) == (0, 1), "rank-1 pair is ({a}, {b})");
    let conf: BTreeMap<u32, f64> = eval
        .per_class
        .iter()
        .map(|(c, s)| (summary.class_ids[*c], s.mean_confidence))
        .collect();
    let others = conf.iter().filter(|(id, _)| **id > 1).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    ensure!(conf[&0] < others && conf[&1] < others, "confidences {conf:?}");
    Ok(format!(
        "pair (0, 1) ranks 1; confidence {:.3}/{:.3} vs others >= {:.3}",
        conf[&0], conf[&1], others
    ))
}

// ------------------------------------------------------------------------ CAM

fn naive_cam(features: &Tensor<f64>, head: &[f64], class: usize) -> Vec<f64> {
    let k = features.channels;
    let mut out = vec![0.0; features.height * features.width];
    for y in 0..features.height {
        for x in 0..features.width {
            let mut s = 0.0;
            for c in 0..k {
                s += head[class * k + c] * features.data[(c * features.height + y) * features.width + x];
            }
            out[y * features.width + x] = s;
        }
    }
    out
}

fn cam_identity() -> Outcome {
    let config = ModelConfig {
        input_size: 24,
        stage_channels: vec![4, 8, 12],
        blocks_per_stage: vec![1, 1, 1],
        num_classes: 5,
        head_bias: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_mean = 0.0f64;
    let mut worst_naive = 0.0f64;
    for trial in 0..1000 {
        let model = Model::<f64>::new(config.clone(), trial / 100).map_err(|e| e.to_string())?;
        let x = Tensor::<f64>::from_rgb(&random_image(&mut rng, 24));
        let out = model.forward(&x).map_err(|e| e.to_string())?;
        let class = rng.random_range(0..5);
        let heat: Heatmap = cam(&out.features, &model.head_weight, class).map_err(|e| e.to_string())?;
        worst_mean = worst_mean.max((heat.mean() - out.logits[class]).abs());
        let naive = naive_cam(&out.features, &model.head_weight, class);
        for (a, b) in heat.data.iter().zip(&naive) {
            worst_naive = worst_naive.max((a - b).abs());
        }
    }
    ensure!(worst_mean < 1e-6, "mean vs logit error {worst_mean:.3e}");
    ensure!(worst_naive < 1e-10, "naive oracle error {worst_naive:.3e}");
    Ok(format!("1000 forwards; mean-logit {:.1e}, naive {:.1e}", worst_mean, worst_naive))
}

// ------------------------------------------------------ covariance / affinity

fn random_eval(rng: &mut ChaCha8Rng) -> EvalResult {
    let s = rng.random_range(3..9);
    let n = rng.random_range(s..6 * s);
    let preds = (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..s).map(|_| rng.random::<f64>().powi(2) + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            Prediction {
                path: format!("{i}"),
                // Every class appears at least once.
                label: if i < s { i } else { rng.random_range(0..s) },
                probs: raw.iter().map(|v| v / z).collect(),
            }
        })
        .collect();
    EvalResult::from_predictions(s, preds).unwrap()
}

fn covariance_affinity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_cov = 0.0f64;
    let mut worst_aff = 0.0f64;
    for _ in 0..100 {
        let ev = random_eval(&mut rng);
        let (n, s) = (ev.predictions.len(), ev.num_classes);
        let x = DMatrix::from_fn(n, s, |r, c| ev.predictions[r].probs[c]);
        let q = covariance(&x).map_err(|e| e.to_string())?;
        for j in 0..s {
            for k in 0..s {
                let mj: f64 = (0..n).map(|r| x[(r, j)]).sum::<f64>() / n as f64;
                let mk: f64 = (0..n).map(|r| x[(r, k)]).sum::<f64>() / n as f64;
                let naive: f64 = (0..n).map(|r| (x[(r, j)] - mj) * (x[(r, k)] - mk)).sum::<f64>() / (n - 1) as f64;
                worst_cov = worst_cov.max((q[(j, k)] - naive).abs());
                ensure!(q[(j, k)] == q[(k, j)], "covariance not exactly symmetric");
            }
        }
        let ids: Vec<u32> = (0..s as u32).map(|i| i * 3 + 1).collect();
        let aff = affinity(&ev, &ids).map_err(|e| e.to_string())?;
        for i in 0..s {
            for j in 0..s {
                let mean_in = |seg: usize, col: usize| {
                    let rows: Vec<&Prediction> = ev.predictions.iter().filter(|p| p.label == seg).collect();
                    rows.iter().map(|p| p.probs[col]).sum::<f64>() / rows.len() as f64
                };
                let naive = mean_in(i, j) + mean_in(j, i);
                worst_aff = worst_aff.max((aff.p[(i, j)] - naive).abs());
                ensure!(aff.p[(i, j)] == aff.p[(j, i)], "affinity not exactly symmetric");
            }
        }
    }
    ensure!(worst_cov < 1e-10, "covariance error {worst_cov:.3e}");
    ensure!(worst_aff < 1e-10, "affinity error {worst_aff:.3e}");
    Ok(format!("100 instances; covariance {:.1e}, affinity {:.1e}", worst_cov, worst_aff))
}

// -------------------------------------------------------------------- louvain

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let density = rng.random_range(0.3..0.9);
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.1..2.0);
                a[(i, j)] = w;
                a[(j, i)] = w;
            }
        }
    }
    // Keep at least one edge.
    if a.sum() == 0.0 {
        a[(0, 1)] = 1.0;
        a[(1, 0)] = 1.0;
    }
    a
}

/// Modularity straight from the definition.
fn naive_q(a: &DMatrix<f64>, part: &[usize]) -> f64 {
    let n = a.nrows();
    let k: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if part[i] == part[j] {
                q += a[(i, j)] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Best Q over all set partitions, enumerated as restricted growth strings.
fn brute_best_q(a: &DMatrix<f64>) -> f64 {
    fn rec(a: &DMatrix<f64>, labels: &mut Vec<usize>, max: usize, best: &mut f64) {
        if labels.len() == a.nrows() {
            *best = best.max(naive_q(a, labels));
            return;
        }
        for l in 0..=max + 1 {
            labels.push(l);
            rec(a, labels, max.max(l), best);
            labels.pop();
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut labels = vec![0];
    rec(a, &mut labels, 0, &mut best);
    best
}

fn louvain_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut optimal = 0;
    let mut small = 0;
    for t in 0..100 {
        let n = rng.random_range(3..=14);
        let a = random_graph(&mut rng, n);
        let g = SimilarityGraph::new(a.clone(), false).map_err(|e| e.to_string())?;
        let p = louvain(&g, t).map_err(|e| e.to_string())?;
        ensure!(p.trace.windows(2).all(|w| w[1] >= w[0]), "Q trace decreases: {:?}", p.trace);
        ensure!((naive_q(&a, &p.communities) - p.modularity).abs() < 1e-10, "reported Q disagrees");
        if n <= 8 {
            small += 1;
            let best = brute_best_q(&a);
            let lib_best = exhaustive_best(&g, n).map_err(|e| e.to_string())?.1;
            ensure!((best - lib_best).abs() < 1e-12, "exhaustive oracles disagree");
            ensure!(p.modularity <= best + 1e-12, "louvain Q {} above optimum {best}", p.modularity);
            if best - p.modularity <= 1e-9 {
                optimal += 1;
            }
        }
    }
    ensure!(small > 0 && optimal * 5 >= small * 4, "optimal on {optimal}/{small} small graphs");

    // Two 5-cliques joined by a single bridge.
    let mut a = DMatrix::zeros(10, 10);
    for i in 0..10 {
        for j in 0..10 {
            if i != j && (i < 5) == (j < 5) {
                a[(i, j)] = 1.0;
            }
        }
    }
    a[(4, 5)] = 1.0;
    a[(5, 4)] = 1.0;
    let p = louvain(&SimilarityGraph::new(a, false).unwrap(), 0).unwrap();
    ensure!(p.communities == [0, 0, 0, 0, 0, 1, 1, 1, 1, 1], "two-clique partition {:?}", p.communities);

    // Every single-node move on small graphs.
    let mut moves = 0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let a = random_graph(&mut rng, n);
        let g = SimilarityGraph::new(a.clone(), false).unwrap();
        let part: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        for node in 0..n {
            let iso = isolate(&part, node);
            for target in 0..n {
                let mut moved = iso.clone();
                moved[node] = target;
                let full = naive_q(&a, &moved) - naive_q(&a, &iso);
                let dq = delta_q(&g, &part, node, target).map_err(|e| e.to_string())?;
                worst = worst.max((full - dq).abs());
                moves += 1;
            }
            let _ = modularity(&g, &iso).map_err(|e| e.to_string())?;
        }
    }
    ensure!(worst < 1e-10, "delta Q error {worst:.3e}");
    Ok(format!(
        "optimal on {optimal}/{small} small graphs, cliques recovered, {moves} moves with dQ error {:.1e}",
        worst
    ))
}

// ------------------------------------------------------------------------ eta

fn brute_eta(h: &Heatmap, clicks: &[(f64, f64)], r: f64) -> f64 {
    let total: f64 = h.data.iter().sum();
    let p: Vec<f64> = if total > 0.0 {
        h.data.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / h.data.len() as f64; h.data.len()]
    };
    let mut captured = 0.0;
    let mut area = 0;
    for y in 0..h.height {
        for x in 0..h.width {
            if clicks.iter().any(|&(cx, cy)| (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r) {
                captured += p[y * h.width + x];
                area += 1;
            }
        }
    }
    let mut sorted = p;
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    captured / sorted[..area].iter().sum::<f64>()
}

fn eta_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst = 0.0f64;
    let clicks_in = |rng: &mut ChaCha8Rng, w: usize, h: usize| -> Vec<(f64, f64)> {
        (0..3).map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))).collect()
    };
    for _ in 0..100 {
        let (w, h) = (rng.random_range(10..80), rng.random_range(10..80));
        let data: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>().powi(4)).collect();
        let heat = Heatmap::new(w, h, data);
        let clicks = clicks_in(&mut rng, w, h);
        let r = rng.random_range(1.0..15.0);
        let e = eta(&heat, &clicks, r, EtaDenominator::BestEqualArea).map_err(|e| e.to_string())?;
        worst = worst.max((e - brute_eta(&heat, &clicks, r)).abs());
    }
    ensure!(worst < 1e-12, "brute-force error {worst:.3e}");

    for _ in 0..20 {
        let (w, h) = (rng.random_range(10..60), rng.random_range(10..60));
        let heat = Heatmap::new(w, h, vec![0.37; w * h]);
        let clicks = clicks_in(&mut rng, w, h);
        let e = eta(&heat, &clicks, 10.0, EtaDenominator::BestEqualArea).unwrap();
        ensure!((e - 1.0).abs() < 1e-12, "uniform heatmap gave {e}");
    }

    for i in 0..10_000 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let data: Vec<f64> = (0..w * h)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random::<f64>() * 1e-300,
                2 => rng.random::<f64>() * 1e300,
                _ => rng.random::<f64>(),
            })
            .collect();
        let clicks = clicks_in(&mut rng, w, h);
        let denom = if i % 2 == 0 { EtaDenominator::BestEqualArea } else { EtaDenominator::TotalMass };
        let e = eta(&Heatmap::new(w, h, data), &clicks, rng.random_range(1.0..50.0), denom).map_err(|e| e.to_string())?;
        ensure!((0.0..=1.0).contains(&e), "eta {e} out of bounds");
    }
    Ok(format!("100 brute-force instances within {:.1e}, uniform = 1, 1e4 fuzzed in [0, 1]", worst))
}

// --------------------------------------------------------------------- survey

fn survey_service(root: &Path) -> Outcome {
    // Reuses the trained confusion-run model.
    let ctx = Context::new(desk_config(&root.join("confused"), 1.0, vec![[0, 1]])).map_err(|e| e.to_string())?;
    let analysis = pipeline::cmd_analyze(&ctx).map_err(|e| format!("{e:#}"))?;
    let state = pipeline::survey_state(&ctx).map_err(|e| format!("{e:#}"))?;
    ensure!(state.pool().len() >= 5, "pool has {} questions", state.pool().len());
    let ids = &analysis.class_ids;
    for q in state.pool() {
        let a = ids.iter().position(|&x| x == q.segment_a).unwrap();
        let b = best_partner(&analysis.affinity.p, a).map(|b| ids[b]);
        ensure!(b == Some(q.choice_by_role(Role::ImageB).segment), "question {} breaks image_b integrity", q.id);
    }
    let questions: HashMap<String, legible_survey::SurveyQuestion> =
        state.pool().iter().map(|q| (q.id.clone(), q.clone())).collect();

    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let store_path = ctx.config.paths.response_store();
    let (served, stats) = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(legible_survey::serve(listener, state.clone(), async {
            let _ = rx.await;
        }));
        let http = reqwest::Client::new();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut served = Vec::new();
        for p in 0..50 {
            let participant = format!("participant-{p:02}");
            loop {
                let q: Value = http
                    .get(format!("{base}/api/question?participant={participant}"))
                    .send()
                    .await
                    .unwrap()
                    .json()
                    .await
                    .unwrap();
                if q["status"] == "complete" {
                    break;
                }
                let [w, h] = [q["control_size"][0].as_f64().unwrap(), q["control_size"][1].as_f64().unwrap()];
                let props = ["object", "material", "color", "light", "geometry", "texture", "other"];
                let clicks: Vec<Value> = (0..3)
                    .map(|_| {
                        json!({
                            "x": rng.random_range(0.0..w),
                            "y": rng.random_range(0.0..h),
                            "property": props[rng.random_range(0..props.len())],
                        })
                    })
                    .collect();
                let pick = rng.random_range(0..3);
                let body = json!({
                    "participant": participant,
                    "token": format!("{participant}-{}", q["index"]),
                    "question_id": q["question_id"],
                    "chosen_image": q["choices"][pick]["image_id"],
                    "clicks": clicks,
                    "dwell_ms": rng.random_range(2500..30_000),
                });
                let r = http.post(format!("{base}/api/response")).json(&body).send().await.unwrap();
                assert_eq!(r.status(), 201, "{}", r.text().await.unwrap());
                served.push((participant.clone(), q["question_id"].as_str().unwrap().to_string(), body));
            }
        }
        let mut stats = HashMap::new();
        for name in ["choices", "properties", "eta"] {
            let v: Value = http.get(format!("{base}/api/stats/{name}")).send().await.unwrap().json().await.unwrap();
            stats.insert(name, v);
        }
        tx.send(()).unwrap();
        server.await.unwrap().unwrap();
        (served, stats)
    });
    ensure!(served.len() == 250, "{} responses submitted", served.len());
    let per: HashMap<&str, usize> = served.iter().fold(HashMap::new(), |mut m, (p, _, _)| {
        *m.entry(p.as_str()).or_default() += 1;
        m
    });
    ensure!(per.values().all(|&n| n == 5), "participants answered {:?}", per.values().collect::<Vec<_>>());

    let records = read_records(&store_path).map_err(|e| e.to_string())?;
    ensure!(records.len() == 250, "{} records persisted", records.len());
    for (r, (_, qid, body)) in records.iter().zip(&served) {
        ensure!(&r.question_id == qid, "record order differs");
        let q = &questions[qid];
        let choice = q.choice_by_image(body["chosen_image"].as_str().unwrap()).unwrap();
        ensure!(r.chosen_role == choice.role && r.chosen_segment == choice.segment, "stored role mismatch");
        ensure!(r.image_b == q.choice_by_role(Role::ImageB).image.id(), "stored image_b mismatch");
    }
    let replay = ResponseStore::open(&store_path).map_err(|e| e.to_string())?;
    ensure!(replay.records() == records.as_slice(), "replayed store differs");

    let kept = legible_survey::filter_bots(&records, &ctx.config.survey.server.bot_filter).kept;
    let choices = serde_json::to_value(legible_survey::aggregate_choices(&kept)).unwrap();
    ensure!(stats["choices"]["choices"] == choices, "choice stats do not replay");
    let pct: f64 = choices["roles"].as_array().unwrap().iter().map(|r| r["percent"].as_f64().unwrap()).sum();
    ensure!((pct - 100.0).abs() < 1e-9, "choice percentages sum to {pct}");
    let props = serde_json::to_value(legible_survey::property_tally(&kept)).unwrap();
    ensure!(stats["properties"] == props, "property stats do not replay");
    for col in props["percents"].as_array().unwrap() {
        let s: f64 = col.as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
        ensure!((s - 100.0).abs() < 1e-9, "property percentages sum to {s}");
    }
    let report = pipeline::cmd_validate(&ctx).map_err(|e| format!("{e:#}"))?;
    let eta = report.eta.ok_or("no eta report")?;
    let local = serde_json::to_value(&eta).unwrap();
    ensure!(
        local == stats["eta"],
        "eta stats do not replay: local {} vs served {}",
        local.to_string().chars().take(300).collect::<String>(),
        stats["eta"].to_string().chars().take(300).collect::<String>()
    );
    ensure!(eta.values.len() == 250, "{} eta values", eta.values.len());
    Ok(format!(
        "250 responses over HTTP from {} questions; replay identical; mean eta {:.3}",
        questions.len(),
        eta.mean
    ))
}
