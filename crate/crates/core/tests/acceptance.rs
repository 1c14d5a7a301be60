//! Acceptance criteria 1-8. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.
//!
//! `JSRNN_ACCEPT_ONLY=1,4` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use jsrnn::data::{
    build_dataset, extract_test_blocks, extract_training_blocks, load_gray, reassemble, GrayImage, TRAIN_STRIDE,
};
use jsrnn::eval::{baseline_reconstruct_image, psnr, reconstruct_image, time_reconstruction, GaussianBaseline};
use jsrnn::model::save_model;
use jsrnn::train::{dataset_loss, pretrain, train, train_with_selection, OptimizerKind, PretrainPolicy, TrainConfig};
use jsrnn::verify::{gradient_checks, VerifyOptions};
use jsrnn::{build_model, BlockVector, MeasurementRate, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOLERANCE: f64 = 1e-6;
const GRAD_TIME_LIMIT_S: f64 = 60.0;
const OVERFIT_ITERATIONS: usize = 5000;
const OVERFIT_RATIO: f64 = 0.10;
const TREND_ITERATIONS: usize = 50_000;
const TREND_MARGIN_DB: f64 = 1.0;
const TIMING_LIMIT_S: f64 = 1.0;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = gradient_checks(VerifyOptions::default());
    let elapsed = start.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for r in &results {
        let err: f64 = r
            .detail
            .strip_prefix("max rel err ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{}: {}", r.name, r.detail))?;
        worst = worst.max(err);
        ensure(err < GRAD_TOLERANCE, || {
            format!("{}: {err:.3e} >= {GRAD_TOLERANCE:e}", r.name)
        })?;
    }
    for needle in ["dense", "conv k=11", "conv k=1 ", "conv k=7", "relu", "mse"] {
        ensure(results.iter().any(|r| r.name.contains(needle)), || {
            format!("no check named {needle:?}")
        })?;
    }
    ensure(elapsed < GRAD_TIME_LIMIT_S, || format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "{} checks, max rel err {worst:.2e}, {elapsed:.2}s",
        results.len()
    ))
}

fn criterion_2() -> Outcome {
    let conv_expected: [[usize; 4]; 6] = [
        [64, 1, 11, 11],
        [32, 64, 1, 1],
        [1, 32, 7, 7],
        [64, 1, 11, 11],
        [32, 64, 1, 1],
        [1, 32, 7, 7],
    ];
    for (rate, m) in [
        (MeasurementRate::R25, 272),
        (MeasurementRate::R10, 108),
        (MeasurementRate::R04, 43),
        (MeasurementRate::R01, 10),
    ] {
        let model = build_model(rate, 0);
        let mut layers: Vec<(String, Vec<usize>, Vec<usize>)> =
            vec![("SL".into(), model.sampling.weight.shape().to_vec(), vec![m, 1089])];
        for (i, (sda, want)) in model.sda.iter().zip([[1089, m], [272, 1089], [1089, 272]]).enumerate() {
            layers.push((format!("FC{}", i + 1), sda.weight.shape().to_vec(), want.to_vec()));
        }
        for (i, (conv, want)) in model.conv.iter().zip(conv_expected).enumerate() {
            layers.push((format!("CONV{}", i + 1), conv.kernels.shape().to_vec(), want.to_vec()));
            ensure(conv.padding == want[2] / 2, || {
                format!("MR={rate} CONV{} padding {}", i + 1, conv.padding)
            })?;
        }
        ensure(layers.len() == 10, || format!("{} layers", layers.len()))?;
        for (name, got, want) in &layers {
            ensure(got == want, || format!("MR={rate} {name}: {got:?} != {want:?}"))?;
        }
        let y = model
            .sample(&BlockVector::new(vec![0.5; 1089]).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(y.len() == m, || format!("MR={rate}: {} measurements", y.len()))?;
    }
    Ok("10 layer shapes at each of 4 rates".into())
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let bytes: Vec<u8> = (0..h * w).map(|_| rng.random()).collect();
    GrayImage::from_u8(h, w, &bytes).unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for side in [33, 34, 256, 512] {
        let img = random_image(side, side, &mut rng);
        let back = reassemble(&extract_test_blocks(&img)).map_err(|e| e.to_string())?;
        ensure(back == img, || format!("{side}x{side} round trip differs"))?;
    }
    let img = random_image(256, 256, &mut rng);
    let n = extract_training_blocks(&img, TRAIN_STRIDE)
        .map_err(|e| e.to_string())?
        .blocks
        .len();
    let closed_form = ((256 - 33) / 12 + 1usize).pow(2);
    ensure(n == 361 && n == closed_form, || format!("{n} training blocks"))?;
    Ok("exact at 33, 34, 256, 512; 361 training blocks".into())
}

fn corpus_blocks(count: usize) -> Vec<BlockVector> {
    let ds = build_dataset(data_dir().join("train"), TRAIN_STRIDE, 4).unwrap();
    ds.blocks.into_iter().take(count).collect()
}

fn criterion_4() -> Outcome {
    let toy = corpus_blocks(10);
    let config = TrainConfig {
        learning_rate: 0.001,
        iterations: OVERFIT_ITERATIONS,
        batch_size: 1,
        optimizer: OptimizerKind::Adam,
        seed: 11,
        ..TrainConfig::default()
    };
    let initial_model = build_model(MeasurementRate::R25, config.seed);
    let initial = dataset_loss(&initial_model, &toy).map_err(|e| e.to_string())?;
    let (a, hist_a) = train(initial_model.clone(), &toy, &config).map_err(|e| e.to_string())?;
    let (b, hist_b) = train(initial_model, &toy, &config).map_err(|e| e.to_string())?;
    let last = dataset_loss(&a, &toy).map_err(|e| e.to_string())?;
    ensure(a.to_bytes() == b.to_bytes() && hist_a == hist_b, || {
        "two runs differ".into()
    })?;
    ensure(last < OVERFIT_RATIO * initial, || {
        format!("loss {initial:.4} -> {last:.4}")
    })?;
    Ok(format!(
        "loss {initial:.4} -> {last:.4} ({:.2}%), repeatable",
        100.0 * last / initial
    ))
}

fn train_for_trend(rate: MeasurementRate, blocks: &[BlockVector]) -> Result<Model, String> {
    let config = TrainConfig {
        iterations: TREND_ITERATIONS,
        batch_size: 1,
        optimizer: OptimizerKind::Adam,
        seed: 0,
        ..TrainConfig::default()
    };
    let (model, _) = train(build_model(rate, config.seed), blocks, &config).map_err(|e| e.to_string())?;
    Ok(model)
}

fn criterion_5() -> Outcome {
    let ds = build_dataset(data_dir().join("train"), TRAIN_STRIDE, 0).map_err(|e| e.to_string())?;
    ensure(ds.sources.len() >= 5 && ds.len() >= 2000, || {
        format!("corpus too small: {} images, {} blocks", ds.sources.len(), ds.len())
    })?;
    let test = load_gray(data_dir().join("test").join("camera.png")).map_err(|e| e.to_string())?;
    let mut learned = Vec::new();
    let mut lines = Vec::new();
    for rate in [MeasurementRate::R25, MeasurementRate::R01] {
        let start = Instant::now();
        let model = train_for_trend(rate, &ds.blocks)?;
        let ours =
            psnr(&test, &reconstruct_image(&model, &test).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let baseline = GaussianBaseline::new(rate, 0);
        let base = psnr(
            &test,
            &baseline_reconstruct_image(&baseline, &test).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        lines.push(format!(
            "MR={rate} learned {ours:.2} dB vs baseline {base:.2} dB ({:.0}s)",
            start.elapsed().as_secs_f64()
        ));
        ensure(ours >= base + TREND_MARGIN_DB, || {
            format!(
                "MR={rate} learned {ours:.2} dB does not beat baseline {base:.2} dB by {TREND_MARGIN_DB} dB; {}",
                lines.join("; ")
            )
        })?;
        learned.push(ours);
    }
    ensure(learned[0] > learned[1], || {
        format!("MR=0.25 not above MR=0.01: {}", lines.join("; "))
    })?;
    Ok(format!(
        "{} images, {} blocks; {}",
        ds.sources.len(),
        ds.len(),
        lines.join("; ")
    ))
}

fn criterion_6() -> Outcome {
    let blocks = corpus_blocks(64);
    let config = TrainConfig {
        iterations: 60,
        pretrain_iterations: 60,
        batch_size: 4,
        pretrain: PretrainPolicy::Auto,
        seed: 6,
        ..TrainConfig::default()
    };
    let initial = build_model(MeasurementRate::R10, config.seed);
    let (pre, _) = pretrain(initial.clone(), &blocks, &config).map_err(|e| e.to_string())?;
    for (i, (a, b)) in pre.conv.iter().zip(&initial.conv).enumerate() {
        let same = a
            .kernels
            .data()
            .iter()
            .zip(b.kernels.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
            && a.bias
                .data()
                .iter()
                .zip(b.bias.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("pretraining changed conv[{i}]"))?;
    }
    ensure(pre.sampling != initial.sampling, || {
        "pretraining left the sampling layer unchanged".into()
    })?;

    let (model, report) = train_with_selection(MeasurementRate::R10, &blocks, &config).map_err(|e| e.to_string())?;
    ensure(report.variants.len() == 4, || {
        format!("{} variants", report.variants.len())
    })?;
    let losses: Vec<f64> = report
        .variants
        .iter()
        .map(|v| v.final_loss.unwrap_or(f64::INFINITY))
        .collect();
    let argmin = (0..losses.len())
        .min_by(|&i, &j| losses[i].total_cmp(&losses[j]))
        .unwrap();
    ensure(report.selected == argmin, || {
        format!("selected {} but minimum is {argmin}: {losses:?}", report.selected)
    })?;
    let returned = dataset_loss(&model, &blocks).map_err(|e| e.to_string())?;
    ensure(returned == losses[argmin], || {
        format!("returned model loss {returned} != {}", losses[argmin])
    })?;
    let summary: Vec<String> = report
        .variants
        .iter()
        .map(|v| format!("{} {:.4e}", v.label(), v.final_loss.unwrap_or(f64::NAN)))
        .collect();
    Ok(format!(
        "conv untouched by pretraining; picked {} of [{}]",
        report.winner().label(),
        summary.join(", ")
    ))
}

fn criterion_7() -> Outcome {
    let test = load_gray(data_dir().join("test").join("camera.png")).map_err(|e| e.to_string())?;
    // 256x256 by 2x2 averaging
    let px: Vec<f64> = (0..256 * 256)
        .map(|i| {
            let (y, x) = (2 * (i / 256), 2 * (i % 256));
            (test.get(y, x) + test.get(y + 1, x) + test.get(y, x + 1) + test.get(y + 1, x + 1)) / 4.0
        })
        .collect();
    let img = GrayImage::new(256, 256, px).map_err(|e| e.to_string())?;
    let model = build_model(MeasurementRate::R25, 0);
    let stats = time_reconstruction(&model, &img, 5).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = reconstruct_image(&model, &img).map_err(|e| e.to_string())?;
    let full = start.elapsed().as_secs_f64();
    ensure((out.height(), out.width()) == (256, 256), || "wrong output size".into())?;
    ensure(stats.median < TIMING_LIMIT_S && full < TIMING_LIMIT_S, || {
        format!("median {:.3}s, with sampling {full:.3}s", stats.median)
    })?;
    Ok(format!(
        "median {:.1} ms (min {:.1}, max {:.1}), with sampling {:.1} ms",
        stats.median * 1e3,
        stats.min * 1e3,
        stats.max * 1e3,
        full * 1e3
    ))
}

fn criterion_8() -> Outcome {
    let blocks = corpus_blocks(40);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = TrainConfig {
        iterations: 200,
        pretrain_iterations: 50,
        batch_size: 3,
        pretrain: PretrainPolicy::Auto,
        seed: 8,
        ..TrainConfig::default()
    };
    let mut files = Vec::new();
    for run in 0..2 {
        let (model, report) =
            train_with_selection(MeasurementRate::R04, &blocks, &config).map_err(|e| e.to_string())?;
        let model_path = tmp.path().join(format!("run{run}.bin"));
        let csv_path = tmp.path().join(format!("run{run}.loss.csv"));
        save_model(&model, &model_path).map_err(|e| e.to_string())?;
        report
            .winner()
            .history
            .write_csv(&csv_path)
            .map_err(|e| e.to_string())?;
        files.push((std::fs::read(&model_path).unwrap(), std::fs::read(&csv_path).unwrap()));
    }
    ensure(files[0].0 == files[1].0, || "model files differ".into())?;
    ensure(files[0].1 == files[1].1, || "loss CSVs differ".into())?;
    Ok(format!(
        "model {} bytes and loss CSV {} bytes identical",
        files[0].0.len(),
        files[0].1.len()
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("JSRNN_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", criterion_1),
        (2, "architecture conformance", criterion_2),
        (3, "data round trip", criterion_3),
        (4, "overfit convergence", criterion_4),
        (7, "timing sanity", criterion_7),
        (6, "pre-training scope and selection", criterion_6),
        (8, "determinism", criterion_8),
        (5, "desk-scale quality trend", criterion_5),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
