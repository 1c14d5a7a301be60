//! Whole-image evaluation: PSNR of learned and baseline reconstructions at
//! each measurement rate, and reconstruction timing.

mod baseline;
mod report;

pub use baseline::{GaussianBaseline, BASELINE_LAMBDA};
pub use report::{EvalEntry, EvalReport, ReportMetadata};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::data::{extract_test_blocks, list_images, load_gray, reassemble, BlockGrid, GrayImage};
use crate::error::{Error, Result};
use crate::model::{BlockVector, MeasurementRate, Model, BLOCK_LEN};
use crate::tensor::Tensor;

pub const METHOD_LEARNED: &str = "learned";
pub const METHOD_BASELINE: &str = "gaussian_ls";

/// `10 log10(1 / MSE)` on `[0, 1]` images; `+inf` for identical images.
pub fn psnr(reference: &GrayImage, candidate: &GrayImage) -> Result<f64> {
    if (reference.height(), reference.width()) != (candidate.height(), candidate.width()) {
        return Err(Error::shape(
            "psnr",
            &[reference.height(), reference.width()],
            &[candidate.height(), candidate.width()],
        ));
    }
    let sum: f64 = reference
        .pixels()
        .iter()
        .zip(candidate.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mse = sum / reference.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn stack_blocks(grid: &BlockGrid) -> Tensor {
    Tensor::stack(grid.blocks.iter().map(BlockVector::as_tensor)).expect("grid has at least one block")
}

fn with_blocks(grid: &BlockGrid, values: &Tensor) -> Result<BlockGrid> {
    let blocks = (0..grid.blocks.len())
        .map(|i| BlockVector::new(values.outer(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockGrid { blocks, ..grid.clone() })
}

/// Measurements of every test block of `image`.
pub fn measure_image(model: &Model, image: &GrayImage) -> Result<(BlockGrid, Tensor)> {
    let grid = extract_test_blocks(image);
    let y = model.sample_batch(&stack_blocks(&grid))?;
    Ok((grid, y))
}

/// Rebuilds the image from its block measurements.
pub fn reconstruct_from_measurements(model: &Model, grid: &BlockGrid, y: &Tensor) -> Result<GrayImage> {
    let recon = model.reconstruct_batch(y)?;
    reassemble(&with_blocks(grid, &recon)?)
}

/// Full pipeline: block, sample, reconstruct, stitch.
pub fn reconstruct_image(model: &Model, image: &GrayImage) -> Result<GrayImage> {
    let (grid, y) = measure_image(model, image)?;
    reconstruct_from_measurements(model, &grid, &y)
}

pub fn baseline_reconstruct_image(baseline: &GaussianBaseline, image: &GrayImage) -> Result<GrayImage> {
    let grid = extract_test_blocks(image);
    let y = baseline.measure_batch(&stack_blocks(&grid))?;
    reassemble(&with_blocks(&grid, &baseline.reconstruct_batch(&y)?)?)
}

#[derive(Clone, Debug)]
pub struct TimingStats {
    pub samples: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Wall-clock seconds of whole-image reconstruction from precomputed
/// measurements, over `repeats` runs.
pub fn time_reconstruction(model: &Model, image: &GrayImage, repeats: usize) -> Result<TimingStats> {
    if repeats < 3 {
        return Err(Error::Config(format!("timing needs at least 3 repeats, got {repeats}")));
    }
    let (grid, y) = measure_image(model, image)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = reconstruct_from_measurements(model, &grid, &y)?;
        samples.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(TimingStats {
        median,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        samples,
    })
}

pub fn model_hash(model: &Model) -> String {
    hex::encode(Sha256::digest(model.to_bytes()))
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Rates to evaluate; defaults to every rate that has a model.
    pub rates: Option<Vec<MeasurementRate>>,
    /// Seed of the Gaussian baseline matrices.
    pub baseline_seed: u64,
    /// Skip the Gaussian baseline rows.
    pub skip_baseline: bool,
}

/// Named images evaluated against every requested rate.
pub fn evaluate_images(
    models: &BTreeMap<MeasurementRate, Model>,
    images: &[(String, GrayImage)],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::Config("no models to evaluate".into()));
    }
    if images.is_empty() {
        return Err(Error::Data("no test images".into()));
    }
    let rates: Vec<MeasurementRate> = match &options.rates {
        Some(r) => {
            let mut r = r.clone();
            r.sort();
            r.dedup();
            if let Some(missing) = r.iter().find(|rate| !models.contains_key(rate)) {
                return Err(Error::Config(format!("no model for measurement rate {missing}")));
            }
            r
        }
        None => models.keys().copied().collect(),
    };
    let baselines: BTreeMap<MeasurementRate, GaussianBaseline> = if options.skip_baseline {
        BTreeMap::new()
    } else {
        rates
            .iter()
            .map(|&r| (r, GaussianBaseline::new(r, options.baseline_seed)))
            .collect()
    };

    let mut entries = Vec::new();
    for (name, image) in images {
        for rate in &rates {
            let model = &models[rate];
            let (grid, y) = measure_image(model, image)?;
            let start = Instant::now();
            let recon = reconstruct_from_measurements(model, &grid, &y)?;
            let seconds = start.elapsed().as_secs_f64();
            entries.push(EvalEntry {
                image: name.clone(),
                rate: *rate,
                method: METHOD_LEARNED.into(),
                psnr_db: psnr(image, &recon)?,
                recon_seconds: seconds,
            });

            if let Some(baseline) = baselines.get(rate) {
                let grid = extract_test_blocks(image);
                let y = baseline.measure_batch(&stack_blocks(&grid))?;
                let start = Instant::now();
                let recon = reassemble(&with_blocks(&grid, &baseline.reconstruct_batch(&y)?)?)?;
                let seconds = start.elapsed().as_secs_f64();
                entries.push(EvalEntry {
                    image: name.clone(),
                    rate: *rate,
                    method: METHOD_BASELINE.into(),
                    psnr_db: psnr(image, &recon)?,
                    recon_seconds: seconds,
                });
            }
        }
    }

    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(EvalReport {
        entries,
        metadata: ReportMetadata {
            model_hashes: rates.iter().map(|r| (*r, model_hash(&models[r]))).collect(),
            seed: options.baseline_seed,
            timestamp,
        },
    })
}

/// Evaluates every loadable image in `test_dir` (file-name order).
pub fn evaluate(
    models: &BTreeMap<MeasurementRate, Model>,
    test_dir: impl AsRef<Path>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let test_dir = test_dir.as_ref();
    let mut images = Vec::new();
    for path in list_images(test_dir)? {
        // unreadable files are not test images
        if let Ok(img) = load_gray(&path) {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            images.push((name, img));
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no loadable test images in {}",
            test_dir.display()
        )));
    }
    evaluate_images(models, &images, options)
}

/// Blocks of `image` flattened into a `[blocks, 1089]` tensor, for callers
/// that want to drive the model directly.
pub fn image_blocks(image: &GrayImage) -> Tensor {
    let t = stack_blocks(&extract_test_blocks(image));
    debug_assert_eq!(t.shape()[1], BLOCK_LEN);
    t
}
