use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use jsrnn::data::{build_dataset, load_gray, write_pgm, TRAIN_STRIDE};
use jsrnn::eval::{self, EvalOptions};
use jsrnn::model::{load_model, save_model, MODEL_MAGIC};
use jsrnn::train::{train_variants, OptimizerKind, PretrainPolicy, TrainConfig, TrainControl};
use jsrnn::verify::{run_all, VerifyOptions};
use jsrnn::{MeasurementRate, Model};

use crate::config::Layers;
use crate::{CliError, EvaluateArgs, ReconstructArgs, TrainArgs, VerifyArgs};

static STOP: AtomicBool = AtomicBool::new(false);

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn fmt_loss(x: f64) -> String {
    if x != 0.0 && !(1e-4..1e4).contains(&x.abs()) {
        format!("{x:.4e}")
    } else {
        format!("{x:.6}")
    }
}

fn optimizers(choice: &str) -> Result<Vec<OptimizerKind>, CliError> {
    match choice {
        "select" => Ok(vec![OptimizerKind::Adam, OptimizerKind::Sgd]),
        other => other
            .parse()
            .map(|k| vec![k])
            .map_err(|_| CliError::Usage(format!("unknown optimizer {other:?}; expected sgd, adam or select"))),
    }
}

pub fn train(args: &TrainArgs, layers: &Layers) -> Result<(), CliError> {
    let rate: MeasurementRate = layers
        .require::<String>("rate", args.rate.clone())?
        .parse()
        .map_err(|e: jsrnn::Error| CliError::Usage(e.to_string()))?;
    let data_dir: PathBuf = layers.require("data_dir", args.data_dir.clone())?;
    let out: PathBuf = layers.require("out", args.out.clone())?;
    let defaults = TrainConfig::default();
    let optimizer_choice: String =
        layers.get_or("optimizer", args.optimizer.clone(), defaults.optimizer.to_string())?;
    let pretrain: PretrainPolicy = layers
        .get_or("pretrain", args.pretrain.clone(), defaults.pretrain.to_string())?
        .parse()
        .map_err(|e: jsrnn::Error| CliError::Usage(e.to_string()))?;
    let config = TrainConfig {
        learning_rate: layers.get_or("learning_rate", args.learning_rate, defaults.learning_rate)?,
        iterations: layers.get_or("iterations", args.iterations, defaults.iterations)?,
        batch_size: layers.get_or("batch", args.batch, defaults.batch_size)?,
        pretrain,
        pretrain_iterations: layers.get_or(
            "pretrain_iterations",
            args.pretrain_iterations,
            defaults.pretrain_iterations,
        )?,
        seed: layers.get_or("seed", args.seed, defaults.seed)?,
        ..defaults
    };
    let kinds = optimizers(&optimizer_choice)?;
    let loss_csv: PathBuf = layers.get_or("loss_csv", args.loss_csv.clone(), with_suffix(&out, ".loss.csv"))?;
    let quiet = args.quiet;
    config.validate()?;

    let dataset = build_dataset(&data_dir, TRAIN_STRIDE, config.seed)?;
    for (path, reason) in &dataset.skipped {
        eprintln!("warning: skipped {}: {reason}", path.display());
    }
    eprintln!(
        "training MR={rate} on {} blocks from {} images ({} iterations, batch {})",
        dataset.len(),
        dataset.sources.len(),
        config.iterations,
        config.batch_size
    );

    // second Ctrl-C exits without a checkpoint
    let _ = ctrlc::set_handler(|| {
        if STOP.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
    });
    let mut log = |i: usize, loss: f64| {
        if !quiet {
            eprintln!("iter {i:>8}  loss {}", fmt_loss(loss));
        }
    };
    let mut control = TrainControl {
        stop: Some(&STOP),
        on_log: Some(&mut log),
    };
    let (outcome, report) = train_variants(rate, &dataset.blocks, &config, &kinds, &mut control)?;

    for (i, v) in report.variants.iter().enumerate() {
        let mark = if i == report.selected { "*" } else { " " };
        match (v.final_loss, v.diverged_at) {
            (Some(loss), _) => println!("{mark} {:<20} final loss {}", v.label(), fmt_loss(loss)),
            (None, Some(it)) => println!("{mark} {:<20} diverged at iteration {it}", v.label()),
            _ => println!("{mark} {:<20} no result", v.label()),
        }
    }

    save_model(&outcome.model, &out)?;
    outcome.state.save(with_suffix(&out, ".opt"))?;
    outcome.history.write_csv(&loss_csv)?;
    if outcome.interrupted {
        println!(
            "interrupted after {} iterations; checkpoint written to {}",
            outcome.completed_iterations,
            out.display()
        );
    } else {
        println!("model written to {}", out.display());
    }
    Ok(())
}

pub fn reconstruct(args: &ReconstructArgs, layers: &Layers) -> Result<(), CliError> {
    let model_path: PathBuf = layers.require("model", args.model.clone())?;
    let input: PathBuf = layers.require("in", args.input.clone())?;
    let out: PathBuf = layers.require("out", args.out.clone())?;
    let model = load_model(&model_path)?;
    let image = load_gray(&input)?;
    let recon = eval::reconstruct_image(&model, &image)?;
    write_pgm(&recon, &out)?;
    println!(
        "MR={} {}x{} -> {}",
        model.rate,
        recon.width(),
        recon.height(),
        out.display()
    );
    Ok(())
}

fn has_model_magic(path: &Path) -> bool {
    let mut head = [0u8; 4];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| head == *MODEL_MAGIC)
        .unwrap_or(false)
}

/// Every model file in `dir`, keyed by its embedded rate.
pub fn load_models(dir: &Path) -> Result<BTreeMap<MeasurementRate, Model>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| jsrnn::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_model_magic(p))
        .collect();
    paths.sort();
    let mut models = BTreeMap::new();
    let mut origin: BTreeMap<MeasurementRate, PathBuf> = BTreeMap::new();
    for path in paths {
        let model = load_model(&path)?;
        if let Some(prev) = origin.get(&model.rate) {
            return Err(CliError::Usage(format!(
                "two models for MR={}: {} and {}",
                model.rate,
                prev.display(),
                path.display()
            )));
        }
        origin.insert(model.rate, path);
        models.insert(model.rate, model);
    }
    if models.is_empty() {
        return Err(CliError::Usage(format!("no model files in {}", dir.display())));
    }
    Ok(models)
}

pub fn evaluate(args: &EvaluateArgs, layers: &Layers) -> Result<(), CliError> {
    let models_dir: PathBuf = layers.require("models", args.models.clone())?;
    let test_dir: PathBuf = layers.require("test_dir", args.test_dir.clone())?;
    let report_path: PathBuf = layers.require("report", args.report.clone())?;
    let options = EvalOptions {
        baseline_seed: layers.get_or("seed", args.seed, 0)?,
        ..EvalOptions::default()
    };
    let models = load_models(&models_dir)?;
    let report = eval::evaluate(&models, &test_dir, &options)?;
    report.write_csv(&report_path)?;
    let table = report.to_table();
    let table_path = report_path.with_extension("txt");
    std::fs::write(&table_path, &table).map_err(|e| jsrnn::Error::io(&table_path, e))?;
    print!("{table}");
    for rate in report.rates() {
        let learned = report.mean_psnr(rate, eval::METHOD_LEARNED).unwrap_or(f64::NAN);
        match report.mean_psnr(rate, eval::METHOD_BASELINE) {
            Some(b) => println!("MR={rate} mean PSNR {learned:.2} dB (baseline {b:.2} dB)"),
            None => println!("MR={rate} mean PSNR {learned:.2} dB"),
        }
    }
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<(), CliError> {
    let results = run_all(VerifyOptions {
        perturb_backward: args.perturb_backward,
    });
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Checks(failed));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
