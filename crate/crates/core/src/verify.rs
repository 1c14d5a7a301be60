//! Self-test suite behind `jsrnn verify`: finite-difference gradient checks
//! for every layer type plus data-pipeline round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    extract_test_blocks, extract_training_blocks, reassemble, training_positions, GrayImage, TRAIN_STRIDE,
};
use crate::error::Result;
use crate::model::{build_model, MeasurementRate, Model};
use crate::tensor::gradcheck::{
    grad_check, random_conv, random_dense, uniform_away_from_zero, uniform_tensor, GradCheck, MseCheck, ReluCheck,
};
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {} ({})", self.name, self.detail)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Scale one analytic gradient entry of every layer by 1.01, so the
    /// gradient checks are expected to fail.
    pub perturb_backward: bool,
}

struct Perturbed<'a>(&'a mut dyn GradCheck);

impl GradCheck for Perturbed<'_> {
    fn forward(&self) -> Result<Tensor> {
        self.0.forward()
    }

    fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = self.0.backward(upstream)?;
        if let Some(v) = grads[0].data_mut().first_mut() {
            *v = *v * 1.01 + 1e-3;
        }
        Ok(grads)
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.slots_mut()
    }
}

fn gradient(name: &str, layer: &mut dyn GradCheck, seed: u64, options: VerifyOptions) -> CheckResult {
    let err = if options.perturb_backward {
        grad_check(&mut Perturbed(layer), FD_EPS, seed)
    } else {
        grad_check(layer, FD_EPS, seed)
    };
    match err {
        Ok(err) => CheckResult {
            name: format!("grad {name}"),
            passed: err < GRAD_TOLERANCE,
            detail: format!("max rel err {err:.3e}"),
        },
        Err(e) => CheckResult {
            name: format!("grad {name}"),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Gradient checks for dense, conv at kernel sizes 11, 1 and 7, ReLU and MSE.
pub fn gradient_checks(options: VerifyOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(gradient(
        "dense 7x5 batch 3",
        &mut random_dense(7, 5, Some(3), 10),
        11,
        options,
    ));
    out.push(gradient(
        "dense 4x6 single",
        &mut random_dense(4, 6, None, 12),
        13,
        options,
    ));
    for (ic, oc, k, side, seed) in [
        (1, 4, 11, 13, 20),
        (4, 3, 1, 6, 22),
        (3, 1, 7, 9, 24),
        (2, 1, 11, 12, 26),
        (2, 2, 7, 8, 28),
    ] {
        let name = format!("conv k={k} {ic}->{oc} on {side}x{side}");
        out.push(gradient(
            &name,
            &mut random_conv(ic, oc, k, side, seed),
            seed + 1,
            options,
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut relu = ReluCheck {
        input: uniform_away_from_zero(&[2, 40], 10.0 * FD_EPS, &mut rng),
    };
    out.push(gradient("relu", &mut relu, 31, options));
    let mut mse = MseCheck {
        pred: uniform_tensor(&[4, 9], &mut rng),
        target: uniform_tensor(&[4, 9], &mut rng),
    };
    out.push(gradient("mse", &mut mse, 32, options));
    out
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::from_u8(h, w, &(0..h * w).map(|_| rng.random::<u8>()).collect::<Vec<_>>()).expect("sizes match")
}

/// Test-block round trips, training-block counts and model-file round trip.
pub fn data_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for side in [33, 34, 256, 512] {
        let img = random_image(side, side, &mut rng);
        let result = reassemble(&extract_test_blocks(&img));
        out.push(CheckResult {
            name: format!("blocks round trip {side}x{side}"),
            passed: matches!(&result, Ok(back) if *back == img),
            detail: match result {
                Ok(_) => "exact".into(),
                Err(e) => e.to_string(),
            },
        });
    }

    let img = random_image(256, 256, &mut rng);
    let expected = training_positions(256, TRAIN_STRIDE).pow(2);
    let got = extract_training_blocks(&img, TRAIN_STRIDE).map(|g| g.blocks.len());
    out.push(CheckResult {
        name: "training blocks 256x256 stride 12".into(),
        passed: matches!(got, Ok(n) if n == expected && n == 361),
        detail: format!("{got:?} blocks, expected {expected}"),
    });

    let model = build_model(MeasurementRate::R04, 41);
    let back = Model::from_bytes(&model.to_bytes());
    out.push(CheckResult {
        name: "model file round trip".into(),
        passed: matches!(&back, Ok(m) if m.to_bytes() == model.to_bytes()),
        detail: match back {
            Ok(_) => "bit-exact".into(),
            Err(e) => e.to_string(),
        },
    });
    out
}

pub fn run_all(options: VerifyOptions) -> Vec<CheckResult> {
    let mut out = gradient_checks(options);
    out.extend(data_checks());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_all(VerifyOptions::default());
        for r in &results {
            assert!(r.passed, "{r}");
        }
        assert_eq!(results.iter().filter(|r| r.name.starts_with("grad conv")).count(), 5);
    }

    #[test]
    fn perturbed_backward_fails_every_gradient_check() {
        let results = gradient_checks(VerifyOptions { perturb_backward: true });
        assert!(results.iter().all(|r| !r.passed));
    }
}
