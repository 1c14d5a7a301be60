use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    fn code(self) -> u8 {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_pairs(op: &'static str, params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(op, &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if !p.same_shape(g) {
            return Err(Error::shape(op, p.shape(), g.shape()));
        }
    }
    Ok(())
}

/// `p <- p - lr * g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_pairs("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Optimizer memory: step count plus Adam's moment estimates (empty for SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let (first_moment, second_moment) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Self {
            kind,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, adam: AdamHyper) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, grads, lr)?;
                self.step += 1;
                Ok(())
            }
            OptimizerKind::Adam => adam_step(params, grads, self, lr, adam),
        }
    }
}

/// Moments of parameters whose gradient stays zero decay geometrically into
/// the subnormal range, where arithmetic is very slow; flush them to zero.
#[inline]
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// Bias-corrected Adam update; increments `state.step`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    check_pairs("adam_step", params, grads)?;
    if state.kind != OptimizerKind::Adam || state.first_moment.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[state.first_moment.len()]));
    }
    for (p, m) in params.iter().zip(&state.first_moment) {
        if !p.same_shape(m) {
            return Err(Error::shape("adam_step", p.shape(), m.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let step_size = lr / (1.0 - hyper.beta1.powi(t));
    let inv_sqrt_c2 = 1.0 / (1.0 - hyper.beta2.powi(t)).sqrt();
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let p = p.data_mut();
        let n = p.len();
        let (g, m, v) = (&g.data()[..n], &mut m.data_mut()[..n], &mut v.data_mut()[..n]);
        for i in 0..n {
            m[i] = flush(b1 * m[i] + (1.0 - b1) * g[i]);
            v[i] = flush(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
            p[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_c2 + hyper.eps);
        }
    }
    Ok(())
}

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"JSRO";
pub const OPTIMIZER_FORMAT_VERSION: u32 = 1;

impl OptimizerState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(OPTIMIZER_MAGIC);
        w.u32(OPTIMIZER_FORMAT_VERSION);
        w.u8(self.kind.code());
        w.u64(self.step);
        w.u32(self.first_moment.len() as u32);
        for t in self.first_moment.iter().chain(&self.second_moment) {
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "header")? != OPTIMIZER_MAGIC {
            return Err(Error::format("header", "not an optimizer-state file (bad magic)"));
        }
        let version = r.u32("header")?;
        if version != OPTIMIZER_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: OPTIMIZER_FORMAT_VERSION,
            });
        }
        let kind = match r.u8("header")? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            other => return Err(Error::format("header", format!("unknown optimizer code {other}"))),
        };
        let step = r.u64("header")?;
        let count = r.u32("header")? as usize;
        if kind == OptimizerKind::Sgd && count != 0 {
            return Err(Error::format("header", "SGD state carries no moments"));
        }
        let first_moment = (0..count)
            .map(|i| r.tensor(&format!("first_moment[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let second_moment = (0..count)
            .map(|i| r.tensor(&format!("second_moment[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        for (i, (m, v)) in first_moment.iter().zip(&second_moment).enumerate() {
            if !m.same_shape(v) {
                return Err(Error::format(
                    format!("second_moment[{i}]"),
                    "shape differs from first moment",
                ));
            }
        }
        r.expect_end("trailer")?;
        Ok(Self {
            kind,
            step,
            first_moment,
            second_moment,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
