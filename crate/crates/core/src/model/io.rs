//! Versioned binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "JSRN" | version u32 | rate f64 | seed u64 | tensor count u32
//! then per tensor, in `Model::params` order:
//!     rank u32 | dims u64 * rank | values f64 * product(dims)
//! ```

use std::fs;
use std::path::Path;

use super::{layer_shapes, MeasurementRate, Model, PARAM_TENSORS};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, DenseParams};

pub const MODEL_MAGIC: &[u8; 4] = b"JSRN";
pub const MODEL_FORMAT_VERSION: u32 = 1;

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_FORMAT_VERSION);
        w.f64(self.rate.value());
        w.u64(self.seed);
        w.u32(PARAM_TENSORS as u32);
        for t in self.params() {
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader::new(bytes);
        if r.take(4, "header")? != MODEL_MAGIC {
            return Err(Error::format("header", "not a model file (bad magic)"));
        }
        let version = r.u32("header")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let rate = MeasurementRate::from_value(r.f64("header")?).map_err(|e| Error::format("header", e.to_string()))?;
        let seed = r.u64("header")?;
        let count = r.u32("header")? as usize;
        if count != PARAM_TENSORS {
            return Err(Error::format(
                "header",
                format!("expected {PARAM_TENSORS} tensors, found {count}"),
            ));
        }

        let names = Model::param_names();
        let expected = layer_shapes(rate);
        let mut tensors = Vec::with_capacity(PARAM_TENSORS);
        for (i, name) in names.iter().enumerate() {
            let t = r.tensor(name)?;
            let (w, b) = &expected[i / 2];
            let want = if i % 2 == 0 { w } else { b };
            if t.shape() != want.as_slice() {
                return Err(Error::format(
                    name.as_str(),
                    format!("shape {:?} does not match {want:?} for rate {rate}", t.shape()),
                ));
            }
            tensors.push(t);
        }
        r.expect_end("trailer")?;

        let mut it = tensors.into_iter();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let dense: Vec<DenseParams> = (0..4)
            .map(|_| {
                let (weight, bias) = pair();
                DenseParams { weight, bias }
            })
            .collect();
        let conv: Vec<ConvParams> = (0..6)
            .map(|_| {
                let (kernels, bias) = pair();
                let padding = kernels.shape()[2] / 2;
                ConvParams { kernels, bias, padding }
            })
            .collect();
        Ok(Model::assemble(rate, seed, dense, conv))
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes)
}
