//! Post-training FP16 quantization of checkpoints. Storage only: weights
//! are widened back to f32 for compute.

use std::fmt::Write as _;

use crate::checkpoint::{model_from_checkpoint, model_size_bytes, Checkpoint, TensorData};
use crate::error::{Error, Result};
use crate::f16::{f16_to_f32, f32_to_f16};
use crate::world_model::WorldModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorQuantStats {
    pub name: String,
    pub numel: usize,
    pub max_abs_err: f64,
    /// Over nonzero inputs.
    pub max_rel_err: f64,
    pub overflow: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantReport {
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub tensors: Vec<TensorQuantStats>,
    pub overflow_count: usize,
}

impl QuantReport {
    pub fn ratio(&self) -> f64 {
        self.bytes_after as f64 / self.bytes_before as f64
    }

    pub fn max_abs_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs_err).fold(0.0, f64::max)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    /// `tensor,numel,max_abs_err,max_rel_err,overflow` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tensor,numel,max_abs_err,max_rel_err,overflow\n");
        for t in &self.tensors {
            let _ = writeln!(s, "{},{},{:e},{:e},{}", t.name, t.numel, t.max_abs_err, t.max_rel_err, t.overflow);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "bytes_before={}\nbytes_after={}\nratio={:.6}\nmax_abs_err={:e}\nmax_rel_err={:e}\noverflow_count={}\n",
            self.bytes_before,
            self.bytes_after,
            self.ratio(),
            self.max_abs_err(),
            self.max_rel_err(),
            self.overflow_count
        )
    }
}

/// Converts every f32 tensor to binary16 (round to nearest even, clamped to
/// ±65504). f16 tensors pass through unchanged. Metadata is preserved.
pub fn to_fp16(ck: &Checkpoint) -> Result<(Checkpoint, QuantReport)> {
    let mut out = ck.clone();
    let mut stats = Vec::with_capacity(ck.tensors.len());
    let mut overflow_count = 0;
    for t in &mut out.tensors {
        let TensorData::F32(values) = &t.data else {
            continue;
        };
        let mut bits = Vec::with_capacity(values.len());
        let mut s = TensorQuantStats {
            name: t.name.clone(),
            numel: values.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            overflow: 0,
        };
        for &x in values {
            let n = f32_to_f16(x).ok_or_else(|| Error::NonFinite(format!("tensor {:?} holds NaN", t.name)))?;
            if n.clamped {
                s.overflow += 1;
            }
            let err = (f16_to_f32(n.bits) as f64 - x as f64).abs();
            if err.is_finite() {
                s.max_abs_err = s.max_abs_err.max(err);
                if x != 0.0 {
                    s.max_rel_err = s.max_rel_err.max(err / (x as f64).abs());
                }
            }
            bits.push(n.bits);
        }
        overflow_count += s.overflow;
        t.data = TensorData::F16(bits);
        stats.push(s);
    }
    let report = QuantReport {
        bytes_before: model_size_bytes(ck),
        bytes_after: model_size_bytes(&out),
        tensors: stats,
        overflow_count,
    };
    Ok((out, report))
}

/// Widens every f16 tensor back to f32.
pub fn dequantize(ck: &Checkpoint) -> Checkpoint {
    let mut out = ck.clone();
    for t in &mut out.tensors {
        if let TensorData::F16(_) = t.data {
            t.data = TensorData::F32(t.data.to_f32());
        }
    }
    out
}

/// Loads an f16 (or f32) checkpoint as an f32 model.
pub fn dequantize_inference(ck: &Checkpoint) -> Result<WorldModel<f32>> {
    model_from_checkpoint(ck)
}
