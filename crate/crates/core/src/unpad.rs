//! Padded-batch <-> packed-stream conversion.
//!
//! A packed batch concatenates the real tokens of every sequence into one
//! stream of "batch size 1", with `cu_seqlens` recording where each original
//! sequence starts. Feedforward work then scales with real tokens instead of
//! padded positions.

use crate::attention::{validate_cu, AttentionMask};
use crate::error::{Error, Result};
use crate::tensor::{Buf, Tensor};

/// Concatenated real tokens plus cumulative sequence offsets.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    /// `[total_tokens, feature]` values.
    pub values: Tensor,
    /// Length `B + 1`, starting at 0, strictly increasing.
    pub cu_seqlens: Vec<usize>,
    /// Longest segment.
    pub max_seqlen: usize,
    pub orig_batch: usize,
    pub orig_len: usize,
}

impl PackedBatch {
    pub fn total_tokens(&self) -> usize {
        *self.cu_seqlens.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        validate_cu(&self.cu_seqlens, self.total_tokens())?;
        if self.cu_seqlens.len() != self.orig_batch + 1 {
            return Err(Error::Packing(format!(
                "cu_seqlens has {} entries for batch {}",
                self.cu_seqlens.len(),
                self.orig_batch
            )));
        }
        for w in self.cu_seqlens.windows(2) {
            let n = w[1] - w[0];
            if n > self.orig_len || n > self.max_seqlen {
                return Err(Error::Packing(format!(
                    "segment length {n} exceeds orig_len {} / max_seqlen {}",
                    self.orig_len, self.max_seqlen
                )));
            }
        }
        if self.values.shape().first() != Some(&self.total_tokens()) {
            return Err(Error::Packing(format!(
                "values rows {:?} != total tokens {}",
                self.values.shape(),
                self.total_tokens()
            )));
        }
        Ok(())
    }
}

/// Gather indices (into the flattened `B*L` row space) of the real tokens,
/// plus cu_seqlens. Shared by tensor packing and id packing.
pub fn packing_plan(mask: &AttentionMask) -> Result<(Vec<usize>, Vec<usize>)> {
    if !mask.is_prefix_form() {
        return Err(Error::MaskLayout(
            "interior padding: real tokens must form a prefix of each row".into(),
        ));
    }
    let (b, l) = (mask.batch, mask.len);
    let mut gather = Vec::new();
    let mut cu = vec![0usize];
    for bi in 0..b {
        let n = mask.row(bi).iter().filter(|&&k| k).count();
        if n == 0 {
            return Err(Error::MaskLayout(format!("row {bi} has no real tokens")));
        }
        for i in 0..n {
            gather.push(bi * l + i);
        }
        cu.push(cu.last().unwrap() + n);
    }
    Ok((gather, cu))
}

/// Pack a `[B, L, F]` batch down to its real tokens.
pub fn unpad(batch: &Tensor, mask: &AttentionMask) -> Result<PackedBatch> {
    let shape = batch.shape().to_vec();
    let [b, l, f] = shape[..] else {
        return Err(Error::ShapeMismatch {
            context: "unpad",
            left: shape,
            right: vec![0, 0, 0],
        });
    };
    if mask.batch != b || mask.len != l {
        return Err(Error::ShapeMismatch {
            context: "unpad mask",
            left: vec![mask.batch, mask.len],
            right: vec![b, l],
        });
    }
    let (gather, cu) = packing_plan(mask)?;
    let total = gather.len();
    let max_seqlen = cu.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
    let values = match batch.buf() {
        Buf::F32(v) => {
            let mut out = Vec::with_capacity(total * f);
            for &g in &gather {
                out.extend_from_slice(&v[g * f..(g + 1) * f]);
            }
            Tensor::from_f32(&[total, f], out, batch.dtype())?
        }
        Buf::F64(v) => {
            let mut out = Vec::with_capacity(total * f);
            for &g in &gather {
                out.extend_from_slice(&v[g * f..(g + 1) * f]);
            }
            Tensor::from_f64(&[total, f], out, batch.dtype())?
        }
    };
    Ok(PackedBatch {
        values,
        cu_seqlens: cu,
        max_seqlen,
        orig_batch: b,
        orig_len: l,
    })
}

/// Restore a packed batch to `[B, L, F]`, zero-filling padding positions.
pub fn pad(packed: &PackedBatch) -> Result<Tensor> {
    packed.validate()?;
    let shape = packed.values.shape().to_vec();
    let [_, f] = shape[..] else {
        return Err(Error::ShapeMismatch {
            context: "pad",
            left: shape,
            right: vec![0, 0],
        });
    };
    let (b, l) = (packed.orig_batch, packed.orig_len);
    match packed.values.buf() {
        Buf::F32(v) => {
            let mut out = vec![0.0f32; b * l * f];
            for (bi, w) in packed.cu_seqlens.windows(2).enumerate() {
                for (i, row) in (w[0]..w[1]).enumerate() {
                    out[(bi * l + i) * f..(bi * l + i + 1) * f]
                        .copy_from_slice(&v[row * f..(row + 1) * f]);
                }
            }
            Tensor::from_f32(&[b, l, f], out, packed.values.dtype())
        }
        Buf::F64(v) => {
            let mut out = vec![0.0f64; b * l * f];
            for (bi, w) in packed.cu_seqlens.windows(2).enumerate() {
                for (i, row) in (w[0]..w[1]).enumerate() {
                    out[(bi * l + i) * f..(bi * l + i + 1) * f]
                        .copy_from_slice(&v[row * f..(row + 1) * f]);
                }
            }
            Tensor::from_f64(&[b, l, f], out, packed.values.dtype())
        }
    }
}

/// Padding-waste accounting for a mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaddingStats {
    /// Padded positions / total positions.
    pub pad_fraction: f64,
    /// Fraction of feedforward FLOPs skipped by unpadding. Feedforward work
    /// is linear in token count, so this equals `pad_fraction`.
    pub ff_flops_saved_fraction: f64,
}

pub fn padding_stats(mask: &AttentionMask) -> PaddingStats {
    let total = mask.batch * mask.len;
    let real = mask.real_tokens();
    let pad_fraction = (total - real) as f64 / total as f64;
    PaddingStats {
        pad_fraction,
        ff_flops_saved_fraction: pad_fraction,
    }
}
