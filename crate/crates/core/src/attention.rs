//! Multi-head self-attention with ALiBi, in three interchangeable paths.
//!
//! * `mhsa_naive` materializes the full L x L score matrix per head.
//! * `mhsa_tiled` streams over key blocks with an online softmax (running
//!   max, rescaled numerator and denominator) and never holds more than
//!   `L x key_block` scores per head.
//! * `mhsa_unpadded` runs on a packed token stream, one segment at a time,
//!   so tokens never attend across sequence boundaries.
//!
//! All three compute the same function: scores are `QK^T / sqrt(d)` plus the
//! symmetric ALiBi penalty, masked key positions are -inf, and no dropout is
//! applied to attention probabilities unless the baseline-BERT flag asks for
//! it (naive path only).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alibi::AlibiSlopes;
use crate::error::{Error, Result};
use crate::instrument;
use crate::tape::{Node, Op, Tape, VarId};
use crate::tensor::{randn_tensor, Buf, Dtype, Real, Tensor};

/// Per-sequence key/padding mask; `true` marks a real token.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub batch: usize,
    pub len: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, len: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * len {
            return Err(Error::ShapeMismatch {
                context: "attention mask",
                left: vec![keep.len()],
                right: vec![batch, len],
            });
        }
        for b in 0..batch {
            if !keep[b * len..(b + 1) * len].iter().any(|&k| k) {
                return Err(Error::DegenerateSlice);
            }
        }
        Ok(AttentionMask { batch, len, keep })
    }

    /// All-real mask.
    pub fn full(batch: usize, len: usize) -> Self {
        AttentionMask {
            batch,
            len,
            keep: vec![true; batch * len],
        }
    }

    /// Right-padded mask from per-sequence lengths.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Result<Self> {
        let mut keep = Vec::with_capacity(lengths.len() * len);
        for &n in lengths {
            if n == 0 || n > len {
                return Err(Error::MaskLayout(format!(
                    "sequence length {n} not in 1..={len}"
                )));
            }
            keep.extend(std::iter::repeat_n(true, n));
            keep.extend(std::iter::repeat_n(false, len - n));
        }
        AttentionMask::new(lengths.len(), len, keep)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.keep[b * self.len..(b + 1) * self.len]
    }

    /// True when every row is `true^k false^(L-k)` (right padding only).
    pub fn is_prefix_form(&self) -> bool {
        (0..self.batch).all(|b| {
            let row = self.row(b);
            let first_pad = row.iter().position(|&k| !k).unwrap_or(self.len);
            row[first_pad..].iter().all(|&k| !k)
        })
    }

    pub fn real_tokens(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Projection weights for one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub n_heads: usize,
}

impl AttentionWeights {
    pub fn init(hidden: usize, n_heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || !hidden.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "hidden {hidden} not divisible by n_heads {n_heads}"
            )));
        }
        let w = |rng: &mut ChaCha8Rng| randn_tensor(&[hidden, hidden], std, Dtype::F32, rng);
        Ok(AttentionWeights {
            wq: w(rng),
            bq: Tensor::zeros(&[hidden], Dtype::F32),
            wk: w(rng),
            bk: Tensor::zeros(&[hidden], Dtype::F32),
            wv: w(rng),
            bv: Tensor::zeros(&[hidden], Dtype::F32),
            wo: w(rng),
            bo: Tensor::zeros(&[hidden], Dtype::F32),
            n_heads,
        })
    }

    pub fn hidden(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.n_heads
    }
}

/// Tape handles for one attention sublayer's weights.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
    pub n_heads: usize,
}

impl AttnVars {
    pub fn register(tape: &mut Tape, w: &AttentionWeights, trainable: bool) -> AttnVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.input(t.clone())
            }
        };
        AttnVars {
            wq: reg(&w.wq),
            bq: reg(&w.bq),
            wk: reg(&w.wk),
            bk: reg(&w.bk),
            wv: reg(&w.wv),
            bv: reg(&w.bv),
            wo: reg(&w.wo),
            bo: reg(&w.bo),
            n_heads: w.n_heads,
        }
    }
}

pub(crate) struct ProbDrop {
    pub keep: Vec<bool>,
    pub scale: f64,
}

pub(crate) enum AttnKind {
    Naive {
        probs: Buf,
        drop: Option<ProbDrop>,
    },
    Tiled {
        key_block: usize,
        row_max: Vec<f64>,
        row_denom: Vec<f64>,
    },
    Packed {
        cu: Vec<usize>,
        probs: Buf,
    },
}

pub(crate) struct AttnNode {
    pub q: VarId,
    pub k: VarId,
    pub v: VarId,
    pub heads: usize,
    pub scale: f64,
    pub slopes: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    pub batch: usize,
    pub len: usize,
    pub kind: AttnKind,
}

fn check_heads(hidden: usize, heads: usize, slopes: &[f64]) -> Result<usize> {
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "hidden {hidden} not divisible by n_heads {heads}"
        )));
    }
    if slopes.len() != heads {
        return Err(Error::Config(format!(
            "{} slopes for {heads} heads",
            slopes.len()
        )));
    }
    Ok(hidden / heads)
}

impl Tape {
    /// Multi-head attention core, naive path: per head, the full `L x L`
    /// score matrix is materialized, biased, softmaxed and applied to V.
    #[allow(clippy::too_many_arguments)]
    pub fn attn_naive(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        slopes: &[f64],
        mask: &AttentionMask,
        prob_dropout: f64,
    ) -> Result<VarId> {
        let carrier = self.same_carrier(&[q, k, v], "attention")?;
        let shape = self.value(q).shape().to_vec();
        let [b, l, h] = shape[..] else {
            return Err(Error::ShapeMismatch {
                context: "attn_naive",
                left: shape,
                right: vec![0, 0, 0],
            });
        };
        let d = check_heads(h, heads, slopes)?;
        if mask.batch != b || mask.len != l {
            return Err(Error::ShapeMismatch {
                context: "attention mask",
                left: vec![mask.batch, mask.len],
                right: vec![b, l],
            });
        }
        let scale = 1.0 / (d as f64).sqrt();
        let drop = if self.is_training() && prob_dropout > 0.0 {
            let n = b * heads * l * l;
            let keep: Vec<bool> = (0..n)
                .map(|_| self.rng_mut().gen::<f64>() >= prob_dropout)
                .collect();
            Some(ProbDrop {
                keep,
                scale: 1.0 / (1.0 - prob_dropout),
            })
        } else {
            None
        };
        let (value, probs) = match carrier {
            Dtype::F64 => {
                let (o, p) = naive_fwd(
                    self.value(q).as_f64(),
                    self.value(k).as_f64(),
                    self.value(v).as_f64(),
                    b,
                    l,
                    h,
                    heads,
                    scale,
                    slopes,
                    Some(mask.keep()),
                    drop.as_ref(),
                )?;
                (Tensor::from_f64(&[b, l, h], o, Dtype::F64)?, Buf::F64(p))
            }
            _ => {
                let (o, p) = naive_fwd(
                    self.value(q).as_f32(),
                    self.value(k).as_f32(),
                    self.value(v).as_f32(),
                    b,
                    l,
                    h,
                    heads,
                    scale,
                    slopes,
                    Some(mask.keep()),
                    drop.as_ref(),
                )?;
                (Tensor::from_f32(&[b, l, h], o, Dtype::F32)?, Buf::F32(p))
            }
        };
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let node = AttnNode {
            q,
            k,
            v,
            heads,
            scale,
            slopes: slopes.to_vec(),
            mask: Some(mask.keep().to_vec()),
            batch: b,
            len: l,
            kind: AttnKind::Naive { probs, drop },
        };
        let _ = d;
        Ok(self.push_op(value, needs, Op::Attn(Box::new(node))))
    }

    /// Multi-head attention core, tiled path: streams over key blocks with a
    /// running max and rescaled partial sums. Mathematically identical to the
    /// naive path; peak score-buffer memory is `L x key_block` per head.
    #[allow(clippy::too_many_arguments)]
    pub fn attn_tiled(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        slopes: &[f64],
        mask: &AttentionMask,
        key_block: usize,
    ) -> Result<VarId> {
        if key_block == 0 {
            return Err(Error::Config("key_block must be >= 1".into()));
        }
        let carrier = self.same_carrier(&[q, k, v], "attention")?;
        let shape = self.value(q).shape().to_vec();
        let [b, l, h] = shape[..] else {
            return Err(Error::ShapeMismatch {
                context: "attn_tiled",
                left: shape,
                right: vec![0, 0, 0],
            });
        };
        check_heads(h, heads, slopes)?;
        if mask.batch != b || mask.len != l {
            return Err(Error::ShapeMismatch {
                context: "attention mask",
                left: vec![mask.batch, mask.len],
                right: vec![b, l],
            });
        }
        let scale = 1.0 / ((h / heads) as f64).sqrt();
        let (value, row_max, row_denom) = match carrier {
            Dtype::F64 => {
                let (o, m, den) = tiled_fwd(
                    self.value(q).as_f64(),
                    self.value(k).as_f64(),
                    self.value(v).as_f64(),
                    b,
                    l,
                    h,
                    heads,
                    scale,
                    slopes,
                    mask.keep(),
                    key_block,
                )?;
                (Tensor::from_f64(&[b, l, h], o, Dtype::F64)?, m, den)
            }
            _ => {
                let (o, m, den) = tiled_fwd(
                    self.value(q).as_f32(),
                    self.value(k).as_f32(),
                    self.value(v).as_f32(),
                    b,
                    l,
                    h,
                    heads,
                    scale,
                    slopes,
                    mask.keep(),
                    key_block,
                )?;
                (Tensor::from_f32(&[b, l, h], o, Dtype::F32)?, m, den)
            }
        };
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let node = AttnNode {
            q,
            k,
            v,
            heads,
            scale,
            slopes: slopes.to_vec(),
            mask: Some(mask.keep().to_vec()),
            batch: b,
            len: l,
            kind: AttnKind::Tiled {
                key_block,
                row_max,
                row_denom,
            },
        };
        Ok(self.push_op(value, needs, Op::Attn(Box::new(node))))
    }

    /// Multi-head attention core on a packed stream: attention is computed
    /// independently per segment delimited by `cu_seqlens`, with within-
    /// segment ALiBi positions.
    pub fn attn_packed(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        slopes: &[f64],
        cu_seqlens: &[usize],
    ) -> Result<VarId> {
        let carrier = self.same_carrier(&[q, k, v], "attention")?;
        let shape = self.value(q).shape().to_vec();
        let [t, h] = shape[..] else {
            return Err(Error::ShapeMismatch {
                context: "attn_packed",
                left: shape,
                right: vec![0, 0],
            });
        };
        check_heads(h, heads, slopes)?;
        validate_cu(cu_seqlens, t)?;
        let scale = 1.0 / ((h / heads) as f64).sqrt();
        let (value, probs) = match carrier {
            Dtype::F64 => {
                let (o, p) = packed_fwd(
                    self.value(q).as_f64(),
                    self.value(k).as_f64(),
                    self.value(v).as_f64(),
                    t,
                    h,
                    heads,
                    scale,
                    slopes,
                    cu_seqlens,
                )?;
                (Tensor::from_f64(&[t, h], o, Dtype::F64)?, Buf::F64(p))
            }
            _ => {
                let (o, p) = packed_fwd(
                    self.value(q).as_f32(),
                    self.value(k).as_f32(),
                    self.value(v).as_f32(),
                    t,
                    h,
                    heads,
                    scale,
                    slopes,
                    cu_seqlens,
                )?;
                (Tensor::from_f32(&[t, h], o, Dtype::F32)?, Buf::F32(p))
            }
        };
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let node = AttnNode {
            q,
            k,
            v,
            heads,
            scale,
            slopes: slopes.to_vec(),
            mask: None,
            batch: cu_seqlens.len() - 1,
            len: t,
            kind: AttnKind::Packed {
                cu: cu_seqlens.to_vec(),
                probs,
            },
        };
        Ok(self.push_op(value, needs, Op::Attn(Box::new(node))))
    }
}

pub(crate) fn validate_cu(cu: &[usize], total: usize) -> Result<()> {
    if cu.len() < 2 || cu[0] != 0 {
        return Err(Error::Packing(format!(
            "cu_seqlens must start at 0, got {cu:?}"
        )));
    }
    for w in cu.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Packing(format!(
                "cu_seqlens not strictly increasing: {cu:?}"
            )));
        }
    }
    if *cu.last().unwrap() != total {
        return Err(Error::Packing(format!(
            "cu_seqlens end {} != total tokens {total}",
            cu.last().unwrap()
        )));
    }
    Ok(())
}

// ── full sublayer ops: projections + core + output projection ───────

/// Naive-path attention sublayer: Q/K/V projection, biased softmax
/// attention, head concat and output projection.
pub fn mhsa_naive(
    tape: &mut Tape,
    x: VarId,
    w: &AttnVars,
    slopes: &AlibiSlopes,
    mask: &AttentionMask,
    prob_dropout: f64,
) -> Result<VarId> {
    let q = tape.linear(x, w.wq, Some(w.bq), false)?;
    let k = tape.linear(x, w.wk, Some(w.bk), false)?;
    let v = tape.linear(x, w.wv, Some(w.bv), false)?;
    let core = tape.attn_naive(q, k, v, w.n_heads, &slopes.slopes, mask, prob_dropout)?;
    tape.linear(core, w.wo, Some(w.bo), false)
}

/// Tiled-path attention sublayer.
pub fn mhsa_tiled(
    tape: &mut Tape,
    x: VarId,
    w: &AttnVars,
    slopes: &AlibiSlopes,
    mask: &AttentionMask,
    key_block: usize,
) -> Result<VarId> {
    let q = tape.linear(x, w.wq, Some(w.bq), false)?;
    let k = tape.linear(x, w.wk, Some(w.bk), false)?;
    let v = tape.linear(x, w.wv, Some(w.bv), false)?;
    let core = tape.attn_tiled(q, k, v, w.n_heads, &slopes.slopes, mask, key_block)?;
    tape.linear(core, w.wo, Some(w.bo), false)
}

/// Unpadded attention sublayer over a packed `[T, H]` stream.
pub fn mhsa_unpadded(
    tape: &mut Tape,
    x: VarId,
    w: &AttnVars,
    slopes: &AlibiSlopes,
    cu_seqlens: &[usize],
) -> Result<VarId> {
    let q = tape.linear(x, w.wq, Some(w.bq), false)?;
    let k = tape.linear(x, w.wk, Some(w.bk), false)?;
    let v = tape.linear(x, w.wv, Some(w.bv), false)?;
    let core = tape.attn_packed(q, k, v, w.n_heads, &slopes.slopes, cu_seqlens)?;
    tape.linear(core, w.wo, Some(w.bo), false)
}

/// Evaluation convenience: run the naive sublayer on a throwaway tape.
pub fn mhsa_naive_eval(
    x: &Tensor,
    w: &AttentionWeights,
    slopes: &AlibiSlopes,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = AttnVars::register(&mut tape, w, false);
    let out = mhsa_naive(&mut tape, xv, &wv, slopes, mask, 0.0)?;
    Ok(tape.value(out).clone())
}

/// Evaluation convenience for the tiled sublayer.
pub fn mhsa_tiled_eval(
    x: &Tensor,
    w: &AttentionWeights,
    slopes: &AlibiSlopes,
    mask: &AttentionMask,
    key_block: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = AttnVars::register(&mut tape, w, false);
    let out = mhsa_tiled(&mut tape, xv, &wv, slopes, mask, key_block)?;
    Ok(tape.value(out).clone())
}

/// Evaluation convenience for the unpadded sublayer.
pub fn mhsa_unpadded_eval(
    x: &Tensor,
    w: &AttentionWeights,
    slopes: &AlibiSlopes,
    cu_seqlens: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = AttnVars::register(&mut tape, w, false);
    let out = mhsa_unpadded(&mut tape, xv, &wv, slopes, cu_seqlens)?;
    Ok(tape.value(out).clone())
}

// ── kernels ──────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn naive_fwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    b: usize,
    l: usize,
    h: usize,
    heads: usize,
    scale: f64,
    slopes: &[f64],
    mask: Option<&[bool]>,
    drop: Option<&ProbDrop>,
) -> Result<(Vec<T>, Vec<T>)> {
    let d = h / heads;
    let mut out = vec![T::ZERO; b * l * h];
    let mut probs = vec![T::ZERO; b * heads * l * l];
    let mut scores = vec![T::ZERO; l * l];
    instrument::note_score_buf((l * l) as u64);
    for bi in 0..b {
        let mrow = mask.map(|m| &m[bi * l..(bi + 1) * l]);
        for (hd, &slope) in slopes.iter().enumerate() {
            let off = |tok: usize| (bi * l + tok) * h + hd * d;
            for i in 0..l {
                for j in 0..l {
                    scores[i * l + j] = if mrow.map(|m| !m[j]).unwrap_or(false) {
                        T::neg_infinity()
                    } else {
                        let (qi, kj) = (&q[off(i)..off(i) + d], &k[off(j)..off(j) + d]);
                        let mut dot = T::ZERO;
                        for (&a, &c) in qi.iter().zip(kj) {
                            dot += a * c;
                        }
                        dot * T::from_f64(scale) + T::from_f64(-slope * (i as f64 - j as f64).abs())
                    };
                }
            }
            crate::tensor::softmax_rows_kernel(&mut scores, l)?;
            let pbase = ((bi * heads) + hd) * l * l;
            probs[pbase..pbase + l * l].copy_from_slice(&scores);
            for i in 0..l {
                let orow = &mut out[off(i)..off(i) + d];
                for j in 0..l {
                    let mut p = scores[i * l + j];
                    if let Some(dp) = drop {
                        p = if dp.keep[pbase + i * l + j] {
                            p * T::from_f64(dp.scale)
                        } else {
                            T::ZERO
                        };
                    }
                    if p == T::ZERO {
                        continue;
                    }
                    let vrow = &v[off(j)..off(j) + d];
                    for (o, &ve) in orow.iter_mut().zip(vrow) {
                        *o += p * ve;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
fn naive_bwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    b: usize,
    l: usize,
    h: usize,
    heads: usize,
    scale: f64,
    drop: Option<&ProbDrop>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = h / heads;
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut dp = vec![T::ZERO; l * l];
    let mut ds = vec![T::ZERO; l * l];
    for bi in 0..b {
        for hd in 0..heads {
            let off = |tok: usize| (bi * l + tok) * h + hd * d;
            let pbase = ((bi * heads) + hd) * l * l;
            let p = &probs[pbase..pbase + l * l];
            let dropped = |i: usize, j: usize| -> T {
                let raw = p[i * l + j];
                match drop {
                    Some(dpk) => {
                        if dpk.keep[pbase + i * l + j] {
                            raw * T::from_f64(dpk.scale)
                        } else {
                            T::ZERO
                        }
                    }
                    None => raw,
                }
            };
            // dV = P_used^T dO ; dP_used = dO V^T
            for i in 0..l {
                let dorow = &dout[off(i)..off(i) + d];
                for j in 0..l {
                    let pu = dropped(i, j);
                    let vrow = &v[off(j)..off(j) + d];
                    let mut acc = T::ZERO;
                    for (&g, &ve) in dorow.iter().zip(vrow) {
                        acc += g * ve;
                    }
                    // chain the dropout scale back onto dP
                    dp[i * l + j] = match drop {
                        Some(dpk) => {
                            if dpk.keep[pbase + i * l + j] {
                                acc * T::from_f64(dpk.scale)
                            } else {
                                T::ZERO
                            }
                        }
                        None => acc,
                    };
                    if pu != T::ZERO {
                        let dvrow = &mut dv[off(j)..off(j) + d];
                        for (o, &g) in dvrow.iter_mut().zip(dorow) {
                            *o += pu * g;
                        }
                    }
                }
            }
            // dS = P o (dP - rowsum(dP o P))
            for i in 0..l {
                let mut dot = T::ZERO;
                for j in 0..l {
                    dot += dp[i * l + j] * p[i * l + j];
                }
                for j in 0..l {
                    ds[i * l + j] = p[i * l + j] * (dp[i * l + j] - dot);
                }
            }
            // dQ = scale * dS K ; dK = scale * dS^T Q
            let sc = T::from_f64(scale);
            for i in 0..l {
                let dqrow_base = off(i);
                for j in 0..l {
                    let g = ds[i * l + j] * sc;
                    if g == T::ZERO {
                        continue;
                    }
                    let krow = &k[off(j)..off(j) + d];
                    for (t, &ke) in krow.iter().enumerate() {
                        dq[dqrow_base + t] += g * ke;
                    }
                    let qrow = &q[off(i)..off(i) + d];
                    let dkrow_base = off(j);
                    for (t, &qe) in qrow.iter().enumerate() {
                        dk[dkrow_base + t] += g * qe;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[allow(clippy::too_many_arguments)]
fn tiled_fwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    b: usize,
    l: usize,
    h: usize,
    heads: usize,
    scale: f64,
    slopes: &[f64],
    mask: &[bool],
    key_block: usize,
) -> Result<(Vec<T>, Vec<f64>, Vec<f64>)> {
    let d = h / heads;
    let kb = key_block.min(l);
    let mut out = vec![T::ZERO; b * l * h];
    let mut row_max = vec![f64::NEG_INFINITY; b * heads * l];
    let mut row_denom = vec![0.0f64; b * heads * l];
    // The only score storage is one L x key_block block, reused per head.
    let mut sblk = vec![T::ZERO; l * kb];
    instrument::note_score_buf((l * kb) as u64);
    for bi in 0..b {
        let mrow = &mask[bi * l..(bi + 1) * l];
        for (hd, &slope) in slopes.iter().enumerate() {
            let off = |tok: usize| (bi * l + tok) * h + hd * d;
            let stat = |i: usize| (bi * heads + hd) * l + i;
            let mut acc = vec![T::ZERO; l * d];
            let mut m = vec![T::neg_infinity(); l];
            let mut den = vec![T::ZERO; l];
            let mut start = 0usize;
            while start < l {
                let bs = kb.min(l - start);
                for i in 0..l {
                    for jj in 0..bs {
                        let j = start + jj;
                        sblk[i * kb + jj] = if !mrow[j] {
                            T::neg_infinity()
                        } else {
                            let (qi, kj) = (&q[off(i)..off(i) + d], &k[off(j)..off(j) + d]);
                            let mut dot = T::ZERO;
                            for (&a, &c) in qi.iter().zip(kj) {
                                dot += a * c;
                            }
                            dot * T::from_f64(scale)
                                + T::from_f64(-slope * (i as f64 - j as f64).abs())
                        };
                    }
                }
                for i in 0..l {
                    let srow = &sblk[i * kb..i * kb + bs];
                    let mut bm = T::neg_infinity();
                    for &s in srow {
                        bm = bm.maximum(s);
                    }
                    if bm == T::neg_infinity() {
                        continue; // block fully masked for this row
                    }
                    let m_new = m[i].maximum(bm);
                    // exp(-inf - finite) is exactly 0, so a fresh row rescales
                    // its empty accumulator harmlessly.
                    let c = (m[i] - m_new).exp();
                    let arow = &mut acc[i * d..(i + 1) * d];
                    if c != T::ONE {
                        for a in arow.iter_mut() {
                            *a = *a * c;
                        }
                        den[i] = den[i] * c;
                    }
                    for (jj, &s) in srow.iter().enumerate() {
                        let p = (s - m_new).exp();
                        if p == T::ZERO {
                            continue;
                        }
                        den[i] += p;
                        let vrow = &v[off(start + jj)..off(start + jj) + d];
                        for (a, &ve) in arow.iter_mut().zip(vrow) {
                            *a += p * ve;
                        }
                    }
                    m[i] = m_new;
                }
                start += bs;
            }
            for i in 0..l {
                if den[i] == T::ZERO {
                    return Err(Error::DegenerateSlice);
                }
                let arow = &acc[i * d..(i + 1) * d];
                let orow = &mut out[off(i)..off(i) + d];
                for (o, &a) in orow.iter_mut().zip(arow) {
                    *o = a / den[i];
                }
                row_max[stat(i)] = m[i].to_f64();
                row_denom[stat(i)] = den[i].to_f64();
            }
        }
    }
    Ok((out, row_max, row_denom))
}

#[allow(clippy::too_many_arguments)]
fn tiled_bwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    o: &[T],
    dout: &[T],
    b: usize,
    l: usize,
    h: usize,
    heads: usize,
    scale: f64,
    slopes: &[f64],
    mask: &[bool],
    key_block: usize,
    row_max: &[f64],
    row_denom: &[f64],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = h / heads;
    let kb = key_block.min(l);
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut sblk = vec![T::ZERO; l * kb];
    instrument::note_score_buf((l * kb) as u64);
    for bi in 0..b {
        let mrow = &mask[bi * l..(bi + 1) * l];
        for (hd, &slope) in slopes.iter().enumerate() {
            let off = |tok: usize| (bi * l + tok) * h + hd * d;
            let stat = |i: usize| (bi * heads + hd) * l + i;
            // D_i = dO_i . O_i equals rowsum(dP o P) without touching P.
            let mut dvec = vec![T::ZERO; l];
            for i in 0..l {
                let (dorow, orow) = (&dout[off(i)..off(i) + d], &o[off(i)..off(i) + d]);
                let mut acc = T::ZERO;
                for (&g, &oe) in dorow.iter().zip(orow) {
                    acc += g * oe;
                }
                dvec[i] = acc;
            }
            let mut start = 0usize;
            while start < l {
                let bs = kb.min(l - start);
                for i in 0..l {
                    for jj in 0..bs {
                        let j = start + jj;
                        sblk[i * kb + jj] = if !mrow[j] {
                            T::neg_infinity()
                        } else {
                            let (qi, kj) = (&q[off(i)..off(i) + d], &k[off(j)..off(j) + d]);
                            let mut dot = T::ZERO;
                            for (&a, &c) in qi.iter().zip(kj) {
                                dot += a * c;
                            }
                            dot * T::from_f64(scale)
                                + T::from_f64(-slope * (i as f64 - j as f64).abs())
                        };
                    }
                }
                for i in 0..l {
                    let minv = T::from_f64(row_max[stat(i)]);
                    let deninv = T::ONE / T::from_f64(row_denom[stat(i)]);
                    let dorow = &dout[off(i)..off(i) + d];
                    for jj in 0..bs {
                        let j = start + jj;
                        let s = sblk[i * kb + jj];
                        if s == T::neg_infinity() {
                            continue;
                        }
                        let p = (s - minv).exp() * deninv;
                        if p == T::ZERO {
                            continue;
                        }
                        // dP_ij = dO_i . V_j ; dS = P (dP - D_i)
                        let vrow = &v[off(j)..off(j) + d];
                        let mut dp = T::ZERO;
                        for (&g, &ve) in dorow.iter().zip(vrow) {
                            dp += g * ve;
                        }
                        let dsv = p * (dp - dvec[i]) * T::from_f64(scale);
                        let krow = &k[off(j)..off(j) + d];
                        let dq_base = off(i);
                        for (t, &ke) in krow.iter().enumerate() {
                            dq[dq_base + t] += dsv * ke;
                        }
                        let qrow = &q[off(i)..off(i) + d];
                        let dk_base = off(j);
                        for (t, &qe) in qrow.iter().enumerate() {
                            dk[dk_base + t] += dsv * qe;
                        }
                        let dv_base = off(j);
                        for (t, &g) in dorow.iter().enumerate() {
                            dv[dv_base + t] += p * g;
                        }
                    }
                }
                start += bs;
            }
        }
    }
    (dq, dk, dv)
}

#[allow(clippy::too_many_arguments)]
fn packed_fwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    _total: usize,
    h: usize,
    heads: usize,
    scale: f64,
    slopes: &[f64],
    cu: &[usize],
) -> Result<(Vec<T>, Vec<T>)> {
    let d = h / heads;
    let mut out = vec![T::ZERO; q.len()];
    let total_probs: usize = cu.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    let mut probs = vec![T::ZERO; heads * total_probs];
    let mut pcursor = 0usize;
    for seg in cu.windows(2) {
        let (s0, s1) = (seg[0], seg[1]);
        let n = s1 - s0;
        instrument::note_score_buf((n * n) as u64);
        let mut scores = vec![T::ZERO; n * n];
        for (hd, &slope) in slopes.iter().enumerate() {
            let off = |tok: usize| (s0 + tok) * h + hd * d;
            for i in 0..n {
                for j in 0..n {
                    let (qi, kj) = (&q[off(i)..off(i) + d], &k[off(j)..off(j) + d]);
                    let mut dot = T::ZERO;
                    for (&a, &c) in qi.iter().zip(kj) {
                        dot += a * c;
                    }
                    scores[i * n + j] = dot * T::from_f64(scale)
                        + T::from_f64(-slope * (i as f64 - j as f64).abs());
                }
            }
            crate::tensor::softmax_rows_kernel(&mut scores, n)?;
            probs[pcursor..pcursor + n * n].copy_from_slice(&scores);
            pcursor += n * n;
            for i in 0..n {
                let orow = &mut out[off(i)..off(i) + d];
                for j in 0..n {
                    let p = scores[i * n + j];
                    if p == T::ZERO {
                        continue;
                    }
                    let vrow = &v[off(j)..off(j) + d];
                    for (oe, &ve) in orow.iter_mut().zip(vrow) {
                        *oe += p * ve;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
fn packed_bwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    h: usize,
    heads: usize,
    scale: f64,
    cu: &[usize],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = h / heads;
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut pcursor = 0usize;
    for seg in cu.windows(2) {
        let (s0, s1) = (seg[0], seg[1]);
        let n = s1 - s0;
        let mut dp = vec![T::ZERO; n * n];
        let mut ds = vec![T::ZERO; n * n];
        for hd in 0..heads {
            let off = |tok: usize| (s0 + tok) * h + hd * d;
            let p = &probs[pcursor..pcursor + n * n];
            pcursor += n * n;
            for i in 0..n {
                let dorow = &dout[off(i)..off(i) + d];
                for j in 0..n {
                    let vrow = &v[off(j)..off(j) + d];
                    let mut acc = T::ZERO;
                    for (&g, &ve) in dorow.iter().zip(vrow) {
                        acc += g * ve;
                    }
                    dp[i * n + j] = acc;
                    let pe = p[i * n + j];
                    if pe != T::ZERO {
                        let dvrow = &mut dv[off(j)..off(j) + d];
                        for (o, &g) in dvrow.iter_mut().zip(dorow) {
                            *o += pe * g;
                        }
                    }
                }
            }
            for i in 0..n {
                let mut dot = T::ZERO;
                for j in 0..n {
                    dot += dp[i * n + j] * p[i * n + j];
                }
                for j in 0..n {
                    ds[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot);
                }
            }
            let sc = T::from_f64(scale);
            for i in 0..n {
                for j in 0..n {
                    let g = ds[i * n + j] * sc;
                    if g == T::ZERO {
                        continue;
                    }
                    let krow = &k[off(j)..off(j) + d];
                    let dq_base = off(i);
                    for (t, &ke) in krow.iter().enumerate() {
                        dq[dq_base + t] += g * ke;
                    }
                    let qrow = &q[off(i)..off(i) + d];
                    let dk_base = off(j);
                    for (t, &qe) in qrow.iter().enumerate() {
                        dk[dk_base + t] += g * qe;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn attn_backward(
    nodes: &[Node],
    grads: &mut [Option<Buf>],
    id: usize,
    node: &AttnNode,
    dy: &Buf,
) -> Result<()> {
    let (q, k, v) = (node.q, node.k, node.v);
    if !(nodes[q].needs || nodes[k].needs || nodes[v].needs) {
        return Ok(());
    }
    let (b, l, heads, scale) = (node.batch, node.len, node.heads, node.scale);
    let h = *nodes[q].value.shape().last().unwrap();
    let (dq, dk, dv): (Buf, Buf, Buf) = match (&node.kind, dy) {
        (AttnKind::Naive { probs, drop }, g) => match (nodes[q].value.buf(), probs, g) {
            (Buf::F32(qv), Buf::F32(p), Buf::F32(gg)) => {
                let (a, bb, c) = naive_bwd(
                    qv,
                    nodes[k].value.as_f32(),
                    nodes[v].value.as_f32(),
                    p,
                    gg,
                    b,
                    l,
                    h,
                    heads,
                    scale,
                    drop.as_ref(),
                );
                (Buf::F32(a), Buf::F32(bb), Buf::F32(c))
            }
            (Buf::F64(qv), Buf::F64(p), Buf::F64(gg)) => {
                let (a, bb, c) = naive_bwd(
                    qv,
                    nodes[k].value.as_f64(),
                    nodes[v].value.as_f64(),
                    p,
                    gg,
                    b,
                    l,
                    h,
                    heads,
                    scale,
                    drop.as_ref(),
                );
                (Buf::F64(a), Buf::F64(bb), Buf::F64(c))
            }
            _ => panic!("carrier mismatch"),
        },
        (
            AttnKind::Tiled {
                key_block,
                row_max,
                row_denom,
            },
            g,
        ) => {
            let mask = node.mask.as_ref().expect("tiled attention has a mask");
            match (nodes[q].value.buf(), g) {
                (Buf::F32(qv), Buf::F32(gg)) => {
                    let (a, bb, c) = tiled_bwd(
                        qv,
                        nodes[k].value.as_f32(),
                        nodes[v].value.as_f32(),
                        nodes[id].value.as_f32(),
                        gg,
                        b,
                        l,
                        h,
                        heads,
                        scale,
                        &node.slopes,
                        mask,
                        *key_block,
                        row_max,
                        row_denom,
                    );
                    (Buf::F32(a), Buf::F32(bb), Buf::F32(c))
                }
                (Buf::F64(qv), Buf::F64(gg)) => {
                    let (a, bb, c) = tiled_bwd(
                        qv,
                        nodes[k].value.as_f64(),
                        nodes[v].value.as_f64(),
                        nodes[id].value.as_f64(),
                        gg,
                        b,
                        l,
                        h,
                        heads,
                        scale,
                        &node.slopes,
                        mask,
                        *key_block,
                        row_max,
                        row_denom,
                    );
                    (Buf::F64(a), Buf::F64(bb), Buf::F64(c))
                }
                _ => panic!("carrier mismatch"),
            }
        }
        (AttnKind::Packed { cu, probs }, g) => match (nodes[q].value.buf(), probs, g) {
            (Buf::F32(qv), Buf::F32(p), Buf::F32(gg)) => {
                let (a, bb, c) = packed_bwd(
                    qv,
                    nodes[k].value.as_f32(),
                    nodes[v].value.as_f32(),
                    p,
                    gg,
                    h,
                    heads,
                    scale,
                    cu,
                );
                (Buf::F32(a), Buf::F32(bb), Buf::F32(c))
            }
            (Buf::F64(qv), Buf::F64(p), Buf::F64(gg)) => {
                let (a, bb, c) = packed_bwd(
                    qv,
                    nodes[k].value.as_f64(),
                    nodes[v].value.as_f64(),
                    p,
                    gg,
                    h,
                    heads,
                    scale,
                    cu,
                );
                (Buf::F64(a), Buf::F64(bb), Buf::F64(c))
            }
            _ => panic!("carrier mismatch"),
        },
    };
    if nodes[q].needs {
        acc_into(&mut grads[q], dq);
    }
    if nodes[k].needs {
        acc_into(&mut grads[k], dk);
    }
    if nodes[v].needs {
        acc_into(&mut grads[v], dv);
    }
    Ok(())
}

fn acc_into(slot: &mut Option<Buf>, delta: Buf) {
    match slot {
        None => *slot = Some(delta),
        Some(Buf::F32(dst)) => {
            let Buf::F32(src) = delta else {
                panic!("carrier mismatch")
            };
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Some(Buf::F64(dst)) => {
            let Buf::F64(src) = delta else {
                panic!("carrier mismatch")
            };
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alibi::alibi_slopes;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, dtype: Dtype) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_f64(shape, data, dtype).unwrap()
    }

    /// Brute-force per-(i,j) reference in f64: explicit loops, direct
    /// exp/sum softmax, no shared kernels with the implementation.
    fn reference_mhsa(
        x: &[f64],
        w: &AttentionWeights,
        slopes: &[f64],
        keep: &[bool],
        b: usize,
        l: usize,
        h: usize,
    ) -> Vec<f64> {
        let heads = w.n_heads;
        let d = h / heads;
        let proj = |x: &[f64], wm: &Tensor, bias: &Tensor| -> Vec<f64> {
            let wv = wm.to_vec_f64();
            let bv = bias.to_vec_f64();
            let rows = x.len() / h;
            let mut y = vec![0.0; rows * h];
            for r in 0..rows {
                for c in 0..h {
                    let mut acc = bv[c];
                    for t in 0..h {
                        acc += x[r * h + t] * wv[t * h + c];
                    }
                    y[r * h + c] = acc;
                }
            }
            y
        };
        let q = proj(x, &w.wq, &w.bq);
        let k = proj(x, &w.wk, &w.bk);
        let v = proj(x, &w.wv, &w.bv);
        let mut ctx = vec![0.0; b * l * h];
        for bi in 0..b {
            for hd in 0..heads {
                for i in 0..l {
                    let mut weights = vec![0.0; l];
                    let mut total = 0.0;
                    for j in 0..l {
                        if !keep[bi * l + j] {
                            continue;
                        }
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot +=
                                q[(bi * l + i) * h + hd * d + t] * k[(bi * l + j) * h + hd * d + t];
                        }
                        let s = dot / (d as f64).sqrt() - slopes[hd] * (i as f64 - j as f64).abs();
                        weights[j] = s.exp();
                        total += weights[j];
                    }
                    for j in 0..l {
                        let p = weights[j] / total;
                        for t in 0..d {
                            ctx[(bi * l + i) * h + hd * d + t] +=
                                p * v[(bi * l + j) * h + hd * d + t];
                        }
                    }
                }
            }
        }
        proj(&ctx, &w.wo, &w.bo)
    }

    #[test]
    fn single_token_is_projected_value() {
        // L=1: softmax over one element is 1, so out = Wo(Wv x + bv) + bo.
        let mut r = rng(3);
        let h = 8;
        let mut w = AttentionWeights::init(h, 2, 0.2, &mut r).unwrap();
        w.bv = rand_tensor(&[h], &mut r, Dtype::F32);
        w.bo = rand_tensor(&[h], &mut r, Dtype::F32);
        let x = rand_tensor(&[1, 1, h], &mut r, Dtype::F32);
        let slopes = alibi_slopes(2).unwrap();
        let mask = AttentionMask::full(1, 1);
        let got = mhsa_naive_eval(&x, &w, &slopes, &mask).unwrap();

        let vx = crate::tensor::matmul(&x.clone().reshaped(&[1, h]).unwrap(), &w.wv).unwrap();
        let mut vplus = vx.to_vec_f64();
        for (a, b) in vplus.iter_mut().zip(w.bv.to_vec_f64()) {
            *a += b;
        }
        let vt = Tensor::from_f64(&[1, h], vplus, Dtype::F32).unwrap();
        let out = crate::tensor::matmul(&vt, &w.wo).unwrap();
        let mut expect = out.to_vec_f64();
        for (a, b) in expect.iter_mut().zip(w.bo.to_vec_f64()) {
            *a += b;
        }
        for (g, e) in got.to_vec_f64().iter().zip(expect) {
            assert!((g - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn zero_slopes_uniform_rows_give_uniform_attention() {
        // With zero slopes and identical rows, every unmasked key gets 1/L.
        let (b, l, h) = (1, 5, 4);
        let mut r = rng(7);
        let w = wf64(&AttentionWeights::init(h, 1, 0.1, &mut r).unwrap());
        let row: Vec<f64> = (0..h).map(|i| i as f64 * 0.1).collect();
        let mut data = Vec::new();
        for _ in 0..l {
            data.extend_from_slice(&row);
        }
        let x = Tensor::from_f64(&[b, l, h], data, Dtype::F64).unwrap();
        let mask = AttentionMask::from_lengths(&[4], l).unwrap();

        let mut tape = Tape::new();
        let xv = tape.input(x);
        let wv = AttnVars::register(&mut tape, &w, false);
        let q = tape.linear(xv, wv.wq, Some(wv.bq), false).unwrap();
        let k = tape.linear(xv, wv.wk, Some(wv.bk), false).unwrap();
        let v = tape.linear(xv, wv.wv, Some(wv.bv), false).unwrap();
        let core = tape.attn_naive(q, k, v, 1, &[0.0], &mask, 0.0).unwrap();
        let crate::tape::Op::Attn(node) = &tape.nodes[core].op else {
            panic!()
        };
        let AttnKind::Naive {
            probs: Buf::F64(p), ..
        } = &node.kind
        else {
            panic!()
        };
        for i in 0..l {
            for j in 0..4 {
                assert!((p[i * l + j] - 0.25).abs() < 1e-12);
            }
            assert_eq!(p[i * l + 4], 0.0);
        }
    }

    #[test]
    fn naive_matches_loop_oracle() {
        let (b, l, h, heads) = (2, 8, 16, 2);
        let mut r = rng(11);
        let w = AttentionWeights::init(h, heads, 0.3, &mut r).unwrap();
        let x = rand_tensor(&[b, l, h], &mut r, Dtype::F64);
        let slopes = alibi_slopes(heads).unwrap();
        let mask = AttentionMask::from_lengths(&[8, 5], l).unwrap();
        let got = mhsa_naive_eval(&x.cast(Dtype::F64), &wf64(&w), &slopes, &mask).unwrap();
        let want = reference_mhsa(&x.to_vec_f64(), &w, &slopes.slopes, mask.keep(), b, l, h);
        for bi in 0..b {
            for i in 0..l {
                if !mask.row(bi)[i] {
                    continue;
                }
                for t in 0..h {
                    let idx = (bi * l + i) * h + t;
                    assert!(
                        (got.get(idx) - want[idx]).abs() < 1e-6,
                        "mismatch at {idx}: {} vs {}",
                        got.get(idx),
                        want[idx]
                    );
                }
            }
        }
    }

    fn wf64(w: &AttentionWeights) -> AttentionWeights {
        AttentionWeights {
            wq: w.wq.cast(Dtype::F64),
            bq: w.bq.cast(Dtype::F64),
            wk: w.wk.cast(Dtype::F64),
            bk: w.bk.cast(Dtype::F64),
            wv: w.wv.cast(Dtype::F64),
            bv: w.bv.cast(Dtype::F64),
            wo: w.wo.cast(Dtype::F64),
            bo: w.bo.cast(Dtype::F64),
            n_heads: w.n_heads,
        }
    }

    #[test]
    fn tiled_matches_naive_across_block_sizes() {
        let (b, l, h, heads) = (2, 16, 8, 2);
        let mut r = rng(13);
        let w = wf64(&AttentionWeights::init(h, heads, 0.3, &mut r).unwrap());
        let x = rand_tensor(&[b, l, h], &mut r, Dtype::F64);
        let slopes = alibi_slopes(heads).unwrap();
        let mask = AttentionMask::from_lengths(&[16, 11], l).unwrap();
        let naive = mhsa_naive_eval(&x, &w, &slopes, &mask).unwrap();
        for kb in [1usize, 3, 7, 16, 64] {
            let tiled = mhsa_tiled_eval(&x, &w, &slopes, &mask, kb).unwrap();
            for (bi, (a, c)) in naive
                .to_vec_f64()
                .iter()
                .zip(tiled.to_vec_f64())
                .enumerate()
            {
                let row = (bi / h) % l;
                let batch = bi / (h * l);
                if mask.row(batch)[row] {
                    assert!((a - c).abs() < 1e-10, "kb={kb} idx={bi}: {a} vs {c}");
                }
            }
        }
    }

    #[test]
    fn unpadded_matches_padded_on_real_tokens() {
        let (l, h, heads) = (8, 8, 2);
        let lengths = [3usize, 5];
        let b = lengths.len();
        let mut r = rng(17);
        let w = wf64(&AttentionWeights::init(h, heads, 0.3, &mut r).unwrap());
        let slopes = alibi_slopes(heads).unwrap();
        let x = rand_tensor(&[b, l, h], &mut r, Dtype::F64);
        let mask = AttentionMask::from_lengths(&lengths, l).unwrap();
        let padded = mhsa_naive_eval(&x, &w, &slopes, &mask).unwrap();

        // Pack the real rows, run the unpadded path, compare.
        let mut packed = Vec::new();
        let mut cu = vec![0usize];
        for (bi, &n) in lengths.iter().enumerate() {
            for i in 0..n {
                let base = (bi * l + i) * h;
                packed.extend_from_slice(&x.to_vec_f64()[base..base + h]);
            }
            cu.push(cu.last().unwrap() + n);
        }
        let total = *cu.last().unwrap();
        let px = Tensor::from_f64(&[total, h], packed, Dtype::F64).unwrap();
        let up = mhsa_unpadded_eval(&px, &w, &slopes, &cu).unwrap();
        for (bi, &n) in lengths.iter().enumerate() {
            for i in 0..n {
                for t in 0..h {
                    let a = padded.get((bi * l + i) * h + t);
                    let c = up.get((cu[bi] + i) * h + t);
                    assert!((a - c).abs() < 1e-10, "{a} vs {c}");
                }
            }
        }
    }

    #[test]
    fn single_segment_equals_batch_of_one() {
        let (l, h, heads) = (6, 8, 4);
        let mut r = rng(19);
        let w = wf64(&AttentionWeights::init(h, heads, 0.3, &mut r).unwrap());
        let slopes = alibi_slopes(heads).unwrap();
        let x = rand_tensor(&[1, l, h], &mut r, Dtype::F64);
        let mask = AttentionMask::full(1, l);
        let naive = mhsa_naive_eval(&x, &w, &slopes, &mask).unwrap();
        let px = x.clone().reshaped(&[l, h]).unwrap();
        let up = mhsa_unpadded_eval(&px, &w, &slopes, &[0, l]).unwrap();
        for i in 0..l * h {
            assert!((naive.get(i) - up.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_of_one_token_uses_closed_form() {
        let h = 4;
        let mut r = rng(23);
        let w = wf64(&AttentionWeights::init(h, 1, 0.3, &mut r).unwrap());
        let slopes = alibi_slopes(1).unwrap();
        let x = rand_tensor(&[3, h], &mut r, Dtype::F64);
        // Segments [2, 1]: the final token attends only to itself.
        let up = mhsa_unpadded_eval(&x, &w, &slopes, &[0, 2, 3]).unwrap();
        let solo =
            Tensor::from_f64(&[1, 1, h], x.to_vec_f64()[2 * h..].to_vec(), Dtype::F64).unwrap();
        let alone = mhsa_naive_eval(&solo, &w, &slopes, &AttentionMask::full(1, 1)).unwrap();
        for t in 0..h {
            assert!((up.get(2 * h + t) - alone.get(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_extension_leaves_real_tokens_unchanged() {
        let (l, h, heads) = (6, 8, 2);
        let mut r = rng(29);
        let w = wf64(&AttentionWeights::init(h, heads, 0.3, &mut r).unwrap());
        let slopes = alibi_slopes(heads).unwrap();
        let x = rand_tensor(&[1, l, h], &mut r, Dtype::F64);
        let mask = AttentionMask::from_lengths(&[4], l).unwrap();
        let out = mhsa_naive_eval(&x, &w, &slopes, &mask).unwrap();

        // Append two more padding positions.
        let mut data = x.to_vec_f64();
        data.extend(std::iter::repeat_n(0.0, 2 * h));
        let x2 = Tensor::from_f64(&[1, l + 2, h], data, Dtype::F64).unwrap();
        let mask2 = AttentionMask::from_lengths(&[4], l + 2).unwrap();
        let out2 = mhsa_naive_eval(&x2, &w, &slopes, &mask2).unwrap();
        for i in 0..4 {
            for t in 0..h {
                let a = out.get(i * h + t);
                let c = out2.get(i * h + t);
                assert!((a - c).abs() < 1e-10, "{a} vs {c}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, l, h, heads) = (1, 4, 4, 2);
        let mut r = rng(31);
        let w = wf64(&AttentionWeights::init(h, heads, 0.4, &mut r).unwrap());
        let slopes = alibi_slopes(heads).unwrap();
        let mask = AttentionMask::from_lengths(&[3], l).unwrap();
        let x = rand_tensor(&[b, l, h], &mut r, Dtype::F64);

        for path in 0..3 {
            let w = w.clone();
            let mask = mask.clone();
            let slopes = slopes.clone();
            let err = crate::tape::grad_check(
                move |tape, xv| {
                    let wv = AttnVars::register(tape, &w, false);
                    let out = match path {
                        0 => mhsa_naive(tape, xv, &wv, &slopes, &mask, 0.0)?,
                        1 => mhsa_tiled(tape, xv, &wv, &slopes, &mask, 2)?,
                        _ => {
                            // pack the 3 real rows
                            let p = tape.pack_rows(xv, &[0, 1, 2])?;
                            mhsa_unpadded(tape, p, &wv, &slopes, &[0, 3])?
                        }
                    };
                    let sq = tape.mul(out, out)?;
                    Ok(tape.sum(sq))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-7, "path {path} err {err}");
        }
    }

    #[test]
    fn tiled_score_buffer_is_instrumented() {
        let (b, l, h, heads) = (1, 32, 8, 2);
        let mut r = rng(37);
        let w = AttentionWeights::init(h, heads, 0.3, &mut r).unwrap();
        let slopes = alibi_slopes(heads).unwrap();
        let x = rand_tensor(&[b, l, h], &mut r, Dtype::F32);
        let mask = AttentionMask::full(b, l);
        instrument::reset();
        let _ = mhsa_tiled_eval(&x, &w, &slopes, &mask, 4).unwrap();
        let peak = instrument::score_buf_peak();
        assert!(peak <= (l * 4) as u64, "peak {peak}");
        assert!(peak > 0);
    }

    #[test]
    fn all_masked_sequence_rejected() {
        assert!(matches!(
            AttentionMask::new(1, 3, vec![false, false, false]),
            Err(Error::DegenerateSlice)
        ));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut r = rng(41);
        assert!(AttentionWeights::init(10, 3, 0.1, &mut r).is_err());
    }

    #[test]
    fn malformed_cu_seqlens_rejected() {
        assert!(validate_cu(&[0, 3, 3], 3).is_err());
        assert!(validate_cu(&[1, 3], 3).is_err());
        assert!(validate_cu(&[0, 2], 3).is_err());
        assert!(validate_cu(&[0, 3], 3).is_ok());
    }
}
