//! Tape-based reverse-mode differentiation.
//!
//! Operations record onto a linear tape at forward time; `backward` replays
//! the tape in reverse, accumulating gradients additively across fan-out.
//! Each op carries an explicit backward rule — there is no graph rewriting.
//! A tape is confined to one thread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnNode;
use crate::bf16::bf16_round;
use crate::error::{Error, Result};
use crate::instrument;
use crate::tensor::{gelu_grad_scalar, matmul_kernel, Buf, Dtype, Real, Tensor};

pub type VarId = usize;

pub(crate) struct LnSaved {
    /// Normalized values per element (post-rounding in low-precision mode).
    pub xhat: Buf,
    /// 1/sqrt(var + eps) per row, widened to f64.
    pub inv_std: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    Matmul {
        a: VarId,
        b: VarId,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        ff: bool,
    },
    /// `x [N,k] @ w[v,k]^T (+ bias)` — used for the tied MLM decoder.
    MatmulT {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        ff: bool,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        k: f64,
    },
    Gelu {
        x: VarId,
    },
    Softmax {
        x: VarId,
    },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        saved: LnSaved,
    },
    Embed {
        table: VarId,
        ids: Vec<u32>,
    },
    Dropout {
        x: VarId,
        keep: Vec<bool>,
        scale: f64,
    },
    Narrow {
        x: VarId,
        offset: usize,
        len: usize,
    },
    ConcatLast {
        a: VarId,
        b: VarId,
        a_cols: usize,
        b_cols: usize,
    },
    TakeToken {
        x: VarId,
        pos: usize,
    },
    PackRows {
        x: VarId,
        gather: Vec<usize>,
    },
    UnpackRows {
        x: VarId,
        scatter: Vec<usize>,
    },
    CrossEntropy {
        logits: VarId,
        labels: Vec<i32>,
        probs: Buf,
        n_valid: usize,
    },
    Mse {
        pred: VarId,
        targets: Vec<f64>,
    },
    Sum {
        x: VarId,
    },
    Attn(Box<AttnNode>),
}

pub(crate) struct Node {
    pub value: Tensor,
    pub needs: bool,
    pub op: Op,
}

pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Buf>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Evaluation-mode tape: dropout is inert.
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode tape; `seed` drives dropout masks.
    pub fn for_training(seed: u64) -> Tape {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn push(&mut self, value: Tensor, needs: bool, op: Op) -> VarId {
        self.nodes.push(Node { value, needs, op });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Register a non-differentiable input.
    pub fn input(&mut self, t: Tensor) -> VarId {
        self.push(t, false, Op::Leaf)
    }

    /// Register a tensor that requires gradient.
    pub fn param(&mut self, t: Tensor) -> VarId {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn value_f64(&self, v: VarId) -> Vec<f64> {
        self.nodes[v].value.to_vec_f64()
    }

    pub(crate) fn needs(&self, v: VarId) -> bool {
        self.nodes[v].needs
    }

    pub(crate) fn push_op(&mut self, value: Tensor, needs: bool, op: Op) -> VarId {
        self.push(value, needs, op)
    }

    pub(crate) fn carrier(&self, v: VarId) -> Dtype {
        self.nodes[v].value.dtype().carrier()
    }

    pub(crate) fn same_carrier(&self, vs: &[VarId], context: &'static str) -> Result<Dtype> {
        let c = self.carrier(vs[0]);
        for &v in &vs[1..] {
            if self.carrier(v) != c {
                return Err(Error::Config(format!(
                    "{context}: mixed f32/f64 carriers on tape"
                )));
            }
        }
        Ok(c)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_carrier(&[a, b], "matmul")?;
        let value = crate::tensor::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Matmul { a, b }))
    }

    /// `x [.., in] @ w [in, out] (+ bias)`, leading dims treated as batch.
    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>, ff: bool) -> Result<VarId> {
        let mut ids = vec![x, w];
        if let Some(bb) = b {
            ids.push(bb);
        }
        let carrier = self.same_carrier(&ids, "linear")?;
        let (xs, ws) = (
            self.nodes[x].value.shape().to_vec(),
            self.nodes[w].value.shape().to_vec(),
        );
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::ShapeMismatch {
                context: "linear",
                left: xs,
                right: ws,
            });
        }
        let (k, out) = (ws[0], ws[1]);
        let rows = self.nodes[x].value.numel() / k;
        if let Some(bb) = b {
            if self.nodes[bb].value.shape() != [out] {
                return Err(Error::ShapeMismatch {
                    context: "linear bias",
                    left: self.nodes[bb].value.shape().to_vec(),
                    right: vec![out],
                });
            }
        }
        let bf16_mode = self.nodes[x].value.dtype() == Dtype::Bf16
            || self.nodes[w].value.dtype() == Dtype::Bf16;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out;
        if ff {
            instrument::add_ff_mults((rows * k * out) as u64);
        }
        let value = match carrier {
            Dtype::F64 => {
                let mut y = vec![0.0f64; rows * out];
                matmul_kernel(
                    self.nodes[x].value.as_f64(),
                    self.nodes[w].value.as_f64(),
                    rows,
                    k,
                    out,
                    &mut y,
                );
                if let Some(bb) = b {
                    add_bias_rows(&mut y, self.nodes[bb].value.as_f64(), out);
                }
                Tensor::from_f64(&out_shape, y, Dtype::F64)?
            }
            _ => {
                let mut y = vec![0.0f32; rows * out];
                if bf16_mode {
                    let xr: Vec<f32> = self.nodes[x]
                        .value
                        .as_f32()
                        .iter()
                        .map(|&v| bf16_round(v))
                        .collect();
                    let wr: Vec<f32> = self.nodes[w]
                        .value
                        .as_f32()
                        .iter()
                        .map(|&v| bf16_round(v))
                        .collect();
                    matmul_kernel(&xr, &wr, rows, k, out, &mut y);
                } else {
                    matmul_kernel(
                        self.nodes[x].value.as_f32(),
                        self.nodes[w].value.as_f32(),
                        rows,
                        k,
                        out,
                        &mut y,
                    );
                }
                if let Some(bb) = b {
                    add_bias_rows(&mut y, self.nodes[bb].value.as_f32(), out);
                }
                Tensor::from_f32(&out_shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        Ok(self.push(value, needs, Op::Linear { x, w, b, ff }))
    }

    /// `x [.., k] @ w [v, k]^T (+ bias)` — the decoder path that shares the
    /// embedding table.
    pub fn matmul_t(&mut self, x: VarId, w: VarId, b: Option<VarId>, ff: bool) -> Result<VarId> {
        let mut ids = vec![x, w];
        if let Some(bb) = b {
            ids.push(bb);
        }
        let carrier = self.same_carrier(&ids, "matmul_t")?;
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::ShapeMismatch {
                context: "matmul_t",
                left: xs,
                right: ws,
            });
        }
        let (v, k) = (ws[0], ws[1]);
        if let Some(bb) = b {
            if self.nodes[bb].value.shape() != [v] {
                return Err(Error::ShapeMismatch {
                    context: "matmul_t bias",
                    left: self.nodes[bb].value.shape().to_vec(),
                    right: vec![v],
                });
            }
        }
        let rows = self.nodes[x].value.numel() / k;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = v;
        if ff {
            instrument::add_ff_mults((rows * k * v) as u64);
        }
        let value = match carrier {
            Dtype::F64 => {
                let mut y = matmul_bt(
                    self.nodes[x].value.as_f64(),
                    self.nodes[w].value.as_f64(),
                    rows,
                    k,
                    v,
                );
                if let Some(bb) = b {
                    add_bias_rows(&mut y, self.nodes[bb].value.as_f64(), v);
                }
                Tensor::from_f64(&out_shape, y, Dtype::F64)?
            }
            _ => {
                let mut y = matmul_bt(
                    self.nodes[x].value.as_f32(),
                    self.nodes[w].value.as_f32(),
                    rows,
                    k,
                    v,
                );
                if let Some(bb) = b {
                    add_bias_rows(&mut y, self.nodes[bb].value.as_f32(), v);
                }
                Tensor::from_f32(&out_shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        Ok(self.push(value, needs, Op::MatmulT { x, w, b, ff }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let carrier = self.same_carrier(&[a, b], "add")?;
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::ShapeMismatch {
                context: "add",
                left: self.nodes[a].value.shape().to_vec(),
                right: self.nodes[b].value.shape().to_vec(),
            });
        }
        let shape = self.nodes[a].value.shape().to_vec();
        let value = match carrier {
            Dtype::F64 => {
                let y: Vec<f64> = self.nodes[a]
                    .value
                    .as_f64()
                    .iter()
                    .zip(self.nodes[b].value.as_f64())
                    .map(|(p, q)| p + q)
                    .collect();
                Tensor::from_f64(&shape, y, Dtype::F64)?
            }
            _ => {
                let y: Vec<f32> = self.nodes[a]
                    .value
                    .as_f32()
                    .iter()
                    .zip(self.nodes[b].value.as_f32())
                    .map(|(p, q)| p + q)
                    .collect();
                Tensor::from_f32(&shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let carrier = self.same_carrier(&[a, b], "mul")?;
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::ShapeMismatch {
                context: "mul",
                left: self.nodes[a].value.shape().to_vec(),
                right: self.nodes[b].value.shape().to_vec(),
            });
        }
        let shape = self.nodes[a].value.shape().to_vec();
        let value = match carrier {
            Dtype::F64 => {
                let y: Vec<f64> = self.nodes[a]
                    .value
                    .as_f64()
                    .iter()
                    .zip(self.nodes[b].value.as_f64())
                    .map(|(p, q)| p * q)
                    .collect();
                Tensor::from_f64(&shape, y, Dtype::F64)?
            }
            _ => {
                let y: Vec<f32> = self.nodes[a]
                    .value
                    .as_f32()
                    .iter()
                    .zip(self.nodes[b].value.as_f32())
                    .map(|(p, q)| p * q)
                    .collect();
                Tensor::from_f32(&shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let shape = self.nodes[x].value.shape().to_vec();
        let value = match self.nodes[x].value.buf() {
            Buf::F64(v) => Tensor::from_f64(&shape, v.iter().map(|&p| p * k).collect(), Dtype::F64),
            Buf::F32(v) => Tensor::from_f32(
                &shape,
                v.iter().map(|&p| p * k as f32).collect(),
                Dtype::F32,
            ),
        }
        .expect("scale shape");
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale { x, k })
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let value = crate::tensor::gelu(&self.nodes[x].value);
        let needs = self.needs(x);
        self.push(value, needs, Op::Gelu { x })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let value = crate::tensor::softmax_stable(&self.nodes[x].value, -1)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Softmax { x }))
    }

    /// Per-row LayerNorm over the trailing dimension.
    ///
    /// In low-precision mode on an f32 carrier, input, normalized values and
    /// output are rounded to the bf16 lattice while mean/variance accumulate
    /// in f32. On an f64 carrier the mode changes nothing: rounding emulation
    /// is a property of the f32 container.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        low_precision: bool,
    ) -> Result<VarId> {
        let carrier = self.same_carrier(&[x, gamma, beta], "layer_norm")?;
        let shape = self.nodes[x].value.shape().to_vec();
        let h = *shape
            .last()
            .ok_or_else(|| Error::Config("layer_norm on 0-rank tensor".into()))?;
        if self.nodes[gamma].value.shape() != [h] || self.nodes[beta].value.shape() != [h] {
            return Err(Error::ShapeMismatch {
                context: "layer_norm parameters",
                left: self.nodes[gamma].value.shape().to_vec(),
                right: vec![h],
            });
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (value, saved) = match carrier {
            Dtype::F64 => {
                let (y, xhat, inv_std) = layer_norm_fwd(
                    self.nodes[x].value.as_f64(),
                    self.nodes[gamma].value.as_f64(),
                    self.nodes[beta].value.as_f64(),
                    h,
                    eps,
                    false,
                );
                (
                    Tensor::from_f64(&shape, y, Dtype::F64)?,
                    LnSaved {
                        xhat: Buf::F64(xhat),
                        inv_std,
                    },
                )
            }
            _ => {
                let (y, xhat, inv_std) = layer_norm_fwd(
                    self.nodes[x].value.as_f32(),
                    self.nodes[gamma].value.as_f32(),
                    self.nodes[beta].value.as_f32(),
                    h,
                    eps,
                    low_precision,
                );
                (
                    Tensor::from_f32(&shape, y, Dtype::F32)?,
                    LnSaved {
                        xhat: Buf::F32(xhat),
                        inv_std,
                    },
                )
            }
        };
        Ok(self.push(
            value,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
        ))
    }

    /// Row gather: `out[i] = table[ids[i]]`, reshaped to `out_shape`.
    pub fn embed(&mut self, table: VarId, ids: &[u32], out_shape: &[usize]) -> Result<VarId> {
        let ts = self.nodes[table].value.shape().to_vec();
        if ts.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "embed table",
                left: ts,
                right: vec![0, 0],
            });
        }
        let (v, h) = (ts[0], ts[1]);
        let n: usize = out_shape.iter().product();
        if n != ids.len() * h {
            return Err(Error::ShapeMismatch {
                context: "embed output",
                left: out_shape.to_vec(),
                right: vec![ids.len(), h],
            });
        }
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Data(format!("token id {id} out of vocab range {v}")));
            }
        }
        let value = match self.nodes[table].value.buf() {
            Buf::F64(t) => {
                let mut y = Vec::with_capacity(ids.len() * h);
                for &id in ids {
                    y.extend_from_slice(&t[id as usize * h..(id as usize + 1) * h]);
                }
                Tensor::from_f64(out_shape, y, Dtype::F64)?
            }
            Buf::F32(t) => {
                let mut y = Vec::with_capacity(ids.len() * h);
                for &id in ids {
                    y.extend_from_slice(&t[id as usize * h..(id as usize + 1) * h]);
                }
                Tensor::from_f32(out_shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(table);
        Ok(self.push(
            value,
            needs,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity when not training or rate is zero.
    pub fn dropout(&mut self, x: VarId, rate: f64) -> VarId {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let n = self.nodes[x].value.numel();
        let keep: Vec<bool> = (0..n).map(|_| self.rng.gen::<f64>() >= rate).collect();
        let scale = 1.0 / (1.0 - rate);
        let shape = self.nodes[x].value.shape().to_vec();
        let value = match self.nodes[x].value.buf() {
            Buf::F64(v) => Tensor::from_f64(
                &shape,
                v.iter()
                    .zip(&keep)
                    .map(|(&p, &k)| if k { p * scale } else { 0.0 })
                    .collect(),
                Dtype::F64,
            ),
            Buf::F32(v) => Tensor::from_f32(
                &shape,
                v.iter()
                    .zip(&keep)
                    .map(|(&p, &k)| if k { p * scale as f32 } else { 0.0 })
                    .collect(),
                Dtype::F32,
            ),
        }
        .expect("dropout shape");
        let needs = self.needs(x);
        self.push(value, needs, Op::Dropout { x, keep, scale })
    }

    /// Slice `len` columns starting at `offset` from the last dimension.
    pub fn narrow(&mut self, x: VarId, offset: usize, len: usize) -> Result<VarId> {
        let shape = self.nodes[x].value.shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Config("narrow on 0-rank tensor".into()))?;
        if offset + len > cols {
            return Err(Error::Config(format!(
                "narrow {offset}+{len} exceeds width {cols}"
            )));
        }
        let rows = self.nodes[x].value.numel() / cols;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let value = match self.nodes[x].value.buf() {
            Buf::F64(v) => {
                let mut y = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    y.extend_from_slice(&v[r * cols + offset..r * cols + offset + len]);
                }
                Tensor::from_f64(&out_shape, y, Dtype::F64)?
            }
            Buf::F32(v) => {
                let mut y = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    y.extend_from_slice(&v[r * cols + offset..r * cols + offset + len]);
                }
                Tensor::from_f32(&out_shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Narrow { x, offset, len }))
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let carrier = self.same_carrier(&[a, b], "concat_last")?;
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::ShapeMismatch {
                context: "concat_last",
                left: sa,
                right: sb,
            });
        }
        let a_cols = *sa.last().unwrap();
        let b_cols = *sb.last().unwrap();
        let rows = self.nodes[a].value.numel() / a_cols;
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = a_cols + b_cols;
        let value = match carrier {
            Dtype::F64 => {
                let (av, bv) = (self.nodes[a].value.as_f64(), self.nodes[b].value.as_f64());
                let mut y = Vec::with_capacity(rows * (a_cols + b_cols));
                for r in 0..rows {
                    y.extend_from_slice(&av[r * a_cols..(r + 1) * a_cols]);
                    y.extend_from_slice(&bv[r * b_cols..(r + 1) * b_cols]);
                }
                Tensor::from_f64(&out_shape, y, Dtype::F64)?
            }
            _ => {
                let (av, bv) = (self.nodes[a].value.as_f32(), self.nodes[b].value.as_f32());
                let mut y = Vec::with_capacity(rows * (a_cols + b_cols));
                for r in 0..rows {
                    y.extend_from_slice(&av[r * a_cols..(r + 1) * a_cols]);
                    y.extend_from_slice(&bv[r * b_cols..(r + 1) * b_cols]);
                }
                Tensor::from_f32(&out_shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            value,
            needs,
            Op::ConcatLast {
                a,
                b,
                a_cols,
                b_cols,
            },
        ))
    }

    /// Select one sequence position from `[B, L, H]`, yielding `[B, H]`.
    pub fn take_token(&mut self, x: VarId, pos: usize) -> Result<VarId> {
        let shape = self.nodes[x].value.shape().to_vec();
        let [b, l, h] = shape[..] else {
            return Err(Error::ShapeMismatch {
                context: "take_token",
                left: shape,
                right: vec![0, 0, 0],
            });
        };
        if pos >= l {
            return Err(Error::Config(format!(
                "take_token position {pos} >= length {l}"
            )));
        }
        let value = match self.nodes[x].value.buf() {
            Buf::F64(v) => {
                let mut y = Vec::with_capacity(b * h);
                for bi in 0..b {
                    y.extend_from_slice(&v[(bi * l + pos) * h..(bi * l + pos + 1) * h]);
                }
                Tensor::from_f64(&[b, h], y, Dtype::F64)?
            }
            Buf::F32(v) => {
                let mut y = Vec::with_capacity(b * h);
                for bi in 0..b {
                    y.extend_from_slice(&v[(bi * l + pos) * h..(bi * l + pos + 1) * h]);
                }
                Tensor::from_f32(&[b, h], y, Dtype::F32)?
            }
        };
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::TakeToken { x, pos }))
    }

    /// Gather rows of a `[R, F]` (or `[B, L, F]`) tensor into `[T, F]`.
    pub fn pack_rows(&mut self, x: VarId, gather: &[usize]) -> Result<VarId> {
        let shape = self.nodes[x].value.shape().to_vec();
        let f = *shape
            .last()
            .ok_or_else(|| Error::Config("pack_rows on 0-rank tensor".into()))?;
        let rows = self.nodes[x].value.numel() / f;
        for &g in gather {
            if g >= rows {
                return Err(Error::Packing(format!(
                    "gather index {g} out of {rows} rows"
                )));
            }
        }
        let t = gather.len();
        let value = match self.nodes[x].value.buf() {
            Buf::F64(v) => {
                let mut y = Vec::with_capacity(t * f);
                for &g in gather {
                    y.extend_from_slice(&v[g * f..(g + 1) * f]);
                }
                Tensor::from_f64(&[t, f], y, Dtype::F64)?
            }
            Buf::F32(v) => {
                let mut y = Vec::with_capacity(t * f);
                for &g in gather {
                    y.extend_from_slice(&v[g * f..(g + 1) * f]);
                }
                Tensor::from_f32(&[t, f], y, Dtype::F32)?
            }
        };
        let needs = self.needs(x);
        Ok(self.push(
            value,
            needs,
            Op::PackRows {
                x,
                gather: gather.to_vec(),
            },
        ))
    }

    /// Scatter `[T, F]` rows into a zero-filled `[out_rows, F]` (reshaped by
    /// the caller), inverse of `pack_rows`.
    pub fn unpack_rows(
        &mut self,
        x: VarId,
        scatter: &[usize],
        out_shape: &[usize],
    ) -> Result<VarId> {
        let shape = self.nodes[x].value.shape().to_vec();
        let f = *shape
            .last()
            .ok_or_else(|| Error::Config("unpack_rows on 0-rank tensor".into()))?;
        let t = self.nodes[x].value.numel() / f;
        if scatter.len() != t {
            return Err(Error::Packing(format!(
                "scatter has {} entries for {t} rows",
                scatter.len()
            )));
        }
        let out_n: usize = out_shape.iter().product();
        if !out_n.is_multiple_of(f) {
            return Err(Error::ShapeMismatch {
                context: "unpack_rows",
                left: out_shape.to_vec(),
                right: vec![f],
            });
        }
        let out_rows = out_n / f;
        for &s in scatter {
            if s >= out_rows {
                return Err(Error::Packing(format!(
                    "scatter index {s} out of {out_rows} rows"
                )));
            }
        }
        let value = match self.nodes[x].value.buf() {
            Buf::F64(v) => {
                let mut y = vec![0.0f64; out_rows * f];
                for (r, &s) in scatter.iter().enumerate() {
                    y[s * f..(s + 1) * f].copy_from_slice(&v[r * f..(r + 1) * f]);
                }
                Tensor::from_f64(out_shape, y, Dtype::F64)?
            }
            Buf::F32(v) => {
                let mut y = vec![0.0f32; out_rows * f];
                for (r, &s) in scatter.iter().enumerate() {
                    y[s * f..(s + 1) * f].copy_from_slice(&v[r * f..(r + 1) * f]);
                }
                Tensor::from_f32(out_shape, y, Dtype::F32)?
            }
        };
        let needs = self.needs(x);
        let _ = out_rows;
        Ok(self.push(
            value,
            needs,
            Op::UnpackRows {
                x,
                scatter: scatter.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy over labeled positions. `labels` uses -100 as the
    /// ignore index; logits are `[.., V]` with one label per row.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[i32]) -> Result<VarId> {
        let shape = self.nodes[logits].value.shape().to_vec();
        let v = *shape
            .last()
            .ok_or_else(|| Error::Config("cross_entropy on 0-rank tensor".into()))?;
        let rows = self.nodes[logits].value.numel() / v;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy labels",
                left: vec![labels.len()],
                right: vec![rows],
            });
        }
        for &l in labels {
            if l != -100 && (l < 0 || l as usize >= v) {
                return Err(Error::Data(format!("label {l} out of vocab range {v}")));
            }
        }
        let n_valid = labels.iter().filter(|&&l| l != -100).count();
        if n_valid == 0 {
            return Err(Error::Data("cross_entropy: no labeled positions".into()));
        }
        let needs = self.needs(logits);
        let (loss, probs) = match self.nodes[logits].value.buf() {
            Buf::F64(z) => {
                let (loss, p) = ce_fwd(z, labels, v, n_valid)?;
                (loss, Buf::F64(p))
            }
            Buf::F32(z) => {
                let (loss, p) = ce_fwd(z, labels, v, n_valid)?;
                (loss, Buf::F32(p))
            }
        };
        let value = Tensor::scalar(loss, self.carrier(logits));
        Ok(self.push(
            value,
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                n_valid,
            },
        ))
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, pred: VarId, targets: &[f64]) -> Result<VarId> {
        let n = self.nodes[pred].value.numel();
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                context: "mse targets",
                left: vec![targets.len()],
                right: vec![n],
            });
        }
        let p = self.nodes[pred].value.to_vec_f64();
        let loss = p
            .iter()
            .zip(targets)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        let value = Tensor::scalar(loss, self.carrier(pred));
        let needs = self.needs(pred);
        Ok(self.push(
            value,
            needs,
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.nodes[x].value.to_vec_f64().iter().sum();
        let value = Tensor::scalar(s, self.carrier(x));
        let needs = self.needs(x);
        self.push(value, needs, Op::Sum { x })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; gradients accumulate additively.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Config("backward expects a scalar loss".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(match self.carrier(loss) {
            Dtype::F64 => Buf::F64(vec![1.0]),
            _ => Buf::F32(vec![1.0]),
        });
        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let dy = self.grads[id].take().expect("grad present");
            backward_op(&self.nodes, &mut self.grads, id, &dy)?;
            self.grads[id] = Some(dy);
        }
        Ok(())
    }

    pub fn grad_buf(&self, v: VarId) -> Option<&Buf> {
        self.grads[v].as_ref()
    }

    pub fn grad_f64(&self, v: VarId) -> Option<Vec<f64>> {
        self.grads[v].as_ref().map(|g| match g {
            Buf::F32(x) => x.iter().map(|&e| e as f64).collect(),
            Buf::F64(x) => x.clone(),
        })
    }

    /// Gradient as a tensor of the var's shape and carrier dtype.
    pub fn grad_tensor(&self, v: VarId) -> Option<Tensor> {
        let shape = self.nodes[v].value.shape().to_vec();
        self.grads[v].as_ref().map(|g| match g {
            Buf::F32(x) => Tensor::from_f32(&shape, x.clone(), Dtype::F32).expect("grad shape"),
            Buf::F64(x) => Tensor::from_f64(&shape, x.clone(), Dtype::F64).expect("grad shape"),
        })
    }
}

fn add_bias_rows<T: Real>(y: &mut [T], bias: &[T], cols: usize) {
    for row in y.chunks_mut(cols) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn matmul_bt<T: Real>(x: &[T], w: &[T], rows: usize, k: usize, v: usize) -> Vec<T> {
    // y[r][j] = sum_t x[r][t] * w[j][t]
    let mut y = vec![T::ZERO; rows * v];
    for r in 0..rows {
        let xrow = &x[r * k..(r + 1) * k];
        for j in 0..v {
            let wrow = &w[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&a, &b) in xrow.iter().zip(wrow) {
                acc += a * b;
            }
            y[r * v + j] = acc;
        }
    }
    y
}

fn layer_norm_fwd<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    h: usize,
    eps: f64,
    low_precision: bool,
) -> (Vec<T>, Vec<T>, Vec<f64>) {
    let rows = x.len() / h;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv_stds = Vec::with_capacity(rows);
    let round = |v: T| -> T {
        if low_precision {
            T::from_f64(bf16_round(v.to_f64() as f32) as f64)
        } else {
            v
        }
    };
    for r in 0..rows {
        let row = &x[r * h..(r + 1) * h];
        let rr: Vec<T> = row.iter().map(|&v| round(v)).collect();
        let mut mean = T::ZERO;
        for &v in &rr {
            mean += v;
        }
        mean = mean / T::from_f64(h as f64);
        let mut var = T::ZERO;
        for &v in &rr {
            let d = v - mean;
            var += d * d;
        }
        var = var / T::from_f64(h as f64);
        let inv_std = T::ONE / (var + T::from_f64(eps)).sqrt();
        inv_stds.push(inv_std.to_f64());
        for i in 0..h {
            let xh = round((rr[i] - mean) * inv_std);
            xhat[r * h + i] = xh;
            y[r * h + i] = round(gamma[i] * xh + beta[i]);
        }
    }
    (y, xhat, inv_stds)
}

fn ce_fwd<T: Real>(z: &[T], labels: &[i32], v: usize, n_valid: usize) -> Result<(f64, Vec<T>)> {
    let rows = labels.len();
    let mut probs = vec![T::ZERO; rows * v];
    let mut loss = 0.0f64;
    for r in 0..rows {
        let row = &z[r * v..(r + 1) * v];
        let mut mx = T::neg_infinity();
        for &e in row {
            mx = mx.maximum(e);
        }
        if mx == T::neg_infinity() {
            return Err(Error::DegenerateSlice);
        }
        let mut sum = T::ZERO;
        let prow = &mut probs[r * v..(r + 1) * v];
        for (p, &e) in prow.iter_mut().zip(row) {
            *p = (e - mx).exp();
            sum += *p;
        }
        for p in prow.iter_mut() {
            *p = *p / sum;
        }
        let l = labels[r];
        if l != -100 {
            let p = prow[l as usize].to_f64();
            loss -= p.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok((loss / n_valid as f64, probs))
}

macro_rules! with_carrier {
    ($buf:expr, |$slice:ident| $body:expr) => {
        match $buf {
            Buf::F32($slice) => {
                let $slice: &[f32] = $slice;
                Buf::F32($body)
            }
            Buf::F64($slice) => {
                let $slice: &[f64] = $slice;
                Buf::F64($body)
            }
        }
    };
}

fn accumulate(slot: &mut Option<Buf>, delta: Buf) {
    match slot {
        None => *slot = Some(delta),
        Some(Buf::F32(dst)) => {
            let Buf::F32(src) = delta else {
                panic!("carrier mismatch in grad accumulation")
            };
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Some(Buf::F64(dst)) => {
            let Buf::F64(src) = delta else {
                panic!("carrier mismatch in grad accumulation")
            };
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

#[allow(clippy::too_many_lines)]
fn backward_op(nodes: &[Node], grads: &mut [Option<Buf>], id: usize, dy: &Buf) -> Result<()> {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            let bf16_mode =
                nodes[*a].value.dtype() == Dtype::Bf16 || nodes[*b].value.dtype() == Dtype::Bf16;
            let maybe_round = |buf: &Buf| -> Buf {
                match buf {
                    Buf::F32(v) if bf16_mode => {
                        Buf::F32(v.iter().map(|&x| bf16_round(x)).collect())
                    }
                    other => other.clone(),
                }
            };
            if nodes[*a].needs {
                let bb = maybe_round(nodes[*b].value.buf());
                let d = match (dy, &bb) {
                    (Buf::F32(g), Buf::F32(bv)) => Buf::F32(matmul_bt(g, bv, m, n, k)),
                    (Buf::F64(g), Buf::F64(bv)) => Buf::F64(matmul_bt(g, bv, m, n, k)),
                    _ => panic!("carrier mismatch"),
                };
                // dA = dY · B^T, but matmul_bt computes x·w^T with w as [v,k]:
                // here rows=m, k=n, v=k, w=B in [k,n] read as [v=k? ...]
                accumulate(&mut grads[*a], d);
            }
            if nodes[*b].needs {
                let aa = maybe_round(nodes[*a].value.buf());
                let d = match (dy, &aa) {
                    (Buf::F32(g), Buf::F32(av)) => {
                        let mut d = vec![0.0f32; k * n];
                        at_matmul(av, g, m, k, n, &mut d);
                        Buf::F32(d)
                    }
                    (Buf::F64(g), Buf::F64(av)) => {
                        let mut d = vec![0.0f64; k * n];
                        at_matmul(av, g, m, k, n, &mut d);
                        Buf::F64(d)
                    }
                    _ => panic!("carrier mismatch"),
                };
                accumulate(&mut grads[*b], d);
            }
        }
        Op::Linear { x, w, b, ff } => {
            let ws = nodes[*w].value.shape();
            let (k, out) = (ws[0], ws[1]);
            let rows = nodes[*x].value.numel() / k;
            let bf16_mode =
                nodes[*x].value.dtype() == Dtype::Bf16 || nodes[*w].value.dtype() == Dtype::Bf16;
            let maybe_round = |buf: &Buf| -> Buf {
                match buf {
                    Buf::F32(v) if bf16_mode => {
                        Buf::F32(v.iter().map(|&e| bf16_round(e)).collect())
                    }
                    other => other.clone(),
                }
            };
            if nodes[*x].needs {
                if *ff {
                    instrument::add_ff_mults((rows * out * k) as u64);
                }
                let wb = maybe_round(nodes[*w].value.buf());
                let d = match (dy, &wb) {
                    // dX = dY · W^T
                    (Buf::F32(g), Buf::F32(wv)) => {
                        let mut d = vec![0.0f32; rows * k];
                        dy_wt(g, wv, rows, k, out, &mut d);
                        Buf::F32(d)
                    }
                    (Buf::F64(g), Buf::F64(wv)) => {
                        let mut d = vec![0.0f64; rows * k];
                        dy_wt(g, wv, rows, k, out, &mut d);
                        Buf::F64(d)
                    }
                    _ => panic!("carrier mismatch"),
                };
                accumulate(&mut grads[*x], d);
            }
            if nodes[*w].needs {
                if *ff {
                    instrument::add_ff_mults((rows * k * out) as u64);
                }
                let xb = maybe_round(nodes[*x].value.buf());
                let d = match (dy, &xb) {
                    // dW = X^T · dY
                    (Buf::F32(g), Buf::F32(xv)) => {
                        let mut d = vec![0.0f32; k * out];
                        at_matmul(xv, g, rows, k, out, &mut d);
                        Buf::F32(d)
                    }
                    (Buf::F64(g), Buf::F64(xv)) => {
                        let mut d = vec![0.0f64; k * out];
                        at_matmul(xv, g, rows, k, out, &mut d);
                        Buf::F64(d)
                    }
                    _ => panic!("carrier mismatch"),
                };
                accumulate(&mut grads[*w], d);
            }
            if let Some(bb) = b {
                if nodes[*bb].needs {
                    let d = with_carrier!(dy, |g| {
                        let mut d = vec![Default::default(); out];
                        for row in g.chunks(out) {
                            for (s, &e) in d.iter_mut().zip(row) {
                                *s += e;
                            }
                        }
                        d
                    });
                    accumulate(&mut grads[*bb], d);
                }
            }
        }
        Op::MatmulT { x, w, b, ff } => {
            let ws = nodes[*w].value.shape();
            let (v, k) = (ws[0], ws[1]);
            let rows = nodes[*x].value.numel() / k;
            if let Some(bb) = b {
                if nodes[*bb].needs {
                    let d = with_carrier!(dy, |g| {
                        let mut d = vec![Default::default(); v];
                        for row in g.chunks(v) {
                            for (s, &e) in d.iter_mut().zip(row) {
                                *s += e;
                            }
                        }
                        d
                    });
                    accumulate(&mut grads[*bb], d);
                }
            }
            if nodes[*x].needs {
                if *ff {
                    instrument::add_ff_mults((rows * v * k) as u64);
                }
                // dX = dY · W   (dY: [rows, v], W: [v, k])
                let d = match (dy, nodes[*w].value.buf()) {
                    (Buf::F32(g), Buf::F32(wv)) => {
                        let mut d = vec![0.0f32; rows * k];
                        matmul_kernel(g, wv, rows, v, k, &mut d);
                        Buf::F32(d)
                    }
                    (Buf::F64(g), Buf::F64(wv)) => {
                        let mut d = vec![0.0f64; rows * k];
                        matmul_kernel(g, wv, rows, v, k, &mut d);
                        Buf::F64(d)
                    }
                    _ => panic!("carrier mismatch"),
                };
                accumulate(&mut grads[*x], d);
            }
            if nodes[*w].needs {
                if *ff {
                    instrument::add_ff_mults((rows * v * k) as u64);
                }
                // dW = dY^T · X  (result [v, k])
                let d = match (dy, nodes[*x].value.buf()) {
                    (Buf::F32(g), Buf::F32(xv)) => {
                        let mut d = vec![0.0f32; v * k];
                        at_matmul(g, xv, rows, v, k, &mut d);
                        Buf::F32(d)
                    }
                    (Buf::F64(g), Buf::F64(xv)) => {
                        let mut d = vec![0.0f64; v * k];
                        at_matmul(g, xv, rows, v, k, &mut d);
                        Buf::F64(d)
                    }
                    _ => panic!("carrier mismatch"),
                };
                accumulate(&mut grads[*w], d);
            }
        }
        Op::Add { a, b } => {
            if nodes[*a].needs {
                accumulate(&mut grads[*a], dy.clone());
            }
            if nodes[*b].needs {
                accumulate(&mut grads[*b], dy.clone());
            }
        }
        Op::Mul { a, b } => {
            if nodes[*a].needs {
                let d = mul_bufs(dy, nodes[*b].value.buf());
                accumulate(&mut grads[*a], d);
            }
            if nodes[*b].needs {
                let d = mul_bufs(dy, nodes[*a].value.buf());
                accumulate(&mut grads[*b], d);
            }
        }
        Op::Scale { x, k } => {
            if nodes[*x].needs {
                let d = match dy {
                    Buf::F32(g) => Buf::F32(g.iter().map(|&e| e * *k as f32).collect()),
                    Buf::F64(g) => Buf::F64(g.iter().map(|&e| e * k).collect()),
                };
                accumulate(&mut grads[*x], d);
            }
        }
        Op::Gelu { x } => {
            if nodes[*x].needs {
                let d = match (dy, nodes[*x].value.buf()) {
                    (Buf::F32(g), Buf::F32(xv)) => Buf::F32(
                        g.iter()
                            .zip(xv)
                            .map(|(&e, &v)| e * gelu_grad_scalar(v as f64) as f32)
                            .collect(),
                    ),
                    (Buf::F64(g), Buf::F64(xv)) => Buf::F64(
                        g.iter()
                            .zip(xv)
                            .map(|(&e, &v)| e * gelu_grad_scalar(v))
                            .collect(),
                    ),
                    _ => panic!("carrier mismatch"),
                };
                accumulate(&mut grads[*x], d);
            }
        }
        Op::Softmax { x } => {
            if nodes[*x].needs {
                let cols = *nodes[id].value.shape().last().unwrap();
                let d = match (dy, nodes[id].value.buf()) {
                    (Buf::F32(g), Buf::F32(p)) => Buf::F32(softmax_vjp(g, p, cols)),
                    (Buf::F64(g), Buf::F64(p)) => Buf::F64(softmax_vjp(g, p, cols)),
                    _ => panic!("carrier mismatch"),
                };
                accumulate(&mut grads[*x], d);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            saved,
        } => {
            let h = *nodes[id].value.shape().last().unwrap();
            let (dx, dgamma, dbeta) = match (dy, &saved.xhat, nodes[*gamma].value.buf()) {
                (Buf::F32(g), Buf::F32(xh), Buf::F32(gm)) => {
                    let (a, b, c) = layer_norm_bwd(g, xh, gm, &saved.inv_std, h);
                    (Buf::F32(a), Buf::F32(b), Buf::F32(c))
                }
                (Buf::F64(g), Buf::F64(xh), Buf::F64(gm)) => {
                    let (a, b, c) = layer_norm_bwd(g, xh, gm, &saved.inv_std, h);
                    (Buf::F64(a), Buf::F64(b), Buf::F64(c))
                }
                _ => panic!("carrier mismatch"),
            };
            if nodes[*x].needs {
                accumulate(&mut grads[*x], dx);
            }
            if nodes[*gamma].needs {
                accumulate(&mut grads[*gamma], dgamma);
            }
            if nodes[*beta].needs {
                accumulate(&mut grads[*beta], dbeta);
            }
        }
        Op::Embed { table, ids } => {
            if nodes[*table].needs {
                let h = *nodes[*table].value.shape().last().unwrap();
                let vsize = nodes[*table].value.shape()[0];
                let d = with_carrier!(dy, |g| {
                    let mut d = vec![Default::default(); vsize * h];
                    for (r, &tok) in ids.iter().enumerate() {
                        let dst = &mut d[tok as usize * h..(tok as usize + 1) * h];
                        for (s, &e) in dst.iter_mut().zip(&g[r * h..(r + 1) * h]) {
                            *s += e;
                        }
                    }
                    d
                });
                accumulate(&mut grads[*table], d);
            }
        }
        Op::Dropout { x, keep, scale } => {
            if nodes[*x].needs {
                let d = match dy {
                    Buf::F32(g) => Buf::F32(
                        g.iter()
                            .zip(keep)
                            .map(|(&e, &k)| if k { e * *scale as f32 } else { 0.0 })
                            .collect(),
                    ),
                    Buf::F64(g) => Buf::F64(
                        g.iter()
                            .zip(keep)
                            .map(|(&e, &k)| if k { e * scale } else { 0.0 })
                            .collect(),
                    ),
                };
                accumulate(&mut grads[*x], d);
            }
        }
        Op::Narrow { x, offset, len } => {
            if nodes[*x].needs {
                let cols = *nodes[*x].value.shape().last().unwrap();
                let rows = nodes[*x].value.numel() / cols;
                let d = with_carrier!(dy, |g| {
                    let mut d = vec![Default::default(); rows * cols];
                    for r in 0..rows {
                        d[r * cols + offset..r * cols + offset + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    d
                });
                accumulate(&mut grads[*x], d);
            }
        }
        Op::ConcatLast {
            a,
            b,
            a_cols,
            b_cols,
        } => {
            let rows = nodes[*a].value.numel() / a_cols;
            let w = a_cols + b_cols;
            if nodes[*a].needs {
                let d = with_carrier!(dy, |g| {
                    let mut d = vec![Default::default(); rows * a_cols];
                    for r in 0..rows {
                        d[r * a_cols..(r + 1) * a_cols].copy_from_slice(&g[r * w..r * w + a_cols]);
                    }
                    d
                });
                accumulate(&mut grads[*a], d);
            }
            if nodes[*b].needs {
                let d = with_carrier!(dy, |g| {
                    let mut d = vec![Default::default(); rows * b_cols];
                    for r in 0..rows {
                        d[r * b_cols..(r + 1) * b_cols]
                            .copy_from_slice(&g[r * w + a_cols..(r + 1) * w]);
                    }
                    d
                });
                accumulate(&mut grads[*b], d);
            }
        }
        Op::TakeToken { x, pos } => {
            if nodes[*x].needs {
                let [b, l, h] = nodes[*x].value.shape()[..] else {
                    unreachable!()
                };
                let d = with_carrier!(dy, |g| {
                    let mut d = vec![Default::default(); b * l * h];
                    for bi in 0..b {
                        d[(bi * l + pos) * h..(bi * l + pos + 1) * h]
                            .copy_from_slice(&g[bi * h..(bi + 1) * h]);
                    }
                    d
                });
                accumulate(&mut grads[*x], d);
            }
        }
        Op::PackRows { x, gather } => {
            if nodes[*x].needs {
                let f = *nodes[*x].value.shape().last().unwrap();
                let rows = nodes[*x].value.numel() / f;
                let d = with_carrier!(dy, |g| {
                    let mut d = vec![Default::default(); rows * f];
                    for (r, &src) in gather.iter().enumerate() {
                        let dst = &mut d[src * f..(src + 1) * f];
                        for (s, &e) in dst.iter_mut().zip(&g[r * f..(r + 1) * f]) {
                            *s += e;
                        }
                    }
                    d
                });
                accumulate(&mut grads[*x], d);
            }
        }
        Op::UnpackRows { x, scatter } => {
            if nodes[*x].needs {
                let f = *nodes[*x].value.shape().last().unwrap();
                let d = with_carrier!(dy, |g| {
                    let mut d = vec![Default::default(); scatter.len() * f];
                    for (r, &dst) in scatter.iter().enumerate() {
                        d[r * f..(r + 1) * f].copy_from_slice(&g[dst * f..(dst + 1) * f]);
                    }
                    d
                });
                accumulate(&mut grads[*x], d);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            n_valid,
        } => {
            if nodes[*logits].needs {
                let v = *nodes[*logits].value.shape().last().unwrap();
                let gscale = match dy {
                    Buf::F32(g) => g[0] as f64,
                    Buf::F64(g) => g[0],
                };
                let d = with_carrier!(probs, |p| {
                    let mut d = vec![Default::default(); p.len()];
                    for (r, &l) in labels.iter().enumerate() {
                        if l == -100 {
                            continue;
                        }
                        let prow = &p[r * v..(r + 1) * v];
                        let drow = &mut d[r * v..(r + 1) * v];
                        let scale = gscale / *n_valid as f64;
                        for (de, &pe) in drow.iter_mut().zip(prow) {
                            *de = mul_f64(pe, scale);
                        }
                        drow[l as usize] -= mul_f64(one_like(p[0]), scale);
                    }
                    d
                });
                accumulate(&mut grads[*logits], d);
            }
        }
        Op::Mse { pred, targets } => {
            if nodes[*pred].needs {
                let n = targets.len() as f64;
                let gscale = match dy {
                    Buf::F32(g) => g[0] as f64,
                    Buf::F64(g) => g[0],
                };
                let p = nodes[*pred].value.to_vec_f64();
                let dvals: Vec<f64> = p
                    .iter()
                    .zip(targets)
                    .map(|(&a, &b)| 2.0 * (a - b) * gscale / n)
                    .collect();
                let d = match nodes[*pred].value.buf() {
                    Buf::F32(_) => Buf::F32(dvals.iter().map(|&e| e as f32).collect()),
                    Buf::F64(_) => Buf::F64(dvals),
                };
                accumulate(&mut grads[*pred], d);
            }
        }
        Op::Sum { x } => {
            if nodes[*x].needs {
                let n = nodes[*x].value.numel();
                let d = match dy {
                    Buf::F32(g) => Buf::F32(vec![g[0]; n]),
                    Buf::F64(g) => Buf::F64(vec![g[0]; n]),
                };
                accumulate(&mut grads[*x], d);
            }
        }
        Op::Attn(node) => {
            crate::attention::attn_backward(nodes, grads, id, node, dy)?;
        }
    }
    Ok(())
}

trait ScalarOps: Copy {
    fn one() -> Self;
    fn mulf(self, k: f64) -> Self;
}
impl ScalarOps for f32 {
    fn one() -> Self {
        1.0
    }
    fn mulf(self, k: f64) -> Self {
        (self as f64 * k) as f32
    }
}
impl ScalarOps for f64 {
    fn one() -> Self {
        1.0
    }
    fn mulf(self, k: f64) -> Self {
        self * k
    }
}

fn one_like<T: ScalarOps>(_: T) -> T {
    T::one()
}

fn mul_f64<T: ScalarOps>(x: T, k: f64) -> T {
    x.mulf(k)
}

fn mul_bufs(a: &Buf, b: &Buf) -> Buf {
    match (a, b) {
        (Buf::F32(x), Buf::F32(y)) => Buf::F32(x.iter().zip(y).map(|(&p, &q)| p * q).collect()),
        (Buf::F64(x), Buf::F64(y)) => Buf::F64(x.iter().zip(y).map(|(&p, &q)| p * q).collect()),
        _ => panic!("carrier mismatch"),
    }
}

/// `out[k][n] += sum_m a[m][k] * b[m][n]` — A^T·B without materializing A^T.
fn at_matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for mi in 0..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let brow = &b[mi * n..(mi + 1) * n];
        for (ki, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let orow = &mut out[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r][k] += sum_o dy[r][o] * w[k][o]` — dY·W^T with W in [k, out] layout.
fn dy_wt<T: Real>(dy: &[T], w: &[T], rows: usize, k: usize, out: usize, dx: &mut [T]) {
    for r in 0..rows {
        let g = &dy[r * out..(r + 1) * out];
        let drow = &mut dx[r * k..(r + 1) * k];
        for (ki, d) in drow.iter_mut().enumerate() {
            let wrow = &w[ki * out..(ki + 1) * out];
            let mut acc = T::ZERO;
            for (&ge, &we) in g.iter().zip(wrow) {
                acc += ge * we;
            }
            *d = acc;
        }
    }
}

fn softmax_vjp<T: Real>(dy: &[T], p: &[T], cols: usize) -> Vec<T> {
    let mut d = vec![T::ZERO; dy.len()];
    for r in 0..dy.len() / cols {
        let gr = &dy[r * cols..(r + 1) * cols];
        let pr = &p[r * cols..(r + 1) * cols];
        let mut dot = T::ZERO;
        for (&g, &pe) in gr.iter().zip(pr) {
            dot += g * pe;
        }
        let dr = &mut d[r * cols..(r + 1) * cols];
        for i in 0..cols {
            dr[i] = pr[i] * (gr[i] - dot);
        }
    }
    d
}

fn layer_norm_bwd<T: Real>(
    dy: &[T],
    xhat: &[T],
    gamma: &[T],
    inv_std: &[f64],
    h: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / h;
    let mut dx = vec![T::ZERO; dy.len()];
    let mut dgamma = vec![T::ZERO; h];
    let mut dbeta = vec![T::ZERO; h];
    let hn = T::from_f64(h as f64);
    for r in 0..rows {
        let g = &dy[r * h..(r + 1) * h];
        let xh = &xhat[r * h..(r + 1) * h];
        let istd = T::from_f64(inv_std[r]);
        let mut sum_dxhat = T::ZERO;
        let mut sum_dxhat_xhat = T::ZERO;
        for i in 0..h {
            let dxh = g[i] * gamma[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[i];
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
        }
        let dr = &mut dx[r * h..(r + 1) * h];
        for i in 0..h {
            let dxh = g[i] * gamma[i];
            dr[i] = istd * (dxh - sum_dxhat / hn - xh[i] * sum_dxhat_xhat / hn);
        }
    }
    (dx, dgamma, dbeta)
}

// ── finite-difference verification ──────────────────────────────────

/// Max relative error between the tape gradient of `f` at `x` and a central
/// finite difference, computed entirely in F64.
///
/// The error metric is `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let params = [x.cast(Dtype::F64)];
    grad_check_params(|tape, vars| f(tape, vars[0]), &params, eps)
}

/// Multi-tensor variant of [`grad_check`]: every coordinate of every entry of
/// `params` is perturbed.
pub fn grad_check_params<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let params: Vec<Tensor> = params.iter().map(|p| p.cast(Dtype::F64)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<VarId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Eval(
                "grad_check function must return a scalar".into(),
            ));
        }
        let y = tape.value(out).get(0);
        if !y.is_finite() {
            return Err(Error::Eval(format!("non-finite function value {y}")));
        }
        Ok(y)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<VarId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Eval(
            "grad_check function must return a scalar".into(),
        ));
    }
    if !tape.value(out).get(0).is_finite() {
        return Err(Error::Eval("non-finite function value".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&params)
        .map(|(&v, p)| tape.grad_f64(v).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for (i, &a) in analytic[pi].iter().enumerate() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi].set(i, p.get(i) + eps);
            minus[pi].set(i, p.get(i) - eps);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let err = (a - fd).abs() / fd.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
