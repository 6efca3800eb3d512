//! Encoder building blocks and full model assembly.
//!
//! The block is post-LN, original-BERT wiring: `y = LN(x + Attn(x))`,
//! `z = LN(y + FF(y))`. The feedforward is a GeGLU when `use_geglu` is set
//! (naive two-matmul or fused single-matmul form, numerically identical) and
//! a plain GeLU MLP otherwise. The MLM decoder is tied to the token
//! embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alibi::{alibi_slopes, AlibiSlopes};
use crate::attention::{
    mhsa_naive, mhsa_tiled, mhsa_unpadded, AttentionMask, AttentionWeights, AttnVars,
};
use crate::config::{EncoderConfig, GluVariant};
use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{randn_tensor, Dtype, Tensor};
use crate::unpad::packing_plan;

const INIT_STD: f64 = 0.02;

// ── weights ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LnWeights {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LnWeights {
    fn ones(h: usize) -> LnWeights {
        LnWeights {
            gamma: Tensor::from_f32(&[h], vec![1.0; h], Dtype::F32).expect("ln gamma"),
            beta: Tensor::zeros(&[h], Dtype::F32),
        }
    }
}

/// Gated feedforward weights in naive (two-matrix) storage. The fused
/// storage concatenates `w1 | v` column-wise into one `hidden x 2I` matrix.
#[derive(Clone, Debug)]
pub struct GegluWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub v: Tensor,
    pub bv: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Fused storage: both input projections in one widened matmul.
#[derive(Clone, Debug)]
pub struct GegluFusedWeights {
    pub w12: Tensor,
    pub b12: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Column-concatenate naive storage into fused storage.
pub fn geglu_fuse(w: &GegluWeights) -> GegluFusedWeights {
    let [h, i] = w.w1.shape() else {
        panic!("w1 must be 2-D")
    };
    let (h, i) = (*h, *i);
    let (w1, v) = (w.w1.to_vec_f64(), w.v.to_vec_f64());
    let mut fused = Vec::with_capacity(h * 2 * i);
    for r in 0..h {
        fused.extend_from_slice(&w1[r * i..(r + 1) * i]);
        fused.extend_from_slice(&v[r * i..(r + 1) * i]);
    }
    let mut b12 = w.b1.to_vec_f64();
    b12.extend(w.bv.to_vec_f64());
    GegluFusedWeights {
        w12: Tensor::from_f64(&[h, 2 * i], fused, w.w1.dtype()).expect("fused shape"),
        b12: Tensor::from_f64(&[2 * i], b12, w.b1.dtype()).expect("fused bias"),
        w2: w.w2.clone(),
        b2: w.b2.clone(),
    }
}

/// Split fused storage back into naive storage. Errors on odd fused width.
pub fn geglu_split(w: &GegluFusedWeights) -> Result<GegluWeights> {
    let [h, two_i] = w.w12.shape() else {
        return Err(Error::ShapeMismatch {
            context: "geglu_split",
            left: w.w12.shape().to_vec(),
            right: vec![0, 0],
        });
    };
    let (h, two_i) = (*h, *two_i);
    if two_i % 2 != 0 {
        return Err(Error::Config(format!("fused GLU width {two_i} is odd")));
    }
    let i = two_i / 2;
    let fused = w.w12.to_vec_f64();
    let (mut w1, mut v) = (Vec::with_capacity(h * i), Vec::with_capacity(h * i));
    for r in 0..h {
        w1.extend_from_slice(&fused[r * two_i..r * two_i + i]);
        v.extend_from_slice(&fused[r * two_i + i..(r + 1) * two_i]);
    }
    let b12 = w.b12.to_vec_f64();
    Ok(GegluWeights {
        w1: Tensor::from_f64(&[h, i], w1, w.w12.dtype())?,
        b1: Tensor::from_f64(&[i], b12[..i].to_vec(), w.b12.dtype())?,
        v: Tensor::from_f64(&[h, i], v, w.w12.dtype())?,
        bv: Tensor::from_f64(&[i], b12[i..].to_vec(), w.b12.dtype())?,
        w2: w.w2.clone(),
        b2: w.b2.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Geglu(GegluWeights),
    Mlp(MlpWeights),
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub ln1: LnWeights,
    pub ff: FeedForward,
    pub ln2: LnWeights,
}

#[derive(Clone, Debug)]
pub struct EmbeddingWeights {
    pub token: Tensor,
    pub segment: Tensor,
    /// Present only without ALiBi; `max_seq_len` rows.
    pub position: Option<Tensor>,
    pub ln: LnWeights,
}

#[derive(Clone, Debug)]
pub struct MlmHeadWeights {
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    pub ln: LnWeights,
    /// Decoder weight is the token table transposed; only the bias is owned.
    pub decoder_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub embeddings: EmbeddingWeights,
    pub blocks: Vec<BlockWeights>,
    pub mlm: MlmHeadWeights,
    pub slopes: AlibiSlopes,
}

impl Model {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, i, v) = (config.hidden, config.intermediate, config.vocab_size);
        let w =
            |shape: &[usize], rng: &mut ChaCha8Rng| randn_tensor(shape, INIT_STD, Dtype::F32, rng);
        let embeddings = EmbeddingWeights {
            token: w(&[v, h], &mut rng),
            segment: w(&[2, h], &mut rng),
            position: if config.use_alibi {
                None
            } else {
                Some(w(&[config.max_seq_len, h], &mut rng))
            },
            ln: LnWeights::ones(h),
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = AttentionWeights::init(h, config.n_heads, INIT_STD, &mut rng)?;
            let ff = if config.use_geglu {
                FeedForward::Geglu(GegluWeights {
                    w1: w(&[h, i], &mut rng),
                    b1: Tensor::zeros(&[i], Dtype::F32),
                    v: w(&[h, i], &mut rng),
                    bv: Tensor::zeros(&[i], Dtype::F32),
                    w2: w(&[i, h], &mut rng),
                    b2: Tensor::zeros(&[h], Dtype::F32),
                })
            } else {
                FeedForward::Mlp(MlpWeights {
                    w1: w(&[h, i], &mut rng),
                    b1: Tensor::zeros(&[i], Dtype::F32),
                    w2: w(&[i, h], &mut rng),
                    b2: Tensor::zeros(&[h], Dtype::F32),
                })
            };
            blocks.push(BlockWeights {
                attn,
                ln1: LnWeights::ones(h),
                ff,
                ln2: LnWeights::ones(h),
            });
        }
        let mlm = MlmHeadWeights {
            dense_w: w(&[h, h], &mut rng),
            dense_b: Tensor::zeros(&[h], Dtype::F32),
            ln: LnWeights::ones(h),
            decoder_bias: Tensor::zeros(&[v], Dtype::F32),
        };
        Ok(Model {
            config: config.clone(),
            embeddings,
            blocks,
            mlm,
            slopes: alibi_slopes(config.n_heads)?,
        })
    }

    /// Visit every learnable tensor in a fixed, documented order.
    pub fn visit_params<'m>(&'m self, f: &mut dyn FnMut(String, &'m Tensor)) {
        f("embeddings.token".into(), &self.embeddings.token);
        f("embeddings.segment".into(), &self.embeddings.segment);
        if let Some(p) = &self.embeddings.position {
            f("embeddings.position".into(), p);
        }
        f("embeddings.ln.gamma".into(), &self.embeddings.ln.gamma);
        f("embeddings.ln.beta".into(), &self.embeddings.ln.beta);
        for (li, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{li}.{s}");
            f(p("attn.wq"), &b.attn.wq);
            f(p("attn.bq"), &b.attn.bq);
            f(p("attn.wk"), &b.attn.wk);
            f(p("attn.bk"), &b.attn.bk);
            f(p("attn.wv"), &b.attn.wv);
            f(p("attn.bv"), &b.attn.bv);
            f(p("attn.wo"), &b.attn.wo);
            f(p("attn.bo"), &b.attn.bo);
            f(p("ln1.gamma"), &b.ln1.gamma);
            f(p("ln1.beta"), &b.ln1.beta);
            match &b.ff {
                FeedForward::Geglu(g) => {
                    f(p("ff.w1"), &g.w1);
                    f(p("ff.b1"), &g.b1);
                    f(p("ff.v"), &g.v);
                    f(p("ff.bv"), &g.bv);
                    f(p("ff.w2"), &g.w2);
                    f(p("ff.b2"), &g.b2);
                }
                FeedForward::Mlp(m) => {
                    f(p("ff.w1"), &m.w1);
                    f(p("ff.b1"), &m.b1);
                    f(p("ff.w2"), &m.w2);
                    f(p("ff.b2"), &m.b2);
                }
            }
            f(p("ln2.gamma"), &b.ln2.gamma);
            f(p("ln2.beta"), &b.ln2.beta);
        }
        f("mlm.dense.w".into(), &self.mlm.dense_w);
        f("mlm.dense.b".into(), &self.mlm.dense_b);
        f("mlm.ln.gamma".into(), &self.mlm.ln.gamma);
        f("mlm.ln.beta".into(), &self.mlm.ln.beta);
        f("mlm.decoder_bias".into(), &self.mlm.decoder_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embeddings.token".into(), &mut self.embeddings.token);
        f("embeddings.segment".into(), &mut self.embeddings.segment);
        if let Some(p) = &mut self.embeddings.position {
            f("embeddings.position".into(), p);
        }
        f("embeddings.ln.gamma".into(), &mut self.embeddings.ln.gamma);
        f("embeddings.ln.beta".into(), &mut self.embeddings.ln.beta);
        for (li, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{li}.{s}");
            f(p("attn.wq"), &mut b.attn.wq);
            f(p("attn.bq"), &mut b.attn.bq);
            f(p("attn.wk"), &mut b.attn.wk);
            f(p("attn.bk"), &mut b.attn.bk);
            f(p("attn.wv"), &mut b.attn.wv);
            f(p("attn.bv"), &mut b.attn.bv);
            f(p("attn.wo"), &mut b.attn.wo);
            f(p("attn.bo"), &mut b.attn.bo);
            f(p("ln1.gamma"), &mut b.ln1.gamma);
            f(p("ln1.beta"), &mut b.ln1.beta);
            match &mut b.ff {
                FeedForward::Geglu(g) => {
                    f(p("ff.w1"), &mut g.w1);
                    f(p("ff.b1"), &mut g.b1);
                    f(p("ff.v"), &mut g.v);
                    f(p("ff.bv"), &mut g.bv);
                    f(p("ff.w2"), &mut g.w2);
                    f(p("ff.b2"), &mut g.b2);
                }
                FeedForward::Mlp(m) => {
                    f(p("ff.w1"), &mut m.w1);
                    f(p("ff.b1"), &mut m.b1);
                    f(p("ff.w2"), &mut m.w2);
                    f(p("ff.b2"), &mut m.b2);
                }
            }
            f(p("ln2.gamma"), &mut b.ln2.gamma);
            f(p("ln2.beta"), &mut b.ln2.beta);
        }
        f("mlm.dense.w".into(), &mut self.mlm.dense_w);
        f("mlm.dense.b".into(), &mut self.mlm.dense_b);
        f("mlm.ln.gamma".into(), &mut self.mlm.ln.gamma);
        f("mlm.ln.beta".into(), &mut self.mlm.ln.beta);
        f("mlm.decoder_bias".into(), &mut self.mlm.decoder_bias);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Count of learnable scalars, from the structure itself.
    pub fn n_params(&self) -> u64 {
        let mut n = 0u64;
        self.visit_params(&mut |_, t| n += t.numel() as u64);
        n
    }

    /// Cast every parameter (used by F64 gradient checking).
    pub fn cast(&self, dtype: Dtype) -> Model {
        let mut m = self.clone();
        m.visit_params_mut(&mut |_, t| *t = t.cast(dtype));
        m
    }
}

/// Analytic count of learnable scalars for a configuration: embeddings
/// (token, segment, position when learned, embedding LN), per-layer
/// attention and feedforward with biases, per-layer LNs, and the MLM head
/// (dense + LN + tied decoder bias).
pub fn count_params(config: &EncoderConfig) -> u64 {
    let (h, i, v, l) = (
        config.hidden as u64,
        config.intermediate as u64,
        config.vocab_size as u64,
        config.n_layers as u64,
    );
    let embeddings = v * h
        + 2 * h
        + if config.use_alibi {
            0
        } else {
            config.max_seq_len as u64 * h
        }
        + 2 * h;
    let attn = 4 * (h * h + h);
    let ff = if config.use_geglu {
        (h * i + i) + (h * i + i) + (i * h + h)
    } else {
        (h * i + i) + (i * h + h)
    };
    let per_layer = attn + ff + 2 * 2 * h;
    let head = (h * h + h) + 2 * h + v;
    embeddings + l * per_layer + head
}

// ── tape-registered variable bundles ─────────────────────────────────

#[derive(Clone, Debug)]
pub struct GegluVars {
    pub w1: VarId,
    pub b1: VarId,
    pub v: VarId,
    pub bv: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

#[derive(Clone, Debug)]
pub enum FfVars {
    Geglu(GegluVars),
    Mlp(MlpVars),
}

#[derive(Clone, Debug)]
pub struct LnVars {
    pub gamma: VarId,
    pub beta: VarId,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub attn: AttnVars,
    pub ln1: LnVars,
    pub ff: FfVars,
    pub ln2: LnVars,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub token: VarId,
    pub segment: VarId,
    pub position: Option<VarId>,
    pub emb_ln: LnVars,
    pub blocks: Vec<BlockVars>,
    pub mlm_dense_w: VarId,
    pub mlm_dense_b: VarId,
    pub mlm_ln: LnVars,
    pub mlm_decoder_bias: VarId,
    /// (parameter name, var) in `visit_params` order.
    pub names: Vec<(String, VarId)>,
}

impl Model {
    /// Register all parameters on a tape. Returns the handle bundle; when
    /// `trainable`, gradients will be accumulated for every parameter.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        self.assemble(tape, &mut |tape, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.input(t.clone())
            }
        })
    }

    /// Wire the forward pass to existing tape vars (in `visit_params`
    /// order) instead of registering fresh copies. Used by gradient
    /// checking, where the vars are the perturbed inputs themselves.
    pub fn bind_vars(&self, tape: &mut Tape, vars: &[VarId]) -> ModelVars {
        let mut iter = vars.iter().copied();
        let bound = self.assemble(tape, &mut |_, _| {
            iter.next().expect("one var per parameter")
        });
        assert!(iter.next().is_none(), "more vars than parameters");
        bound
    }

    fn assemble(
        &self,
        tape: &mut Tape,
        make: &mut dyn FnMut(&mut Tape, &Tensor) -> VarId,
    ) -> ModelVars {
        let mut names = Vec::new();
        let mut reg = |tape: &mut Tape, name: String, t: &Tensor| -> VarId {
            let v = make(tape, t);
            names.push((name, v));
            v
        };
        let token = reg(tape, "embeddings.token".into(), &self.embeddings.token);
        let segment = reg(tape, "embeddings.segment".into(), &self.embeddings.segment);
        let position = self
            .embeddings
            .position
            .as_ref()
            .map(|p| reg(tape, "embeddings.position".into(), p));
        let emb_ln = LnVars {
            gamma: reg(
                tape,
                "embeddings.ln.gamma".into(),
                &self.embeddings.ln.gamma,
            ),
            beta: reg(tape, "embeddings.ln.beta".into(), &self.embeddings.ln.beta),
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (li, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{li}.{s}");
            let attn = AttnVars {
                wq: reg(tape, p("attn.wq"), &b.attn.wq),
                bq: reg(tape, p("attn.bq"), &b.attn.bq),
                wk: reg(tape, p("attn.wk"), &b.attn.wk),
                bk: reg(tape, p("attn.bk"), &b.attn.bk),
                wv: reg(tape, p("attn.wv"), &b.attn.wv),
                bv: reg(tape, p("attn.bv"), &b.attn.bv),
                wo: reg(tape, p("attn.wo"), &b.attn.wo),
                bo: reg(tape, p("attn.bo"), &b.attn.bo),
                n_heads: b.attn.n_heads,
            };
            let ln1 = LnVars {
                gamma: reg(tape, p("ln1.gamma"), &b.ln1.gamma),
                beta: reg(tape, p("ln1.beta"), &b.ln1.beta),
            };
            let ff = match &b.ff {
                FeedForward::Geglu(g) => FfVars::Geglu(GegluVars {
                    w1: reg(tape, p("ff.w1"), &g.w1),
                    b1: reg(tape, p("ff.b1"), &g.b1),
                    v: reg(tape, p("ff.v"), &g.v),
                    bv: reg(tape, p("ff.bv"), &g.bv),
                    w2: reg(tape, p("ff.w2"), &g.w2),
                    b2: reg(tape, p("ff.b2"), &g.b2),
                }),
                FeedForward::Mlp(m) => FfVars::Mlp(MlpVars {
                    w1: reg(tape, p("ff.w1"), &m.w1),
                    b1: reg(tape, p("ff.b1"), &m.b1),
                    w2: reg(tape, p("ff.w2"), &m.w2),
                    b2: reg(tape, p("ff.b2"), &m.b2),
                }),
            };
            let ln2 = LnVars {
                gamma: reg(tape, p("ln2.gamma"), &b.ln2.gamma),
                beta: reg(tape, p("ln2.beta"), &b.ln2.beta),
            };
            blocks.push(BlockVars { attn, ln1, ff, ln2 });
        }
        let mlm_dense_w = reg(tape, "mlm.dense.w".into(), &self.mlm.dense_w);
        let mlm_dense_b = reg(tape, "mlm.dense.b".into(), &self.mlm.dense_b);
        let mlm_ln = LnVars {
            gamma: reg(tape, "mlm.ln.gamma".into(), &self.mlm.ln.gamma),
            beta: reg(tape, "mlm.ln.beta".into(), &self.mlm.ln.beta),
        };
        let mlm_decoder_bias = reg(tape, "mlm.decoder_bias".into(), &self.mlm.decoder_bias);
        ModelVars {
            token,
            segment,
            position,
            emb_ln,
            blocks,
            mlm_dense_w,
            mlm_dense_b,
            mlm_ln,
            mlm_decoder_bias,
            names,
        }
    }
}

// ── feedforward ops ──────────────────────────────────────────────────

/// Naive GeGLU: `(GeLU(xW1 + b1) ⊙ (xV + bv)) W2 + b2`, with dropout on the
/// gated product during training.
pub fn geglu_naive(tape: &mut Tape, x: VarId, w: &GegluVars, ff_dropout: f64) -> Result<VarId> {
    let u = tape.linear(x, w.w1, Some(w.b1), true)?;
    let g = tape.linear(x, w.v, Some(w.bv), true)?;
    let act = tape.gelu(u);
    let gated = tape.mul(act, g)?;
    let gated = tape.dropout(gated, ff_dropout);
    tape.linear(gated, w.w2, Some(w.b2), true)
}

/// Fused GeGLU: one widened matmul `x (W1|V)`, sliced into halves, then the
/// same gating. Numerically equal to the naive form.
pub fn geglu_fused(tape: &mut Tape, x: VarId, w: &GegluVars, ff_dropout: f64) -> Result<VarId> {
    let w12 = tape.concat_last(w.w1, w.v)?;
    let b12 = tape.concat_last(w.b1, w.bv)?;
    let i = tape.value(w.w1).shape()[1];
    let uv = tape.linear(x, w12, Some(b12), true)?;
    let u = tape.narrow(uv, 0, i)?;
    let g = tape.narrow(uv, i, i)?;
    let act = tape.gelu(u);
    let gated = tape.mul(act, g)?;
    let gated = tape.dropout(gated, ff_dropout);
    tape.linear(gated, w.w2, Some(w.b2), true)
}

/// Plain GeLU MLP (baseline feedforward).
pub fn mlp(tape: &mut Tape, x: VarId, w: &MlpVars, ff_dropout: f64) -> Result<VarId> {
    let u = tape.linear(x, w.w1, Some(w.b1), true)?;
    let act = tape.gelu(u);
    let act = tape.dropout(act, ff_dropout);
    tape.linear(act, w.w2, Some(w.b2), true)
}

/// Evaluation helper for the naive form on plain tensors.
pub fn geglu_naive_eval(x: &Tensor, w: &GegluWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let vars = GegluVars {
        w1: tape.input(w.w1.clone()),
        b1: tape.input(w.b1.clone()),
        v: tape.input(w.v.clone()),
        bv: tape.input(w.bv.clone()),
        w2: tape.input(w.w2.clone()),
        b2: tape.input(w.b2.clone()),
    };
    let out = geglu_naive(&mut tape, xv, &vars, 0.0)?;
    Ok(tape.value(out).clone())
}

/// Evaluation helper for the fused form on fused-storage weights.
pub fn geglu_fused_eval(x: &Tensor, w: &GegluFusedWeights) -> Result<Tensor> {
    let naive = geglu_split(w)?;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let vars = GegluVars {
        w1: tape.input(naive.w1.clone()),
        b1: tape.input(naive.b1.clone()),
        v: tape.input(naive.v.clone()),
        bv: tape.input(naive.bv.clone()),
        w2: tape.input(naive.w2.clone()),
        b2: tape.input(naive.b2.clone()),
    };
    let out = geglu_fused(&mut tape, xv, &vars, 0.0)?;
    Ok(tape.value(out).clone())
}

/// LayerNorm precision modes for the standalone entry point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LnMode {
    F32,
    Bf16,
}

/// Standalone LayerNorm over the trailing dimension.
pub fn layernorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    mode: LnMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let g = tape.input(gamma.clone());
    let b = tape.input(beta.clone());
    let y = tape.layer_norm(xv, g, b, eps, mode == LnMode::Bf16)?;
    Ok(tape.value(y).clone())
}

// ── embeddings ───────────────────────────────────────────────────────

/// Token + segment (+ learned position without ALiBi) embeddings, followed
/// by LayerNorm and dropout. `positions` carries the within-sequence index
/// of every token (packed streams restart at segment boundaries).
#[allow(clippy::too_many_arguments)]
pub fn embed(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &EncoderConfig,
    token_ids: &[u32],
    segment_ids: &[u32],
    positions: &[usize],
    out_shape: &[usize],
) -> Result<VarId> {
    if segment_ids.len() != token_ids.len() || positions.len() != token_ids.len() {
        return Err(Error::Data("token/segment/position length mismatch".into()));
    }
    for &s in segment_ids {
        if s > 1 {
            return Err(Error::Data(format!("segment id {s} out of range")));
        }
    }
    let h = config.hidden;
    let tok = tape.embed(vars.token, token_ids, out_shape)?;
    let seg = tape.embed(vars.segment, segment_ids, out_shape)?;
    let mut x = tape.add(tok, seg)?;
    match (config.use_alibi, vars.position) {
        (false, Some(pvar)) => {
            let max = config.max_seq_len;
            let mut pos_ids = Vec::with_capacity(positions.len());
            for &p in positions {
                if p >= max {
                    return Err(Error::SequenceTooLong { len: p + 1, max });
                }
                pos_ids.push(p as u32);
            }
            let pos = tape.embed(pvar, &pos_ids, out_shape)?;
            x = tape.add(x, pos)?;
        }
        (true, None) => {}
        _ => {
            return Err(Error::Config(
                "position table presence must match use_alibi".into(),
            ))
        }
    }
    let _ = h;
    let x = tape.layer_norm(
        x,
        vars.emb_ln.gamma,
        vars.emb_ln.beta,
        config.ln_eps,
        config.low_precision_ln,
    )?;
    Ok(tape.dropout(x, config.ff_dropout))
}

// ── encoder block and model forward ──────────────────────────────────

enum Stream<'a> {
    Padded {
        mask: &'a AttentionMask,
    },
    Packed {
        cu: &'a [usize],
        gather: &'a [usize],
        batch: usize,
        len: usize,
    },
}

fn attention_sublayer(
    tape: &mut Tape,
    x: VarId,
    block: &BlockVars,
    config: &EncoderConfig,
    slopes: &AlibiSlopes,
    stream: &Stream,
) -> Result<VarId> {
    match stream {
        Stream::Padded { mask } => match config.attention_key_block {
            Some(kb) => mhsa_tiled(tape, x, &block.attn, slopes, mask, kb),
            None => mhsa_naive(tape, x, &block.attn, slopes, mask, config.attention_dropout),
        },
        Stream::Packed {
            cu,
            gather,
            batch,
            len,
        } => {
            if config.unpad_attention {
                mhsa_unpadded(tape, x, &block.attn, slopes, cu)
            } else {
                // Feedforward-only unpadding: re-pad around attention.
                let h = *tape.value(x).shape().last().unwrap();
                let padded = tape.unpack_rows(x, gather, &[*batch, *len, h])?;
                let lengths: Vec<usize> = cu.windows(2).map(|w| w[1] - w[0]).collect();
                let mask = AttentionMask::from_lengths(&lengths, *len)?;
                let out = match config.attention_key_block {
                    Some(kb) => mhsa_tiled(tape, padded, &block.attn, slopes, &mask, kb)?,
                    None => mhsa_naive(
                        tape,
                        padded,
                        &block.attn,
                        slopes,
                        &mask,
                        config.attention_dropout,
                    )?,
                };
                tape.pack_rows(out, gather)
            }
        }
    }
}

fn encoder_block(
    tape: &mut Tape,
    x: VarId,
    block: &BlockVars,
    config: &EncoderConfig,
    slopes: &AlibiSlopes,
    stream: &Stream,
    batch_rows: usize,
) -> Result<VarId> {
    let attn_out = attention_sublayer(tape, x, block, config, slopes, stream)?;
    let res = tape.add(x, attn_out)?;
    let y = tape.layer_norm(
        res,
        block.ln1.gamma,
        block.ln1.beta,
        config.ln_eps,
        config.low_precision_ln,
    )?;
    let ff_out = match &block.ff {
        FfVars::Geglu(g) => {
            let fused = match config.glu_variant {
                GluVariant::Fused => true,
                GluVariant::Naive => false,
                GluVariant::Auto => batch_rows >= 128,
            };
            if fused {
                geglu_fused(tape, y, g, config.ff_dropout)?
            } else {
                geglu_naive(tape, y, g, config.ff_dropout)?
            }
        }
        FfVars::Mlp(m) => mlp(tape, y, m, config.ff_dropout)?,
    };
    let res2 = tape.add(y, ff_out)?;
    tape.layer_norm(
        res2,
        block.ln2.gamma,
        block.ln2.beta,
        config.ln_eps,
        config.low_precision_ln,
    )
}

/// One post-LN encoder block on a padded `[B, L, H]` stream:
/// `y = LN(x + Attn(x)); z = LN(y + FF(y))`.
pub fn encoder_block_padded(
    tape: &mut Tape,
    x: VarId,
    block: &BlockVars,
    config: &EncoderConfig,
    slopes: &AlibiSlopes,
    mask: &AttentionMask,
) -> Result<VarId> {
    encoder_block(
        tape,
        x,
        block,
        config,
        slopes,
        &Stream::Padded { mask },
        mask.batch,
    )
}

/// A batch ready for the encoder: ids, segments, and the padding mask.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub batch: usize,
    pub len: usize,
    /// `[B * L]` token ids, row-major; padding positions hold the pad id.
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub mask: AttentionMask,
}

impl EncoderInput {
    pub fn validate(&self) -> Result<()> {
        if self.token_ids.len() != self.batch * self.len
            || self.segment_ids.len() != self.token_ids.len()
            || self.mask.batch != self.batch
            || self.mask.len != self.len
        {
            return Err(Error::Data("encoder input dimensions disagree".into()));
        }
        Ok(())
    }
}

impl Model {
    /// Hidden states after all encoder blocks plus the packing plan used
    /// (present when the unpadded path ran).
    #[allow(clippy::type_complexity)]
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input: &EncoderInput,
    ) -> Result<(VarId, Option<(Vec<usize>, Vec<usize>)>)> {
        input.validate()?;
        let (b, l, h) = (input.batch, input.len, self.config.hidden);
        if !self.config.use_alibi && l > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: l,
                max: self.config.max_seq_len,
            });
        }
        if self.config.use_unpadding {
            let (gather, cu) = packing_plan(&input.mask)?;
            let t = gather.len();
            let ids: Vec<u32> = gather.iter().map(|&g| input.token_ids[g]).collect();
            let segs: Vec<u32> = gather.iter().map(|&g| input.segment_ids[g]).collect();
            let mut positions = Vec::with_capacity(t);
            for w in cu.windows(2) {
                positions.extend(0..w[1] - w[0]);
            }
            let mut x = embed(tape, vars, &self.config, &ids, &segs, &positions, &[t, h])?;
            let stream = Stream::Packed {
                cu: &cu,
                gather: &gather,
                batch: b,
                len: l,
            };
            for block in &vars.blocks {
                x = encoder_block(tape, x, block, &self.config, &self.slopes, &stream, b)?;
            }
            Ok((x, Some((gather, cu))))
        } else {
            let positions: Vec<usize> = (0..b * l).map(|i| i % l).collect();
            let mut x = embed(
                tape,
                vars,
                &self.config,
                &input.token_ids,
                &input.segment_ids,
                &positions,
                &[b, l, h],
            )?;
            let stream = Stream::Padded { mask: &input.mask };
            for block in &vars.blocks {
                x = encoder_block(tape, x, block, &self.config, &self.slopes, &stream, b)?;
            }
            Ok((x, None))
        }
    }

    /// MLM logits `[B, L, vocab]`; padding rows are zero-filled on the
    /// unpadded path.
    pub fn forward_mlm(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input: &EncoderInput,
    ) -> Result<VarId> {
        let (hidden, packing) = self.forward_hidden(tape, vars, input)?;
        let dense = tape.linear(hidden, vars.mlm_dense_w, Some(vars.mlm_dense_b), true)?;
        let act = tape.gelu(dense);
        let normed = tape.layer_norm(
            act,
            vars.mlm_ln.gamma,
            vars.mlm_ln.beta,
            self.config.ln_eps,
            self.config.low_precision_ln,
        )?;
        let logits = tape.matmul_t(normed, vars.token, Some(vars.mlm_decoder_bias), true)?;
        match packing {
            Some((gather, _cu)) => {
                let v = self.config.vocab_size;
                tape.unpack_rows(logits, &gather, &[input.batch, input.len, v])
            }
            None => Ok(logits),
        }
    }

    /// Pooled `[B, hidden]` representation: the first (`[CLS]`) position.
    pub fn forward_pooled(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input: &EncoderInput,
    ) -> Result<VarId> {
        let (hidden, packing) = self.forward_hidden(tape, vars, input)?;
        let padded = match packing {
            Some((gather, _)) => {
                let h = self.config.hidden;
                tape.unpack_rows(hidden, &gather, &[input.batch, input.len, h])?
            }
            None => hidden,
        };
        tape.take_token(padded, 0)
    }

    /// Evaluation-mode MLM logits as a plain tensor.
    pub fn forward_mlm_eval(&self, input: &EncoderInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let logits = self.forward_mlm(&mut tape, &vars, input)?;
        Ok(tape.value(logits).clone())
    }
}
