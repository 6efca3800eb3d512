//! Pretraining and finetuning.
//!
//! The optimizer is decoupled AdamW: weight decay is applied directly to the
//! weights, independent of both the adaptive update and the learning-rate
//! schedule. The schedule is linear warmup to the peak over the first 6% of
//! steps, then linear decay to 0.02x peak at the final step. Every stream of
//! randomness (batch sampling, masking, dropout) is derived from
//! (seed, step), so a resumed run replays the unbroken run bit-for-bit.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionMask;
use crate::config::EncoderConfig;
use crate::data::{mlm_mask, prepare_sequence, wordpiece_tokenize, MlmBatch, MlmRow, Vocab};
use crate::error::{Error, Result};
use crate::layers::{EncoderInput, Model};
use crate::perf::{MetricsLog, MetricsRecord};
use crate::tape::Tape;
use crate::tensor::{randn_tensor, Buf, Dtype, Tensor};

// ── learning-rate schedule ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
    pub lr_peak: f64,
}

impl Schedule {
    pub fn new(
        total_steps: u64,
        warmup_fraction: f64,
        final_lr_fraction: f64,
        lr_peak: f64,
    ) -> Schedule {
        Schedule {
            total_steps,
            warmup_fraction,
            final_lr_fraction,
            lr_peak,
        }
    }
}

/// Piecewise-linear learning rate: 0 -> peak over the warmup, peak ->
/// `final_lr_fraction * peak` at `total_steps`.
pub fn lr_at(step: u64, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::ScheduleExhausted {
            step,
            total: s.total_steps,
        });
    }
    let total = s.total_steps as f64;
    let warmup = s.warmup_fraction * total;
    let t = step as f64;
    if t <= warmup && warmup > 0.0 {
        Ok(s.lr_peak * t / warmup)
    } else {
        let frac = (total - t) / (total - warmup);
        Ok(s.lr_peak * (s.final_lr_fraction + (1.0 - s.final_lr_fraction) * frac))
    }
}

// ── decoupled AdamW ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moments per parameter, in the model's `visit_params` order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(model: &Model, hyper: AdamHyper) -> OptimizerState {
        let mut m = Vec::new();
        model.visit_params(&mut |_, t| m.push(vec![0.0f32; t.numel()]));
        let v = m.clone();
        OptimizerState { t: 0, m, v, hyper }
    }
}

/// One decoupled-AdamW step over the model's parameters.
///
/// `grads` must be in `visit_params` order. Weight decay is skipped for all
/// rank-1 parameters (bias vectors and LayerNorm gains/shifts) and is not
/// multiplied by the learning rate.
pub fn adamw_step(
    model: &mut Model,
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    model.visit_params_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let g = &grads[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        idx += 1;
        if g.len() != tensor.numel() {
            failure = Some(Error::ShapeMismatch {
                context: "adamw gradient",
                left: vec![g.len()],
                right: vec![tensor.numel()],
            });
            return;
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            failure = Some(Error::Divergence {
                step: state.t,
                param: Some(format!("{name} (gradient {bad})")),
                last_good: None,
            });
            return;
        }
        let decay = if tensor.shape().len() >= 2 {
            h.weight_decay
        } else {
            0.0
        };
        let w = tensor.as_f32_mut();
        for i in 0..w.len() {
            let gi = g[i] as f64;
            let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * gi;
            let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let mut wi = w[i] as f64;
            wi -= lr * m_hat / (v_hat.sqrt() + h.eps);
            wi -= decay * wi;
            w[i] = wi as f32;
        }
    });
    if let Some(e) = failure {
        state.t -= 1;
        return Err(e);
    }
    Ok(())
}

// ── checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"MBERTCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: EncoderConfig,
    /// Named f32 parameter arrays in `visit_params` order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub rng: RngState,
    pub metrics_tail: Vec<MetricsRecord>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        optimizer: Option<&OptimizerState>,
        step: u64,
        rng: RngState,
        metrics_tail: Vec<MetricsRecord>,
    ) -> Checkpoint {
        let mut params = Vec::new();
        model.visit_params(&mut |name, t| params.push((name, t.cast(Dtype::F32))));
        Checkpoint {
            version: CKPT_VERSION,
            config: model.config.clone(),
            params,
            optimizer: optimizer.cloned(),
            step,
            rng,
            metrics_tail,
        }
    }

    /// Rebuild a model, overwriting freshly-initialized parameters by name.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::init(&self.config, 0)?;
        let mut missing = Vec::new();
        let mut idx = 0usize;
        let params = &self.params;
        model.visit_params_mut(&mut |name, t| {
            if idx < params.len() && params[idx].0 == name {
                *t = params[idx].1.clone();
                idx += 1;
            } else {
                missing.push(name);
            }
        });
        if !missing.is_empty() || idx != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter set mismatch (missing: {missing:?}, unused: {})",
                params.len() - idx
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        fs::write(path, bytes).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = fs::File::open(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let config = serde_json::to_string(&self.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0u8); // dtype tag: f32
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.as_f32() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0u8),
            Some(opt) => {
                out.push(1u8);
                out.extend_from_slice(&opt.t.to_le_bytes());
                out.extend_from_slice(&opt.hyper.beta1.to_le_bytes());
                out.extend_from_slice(&opt.hyper.beta2.to_le_bytes());
                out.extend_from_slice(&opt.hyper.eps.to_le_bytes());
                out.extend_from_slice(&opt.hyper.weight_decay.to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    for &x in m {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out.extend_from_slice(&(self.metrics_tail.len() as u32).to_le_bytes());
        for r in &self.metrics_tail {
            out.extend_from_slice(&r.step.to_le_bytes());
            out.extend_from_slice(&r.wallclock_s.to_le_bytes());
            out.extend_from_slice(&r.tokens_seen.to_le_bytes());
            out.extend_from_slice(&r.mlm_loss.to_le_bytes());
            match r.eval_metric {
                Some(e) => {
                    out.push(1u8);
                    out.extend_from_slice(&e.to_le_bytes());
                }
                None => {
                    out.push(0u8);
                    out.extend_from_slice(&0f64.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} unsupported (expected {CKPT_VERSION})"
            )));
        }
        let config_len = r.u64()? as usize;
        let config_bytes = r.take(config_len)?;
        let config: EncoderConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let word_pos = r.u128()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
            }
            params.push((name, Tensor::from_f32(&dims, data, Dtype::F32)?));
        }
        let optimizer = if r.u8()? == 1 {
            let t = r.u64()?;
            let hyper = AdamHyper {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for (_, p) in &params {
                let numel = p.numel();
                let mut mm = Vec::with_capacity(numel);
                for _ in 0..numel {
                    mm.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
                }
                let mut vv = Vec::with_capacity(numel);
                for _ in 0..numel {
                    vv.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
                }
                m.push(mm);
                v.push(vv);
            }
            Some(OptimizerState { t, m, v, hyper })
        } else {
            None
        };
        let n_metrics = r.u32()? as usize;
        let mut metrics_tail = Vec::with_capacity(n_metrics);
        for _ in 0..n_metrics {
            let step = r.u64()?;
            let wallclock_s = r.f64()?;
            let tokens_seen = r.u64()?;
            let mlm_loss = r.f64()?;
            let has_eval = r.u8()? == 1;
            let eval = r.f64()?;
            metrics_tail.push(MetricsRecord {
                step,
                wallclock_s,
                tokens_seen,
                mlm_loss,
                eval_metric: has_eval.then_some(eval),
            });
        }
        Ok(Checkpoint {
            version,
            config,
            params,
            optimizer,
            step,
            rng: RngState { seed, word_pos },
            metrics_tail,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

// ── pretraining ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PretrainParams {
    pub total_steps: u64,
    pub batch_size: usize,
    pub microbatch: Option<usize>,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub lr_peak: f64,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
    pub hyper: AdamHyper,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub run_id: String,
}

impl Default for PretrainParams {
    fn default() -> Self {
        PretrainParams {
            total_steps: 200,
            batch_size: 8,
            microbatch: None,
            checkpoint_every: 100,
            eval_every: 10,
            lr_peak: 5e-4,
            warmup_fraction: 0.06,
            final_lr_fraction: 0.02,
            hyper: AdamHyper::default(),
            grad_clip: None,
            seed: 42,
            out_dir: None,
            run_id: "pretrain".into(),
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub metrics: MetricsLog,
    /// Per-step training loss, step order.
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub tokens_seen: u64,
}

// Randomness streams derived per (seed, step): no mutable rng survives a
// step, which is what makes resume replay the unbroken run exactly.
fn stream_seed(seed: u64, step: u64, tag: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E3779B97F4A7C15) ^ tag.wrapping_mul(0xD1B54A32D192ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Tokenize and wrap every document once; drops documents with no maskable
/// content.
pub fn prepare_corpus(
    corpus: &[String],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<Vec<u32>>> {
    let mut prepared = Vec::with_capacity(corpus.len());
    for doc in corpus {
        let ids = wordpiece_tokenize(doc, vocab, true);
        let seq = prepare_sequence(&ids, max_seq_len, vocab)?;
        if seq.iter().any(|&id| !vocab.is_special(id)) {
            prepared.push(seq);
        }
    }
    if prepared.is_empty() {
        return Err(Error::Data("corpus has no trainable documents".into()));
    }
    Ok(prepared)
}

/// Pretrain a fresh model.
pub fn pretrain(
    config: &EncoderConfig,
    vocab: &Vocab,
    corpus: &[String],
    p: &PretrainParams,
) -> Result<PretrainOutcome> {
    let model = Model::init(config, p.seed)?;
    let optimizer = OptimizerState::new(&model, p.hyper);
    run_pretrain(model, optimizer, 0, 0, vocab, corpus, p)
}

/// Continue pretraining from a checkpoint; the loss trace picks up exactly
/// where the unbroken run would be.
pub fn resume_pretrain(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    corpus: &[String],
    p: &PretrainParams,
) -> Result<PretrainOutcome> {
    let model = ckpt.restore_model()?;
    let optimizer = ckpt
        .optimizer
        .clone()
        .unwrap_or_else(|| OptimizerState::new(&model, p.hyper));
    let tokens = ckpt.metrics_tail.last().map(|r| r.tokens_seen).unwrap_or(0);
    run_pretrain(model, optimizer, ckpt.step, tokens, vocab, corpus, p)
}

fn run_pretrain(
    mut model: Model,
    mut optimizer: OptimizerState,
    start_step: u64,
    start_tokens: u64,
    vocab: &Vocab,
    corpus: &[String],
    p: &PretrainParams,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if p.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if vocab.effective_size() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocab size {} != model vocab_size {}",
            vocab.effective_size(),
            model.config.vocab_size
        )));
    }
    let schedule = Schedule::new(
        p.total_steps,
        p.warmup_fraction,
        p.final_lr_fraction,
        p.lr_peak,
    );
    let prepared = prepare_corpus(corpus, vocab, model.config.max_seq_len)?;

    let mut metrics = MetricsLog::new(p.run_id.clone());
    let mut loss_trace = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut tokens_seen = start_tokens;
    let started = Instant::now();

    if let Some(dir) = &p.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }

    for step in start_step..p.total_steps {
        let lr = lr_at(step + 1, &schedule)?;

        // Assemble the batch for this step.
        let mut sample_rng = ChaCha8Rng::seed_from_u64(stream_seed(p.seed, step, 1));
        let mut rows = Vec::with_capacity(p.batch_size);
        for row_idx in 0..p.batch_size {
            let doc = &prepared[sample_rng.gen_range(0..prepared.len())];
            rows.push(mlm_mask(
                doc,
                vocab,
                model.config.mlm_ratio,
                p.seed,
                step,
                row_idx as u64,
            )?);
        }

        let micro = p
            .microbatch
            .unwrap_or(p.batch_size)
            .max(1)
            .min(p.batch_size);
        let chunks: Vec<&[MlmRow]> = rows.chunks(micro).collect();
        let n_chunks = chunks.len();
        let mut grad_accum: Option<Vec<Vec<f32>>> = None;
        let mut step_loss = 0.0f64;

        for (mb_idx, chunk) in chunks.into_iter().enumerate() {
            let mut batch = MlmBatch::collate(chunk, vocab)?;
            // Tiny microbatches can draw zero selected positions; mask the
            // first eligible token so the loss stays defined. Paper-scale
            // batches never hit this.
            if batch.labels.iter().all(|&l| l == -100) {
                let i = batch
                    .input_ids
                    .iter()
                    .position(|&id| !vocab.is_special(id))
                    .expect("prepared docs have maskable tokens");
                batch.labels[i] = batch.input_ids[i] as i32;
                batch.input_ids[i] = vocab.mask;
            }
            let input = EncoderInput {
                batch: batch.batch,
                len: batch.len,
                token_ids: batch.input_ids.clone(),
                segment_ids: batch.segment_ids.clone(),
                mask: AttentionMask::new(batch.batch, batch.len, batch.attention.clone())?,
            };
            tokens_seen += input.mask.real_tokens() as u64;
            let mut tape = Tape::for_training(stream_seed(p.seed, step, 1000 + mb_idx as u64));
            let vars = model.register(&mut tape, true);
            // Exploded weights can surface as an all--inf softmax slice
            // before the loss itself goes NaN; either way it is divergence.
            let diverged = |e: Error, last_good: &Option<PathBuf>| match e {
                Error::DegenerateSlice => Error::Divergence {
                    step,
                    param: None,
                    last_good: last_good.clone(),
                },
                other => other,
            };
            let logits = model
                .forward_mlm(&mut tape, &vars, &input)
                .map_err(|e| diverged(e, &last_good))?;
            let loss_var = tape
                .cross_entropy(logits, &batch.labels)
                .map_err(|e| diverged(e, &last_good))?;
            let loss = tape.value(loss_var).get(0);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    param: None,
                    last_good,
                });
            }
            step_loss += loss / n_chunks as f64;
            tape.backward(loss_var)?;
            let grads: Vec<Vec<f32>> = vars
                .names
                .iter()
                .map(|(_, var)| match tape.grad_buf(*var) {
                    Some(Buf::F32(g)) => g.clone(),
                    Some(Buf::F64(g)) => g.iter().map(|&x| x as f32).collect(),
                    None => vec![0.0f32; tape.value(*var).numel()],
                })
                .collect();
            match &mut grad_accum {
                None => grad_accum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
        }

        let mut grads = grad_accum.expect("at least one microbatch");
        if n_chunks > 1 {
            let inv = 1.0 / n_chunks as f32;
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x *= inv;
                }
            }
        }
        if let Some(clip) = p.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        adamw_step(&mut model, &grads, &mut optimizer, lr).map_err(|e| match e {
            Error::Divergence { step: _, param, .. } => Error::Divergence {
                step,
                param,
                last_good: last_good.clone(),
            },
            other => other,
        })?;
        loss_trace.push(step_loss);

        let done = step + 1;
        if done % p.eval_every == 0 || done == p.total_steps {
            metrics.records.push(MetricsRecord {
                step: done,
                wallclock_s: started.elapsed().as_secs_f64(),
                tokens_seen,
                mlm_loss: step_loss,
                eval_metric: None,
            });
        }
        if let Some(dir) = &p.out_dir {
            if done % p.checkpoint_every == 0 || done == p.total_steps {
                let path = dir.join(format!("ckpt_step{done:06}.bin"));
                let ckpt = Checkpoint::from_model(
                    &model,
                    Some(&optimizer),
                    done,
                    RngState {
                        seed: p.seed,
                        word_pos: 0,
                    },
                    metrics.records.clone(),
                );
                ckpt.save(&path)?;
                last_good = Some(path.clone());
                checkpoints.push(path);
            }
        }
    }

    Ok(PretrainOutcome {
        model,
        optimizer,
        metrics,
        loss_trace,
        checkpoints,
        tokens_seen,
    })
}

fn clip_global_norm(grads: &mut [Vec<f32>], clip: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let scale = (clip / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
}

// ── finetuning ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskHead {
    Classification { n_classes: usize },
    Regression,
}

/// One finetuning example: content token ids (no `[CLS]`/`[SEP]`) and a label —
/// a class index or a regression target.
#[derive(Clone, Debug)]
pub struct TaskExample {
    pub ids: Vec<u32>,
    pub label: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneParams {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub hyper: AdamHyper,
    /// Task sequence length; may exceed the pretraining length when the
    /// encoder uses ALiBi.
    pub max_seq_len: usize,
    pub eval_every: u64,
    pub seed: u64,
    pub run_id: String,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        FinetuneParams {
            steps: 100,
            batch_size: 16,
            lr: 5e-5,
            hyper: AdamHyper {
                weight_decay: 5e-6,
                ..Default::default()
            },
            max_seq_len: 64,
            eval_every: 10,
            seed: 7,
            run_id: "finetune".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub head: HeadWeights,
    pub metrics: MetricsLog,
    /// Final-step training metric: accuracy (classification) or negated MSE
    /// (regression).
    pub final_metric: f64,
}

fn config_diff(a: &EncoderConfig, b: &EncoderConfig) -> Vec<String> {
    let (aj, bj) = (
        serde_json::to_value(a).expect("config serializes"),
        serde_json::to_value(b).expect("config serializes"),
    );
    let (Some(ao), Some(bo)) = (aj.as_object(), bj.as_object()) else {
        return vec!["<config>".into()];
    };
    ao.iter()
        .filter(|(k, v)| bo.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Finetune from a pretraining checkpoint. When `chain_from` is given, the
/// encoder weights are loaded from it instead (checkpoint chaining) after a
/// config-compatibility check; a fresh `[CLS]`-projection head is attached
/// either way.
pub fn finetune(
    ckpt: &Checkpoint,
    task: &[TaskExample],
    head: TaskHead,
    chain_from: Option<&Checkpoint>,
    vocab: &Vocab,
    p: &FinetuneParams,
) -> Result<FinetuneOutcome> {
    if task.is_empty() {
        return Err(Error::Data("empty finetuning task".into()));
    }
    let source = match chain_from {
        Some(prior) => {
            let diff = config_diff(&ckpt.config, &prior.config);
            if !diff.is_empty() {
                return Err(Error::Incompatible { fields: diff });
            }
            prior
        }
        None => ckpt,
    };
    let mut model = source.restore_model()?;
    let n_out = match head {
        TaskHead::Classification { n_classes } => {
            if n_classes < 2 {
                return Err(Error::Config("classification needs >= 2 classes".into()));
            }
            for ex in task {
                if ex.label < 0.0 || ex.label >= n_classes as f64 || ex.label.fract() != 0.0 {
                    return Err(Error::Data(format!(
                        "label {} outside 0..{n_classes}",
                        ex.label
                    )));
                }
            }
            n_classes
        }
        TaskHead::Regression => 1,
    };
    let hidden = model.config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut head_w = HeadWeights {
        w: randn_tensor(&[hidden, n_out], 0.02, Dtype::F32, &mut rng),
        b: Tensor::zeros(&[n_out], Dtype::F32),
    };

    // Pre-wrap every example once.
    let mut wrapped = Vec::with_capacity(task.len());
    for ex in task {
        wrapped.push((prepare_sequence(&ex.ids, p.max_seq_len, vocab)?, ex.label));
    }

    let mut optimizer = OptimizerState::new(&model, p.hyper);
    let mut head_m = vec![vec![0.0f32; hidden * n_out], vec![0.0f32; n_out]];
    let mut head_v = head_m.clone();

    let mut metrics = MetricsLog::new(p.run_id.clone());
    let mut final_metric = 0.0;
    let mut tokens_seen = 0u64;
    let started = Instant::now();

    for step in 0..p.steps {
        let mut sample_rng = ChaCha8Rng::seed_from_u64(stream_seed(p.seed, step, 3));
        let picks: Vec<usize> = (0..p.batch_size)
            .map(|_| sample_rng.gen_range(0..wrapped.len()))
            .collect();
        let len = picks.iter().map(|&i| wrapped[i].0.len()).max().unwrap();
        let b = picks.len();
        let mut token_ids = Vec::with_capacity(b * len);
        let mut lengths = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        for &i in &picks {
            let (seq, label) = &wrapped[i];
            token_ids.extend_from_slice(seq);
            token_ids.extend(std::iter::repeat_n(vocab.pad, len - seq.len()));
            lengths.push(seq.len());
            labels.push(*label);
        }
        let mask = AttentionMask::from_lengths(&lengths, len)?;
        tokens_seen += mask.real_tokens() as u64;
        let input = EncoderInput {
            batch: b,
            len,
            token_ids,
            segment_ids: vec![0; b * len],
            mask,
        };

        let mut tape = Tape::for_training(stream_seed(p.seed, step, 4));
        let vars = model.register(&mut tape, true);
        let pooled = model.forward_pooled(&mut tape, &vars, &input)?;
        let wv = tape.param(head_w.w.clone());
        let bv = tape.param(head_w.b.clone());
        let logits = tape.linear(pooled, wv, Some(bv), false)?;
        let (loss_var, metric) = match head {
            TaskHead::Classification { .. } => {
                let int_labels: Vec<i32> = labels.iter().map(|&l| l as i32).collect();
                let loss = tape.cross_entropy(logits, &int_labels)?;
                let out = tape.value(logits).to_vec_f64();
                let correct = (0..b)
                    .filter(|&r| {
                        let row = &out[r * n_out..(r + 1) * n_out];
                        let argmax = row
                            .iter()
                            .enumerate()
                            .max_by(|a, c| a.1.partial_cmp(c.1).expect("finite logits"))
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        argmax == labels[r] as usize
                    })
                    .count();
                (loss, correct as f64 / b as f64)
            }
            TaskHead::Regression => {
                let loss = tape.mse(logits, &labels)?;
                let mse = tape.value(loss).get(0);
                (loss, -mse)
            }
        };
        let loss = tape.value(loss_var).get(0);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                param: None,
                last_good: None,
            });
        }
        tape.backward(loss_var)?;

        let grads: Vec<Vec<f32>> = vars
            .names
            .iter()
            .map(|(_, var)| match tape.grad_buf(*var) {
                Some(Buf::F32(g)) => g.clone(),
                Some(Buf::F64(g)) => g.iter().map(|&x| x as f32).collect(),
                None => vec![0.0f32; tape.value(*var).numel()],
            })
            .collect();
        adamw_step(&mut model, &grads, &mut optimizer, p.lr)?;

        // Head update: same decoupled-AdamW rule, inline.
        for (slot, var) in [(0usize, wv), (1usize, bv)] {
            let g = match tape.grad_buf(var) {
                Some(Buf::F32(g)) => g.clone(),
                _ => continue,
            };
            let h = p.hyper;
            let t = optimizer.t;
            let bc1 = 1.0 - h.beta1.powi(t as i32);
            let bc2 = 1.0 - h.beta2.powi(t as i32);
            let tensor = if slot == 0 {
                &mut head_w.w
            } else {
                &mut head_w.b
            };
            let decay = if tensor.shape().len() >= 2 {
                h.weight_decay
            } else {
                0.0
            };
            let w = tensor.as_f32_mut();
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let mi = h.beta1 * head_m[slot][i] as f64 + (1.0 - h.beta1) * gi;
                let vi = h.beta2 * head_v[slot][i] as f64 + (1.0 - h.beta2) * gi * gi;
                head_m[slot][i] = mi as f32;
                head_v[slot][i] = vi as f32;
                let mut wi = w[i] as f64;
                wi -= p.lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
                wi -= decay * wi;
                w[i] = wi as f32;
            }
        }

        final_metric = metric;
        let done = step + 1;
        if done % p.eval_every == 0 || done == p.steps {
            metrics.records.push(MetricsRecord {
                step: done,
                wallclock_s: started.elapsed().as_secs_f64(),
                tokens_seen,
                mlm_loss: loss,
                eval_metric: Some(metric),
            });
        }
    }

    Ok(FinetuneOutcome {
        model,
        head: head_w,
        metrics,
        final_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets;
    use crate::data::{build_toy_vocab, CLS, MASK, PAD, SEP, UNK};

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(1000, 0.06, 0.02, 5e-4);
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at(60, &s).unwrap(), 5e-4);
        assert_eq!(lr_at(1000, &s).unwrap(), 0.02 * 5e-4);
        assert!(lr_at(1001, &s).is_err());
    }

    #[test]
    fn schedule_is_continuous() {
        // Piecewise linear: adjacent steps never jump by more than the
        // steeper phase's slope (the warmup ramp), and the two phases agree
        // exactly at the boundary.
        let s = Schedule::new(500, 0.06, 0.02, 1e-3);
        let warmup_steps = s.warmup_fraction * s.total_steps as f64;
        let max_jump = s.lr_peak / warmup_steps;
        let mut prev = lr_at(0, &s).unwrap();
        for step in 1..=500 {
            let cur = lr_at(step, &s).unwrap();
            assert!((cur - prev).abs() <= max_jump + 1e-15, "jump at {step}");
            prev = cur;
        }
        assert_eq!(lr_at(30, &s).unwrap(), s.lr_peak);
    }

    fn tiny_model() -> Model {
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 8;
        cfg.n_heads = 2;
        cfg.intermediate = 16;
        cfg.vocab_size = 64;
        cfg.n_layers = 1;
        cfg.max_seq_len = 8;
        Model::init(&cfg, 3).unwrap()
    }

    #[test]
    fn adamw_single_step_closed_form() {
        // Scalar-equivalent check on a 1x1-ish parameter via a real model is
        // awkward; drive the update rule directly instead.
        let mut model = tiny_model();
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.0,
        };
        let mut state = OptimizerState::new(&model, hyper);
        // Force the first parameter (embeddings.token, rank 2) to hold 1.0
        // and feed gradient 1.0 everywhere.
        let mut grads = Vec::new();
        model.visit_params(&mut |_, t| grads.push(vec![1.0f32; t.numel()]));
        model.visit_params_mut(&mut |name, t| {
            if name == "embeddings.token" {
                let w = t.as_f32_mut();
                w[0] = 1.0;
            }
        });
        adamw_step(&mut model, &grads, &mut state, 0.1).unwrap();
        let mut got = 0.0f64;
        model.visit_params(&mut |name, t| {
            if name == "embeddings.token" {
                got = t.get(0);
            }
        });
        // m_hat = 1, v_hat = 1 at t=1: w' = 1 - 0.1/(1 + 1e-6)
        let want = 1.0 - 0.1 / (1.0 + 1e-6);
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut model = tiny_model();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimizerState::new(&model, hyper);
        let before = model.named_params();
        let mut grads = Vec::new();
        model.visit_params(&mut |_, t| grads.push(vec![0.0f32; t.numel()]));
        adamw_step(&mut model, &grads, &mut state, 0.5).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.named_params()) {
            assert_eq!(a.to_vec_f64(), b.to_vec_f64());
        }
    }

    #[test]
    fn decay_is_decoupled_from_lr_and_skips_rank1() {
        let mut model = tiny_model();
        let hyper = AdamHyper {
            weight_decay: 1e-5,
            ..Default::default()
        };
        let mut state = OptimizerState::new(&model, hyper);
        let before = model.named_params();
        let mut grads = Vec::new();
        model.visit_params(&mut |_, t| grads.push(vec![0.0f32; t.numel()]));
        // Zero gradient, arbitrary lr: matrices shrink by exactly (1 - wd),
        // rank-1 parameters stay put.
        adamw_step(&mut model, &grads, &mut state, 123.0).unwrap();
        let mut checked_matrix = false;
        let mut checked_bias = false;
        let mut idx = 0;
        model.visit_params(&mut |_, t| {
            let old = &before[idx].1;
            if t.shape().len() >= 2 {
                for (a, b) in t.to_vec_f64().iter().zip(old.to_vec_f64()) {
                    // exact f32 replay of `w -= wd * w` with zero update
                    let want = (b - 1e-5 * b) as f32 as f64;
                    assert_eq!(*a, want);
                }
                checked_matrix = true;
            } else {
                assert_eq!(t.to_vec_f64(), old.to_vec_f64());
                checked_bias = true;
            }
            idx += 1;
        });
        assert!(checked_matrix && checked_bias);
    }

    #[test]
    fn adamw_matches_reference_adam_over_steps() {
        // Independent scalar Adam oracle in f64.
        let (b1, b2, eps, lr) = (0.9, 0.98, 1e-6, 0.05);
        let grads_per_step = [0.3f64, -0.7, 0.1, 0.9, -0.2];
        let mut w_ref = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in grads_per_step.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            w_ref -= lr * mh / (vh.sqrt() + eps);
        }

        let mut model = tiny_model();
        model.visit_params_mut(&mut |name, t| {
            if name == "embeddings.token" {
                t.as_f32_mut()[0] = 0.5;
            }
        });
        let hyper = AdamHyper {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: 0.0,
        };
        let mut state = OptimizerState::new(&model, hyper);
        for &g in &grads_per_step {
            let mut grads = Vec::new();
            model.visit_params(&mut |name, t| {
                let mut gv = vec![0.0f32; t.numel()];
                if name == "embeddings.token" {
                    gv[0] = g as f32;
                }
                grads.push(gv);
            });
            adamw_step(&mut model, &grads, &mut state, lr).unwrap();
        }
        let mut got = 0.0;
        model.visit_params(&mut |name, t| {
            if name == "embeddings.token" {
                got = t.get(0);
            }
        });
        // f32 moment storage rounds each step; the rule itself is the oracle's.
        assert!((got - w_ref).abs() < 1e-6, "{got} vs {w_ref}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut model = tiny_model();
        let mut state = OptimizerState::new(&model, AdamHyper::default());
        let mut grads = Vec::new();
        model.visit_params(&mut |_, t| grads.push(vec![0.0f32; t.numel()]));
        grads[2][0] = f32::NAN;
        let mut names = Vec::new();
        model.visit_params(&mut |n, _| names.push(n));
        let err = adamw_step(&mut model, &grads, &mut state, 0.1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&names[2]), "{msg}");
    }

    fn toy_vocab_with_words(words: &[&str]) -> Vocab {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(words.iter().map(|s| s.to_string()));
        Vocab::new(tokens).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let model = tiny_model();
        let opt = OptimizerState::new(&model, AdamHyper::default());
        let tail = vec![MetricsRecord {
            step: 10,
            wallclock_s: 1.5,
            tokens_seen: 100,
            mlm_loss: 4.2,
            eval_metric: None,
        }];
        let ckpt = Checkpoint::from_model(
            &model,
            Some(&opt),
            10,
            RngState {
                seed: 9,
                word_pos: 0,
            },
            tail,
        );
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 10);
        assert_eq!(back.config, model.config);
        // restored model reproduces parameters bitwise
        let restored = back.restore_model().unwrap();
        for ((na, a), (nb, b)) in model.named_params().iter().zip(restored.named_params()) {
            assert_eq!(na, &nb);
            for (x, y) in a.as_f32().iter().zip(b.as_f32()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na}");
            }
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        let model = tiny_model();
        let ckpt = Checkpoint::from_model(
            &model,
            None,
            0,
            RngState {
                seed: 0,
                word_pos: 0,
            },
            vec![],
        );
        let mut bytes = ckpt.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = ckpt.to_bytes();
        bytes[8] = 99; // version
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    fn tiny_corpus() -> Vec<String> {
        let words = [
            "sun", "moon", "star", "wind", "rain", "leaf", "tree", "bird",
        ];
        (0..50)
            .map(|i| {
                let a = words[i % words.len()];
                let b = words[(i * 3 + 1) % words.len()];
                let c = words[(i * 5 + 2) % words.len()];
                format!("{a} {b} {c} {a} {b}")
            })
            .collect()
    }

    #[test]
    fn pretrain_runs_and_is_deterministic() {
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.intermediate = 32;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        cfg.max_seq_len = 8;
        let p = PretrainParams {
            total_steps: 8,
            batch_size: 4,
            eval_every: 4,
            checkpoint_every: 1000,
            seed: 11,
            ..Default::default()
        };
        let a = pretrain(&cfg, &vocab, &corpus, &p).unwrap();
        let b = pretrain(&cfg, &vocab, &corpus, &p).unwrap();
        assert_eq!(
            a.loss_trace, b.loss_trace,
            "identical seeds, identical traces"
        );
        assert_eq!(a.loss_trace.len(), 8);
        assert!(a.metrics.records.len() >= 2);
        // loss starts near ln(vocab) at random init
        let expected = (vocab.effective_size() as f64).ln();
        assert!(
            (a.loss_trace[0] - expected).abs() / expected < 0.10,
            "{}",
            a.loss_trace[0]
        );
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.intermediate = 32;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        cfg.max_seq_len = 8;
        let dir = tempfile::tempdir().unwrap();
        let p = PretrainParams {
            total_steps: 6,
            batch_size: 4,
            eval_every: 2,
            checkpoint_every: 3,
            seed: 13,
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let full = pretrain(&cfg, &vocab, &corpus, &p).unwrap();
        let ckpt = Checkpoint::load(&full.checkpoints[0]).unwrap();
        assert_eq!(ckpt.step, 3);
        let resumed = resume_pretrain(&ckpt, &vocab, &corpus, &p).unwrap();
        assert_eq!(
            &full.loss_trace[3..],
            &resumed.loss_trace[..],
            "resume replays the tail bit-exactly"
        );
    }

    #[test]
    fn finetune_learns_separable_task_and_chains() {
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.intermediate = 32;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        cfg.max_seq_len = 8;
        let p = PretrainParams {
            total_steps: 4,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        };
        let pre = pretrain(&cfg, &vocab, &corpus, &p).unwrap();
        let ckpt = Checkpoint::from_model(
            &pre.model,
            None,
            4,
            RngState {
                seed: 5,
                word_pos: 0,
            },
            vec![],
        );

        // Token presence decides the label: linearly separable.
        let marker = vocab.id("sun").unwrap();
        let other = vocab.id("moon").unwrap();
        let task: Vec<TaskExample> = (0..32)
            .map(|i| {
                if i % 2 == 0 {
                    TaskExample {
                        ids: vec![marker, other, other],
                        label: 1.0,
                    }
                } else {
                    TaskExample {
                        ids: vec![other, other, other],
                        label: 0.0,
                    }
                }
            })
            .collect();
        let fp = FinetuneParams {
            steps: 100,
            batch_size: 16,
            lr: 2e-3,
            max_seq_len: 8,
            ..Default::default()
        };
        let out = finetune(
            &ckpt,
            &task,
            TaskHead::Classification { n_classes: 2 },
            None,
            &vocab,
            &fp,
        )
        .unwrap();
        assert!(
            out.final_metric >= 0.95,
            "train accuracy {}",
            out.final_metric
        );

        // chain_from == checkpoint gives identical initial weights.
        let direct = finetune(
            &ckpt,
            &task,
            TaskHead::Classification { n_classes: 2 },
            Some(&ckpt),
            &vocab,
            &fp,
        )
        .unwrap();
        assert_eq!(out.final_metric, direct.final_metric);
    }

    #[test]
    fn alibi_finetunes_past_pretraining_length_where_baseline_cannot() {
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut alibi_cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        alibi_cfg.hidden = 16;
        alibi_cfg.n_heads = 2;
        alibi_cfg.intermediate = 32;
        alibi_cfg.n_layers = 1;
        alibi_cfg.vocab_size = vocab.effective_size();
        alibi_cfg.max_seq_len = 8; // "train short"
        let mut base_cfg = alibi_cfg.clone();
        base_cfg.use_alibi = false;
        base_cfg.use_geglu = false;
        base_cfg.use_unpadding = false;
        base_cfg.low_precision_ln = false;
        base_cfg.attention_key_block = None;
        base_cfg.attention_dropout = 0.1;

        // Task sequences twice the pretraining length ("test long").
        let long_ids: Vec<u32> = (0..14)
            .map(|i| vocab.id("sun").unwrap() + (i % 2))
            .collect();
        let task = vec![
            TaskExample {
                ids: long_ids.clone(),
                label: 1.0,
            },
            TaskExample {
                ids: long_ids[..13].to_vec(),
                label: 0.0,
            },
        ];
        let fp = FinetuneParams {
            steps: 2,
            batch_size: 2,
            max_seq_len: 16,
            ..Default::default()
        };

        let alibi_model = Model::init(&alibi_cfg, 1).unwrap();
        let alibi_ckpt = Checkpoint::from_model(
            &alibi_model,
            None,
            0,
            RngState {
                seed: 1,
                word_pos: 0,
            },
            vec![],
        );
        let out = finetune(
            &alibi_ckpt,
            &task,
            TaskHead::Classification { n_classes: 2 },
            None,
            &vocab,
            &fp,
        )
        .unwrap();
        assert!(out.final_metric.is_finite());

        let base_model = Model::init(&base_cfg, 1).unwrap();
        let base_ckpt = Checkpoint::from_model(
            &base_model,
            None,
            0,
            RngState {
                seed: 1,
                word_pos: 0,
            },
            vec![],
        );
        let err = finetune(
            &base_ckpt,
            &task,
            TaskHead::Classification { n_classes: 2 },
            None,
            &vocab,
            &fp,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }), "{err}");
    }

    #[test]
    fn baseline_bert_mode_trains_with_attention_dropout() {
        // The baseline recipe keeps learned positions, plain MLP, 15%
        // masking and 0.1 attention-probability dropout (naive path).
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut cfg = presets::scale_desk(&presets::bert_base()).model;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.intermediate = 32;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        cfg.max_seq_len = 8;
        assert!(!cfg.use_alibi && !cfg.use_geglu && cfg.attention_dropout == 0.1);
        let p = PretrainParams {
            total_steps: 6,
            batch_size: 4,
            seed: 31,
            ..Default::default()
        };
        let a = pretrain(&cfg, &vocab, &corpus, &p).unwrap();
        let b = pretrain(&cfg, &vocab, &corpus, &p).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert!(a.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn microbatching_averages_gradients() {
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.intermediate = 32;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        cfg.max_seq_len = 8;
        cfg.ff_dropout = 0.0; // keep the two batching layouts comparable
        let p = PretrainParams {
            total_steps: 4,
            batch_size: 4,
            seed: 17,
            ..Default::default()
        };
        let whole = pretrain(&cfg, &vocab, &corpus, &p).unwrap();
        let micro = PretrainParams {
            microbatch: Some(2),
            ..p
        };
        let split = pretrain(&cfg, &vocab, &corpus, &micro).unwrap();
        // Not bit-identical (per-microbatch means weight examples differently
        // when labeled counts differ) but the same order of magnitude and
        // finite throughout.
        assert!(split.loss_trace.iter().all(|l| l.is_finite()));
        assert!((whole.loss_trace[0] - split.loss_trace[0]).abs() < 0.5);
    }

    #[test]
    fn divergence_reports_last_good_checkpoint() {
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.intermediate = 32;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        cfg.max_seq_len = 8;
        let dir = tempfile::tempdir().unwrap();
        let p = PretrainParams {
            total_steps: 30,
            batch_size: 2,
            checkpoint_every: 1,
            lr_peak: 1e14, // deliberately absurd
            warmup_fraction: 0.0,
            seed: 2,
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = pretrain(&cfg, &vocab, &corpus, &p).unwrap_err();
        let Error::Divergence { last_good, .. } = err else {
            panic!("{err}")
        };
        let last_good = last_good.expect("a checkpoint was saved before divergence");
        assert!(last_good.exists());
        Checkpoint::load(&last_good).unwrap();
    }

    #[test]
    fn regression_head_trains_to_low_mse() {
        let corpus = tiny_corpus();
        let vocab = build_toy_vocab(&corpus, 50).unwrap();
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.intermediate = 32;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        cfg.max_seq_len = 8;
        let model = Model::init(&cfg, 9).unwrap();
        let ckpt = Checkpoint::from_model(
            &model,
            None,
            0,
            RngState {
                seed: 9,
                word_pos: 0,
            },
            vec![],
        );
        let marker = vocab.id("sun").unwrap();
        let other = vocab.id("moon").unwrap();
        let task: Vec<TaskExample> = (0..16)
            .map(|i| {
                if i % 2 == 0 {
                    TaskExample {
                        ids: vec![marker, other],
                        label: 1.5,
                    }
                } else {
                    TaskExample {
                        ids: vec![other, other],
                        label: -0.5,
                    }
                }
            })
            .collect();
        let fp = FinetuneParams {
            steps: 120,
            batch_size: 16,
            lr: 2e-3,
            max_seq_len: 8,
            ..Default::default()
        };
        let out = finetune(&ckpt, &task, TaskHead::Regression, None, &vocab, &fp).unwrap();
        // final_metric is negated MSE
        assert!(
            out.final_metric > -0.05,
            "regression mse {}",
            -out.final_metric
        );
    }

    #[test]
    fn chaining_rejects_mismatched_configs() {
        let vocab = toy_vocab_with_words(&["a", "b"]);
        let mut cfg = presets::scale_desk(&presets::mosaicbert_base()).model;
        cfg.hidden = 8;
        cfg.n_heads = 2;
        cfg.intermediate = 16;
        cfg.n_layers = 1;
        cfg.vocab_size = vocab.effective_size();
        let m1 = Model::init(&cfg, 0).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.n_layers = 2;
        cfg2.intermediate = 32;
        let m2 = Model::init(&cfg2, 0).unwrap();
        let c1 = Checkpoint::from_model(
            &m1,
            None,
            0,
            RngState {
                seed: 0,
                word_pos: 0,
            },
            vec![],
        );
        let c2 = Checkpoint::from_model(
            &m2,
            None,
            0,
            RngState {
                seed: 0,
                word_pos: 0,
            },
            vec![],
        );
        let task = vec![TaskExample {
            ids: vec![5],
            label: 0.0,
        }];
        let err = finetune(
            &c1,
            &task,
            TaskHead::Classification { n_classes: 2 },
            Some(&c2),
            &vocab,
            &FinetuneParams::default(),
        )
        .unwrap_err();
        let Error::Incompatible { fields } = err else {
            panic!("{err}")
        };
        assert!(fields.contains(&"n_layers".to_string()));
        assert!(fields.contains(&"intermediate".to_string()));
    }
}
