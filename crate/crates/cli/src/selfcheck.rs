//! The `check` subcommand: a fast battery over the library's core
//! invariants, one pass/fail line each.

use mosaicbert_core::alibi::{alibi_bias, alibi_slopes};
use mosaicbert_core::attention::{
    mhsa_naive_eval, mhsa_tiled_eval, AttentionMask, AttentionWeights,
};
use mosaicbert_core::bf16::bf16_round;
use mosaicbert_core::config::presets;
use mosaicbert_core::error::Error;
use mosaicbert_core::layers::{geglu_fuse, geglu_fused_eval, geglu_naive_eval, GegluWeights};
use mosaicbert_core::perf::{pareto_front, ParetoPoint};
use mosaicbert_core::tensor::{matmul, randn_tensor, softmax_stable, Dtype, Tensor};
use mosaicbert_core::train::{lr_at, Schedule};
use mosaicbert_core::unpad::{pad, unpad};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run(seed: u64) -> Result<i32, Error> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // bf16 idempotence and known value
    // 0.10009765625 == f32 bits 0x3DCD0000, the nearest bf16 point to 0.1
    let mut ok = bf16_round(0.1).to_bits() == 0x3DCD_0000;
    for _ in 0..1000 {
        let x = f32::from_bits(rng.gen::<u32>());
        let r = bf16_round(x);
        if x.is_nan() {
            ok &= r.is_nan();
        } else {
            ok &= bf16_round(r).to_bits() == r.to_bits();
        }
    }
    check("bf16 round-to-nearest-even is idempotent", ok);

    // softmax shift invariance
    let mut ok = true;
    for _ in 0..50 {
        let data: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let shifted: Vec<f64> = data.iter().map(|x| x + 123.0).collect();
        let a = softmax_stable(&Tensor::from_f64(&[1, 8], data, Dtype::F64)?, -1)?;
        let b = softmax_stable(&Tensor::from_f64(&[1, 8], shifted, Dtype::F64)?, -1)?;
        for (p, q) in a.to_vec_f64().iter().zip(b.to_vec_f64()) {
            ok &= (p - q).abs() < 1e-7;
        }
    }
    check("softmax is shift-invariant", ok);

    // alibi slope ratio and bias symmetry
    let slopes = alibi_slopes(12)?;
    let ratio = 2f64.powf(-8.0 / 12.0);
    let mut ok = slopes
        .slopes
        .windows(2)
        .all(|w| (w[1] / w[0] - ratio).abs() < 1e-12);
    let bias = alibi_bias(33, slopes.slopes[0])?;
    for i in 0..33 {
        ok &= bias.get(i, i) == 0.0;
        for j in 0..33 {
            ok &= bias.get(i, j) == bias.get(j, i);
        }
    }
    check(
        "alibi slopes geometric, bias symmetric with zero diagonal",
        ok,
    );

    // matmul bf16 contract
    let a_raw: Vec<f32> = (0..12).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let b_raw: Vec<f32> = (0..20).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let a16 = Tensor::from_f32(&[3, 4], a_raw.clone(), Dtype::Bf16)?;
    let b16 = Tensor::from_f32(&[4, 5], b_raw.clone(), Dtype::Bf16)?;
    let af = Tensor::from_f32(
        &[3, 4],
        a_raw.iter().map(|&x| bf16_round(x)).collect(),
        Dtype::F32,
    )?;
    let bf = Tensor::from_f32(
        &[4, 5],
        b_raw.iter().map(|&x| bf16_round(x)).collect(),
        Dtype::F32,
    )?;
    let c16 = matmul(&a16, &b16)?;
    let cf = matmul(&af, &bf)?;
    let ok = c16
        .as_f32()
        .iter()
        .zip(cf.as_f32())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    check(
        "bf16 matmul equals f32 matmul of pre-rounded inputs bit-exactly",
        ok,
    );

    // geglu fused == naive
    let w = GegluWeights {
        w1: randn_tensor(&[6, 10], 0.3, Dtype::F32, &mut rng),
        b1: randn_tensor(&[10], 0.1, Dtype::F32, &mut rng),
        v: randn_tensor(&[6, 10], 0.3, Dtype::F32, &mut rng),
        bv: randn_tensor(&[10], 0.1, Dtype::F32, &mut rng),
        w2: randn_tensor(&[10, 6], 0.3, Dtype::F32, &mut rng),
        b2: randn_tensor(&[6], 0.1, Dtype::F32, &mut rng),
    };
    let x = randn_tensor(&[4, 6], 0.7, Dtype::F32, &mut rng);
    let na = geglu_naive_eval(&x, &w)?;
    let fu = geglu_fused_eval(&x, &geglu_fuse(&w))?;
    let ok = na
        .to_vec_f64()
        .iter()
        .zip(fu.to_vec_f64())
        .all(|(p, q)| (p - q).abs() <= 1e-6);
    check("fused GeGLU equals naive GeGLU", ok);

    // attention path equivalence
    let heads = 2;
    let aw = AttentionWeights::init(8, heads, 0.3, &mut rng)?;
    let slopes2 = alibi_slopes(heads)?;
    let x = randn_tensor(&[2, 12, 8], 0.5, Dtype::F32, &mut rng);
    let mask = AttentionMask::from_lengths(&[12, 7], 12)?;
    let naive = mhsa_naive_eval(&x, &aw, &slopes2, &mask)?;
    let mut ok = true;
    for kb in [1usize, 5, 12] {
        let tiled = mhsa_tiled_eval(&x, &aw, &slopes2, &mask, kb)?;
        for (i, (p, q)) in naive
            .to_vec_f64()
            .iter()
            .zip(tiled.to_vec_f64())
            .enumerate()
        {
            let row = (i / 8) % 12;
            let b = i / (8 * 12);
            if mask.row(b)[row] {
                ok &= (p - q).abs() <= 1e-5;
            }
        }
    }
    check("tiled attention matches naive attention", ok);

    // pad/unpad roundtrip
    let batch = randn_tensor(&[2, 6, 3], 1.0, Dtype::F32, &mut rng);
    let mask = AttentionMask::from_lengths(&[6, 3], 6)?;
    let packed = unpad(&batch, &mask)?;
    let restored = pad(&packed)?;
    let mut ok = true;
    for bi in 0..2 {
        for i in 0..6 {
            for t in 0..3 {
                let idx = (bi * 6 + i) * 3 + t;
                if mask.row(bi)[i] {
                    ok &= batch.as_f32()[idx].to_bits() == restored.as_f32()[idx].to_bits();
                } else {
                    ok &= restored.as_f32()[idx] == 0.0;
                }
            }
        }
    }
    check(
        "pad ∘ unpad restores real tokens bitwise, zeros elsewhere",
        ok,
    );

    // pareto vs brute force
    let points: Vec<ParetoPoint> = (0..60)
        .map(|i| ParetoPoint {
            wallclock_hours: (rng.gen_range(0..10) as f64) * 0.5,
            metric: (rng.gen_range(0..10) as f64) * 0.1,
            run_id: format!("r{}", i % 3),
            step: i,
        })
        .collect();
    let front = pareto_front(&points)?;
    let dominated = |p: &ParetoPoint| {
        points.iter().any(|q| {
            q.wallclock_hours <= p.wallclock_hours
                && q.metric >= p.metric
                && (q.wallclock_hours < p.wallclock_hours || q.metric > p.metric)
        })
    };
    let ok = front.iter().all(|p| !dominated(p))
        && points.iter().filter(|p| !dominated(p)).count() == front.len();
    check("pareto front matches brute-force domination", ok);

    // schedule endpoints
    let s = Schedule::new(1000, 0.06, 0.02, 5e-4);
    let ok = lr_at(0, &s)? == 0.0
        && lr_at(60, &s)? == 5e-4
        && lr_at(1000, &s)? == 0.02 * 5e-4
        && lr_at(1001, &s).is_err();
    check("schedule hits peak at 6% and 0.02x peak at the end", ok);

    // parameter counts
    let ok = {
        let base = mosaicbert_core::layers::count_params(&presets::bert_base().model) as f64;
        let mosaic =
            mosaicbert_core::layers::count_params(&presets::mosaicbert_base().model) as f64;
        (base - 110e6).abs() / 110e6 < 0.01 && (mosaic - 137e6).abs() / 137e6 < 0.01
    };
    check("preset parameter counts match published sizes", ok);

    if failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        Err(Error::Measurement(format!(
            "{failures} invariant check(s) failed"
        )))
    }
}
