//! Contrastive benchmarks: naive vs tiled attention, naive vs fused GeGLU,
//! padded vs unpadded forward passes on a half-padded batch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mosaicbert_bench::{attention_fixture, desk_model, geglu_fixture};
use mosaicbert_core::attention::{mhsa_naive_eval, mhsa_tiled_eval, AttentionMask};
use mosaicbert_core::layers::{geglu_fuse, geglu_fused_eval, geglu_naive_eval, EncoderInput};

fn attention_paths(c: &mut Criterion) {
    let fx = attention_fixture(2, 128, 64, 2);
    let mut group = c.benchmark_group("attention");
    group.bench_function("naive_L128", |b| {
        b.iter(|| mhsa_naive_eval(black_box(&fx.x), &fx.weights, &fx.slopes, &fx.mask).unwrap())
    });
    for kb in [16usize, 64] {
        group.bench_with_input(BenchmarkId::new("tiled_L128", kb), &kb, |b, &kb| {
            b.iter(|| {
                mhsa_tiled_eval(black_box(&fx.x), &fx.weights, &fx.slopes, &fx.mask, kb).unwrap()
            })
        });
    }
    group.finish();
}

fn geglu_variants(c: &mut Criterion) {
    let (x, w) = geglu_fixture(256, 64, 256);
    let fused = geglu_fuse(&w);
    let mut group = c.benchmark_group("geglu");
    group.bench_function("naive", |b| {
        b.iter(|| geglu_naive_eval(black_box(&x), &w).unwrap())
    });
    group.bench_function("fused", |b| {
        b.iter(|| geglu_fused_eval(black_box(&x), &fused).unwrap())
    });
    group.finish();
}

fn unpadding(c: &mut Criterion) {
    // Half the positions are padding; the unpadded path should win.
    let (batch, len) = (8usize, 32usize);
    let lengths: Vec<usize> = (0..batch)
        .map(|i| if i % 2 == 0 { len } else { len / 2 })
        .collect();
    let mask = AttentionMask::from_lengths(&lengths, len).unwrap();
    let token_ids: Vec<u32> = (0..batch * len).map(|i| 5 + (i as u32 % 500)).collect();
    let input = EncoderInput {
        batch,
        len,
        token_ids,
        segment_ids: vec![0; batch * len],
        mask,
    };
    let padded = desk_model(false, false);
    let unpadded = desk_model(true, true);
    let ff_only = desk_model(true, false);
    let mut group = c.benchmark_group("forward_half_padded");
    group.bench_function("padded", |b| {
        b.iter(|| padded.forward_mlm_eval(black_box(&input)).unwrap())
    });
    group.bench_function("unpadded_full", |b| {
        b.iter(|| unpadded.forward_mlm_eval(black_box(&input)).unwrap())
    });
    group.bench_function("unpadded_ff_only", |b| {
        b.iter(|| ff_only.forward_mlm_eval(black_box(&input)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, attention_paths, geglu_variants, unpadding);
criterion_main!(benches);
