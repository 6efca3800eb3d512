//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mosaicbert_core::attention::{AttentionMask, AttentionWeights};
use mosaicbert_core::config::{presets, EncoderConfig};
use mosaicbert_core::layers::{GegluWeights, Model};
use mosaicbert_core::tensor::{randn_tensor, Dtype, Tensor};

pub struct AttnFixture {
    pub x: Tensor,
    pub weights: AttentionWeights,
    pub slopes: mosaicbert_core::alibi::AlibiSlopes,
    pub mask: AttentionMask,
}

pub fn attention_fixture(batch: usize, len: usize, hidden: usize, heads: usize) -> AttnFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    AttnFixture {
        x: randn_tensor(&[batch, len, hidden], 0.5, Dtype::F32, &mut rng),
        weights: AttentionWeights::init(hidden, heads, 0.02, &mut rng).expect("weights"),
        slopes: mosaicbert_core::alibi::alibi_slopes(heads).expect("slopes"),
        mask: AttentionMask::full(batch, len),
    }
}

pub fn geglu_fixture(rows: usize, hidden: usize, intermediate: usize) -> (Tensor, GegluWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn_tensor(&[rows, hidden], 0.5, Dtype::F32, &mut rng);
    let w = GegluWeights {
        w1: randn_tensor(&[hidden, intermediate], 0.02, Dtype::F32, &mut rng),
        b1: Tensor::zeros(&[intermediate], Dtype::F32),
        v: randn_tensor(&[hidden, intermediate], 0.02, Dtype::F32, &mut rng),
        bv: Tensor::zeros(&[intermediate], Dtype::F32),
        w2: randn_tensor(&[intermediate, hidden], 0.02, Dtype::F32, &mut rng),
        b2: Tensor::zeros(&[hidden], Dtype::F32),
    };
    (x, w)
}

pub fn desk_model(use_unpadding: bool, unpad_attention: bool) -> Model {
    let mut cfg: EncoderConfig = presets::scale_desk(&presets::mosaicbert_base()).model;
    cfg.use_unpadding = use_unpadding;
    cfg.unpad_attention = unpad_attention;
    Model::init(&cfg, 3).expect("model")
}
