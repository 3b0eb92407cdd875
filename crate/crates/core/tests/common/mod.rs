//! Seeded random instances shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uedpo_lab::preference_loss::PreferencePair;
use uedpo_lab::toy_policy::{FeatureLayout, ImageFeatures, Matrix, PolicyParams, TokenId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params(r: &mut ChaCha8Rng, layout: FeatureLayout, scale: f64) -> PolicyParams {
    let data = (0..layout.vocab_size * layout.dim())
        .map(|_| scale * r.random_range(-1.0..1.0))
        .collect();
    PolicyParams::new(
        layout,
        Matrix::from_vec(layout.vocab_size, layout.dim(), data).unwrap(),
    )
    .unwrap()
}

fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| r.random_range(0..vocab) as TokenId)
        .collect()
}

/// A policy, a reference and a pair on a small random layout.
pub struct Instance {
    pub theta: PolicyParams,
    pub reference: PolicyParams,
    pub pair: PreferencePair,
}

pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let layout = FeatureLayout::new(
        r.random_range(2..7),
        r.random_range(5..11),
        r.random_range(1..4),
    )
    .unwrap();
    let theta = random_params(&mut r, layout, 1.0);
    let reference = random_params(&mut r, layout, 1.0);
    let image = (0..layout.image_dim)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let prompt_len = r.random_range(1..4);
    let prompt = random_tokens(&mut r, layout.vocab_size, prompt_len);
    let (lw, ll) = (r.random_range(2..8), r.random_range(2..8));
    let chosen = random_tokens(&mut r, layout.vocab_size, lw);
    let rejected = random_tokens(&mut r, layout.vocab_size, ll);
    Instance {
        theta,
        reference,
        pair: PreferencePair {
            pair_id: seed,
            image: ImageFeatures(image),
            prompt,
            chosen,
            rejected,
        },
    }
}
