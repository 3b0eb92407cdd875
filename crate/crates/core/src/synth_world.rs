//! Seeded synthetic multimodal world.
//!
//! A scene assigns one attribute token to each of `attribute_slots` slots. The
//! image is the concatenation of one-hot blocks (one per slot) plus Gaussian
//! feature noise. The reference answer to the fixed prompt `[BOS, describe]`
//! interleaves one connective per slot with the true attribute tokens:
//!
//! ```text
//! conn_0 attr_0 conn_1 attr_1 ... conn_{S-1} attr_{S-1} EOS
//! ```
//!
//! Rejected responses swap `h` attribute tokens for wrong tokens of the same
//! slot. A few (slot, token) pairs are marked under-represented and are
//! downsampled when the reference policy is pretrained, which plants a
//! visual blind spot for the preference stage to repair.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::preference_loss::PreferencePair;
use crate::rng;
use crate::toy_policy::{
    accumulate_grad_log_prob, softmax, DecodingState, FeatureLayout, ImageFeatures, Matrix,
    PolicyParams, TokenId, Vocabulary,
};

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub attribute_slots: usize,
    pub tokens_per_slot: usize,
    /// Prefix window of the policy features.
    pub window: usize,
    /// Amplitude of the active entry of each one-hot block.
    pub image_scale: f64,
    /// Subtract the block mean `image_scale / tokens_per_slot` from every
    /// entry, so features are zero-mean over scenes.
    pub image_centering: bool,
    /// Standard deviation of the additive image feature noise.
    pub image_noise: f64,
    /// Probability that a slot gets an under-represented token.
    pub underrep_prob: f64,
    /// Attribute swaps per rejected response.
    pub swaps: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            attribute_slots: 4,
            tokens_per_slot: 5,
            window: 1,
            image_scale: 1.0,
            image_centering: true,
            image_noise: 0.1,
            underrep_prob: 1.0,
            swaps: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attribute_slots == 0 || self.tokens_per_slot < 2 {
            return Err(LabError::invalid(
                "need at least one slot and two tokens per slot",
            ));
        }
        let needed = 2 + self.attribute_slots * (self.tokens_per_slot + 1) + 1;
        if self.vocab_size < needed {
            return Err(LabError::invalid(format!(
                "vocabulary of {} cannot hold {} slots x {} tokens plus connectives (needs {needed})",
                self.vocab_size, self.attribute_slots, self.tokens_per_slot
            )));
        }
        if self.window == 0 {
            return Err(LabError::invalid("window must be at least 1"));
        }
        if !(self.image_scale > 0.0 && self.image_scale.is_finite()) {
            return Err(LabError::invalid("image_scale must be positive and finite"));
        }
        if !(self.image_noise >= 0.0 && self.image_noise.is_finite()) {
            return Err(LabError::invalid("image_noise must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.underrep_prob) {
            return Err(LabError::invalid("underrep_prob must lie in [0, 1]"));
        }
        if self.swaps > self.attribute_slots {
            return Err(LabError::invalid("more swaps than attribute slots"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    /// Vision tokens of each slot, in image-block order.
    pub slot_tokens: Vec<Vec<TokenId>>,
    /// One connective prior token per slot.
    pub connectives: Vec<TokenId>,
    pub describe: TokenId,
    pub underrepresented: BTreeSet<(usize, TokenId)>,
}

pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<WorldSpec> {
    config.validate()?;
    let mut r = rng::stream(&[rng::tag::WORLD, seed]);
    let mut ids: Vec<TokenId> = (2..config.vocab_size as TokenId).collect();
    ids.shuffle(&mut r);
    let (s, k) = (config.attribute_slots, config.tokens_per_slot);
    let slot_tokens: Vec<Vec<TokenId>> = (0..s).map(|i| ids[i * k..(i + 1) * k].to_vec()).collect();
    let connectives = ids[s * k..s * k + s].to_vec();
    let describe = ids[s * k + s];
    let vision: BTreeSet<TokenId> = ids[..s * k].iter().copied().collect();
    let prior: BTreeSet<TokenId> = ids[s * k..].iter().copied().collect();
    let vocab = Vocabulary::new(config.vocab_size, vision, prior, BOS, EOS)?;
    let mut underrepresented = BTreeSet::new();
    for (slot, tokens) in slot_tokens.iter().enumerate() {
        if r.random::<f64>() < config.underrep_prob {
            underrepresented.insert((slot, tokens[r.random_range(0..k)]));
        }
    }
    Ok(WorldSpec {
        config: config.clone(),
        vocab,
        slot_tokens,
        connectives,
        describe,
        underrepresented,
    })
}

/// A sampled scene and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub image: ImageFeatures,
    pub truth: Vec<TokenId>,
}

impl WorldSpec {
    pub fn image_dim(&self) -> usize {
        self.config.attribute_slots * self.config.tokens_per_slot
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            image_dim: self.image_dim(),
            vocab_size: self.config.vocab_size,
            window: self.config.window,
        }
    }

    pub fn prompt(&self) -> Vec<TokenId> {
        vec![BOS, self.describe]
    }

    /// Reference answer for a scene with the given per-slot truth.
    pub fn response_for(&self, truth: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(2 * truth.len() + 1);
        for (c, t) in self.connectives.iter().zip(truth) {
            out.push(*c);
            out.push(*t);
        }
        out.push(EOS);
        out
    }

    pub fn response_len(&self) -> usize {
        2 * self.config.attribute_slots + 1
    }

    /// Index of slot `s`'s attribute token inside a response.
    pub fn attribute_position(&self, slot: usize) -> usize {
        2 * slot + 1
    }

    pub fn is_underrepresented(&self, slot: usize, token: TokenId) -> bool {
        self.underrepresented.contains(&(slot, token))
    }

    /// Samples a scene from `r`.
    pub fn sample_scene(&self, r: &mut ChaCha8Rng) -> RenderedScene {
        let k = self.config.tokens_per_slot;
        let offset = if self.config.image_centering {
            self.config.image_scale / k as f64
        } else {
            0.0
        };
        let mut image = vec![-offset; self.image_dim()];
        let truth: Vec<TokenId> = self
            .slot_tokens
            .iter()
            .enumerate()
            .map(|(slot, tokens)| {
                let i = r.random_range(0..k);
                image[slot * k + i] += self.config.image_scale;
                tokens[i]
            })
            .collect();
        if self.config.image_noise > 0.0 {
            let noise = rng::standard_normal_vec(r, image.len());
            for (v, e) in image.iter_mut().zip(noise) {
                *v += self.config.image_noise * e;
            }
        }
        RenderedScene {
            image: ImageFeatures(image),
            truth,
        }
    }

    /// Scene number `index` of the evaluation stream keyed by `seed`.
    pub fn eval_scene(&self, seed: u64, index: u64) -> RenderedScene {
        self.sample_scene(&mut rng::stream(&[rng::tag::EVAL, seed, index]))
    }

    fn has_underrepresented(&self, scene: &RenderedScene) -> bool {
        scene
            .truth
            .iter()
            .enumerate()
            .any(|(s, &t)| self.is_underrepresented(s, t))
    }
}

/// Sequential source of preference pairs. Pair `i` is drawn from its own
/// keyed stream, so any prefix of the dataset is reproducible on its own.
#[derive(Debug, Clone)]
pub struct PairStream {
    seed: u64,
    counter: u64,
}

impl PairStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }
}

/// Renders the next pair: chosen describes the scene, rejected has
/// `swaps` attribute tokens replaced by wrong tokens of the same slot.
pub fn render_pair(world: &WorldSpec, stream: &mut PairStream) -> PreferencePair {
    let pair_id = stream.counter;
    stream.counter += 1;
    let mut r = rng::stream(&[rng::tag::PAIR, stream.seed, pair_id]);
    let scene = world.sample_scene(&mut r);
    let chosen = world.response_for(&scene.truth);
    let mut rejected = chosen.clone();
    let mut slots: Vec<usize> = (0..world.config.attribute_slots).collect();
    slots.shuffle(&mut r);
    let k = world.config.tokens_per_slot;
    for &slot in slots.iter().take(world.config.swaps) {
        let truth_idx = world.slot_tokens[slot]
            .iter()
            .position(|&t| t == scene.truth[slot])
            .expect("truth token belongs to its slot");
        let wrong = (truth_idx + r.random_range(1..k)) % k;
        rejected[world.attribute_position(slot)] = world.slot_tokens[slot][wrong];
    }
    PreferencePair {
        pair_id,
        image: scene.image,
        prompt: world.prompt(),
        chosen,
        rejected,
    }
}

pub fn generate_dataset(world: &WorldSpec, seed: u64, num_pairs: usize) -> Vec<PreferencePair> {
    let mut s = PairStream::new(seed);
    (0..num_pairs).map(|_| render_pair(world, &mut s)).collect()
}

pub fn write_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| LabError::Format {
            what: "pair".into(),
            detail: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| LabError::Format {
            what: format!("{} line {}", path.display(), n + 1),
            detail: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

/// Greedy attribute accuracy split by under-represented / regular truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub regular_correct: usize,
    pub regular_total: usize,
    pub underrep_correct: usize,
    pub underrep_total: usize,
}

impl AttributeAccuracy {
    pub fn regular(&self) -> f64 {
        ratio(self.regular_correct, self.regular_total)
    }

    pub fn underrep(&self) -> f64 {
        ratio(self.underrep_correct, self.underrep_total)
    }

    pub fn positions(&self) -> usize {
        self.regular_total + self.underrep_total
    }

    /// Fraction of attribute positions whose decoded token is not the truth.
    pub fn hallucination_rate(&self) -> f64 {
        let wrong = self.positions() - self.regular_correct - self.underrep_correct;
        ratio(wrong, self.positions())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Decodes `n_scenes` evaluation scenes greedily and scores every attribute
/// position. A missing position (early EOS) or a non-vision token counts as wrong.
pub fn attribute_accuracy(
    params: &PolicyParams,
    world: &WorldSpec,
    n_scenes: usize,
    seed: u64,
) -> Result<AttributeAccuracy> {
    if n_scenes == 0 {
        return Err(LabError::invalid("n_scenes must be at least 1"));
    }
    let prompt = world.prompt();
    let mut acc = AttributeAccuracy::default();
    for i in 0..n_scenes as u64 {
        let scene = world.eval_scene(seed, i);
        let out = params.greedy_decode(scene.image.values(), &prompt, EOS, world.response_len())?;
        for (slot, &truth) in scene.truth.iter().enumerate() {
            let hit = out.get(world.attribute_position(slot)) == Some(&truth);
            if world.is_underrepresented(slot, truth) {
                acc.underrep_total += 1;
                acc.underrep_correct += hit as usize;
            } else {
                acc.regular_total += 1;
                acc.regular_correct += hit as usize;
            }
        }
    }
    Ok(acc)
}

pub fn hallucination_rate(
    params: &PolicyParams,
    world: &WorldSpec,
    n_scenes: usize,
    seed: u64,
) -> Result<f64> {
    Ok(attribute_accuracy(params, world, n_scenes, seed)?.hallucination_rate())
}

/// Settings of the reference pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Keep probability of scenes with an under-represented pair is `1 - bias_strength`.
    pub bias_strength: f64,
    pub steps: usize,
    /// Training continues in chunks past `steps` until regular accuracy reaches
    /// its target, up to this many steps.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_scenes: usize,
    /// Regular-token greedy accuracy required before stopping.
    pub min_regular_accuracy: f64,
    /// Upper bound on under-represented accuracy, enforced when
    /// `bias_strength >= calibration_bias`.
    pub max_underrep_accuracy: f64,
    pub calibration_bias: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            bias_strength: 0.95,
            steps: 60,
            max_steps: 400,
            batch_size: 32,
            lr: 1.0,
            eval_scenes: 400,
            min_regular_accuracy: 0.9,
            max_underrep_accuracy: 0.5,
            calibration_bias: 0.95,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(LabError::invalid("bias_strength must lie in [0, 1]"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_scenes == 0 {
            return Err(LabError::invalid("pretraining sizes must be positive"));
        }
        if self.max_steps < self.steps {
            return Err(LabError::invalid("max_steps must be >= steps"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LabError::invalid("pretraining lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub accuracy: AttributeAccuracy,
}

fn pretrain_batch(
    world: &WorldSpec,
    cfg: &PretrainConfig,
    seed: u64,
    step: usize,
) -> Vec<RenderedScene> {
    let mut r = rng::stream(&[rng::tag::PRETRAIN, seed, step as u64]);
    let keep = 1.0 - cfg.bias_strength;
    let mut out = Vec::with_capacity(cfg.batch_size);
    while out.len() < cfg.batch_size {
        let scene = world.sample_scene(&mut r);
        if world.has_underrepresented(&scene) && r.random::<f64>() >= keep {
            continue;
        }
        out.push(scene);
    }
    out
}

/// Cross-entropy pretraining of the reference policy on chosen-style
/// responses, with scenes containing under-represented pairs downsampled.
///
/// Plain gradient descent: rare pairs then get proportionally small updates,
/// which is what leaves them unlearned. Per-coordinate adaptive steps would
/// rescale the rare features back up and erase the blind spot.
pub fn pretrain_reference(
    world: &WorldSpec,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(PolicyParams, PretrainReport)> {
    cfg.validate()?;
    let layout = world.layout();
    let mut params = PolicyParams::zeros(layout);
    let prompt = world.prompt();
    let mut feats = vec![0.0; layout.dim()];
    let chunk = (cfg.steps / 4).max(1);
    let mut step = 0;
    let mut target = cfg.steps;
    loop {
        while step < target {
            let mut grad = Matrix::zeros(layout.vocab_size, layout.dim());
            let batch = pretrain_batch(world, cfg, seed, step);
            let scale = -1.0 / batch.len() as f64;
            for scene in &batch {
                let resp = world.response_for(&scene.truth);
                for t in 0..resp.len() {
                    layout.featurize_into(
                        &DecodingState::new(scene.image.values(), &prompt, &resp[..t]),
                        &mut feats,
                    )?;
                    let probs = softmax(&params.logits_from_features(&feats)?);
                    accumulate_grad_log_prob(&mut grad, &feats, &probs, resp[t], scale);
                }
            }
            params.weights_mut().add_scaled(&grad, -cfg.lr);
            step += 1;
        }
        let accuracy = attribute_accuracy(&params, world, cfg.eval_scenes, seed ^ 0x5eed)?;
        if accuracy.regular() >= cfg.min_regular_accuracy {
            if cfg.bias_strength >= cfg.calibration_bias
                && accuracy.underrep() > cfg.max_underrep_accuracy
            {
                return Err(LabError::Calibration(format!(
                    "under-represented accuracy {:.3} exceeds {} after {step} steps",
                    accuracy.underrep(),
                    cfg.max_underrep_accuracy
                )));
            }
            return Ok((
                params,
                PretrainReport {
                    steps: step,
                    accuracy,
                },
            ));
        }
        if step >= cfg.max_steps {
            return Err(LabError::Calibration(format!(
                "regular accuracy {:.3} below {} after {step} steps",
                accuracy.regular(),
                cfg.min_regular_accuracy
            )));
        }
        target = (step + chunk).min(cfg.max_steps);
    }
}
