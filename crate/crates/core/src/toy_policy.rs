//! A minimal conditional token policy.
//!
//! Logits are a linear map of a fixed feature vector built from the image,
//! the prompt and a window over the generated prefix:
//!
//! ```text
//! features = [ image | mean_onehot(prompt) | mean_onehot(last m prefix tokens) ]
//! logits   = W · features
//! ```
//!
//! The log-probability gradient is available in closed form,
//! `(onehot(a) - softmax(logits)) ⊗ features`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type TokenId = u32;

/// Token inventory of a world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    vision_tokens: BTreeSet<TokenId>,
    prior_tokens: BTreeSet<TokenId>,
    bos: TokenId,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(
        size: usize,
        vision_tokens: BTreeSet<TokenId>,
        prior_tokens: BTreeSet<TokenId>,
        bos: TokenId,
        eos: TokenId,
    ) -> Result<Self> {
        if size == 0 {
            return Err(LabError::invalid("vocabulary size must be positive"));
        }
        if bos == eos {
            return Err(LabError::invalid("BOS and EOS must differ"));
        }
        let in_range = |t: &TokenId| (*t as usize) < size;
        if !(vision_tokens.iter().all(in_range)
            && prior_tokens.iter().all(in_range)
            && in_range(&bos)
            && in_range(&eos))
        {
            return Err(LabError::invalid("token id outside vocabulary"));
        }
        if vision_tokens.intersection(&prior_tokens).next().is_some() {
            return Err(LabError::invalid("vision and prior token sets overlap"));
        }
        Ok(Self {
            size,
            vision_tokens,
            prior_tokens,
            bos,
            eos,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn vision_tokens(&self) -> &BTreeSet<TokenId> {
        &self.vision_tokens
    }

    pub fn prior_tokens(&self) -> &BTreeSet<TokenId> {
        &self.prior_tokens
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn is_vision(&self, token: TokenId) -> bool {
        self.vision_tokens.contains(&token)
    }
}

/// Image feature activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageFeatures(pub Vec<f64>);

impl ImageFeatures {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Borrowed view of a decoding state `(image, prompt, prefix)`.
#[derive(Debug, Clone, Copy)]
pub struct DecodingState<'a> {
    pub image: &'a [f64],
    pub prompt: &'a [TokenId],
    pub prefix: &'a [TokenId],
}

impl<'a> DecodingState<'a> {
    pub fn new(image: &'a [f64], prompt: &'a [TokenId], prefix: &'a [TokenId]) -> Self {
        Self {
            image,
            prompt,
            prefix,
        }
    }

    /// Same state with the image swapped out.
    pub fn with_image(&self, image: &'a [f64]) -> Self {
        Self { image, ..*self }
    }
}

/// Shape of the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub image_dim: usize,
    pub vocab_size: usize,
    /// Number of trailing prefix tokens averaged into the prefix block.
    pub window: usize,
}

impl FeatureLayout {
    pub fn new(image_dim: usize, vocab_size: usize, window: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(LabError::invalid("vocabulary size must be positive"));
        }
        if window == 0 {
            return Err(LabError::invalid("prefix window must be at least 1"));
        }
        Ok(Self {
            image_dim,
            vocab_size,
            window,
        })
    }

    pub fn dim(&self) -> usize {
        self.image_dim + 2 * self.vocab_size
    }

    pub fn prompt_offset(&self) -> usize {
        self.image_dim
    }

    pub fn prefix_offset(&self) -> usize {
        self.image_dim + self.vocab_size
    }

    /// Builds the feature vector for `state`.
    pub fn featurize(&self, state: &DecodingState<'_>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.featurize_into(state, &mut out)?;
        Ok(out)
    }

    pub fn featurize_into(&self, state: &DecodingState<'_>, out: &mut [f64]) -> Result<()> {
        if state.image.len() != self.image_dim {
            return Err(LabError::invalid(format!(
                "image has dimension {}, layout expects {}",
                state.image.len(),
                self.image_dim
            )));
        }
        debug_assert_eq!(out.len(), self.dim());
        out.fill(0.0);
        out[..self.image_dim].copy_from_slice(state.image);
        self.mean_onehot(
            state.prompt,
            &mut out[self.prompt_offset()..self.prefix_offset()],
        )?;
        let start = state.prefix.len().saturating_sub(self.window);
        self.mean_onehot(&state.prefix[start..], &mut out[self.prefix_offset()..])?;
        Ok(())
    }

    fn mean_onehot(&self, tokens: &[TokenId], block: &mut [f64]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let w = 1.0 / tokens.len() as f64;
        for &t in tokens {
            let slot = block
                .get_mut(t as usize)
                .ok_or_else(|| LabError::invalid(format!("token id {t} out of range")))?;
            *slot += w;
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Weights of the linear-softmax policy: one row per vocabulary token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    layout: FeatureLayout,
    weights: Matrix,
}

impl PolicyParams {
    pub fn zeros(layout: FeatureLayout) -> Self {
        Self {
            weights: Matrix::zeros(layout.vocab_size, layout.dim()),
            layout,
        }
    }

    pub fn new(layout: FeatureLayout, weights: Matrix) -> Result<Self> {
        if weights.rows() != layout.vocab_size || weights.cols() != layout.dim() {
            return Err(LabError::invalid(format!(
                "weights are {}x{}, layout needs {}x{}",
                weights.rows(),
                weights.cols(),
                layout.vocab_size,
                layout.dim()
            )));
        }
        if !weights.is_finite() {
            return Err(LabError::invalid("weights contain non-finite entries"));
        }
        Ok(Self { layout, weights })
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.vocab_size
    }

    pub fn featurize(&self, state: &DecodingState<'_>) -> Result<Vec<f64>> {
        self.layout.featurize(state)
    }

    /// `W · features`; `features` must come from this policy's layout.
    pub fn logits_from_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.weights.cols() {
            return Err(LabError::invalid(format!(
                "feature dimension {} does not match weights ({})",
                features.len(),
                self.weights.cols()
            )));
        }
        Ok((0..self.weights.rows())
            .map(|r| dot(self.weights.row(r), features))
            .collect())
    }

    pub fn logits(&self, state: &DecodingState<'_>) -> Result<Vec<f64>> {
        let f = self.featurize(state)?;
        self.logits_from_features(&f)
    }

    pub fn log_prob(&self, state: &DecodingState<'_>, token: TokenId) -> Result<f64> {
        let logits = self.logits(state)?;
        let lp = log_softmax(&logits);
        lp.get(token as usize)
            .copied()
            .ok_or_else(|| LabError::invalid(format!("token id {token} out of range")))
    }

    /// Analytic `∇_W log π(token | state)`.
    pub fn grad_log_prob(&self, state: &DecodingState<'_>, token: TokenId) -> Result<Matrix> {
        self.check_token(token)?;
        let f = self.featurize(state)?;
        let probs = softmax(&self.logits_from_features(&f)?);
        let mut g = Matrix::zeros(self.weights.rows(), self.weights.cols());
        accumulate_grad_log_prob(&mut g, &f, &probs, token, 1.0);
        Ok(g)
    }

    /// Greedy decoding: append the argmax token (lowest id on ties) until EOS
    /// or `max_len` tokens.
    pub fn greedy_decode(
        &self,
        image: &[f64],
        prompt: &[TokenId],
        eos: TokenId,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(LabError::invalid("max_len must be at least 1"));
        }
        let mut out = Vec::with_capacity(max_len);
        let mut feats = vec![0.0; self.layout.dim()];
        while out.len() < max_len {
            self.layout
                .featurize_into(&DecodingState::new(image, prompt, &out), &mut feats)?;
            let next = argmax(&self.logits_from_features(&feats)?) as TokenId;
            out.push(next);
            if next == eos {
                break;
            }
        }
        Ok(out)
    }

    pub(crate) fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.vocab_size() {
            Ok(())
        } else {
            Err(LabError::invalid(format!("token id {token} out of range")))
        }
    }
}

/// `grad += scale * (onehot(token) - probs) ⊗ features`
pub fn accumulate_grad_log_prob(
    grad: &mut Matrix,
    features: &[f64],
    probs: &[f64],
    token: TokenId,
    scale: f64,
) {
    for (r, &p) in probs.iter().enumerate() {
        let coef = scale * (if r == token as usize { 1.0 } else { 0.0 } - p);
        if coef == 0.0 {
            continue;
        }
        for (g, &x) in grad.row_mut(r).iter_mut().zip(features) {
            *g += coef * x;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
