//! DPO and exploration-weighted DPO objectives.
//!
//! For a pair `(y_w, y_l)` the weighted margin is
//!
//! ```text
//! m = beta * Σ_t [lam_w,t * log pi(a_t^w|s_t) - log ref(a_t^w|s_t)]
//!   - beta * Σ_t [lam_l,t * log pi(a_t^l|s_t) - log ref(a_t^l|s_t)]
//! loss = -log sigmoid(m)
//! ```
//!
//! The factors `lam` are constants for differentiation. With every factor
//! equal to 1 this is the plain DPO loss, evaluated through the same code.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::toy_policy::{
    accumulate_grad_log_prob, log_softmax, softmax, DecodingState, ImageFeatures, Matrix,
    PolicyParams, TokenId,
};
use crate::uncertainty::SequenceDiagnostics;
use crate::visual_noise::sigmoid;

/// One preference example: image, prompt, chosen and rejected responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub pair_id: u64,
    pub image: ImageFeatures,
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl PreferencePair {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(LabError::invalid(format!(
                "pair {}: chosen and rejected must be non-empty",
                self.pair_id
            )));
        }
        let bad = self
            .prompt
            .iter()
            .chain(&self.chosen)
            .chain(&self.rejected)
            .find(|&&t| t as usize >= vocab_size);
        if let Some(t) = bad {
            return Err(LabError::invalid(format!(
                "pair {}: token id {t} out of range",
                self.pair_id
            )));
        }
        if self.image.values().iter().any(|v| !v.is_finite()) {
            return Err(LabError::invalid(format!(
                "pair {}: non-finite image feature",
                self.pair_id
            )));
        }
        Ok(())
    }
}

/// Per-token ingredients of a branch sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTerm {
    pub policy_logp: f64,
    pub ref_logp: f64,
    pub lam: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub chosen_sum: f64,
    pub rejected_sum: f64,
    pub margin: f64,
    pub loss: f64,
    pub chosen_tokens: Vec<TokenTerm>,
    pub rejected_tokens: Vec<TokenTerm>,
}

/// `-log sigmoid(x)` in the overflow-free form `softplus(-x)`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Teacher-forced `log pi(a_t | image, prompt, response[..t])` for each token.
pub fn teacher_forced_log_probs(
    params: &PolicyParams,
    image: &[f64],
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<f64>> {
    let layout = params.layout();
    let mut feats = vec![0.0; layout.dim()];
    response
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            params.check_token(tok)?;
            layout.featurize_into(
                &DecodingState::new(image, prompt, &response[..t]),
                &mut feats,
            )?;
            Ok(log_softmax(&params.logits_from_features(&feats)?)[tok as usize])
        })
        .collect()
}

/// Frozen reference log-probabilities of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLogProbs {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

impl ReferenceLogProbs {
    pub fn compute(reference: &PolicyParams, pair: &PreferencePair) -> Result<Self> {
        let img = pair.image.values();
        Ok(Self {
            chosen: teacher_forced_log_probs(reference, img, &pair.prompt, &pair.chosen)?,
            rejected: teacher_forced_log_probs(reference, img, &pair.prompt, &pair.rejected)?,
        })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(LabError::invalid(format!(
            "beta {beta} must be positive and finite"
        )))
    }
}

struct BranchPass {
    sum: f64,
    terms: Vec<TokenTerm>,
}

#[allow(clippy::too_many_arguments)]
fn branch_pass(
    theta: &PolicyParams,
    pair: &PreferencePair,
    response: &[TokenId],
    ref_logp: &[f64],
    lam: &[f64],
    beta: f64,
    label: &str,
    grad: Option<(&mut Matrix, f64)>,
) -> Result<BranchPass> {
    if lam.len() != response.len() || ref_logp.len() != response.len() {
        return Err(LabError::invalid(format!(
            "pair {}: {label} branch has {} tokens but {} factors and {} reference terms",
            pair.pair_id,
            response.len(),
            lam.len(),
            ref_logp.len()
        )));
    }
    let layout = theta.layout();
    let img = pair.image.values();
    let mut feats = vec![0.0; layout.dim()];
    let mut grad = grad;
    let mut sum = 0.0;
    let mut terms = Vec::with_capacity(response.len());
    for (t, &tok) in response.iter().enumerate() {
        theta.check_token(tok)?;
        if !lam[t].is_finite() {
            return Err(LabError::invalid(format!(
                "pair {}: non-finite factor at {label} token {t}",
                pair.pair_id
            )));
        }
        layout.featurize_into(
            &DecodingState::new(img, &pair.prompt, &response[..t]),
            &mut feats,
        )?;
        let logits = theta.logits_from_features(&feats)?;
        let lp = log_softmax(&logits)[tok as usize];
        if !lp.is_finite() || !ref_logp[t].is_finite() {
            return Err(LabError::numeric(
                format!("pair {}, {label} token {t}", pair.pair_id),
                format!("log-probabilities policy={lp} reference={}", ref_logp[t]),
            ));
        }
        sum += lam[t] * lp - ref_logp[t];
        terms.push(TokenTerm {
            policy_logp: lp,
            ref_logp: ref_logp[t],
            lam: lam[t],
        });
        if let Some((g, scale)) = grad.as_mut() {
            accumulate_grad_log_prob(g, &feats, &softmax(&logits), tok, *scale * lam[t]);
        }
    }
    Ok(BranchPass {
        sum: beta * sum,
        terms,
    })
}

/// Weighted loss of one pair against cached reference log-probabilities.
/// When `want_grad` is set the gradient with respect to `theta`'s weights is
/// returned alongside, with the factors held constant.
pub fn weighted_loss(
    theta: &PolicyParams,
    reference: &ReferenceLogProbs,
    pair: &PreferencePair,
    beta: f64,
    lam_w: &[f64],
    lam_l: &[f64],
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Matrix>)> {
    check_beta(beta)?;
    let chosen = branch_pass(
        theta,
        pair,
        &pair.chosen,
        &reference.chosen,
        lam_w,
        beta,
        "chosen",
        None,
    )?;
    let rejected = branch_pass(
        theta,
        pair,
        &pair.rejected,
        &reference.rejected,
        lam_l,
        beta,
        "rejected",
        None,
    )?;
    let margin = chosen.sum - rejected.sum;
    let loss = neg_log_sigmoid(margin);
    if !loss.is_finite() {
        return Err(LabError::numeric(
            format!("pair {}", pair.pair_id),
            format!("loss is {loss} at margin {margin}"),
        ));
    }
    let grad = if want_grad {
        // d loss / d margin = -sigmoid(-margin)
        let outer = -sigmoid(-margin) * beta;
        let w = theta.weights();
        let mut g = Matrix::zeros(w.rows(), w.cols());
        branch_pass(
            theta,
            pair,
            &pair.chosen,
            &reference.chosen,
            lam_w,
            beta,
            "chosen",
            Some((&mut g, outer)),
        )?;
        branch_pass(
            theta,
            pair,
            &pair.rejected,
            &reference.rejected,
            lam_l,
            beta,
            "rejected",
            Some((&mut g, -outer)),
        )?;
        Some(g)
    } else {
        None
    };
    Ok((
        LossBreakdown {
            chosen_sum: chosen.sum,
            rejected_sum: rejected.sum,
            margin,
            loss,
            chosen_tokens: chosen.terms,
            rejected_tokens: rejected.terms,
        },
        grad,
    ))
}

fn ones(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

fn diag_lambdas(diag: &SequenceDiagnostics, len: usize, label: &str) -> Result<Vec<f64>> {
    if diag.len() != len {
        return Err(LabError::invalid(format!(
            "{label} diagnostics cover {} tokens, response has {len}",
            diag.len()
        )));
    }
    Ok(diag.lambdas())
}

pub fn dpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<LossBreakdown> {
    let r = ReferenceLogProbs::compute(reference, pair)?;
    let (b, _) = weighted_loss(
        theta,
        &r,
        pair,
        beta,
        &ones(pair.chosen.len()),
        &ones(pair.rejected.len()),
        false,
    )?;
    Ok(b)
}

pub fn dpo_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<(Matrix, LossBreakdown)> {
    let r = ReferenceLogProbs::compute(reference, pair)?;
    let (b, g) = weighted_loss(
        theta,
        &r,
        pair,
        beta,
        &ones(pair.chosen.len()),
        &ones(pair.rejected.len()),
        true,
    )?;
    Ok((g.expect("gradient requested"), b))
}

pub fn uedpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
    diag_w: &SequenceDiagnostics,
    diag_l: &SequenceDiagnostics,
) -> Result<LossBreakdown> {
    let lam_w = diag_lambdas(diag_w, pair.chosen.len(), "chosen")?;
    let lam_l = diag_lambdas(diag_l, pair.rejected.len(), "rejected")?;
    let r = ReferenceLogProbs::compute(reference, pair)?;
    Ok(weighted_loss(theta, &r, pair, beta, &lam_w, &lam_l, false)?.0)
}

pub fn uedpo_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
    diag_w: &SequenceDiagnostics,
    diag_l: &SequenceDiagnostics,
) -> Result<(Matrix, LossBreakdown)> {
    let lam_w = diag_lambdas(diag_w, pair.chosen.len(), "chosen")?;
    let lam_l = diag_lambdas(diag_l, pair.rejected.len(), "rejected")?;
    let r = ReferenceLogProbs::compute(reference, pair)?;
    let (b, g) = weighted_loss(theta, &r, pair, beta, &lam_w, &lam_l, true)?;
    Ok((g.expect("gradient requested"), b))
}

/// Unweighted DPO margin, used as a progress metric.
pub fn implicit_reward_margin(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    Ok(dpo_loss(theta, reference, pair, beta)?.margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::toy_policy::FeatureLayout;
    use rand::Rng;

    fn layout() -> FeatureLayout {
        FeatureLayout::new(4, 8, 3).unwrap()
    }

    fn random_params(seed: u64, scale: f64) -> PolicyParams {
        let l = layout();
        let mut r = rng::stream(&[seed, 77]);
        let data = (0..l.vocab_size * l.dim())
            .map(|_| scale * r.random_range(-1.0..1.0))
            .collect();
        PolicyParams::new(l, Matrix::from_vec(l.vocab_size, l.dim(), data).unwrap()).unwrap()
    }

    fn pair() -> PreferencePair {
        PreferencePair {
            pair_id: 3,
            image: ImageFeatures(vec![1.0, 0.0, 0.2, -0.1]),
            prompt: vec![0, 7],
            chosen: vec![2, 3, 4, 1],
            rejected: vec![2, 5, 4, 1],
        }
    }

    #[test]
    fn identical_policies_give_ln2() {
        let p = random_params(1, 1.0);
        let b = dpo_loss(&p, &p, &pair(), 0.1).unwrap();
        assert_eq!(b.margin, 0.0);
        assert!((b.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn scalar_loss_values() {
        assert!((neg_log_sigmoid(0.1) - 0.644396660073571).abs() < 1e-12);
        assert!((neg_log_sigmoid(-0.03) - 0.7082596763414485).abs() < 1e-12);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-12);
        assert!(neg_log_sigmoid(800.0) >= 0.0);
    }

    #[test]
    fn single_token_weighted_margin() {
        // log pi = log ref = -1, lam_w = 1.3, rejected contributes 0
        let chosen = [TokenTerm {
            policy_logp: -1.0,
            ref_logp: -1.0,
            lam: 1.3,
        }];
        let sum: f64 = 0.1
            * chosen
                .iter()
                .map(|t| t.lam * t.policy_logp - t.ref_logp)
                .sum::<f64>();
        assert!((sum - -0.03).abs() < 1e-15);
        assert!((neg_log_sigmoid(sum) - 0.708260).abs() < 1e-6);
    }

    #[test]
    fn swapping_branches_negates_margin() {
        let theta = random_params(2, 1.0);
        let reference = random_params(3, 1.0);
        let p = pair();
        let b = dpo_loss(&theta, &reference, &p, 0.1).unwrap();
        let swapped = PreferencePair {
            chosen: p.rejected.clone(),
            rejected: p.chosen.clone(),
            ..p
        };
        let s = dpo_loss(&theta, &reference, &swapped, 0.1).unwrap();
        assert!((s.margin + b.margin).abs() < 1e-15);
        assert!((s.loss - neg_log_sigmoid(-b.margin)).abs() < 1e-15);
    }

    #[test]
    fn unit_factors_reduce_to_dpo() {
        let theta = random_params(4, 1.0);
        let reference = random_params(5, 1.0);
        let p = pair();
        let d = dpo_loss(&theta, &reference, &p, 0.1).unwrap();
        let one = SequenceDiagnostics::constant(4, 1.0);
        let u = uedpo_loss(&theta, &reference, &p, 0.1, &one, &one).unwrap();
        assert_eq!(d, u);
        let (gd, _) = dpo_grad(&theta, &reference, &p, 0.1).unwrap();
        let (gu, _) = uedpo_grad(&theta, &reference, &p, 0.1, &one, &one).unwrap();
        assert_eq!(gd, gu);
        assert_eq!(
            implicit_reward_margin(&theta, &reference, &p, 0.1).unwrap(),
            d.margin
        );
    }

    #[test]
    fn raising_a_chosen_factor_raises_loss() {
        let theta = random_params(6, 1.0);
        let reference = random_params(7, 1.0);
        let p = pair();
        let one = SequenceDiagnostics::constant(4, 1.0);
        let base = uedpo_loss(&theta, &reference, &p, 0.1, &one, &one).unwrap();
        let bumped = SequenceDiagnostics::from_lambdas(&[1.0, 1.2, 1.0, 1.0]);
        let b = uedpo_loss(&theta, &reference, &p, 0.1, &bumped, &one).unwrap();
        assert!(b.chosen_tokens[1].policy_logp < 0.0);
        assert!(b.margin < base.margin);
        assert!(b.loss > base.loss);
    }

    #[test]
    fn identical_policies_gradient_is_half_weighted() {
        let theta = random_params(8, 1.0);
        let p = pair();
        let one = SequenceDiagnostics::constant(4, 1.0);
        let (g, _) = uedpo_grad(&theta, &theta, &p, 0.1, &one, &one).unwrap();
        let mut expect = Matrix::zeros(g.rows(), g.cols());
        let img = p.image.values();
        for (resp, sign) in [(&p.chosen, 1.0), (&p.rejected, -1.0)] {
            for t in 0..resp.len() {
                let s = DecodingState::new(img, &p.prompt, &resp[..t]);
                expect.add_scaled(
                    &theta.grad_log_prob(&s, resp[t]).unwrap(),
                    -0.5 * 0.1 * sign,
                );
            }
        }
        for (a, b) in g.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let theta = random_params(9, 1.0);
        let p = pair();
        let short = SequenceDiagnostics::constant(3, 1.0);
        let one = SequenceDiagnostics::constant(4, 1.0);
        assert!(uedpo_loss(&theta, &theta, &p, 0.1, &short, &one).is_err());
        assert!(uedpo_grad(&theta, &theta, &p, 0.1, &one, &short).is_err());
    }

    #[test]
    fn teacher_forcing_ignores_later_tokens() {
        let theta = random_params(10, 1.0);
        let p = pair();
        let img = p.image.values();
        let a = teacher_forced_log_probs(&theta, img, &p.prompt, &[2, 3, 4, 1]).unwrap();
        let b = teacher_forced_log_probs(&theta, img, &p.prompt, &[2, 3, 6, 0]).unwrap();
        assert_eq!(a[..2], b[..2]);
    }

    #[test]
    fn non_finite_weights_surface_token_index() {
        let mut theta = random_params(11, 1.0);
        // finite weights whose logit overflows once prefix token 3 is in the
        // window, i.e. from chosen position 2 on
        let col = theta.layout().prefix_offset() + 3;
        theta.weights_mut().set(5, 0, f64::MAX);
        theta.weights_mut().set(5, col, f64::MAX);
        let err = dpo_loss(&theta, &random_params(12, 1.0), &pair(), 0.1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("chosen token 2"), "{msg}");
    }
}
