//! Token-level visual sensitivity, epistemic uncertainty and exploration
//! intensity.
//!
//! For every response token `a_t` two probes are taken from the current
//! policy, one with the clean image `v` and one with the corrupted image `v'`:
//!
//! - visual sensitivity `delta_t = logit(a_t | v) - logit(a_t | v')`
//! - epistemic uncertainty `u_t = logit(â_t | v) - logit(a_t | v)` where
//!   `â_t = argmax logit(· | v')`
//!
//! Preferred responses boost tokens that barely react to the image
//! (`delta <= q_tau`): `lam = 1 + alpha * sigmoid((u - mu) / sd)`.
//! Dispreferred responses soften the penalty on tokens that react strongly
//! (`delta >= q_{1-tau}`): `lam = 1 - alpha * sigmoid((u - mu) / sd)`.
//! `mu` is a low quantile and `sd` the population standard deviation of `u`
//! over the selected tokens.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::toy_policy::{argmax, DecodingState, PolicyParams, TokenId};
use crate::visual_noise::sigmoid;

/// Below this spread the normalized score is taken to be 0.
pub const SPREAD_GUARD: f64 = 1e-8;

pub fn logit_variation(
    params: &PolicyParams,
    state: &DecodingState<'_>,
    token: TokenId,
    blurred_image: &[f64],
) -> Result<f64> {
    params.check_token(token)?;
    let clean = params.logits(state)?;
    let blurred = params.logits(&state.with_image(blurred_image))?;
    Ok(clean[token as usize] - blurred[token as usize])
}

pub fn epistemic_uncertainty(
    params: &PolicyParams,
    state: &DecodingState<'_>,
    token: TokenId,
    blurred_image: &[f64],
) -> Result<f64> {
    params.check_token(token)?;
    let clean = params.logits(state)?;
    let blurred = params.logits(&state.with_image(blurred_image))?;
    let guess = argmax(&blurred);
    Ok(clean[guess] - clean[token as usize])
}

/// Raw probe values of one response token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenProbe {
    pub delta: f64,
    pub u: f64,
}

/// Teacher-forced probes for every token of `response`.
pub fn probe_response(
    params: &PolicyParams,
    image: &[f64],
    blurred_image: &[f64],
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<TokenProbe>> {
    let layout = params.layout();
    let mut clean_f = vec![0.0; layout.dim()];
    let mut blur_f = vec![0.0; layout.dim()];
    response
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            params.check_token(tok)?;
            let prefix = &response[..t];
            layout.featurize_into(&DecodingState::new(image, prompt, prefix), &mut clean_f)?;
            layout.featurize_into(
                &DecodingState::new(blurred_image, prompt, prefix),
                &mut blur_f,
            )?;
            let clean = params.logits_from_features(&clean_f)?;
            let blurred = params.logits_from_features(&blur_f)?;
            let guess = argmax(&blurred);
            Ok(TokenProbe {
                delta: clean[tok as usize] - blurred[tok as usize],
                u: clean[guess] - clean[tok as usize],
            })
        })
        .collect()
}

/// Linear-interpolation quantile of the sorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::invalid("quantile of an empty list"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(LabError::invalid(format!(
            "quantile level {q} outside [0, 1]"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(LabError::invalid("quantile input contains NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    Ok(match sorted.get(lo + 1) {
        Some(&next) => sorted[lo] + frac * (next - sorted[lo]),
        None => sorted[lo],
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(LabError::invalid(format!("tau {tau} outside (0, 1)")))
    }
}

/// Flags tokens with `delta <= q_tau(deltas)`.
pub fn insensitive_mask(deltas: &[f64], tau: f64) -> Result<Vec<bool>> {
    check_tau(tau)?;
    let thr = quantile(deltas, tau)?;
    Ok(deltas.iter().map(|&d| d <= thr).collect())
}

/// Flags tokens with `delta >= q_{1-tau}(deltas)`.
pub fn sensitive_mask(deltas: &[f64], tau: f64) -> Result<Vec<bool>> {
    check_tau(tau)?;
    let thr = quantile(deltas, 1.0 - tau)?;
    Ok(deltas.iter().map(|&d| d >= thr).collect())
}

/// Which side of the preference pair a response sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Preferred,
    Dispreferred,
}

impl Branch {
    fn sign(self) -> f64 {
        match self {
            Branch::Preferred => 1.0,
            Branch::Dispreferred => -1.0,
        }
    }

    fn select(self, delta: f64, thresholds: &MaskThreshold) -> bool {
        match self {
            Branch::Preferred => delta <= thresholds.0,
            Branch::Dispreferred => delta >= thresholds.0,
        }
    }

    fn threshold(self, deltas: &[f64], tau: f64) -> Result<MaskThreshold> {
        check_tau(tau)?;
        let q = match self {
            Branch::Preferred => tau,
            Branch::Dispreferred => 1.0 - tau,
        };
        Ok(MaskThreshold(quantile(deltas, q)?))
    }
}

struct MaskThreshold(f64);

/// Location/spread of `u` over the selected tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionStats {
    pub mu: f64,
    pub sigma: f64,
}

impl SelectionStats {
    pub fn from_selected(us: &[f64], mu_quantile: f64) -> Result<Self> {
        if us.is_empty() {
            return Err(LabError::invalid("no token selected by the mask"));
        }
        let mu = quantile(us, mu_quantile)?;
        let n = us.len() as f64;
        let mean = us.iter().sum::<f64>() / n;
        let var = us.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mu,
            sigma: var.sqrt(),
        })
    }

    fn score(&self, u: f64) -> f64 {
        if self.sigma < SPREAD_GUARD {
            0.0
        } else {
            (u - self.mu) / self.sigma
        }
    }
}

/// Exploration factors of one response plus the statistics behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationWeights {
    pub lam: Vec<f64>,
    pub stats: SelectionStats,
}

fn lambda_with(
    us: &[f64],
    mask: &[bool],
    alpha: f64,
    branch: Branch,
    stats: SelectionStats,
) -> Vec<f64> {
    us.iter()
        .zip(mask)
        .map(|(&u, &sel)| {
            if sel {
                1.0 + branch.sign() * alpha * sigmoid(stats.score(u))
            } else {
                1.0
            }
        })
        .collect()
}

fn lambda_for(
    us: &[f64],
    mask: &[bool],
    alpha: f64,
    mu_quantile: f64,
    branch: Branch,
) -> Result<ExplorationWeights> {
    if us.len() != mask.len() {
        return Err(LabError::invalid(format!(
            "{} uncertainties but {} mask flags",
            us.len(),
            mask.len()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(LabError::invalid(format!(
            "alpha {alpha} must be finite and >= 0"
        )));
    }
    let selected: Vec<f64> = us
        .iter()
        .zip(mask)
        .filter_map(|(&u, &s)| s.then_some(u))
        .collect();
    let stats = SelectionStats::from_selected(&selected, mu_quantile)?;
    Ok(ExplorationWeights {
        lam: lambda_with(us, mask, alpha, branch, stats),
        stats,
    })
}

/// `lam = 1 + alpha * sigmoid((u - mu) / sd)` on selected tokens, 1 elsewhere.
pub fn lambda_preferred(
    us: &[f64],
    mask: &[bool],
    alpha: f64,
    mu_quantile: f64,
) -> Result<ExplorationWeights> {
    lambda_for(us, mask, alpha, mu_quantile, Branch::Preferred)
}

/// `lam = 1 - alpha * sigmoid((u - mu) / sd)` on selected tokens, 1 elsewhere.
pub fn lambda_dispreferred(
    us: &[f64],
    mask: &[bool],
    alpha: f64,
    mu_quantile: f64,
) -> Result<ExplorationWeights> {
    lambda_for(us, mask, alpha, mu_quantile, Branch::Dispreferred)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagnostics {
    pub delta: f64,
    pub u: f64,
    pub selected: bool,
    pub lam: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDiagnostics {
    pub tokens: Vec<TokenDiagnostics>,
    pub mu_i: f64,
    pub sigma_i: f64,
}

impl SequenceDiagnostics {
    /// Diagnostics with every factor pinned to 1 (plain DPO, or an ablated branch).
    pub fn neutral(probes: &[TokenProbe]) -> Self {
        Self {
            tokens: probes
                .iter()
                .map(|p| TokenDiagnostics {
                    delta: p.delta,
                    u: p.u,
                    selected: false,
                    lam: 1.0,
                })
                .collect(),
            mu_i: 0.0,
            sigma_i: 0.0,
        }
    }

    /// Uniform factors, mainly for tests and frozen-diagnostic replays.
    pub fn constant(len: usize, lam: f64) -> Self {
        Self {
            tokens: vec![
                TokenDiagnostics {
                    delta: 0.0,
                    u: 0.0,
                    selected: lam != 1.0,
                    lam,
                };
                len
            ],
            mu_i: 0.0,
            sigma_i: 0.0,
        }
    }

    pub fn from_lambdas(lams: &[f64]) -> Self {
        Self {
            tokens: lams
                .iter()
                .map(|&lam| TokenDiagnostics {
                    delta: 0.0,
                    u: 0.0,
                    selected: lam != 1.0,
                    lam,
                })
                .collect(),
            mu_i: 0.0,
            sigma_i: 0.0,
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.lam).collect()
    }

    pub fn selected_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.selected).count()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Hyper-parameters of the exploration weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSettings {
    pub alpha: f64,
    pub tau: f64,
    pub mu_quantile: f64,
}

impl Default for ExplorationSettings {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            tau: 0.4,
            mu_quantile: 0.25,
        }
    }
}

/// Masks and factors for a single response, statistics taken over that
/// response alone.
pub fn diagnose_sequence(
    probes: &[TokenProbe],
    branch: Branch,
    settings: &ExplorationSettings,
) -> Result<SequenceDiagnostics> {
    let deltas: Vec<f64> = probes.iter().map(|p| p.delta).collect();
    let us: Vec<f64> = probes.iter().map(|p| p.u).collect();
    let mask = match branch {
        Branch::Preferred => insensitive_mask(&deltas, settings.tau)?,
        Branch::Dispreferred => sensitive_mask(&deltas, settings.tau)?,
    };
    let w = lambda_for(&us, &mask, settings.alpha, settings.mu_quantile, branch)?;
    Ok(assemble(probes, &mask, &w.lam, w.stats))
}

/// Masks and factors for several responses of the same branch, with the
/// delta quantile and the `u` statistics pooled over all of them.
pub fn diagnose_pooled(
    batch: &[Vec<TokenProbe>],
    branch: Branch,
    settings: &ExplorationSettings,
) -> Result<Vec<SequenceDiagnostics>> {
    let deltas: Vec<f64> = batch.iter().flatten().map(|p| p.delta).collect();
    let thr = branch.threshold(&deltas, settings.tau)?;
    let masks: Vec<Vec<bool>> = batch
        .iter()
        .map(|seq| seq.iter().map(|p| branch.select(p.delta, &thr)).collect())
        .collect();
    let selected: Vec<f64> = batch
        .iter()
        .zip(&masks)
        .flat_map(|(seq, m)| seq.iter().zip(m).filter_map(|(p, &s)| s.then_some(p.u)))
        .collect();
    let stats = SelectionStats::from_selected(&selected, settings.mu_quantile)?;
    Ok(batch
        .iter()
        .zip(&masks)
        .map(|(seq, mask)| {
            let us: Vec<f64> = seq.iter().map(|p| p.u).collect();
            let lam = lambda_with(&us, mask, settings.alpha, branch, stats);
            assemble(seq, mask, &lam, stats)
        })
        .collect())
}

fn assemble(
    probes: &[TokenProbe],
    mask: &[bool],
    lam: &[f64],
    stats: SelectionStats,
) -> SequenceDiagnostics {
    SequenceDiagnostics {
        tokens: probes
            .iter()
            .zip(mask)
            .zip(lam)
            .map(|((p, &selected), &lam)| TokenDiagnostics {
                delta: p.delta,
                u: p.u,
                selected,
                lam,
            })
            .collect(),
        mu_i: stats.mu,
        sigma_i: stats.sigma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_policy::{FeatureLayout, Matrix};
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn params_with(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> PolicyParams {
        let layout = FeatureLayout::new(cols - 2 * rows, rows, 4).unwrap();
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        PolicyParams::new(layout, Matrix::from_vec(rows, cols, data).unwrap()).unwrap()
    }

    #[test]
    fn unchanged_image_has_zero_variation() {
        let p = params_with(6, 3 + 12, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let img = [0.2, 0.9, -0.4];
        let s = DecodingState::new(&img, &[1], &[2, 3]);
        assert_eq!(logit_variation(&p, &s, 4, &img).unwrap(), 0.0);
    }

    #[test]
    fn image_blind_weights_have_zero_variation() {
        let p = params_with(
            6,
            3 + 12,
            |r, c| if c < 3 { 0.0 } else { (r + c) as f64 * 0.1 },
        );
        let img = [0.2, 0.9, -0.4];
        let blurred = [5.0, -3.0, 1.0];
        let s = DecodingState::new(&img, &[1], &[2, 3]);
        assert_eq!(logit_variation(&p, &s, 4, &blurred).unwrap(), 0.0);
    }

    #[test]
    fn variation_matches_two_logit_calls() {
        let p = params_with(6, 3 + 12, |r, c| {
            ((r * 31 + c * 17) % 11) as f64 * 0.13 - 0.6
        });
        let img = [0.2, 0.9, -0.4];
        let blurred = [0.1, 0.5, 0.3];
        let s = DecodingState::new(&img, &[1, 5], &[2]);
        let a = p.logits(&s).unwrap()[4];
        let b = p.logits(&s.with_image(&blurred)).unwrap()[4];
        assert_eq!(logit_variation(&p, &s, 4, &blurred).unwrap(), a - b);
        let probes = probe_response(&p, &img, &blurred, &[1, 5], &[2, 4]).unwrap();
        assert_close(probes[1].delta, a - b, 1e-15);
    }

    #[test]
    fn uncertainty_examples() {
        // token 0 wins under blur and is also the realized token -> u = 0
        let p = params_with(
            3,
            1 + 6,
            |r, c| if c == 0 { [3.5, 2.0, 0.0][r] } else { 0.0 },
        );
        let img = [1.0];
        let s = DecodingState::new(&img, &[], &[]);
        assert_eq!(epistemic_uncertainty(&p, &s, 0, &img).unwrap(), 0.0);
        assert_close(epistemic_uncertainty(&p, &s, 1, &img).unwrap(), 1.5, 1e-15);

        // an always-on prompt feature shifts every clean logit equally
        let shifted = params_with(3, 1 + 6, |r, c| match c {
            0 => [3.5, 2.0, 0.0][r],
            1 => 7.0,
            _ => 0.0,
        });
        let s2 = DecodingState::new(&img, &[0], &[]);
        assert_close(
            epistemic_uncertainty(&shifted, &s2, 1, &img).unwrap(),
            1.5,
            1e-12,
        );
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        let xs = [3.0, -1.0, 7.5, 2.0];
        assert_eq!(quantile(&xs, 0.0).unwrap(), -1.0);
        assert_eq!(quantile(&xs, 1.0).unwrap(), 7.5);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_close(quantile(&ten, 0.4).unwrap(), 4.6, 1e-12);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn mask_examples() {
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        let ins = insensitive_mask(&ten, 0.4).unwrap();
        assert_eq!(ins, (1..=10).map(|v| v <= 4).collect::<Vec<_>>());
        let sen = sensitive_mask(&ten, 0.4).unwrap();
        assert_eq!(sen, (1..=10).map(|v| v >= 7).collect::<Vec<_>>());
        assert!(insensitive_mask(&[2.0; 5], 0.4).unwrap().iter().all(|&b| b));
        assert!(sensitive_mask(&[2.0; 5], 0.4).unwrap().iter().all(|&b| b));
        assert_eq!(insensitive_mask(&[0.3], 0.4).unwrap(), vec![true]);
        assert_eq!(sensitive_mask(&[0.3], 0.4).unwrap(), vec![true]);
        assert!(insensitive_mask(&[0.3], 1.0).is_err());
    }

    #[test]
    fn lambda_examples() {
        let w = lambda_preferred(&[1.0, 2.0], &[true, false], 0.0, 0.25).unwrap();
        assert_eq!(w.lam, vec![1.0, 1.0]);

        let w = lambda_preferred(&[4.2, 9.0], &[true, false], 0.3, 0.25).unwrap();
        assert_close(w.lam[0], 1.15, 1e-15);
        assert_eq!(w.lam[1], 1.0);
        let w = lambda_dispreferred(&[4.2, 9.0], &[true, false], 0.3, 0.25).unwrap();
        assert_close(w.lam[0], 0.85, 1e-15);

        let w = lambda_preferred(&[10.0, 0.0], &[true, true], 0.3, 0.25).unwrap();
        assert_close(w.stats.mu, 2.5, 1e-15);
        assert_close(w.stats.sigma, 5.0, 1e-15);
        assert_close(w.lam[0], 1.0 + 0.3 * sigmoid(1.5), 1e-15);
        assert_close(w.lam[0], 1.245272, 1e-6);
        assert_close(w.lam[1], 1.113262, 1e-6);

        assert!(lambda_preferred(&[1.0], &[false], 0.3, 0.25).is_err());
        assert!(lambda_preferred(&[1.0], &[true, true], 0.3, 0.25).is_err());
    }

    #[test]
    fn dispreferred_lambda_decreases_in_u() {
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let u = i as f64 * 0.5;
            let w = lambda_dispreferred(&[u, 1.0, 3.0, 5.0], &[true; 4], 0.3, 0.25).unwrap();
            // the statistics move with u too, so compare against the fixed-stats form
            let fixed = lambda_with(
                &[u],
                &[true],
                0.3,
                Branch::Dispreferred,
                SelectionStats {
                    mu: 1.0,
                    sigma: 2.0,
                },
            )[0];
            assert!(fixed < prev);
            prev = fixed;
            assert!(w.lam.iter().all(|&l| (0.7..=1.0).contains(&l)));
        }
    }

    #[test]
    fn pooled_matches_sequence_scope_for_a_single_sequence() {
        let probes: Vec<TokenProbe> = (0..9)
            .map(|i| TokenProbe {
                delta: ((i * 7) % 5) as f64 * 0.3 - 0.2,
                u: ((i * 3) % 4) as f64,
            })
            .collect();
        let s = ExplorationSettings::default();
        for b in [Branch::Preferred, Branch::Dispreferred] {
            let one = diagnose_sequence(&probes, b, &s).unwrap();
            let pooled = diagnose_pooled(std::slice::from_ref(&probes), b, &s).unwrap();
            assert_eq!(pooled[0], one);
        }
    }

    proptest! {
        #[test]
        fn bounds_and_cardinality(
            raw in prop::collection::vec((-5.0f64..5.0, 0.0f64..8.0), 1..20),
            alpha in 0.0f64..1.0,
            tau in 0.05f64..0.95,
        ) {
            let probes: Vec<TokenProbe> = raw.iter().map(|&(d, u)| TokenProbe { delta: d, u }).collect();
            let s = ExplorationSettings { alpha, tau, mu_quantile: 0.25 };
            let w = diagnose_sequence(&probes, Branch::Preferred, &s).unwrap();
            let l = diagnose_sequence(&probes, Branch::Dispreferred, &s).unwrap();
            for t in &w.tokens {
                prop_assert!(t.lam >= 1.0 && t.lam <= 1.0 + alpha);
                if !t.selected { prop_assert_eq!(t.lam, 1.0); }
            }
            for t in &l.tokens {
                prop_assert!(t.lam >= 1.0 - alpha && t.lam <= 1.0);
                if !t.selected { prop_assert_eq!(t.lam, 1.0); }
            }
            prop_assert!(w.sigma_i >= 0.0 && l.sigma_i >= 0.0);
            let n = probes.len();
            let mut ds: Vec<f64> = raw.iter().map(|r| r.0).collect();
            ds.sort_by(|a, b| a.total_cmp(b));
            ds.dedup();
            if ds.len() == n {
                let p = tau * (n - 1) as f64;
                prop_assert_eq!(w.selected_count(), p.floor() as usize + 1);
                let p = (1.0 - tau) * (n - 1) as f64;
                prop_assert_eq!(l.selected_count(), n - p.ceil() as usize);
            }
        }
    }
}
