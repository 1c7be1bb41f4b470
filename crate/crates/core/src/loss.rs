//! Training losses: the prototype-based compatibility loss (one positive
//! pseudo-old prototype against all real old prototypes as negatives),
//! softmax cross-entropy, and their combination. Every loss returns its
//! analytic gradient alongside the value.

use crate::error::{Error, Result};
use crate::linalg::{norm, ZERO_NORM_EPS};
use crate::prototypes::PrototypeSet;

/// Temperature and balance weight for the combined objective.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature of the compatibility loss.
    pub tau: f64,
    /// Weight of the compatibility loss in the total objective.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            lambda: 1.0,
        }
    }
}

/// Cosine of `e` against `p`, plus the gradient of that cosine w.r.t. `e`
/// (including the Jacobian of the e-normalization).
fn cosine_with_grad(e: &[f64], e_norm: f64, p: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p_norm = norm(p);
    if p_norm < ZERO_NORM_EPS {
        return Err(Error::ZeroVector(None));
    }
    let mut dot = 0.0;
    for (a, b) in e.iter().zip(p) {
        dot += a * b;
    }
    let cos = dot / (e_norm * p_norm);
    // d cos / d e = (p_hat - cos * e_hat) / |e|
    let grad: Vec<f64> = e
        .iter()
        .zip(p)
        .map(|(&ei, &pi)| (pi / p_norm - cos * ei / e_norm) / e_norm)
        .collect();
    Ok((cos, grad))
}

/// Compatibility loss for one embedding: the positive pair uses the
/// pseudo-old prototype of `pos_class`, the negatives use the real old
/// prototypes of every other class. With `pseudo_old` equal to `old` this is
/// the plain prototype-contrastive loss.
///
/// Returns the loss and its gradient w.r.t. the raw (unnormalized) embedding.
pub fn bc_loss(
    e: &[f64],
    pos_class: usize,
    pseudo_old: &PrototypeSet,
    old: &PrototypeSet,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let c = old.class_count();
    let e_norm = norm(e);
    if e_norm < ZERO_NORM_EPS {
        return Err(Error::ZeroVector(None));
    }

    // Scores: index 0 is the positive, then the C-1 negatives in class order.
    let mut scores = Vec::with_capacity(c);
    let mut grads = Vec::with_capacity(c);
    let (pos_cos, pos_grad) = cosine_with_grad(e, e_norm, pseudo_old.row(pos_class))?;
    scores.push(pos_cos / cfg.tau);
    grads.push(pos_grad);
    for class in 0..c {
        if class == pos_class {
            continue;
        }
        let (cos, grad) = cosine_with_grad(e, e_norm, old.row(class))?;
        scores.push(cos / cfg.tau);
        grads.push(grad);
    }

    // loss = -score_pos + logsumexp(scores)
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let loss = -scores[0] + max + sum_exp.ln();

    // d loss / d score_k = softmax_k - [k == pos]
    let mut grad_e = vec![0.0; e.len()];
    for (k, (score, cos_grad)) in scores.iter().zip(&grads).enumerate() {
        let softmax = (score - max).exp() / sum_exp;
        let coeff = (softmax - if k == 0 { 1.0 } else { 0.0 }) / cfg.tau;
        for (g, cg) in grad_e.iter_mut().zip(cos_grad) {
            *g += coeff * cg;
        }
    }
    Ok((loss, grad_e))
}

/// Softmax cross-entropy with log-sum-exp stabilization.
/// Gradient w.r.t. the logits is `softmax - one_hot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    debug_assert!(label < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let loss = -(logits[label] - max) + sum_exp.ln();
    let grad: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, l)| (l - max).exp() / sum_exp - if k == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Combined objective: `ce + lambda * bc`.
pub fn total_loss(ce: f64, bc: f64, cfg: &LossConfig) -> f64 {
    ce + cfg.lambda * bc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, l2_normalize, Matrix};
    use crate::prototypes::SpaceTag;
    use crate::rng::SeededRng;

    fn set_from(rows: &[Vec<f64>], tag: SpaceTag) -> PrototypeSet {
        PrototypeSet {
            protos: Matrix::from_rows(rows).unwrap(),
            tag,
        }
    }

    fn unit_set(rows: &[Vec<f64>], tag: SpaceTag) -> PrototypeSet {
        set_from(
            &rows
                .iter()
                .map(|r| l2_normalize(r).unwrap())
                .collect::<Vec<_>>(),
            tag,
        )
    }

    fn random_unit_set(c: usize, dim: usize, seed: u64, tag: SpaceTag) -> PrototypeSet {
        let mut rng = SeededRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect();
        unit_set(&rows, tag)
    }

    /// Direct evaluation of the unperturbed contrastive loss, written
    /// independently of `bc_loss`.
    fn plain_contrastive(e: &[f64], pos: usize, old: &PrototypeSet, tau: f64) -> f64 {
        let scores: Vec<f64> = (0..old.class_count())
            .map(|c| crate::linalg::cosine(e, old.row(c)).unwrap() / tau)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        -scores[pos] + lse
    }

    #[test]
    fn zero_perturbation_reduces_to_plain_contrastive() {
        let old = random_unit_set(5, 4, 21, SpaceTag::Old);
        let pseudo = PrototypeSet {
            protos: old.protos.clone(),
            tag: SpaceTag::PseudoOld,
        };
        let mut rng = SeededRng::new(9);
        let cfg = LossConfig::default();
        for _ in 0..20 {
            let e: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let pos = rng.below(5);
            let (loss, _) = bc_loss(&e, pos, &pseudo, &old, &cfg).unwrap();
            let direct = plain_contrastive(&e, pos, &old, cfg.tau);
            assert_eq!(loss, direct, "values must agree bitwise");
        }
    }

    #[test]
    fn aligned_positive_orthogonal_negative_closed_form() {
        // Two classes, e identical to the positive prototype and orthogonal
        // to the negative: loss = ln(1 + exp(-1/tau)).
        let old = set_from(&[vec![1.0, 0.0], vec![0.0, 1.0]], SpaceTag::Old);
        let pseudo = PrototypeSet {
            protos: old.protos.clone(),
            tag: SpaceTag::PseudoOld,
        };
        let cfg = LossConfig::default();
        let (loss, _) = bc_loss(&[1.0, 0.0], 0, &pseudo, &old, &cfg).unwrap();
        let expect = (-1.0f64 / cfg.tau).exp().ln_1p();
        assert!((loss - expect).abs() < 1e-18, "loss {loss} vs {expect}");
        assert!(loss > 0.0 && loss < 1e-6);
    }

    #[test]
    fn bc_gradient_matches_finite_differences() {
        let old = random_unit_set(5, 6, 33, SpaceTag::Old);
        let mut pseudo = PrototypeSet {
            protos: old.protos.clone(),
            tag: SpaceTag::PseudoOld,
        };
        // Displace the pseudo prototypes a little so the two sets differ.
        let mut rng = SeededRng::new(4);
        for r in 0..5 {
            for i in 0..6 {
                let v = pseudo.protos.at(r, i) + 0.05 * rng.normal();
                pseudo.protos.set(r, i, v);
            }
        }
        let cfg = LossConfig::default();
        let h = 1e-6;
        for trial in 0..10 {
            let e: Vec<f64> = (0..6).map(|_| rng.normal() + 0.1).collect();
            let pos = trial % 5;
            let (_, grad) = bc_loss(&e, pos, &pseudo, &old, &cfg).unwrap();
            for i in 0..6 {
                let mut ep = e.clone();
                let mut em = e.clone();
                ep[i] += h;
                em[i] -= h;
                let fp = bc_loss(&ep, pos, &pseudo, &old, &cfg).unwrap().0;
                let fm = bc_loss(&em, pos, &pseudo, &old, &cfg).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-4,
                    "trial {trial} coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn bc_loss_scale_invariant_and_grad_orthogonal() {
        let old = random_unit_set(6, 5, 17, SpaceTag::Old);
        let pseudo = PrototypeSet {
            protos: old.protos.clone(),
            tag: SpaceTag::PseudoOld,
        };
        let cfg = LossConfig::default();
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let e: Vec<f64> = (0..5).map(|_| rng.normal() + 0.2).collect();
            let scaled: Vec<f64> = e.iter().map(|x| 3.7 * x).collect();
            let (l1, g) = bc_loss(&e, 2, &pseudo, &old, &cfg).unwrap();
            let (l2, _) = bc_loss(&scaled, 2, &pseudo, &old, &cfg).unwrap();
            assert!((l1 - l2).abs() < 1e-9);
            // Cosine inputs make the loss radially flat: grad . e = 0.
            assert!(dot(&g, &e).abs() < 1e-9);
        }
    }

    #[test]
    fn bc_loss_monotone_in_positive_similarity() {
        // Prototypes span the first three axes; e keeps its components along
        // both negatives fixed and trades the fourth (spare) coordinate for
        // alignment with the positive. Negative cosines stay constant while
        // the positive cosine grows, so the loss must strictly decrease.
        let old = set_from(
            &[
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            SpaceTag::Old,
        );
        let pseudo = PrototypeSet {
            protos: old.protos.clone(),
            tag: SpaceTag::PseudoOld,
        };
        let cfg = LossConfig::default();
        let mut prev = f64::INFINITY;
        for step in 0..7 {
            let t = 0.2 + 0.1 * step as f64;
            let spare = (1.0 - t * t - 2.0 * 0.09f64).sqrt();
            let e = vec![t, 0.3, 0.3, spare];
            let (loss, _) = bc_loss(&e, 0, &pseudo, &old, &cfg).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < prev, "loss {loss} did not decrease from {prev}");
            prev = loss;
        }
    }

    #[test]
    fn zero_embedding_rejected() {
        let old = random_unit_set(3, 4, 1, SpaceTag::Old);
        let pseudo = PrototypeSet {
            protos: old.protos.clone(),
            tag: SpaceTag::PseudoOld,
        };
        assert!(matches!(
            bc_loss(&[0.0; 4], 0, &pseudo, &old, &LossConfig::default()),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        for c in [2usize, 4, 10] {
            let logits = vec![0.7; c];
            let (loss, _) = cross_entropy(&logits, 0);
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_saturated_logits_near_zero_loss() {
        let mut logits = vec![0.0; 4];
        logits[2] = 30.0;
        let (loss, _) = cross_entropy(&logits, 2);
        assert!(loss < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences_and_sums_to_zero() {
        let mut rng = SeededRng::new(40);
        let h = 1e-6;
        for _ in 0..10 {
            let logits: Vec<f64> = (0..6).map(|_| 2.0 * rng.normal()).collect();
            let label = rng.below(6);
            let (_, grad) = cross_entropy(&logits, label);
            assert!(grad.iter().sum::<f64>().abs() < 1e-12);
            for i in 0..6 {
                let mut lp = logits.clone();
                let mut lm = logits.clone();
                lp[i] += h;
                lm[i] -= h;
                let fd = (cross_entropy(&lp, label).0 - cross_entropy(&lm, label).0) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-4);
                assert!((grad[i] - fd).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn total_loss_composition() {
        let cfg = LossConfig {
            tau: 0.07,
            lambda: 0.0,
        };
        assert_eq!(total_loss(0.5, 0.25, &cfg), 0.5);
        let cfg1 = LossConfig {
            tau: 0.07,
            lambda: 1.0,
        };
        assert_eq!(total_loss(0.5, 0.25, &cfg1), 0.75);
        assert_eq!(LossConfig::default().lambda, 1.0);
        assert_eq!(LossConfig::default().tau, 0.07);
    }
}
