//! Optimization-driven prototype perturbation.
//!
//! A learnable displacement is attached to every old prototype and trained by
//! mini-batch SGD on hinge objectives that penalize prototype pairs whose
//! inner product exceeds a threshold: perturbed-old against perturbed-old,
//! and (in the joint variant) perturbed-old against the current new
//! prototypes. The optimized displacements define the pseudo-old set.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::prototypes::{PrototypeSet, SpaceTag};
use crate::rng::SeededRng;

/// Hinge thresholds, balance weight, and the inner SGD schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdppConfig {
    /// Inner-product threshold for old-old pairs.
    pub theta_old: f64,
    /// Inner-product threshold for old-new pairs.
    pub theta_new: f64,
    /// Weight of the old-new term.
    pub gamma: f64,
    /// Passes of the inner optimizer.
    pub inner_epochs: usize,
    /// Step size of the inner optimizer.
    pub inner_lr: f64,
    /// Pairs per SGD step.
    pub batch_size: usize,
    /// Ordered pairs sampled per inner epoch, for each term separately.
    /// Zero resolves to the training-set size at training time.
    pub pairs_per_epoch: usize,
    /// false = old-only ablation (second term never sampled).
    pub use_joint: bool,
    /// Reuse the previous epoch's perturbations as the starting point
    /// instead of re-initializing to zero.
    pub warm_start: bool,
}

impl Default for OdppConfig {
    fn default() -> Self {
        OdppConfig {
            theta_old: 0.6,
            theta_new: 0.6,
            gamma: 1.0,
            inner_epochs: 50,
            inner_lr: 0.001,
            batch_size: 1024,
            pairs_per_epoch: 0,
            use_joint: true,
            warm_start: false,
        }
    }
}

/// Optimized per-class displacements and the final objective value.
#[derive(Debug, Clone)]
pub struct LearnedPerturbations {
    pub r_l: Matrix,
    pub final_loss: f64,
}

/// Hinge term of one ordered old-old pair with both perturbations applied.
pub fn hinge_old_pair(
    p_c: &[f64],
    r_c: &[f64],
    p_c2: &[f64],
    r_c2: &[f64],
    theta_old: f64,
) -> f64 {
    let mut d = 0.0;
    for i in 0..p_c.len() {
        d += (p_c[i] + r_c[i]) * (p_c2[i] + r_c2[i]);
    }
    (d - theta_old).max(0.0)
}

/// Hinge term of one old-new pair; new prototypes carry no perturbation.
pub fn hinge_new_pair(p_c: &[f64], r_c: &[f64], p_n: &[f64], theta_new: f64) -> f64 {
    let mut d = 0.0;
    for i in 0..p_c.len() {
        d += (p_c[i] + r_c[i]) * p_n[i];
    }
    (d - theta_new).max(0.0)
}

/// A sampled mini-batch of ordered pairs. `old_pairs` holds (c, c') indices
/// into the old set; `new_pairs` holds (c, c'') with c'' indexing the new set.
#[derive(Debug, Clone, Default)]
pub struct PairBatch {
    pub old_pairs: Vec<(usize, usize)>,
    pub new_pairs: Vec<(usize, usize)>,
}

/// Sum of the hinge terms of a batch (the quantity `grad_r` differentiates).
pub fn batch_objective(
    batch: &PairBatch,
    old: &PrototypeSet,
    new: Option<&PrototypeSet>,
    r_l: &Matrix,
    cfg: &OdppConfig,
) -> f64 {
    let mut loss = 0.0;
    for &(c, c2) in &batch.old_pairs {
        loss += hinge_old_pair(old.row(c), r_l.row(c), old.row(c2), r_l.row(c2), cfg.theta_old);
    }
    if let Some(new) = new {
        for &(c, cn) in &batch.new_pairs {
            loss += cfg.gamma * hinge_new_pair(old.row(c), r_l.row(c), new.row(cn), cfg.theta_new);
        }
    }
    loss
}

/// Exact (sub)gradient of [`batch_objective`] w.r.t. the displacement matrix.
/// At the hinge kink the inactive side is taken (zero contribution).
pub fn grad_r(
    batch: &PairBatch,
    old: &PrototypeSet,
    new: Option<&PrototypeSet>,
    r_l: &Matrix,
    cfg: &OdppConfig,
) -> Result<Matrix> {
    if !batch.new_pairs.is_empty() && new.is_none() {
        return Err(Error::config("new-pair terms require new prototypes"));
    }
    let dim = old.dim();
    let mut grad = Matrix::zeros(old.class_count(), dim);
    for &(c, c2) in &batch.old_pairs {
        let a: Vec<f64> = old
            .row(c)
            .iter()
            .zip(r_l.row(c))
            .map(|(p, r)| p + r)
            .collect();
        let b: Vec<f64> = old
            .row(c2)
            .iter()
            .zip(r_l.row(c2))
            .map(|(p, r)| p + r)
            .collect();
        if dot(&a, &b) - cfg.theta_old > 0.0 {
            let gc = grad.row_mut(c);
            for i in 0..dim {
                gc[i] += b[i];
            }
            let gc2 = grad.row_mut(c2);
            for i in 0..dim {
                gc2[i] += a[i];
            }
        }
    }
    if let Some(new) = new {
        for &(c, cn) in &batch.new_pairs {
            let a: Vec<f64> = old
                .row(c)
                .iter()
                .zip(r_l.row(c))
                .map(|(p, r)| p + r)
                .collect();
            let pn = new.row(cn);
            if dot(&a, pn) - cfg.theta_new > 0.0 {
                let gc = grad.row_mut(c);
                for i in 0..dim {
                    gc[i] += cfg.gamma * pn[i];
                }
            }
        }
    }
    Ok(grad)
}

/// Pair count above which the reported final objective switches from the
/// exact double sum to a Monte-Carlo estimate.
const EXACT_OBJECTIVE_MAX_CLASSES: usize = 512;
const MONTE_CARLO_PAIRS: usize = 1_000_000;

/// Full objective over all ordered pairs: exact when the class count is at
/// most 512, otherwise a fixed-seed Monte-Carlo estimate over 10^6 pairs.
pub fn full_objective(
    old: &PrototypeSet,
    new: Option<&PrototypeSet>,
    r_l: &Matrix,
    cfg: &OdppConfig,
) -> f64 {
    let c = old.class_count();
    if c <= EXACT_OBJECTIVE_MAX_CLASSES {
        let mut loss = 0.0;
        for a in 0..c {
            for b in 0..c {
                if a == b {
                    continue;
                }
                loss +=
                    hinge_old_pair(old.row(a), r_l.row(a), old.row(b), r_l.row(b), cfg.theta_old);
            }
        }
        if let Some(new) = new {
            for a in 0..c {
                for b in 0..new.class_count() {
                    if a == b {
                        continue;
                    }
                    loss += cfg.gamma
                        * hinge_new_pair(old.row(a), r_l.row(a), new.row(b), cfg.theta_new);
                }
            }
        }
        loss
    } else {
        let mut rng = SeededRng::new(0x0bce_c71f);
        let total_pairs = (c * (c - 1)) as f64;
        let mut old_sum = 0.0;
        for _ in 0..MONTE_CARLO_PAIRS {
            let (a, b) = sample_pair(&mut rng, c);
            old_sum += hinge_old_pair(old.row(a), r_l.row(a), old.row(b), r_l.row(b), cfg.theta_old);
        }
        let mut loss = old_sum / MONTE_CARLO_PAIRS as f64 * total_pairs;
        if let Some(new) = new {
            let cn = new.class_count();
            let mut new_sum = 0.0;
            for _ in 0..MONTE_CARLO_PAIRS {
                let (a, b) = sample_cross_pair(&mut rng, c, cn);
                new_sum += hinge_new_pair(old.row(a), r_l.row(a), new.row(b), cfg.theta_new);
            }
            loss += cfg.gamma * new_sum / MONTE_CARLO_PAIRS as f64 * (c * (cn - 1)) as f64;
        }
        loss
    }
}

fn sample_pair(rng: &mut SeededRng, c: usize) -> (usize, usize) {
    loop {
        let a = rng.below(c);
        let b = rng.below(c);
        if a != b {
            return (a, b);
        }
    }
}

fn sample_cross_pair(rng: &mut SeededRng, c: usize, cn: usize) -> (usize, usize) {
    loop {
        let a = rng.below(c);
        let b = rng.below(cn);
        if a != b {
            return (a, b);
        }
    }
}

/// Learn displacements by mini-batch SGD. Each inner epoch samples
/// `pairs_per_epoch` ordered pairs with replacement for the old term and, in
/// the joint variant, the same number again for the new term; batches of
/// `batch_size` pairs are consumed with plain SGD steps.
///
/// `warm` supplies the starting displacements when warm-starting; otherwise
/// the start is the zero matrix.
pub fn optimize(
    old: &PrototypeSet,
    new: Option<&PrototypeSet>,
    cfg: &OdppConfig,
    rng: &mut SeededRng,
    warm: Option<&Matrix>,
) -> Result<LearnedPerturbations> {
    if cfg.use_joint && new.is_none() {
        return Err(Error::config(
            "joint perturbation optimization requires new prototypes",
        ));
    }
    if cfg.pairs_per_epoch == 0 || cfg.batch_size == 0 {
        return Err(Error::config(
            "pairs_per_epoch and batch_size must be positive",
        ));
    }
    if cfg.inner_lr <= 0.0 {
        return Err(Error::config("inner_lr must be positive"));
    }
    let c = old.class_count();
    if c < 2 {
        return Err(Error::config("need at least 2 classes to sample pairs"));
    }
    let dim = old.dim();

    // Separate streams so the old-pair sequence does not depend on whether
    // the joint term is being sampled.
    let mut rng_old = SeededRng::new(rng.next_u64());
    let mut rng_new = SeededRng::new(rng.next_u64());

    let mut r_l = match warm {
        Some(m) => m.clone(),
        None => Matrix::zeros(c, dim),
    };
    let new_for_terms = if cfg.use_joint { new } else { None };

    for _ in 0..cfg.inner_epochs {
        let old_pairs: Vec<(usize, usize)> = (0..cfg.pairs_per_epoch)
            .map(|_| sample_pair(&mut rng_old, c))
            .collect();
        let new_pairs: Vec<(usize, usize)> = match new_for_terms {
            Some(new) => (0..cfg.pairs_per_epoch)
                .map(|_| sample_cross_pair(&mut rng_new, c, new.class_count()))
                .collect(),
            None => Vec::new(),
        };

        let mut start = 0;
        while start < cfg.pairs_per_epoch {
            let end = (start + cfg.batch_size).min(cfg.pairs_per_epoch);
            let batch = PairBatch {
                old_pairs: old_pairs[start..end].to_vec(),
                new_pairs: if new_pairs.is_empty() {
                    Vec::new()
                } else {
                    new_pairs[start..end].to_vec()
                },
            };
            let grad = grad_r(&batch, old, new_for_terms, &r_l, cfg)?;
            for (r, g) in r_l.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *r -= cfg.inner_lr * g;
            }
            start = end;
        }
    }

    let final_loss = full_objective(old, new_for_terms, &r_l, cfg);
    Ok(LearnedPerturbations { r_l, final_loss })
}

/// Pseudo-old prototypes: old + learned displacement, no scale factor.
pub fn pseudo_old_from_learned(old: &PrototypeSet, r_l: &Matrix) -> Result<PrototypeSet> {
    if r_l.n_rows() != old.class_count() || r_l.n_cols() != old.dim() {
        return Err(Error::DimMismatch(r_l.n_rows(), old.class_count()));
    }
    let mut protos = old.protos.clone();
    for (p, r) in protos.as_mut_slice().iter_mut().zip(r_l.as_slice()) {
        *p += r;
    }
    Ok(PrototypeSet {
        protos,
        tag: SpaceTag::PseudoOld,
    })
}
