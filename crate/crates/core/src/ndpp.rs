//! Neighbor-driven prototype perturbation.
//!
//! Each old prototype receives a repulsion-weighted displacement away from
//! its nearest neighboring prototypes: once from the old space (fixed for the
//! whole run) and, in the joint variant, once per epoch from the current new
//! space. The displaced prototypes form the pseudo-old set that the
//! compatibility loss aligns against.

use crate::error::Result;
use crate::linalg::Matrix;
use crate::prototypes::{knn_cross, PrototypeSet, SpaceTag};

/// Scale factors and neighbor count for the perturbation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NdppConfig {
    /// Amplitude of the fixed old-neighbor perturbation.
    pub alpha1: f64,
    /// Amplitude of the per-epoch new-neighbor perturbation.
    pub alpha2: f64,
    /// Neighbor count; must be <= classes - 1.
    pub k: usize,
    /// false = old-neighbor-only ablation (state frozen after init).
    pub use_joint: bool,
}

impl Default for NdppConfig {
    fn default() -> Self {
        NdppConfig {
            alpha1: 0.01,
            alpha2: 0.01,
            k: 100,
            use_joint: true,
        }
    }
}

/// Perturbation vectors and the pseudo-old prototypes they produce.
///
/// Invariant: `pseudo_old = old + alpha1 * r_old + alpha2 * r_epoch` row-wise.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    /// Old-neighbor perturbations, fixed after initialization.
    pub r_old: Matrix,
    /// New-neighbor perturbations, recomputed from scratch each epoch.
    pub r_epoch: Matrix,
    pub pseudo_old: PrototypeSet,
}

impl PerturbationState {
    /// Mean row norm of the total displacement (for logging).
    pub fn mean_displacement(&self, old: &PrototypeSet) -> f64 {
        let c = old.class_count();
        if c == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for class in 0..c {
            let d: f64 = self
                .pseudo_old
                .row(class)
                .iter()
                .zip(old.row(class))
                .map(|(p, o)| (p - o) * (p - o))
                .sum();
            total += d.sqrt();
        }
        total / c as f64
    }
}

/// Repulsion-weighted mean of difference vectors from base to its retained
/// neighbors: sum_i s_i * (base - p_i) / sum_i s_i. Empty neighbor lists give
/// the zero vector.
fn weighted_repulsion(
    base: &[f64],
    set: &PrototypeSet,
    exclude_class: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let neighbors = knn_cross(base, set, exclude_class, k)?;
    let mut r = vec![0.0; base.len()];
    if neighbors.is_empty() {
        return Ok(r);
    }
    let total: f64 = neighbors.sims.iter().sum();
    for (&class, &sim) in neighbors.class_ids.iter().zip(&neighbors.sims) {
        let p = set.row(class);
        for ((ri, &bi), &pi) in r.iter_mut().zip(base).zip(p) {
            *ri += sim * (bi - pi);
        }
    }
    for ri in &mut r {
        *ri /= total;
    }
    Ok(r)
}

/// Old-neighbor perturbation for one class.
pub fn perturbation_from_old(class: usize, old: &PrototypeSet, k: usize) -> Result<Vec<f64>> {
    weighted_repulsion(old.row(class), old, class, k)
}

/// New-neighbor perturbation for one pseudo-old prototype. The query and the
/// repulsion base are the pseudo-old prototype itself; neighbors come from
/// the new space, excluding the prototype's own class.
pub fn perturbation_from_new(
    pseudo: &[f64],
    class: usize,
    new: &PrototypeSet,
    k: usize,
) -> Result<Vec<f64>> {
    weighted_repulsion(pseudo, new, class, k)
}

/// Initial state: old-neighbor perturbations for every class, zero epoch
/// perturbations, pseudo-old = old + alpha1 * r_old.
pub fn init_state(old: &PrototypeSet, cfg: &NdppConfig) -> Result<PerturbationState> {
    let c = old.class_count();
    let dim = old.dim();
    let mut r_old = Matrix::zeros(c, dim);
    for class in 0..c {
        let r = perturbation_from_old(class, old, cfg.k)?;
        r_old.row_mut(class).copy_from_slice(&r);
    }
    let r_epoch = Matrix::zeros(c, dim);
    let pseudo_old = assemble(old, &r_old, &r_epoch, cfg);
    Ok(PerturbationState {
        r_old,
        r_epoch,
        pseudo_old,
    })
}

/// Per-epoch refresh of the joint variant: recompute the new-neighbor
/// perturbation from scratch against the freshly computed new prototypes.
/// The repulsion base carries only the alpha1 term, so consecutive epochs do
/// not feed back into each other.
pub fn epoch_update(
    state: &PerturbationState,
    old: &PrototypeSet,
    new: &PrototypeSet,
    cfg: &NdppConfig,
) -> Result<PerturbationState> {
    let c = old.class_count();
    let dim = old.dim();
    let mut r_epoch = Matrix::zeros(c, dim);
    for class in 0..c {
        let mut base = old.row(class).to_vec();
        for (b, r) in base.iter_mut().zip(state.r_old.row(class)) {
            *b += cfg.alpha1 * r;
        }
        let r = perturbation_from_new(&base, class, new, cfg.k)?;
        r_epoch.row_mut(class).copy_from_slice(&r);
    }
    let pseudo_old = assemble(old, &state.r_old, &r_epoch, cfg);
    Ok(PerturbationState {
        r_old: state.r_old.clone(),
        r_epoch,
        pseudo_old,
    })
}

fn assemble(old: &PrototypeSet, r_old: &Matrix, r_epoch: &Matrix, cfg: &NdppConfig) -> PrototypeSet {
    let c = old.class_count();
    let dim = old.dim();
    let mut protos = Matrix::zeros(c, dim);
    for class in 0..c {
        let out = protos.row_mut(class);
        for (i, o) in old.row(class).iter().enumerate() {
            out[i] = o + cfg.alpha1 * r_old.at(class, i) + cfg.alpha2 * r_epoch.at(class, i);
        }
    }
    PrototypeSet {
        protos,
        tag: SpaceTag::PseudoOld,
    }
}
