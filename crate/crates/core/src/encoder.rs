//! Small feed-forward encoder with a classifier head, trained by manual
//! reverse-mode gradients and SGD with momentum. Hosts both training loops:
//! the old model (cross-entropy only) and the backward-compatible new model
//! (cross-entropy plus the prototype compatibility loss, with optional
//! prototype perturbation refreshed every epoch).

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix, ZERO_NORM_EPS};
use crate::loss::{bc_loss, cross_entropy, LossConfig};
use crate::ndpp::{self, NdppConfig};
use crate::odpp::{self, OdppConfig};
use crate::prototypes::{compute_prototypes, EmbeddingMatrix, PrototypeSet, SpaceTag};
use crate::rng::SeededRng;

/// Network shape and classifier-head options.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub input_dim: usize,
    /// Hidden layer widths (rectifier nonlinearity after each).
    pub hidden: Vec<usize>,
    /// Output dimension of the embedding layer (linear).
    pub embed_dim: usize,
    /// Cosine-similarity classifier logits scaled by 1/tau_cls; false gives
    /// plain dot-product logits.
    #[serde(default = "default_cosine_logits")]
    pub cosine_logits: bool,
    #[serde(default = "default_tau_cls")]
    pub tau_cls: f64,
}

fn default_cosine_logits() -> bool {
    true
}

fn default_tau_cls() -> f64 {
    0.07
}

/// One dense layer: out x in weights plus a bias per output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Full parameter set of an encoder plus its classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Hidden layers followed by the linear embedding layer.
    pub layers: Vec<LayerParams>,
    /// One weight row per training class.
    pub classifier: Matrix,
    /// Global class id of each classifier row.
    pub class_ids: Vec<usize>,
    pub cosine_logits: bool,
    pub tau_cls: f64,
}

/// Optimizer schedule. The learning rate starts at `lr` and is multiplied by
/// `lr_drop_factor` at each epoch listed in `lr_drop_epochs`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Not read from config files; derived from the experiment's global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.1,
            lr_drop_factor: 0.1,
            lr_drop_epochs: vec![5, 10, 20],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }
}

/// Training method of the new model.
#[derive(Debug, Clone, PartialEq)]
pub enum BclMethod {
    /// Plain prototype-contrastive alignment to the unperturbed old
    /// prototypes.
    Baseline,
    /// Neighbor-driven perturbation from old neighbors only (fixed all run).
    NdppOld(NdppConfig),
    /// Neighbor-driven perturbation refreshed each epoch from new neighbors.
    Ndpp(NdppConfig),
    /// Learned perturbation from the old-pair objective only (fixed all run).
    OdppOld(OdppConfig),
    /// Learned perturbation re-optimized each epoch with the joint objective.
    Odpp(OdppConfig),
}

impl BclMethod {
    /// Canonical CLI name of the variant.
    pub fn name(&self) -> &'static str {
        match self {
            BclMethod::Baseline => "baseline",
            BclMethod::NdppOld(_) => "ndpp-old",
            BclMethod::Ndpp(_) => "ndpp",
            BclMethod::OdppOld(_) => "odpp-old",
            BclMethod::Odpp(_) => "odpp",
        }
    }

    /// Build a variant by CLI name, forcing the joint flag of the carried
    /// config to match the variant.
    pub fn from_name(kind: &str, ndpp: &NdppConfig, odpp: &OdppConfig) -> Result<Self> {
        match kind {
            "baseline" => Ok(BclMethod::Baseline),
            "ndpp-old" => {
                let mut c = ndpp.clone();
                c.use_joint = false;
                Ok(BclMethod::NdppOld(c))
            }
            "ndpp" => {
                let mut c = ndpp.clone();
                c.use_joint = true;
                Ok(BclMethod::Ndpp(c))
            }
            "odpp-old" => {
                let mut c = odpp.clone();
                c.use_joint = false;
                Ok(BclMethod::OdppOld(c))
            }
            "odpp" => {
                let mut c = odpp.clone();
                c.use_joint = true;
                Ok(BclMethod::Odpp(c))
            }
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_bc: f64,
    pub mean_total: f64,
    /// Mean per-class norm of pseudo-old minus old prototypes.
    pub perturb_norm_mean: f64,
}

/// Activations needed to run the backward pass of one sample.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// activations[0] is the input, the last entry is the embedding.
    activations: Vec<Vec<f64>>,
}

/// Fan-in scaled uniform initialization; biases start at zero.
pub fn init_params(
    arch: &EncoderArch,
    class_ids: Vec<usize>,
    rng: &mut SeededRng,
) -> EncoderParams {
    let mut dims = vec![arch.input_dim];
    dims.extend_from_slice(&arch.hidden);
    dims.push(arch.embed_dim);

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for win in dims.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut w = Matrix::zeros(fan_out, fan_in);
        for v in w.as_mut_slice() {
            *v = (2.0 * rng.next_f64() - 1.0) * scale;
        }
        layers.push(LayerParams {
            w,
            b: vec![0.0; fan_out],
        });
    }

    let scale = 1.0 / (arch.embed_dim as f64).sqrt();
    let mut classifier = Matrix::zeros(class_ids.len(), arch.embed_dim);
    for v in classifier.as_mut_slice() {
        *v = (2.0 * rng.next_f64() - 1.0) * scale;
    }

    EncoderParams {
        input_dim: arch.input_dim,
        embed_dim: arch.embed_dim,
        layers,
        classifier,
        class_ids,
        cosine_logits: arch.cosine_logits,
        tau_cls: arch.tau_cls,
    }
}

/// Forward pass: embedding (pre-normalization), classifier logits, and the
/// cache for `backward`.
pub fn forward(params: &EncoderParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, ForwardCache)> {
    debug_assert_eq!(x.len(), params.input_dim);
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(x.to_vec());
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.w.matvec(activations.last().unwrap());
        for (zi, bi) in z.iter_mut().zip(&layer.b) {
            *zi += bi;
        }
        if i != last {
            for zi in &mut z {
                if *zi < 0.0 {
                    *zi = 0.0;
                }
            }
        }
        activations.push(z);
    }
    let embedding = activations.last().unwrap().clone();
    let logits = logits_of(params, &embedding)?;
    Ok((embedding, logits, ForwardCache { activations }))
}

fn logits_of(params: &EncoderParams, embedding: &[f64]) -> Result<Vec<f64>> {
    if params.cosine_logits {
        let e_norm = norm(embedding);
        if e_norm < ZERO_NORM_EPS {
            return Err(Error::ZeroVector(None));
        }
        let mut logits = Vec::with_capacity(params.classifier.n_rows());
        for row in params.classifier.rows_iter() {
            let w_norm = norm(row);
            if w_norm < ZERO_NORM_EPS {
                return Err(Error::ZeroVector(None));
            }
            logits.push(dot(embedding, row) / (e_norm * w_norm * params.tau_cls));
        }
        Ok(logits)
    } else {
        Ok(params.classifier.matvec(embedding))
    }
}

/// Parameter gradients, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerParams>,
    pub classifier: Matrix,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerParams {
                    w: Matrix::zeros(l.w.n_rows(), l.w.n_cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            classifier: Matrix::zeros(params.classifier.n_rows(), params.classifier.n_cols()),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.as_mut_slice().iter_mut().zip(b.w.as_slice()) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
        for (x, y) in self
            .classifier
            .as_mut_slice()
            .iter_mut()
            .zip(other.classifier.as_slice())
        {
            *x += y;
        }
    }
}

/// Exact reverse-mode gradients for one sample. `grad_embedding` is the
/// upstream gradient w.r.t. the raw embedding, `grad_logits` w.r.t. the
/// classifier logits; either may be all zeros.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_embedding: &[f64],
    grad_logits: &[f64],
) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros_like(params);
    let embedding = cache.activations.last().unwrap();

    // Route the logit gradient into the classifier and the embedding.
    let mut g_emb = grad_embedding.to_vec();
    if params.cosine_logits {
        let e_norm = norm(embedding);
        if e_norm < ZERO_NORM_EPS {
            return Err(Error::ZeroVector(None));
        }
        let e_hat: Vec<f64> = embedding.iter().map(|v| v / e_norm).collect();
        for (c, gl) in grad_logits.iter().enumerate() {
            if *gl == 0.0 {
                continue;
            }
            let w = params.classifier.row(c);
            let w_norm = norm(w);
            if w_norm < ZERO_NORM_EPS {
                return Err(Error::ZeroVector(None));
            }
            let w_hat: Vec<f64> = w.iter().map(|v| v / w_norm).collect();
            let cos = dot(&e_hat, &w_hat);
            for i in 0..params.embed_dim {
                g_emb[i] += gl * (w_hat[i] - cos * e_hat[i]) / (e_norm * params.tau_cls);
            }
            let gw = grads.classifier.row_mut(c);
            for i in 0..params.embed_dim {
                gw[i] += gl * (e_hat[i] - cos * w_hat[i]) / (w_norm * params.tau_cls);
            }
        }
    } else {
        for (c, gl) in grad_logits.iter().enumerate() {
            if *gl == 0.0 {
                continue;
            }
            let w = params.classifier.row(c);
            for i in 0..params.embed_dim {
                g_emb[i] += gl * w[i];
            }
            let gw = grads.classifier.row_mut(c);
            for i in 0..params.embed_dim {
                gw[i] += gl * embedding[i];
            }
        }
    }

    // Back through the dense layers (rectifier after all but the last).
    let mut g = g_emb;
    let last = params.layers.len() - 1;
    for idx in (0..params.layers.len()).rev() {
        if idx != last {
            // Rectifier mask: zero where the activation was clamped.
            let act = &cache.activations[idx + 1];
            for (gi, ai) in g.iter_mut().zip(act) {
                if *ai <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        let input = &cache.activations[idx];
        let layer_grad = &mut grads.layers[idx];
        for (r, gr) in g.iter().enumerate() {
            layer_grad.b[r] += gr;
            let row = layer_grad.w.row_mut(r);
            for (wi, xi) in row.iter_mut().zip(input) {
                *wi += gr * xi;
            }
        }
        if idx > 0 {
            let w = &params.layers[idx].w;
            let mut g_prev = vec![0.0; w.n_cols()];
            for (r, gr) in g.iter().enumerate() {
                for (gp, wi) in g_prev.iter_mut().zip(w.row(r)) {
                    *gp += gr * wi;
                }
            }
            g = g_prev;
        }
    }
    Ok(grads)
}

/// SGD-with-momentum velocities, shaped like the parameters.
pub type MomentumState = ParamGrads;

/// One optimizer step: `v <- momentum*v + grad + weight_decay*w` then
/// `w <- w - lr*v`, applied to every tensor.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    vel: &mut MomentumState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let step = |w: &mut [f64], g: &[f64], v: &mut [f64]| {
        for i in 0..w.len() {
            v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
            w[i] -= lr * v[i];
        }
    };
    for ((layer, grad), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut vel.layers)
    {
        step(layer.w.as_mut_slice(), grad.w.as_slice(), v.w.as_mut_slice());
        step(&mut layer.b, &grad.b, &mut v.b);
    }
    step(
        params.classifier.as_mut_slice(),
        grads.classifier.as_slice(),
        vel.classifier.as_mut_slice(),
    );
}

/// Embedding of a single input.
pub fn embed(params: &EncoderParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.w.matvec(&a);
        for (zi, bi) in z.iter_mut().zip(&layer.b) {
            *zi += bi;
        }
        if i != last {
            for zi in &mut z {
                if *zi < 0.0 {
                    *zi = 0.0;
                }
            }
        }
        a = z;
    }
    a
}

/// Embeddings of every row.
pub fn embed_matrix(params: &EncoderParams, rows: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(rows.n_rows(), params.embed_dim);
    for (i, row) in rows.rows_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&embed(params, row));
    }
    out
}

/// Predicted local class index (argmax logit), for probe-style tests.
pub fn classify(params: &EncoderParams, x: &[f64]) -> Result<usize> {
    let (_, logits, _) = forward(params, x)?;
    Ok(argmax(&logits))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Map global labels to contiguous local ids over the sorted distinct label
/// set. Returns (local labels, global id per local id).
pub fn localize_labels(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let local: Vec<usize> = labels
        .iter()
        .map(|l| ids.binary_search(l).expect("label in id set"))
        .collect();
    (local, ids)
}

/// Cross-entropy-only training of the old model on its own split.
pub fn train_old(
    inputs: &Matrix,
    labels: &[usize],
    arch: &EncoderArch,
    cfg: &TrainConfig,
) -> Result<EncoderParams> {
    train_old_with(inputs, labels, arch, cfg, |_| {})
}

/// [`train_old`] with a per-epoch observer (used to stream log lines).
pub fn train_old_with(
    inputs: &Matrix,
    labels: &[usize],
    arch: &EncoderArch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<EncoderParams> {
    if inputs.n_cols() != arch.input_dim {
        return Err(Error::config(format!(
            "input dim {} does not match arch input_dim {}",
            inputs.n_cols(),
            arch.input_dim
        )));
    }
    let (local_labels, class_ids) = localize_labels(labels);

    let root = SeededRng::new(cfg.seed);
    let mut rng_init = root.child("init");
    let mut rng_batch = root.child("batches");

    let mut params = init_params(arch, class_ids, &mut rng_init);
    let mut vel = MomentumState::zeros_like(&params);
    let n = inputs.n_rows();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        rng_batch.shuffle(&mut order);
        let mut sum_ce = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(&params);
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (_, logits, cache) = forward(&params, inputs.row(i))?;
                let (ce, mut g_logits) = cross_entropy(&logits, local_labels[i]);
                sum_ce += ce;
                for g in &mut g_logits {
                    *g *= inv;
                }
                let zero_emb = vec![0.0; params.embed_dim];
                let sample = backward(&params, &cache, &zero_emb, &g_logits)?;
                grads.add_assign(&sample);
            }
            sgd_step(
                &mut params,
                &grads,
                &mut vel,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
        let mean_ce = sum_ce / n as f64;
        on_epoch(&EpochStats {
            epoch,
            mean_ce,
            mean_bc: 0.0,
            mean_total: mean_ce,
            perturb_norm_mean: 0.0,
        });
    }
    Ok(params)
}

enum PerturbState {
    Fixed(PrototypeSet),
    Ndpp {
        cfg: NdppConfig,
        state: ndpp::PerturbationState,
    },
    Odpp {
        cfg: OdppConfig,
        r_l: Matrix,
        pseudo: PrototypeSet,
    },
}

impl PerturbState {
    fn pseudo(&self) -> &PrototypeSet {
        match self {
            PerturbState::Fixed(p) => p,
            PerturbState::Ndpp { state, .. } => &state.pseudo_old,
            PerturbState::Odpp { pseudo, .. } => pseudo,
        }
    }

    fn uses_joint(&self) -> bool {
        match self {
            PerturbState::Fixed(_) => false,
            PerturbState::Ndpp { cfg, .. } => cfg.use_joint,
            PerturbState::Odpp { cfg, .. } => cfg.use_joint,
        }
    }
}

/// Backward-compatible training of the new model against a frozen old model.
///
/// Per epoch: (a) for joint methods from epoch 1 on, recompute the new
/// prototypes over the full training set and refresh the perturbation state;
/// (b) sweep mini-batches minimizing `ce + lambda * bc` against the current
/// pseudo-old prototypes (real old prototypes stay in the negative pairs).
pub fn train_bcl(
    inputs: &Matrix,
    labels: &[usize],
    class_ids: &[usize],
    old_model: &EncoderParams,
    method: &BclMethod,
    loss_cfg: &LossConfig,
    arch: &EncoderArch,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, Vec<EpochStats>)> {
    train_bcl_with(
        inputs, labels, class_ids, old_model, method, loss_cfg, arch, cfg, |_| {},
    )
}

/// [`train_bcl`] with a per-epoch observer (used to stream log lines).
#[allow(clippy::too_many_arguments)]
pub fn train_bcl_with(
    inputs: &Matrix,
    labels: &[usize],
    class_ids: &[usize],
    old_model: &EncoderParams,
    method: &BclMethod,
    loss_cfg: &LossConfig,
    arch: &EncoderArch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(EncoderParams, Vec<EpochStats>)> {
    if arch.embed_dim != old_model.embed_dim {
        return Err(Error::config(format!(
            "embed_dim mismatch: new {} vs old {}",
            arch.embed_dim, old_model.embed_dim
        )));
    }
    if arch.input_dim != old_model.input_dim {
        return Err(Error::config(format!(
            "input_dim mismatch: new {} vs old {}",
            arch.input_dim, old_model.input_dim
        )));
    }
    let c = class_ids.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::config(format!(
            "local label {bad} out of range for {c} classes"
        )));
    }

    // Old prototypes over the full new training set, frozen for the run.
    let old_embeddings = embed_matrix(old_model, inputs);
    let old_protos = compute_prototypes(
        &EmbeddingMatrix::new(old_embeddings, labels.to_vec(), c)?,
        SpaceTag::Old,
    )?;

    let root = SeededRng::new(cfg.seed);
    let mut rng_init = root.child("init");
    let mut rng_batch = root.child("batches");
    let mut rng_perturb = root.child("perturb");

    let mut params = init_params(arch, class_ids.to_vec(), &mut rng_init);
    let mut vel = MomentumState::zeros_like(&params);

    let mut perturb = match method {
        BclMethod::Baseline => PerturbState::Fixed(PrototypeSet {
            protos: old_protos.protos.clone(),
            tag: SpaceTag::PseudoOld,
        }),
        BclMethod::NdppOld(ncfg) | BclMethod::Ndpp(ncfg) => PerturbState::Ndpp {
            cfg: ncfg.clone(),
            state: ndpp::init_state(&old_protos, ncfg)?,
        },
        BclMethod::OdppOld(ocfg) | BclMethod::Odpp(ocfg) => {
            let mut ocfg = ocfg.clone();
            if ocfg.pairs_per_epoch == 0 {
                // Matches the convention of sampling as many pairs per epoch
                // as the training set has images.
                ocfg.pairs_per_epoch = inputs.n_rows();
            }
            // Pre-loop optimization against old pairs only.
            let mut init_cfg = ocfg.clone();
            init_cfg.use_joint = false;
            let learned = odpp::optimize(&old_protos, None, &init_cfg, &mut rng_perturb, None)?;
            let pseudo = odpp::pseudo_old_from_learned(&old_protos, &learned.r_l)?;
            PerturbState::Odpp {
                cfg: ocfg,
                r_l: learned.r_l,
                pseudo,
            }
        }
    };

    let n = inputs.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch >= 1 && perturb.uses_joint() {
            let new_embeddings = embed_matrix(&params, inputs);
            let new_protos = compute_prototypes(
                &EmbeddingMatrix::new(new_embeddings, labels.to_vec(), c)?,
                SpaceTag::New,
            )?;
            perturb = match perturb {
                PerturbState::Ndpp { cfg: ncfg, state } => PerturbState::Ndpp {
                    state: ndpp::epoch_update(&state, &old_protos, &new_protos, &ncfg)?,
                    cfg: ncfg,
                },
                PerturbState::Odpp {
                    cfg: ocfg, r_l, ..
                } => {
                    let warm = if ocfg.warm_start { Some(&r_l) } else { None };
                    let learned =
                        odpp::optimize(&old_protos, Some(&new_protos), &ocfg, &mut rng_perturb, warm)?;
                    let pseudo = odpp::pseudo_old_from_learned(&old_protos, &learned.r_l)?;
                    PerturbState::Odpp {
                        cfg: ocfg,
                        r_l: learned.r_l,
                        pseudo,
                    }
                }
                fixed => fixed,
            };
        }

        let pseudo = perturb.pseudo().clone();
        let perturb_norm_mean = mean_displacement(&pseudo, &old_protos);

        let lr = cfg.lr_at(epoch);
        rng_batch.shuffle(&mut order);
        let mut sum_ce = 0.0;
        let mut sum_bc = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(&params);
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (embedding, logits, cache) = forward(&params, inputs.row(i))?;
                let (ce, mut g_logits) = cross_entropy(&logits, labels[i]);
                let (bc, mut g_emb) =
                    bc_loss(&embedding, labels[i], &pseudo, &old_protos, loss_cfg)?;
                sum_ce += ce;
                sum_bc += bc;
                for g in &mut g_logits {
                    *g *= inv;
                }
                for g in &mut g_emb {
                    *g *= loss_cfg.lambda * inv;
                }
                let sample = backward(&params, &cache, &g_emb, &g_logits)?;
                grads.add_assign(&sample);
            }
            sgd_step(
                &mut params,
                &grads,
                &mut vel,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
        let mean_ce = sum_ce / n as f64;
        let mean_bc = sum_bc / n as f64;
        let entry = EpochStats {
            epoch,
            mean_ce,
            mean_bc,
            mean_total: mean_ce + loss_cfg.lambda * mean_bc,
            perturb_norm_mean,
        };
        on_epoch(&entry);
        stats.push(entry);
    }
    Ok((params, stats))
}

impl EncoderParams {
    /// Write the parameters as a container checkpoint: one matrix section per
    /// weight tensor, biases as 1 x n matrices, classifier ids as labels, and
    /// a meta section with the scalar fields.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut c = crate::store::Container::new();
        c.put_meta(
            "META",
            &format!(
                "kind=checkpoint\ninput_dim={}\nembed_dim={}\nn_layers={}\n\
                 cosine_logits={}\ntau_cls={}\n",
                self.input_dim,
                self.embed_dim,
                self.layers.len(),
                self.cosine_logits,
                self.tau_cls
            ),
        );
        for (i, layer) in self.layers.iter().enumerate() {
            c.put_matrix(&format!("W{i}"), &layer.w);
            let b = Matrix::from_vec(1, layer.b.len(), layer.b.clone()).expect("bias row");
            c.put_matrix(&format!("B{i}"), &b);
        }
        c.put_matrix("CLSW", &self.classifier);
        let ids: Vec<u32> = self.class_ids.iter().map(|&i| i as u32).collect();
        c.put_labels("CLSIDS", &ids);
        c.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<EncoderParams> {
        let c = crate::store::Container::load(path)?;
        let meta = c.meta_map("META")?;
        let get = |key: &str| -> Result<String> {
            meta.get(key)
                .cloned()
                .ok_or_else(|| Error::BadSection("META".into(), format!("missing {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::BadSection("META".into(), format!("bad {key}")))
        };
        let input_dim = parse_usize("input_dim")?;
        let embed_dim = parse_usize("embed_dim")?;
        let n_layers = parse_usize("n_layers")?;
        let cosine_logits = get("cosine_logits")? == "true";
        let tau_cls: f64 = get("tau_cls")?
            .parse()
            .map_err(|_| Error::BadSection("META".into(), "bad tau_cls".into()))?;

        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let w = c.matrix(&format!("W{i}"))?;
            let b = c.matrix(&format!("B{i}"))?;
            layers.push(LayerParams {
                w,
                b: b.as_slice().to_vec(),
            });
        }
        let classifier = c.matrix("CLSW")?;
        let class_ids: Vec<usize> = c.labels("CLSIDS")?.iter().map(|&i| i as usize).collect();
        Ok(EncoderParams {
            input_dim,
            embed_dim,
            layers,
            classifier,
            class_ids,
            cosine_logits,
            tau_cls,
        })
    }
}

fn mean_displacement(pseudo: &PrototypeSet, old: &PrototypeSet) -> f64 {
    let c = old.class_count();
    if c == 0 {
        return 0.0;
    }
    (0..c)
        .map(|class| {
            pseudo
                .row(class)
                .iter()
                .zip(old.row(class))
                .map(|(p, o)| (p - o) * (p - o))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / c as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::total_loss;
    use crate::rng::gaussian_sample;

    fn tiny_arch() -> EncoderArch {
        EncoderArch {
            input_dim: 6,
            hidden: vec![8],
            embed_dim: 4,
            cosine_logits: true,
            tau_cls: 0.07,
        }
    }

    #[test]
    fn zero_weights_give_zero_embedding_and_logits() {
        let arch = EncoderArch {
            input_dim: 3,
            hidden: vec![4],
            embed_dim: 2,
            cosine_logits: false,
            tau_cls: 0.07,
        };
        let mut params = init_params(&arch, vec![0, 1], &mut SeededRng::new(1));
        for l in &mut params.layers {
            l.w.as_mut_slice().fill(0.0);
            l.b.fill(0.0);
        }
        params.classifier.as_mut_slice().fill(0.0);
        let (emb, logits, _) = forward(&params, &[1.0, -2.0, 3.0]).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let arch = EncoderArch {
            input_dim: 3,
            hidden: vec![],
            embed_dim: 3,
            cosine_logits: false,
            tau_cls: 0.07,
        };
        let mut params = init_params(&arch, vec![0], &mut SeededRng::new(1));
        params.layers[0].w = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        params.layers[0].b.fill(0.0);
        let x = [0.3, -1.2, 2.5];
        let (emb, _, _) = forward(&params, &x).unwrap();
        assert_eq!(emb, x.to_vec());
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_params(&tiny_arch(), vec![0, 1, 2], &mut SeededRng::new(7));
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let a = forward(&params, &x).unwrap();
        let b = forward(&params, &x).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let params = init_params(&tiny_arch(), vec![0, 1, 2], &mut SeededRng::new(7));
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let (_, _, cache) = forward(&params, &x).unwrap();
        let g = backward(&params, &cache, &[0.0; 4], &[0.0; 3]).unwrap();
        assert!(g.classifier.as_slice().iter().all(|&v| v == 0.0));
        for l in &g.layers {
            assert!(l.w.as_slice().iter().all(|&v| v == 0.0));
            assert!(l.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let params = init_params(&tiny_arch(), vec![0, 1, 2], &mut SeededRng::new(7));
        let x = [0.4, 0.2, -0.3, 0.1, 0.9, -0.6];
        let (_, _, cache) = forward(&params, &x).unwrap();
        let mut rng = SeededRng::new(5);
        let ge1: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let ge2: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let gl1: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let gl2: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let sum_up: Vec<f64> = ge1.iter().zip(&ge2).map(|(a, b)| a + b).collect();
        let sum_gl: Vec<f64> = gl1.iter().zip(&gl2).map(|(a, b)| a + b).collect();

        let g1 = backward(&params, &cache, &ge1, &gl1).unwrap();
        let g2 = backward(&params, &cache, &ge2, &gl2).unwrap();
        let gsum = backward(&params, &cache, &sum_up, &sum_gl).unwrap();
        for (i, l) in gsum.layers.iter().enumerate() {
            for (k, v) in l.w.as_slice().iter().enumerate() {
                let lin = g1.layers[i].w.as_slice()[k] + g2.layers[i].w.as_slice()[k];
                assert!((v - lin).abs() < 1e-10);
            }
        }
        for (k, v) in gsum.classifier.as_slice().iter().enumerate() {
            let lin = g1.classifier.as_slice()[k] + g2.classifier.as_slice()[k];
            assert!((v - lin).abs() < 1e-10);
        }
    }

    /// Full-model finite-difference check of the combined objective on a
    /// tiny configuration (input 6, hidden 8, embed 4, 3 classes).
    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let mut rng = SeededRng::new(100);
        let params = init_params(&arch, vec![0, 1, 2], &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let label = 1usize;
        let loss_cfg = LossConfig::default();

        // Fixed prototype sets for the compatibility term.
        let proto_rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                crate::linalg::l2_normalize(&(0..4).map(|_| rng.normal()).collect::<Vec<_>>())
                    .unwrap()
            })
            .collect();
        let old = PrototypeSet {
            protos: Matrix::from_rows(&proto_rows).unwrap(),
            tag: SpaceTag::Old,
        };
        let mut pseudo = PrototypeSet {
            protos: old.protos.clone(),
            tag: SpaceTag::PseudoOld,
        };
        for v in pseudo.protos.as_mut_slice() {
            *v += 0.03 * rng.normal();
        }

        let eval = |p: &EncoderParams| -> f64 {
            let (emb, logits, _) = forward(p, &x).unwrap();
            let (ce, _) = cross_entropy(&logits, label);
            let (bc, _) = bc_loss(&emb, label, &pseudo, &old, &loss_cfg).unwrap();
            total_loss(ce, bc, &loss_cfg)
        };

        let (emb, logits, cache) = forward(&params, &x).unwrap();
        let (_, g_logits) = cross_entropy(&logits, label);
        let (_, mut g_emb) = bc_loss(&emb, label, &pseudo, &old, &loss_cfg).unwrap();
        for g in &mut g_emb {
            *g *= loss_cfg.lambda;
        }
        let grads = backward(&params, &cache, &g_emb, &g_logits).unwrap();

        let h = 1e-6;
        let mut checked = 0usize;
        for li in 0..params.layers.len() {
            for k in 0..params.layers[li].w.as_slice().len() {
                let mut pp = params.clone();
                pp.layers[li].w.as_mut_slice()[k] += h;
                let mut pm = params.clone();
                pm.layers[li].w.as_mut_slice()[k] -= h;
                let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
                let a = grads.layers[li].w.as_slice()[k];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (a - fd).abs() / denom < 1e-4,
                    "layer {li} weight {k}: {a} vs {fd}"
                );
                checked += 1;
            }
            for k in 0..params.layers[li].b.len() {
                let mut pp = params.clone();
                pp.layers[li].b[k] += h;
                let mut pm = params.clone();
                pm.layers[li].b[k] -= h;
                let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
                let a = grads.layers[li].b[k];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!((a - fd).abs() / denom < 1e-4, "layer {li} bias {k}");
                checked += 1;
            }
        }
        for k in 0..params.classifier.as_slice().len() {
            let mut pp = params.clone();
            pp.classifier.as_mut_slice()[k] += h;
            let mut pm = params.clone();
            pm.classifier.as_mut_slice()[k] -= h;
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            let a = grads.classifier.as_slice()[k];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            assert!((a - fd).abs() / denom < 1e-4, "classifier weight {k}");
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn sgd_plain_step_without_momentum() {
        let arch = tiny_arch();
        let mut params = init_params(&arch, vec![0, 1, 2], &mut SeededRng::new(3));
        let before = params.clone();
        let mut grads = ParamGrads::zeros_like(&params);
        grads.layers[0].w.set(0, 0, 2.0);
        let mut vel = MomentumState::zeros_like(&params);
        sgd_step(&mut params, &grads, &mut vel, 0.1, 0.0, 0.0);
        assert!((params.layers[0].w.at(0, 0) - (before.layers[0].w.at(0, 0) - 0.2)).abs() < 1e-15);
        // Everything else untouched.
        assert_eq!(params.layers[1].w, before.layers[1].w);
    }

    #[test]
    fn sgd_zero_grads_zero_velocity_is_identity() {
        let arch = tiny_arch();
        let mut params = init_params(&arch, vec![0, 1, 2], &mut SeededRng::new(3));
        let before = params.clone();
        let grads = ParamGrads::zeros_like(&params);
        let mut vel = MomentumState::zeros_like(&params);
        sgd_step(&mut params, &grads, &mut vel, 0.1, 0.9, 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_momentum_closed_form_two_steps() {
        let arch = tiny_arch();
        let mut params = init_params(&arch, vec![0, 1, 2], &mut SeededRng::new(3));
        let w0 = params.layers[0].w.at(0, 0);
        let mut grads = ParamGrads::zeros_like(&params);
        grads.layers[0].w.set(0, 0, 1.0);
        let mut vel = MomentumState::zeros_like(&params);
        let lr = 0.01;
        sgd_step(&mut params, &grads, &mut vel, lr, 0.9, 0.0);
        let w1 = params.layers[0].w.at(0, 0);
        assert!((w0 - w1 - lr).abs() < 1e-15, "first displacement lr*g");
        sgd_step(&mut params, &grads, &mut vel, lr, 0.9, 0.0);
        let w2 = params.layers[0].w.at(0, 0);
        assert!((w1 - w2 - lr * 1.9).abs() < 1e-15, "second displacement 1.9*lr*g");
    }

    fn two_blob_data(n_per: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let m0 = vec![1.0, 0.0, 0.0, 0.0];
        let m1 = vec![0.0, 1.0, 0.0, 0.0];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..(2 * n_per) {
            let mean = if i % 2 == 0 { &m0 } else { &m1 };
            rows.push(gaussian_sample(&mut rng, mean, 0.05));
            labels.push(i % 2);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn train_old_separates_two_blobs() {
        let (inputs, labels) = two_blob_data(40, 9);
        let arch = EncoderArch {
            input_dim: 4,
            hidden: vec![8],
            embed_dim: 4,
            cosine_logits: true,
            tau_cls: 0.07,
        };
        let cfg = TrainConfig {
            epochs: 50,
            lr: 0.05,
            lr_drop_factor: 0.1,
            lr_drop_epochs: vec![30, 40],
            batch_size: 16,
            seed: 12,
            ..TrainConfig::default()
        };
        let params = train_old(&inputs, &labels, &arch, &cfg).unwrap();
        let correct = (0..inputs.n_rows())
            .filter(|&i| classify(&params, inputs.row(i)).unwrap() == labels[i])
            .count();
        let acc = correct as f64 / inputs.n_rows() as f64;
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    #[test]
    fn train_old_is_deterministic() {
        let (inputs, labels) = two_blob_data(20, 4);
        let arch = EncoderArch {
            input_dim: 4,
            hidden: vec![6],
            embed_dim: 3,
            cosine_logits: true,
            tau_cls: 0.07,
        };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train_old(&inputs, &labels, &arch, &cfg).unwrap();
        let b = train_old(&inputs, &labels, &arch, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_old_zero_lr_keeps_init() {
        let (inputs, labels) = two_blob_data(10, 4);
        let arch = EncoderArch {
            input_dim: 4,
            hidden: vec![6],
            embed_dim: 3,
            cosine_logits: true,
            tau_cls: 0.07,
        };
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let trained = train_old(&inputs, &labels, &arch, &cfg).unwrap();
        let (_, class_ids) = localize_labels(&labels);
        let init = init_params(&arch, class_ids, &mut SeededRng::new(5).child("init"));
        assert_eq!(trained, init);
    }

    #[test]
    fn train_bcl_rejects_embed_dim_mismatch() {
        let (inputs, labels) = two_blob_data(10, 4);
        let arch_old = EncoderArch {
            input_dim: 4,
            hidden: vec![6],
            embed_dim: 3,
            cosine_logits: true,
            tau_cls: 0.07,
        };
        let old = train_old(
            &inputs,
            &labels,
            &arch_old,
            &TrainConfig {
                epochs: 1,
                batch_size: 8,
                seed: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let arch_new = EncoderArch {
            embed_dim: 5,
            ..arch_old.clone()
        };
        let err = train_bcl(
            &inputs,
            &labels,
            &[0, 1],
            &old,
            &BclMethod::Baseline,
            &LossConfig::default(),
            &arch_new,
            &TrainConfig {
                epochs: 1,
                batch_size: 8,
                seed: 6,
                ..TrainConfig::default()
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let params = init_params(&tiny_arch(), vec![3, 7, 11], &mut SeededRng::new(19));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bclg");
        params.save(&path).unwrap();
        let back = EncoderParams::load(&path).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn train_bcl_never_mutates_old_model() {
        let (inputs, labels) = two_blob_data(15, 21);
        let arch = EncoderArch {
            input_dim: 4,
            hidden: vec![6],
            embed_dim: 3,
            cosine_logits: true,
            tau_cls: 0.07,
        };
        let old = train_old(
            &inputs,
            &labels,
            &arch,
            &TrainConfig {
                epochs: 2,
                batch_size: 8,
                seed: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let snapshot = old.clone();
        let _ = train_bcl(
            &inputs,
            &labels,
            &[0, 1],
            &old,
            &BclMethod::Ndpp(NdppConfig {
                k: 1,
                ..NdppConfig::default()
            }),
            &LossConfig::default(),
            &arch,
            &TrainConfig {
                epochs: 3,
                batch_size: 8,
                seed: 6,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(old, snapshot);
    }
}
