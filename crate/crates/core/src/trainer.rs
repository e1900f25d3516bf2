//! Fine-tuning of cache keys: weighted cross-entropy, its analytic gradient
//! with respect to the keys, AdamW and a per-step cosine schedule.

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{adapter_logits_scaled, cache_queries, WeightedCache};
use crate::data_store::{ClassifierWeights, EmbeddingSet};
use crate::error::{NtuaError, Result};
use crate::prototypes::AffinityWeights;
use crate::scalar::{cast_matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Scale cache affinities by the row confidences in the forward pass.
    pub use_weights_in_loss: bool,
    /// Multiply each sample's loss by its prototype-affinity weight.
    pub include_omega: bool,
    /// Multiplier on the zero-shot term inside the training logits.
    pub clip_logit_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            use_weights_in_loss: true,
            include_omega: true,
            clip_logit_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(NtuaError::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(NtuaError::invalid("batch size must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(NtuaError::invalid(format!(
                "learning rate must be finite and >= 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NtuaError::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(NtuaError::invalid("eps must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub steps: usize,
    /// Full-set loss before the first step.
    pub initial_loss: f64,
    /// Mean mini-batch loss of each epoch, measured before each step.
    pub epoch_losses: Vec<f64>,
    /// Full-set loss after the last step.
    pub final_loss: f64,
}

/// `(1/m) Σ ω_i · (−log softmax(z_i)[y_i])`.
pub fn weighted_ce_loss<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize], omega: ArrayView1<'_, T>) -> Result<T> {
    check_batch(logits, labels, omega)?;
    let m = T::from_usize(labels.len()).expect("batch size fits");
    let mut total = T::zero();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let (lse, _) = log_sum_exp(row, i)?;
        total += omega[i] * (lse - row[labels[i]]);
    }
    Ok(total / m)
}

fn check_batch<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize], omega: ArrayView1<'_, T>) -> Result<()> {
    if labels.is_empty() {
        return Err(NtuaError::invalid("empty batch"));
    }
    if logits.nrows() != labels.len() || omega.len() != labels.len() {
        return Err(NtuaError::DimMismatch {
            context: "loss batch",
            expected: logits.nrows(),
            found: labels.len().min(omega.len()),
        });
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= logits.ncols() {
            return Err(NtuaError::LabelOutOfRange {
                row,
                label,
                num_classes: logits.ncols(),
            });
        }
    }
    Ok(())
}

/// Returns `(log Σ exp z, max z)`.
fn log_sum_exp<T: Scalar>(row: ArrayView1<'_, T>, r: usize) -> Result<(T, T)> {
    if let Some(col) = row.iter().position(|x| !x.is_finite()) {
        return Err(NtuaError::NonFinite { row: r, col });
    }
    let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
    let sum = row.fold(T::zero(), |s, &x| s + (x - max).exp());
    Ok((max + sum.ln(), max))
}

/// Forward-pass switches shared by the loss, gradient and trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions<T> {
    pub use_weights: bool,
    pub clip_scale: T,
}

impl<T: Scalar> Default for ForwardOptions<T> {
    fn default() -> Self {
        Self {
            use_weights: true,
            clip_scale: T::one(),
        }
    }
}

/// Loss and key gradient for one batch.
pub struct LossAndGrad<T> {
    pub loss: T,
    pub grad: Array2<T>,
    pub max_abs_logit: T,
}

pub fn loss_and_grad<T: Scalar>(
    cache: &WeightedCache<T>,
    queries: ArrayView2<'_, T>,
    labels: &[usize],
    omega: ArrayView1<'_, T>,
    classifier: ArrayView2<'_, T>,
    opts: ForwardOptions<T>,
) -> Result<LossAndGrad<T>> {
    if classifier.nrows() != cache.num_classes() || classifier.ncols() != cache.dim() {
        return Err(NtuaError::DimMismatch {
            context: "classifier shape",
            expected: cache.num_classes(),
            found: classifier.nrows(),
        });
    }
    let raw = cache.affinities(queries, false)?;
    let mut scaled = raw.clone();
    if opts.use_weights {
        for mut row in scaled.rows_mut() {
            row.zip_mut_with(cache.weights(), |x, &w| *x *= w);
        }
    }
    let mut logits = cache.gather_classes(scaled.view());
    let zs = queries.dot(&classifier.t());
    if opts.clip_scale == T::one() {
        logits += &zs;
    } else {
        logits.zip_mut_with(&zs, |l, &z| *l += opts.clip_scale * z);
    }
    check_batch(logits.view(), labels, omega)?;
    let max_abs_logit = logits.fold(T::zero(), |m, &x| m.max(x.abs()));

    let m = T::from_usize(labels.len()).expect("batch size fits");
    let mut loss = T::zero();
    // dL/dlogits, overwritten in place
    let mut g = logits;
    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
        let (lse, _) = log_sum_exp(row.view(), i)?;
        loss += omega[i] * (lse - row[labels[i]]);
        let scale = omega[i] / m;
        row.mapv_inplace(|z| (z - lse).exp() * scale);
        row[labels[i]] -= scale;
    }
    loss /= m;

    // dL/dx_ij = alpha * g[i, label_j] * c_j * beta * phi(x_ij)
    let alpha_beta = cache.alpha() * cache.beta();
    let mut dx = raw;
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            let c = if opts.use_weights { cache.weights()[j] } else { T::one() };
            *x = alpha_beta * g[[i, cache.labels()[j]]] * c * *x;
        }
    }
    let grad = dx.t().dot(&queries);
    Ok(LossAndGrad {
        loss,
        grad,
        max_abs_logit,
    })
}

/// Gradient of the weighted cross-entropy with respect to the cache keys.
/// Values, weights and the classifier are held fixed.
pub fn loss_grad_keys<T: Scalar>(
    cache: &WeightedCache<T>,
    queries: ArrayView2<'_, T>,
    labels: &[usize],
    omega: ArrayView1<'_, T>,
    classifier: ArrayView2<'_, T>,
    opts: ForwardOptions<T>,
) -> Result<Array2<T>> {
    Ok(loss_and_grad(cache, queries, labels, omega, classifier, opts)?.grad)
}

/// Loss of a batch under the current keys, without the gradient.
pub fn batch_loss<T: Scalar>(
    cache: &WeightedCache<T>,
    queries: ArrayView2<'_, T>,
    labels: &[usize],
    omega: ArrayView1<'_, T>,
    classifier: ArrayView2<'_, T>,
    opts: ForwardOptions<T>,
) -> Result<T> {
    let logits = adapter_logits_scaled(queries, cache, classifier, opts.use_weights, opts.clip_scale)?;
    weighted_ce_loss(logits.view(), labels, omega)
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(
        total_steps >= 1 && step <= total_steps,
        "step {step} outside 0..={total_steps}"
    );
    let progress = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Array2<T>,
    pub v: Array2<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
        }
    }
}

impl AdamW {
    /// One decoupled-decay Adam step: `p *= 1 - lr*wd`, then the bias-corrected update.
    pub fn step<T: Scalar>(&self, params: &mut Array2<T>, grads: &Array2<T>, state: &mut AdamState<T>, lr: f64) {
        assert_eq!(params.dim(), grads.dim(), "parameter and gradient shapes differ");
        assert_eq!(params.dim(), state.m.dim(), "optimizer state shape differs");
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let eps = T::from_f64_lossy(self.eps);
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::one() - T::from_f64_lossy(lr * self.weight_decay);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        Zip::from(params)
            .and(grads)
            .and(&mut state.m)
            .and(&mut state.v)
            .for_each(|p, &g, m, v| {
                *p *= decay;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

/// Free-function form of [`AdamW::step`].
pub fn adamw_step<T: Scalar>(params: &mut Array2<T>, grads: &Array2<T>, state: &mut AdamState<T>, lr: f64, hp: &AdamW) {
    hp.step(params, grads, state, lr);
}

/// Trains the cache keys against the cache's own labels, using each cache
/// row's query feature (the student feature, or the classifier row for
/// fallback rows) as the training input.
pub fn train_keys<T: Scalar>(
    cache: &WeightedCache<T>,
    train_features: &EmbeddingSet,
    omega: Option<&AffinityWeights<T>>,
    classifier: &ClassifierWeights,
    cfg: &TrainConfig,
) -> Result<(WeightedCache<T>, TrainReport)> {
    let queries = cache_queries(cache, train_features, classifier)?;
    let w: Array2<T> = cast_matrix(classifier.matrix());
    train_keys_with_queries(cache, queries.view(), omega, w.view(), cfg)
}

pub fn train_keys_with_queries<T: Scalar>(
    cache: &WeightedCache<T>,
    queries: ArrayView2<'_, T>,
    omega: Option<&AffinityWeights<T>>,
    classifier: ArrayView2<'_, T>,
    cfg: &TrainConfig,
) -> Result<(WeightedCache<T>, TrainReport)> {
    cfg.validate()?;
    let rows = cache.rows();
    if queries.nrows() != rows {
        return Err(NtuaError::DimMismatch {
            context: "training queries",
            expected: rows,
            found: queries.nrows(),
        });
    }
    let omega: Vec<T> = match (cfg.include_omega, omega) {
        (true, Some(w)) if w.rows() == rows => w.omega.clone(),
        (true, Some(w)) => {
            return Err(NtuaError::DimMismatch {
                context: "omega",
                expected: rows,
                found: w.rows(),
            })
        }
        (true, None) => {
            return Err(NtuaError::invalid(
                "include_omega is set but no omega weights were given",
            ))
        }
        (false, _) => vec![T::one(); rows],
    };
    let opts = ForwardOptions {
        use_weights: cfg.use_weights_in_loss,
        clip_scale: T::from_f64_lossy(cfg.clip_logit_scale),
    };
    let omega_all = ndarray::Array1::from(omega.clone());
    let labels = cache.labels().to_vec();

    let mut trained = cache.clone();
    let initial_loss = batch_loss(&trained, queries, &labels, omega_all.view(), classifier, opts)?;

    let batches_per_epoch = rows.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let hp = cfg.adamw();
    let mut state = AdamState::zeros(trained.keys.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let q = queries.select(ndarray::Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let om = ndarray::Array1::from_iter(idx.iter().map(|&i| omega[i]));
            let out = loss_and_grad(&trained, q.view(), &y, om.view(), classifier, opts).map_err(|e| match e {
                NtuaError::NonFinite { .. } => NtuaError::NonFiniteLoss {
                    epoch,
                    batch,
                    max_abs_logit: f64::INFINITY,
                },
                other => other,
            })?;
            if !out.loss.is_finite() {
                return Err(NtuaError::NonFiniteLoss {
                    epoch,
                    batch,
                    max_abs_logit: out.max_abs_logit.to_f64_lossy(),
                });
            }
            sum += out.loss.to_f64_lossy();
            let lr = cosine_lr(step, total_steps, cfg.base_lr);
            hp.step(&mut trained.keys, &out.grad, &mut state, lr);
            step += 1;
        }
        let mean = sum / batches_per_epoch as f64;
        log::debug!("epoch {epoch}: mean batch loss {mean:.6}");
        epoch_losses.push(mean);
    }

    let final_loss = batch_loss(&trained, queries, &labels, omega_all.view(), classifier, opts)?;
    if !final_loss.is_finite() {
        return Err(NtuaError::NonFiniteLoss {
            epoch: cfg.epochs,
            batch: 0,
            max_abs_logit: f64::NAN,
        });
    }
    let report = TrainReport {
        config: cfg.clone(),
        seed: cfg.seed,
        steps: total_steps,
        initial_loss: initial_loss.to_f64_lossy(),
        epoch_losses,
        final_loss: final_loss.to_f64_lossy(),
    };
    Ok((trained, report))
}
