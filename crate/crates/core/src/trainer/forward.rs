//! Forward and backward passes of the factored model on one minibatch.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::variational::{kl_grad_log_alpha, kl_scalar};
use super::MultiStudyModel;
use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;
use crate::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// No noise, batch norm on running statistics.
    Eval,
    /// No noise, batch norm on batch statistics.
    TrainPlain,
    /// Explicit multiplicative noise draws on both noisy layers.
    TrainSample,
    /// Local reparameterization: Gaussian pre-activations sampled from their
    /// analytic mean and variance.
    TrainLrt,
}

/// Additive terms of the minibatch loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Penalties {
    /// Weight of the dropout KL penalty of the sampled study.
    pub kl_weight: f64,
    /// Coefficient of `||L||^2 / 2`.
    pub l2_shared: f64,
    /// Coefficient of `||U^j||^2 / 2`.
    pub l2_head: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub second_layer: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
    pub log_alpha: f64,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub nll: f64,
    pub grads: Gradients,
    /// Batch mean and biased variance of the pre-normalization features.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

enum First {
    Plain,
    Sample { z_noisy: Array2<f64> },
    Lrt { z2: Array2<f64>, sd: Array2<f64>, eps: Array2<f64> },
}

enum Norm {
    Off,
    Running,
    Batch { h_hat: Array2<f64>, std: Array1<f64>, mean: Array1<f64>, var: Array1<f64> },
}

enum Second {
    Plain,
    Sample { a_noisy: Array2<f64>, eps: Array2<f64> },
    Lrt { a2: Array2<f64>, sd: Array2<f64>, eps: Array2<f64> },
}

struct Cache {
    first: First,
    norm: Norm,
    a: Array2<f64>,
    second: Second,
}

fn draw<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// `dvar = dsd / (2 sd)`, zero where the standard deviation vanishes.
fn var_grad(dsd: &Array2<f64>, sd: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(sd.raw_dim());
    Zip::from(&mut out).and(dsd).and(sd).for_each(|o, &g, &s| {
        if s > 0.0 {
            *o = g / (2.0 * s);
        }
    });
    out
}

fn forward_impl<R: Rng + ?Sized>(
    model: &MultiStudyModel,
    j: usize,
    z: ArrayView2<'_, f64>,
    mode: ForwardMode,
    rng: &mut R,
) -> (Array2<f64>, Cache) {
    let head = &model.heads[j];
    let lm = &model.second_layer;
    let (n, l, c) = (z.nrows(), model.l(), head.n_classes());

    let (h, first) = match mode {
        ForwardMode::Eval | ForwardMode::TrainPlain => (z.dot(&lm.t()), First::Plain),
        ForwardMode::TrainSample => {
            let sa = model.alpha_in.sqrt();
            let noise = draw(rng, z.dim());
            let z_noisy = &z * &noise.mapv(|e| 1.0 + sa * e);
            (z_noisy.dot(&lm.t()), First::Sample { z_noisy })
        }
        ForwardMode::TrainLrt => {
            let z2 = z.mapv(|v| v * v);
            let var = z2.dot(&lm.mapv(|v| v * v).t()) * model.alpha_in;
            let sd = var.mapv(f64::sqrt);
            let eps = draw(rng, (n, l));
            let h = z.dot(&lm.t()) + &sd * &eps;
            (h, First::Lrt { z2, sd, eps })
        }
    };

    let (a, norm) = match (&model.bn, mode) {
        (None, _) => (h, Norm::Off),
        (Some(bn), ForwardMode::Eval) => (h * &bn.scale() + &bn.shift(), Norm::Running),
        (Some(bn), _) => {
            let mean = h.mean_axis(Axis(0)).expect("nonempty batch");
            let centered = &h - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty batch");
            let std = var.mapv(|v| (v + bn.epsilon).sqrt());
            let h_hat = centered / &std;
            let a = &h_hat * &bn.gamma + &bn.beta;
            (a, Norm::Batch { h_hat, std, mean, var })
        }
    };

    let alpha = head.alpha();
    let (logits, second) = match mode {
        ForwardMode::Eval | ForwardMode::TrainPlain => (a.dot(&head.u.t()) + &head.b, Second::Plain),
        ForwardMode::TrainSample => {
            let sa = alpha.sqrt();
            let eps = draw(rng, (n, l));
            let a_noisy = &a * &eps.mapv(|e| 1.0 + sa * e);
            (a_noisy.dot(&head.u.t()) + &head.b, Second::Sample { a_noisy, eps })
        }
        ForwardMode::TrainLrt => {
            let a2 = a.mapv(|v| v * v);
            let var = a2.dot(&head.u.mapv(|v| v * v).t()) * alpha;
            let sd = var.mapv(f64::sqrt);
            let eps = draw(rng, (n, c));
            let logits = a.dot(&head.u.t()) + &head.b + &sd * &eps;
            (logits, Second::Lrt { a2, sd, eps })
        }
    };
    (logits, Cache { first, norm, a, second })
}

fn backward(model: &MultiStudyModel, j: usize, z: ArrayView2<'_, f64>, cache: Cache, g: Array2<f64>) -> Gradients {
    let head = &model.heads[j];
    let alpha = head.alpha();
    let a = &cache.a;
    let b = g.sum_axis(Axis(0));

    let (u, da, log_alpha) = match cache.second {
        Second::Plain => (g.t().dot(a), g.dot(&head.u), 0.0),
        Second::Sample { a_noisy, eps } => {
            let sa = alpha.sqrt();
            let dan = g.dot(&head.u);
            let da = &dan * &eps.mapv(|e| 1.0 + sa * e);
            let mut dla = 0.0;
            Zip::from(&dan).and(a).and(&eps).for_each(|&d, &av, &e| dla += d * av * e);
            (g.t().dot(&a_noisy), da, dla * 0.5 * sa)
        }
        Second::Lrt { a2, sd, eps } => {
            let dvar = var_grad(&(&g * &eps), &sd);
            let du = g.t().dot(a) + &(&head.u * &dvar.t().dot(&a2)) * (2.0 * alpha);
            let da = g.dot(&head.u) + &(a * &dvar.dot(&head.u.mapv(|v| v * v))) * (2.0 * alpha);
            let mut dla = 0.0;
            Zip::from(&dvar).and(&sd).for_each(|&d, &s| dla += d * s * s);
            (du, da, dla)
        }
    };

    let (dh, gamma, beta) = match cache.norm {
        Norm::Off => (da, None, None),
        Norm::Running => {
            let bn = model.bn.as_ref().expect("batch norm");
            let dgamma = (&da * &((a - &bn.beta) / &bn.gamma)).sum_axis(Axis(0));
            (&da * &bn.scale(), Some(dgamma), Some(da.sum_axis(Axis(0))))
        }
        Norm::Batch { h_hat, std, .. } => {
            let bn = model.bn.as_ref().expect("batch norm");
            let n = da.nrows() as f64;
            let dgamma = (&da * &h_hat).sum_axis(Axis(0));
            let dbeta = da.sum_axis(Axis(0));
            let dhat = &da * &bn.gamma;
            let s1 = dhat.sum_axis(Axis(0));
            let s2 = (&dhat * &h_hat).sum_axis(Axis(0));
            let dh = (dhat * n - &s1 - &(&h_hat * &s2)) / &(&std * n);
            (dh, Some(dgamma), Some(dbeta))
        }
    };

    let second_layer = match cache.first {
        First::Plain => dh.t().dot(&z),
        First::Sample { z_noisy } => dh.t().dot(&z_noisy),
        First::Lrt { z2, sd, eps } => {
            let dvar = var_grad(&(&dh * &eps), &sd);
            dh.t().dot(&z) + &(&model.second_layer * &dvar.t().dot(&z2)) * (2.0 * model.alpha_in)
        }
    };

    Gradients {
        second_layer,
        u,
        b,
        log_alpha,
        gamma,
        beta,
    }
}

pub(crate) fn eval_logits(model: &MultiStudyModel, j: usize, z: ArrayView2<'_, f64>) -> Array2<f64> {
    // no noise is drawn in eval mode
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward_impl(model, j, z, ForwardMode::Eval, &mut rng).0
}

fn check_study(model: &MultiStudyModel, j: usize, z: ArrayView2<'_, f64>) -> Result<()> {
    if j >= model.heads.len() {
        return Err(Error::InvalidInput(format!("study index {j} out of range")));
    }
    if z.ncols() != model.k() {
        return Err(Error::shape("dictionary loadings", model.k(), z.ncols()));
    }
    if z.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// Logits of study `j` on dictionary loadings `z = X D^T`.
pub fn forward_logits_z<R: Rng + ?Sized>(
    model: &MultiStudyModel,
    j: usize,
    z: ArrayView2<'_, f64>,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<Array2<f64>> {
    check_study(model, j, z)?;
    Ok(forward_impl(model, j, z, mode, rng).0)
}

/// Logits of study `j` on raw maps.
pub fn forward_logits<R: Rng + ?Sized>(
    model: &MultiStudyModel,
    j: usize,
    x: ArrayView2<'_, f64>,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let z = model.dictionary.project(x)?;
    forward_logits_z(model, j, z.view(), mode, rng)
}

/// Mean NLL of one minibatch of study `j` plus penalties, with gradients.
pub fn minibatch_loss<R: Rng + ?Sized>(
    model: &MultiStudyModel,
    j: usize,
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    mode: ForwardMode,
    penalties: &Penalties,
    rng: &mut R,
) -> Result<LossOutput> {
    check_study(model, j, z)?;
    if mode == ForwardMode::Eval {
        return Err(Error::InvalidInput("training loss requires a training mode".into()));
    }
    if labels.len() != z.nrows() {
        return Err(Error::shape("minibatch labels", z.nrows(), labels.len()));
    }
    let head = &model.heads[j];
    if let Some(&bad) = labels.iter().find(|&&y| y >= head.n_classes()) {
        return Err(Error::LabelOutOfRange {
            study: head.study_id.clone(),
            label: bad,
            n_contrasts: head.n_classes(),
        });
    }
    let (logits, cache) = forward_impl(model, j, z, mode, rng);
    let batch_stats = match &cache.norm {
        Norm::Batch { mean, var, .. } => Some((mean.clone(), var.clone())),
        _ => None,
    };
    let (nll, g) = softmax::nll_and_grad(logits.view(), labels);
    let mut grads = backward(model, j, z, cache, g);

    let mut loss = nll;
    if penalties.kl_weight != 0.0 {
        loss += penalties.kl_weight * kl_scalar(head.log_alpha);
        grads.log_alpha += penalties.kl_weight * kl_grad_log_alpha(head.log_alpha);
    }
    if penalties.l2_shared != 0.0 {
        loss += 0.5 * penalties.l2_shared * frobenius_sq(model.second_layer.view());
        grads.second_layer.scaled_add(penalties.l2_shared, &model.second_layer);
    }
    if penalties.l2_head != 0.0 {
        loss += 0.5 * penalties.l2_head * frobenius_sq(head.u.view());
        grads.u.scaled_add(penalties.l2_head, &head.u);
    }
    Ok(LossOutput {
        loss,
        nll,
        grads,
        batch_stats,
    })
}

/// Noise-free full-data objective `sum_j w_j NLL_j` in `mode`
/// (`Eval` or `TrainPlain`).
pub fn full_objective(
    model: &MultiStudyModel,
    loadings: &[Array2<f64>],
    labels: &[&[usize]],
    weights: &[f64],
    mode: ForwardMode,
) -> Result<f64> {
    if !matches!(mode, ForwardMode::Eval | ForwardMode::TrainPlain) {
        return Err(Error::InvalidInput("full objective is defined without noise".into()));
    }
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (j, ((z, y), w)) in loadings.iter().zip(labels).zip(weights).enumerate() {
        check_study(model, j, z.view())?;
        let logits = forward_impl(model, j, z.view(), mode, &mut rng).0;
        total += w * softmax::nll(logits.view(), y);
    }
    Ok(total)
}
