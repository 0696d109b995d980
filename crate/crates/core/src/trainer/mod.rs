//! Jointly trained factored decoders.
//!
//! Study `j` predicts `logits = U^j BN(L D x) + b^j`, where the dictionary
//! `D` is frozen, `L` is shared across studies and `(U^j, b^j)` is the
//! study's own head. Multiplicative Gaussian noise may be applied to the
//! dictionary loadings and to the latent features feeding each head.

mod adam;
mod fit;
mod forward;
mod no_transfer;
mod sampling;
mod variational;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::softmax;

pub use adam::{AdamParams, AdamState};
pub use fit::{fit_l2_factored, fit_multistudy, glorot_uniform, TrainedRun};
pub use forward::{forward_logits, forward_logits_z, full_objective, minibatch_loss, ForwardMode, Gradients, LossOutput, Penalties};
pub use no_transfer::{verify_no_transfer_construction, NoTransferReport};
pub use sampling::{effective_sample_size, sample_study, study_probabilities, StudySampler};
pub use variational::{clip_log_alpha, kl_grad_log_alpha, kl_penalty, kl_scalar, LOG_ALPHA_MAX, LOG_ALPHA_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    None,
    GaussianFixed,
    Variational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Exponent of the study sampling weights `n_j^beta`.
    pub beta: f64,
    pub p_in: f64,
    pub p_head_init: f64,
    pub dropout_mode: DropoutMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    /// Defaults to 200 passes over the training maps.
    pub max_samples_seen: Option<usize>,
    pub l: usize,
    pub lambda_l2: f64,
    pub seed: u64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.6,
            p_in: 0.25,
            p_head_init: 0.75,
            dropout_mode: DropoutMode::Variational,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 32,
            max_samples_seen: None,
            l: 16,
            lambda_l2: 0.0,
            seed: 0,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, p) in [("p_in", self.p_in), ("p_head_init", self.p_head_init)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} must lie in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta = {} must lie in [0, 1]", self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.l == 0 {
            return bad("l must be at least 1".into());
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return bad(format!("lambda_l2 = {} must be finite and non-negative", self.lambda_l2));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_adam > 0.0) {
            return bad("Adam hyperparameters out of range".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_epsilon > 0.0) {
            return bad("batch-norm momentum or epsilon out of range".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }
}

/// Gaussian noise variance matching dropout rate `p`.
pub fn alpha_from_rate(p: f64) -> f64 {
    p / (1.0 - p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(l: usize, momentum: f64, epsilon: f64) -> Self {
        BatchNormState {
            running_mean: Array1::zeros(l),
            running_var: Array1::ones(l),
            gamma: Array1::ones(l),
            beta: Array1::zeros(l),
            momentum,
            epsilon,
        }
    }

    /// Per-feature eval-mode scale `gamma / sqrt(running_var + eps)`.
    pub fn scale(&self) -> Array1<f64> {
        &self.gamma / &self.running_var.mapv(|v| (v + self.epsilon).sqrt())
    }

    /// Per-feature eval-mode offset `beta - scale * running_mean`.
    pub fn shift(&self) -> Array1<f64> {
        &self.beta - &(self.scale() * &self.running_mean)
    }

    pub(crate) fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>, n: usize) {
        let m = self.momentum;
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        self.running_mean = &self.running_mean * (1.0 - m) + mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &(var * (m * unbias));
    }
}

/// Classification head of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub study_id: String,
    pub contrast_names: Vec<String>,
    /// `c x l`.
    pub u: Array2<f64>,
    pub b: Array1<f64>,
    pub log_alpha: f64,
}

impl Head {
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn n_classes(&self) -> usize {
        self.u.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStudyModel {
    pub dictionary: Dictionary,
    /// `L`, `l x k`.
    pub second_layer: Array2<f64>,
    pub heads: Vec<Head>,
    pub alpha_in: f64,
    pub bn: Option<BatchNormState>,
}

impl MultiStudyModel {
    pub fn new(
        dictionary: Dictionary,
        second_layer: Array2<f64>,
        heads: Vec<Head>,
        alpha_in: f64,
        bn: Option<BatchNormState>,
    ) -> Result<Self> {
        let (l, k) = second_layer.dim();
        if k != dictionary.k() {
            return Err(Error::shape("second layer columns", dictionary.k(), k));
        }
        if l > k {
            return Err(Error::InvalidInput(format!("latent size {l} exceeds dictionary size {k}")));
        }
        for h in &heads {
            if h.u.ncols() != l {
                return Err(Error::shape("head columns", l, h.u.ncols()));
            }
            if h.b.len() != h.u.nrows() || h.contrast_names.len() != h.u.nrows() {
                return Err(Error::shape("head bias", h.u.nrows(), h.b.len()));
            }
        }
        if let Some(bn) = &bn {
            if bn.gamma.len() != l || bn.beta.len() != l || bn.running_mean.len() != l || bn.running_var.len() != l {
                return Err(Error::shape("batch-norm state", l, bn.gamma.len()));
            }
        }
        let heads = heads
            .into_iter()
            .map(|h| Head {
                u: h.u.as_standard_layout().into_owned(),
                ..h
            })
            .collect();
        Ok(MultiStudyModel {
            dictionary,
            second_layer: second_layer.as_standard_layout().into_owned(),
            heads,
            alpha_in,
            bn,
        })
    }

    pub fn l(&self) -> usize {
        self.second_layer.nrows()
    }

    pub fn k(&self) -> usize {
        self.second_layer.ncols()
    }

    pub fn head_index(&self, study_id: &str) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.study_id == study_id)
            .ok_or_else(|| Error::UnknownStudy(study_id.to_string()))
    }

    pub fn is_finite(&self) -> bool {
        let bn_ok = self.bn.as_ref().is_none_or(|b| {
            b.gamma.iter().chain(&b.beta).chain(&b.running_mean).chain(&b.running_var).all(|v| v.is_finite())
        });
        bn_ok
            && self.second_layer.iter().all(|v| v.is_finite())
            && self
                .heads
                .iter()
                .all(|h| h.u.iter().chain(&h.b).all(|v| v.is_finite()) && h.log_alpha.is_finite())
    }

    /// Eval-mode head folded into a single affine map on dictionary loadings:
    /// `W = U diag(scale) L`, `c = U shift + b`.
    pub fn folded_head(&self, j: usize) -> (Array2<f64>, Array1<f64>) {
        let h = &self.heads[j];
        match &self.bn {
            None => (h.u.dot(&self.second_layer), h.b.clone()),
            Some(bn) => {
                let scaled = &h.u * &bn.scale();
                (scaled.dot(&self.second_layer), h.u.dot(&bn.shift()) + &h.b)
            }
        }
    }

    /// Voxel-space classification maps of study `j` (`c x p`) and biases.
    pub fn classification_maps(&self, j: usize) -> (Array2<f64>, Array1<f64>) {
        let (w, b) = self.folded_head(j);
        (w.dot(&self.dictionary.atoms()), b)
    }

    /// Eval-mode logits for raw maps of study `study_id`.
    pub fn logits(&self, study_id: &str, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let j = self.head_index(study_id)?;
        let z = self.dictionary.project(x)?;
        Ok(forward::eval_logits(self, j, z.view()))
    }

    pub fn predict(&self, study_id: &str, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(softmax::argmax_rows(self.logits(study_id, x)?.view()))
    }
}
