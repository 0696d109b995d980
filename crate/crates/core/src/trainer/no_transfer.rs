//! Block construction showing that an unconstrained-rank factored model can
//! reproduce separately trained decoders without sharing anything.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{full_objective, minibatch_loss, ForwardMode, Penalties};
use super::sampling::study_probabilities;
use super::{Head, MultiStudyModel};
use crate::baseline;
use crate::corpus::Corpus;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::lbfgs::SolverConfig;
use crate::linalg::frobenius_sq;
use crate::softmax;

pub const NO_TRANSFER_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NoTransferReport {
    /// Weighted joint objective of the block model.
    pub joint_objective: f64,
    /// Same weighting applied to the separate decoders' objectives.
    pub separate_objective: f64,
    pub relative_error: f64,
    /// Gradient norm of the joint objective at the block model.
    pub joint_grad_norm: f64,
    /// Gradient norm of each separate objective at its solution.
    pub separate_grad_norms: Vec<f64>,
    pub passed: bool,
    pub model: MultiStudyModel,
}

/// Fits unregularized reduced decoders `(V^j, b^j)` per study, stacks them as
/// `L = [V^1; V^2; ...; 0]` with selector heads `U^j`, and compares the joint
/// objective of that model with the separate objectives, weighted by the
/// sampling probabilities at exponent `beta`.
pub fn verify_no_transfer_construction(
    corpus: &Corpus,
    d: &Dictionary,
    l: usize,
    beta: f64,
    opt: &SolverConfig,
) -> Result<NoTransferReport> {
    let c_total = corpus.total_contrasts();
    if l < c_total {
        return Err(Error::InvalidInput(format!(
            "block construction needs l >= total contrasts ({c_total}), got l = {l}"
        )));
    }
    let k = d.k();
    let sizes: Vec<usize> = corpus.studies().iter().map(|s| s.n_maps()).collect();
    let pis = study_probabilities(&sizes, beta)?;

    let mut second = Array2::zeros((l, k));
    let mut heads = Vec::with_capacity(corpus.n_studies());
    let mut loadings = Vec::with_capacity(corpus.n_studies());
    let mut separate = 0.0;
    let mut separate_grad_norms = Vec::new();
    let mut offset = 0;
    for (study, &pi) in corpus.studies().iter().zip(&pis) {
        let z = d.project(study.data())?;
        let c = study.n_contrasts();
        let (v, b) = baseline::fit_linear(z.view(), study.labels(), c, 0.0, opt, None)?;
        let logits = softmax::affine(z.view(), v.view(), &b);
        separate += pi * softmax::nll(logits.view(), study.labels());
        let (_, gw, gb) = baseline::objective(z.view(), study.labels(), v.view(), &b, 0.0);
        separate_grad_norms.push((frobenius_sq(gw.view()) + gb.dot(&gb)).sqrt());

        second.slice_mut(s![offset..offset + c, ..]).assign(&v);
        let mut u = Array2::zeros((c, l));
        for i in 0..c {
            u[[i, offset + i]] = 1.0;
        }
        heads.push(Head {
            study_id: study.id().to_string(),
            contrast_names: study.contrast_names().to_vec(),
            u,
            b,
            log_alpha: 0.0,
        });
        loadings.push(z);
        offset += c;
    }
    let model = MultiStudyModel::new(d.clone(), second, heads, 0.0, None)?;
    let labels: Vec<&[usize]> = corpus.studies().iter().map(|s| s.labels()).collect();
    let joint = full_objective(&model, &loadings, &labels, &pis, ForwardMode::TrainPlain)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g_shared = Array2::<f64>::zeros((l, k));
    let mut head_sq = 0.0;
    for (j, ((z, y), &pi)) in loadings.iter().zip(&labels).zip(&pis).enumerate() {
        let out = minibatch_loss(&model, j, z.view(), y, ForwardMode::TrainPlain, &Penalties::default(), &mut rng)?;
        g_shared.scaled_add(pi, &out.grads.second_layer);
        let gb: Array1<f64> = out.grads.b * pi;
        head_sq += pi * pi * frobenius_sq(out.grads.u.view()) + gb.dot(&gb);
    }
    let joint_grad_norm = (frobenius_sq(g_shared.view()) + head_sq).sqrt();

    let relative_error = (joint - separate).abs() / separate.abs().max(f64::MIN_POSITIVE);
    Ok(NoTransferReport {
        joint_objective: joint,
        separate_objective: separate,
        relative_error,
        joint_grad_norm,
        separate_grad_norms,
        passed: relative_error <= NO_TRANSFER_TOLERANCE,
        model,
    })
}
