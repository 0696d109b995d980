//! Per-study multinomial logistic regression, either on raw features
//! ("voxel" decoders) or on dictionary loadings ("reduced" decoders).
//!
//! Objective: mean multinomial negative log-likelihood plus
//! `lambda * ||W||_F^2`; the bias is not penalized.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::{half_split, Corpus, Study};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::lbfgs::{self, SolverConfig};
use crate::metrics;
use crate::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpace {
    Voxels,
    Dictionary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder {
    pub study_id: String,
    /// `c x d`, with `d = p` (voxels) or `k` (dictionary).
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub lambda: f64,
    pub input_space: InputSpace,
    pub dictionary_ref: Option<String>,
    pub contrast_names: Vec<String>,
}

impl LinearDecoder {
    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("decoder input", self.input_dim(), x.ncols()));
        }
        Ok(softmax::affine(x, self.weights.view(), &self.bias))
    }

    /// Argmax of `W x + b` per row, ties to the lowest class index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(softmax::argmax_rows(self.logits(x)?.view()))
    }

    /// Predicts from raw maps, projecting onto `dictionary` first for reduced decoders.
    pub fn predict_maps(&self, x: ArrayView2<'_, f64>, dictionary: Option<&Dictionary>) -> Result<Vec<usize>> {
        match (self.input_space, dictionary) {
            (InputSpace::Voxels, _) => self.predict(x),
            (InputSpace::Dictionary, Some(d)) => self.predict(d.project(x)?.view()),
            (InputSpace::Dictionary, None) => Err(Error::InvalidInput(
                "reduced decoder needs its dictionary to predict from maps".into(),
            )),
        }
    }

    /// Voxel-space weights (`W D` for reduced decoders).
    pub fn voxel_weights(&self, dictionary: Option<&Dictionary>) -> Result<Array2<f64>> {
        match (self.input_space, dictionary) {
            (InputSpace::Voxels, _) => Ok(self.weights.clone()),
            (InputSpace::Dictionary, Some(d)) => Ok(self.weights.dot(&d.atoms())),
            (InputSpace::Dictionary, None) => Err(Error::InvalidInput(
                "reduced decoder needs its dictionary to build voxel maps".into(),
            )),
        }
    }
}

/// Flat parameter layout: `W` row-major, then `b`.
struct Problem<'a> {
    x: ArrayView2<'a, f64>,
    labels: &'a [usize],
    c: usize,
    lambda: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.c * self.x.ncols() + self.c
    }

    fn split<'p>(&self, theta: &'p [f64]) -> (ArrayView2<'p, f64>, Array1<f64>) {
        let d = self.x.ncols();
        let w = ArrayView2::from_shape((self.c, d), &theta[..self.c * d]).expect("layout");
        let b = Array1::from(theta[self.c * d..].to_vec());
        (w, b)
    }

    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.x.ncols();
        let (w, b) = self.split(theta);
        let logits = softmax::affine(self.x, w, &b);
        let (nll, g) = softmax::nll_and_grad(logits.view(), self.labels);
        let gw = g.t().dot(&self.x);
        let mut penalty = 0.0;
        for (i, (gv, wv)) in gw.iter().zip(w.iter()).enumerate() {
            grad[i] = gv + 2.0 * self.lambda * wv;
            penalty += wv * wv;
        }
        for k in 0..self.c {
            grad[self.c * d + k] = g.column(k).sum();
        }
        nll + self.lambda * penalty
    }
}

/// Objective value and gradient at `(w, b)`; exposed for gradient checks.
pub fn objective(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    w: ArrayView2<'_, f64>,
    b: &Array1<f64>,
    lambda: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let c = w.nrows();
    let problem = Problem { x, labels, c, lambda };
    let mut theta: Vec<f64> = w.iter().copied().collect();
    theta.extend(b.iter());
    let mut grad = vec![0.0; problem.dim()];
    let v = problem.eval(&theta, &mut grad);
    let d = x.ncols();
    let gw = Array2::from_shape_vec((c, d), grad[..c * d].to_vec()).expect("layout");
    let gb = Array1::from(grad[c * d..].to_vec());
    (v, gw, gb)
}

/// Fits `(W, b)` on design `x`. `warm` optionally seeds the solver.
pub fn fit_linear(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    c: usize,
    lambda: f64,
    opt: &SolverConfig,
    warm: Option<(&Array2<f64>, &Array1<f64>)>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    if labels.len() != x.nrows() {
        return Err(Error::shape("labels", x.nrows(), labels.len()));
    }
    let present = labels.iter().collect::<std::collections::HashSet<_>>().len();
    if present < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes present to fit a decoder, found {present}"
        )));
    }
    let problem = Problem { x, labels, c, lambda };
    let d = x.ncols();
    let x0 = match warm {
        Some((w, b)) if w.dim() == (c, d) && b.len() == c => {
            let mut v: Vec<f64> = w.iter().copied().collect();
            v.extend(b.iter());
            v
        }
        _ => vec![0.0; problem.dim()],
    };
    let min = lbfgs::minimize(|t, g| problem.eval(t, g), x0, opt, "multinomial logistic regression")?;
    let w = Array2::from_shape_vec((c, d), min.x[..c * d].to_vec()).expect("layout");
    let b = Array1::from(min.x[c * d..].to_vec());
    Ok((w, b))
}

pub fn fit_voxel_decoder(study: &Study, lambda: f64, opt: &SolverConfig) -> Result<LinearDecoder> {
    let (w, b) = fit_linear(study.data(), study.labels(), study.n_contrasts(), lambda, opt, None)?;
    Ok(LinearDecoder {
        study_id: study.id().to_string(),
        weights: w,
        bias: b,
        lambda,
        input_space: InputSpace::Voxels,
        dictionary_ref: None,
        contrast_names: study.contrast_names().to_vec(),
    })
}

pub fn fit_reduced_decoder(study: &Study, d: &Dictionary, lambda: f64, opt: &SolverConfig) -> Result<LinearDecoder> {
    let z = d.project(study.data())?;
    let (w, b) = fit_linear(z.view(), study.labels(), study.n_contrasts(), lambda, opt, None)?;
    Ok(LinearDecoder {
        study_id: study.id().to_string(),
        weights: w,
        bias: b,
        lambda,
        input_space: InputSpace::Dictionary,
        dictionary_ref: Some(format!("k={}", d.k())),
        contrast_names: study.contrast_names().to_vec(),
    })
}

/// Which features a decoder is trained on during lambda selection.
#[derive(Debug, Clone, Copy)]
pub enum DecoderInput<'a> {
    Voxels,
    Dictionary(&'a Dictionary),
}

impl DecoderInput<'_> {
    fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            DecoderInput::Voxels => Ok(x.to_owned()),
            DecoderInput::Dictionary(d) => d.project(x),
        }
    }
}

/// Default grid `{10^i, i = -3..3}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-3..=3).map(|i| 10f64.powi(i)).collect()
}

/// Mean held-out accuracy per grid value over `n_splits` subject half-splits.
pub fn lambda_scores(
    study: &Study,
    grid: &[f64],
    n_splits: usize,
    seed: u64,
    input: DecoderInput<'_>,
    opt: &SolverConfig,
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty lambda grid".into()));
    }
    if n_splits == 0 {
        return Err(Error::InvalidInput("need at least one split".into()));
    }
    let single = Corpus::new(vec![study.clone()])?;
    // fit from the largest lambda down, warm-starting each solve
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let mut totals = vec![0.0; grid.len()];
    for s in 0..n_splits {
        let split = half_split(&single, seed.wrapping_add(s as u64), 0.5)?;
        let (tr, te) = (&split.train.studies()[0], &split.test.studies()[0]);
        let x_tr = input.features(tr.data())?;
        let x_te = input.features(te.data())?;
        let mut warm: Option<(Array2<f64>, Array1<f64>)> = None;
        for &g in &order {
            let (w, b) = fit_linear(
                x_tr.view(),
                tr.labels(),
                study.n_contrasts(),
                grid[g],
                opt,
                warm.as_ref().map(|(w, b)| (w, b)),
            )?;
            let pred = softmax::argmax_rows(softmax::affine(x_te.view(), w.view(), &b).view());
            totals[g] += metrics::accuracy(&pred, te.labels())?;
            warm = Some((w, b));
        }
    }
    Ok(totals.into_iter().map(|t| t / n_splits as f64).collect())
}

/// Grid value with the best mean held-out accuracy; ties go to the larger lambda.
pub fn select_lambda(
    study: &Study,
    grid: &[f64],
    n_splits: usize,
    seed: u64,
    input: DecoderInput<'_>,
    opt: &SolverConfig,
) -> Result<f64> {
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let scores = lambda_scores(study, grid, n_splits, seed, input, opt)?;
    Ok(pick_lambda(grid, &scores))
}

pub(crate) fn pick_lambda(grid: &[f64], scores: &[f64]) -> f64 {
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && grid[i] > grid[best]) {
            best = i;
        }
    }
    grid[best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_weights_predict_from_bias() {
        let dec = LinearDecoder {
            study_id: "s".into(),
            weights: Array2::zeros((2, 3)),
            bias: array![0.0, 1.0],
            lambda: 0.0,
            input_space: InputSpace::Voxels,
            dictionary_ref: None,
            contrast_names: vec!["a".into(), "b".into()],
        };
        let x = array![[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]];
        assert_eq!(dec.predict(x.view()).unwrap(), vec![1, 1]);
        assert!(dec.predict(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn exact_tie_goes_to_lower_class() {
        let dec = LinearDecoder {
            study_id: "s".into(),
            weights: array![[1.0, 0.0], [0.0, 1.0]],
            bias: array![0.0, 0.0],
            lambda: 0.0,
            input_space: InputSpace::Voxels,
            dictionary_ref: None,
            contrast_names: vec!["a".into(), "b".into()],
        };
        assert_eq!(dec.predict(array![[2.0, 2.0]].view()).unwrap(), vec![0]);
    }

    #[test]
    fn tie_in_scores_picks_larger_lambda() {
        assert_eq!(pick_lambda(&[0.1, 1.0, 10.0], &[0.5, 0.7, 0.7]), 10.0);
        assert_eq!(pick_lambda(&[10.0, 1.0], &[0.7, 0.7]), 10.0);
        assert_eq!(pick_lambda(&[0.1, 1.0], &[0.9, 0.7]), 0.1);
    }

    #[test]
    fn single_class_rejected() {
        let x = array![[1.0], [2.0]];
        assert!(fit_linear(x.view(), &[0, 0], 2, 0.1, &SolverConfig::default(), None).is_err());
    }
}
