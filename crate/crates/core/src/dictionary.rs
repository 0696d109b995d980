//! Non-negative first-layer dictionaries with rows on the l1 simplex.
//!
//! The dictionary is learned by batch alternating minimization of
//! `||X - A D||_F^2 + lambda ||A||_F^2` over codes `A` (closed-form ridge
//! solve) and components `D` (exact projected block updates, one row at a
//! time). Each block step is an exact minimization over its block, so the
//! objective never increases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Slack on the simplex l1 bound accepted when validating stored rows.
pub const SIMPLEX_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
    names: Option<Vec<String>>,
}

impl Dictionary {
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        for (t, row) in atoms.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "dictionary row {t} has negative or non-finite entries"
                )));
            }
            if row.sum() > 1.0 + SIMPLEX_SLACK {
                return Err(Error::InvalidInput(format!(
                    "dictionary row {t} has l1 norm {} > 1",
                    row.sum()
                )));
            }
        }
        Ok(Dictionary { atoms, names: None })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.k() {
            return Err(Error::shape("dictionary component names", self.k(), names.len()));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// Identity dictionary on `p` features (reduces decoders to voxel space).
    pub fn identity(p: usize) -> Self {
        Dictionary {
            atoms: Array2::eye(p),
            names: None,
        }
    }

    pub fn atoms(&self) -> ArrayView2<'_, f64> {
        self.atoms.view()
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn k(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn p(&self) -> usize {
        self.atoms.ncols()
    }

    /// Loadings `X D^T` of each row of `x` on the components.
    pub fn project(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.p() {
            return Err(Error::shape("input features", self.p(), x.ncols()));
        }
        Ok(x.dot(&self.atoms.t()))
    }
}

/// Euclidean projection onto `{u >= 0, sum(u) <= 1}`.
pub fn simplex_project(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let clipped = v.mapv(|x| x.max(0.0));
    if clipped.sum() <= 1.0 {
        return clipped;
    }
    // projection onto the probability simplex (sort-based threshold search)
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.mapv(|x| (x - theta).max(0.0))
}

#[derive(Debug, Clone)]
pub struct NmfResult {
    pub dictionary: Dictionary,
    /// Codes `A`, one row per input sample.
    pub codes: Array2<f64>,
    /// Objective after every epoch.
    pub objective_trace: Vec<f64>,
}

pub fn nmf_objective(x: ArrayView2<'_, f64>, codes: ArrayView2<'_, f64>, d: ArrayView2<'_, f64>, lambda: f64) -> f64 {
    let resid = &x - &codes.dot(&d);
    linalg::frobenius_sq(resid.view()) + lambda * linalg::frobenius_sq(codes)
}

/// Ridge code update `A = X D^T (D D^T + lambda I)^{-1}`.
fn update_codes(x: ArrayView2<'_, f64>, d: ArrayView2<'_, f64>, lambda: f64) -> Result<Array2<f64>> {
    linalg::ridge_right_solve(x, d, lambda)
}

/// One sweep of exact projected block updates over the rows of `d`, for the
/// quadratic `||Y - K D||^2` written through `B = K^T Y` and `C = K^T K`.
pub(crate) fn update_rows_projected(d: &mut Array2<f64>, b: &Array2<f64>, c: &Array2<f64>) {
    let k = d.nrows();
    for t in 0..k {
        let ctt = c[[t, t]];
        if ctt <= 1e-300 {
            // unused component: any value is optimal, keep it
            continue;
        }
        let grad = &b.row(t) - &c.row(t).dot(&*d);
        let target = &d.row(t) + &(grad / ctt);
        let projected = simplex_project(target.view());
        d.row_mut(t).assign(&projected);
    }
}

fn initial_components(x: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, p) = x.dim();
    let mut d = Array2::zeros((k, p));
    let picks: Vec<usize> = if k <= n {
        sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    for (t, &i) in picks.iter().enumerate() {
        let mut row = x.row(i).mapv(|v| v.max(0.0));
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row = Array1::from_shape_fn(p, |_| rng.random_range(0.0..1.0));
            let s = row.sum();
            row /= s;
        }
        d.row_mut(t).assign(&row);
    }
    d
}

/// Sparse non-negative matrix factorization with simplex-constrained rows.
pub fn fit_sparse_nmf(x: ArrayView2<'_, f64>, k: usize, lambda: f64, epochs: usize, seed: u64) -> Result<NmfResult> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("NaN or infinite entry in NMF input".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("need at least one component".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("ridge on codes must be > 0, got {lambda}")));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty NMF input".into()));
    }
    if k > x.nrows().min(x.ncols()) {
        log::warn!("{k} components exceed min{:?} of the input", x.dim());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = initial_components(x, k, &mut rng);
    let mut codes = update_codes(x, d.view(), lambda)?;
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let b = codes.t().dot(&x);
        let c = codes.t().dot(&codes);
        update_rows_projected(&mut d, &b, &c);
        codes = update_codes(x, d.view(), lambda)?;
        trace.push(nmf_objective(x, codes.view(), d.view(), lambda));
    }
    Ok(NmfResult {
        dictionary: Dictionary::new(d)?,
        codes,
        objective_trace: trace,
    })
}

/// Fraction of features carrying a non-zero loading in at least one component.
pub fn coverage(d: &Dictionary) -> f64 {
    let covered = d
        .atoms()
        .axis_iter(Axis(1))
        .filter(|col| col.iter().any(|&v| v > 0.0))
        .count();
    covered as f64 / d.p() as f64
}

/// Fraction of zero entries.
pub fn sparsity(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().filter(|&&v| v == 0.0).count() as f64 / a.len().max(1) as f64
}

/// Default grid for the code ridge when selecting dictionary sparsity.
pub fn default_lambda_grid() -> Vec<f64> {
    (-5..=1).map(|i| 10f64.powi(i)).collect()
}

/// Fits one dictionary per grid value and keeps the largest `lambda` (the
/// sparsest components) whose components still jointly cover at least
/// `min_coverage` of the features. Falls back to the best-covering fit.
pub fn select_dictionary_lambda(
    x: ArrayView2<'_, f64>,
    k: usize,
    grid: &[f64],
    epochs: usize,
    seed: u64,
    min_coverage: f64,
) -> Result<(f64, NmfResult)> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty lambda grid".into()));
    }
    let mut best: Option<(f64, f64, NmfResult)> = None;
    let mut fallback: Option<(f64, f64, NmfResult)> = None;
    for &lambda in grid {
        let fit = fit_sparse_nmf(x, k, lambda, epochs, seed)?;
        let cov = coverage(&fit.dictionary);
        if cov >= min_coverage && best.as_ref().is_none_or(|b| lambda > b.0) {
            best = Some((lambda, cov, fit));
        } else if fallback.as_ref().is_none_or(|b| cov > b.1) {
            fallback = Some((lambda, cov, fit));
        }
    }
    let (lambda, _, fit) = best.or(fallback).expect("grid is non-empty");
    Ok((lambda, fit))
}

/// Least-squares second-layer initialization: `argmin_L ||D_coarse - L D||_F^2`.
pub fn init_second_layer(coarse: &Dictionary, fine: &Dictionary) -> Result<Array2<f64>> {
    if coarse.p() != fine.p() {
        return Err(Error::shape("dictionary feature dimension", fine.p(), coarse.p()));
    }
    linalg::ridge_right_solve(coarse.atoms(), fine.atoms(), linalg::LSTSQ_JITTER)
}

/// Default in-mask mass fraction below which a component is dropped.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// Drops components whose in-mask share of l1 mass is below `threshold`.
/// Returns the restricted dictionary and the indices of the kept rows.
pub fn restrict_components(d: &Dictionary, mask: &[bool], threshold: f64) -> Result<(Dictionary, Vec<usize>)> {
    if mask.len() != d.p() {
        return Err(Error::shape("mask length", d.p(), mask.len()));
    }
    let kept: Vec<usize> = d
        .atoms()
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, row)| {
            let total: f64 = row.sum();
            if total == 0.0 {
                return true;
            }
            let inside: f64 = row.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            inside / total >= threshold
        })
        .map(|(t, _)| t)
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidInput("mask restriction removed every component".into()));
    }
    let atoms = d.atoms().select(Axis(0), &kept);
    let mut out = Dictionary::new(atoms)?;
    if let Some(names) = d.names() {
        out = out.with_names(kept.iter().map(|&t| names[t].clone()).collect())?;
    }
    Ok((out, kept))
}
