//! Ensembles of joint training runs condensed into one non-negative
//! consensus basis with refit heads.

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::dictionary::{simplex_project, sparsity, update_rows_projected, Dictionary};
use crate::error::{Error, Result};
use crate::linalg::{self, frobenius_sq, singular_values, vstack};
use crate::softmax;
use crate::trainer::{fit_multistudy, TrainConfig, TrainedRun};

pub const CONSENSUS_MAX_ITER: usize = 300;
pub const CONSENSUS_TOL: f64 = 1e-8;
pub const DEFAULT_CONSENSUS_LAMBDA: f64 = 1e-4;
pub const TARGET_SPARSITY: f64 = 0.8;

/// Runs of an ensemble plus the seeds whose training failed.
#[derive(Debug)]
pub struct Ensemble {
    pub runs: Vec<TrainedRun>,
    pub failures: Vec<(u64, Error)>,
}

/// Trains `r` runs with seeds `seed0..seed0 + r`. Output order follows the
/// seeds whatever the thread schedule.
pub fn run_ensemble(
    corpus: &Corpus,
    d: &Dictionary,
    l_init: Option<&Array2<f64>>,
    cfg: &TrainConfig,
    r: usize,
    seed0: u64,
    parallel: bool,
) -> Result<Ensemble> {
    if r == 0 {
        return Err(Error::InvalidInput("ensemble needs at least one run".into()));
    }
    let fit = |s: u64| {
        let cfg = TrainConfig { seed: s, ..cfg.clone() };
        (s, fit_multistudy(corpus, d, l_init, &cfg))
    };
    let seeds: Vec<u64> = (0..r as u64).map(|i| seed0 + i).collect();
    let results: Vec<(u64, Result<TrainedRun>)> = if parallel {
        seeds.into_par_iter().map(fit).collect()
    } else {
        seeds.into_iter().map(fit).collect()
    };
    let mut ensemble = Ensemble {
        runs: Vec::with_capacity(r),
        failures: Vec::new(),
    };
    for (seed, res) in results {
        match res {
            Ok(run) => ensemble.runs.push(run),
            Err(e) => {
                warn!("ensemble run with seed {seed} failed: {e}");
                ensemble.failures.push((seed, e));
            }
        }
    }
    Ok(ensemble)
}

/// Per study, the mean over runs of the folded dictionary-space head `U L`
/// and of its bias.
pub fn average_heads(runs: &[TrainedRun]) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
    let first = runs.first().ok_or_else(|| Error::InvalidInput("no runs to average".into()))?;
    let mut sums: Vec<(Array2<f64>, Array1<f64>)> = (0..first.model.heads.len()).map(|j| first.model.folded_head(j)).collect();
    for run in &runs[1..] {
        if run.model.heads.len() != sums.len() {
            return Err(Error::shape("number of heads", sums.len(), run.model.heads.len()));
        }
        for (j, (w, b)) in sums.iter_mut().enumerate() {
            if run.model.heads[j].study_id != first.model.heads[j].study_id {
                return Err(Error::InvalidInput(format!(
                    "head {j} belongs to `{}` in one run and `{}` in another",
                    first.model.heads[j].study_id, run.model.heads[j].study_id
                )));
            }
            let (wr, br) = run.model.folded_head(j);
            if wr.dim() != w.dim() {
                return Err(Error::shape(format!("folded head {j}"), format!("{:?}", w.dim()), format!("{:?}", wr.dim())));
            }
            *w += &wr;
            *b += &br;
        }
    }
    let r = runs.len() as f64;
    Ok(sums.into_iter().map(|(w, b)| (w / r, b / r)).collect())
}

#[derive(Debug, Clone)]
pub struct ConsensusFit {
    /// `l x k`, rows in the simplex.
    pub l_bar: Array2<f64>,
    /// Codes `K`, `(l r) x l`.
    pub codes: Array2<f64>,
    pub objective_trace: Vec<f64>,
    /// Fraction of zero entries of `l_bar`.
    pub sparsity: f64,
}

pub fn consensus_objective(l_stack: ArrayView2<'_, f64>, codes: ArrayView2<'_, f64>, l_bar: ArrayView2<'_, f64>, lambda: f64) -> f64 {
    let resid = &l_stack - &codes.dot(&l_bar);
    0.5 * frobenius_sq(resid.view()) + lambda * frobenius_sq(codes)
}

/// Minimizes `1/2 ||L_stack - K L_bar||^2 + lambda ||K||^2` over `K` and
/// simplex-row `L_bar` by alternating exact ridge and projected row updates.
/// `l_init` is projected onto the constraint set before the first sweep;
/// without it, the first `l` stacked rows (absolute values, normalized) are used.
pub fn consensus_nmf(l_stack: ArrayView2<'_, f64>, l: usize, lambda: f64, l_init: Option<&Array2<f64>>) -> Result<ConsensusFit> {
    let fit = fit_consensus(l_stack, l, lambda, l_init)?;
    warn_sparsity(fit.sparsity);
    Ok(fit)
}

fn warn_sparsity(s: f64) {
    if !(0.5..=0.95).contains(&s) {
        warn!("consensus sparsity {s:.3} outside [0.5, 0.95]; consider adjusting its ridge");
    }
}

fn fit_consensus(l_stack: ArrayView2<'_, f64>, l: usize, lambda: f64, l_init: Option<&Array2<f64>>) -> Result<ConsensusFit> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("consensus ridge must be > 0, got {lambda}")));
    }
    let k = l_stack.ncols();
    if l == 0 || l > l_stack.nrows() {
        return Err(Error::InvalidInput(format!("consensus rank {l} must lie in 1..={}", l_stack.nrows())));
    }
    let mut l_bar = match l_init {
        Some(init) => {
            if init.dim() != (l, k) {
                return Err(Error::shape("consensus initialization", format!("{l} x {k}"), format!("{} x {}", init.nrows(), init.ncols())));
            }
            let mut out = Array2::zeros((l, k));
            for (t, row) in init.axis_iter(Axis(0)).enumerate() {
                out.row_mut(t).assign(&simplex_project(row));
            }
            out
        }
        None => {
            let mut out = l_stack.slice(ndarray::s![..l, ..]).mapv(f64::abs);
            for mut row in out.axis_iter_mut(Axis(0)) {
                let s = row.sum();
                if s > 0.0 {
                    row /= s;
                }
            }
            out
        }
    };
    let mut codes = linalg::ridge_right_solve(l_stack, l_bar.view(), 2.0 * lambda)?;
    let mut trace = vec![consensus_objective(l_stack, codes.view(), l_bar.view(), lambda)];
    for _ in 0..CONSENSUS_MAX_ITER {
        let b = codes.t().dot(&l_stack);
        let c = codes.t().dot(&codes);
        update_rows_projected(&mut l_bar, &b, &c);
        codes = linalg::ridge_right_solve(l_stack, l_bar.view(), 2.0 * lambda)?;
        let obj = consensus_objective(l_stack, codes.view(), l_bar.view(), lambda);
        let prev = *trace.last().expect("non-empty trace");
        trace.push(obj);
        if (prev - obj).abs() <= CONSENSUS_TOL * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    if l_bar.iter().all(|&v| v == 0.0) {
        return Err(Error::Singular("consensus factor collapsed to zero".into()));
    }
    let s = sparsity(l_bar.view());
    Ok(ConsensusFit {
        l_bar,
        codes,
        objective_trace: trace,
        sparsity: s,
    })
}

/// Picks, from `grid`, the ridge whose consensus sparsity is closest to
/// `target` (ties to the smaller ridge).
pub fn tune_consensus_lambda(
    l_stack: ArrayView2<'_, f64>,
    l: usize,
    l_init: Option<&Array2<f64>>,
    grid: &[f64],
    target: f64,
) -> Result<(f64, ConsensusFit)> {
    let mut best: Option<(f64, ConsensusFit)> = None;
    for &lambda in grid {
        let fit = fit_consensus(l_stack, l, lambda, l_init)?;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| (fit.sparsity - target).abs() < (b.sparsity - target).abs());
        if better {
            best = Some((lambda, fit));
        }
    }
    let best = best.ok_or_else(|| Error::InvalidInput("empty consensus ridge grid".into()))?;
    warn_sparsity(best.1.sparsity);
    Ok(best)
}

/// Default ridge grid `{10^i, i = -6..1}`.
pub fn default_consensus_grid() -> Vec<f64> {
    (-6..=1).map(|i| 10f64.powi(i)).collect()
}

/// `argmin_U ||W_bar - U L_bar||^2` in dictionary space (jittered normal equations).
pub fn refit_heads(w_bar: ArrayView2<'_, f64>, l_bar: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    linalg::ridge_right_solve(w_bar, l_bar, linalg::LSTSQ_JITTER)
}

/// Share of the stacked matrices' energy captured by their top `l` singular directions.
pub fn span_stability(l_list: &[Array2<f64>], l: usize) -> Result<f64> {
    if l_list.len() < 2 {
        return Err(Error::InvalidInput("span stability needs at least two matrices".into()));
    }
    let views: Vec<_> = l_list.iter().map(|m| m.view()).collect();
    let stack = vstack(&views)?;
    let sv = singular_values(stack.view());
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::InvalidInput("all stacked matrices are zero".into()));
    }
    let top: f64 = sv.iter().take(l).map(|s| s * s).sum();
    Ok(top / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusHead {
    pub study_id: String,
    pub contrast_names: Vec<String>,
    /// `c x l`.
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusModel {
    pub dictionary: Dictionary,
    pub l_bar: Array2<f64>,
    pub heads: Vec<ConsensusHead>,
    pub lambda: f64,
    pub sparsity: f64,
}

impl ConsensusModel {
    pub fn l(&self) -> usize {
        self.l_bar.nrows()
    }

    /// Non-negative networks `M = L_bar D` (`l x p`).
    pub fn mston(&self) -> Array2<f64> {
        self.l_bar.dot(&self.dictionary.atoms())
    }

    pub fn head_index(&self, study_id: &str) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.study_id == study_id)
            .ok_or_else(|| Error::UnknownStudy(study_id.to_string()))
    }

    /// Voxel-space maps `U L_bar D` of head `j` and biases.
    pub fn classification_maps(&self, j: usize) -> (Array2<f64>, Array1<f64>) {
        let h = &self.heads[j];
        (h.u.dot(&self.mston()), h.b.clone())
    }

    pub fn logits(&self, study_id: &str, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let h = &self.heads[self.head_index(study_id)?];
        let z = self.dictionary.project(x)?;
        let w = h.u.dot(&self.l_bar);
        Ok(softmax::affine(z.view(), w.view(), &h.b))
    }

    pub fn predict(&self, study_id: &str, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(softmax::argmax_rows(self.logits(study_id, x)?.view()))
    }
}

/// How the consensus ridge is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsensusRidge {
    Fixed(f64),
    /// Closest to [`TARGET_SPARSITY`] over [`default_consensus_grid`].
    Tuned,
}

/// Stacks the runs' second layers, factorizes them into a consensus basis
/// and refits every head against it.
pub fn build_consensus(runs: &[TrainedRun], l: usize, ridge: ConsensusRidge, l_init: Option<&Array2<f64>>) -> Result<ConsensusModel> {
    let first = runs.first().ok_or_else(|| Error::InvalidInput("no runs to combine".into()))?;
    let views: Vec<_> = runs.iter().map(|r| r.model.second_layer.view()).collect();
    let stack = vstack(&views)?;
    let (lambda, fit) = match ridge {
        ConsensusRidge::Fixed(lambda) => (lambda, consensus_nmf(stack.view(), l, lambda, l_init)?),
        ConsensusRidge::Tuned => tune_consensus_lambda(stack.view(), l, l_init, &default_consensus_grid(), TARGET_SPARSITY)?,
    };
    let averaged = average_heads(runs)?;
    let heads = averaged
        .into_iter()
        .zip(&first.model.heads)
        .map(|((w, b), h)| {
            Ok(ConsensusHead {
                study_id: h.study_id.clone(),
                contrast_names: h.contrast_names.clone(),
                u: refit_heads(w.view(), fit.l_bar.view())?,
                b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsensusModel {
        dictionary: first.model.dictionary.clone(),
        l_bar: fit.l_bar,
        heads,
        lambda,
        sparsity: fit.sparsity,
    })
}
