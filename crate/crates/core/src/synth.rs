//! Synthetic multi-study corpora drawn from a shared latent-subspace model.
//!
//! Every map is `x = (mu_class + offset_subject)^T M + noise`, where `M`
//! (latent x features) has sparse non-negative rows on the unit simplex and
//! the class means of all studies are drawn from one shared pool.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Study};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub n_subjects: usize,
    pub n_contrasts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub p: usize,
    pub l_true: usize,
    pub studies: Vec<StudySpec>,
    pub subject_noise_sd: f64,
    pub voxel_noise_sd: f64,
    pub class_sep: f64,
    /// `(a, b)`: study `b` reuses the first subjects of study `a`.
    #[serde(default)]
    pub shared_subject_pairs: Vec<(usize, usize)>,
    pub seed: u64,
    /// Size of the latent class-mean pool all studies draw from.
    #[serde(default)]
    pub pool_size: Option<usize>,
    /// Fraction of features supporting each latent component.
    #[serde(default = "default_support")]
    pub support_fraction: f64,
}

fn default_support() -> f64 {
    0.25
}

impl GenConfig {
    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    fn validate(&self) -> Result<()> {
        if self.studies.is_empty() {
            return Err(Error::InvalidInput("generator needs at least one study".into()));
        }
        if self.l_true == 0 || self.l_true > self.p {
            return Err(Error::InvalidInput(format!(
                "latent dimension {} must lie in 1..={}",
                self.l_true, self.p
            )));
        }
        for (j, s) in self.studies.iter().enumerate() {
            if s.n_contrasts == 0 {
                return Err(Error::InvalidInput(format!("study {j} has zero contrasts")));
            }
            if s.n_subjects == 0 {
                return Err(Error::InvalidInput(format!("study {j} has zero subjects")));
            }
        }
        if self.subject_noise_sd < 0.0 || self.voxel_noise_sd < 0.0 || self.class_sep < 0.0 {
            return Err(Error::InvalidInput("noise scales must be non-negative".into()));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction <= 1.0) {
            return Err(Error::InvalidInput("support fraction must lie in (0, 1]".into()));
        }
        for &(a, b) in &self.shared_subject_pairs {
            if a >= self.n_studies() || b >= self.n_studies() || a == b {
                return Err(Error::InvalidInput(format!("bad shared-subject pair ({a}, {b})")));
            }
        }
        Ok(())
    }

    fn pool(&self) -> usize {
        let max_c = self.studies.iter().map(|s| s.n_contrasts).max().unwrap_or(1);
        self.pool_size.unwrap_or(2 * max_c).max(max_c)
    }
}

/// The generating parameters, kept for recovery comparisons and as the
/// reference for Bayes-optimal accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Latent-to-feature matrix, `l_true x p`, rows non-negative with unit l1 norm.
    pub m_true: Array2<f64>,
    pub pool: Array2<f64>,
    pub study_ids: Vec<String>,
    /// Per study, the pool rows used as class means (`c x l_true`).
    pub class_means: Vec<Array2<f64>>,
    pub pool_index: Vec<Vec<usize>>,
    pub subject_noise_sd: f64,
    pub voxel_noise_sd: f64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn latent_components(p: usize, l: usize, support: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let width = ((support * p as f64).ceil() as usize).clamp(1, p);
    let mut m = Array2::zeros((l, p));
    for t in 0..l {
        // contiguous (wrapping) block, loosely mimicking a spatially compact network
        let start = rng.random_range(0..p);
        for o in 0..width {
            m[[t, (start + o) % p]] = rng.random_range(0.2..1.0);
        }
        let s: f64 = m.row(t).sum();
        m.row_mut(t).mapv_inplace(|v| v / s);
    }
    m
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<(Corpus, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p, l) = (cfg.p, cfg.l_true);
    let m_true = latent_components(p, l, cfg.support_fraction, &mut rng);
    let pool_size = cfg.pool();
    let pool = Array2::from_shape_fn((pool_size, l), |_| cfg.class_sep * gaussian(&mut rng));

    let mut subject_names: Vec<Vec<String>> = cfg
        .studies
        .iter()
        .enumerate()
        .map(|(j, s)| (0..s.n_subjects).map(|i| format!("st{j:02}-sub{i:03}")).collect())
        .collect();
    for &(a, b) in &cfg.shared_subject_pairs {
        let n = subject_names[a].len().min(subject_names[b].len());
        for i in 0..n {
            subject_names[b][i] = subject_names[a][i].clone();
        }
    }

    let mut offsets: HashMap<String, Array1<f64>> = HashMap::new();
    let mut studies = Vec::with_capacity(cfg.n_studies());
    let mut class_means = Vec::new();
    let mut pool_index = Vec::new();
    let mut study_ids = Vec::new();
    for (j, spec) in cfg.studies.iter().enumerate() {
        let c = spec.n_contrasts;
        let idx: Vec<usize> = sample(&mut rng, pool_size, c).into_vec();
        let means = pool.select(Axis(0), &idx);
        let id = format!("study{j:02}");
        let mut data = Array2::zeros((spec.n_subjects * c, p));
        let mut labels = Vec::with_capacity(spec.n_subjects * c);
        let mut subjects = Vec::with_capacity(spec.n_subjects * c);
        let mut row = 0;
        for name in &subject_names[j] {
            let offset = offsets
                .entry(name.clone())
                .or_insert_with(|| {
                    Array1::from_shape_fn(l, |_| cfg.subject_noise_sd * gaussian(&mut rng))
                })
                .clone();
            for y in 0..c {
                let latent = &means.row(y) + &offset;
                let mut x = latent.dot(&m_true);
                for v in x.iter_mut() {
                    *v += cfg.voxel_noise_sd * gaussian(&mut rng);
                }
                data.row_mut(row).assign(&x);
                labels.push(y);
                subjects.push(name.clone());
                row += 1;
            }
        }
        let contrasts = idx.iter().map(|i| format!("task{i:02}")).collect();
        studies.push(Study::new(id.clone(), data, labels, subjects, contrasts)?);
        class_means.push(means);
        pool_index.push(idx);
        study_ids.push(id);
    }
    let truth = GroundTruth {
        m_true,
        pool,
        study_ids,
        class_means,
        pool_index,
        subject_noise_sd: cfg.subject_noise_sd,
        voxel_noise_sd: cfg.voxel_noise_sd,
    };
    Ok((Corpus::new(studies)?, truth))
}

/// Unlabeled samples from the same components (non-negative latent codes),
/// standing in for the resting-state data the dictionaries are learned on.
pub fn generate_unlabeled(
    truth: &GroundTruth,
    n: usize,
    code_scale: f64,
    noise_sd: f64,
    seed: u64,
) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, p) = truth.m_true.dim();
    let codes = Array2::from_shape_fn((n, l), |_| code_scale * gaussian(&mut rng).abs());
    let mut x = codes.dot(&truth.m_true);
    for v in x.iter_mut() {
        *v += noise_sd * gaussian(&mut rng);
    }
    debug_assert_eq!(x.ncols(), p);
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesEstimate {
    pub accuracy: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Monte-Carlo estimate of the Bayes-optimal single-map accuracy on a new
/// subject of `study_id`.
///
/// Class-conditional maps are Gaussian with a shared covariance, and every
/// class difference lives in the row span of `M`, so the optimal rule only
/// depends on `w = M x`. With `G = M M^T`, `w | y ~ N(G mu_y, s^2 G G + v^2 G)`;
/// the estimate samples `w` directly and applies the linear discriminant.
pub fn bayes_reference(truth: &GroundTruth, study_id: &str, n_mc: usize, seed: u64) -> Result<BayesEstimate> {
    let j = truth
        .study_ids
        .iter()
        .position(|s| s == study_id)
        .ok_or_else(|| Error::UnknownStudy(study_id.to_string()))?;
    if n_mc == 0 {
        return Err(Error::InvalidInput("need at least one Monte-Carlo sample".into()));
    }
    let means = &truth.class_means[j];
    let c = means.nrows();
    let l = truth.m_true.nrows();
    let mut g = truth.m_true.dot(&truth.m_true.t());
    let jitter = 1e-12 * (0..l).map(|i| g[[i, i]]).fold(0.0, f64::max);
    for i in 0..l {
        g[[i, i]] += jitter;
    }
    let chol_g = linalg::cholesky_lower(g.view())?;
    let (s2, v2) = (truth.subject_noise_sd.powi(2), truth.voxel_noise_sd.powi(2));
    let class_w = means.dot(&g); // c x l, row y = G mu_y
    let noiseless = s2 == 0.0 && v2 == 0.0;

    // discriminant weights: row y = Sigma^{-1} G mu_y
    let (disc, offsets) = if noiseless {
        (class_w.clone(), Array1::zeros(c))
    } else {
        let sigma = s2 * g.dot(&g) + v2 * &g;
        let disc = linalg::spd_solve(sigma.view(), class_w.t())?.reversed_axes();
        let offs = Array1::from_shape_fn(c, |y| -0.5 * disc.row(y).dot(&class_w.row(y)));
        (disc, offs)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, v) = (truth.subject_noise_sd, truth.voxel_noise_sd);
    let mut correct = 0usize;
    let mut z = Array1::zeros(l);
    for i in 0..n_mc {
        let y = i % c;
        let mut latent = means.row(y).to_owned();
        for t in 0..l {
            latent[t] += s * gaussian(&mut rng);
        }
        for t in 0..l {
            z[t] = gaussian(&mut rng);
        }
        let w = g.dot(&latent) + v * chol_g.dot(&z);
        let pred = if noiseless {
            // nearest class mean in w space
            (0..c)
                .map(|k| {
                    let d = &w - &class_w.row(k);
                    d.dot(&d)
                })
                .enumerate()
                .fold((0, f64::INFINITY), |best, (k, d)| if d < best.1 { (k, d) } else { best })
                .0
        } else {
            (0..c)
                .map(|k| disc.row(k).dot(&w) + offsets[k])
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, d)| if d > best.1 { (k, d) } else { best })
                .0
        };
        if pred == y {
            correct += 1;
        }
    }
    let acc = correct as f64 / n_mc as f64;
    Ok(BayesEstimate {
        accuracy: acc,
        std_error: (acc * (1.0 - acc) / n_mc as f64).sqrt(),
        n_samples: n_mc,
    })
}
