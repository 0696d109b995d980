//! Stochastic joint training loop.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::forward::{minibatch_loss, ForwardMode, Penalties};
use super::sampling::{study_probabilities, BatchCursor, StudySampler};
use super::variational::clip_log_alpha;
use super::{alpha_from_rate, BatchNormState, DropoutMode, Head, MultiStudyModel, TrainConfig};
use crate::corpus::Corpus;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub model: MultiStudyModel,
    /// Minibatch loss at every step.
    pub loss_trace: Vec<f64>,
    pub seed: u64,
    pub samples_seen: usize,
}

/// Uniform entries in `+-sqrt(6 / (rows + cols))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Joint training without weight decay (`cfg.lambda_l2` is ignored).
pub fn fit_multistudy(corpus: &Corpus, d: &Dictionary, l_init: Option<&Array2<f64>>, cfg: &TrainConfig) -> Result<TrainedRun> {
    let cfg = TrainConfig {
        lambda_l2: 0.0,
        ..cfg.clone()
    };
    train(corpus, d, l_init, &cfg)
}

/// Joint training with `(lambda / 2)(||L||^2 + sum_j ||U^j||^2)` added to the
/// objective. Each head's decay is divided by its sampling probability so the
/// minibatch estimate stays unbiased.
pub fn fit_l2_factored(corpus: &Corpus, d: &Dictionary, l_init: Option<&Array2<f64>>, cfg: &TrainConfig) -> Result<TrainedRun> {
    train(corpus, d, l_init, cfg)
}

struct HeadOptim {
    u: AdamState,
    b: AdamState,
    log_alpha: AdamState,
}

fn train(corpus: &Corpus, d: &Dictionary, l_init: Option<&Array2<f64>>, cfg: &TrainConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    if corpus.p() != d.p() {
        return Err(Error::shape("dictionary width", corpus.p(), d.p()));
    }
    let (l, k) = (cfg.l, d.k());
    if l > k {
        return Err(Error::Config(format!("latent size l = {l} exceeds dictionary size k = {k}")));
    }
    let loadings: Vec<Array2<f64>> = corpus.studies().iter().map(|s| d.project(s.data())).collect::<Result<_>>()?;
    let sizes: Vec<usize> = corpus.studies().iter().map(|s| s.n_maps()).collect();
    let pis = study_probabilities(&sizes, cfg.beta)?;
    let sampler = StudySampler::new(&sizes, cfg.beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let second_layer = match l_init {
        Some(init) => {
            if init.dim() != (l, k) {
                return Err(Error::ShapeMismatch {
                    what: "initial second layer".into(),
                    expected: format!("{l} x {k}"),
                    found: format!("{} x {}", init.nrows(), init.ncols()),
                });
            }
            init.clone()
        }
        None => glorot_uniform(l, k, &mut rng),
    };
    let log_alpha0 = clip_log_alpha(alpha_from_rate(cfg.p_head_init).ln());
    let heads: Vec<Head> = corpus
        .studies()
        .iter()
        .map(|s| Head {
            study_id: s.id().to_string(),
            contrast_names: s.contrast_names().to_vec(),
            u: glorot_uniform(s.n_contrasts(), l, &mut rng),
            b: Array1::zeros(s.n_contrasts()),
            log_alpha: log_alpha0,
        })
        .collect();
    let bn = cfg.batch_norm.then(|| BatchNormState::new(l, cfg.bn_momentum, cfg.bn_epsilon));
    let mut model = MultiStudyModel::new(d.clone(), second_layer, heads, alpha_from_rate(cfg.p_in), bn)?;

    let mode = match cfg.dropout_mode {
        DropoutMode::None => ForwardMode::TrainPlain,
        DropoutMode::GaussianFixed => ForwardMode::TrainSample,
        DropoutMode::Variational => ForwardMode::TrainLrt,
    };
    let learn_alpha = cfg.dropout_mode == DropoutMode::Variational;
    let penalties: Vec<Penalties> = sizes
        .iter()
        .zip(&pis)
        .map(|(&n, &pi)| Penalties {
            kl_weight: if learn_alpha { l as f64 / n as f64 } else { 0.0 },
            l2_shared: cfg.lambda_l2,
            l2_head: cfg.lambda_l2 / pi,
        })
        .collect();

    let mut cursors: Vec<BatchCursor> = sizes.iter().map(|&n| BatchCursor::new(n, &mut rng)).collect();
    let hp = cfg.adam();
    let mut opt_l = AdamState::new(l * k);
    let mut opt_gamma = AdamState::new(l);
    let mut opt_beta = AdamState::new(l);
    let mut opt_heads: Vec<HeadOptim> = model
        .heads
        .iter()
        .map(|h| HeadOptim {
            u: AdamState::new(h.u.len()),
            b: AdamState::new(h.b.len()),
            log_alpha: AdamState::new(1),
        })
        .collect();

    let budget = cfg.max_samples_seen.unwrap_or(200 * corpus.total_maps());
    let mut seen = 0usize;
    let mut trace = Vec::with_capacity(budget / cfg.batch_size + 1);
    while seen < budget {
        let j = sampler.sample(&mut rng);
        let rows = cursors[j].next_batch(cfg.batch_size, &mut rng);
        let z = loadings[j].select(Axis(0), &rows);
        let study = &corpus.studies()[j];
        let labels: Vec<usize> = rows.iter().map(|&r| study.labels()[r]).collect();
        let out = minibatch_loss(&model, j, z.view(), &labels, mode, &penalties[j], &mut rng)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                stage: format!("joint training (study {})", study.id()),
                iteration: trace.len(),
                value: out.loss,
            });
        }
        trace.push(out.loss);

        let g = out.grads;
        opt_l.step(slice_mut(&mut model.second_layer), &flat(&g.second_layer), &hp);
        if let (Some(bn), Some(dg), Some(db)) = (model.bn.as_mut(), g.gamma.as_ref(), g.beta.as_ref()) {
            opt_gamma.step(bn.gamma.as_slice_mut().expect("contiguous"), db_slice(dg), &hp);
            opt_beta.step(bn.beta.as_slice_mut().expect("contiguous"), db_slice(db), &hp);
            if let Some((mean, var)) = &out.batch_stats {
                bn.update_running(mean, var, rows.len());
            }
        }
        let head = &mut model.heads[j];
        let oh = &mut opt_heads[j];
        oh.u.step(slice_mut(&mut head.u), &flat(&g.u), &hp);
        oh.b.step(head.b.as_slice_mut().expect("contiguous"), db_slice(&g.b), &hp);
        if learn_alpha {
            let mut la = [head.log_alpha];
            oh.log_alpha.step(&mut la, &[g.log_alpha], &hp);
            head.log_alpha = clip_log_alpha(la[0]);
        }
        seen += rows.len();
    }
    if !model.is_finite() {
        return Err(Error::Diverged {
            stage: "joint training".into(),
            iteration: trace.len(),
            value: f64::NAN,
        });
    }
    Ok(TrainedRun {
        model,
        loss_trace: trace,
        seed: cfg.seed,
        samples_seen: seen,
    })
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn db_slice(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}
