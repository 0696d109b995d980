//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p msdecode-core --test acceptance`. The process exits
//! with status 1 when any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use msdecode::analysis::{self, MstonAtlas, Projector};
use msdecode::baseline::{self, DecoderInput};
use msdecode::checkpoint::{load_model, Model};
use msdecode::consensus::{self, ConsensusRidge};
use msdecode::corpus::{half_split, Corpus};
use msdecode::dictionary::{self, simplex_project, Dictionary};
use msdecode::experiment::{self, run_experiment, ExperimentConfig, Stage, BASELINE_METHOD, L2_BEST_METHOD};
use msdecode::lbfgs::SolverConfig;
use msdecode::linalg::{frobenius_sq, vstack};
use msdecode::metrics::{self, EvaluationReport};
use msdecode::synth::{self, GenConfig, StudySpec};
use msdecode::trainer::{
    self, alpha_from_rate, effective_sample_size, glorot_uniform, kl_grad_log_alpha, kl_scalar, minibatch_loss,
    study_probabilities, BatchNormState, ForwardMode, Head, MultiStudyModel, Penalties, StudySampler, TrainConfig,
};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

// ---------------------------------------------------------------- fixtures

const SUBJECTS: [usize; 8] = [8, 10, 12, 16, 9, 14, 11, 13];
const CONTRASTS: [usize; 8] = [4, 6, 8, 5, 7, 4, 6, 8];

fn transfer_gen(subjects: &[usize], seed: u64) -> GenConfig {
    GenConfig {
        p: 200,
        l_true: 6,
        studies: subjects
            .iter()
            .zip(CONTRASTS)
            .map(|(&n, c)| StudySpec {
                n_subjects: n,
                n_contrasts: c,
            })
            .collect(),
        subject_noise_sd: 0.5,
        voxel_noise_sd: 0.1,
        class_sep: 1.0,
        shared_subject_pairs: vec![],
        seed,
        pool_size: None,
        support_fraction: 0.25,
    }
}

const K: usize = 24;
const L: usize = 12;
const LR: f64 = 0.01;

fn pipeline_config(out: &Path, r: usize) -> ExperimentConfig {
    let studies: Vec<String> = SUBJECTS
        .iter()
        .zip(CONTRASTS)
        .map(|(n, c)| format!("{{ n_subjects = {n}, n_contrasts = {c} }}"))
        .collect();
    let g = transfer_gen(&SUBJECTS, 11);
    let text = format!(
        "seed = 1\nout = {out:?}\nn_splits = 20\nr = {r}\n\
         [gen]\np = {}\nl_true = {}\nsubject_noise_sd = {}\nvoxel_noise_sd = {}\nclass_sep = {}\nseed = {}\nstudies = [{}]\n\
         [dictionary]\nk = {K}\n\
         [train]\nl = {L}\nlr = {LR}\n",
        g.p,
        g.l_true,
        g.subject_noise_sd,
        g.voxel_noise_sd,
        g.class_sep,
        g.seed,
        studies.join(", "),
    );
    ExperimentConfig::from_toml_str(&text, out).expect("valid acceptance config")
}

fn toy_corpus(contrasts: &[usize], p: usize, seed: u64) -> Corpus {
    let cfg = GenConfig {
        p,
        l_true: 3,
        studies: contrasts
            .iter()
            .map(|&c| StudySpec {
                n_subjects: 4,
                n_contrasts: c,
            })
            .collect(),
        subject_noise_sd: 0.3,
        voxel_noise_sd: 0.3,
        class_sep: 1.0,
        shared_subject_pairs: vec![],
        seed,
        pool_size: None,
        support_fraction: 0.25,
    };
    synth::generate_corpus(&cfg).unwrap().0
}

fn random_simplex_rows(k: usize, p: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut d = Array2::from_shape_fn((k, p), |_| rng.random_range(0.0..1.0));
    for mut row in d.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    d
}

fn random_model(corpus: &Corpus, d: &Dictionary, l: usize, bn: bool, rng: &mut ChaCha8Rng) -> MultiStudyModel {
    let second = glorot_uniform(l, d.k(), rng) * 3.0;
    let heads = corpus
        .studies()
        .iter()
        .map(|s| Head {
            study_id: s.id().into(),
            contrast_names: s.contrast_names().to_vec(),
            u: glorot_uniform(s.n_contrasts(), l, rng),
            b: Array1::from_shape_fn(s.n_contrasts(), |_| rng.random_range(-0.5..0.5)),
            log_alpha: rng.random_range(-2.0..0.0),
        })
        .collect();
    let bn = bn.then(|| {
        let mut b = BatchNormState::new(l, 0.1, 1e-5);
        b.gamma = Array1::from_shape_fn(l, |_| rng.random_range(0.5..1.5));
        b.beta = Array1::from_shape_fn(l, |_| rng.random_range(-0.5..0.5));
        b.running_mean = Array1::from_shape_fn(l, |_| rng.random_range(-0.2..0.2));
        b.running_var = Array1::from_shape_fn(l, |_| rng.random_range(0.5..2.0));
        b
    });
    MultiStudyModel::new(d.clone(), second, heads, alpha_from_rate(0.25), bn).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// -------------------------------------------------------------- criterion 1

/// Five-point central difference of `f` over every coordinate of `x`.
fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    let mut at = |v: &mut Vec<f64>, i: usize, t: f64| {
        v[i] = x[i] + t;
        let y = f(v);
        v[i] = x[i];
        y
    };
    (0..x.len())
        .map(|i| {
            let (p1, m1) = (at(&mut v, i, h), at(&mut v, i, -h));
            let (p2, m2) = (at(&mut v, i, 2.0 * h), at(&mut v, i, -2.0 * h));
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

/// Parameter blocks of head `j`'s minibatch loss, as flat vectors.
fn flatten(m: &MultiStudyModel, j: usize) -> Vec<Vec<f64>> {
    let mut blocks = vec![
        m.second_layer.iter().copied().collect(),
        m.heads[j].u.iter().copied().collect(),
        m.heads[j].b.to_vec(),
        vec![m.heads[j].log_alpha],
    ];
    if let Some(bn) = &m.bn {
        blocks.push(bn.gamma.to_vec());
        blocks.push(bn.beta.to_vec());
    }
    blocks
}

fn set_block(m: &mut MultiStudyModel, j: usize, block: usize, v: &[f64]) {
    let assign = |dst: &mut dyn Iterator<Item = &mut f64>| {
        for (d, s) in dst.zip(v) {
            *d = *s;
        }
    };
    match block {
        0 => assign(&mut m.second_layer.iter_mut()),
        1 => assign(&mut m.heads[j].u.iter_mut()),
        2 => assign(&mut m.heads[j].b.iter_mut()),
        3 => m.heads[j].log_alpha = v[0],
        4 => assign(&mut m.bn.as_mut().unwrap().gamma.iter_mut()),
        _ => assign(&mut m.bn.as_mut().unwrap().beta.iter_mut()),
    }
}

/// Largest blockwise relative error between analytic and numerical gradients.
fn joint_gradient_error(mode: ForwardMode, bn: bool, pen: Penalties, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = toy_corpus(&[3, 4, 2], 12, seed);
    let d = Dictionary::new(random_simplex_rows(6, 12, &mut rng)).unwrap();
    let model = random_model(&corpus, &d, 3, bn, &mut rng);
    let j = rng.random_range(0..corpus.n_studies());
    let s = &corpus.studies()[j];
    let rows: Vec<usize> = (0..s.n_maps()).filter(|_| rng.random_bool(0.6)).collect();
    let rows = if rows.len() < 2 { vec![0, 1] } else { rows };
    let z = d.project(s.data()).unwrap().select(Axis(0), &rows);
    let y: Vec<usize> = rows.iter().map(|&r| s.labels()[r]).collect();
    let noise_seed = rng.random::<u64>();
    let loss = |m: &MultiStudyModel| {
        let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
        minibatch_loss(m, j, z.view(), &y, mode, &pen, &mut r).unwrap()
    };
    let out = loss(&model);
    let g = &out.grads;
    let mut analytic: Vec<Vec<f64>> = vec![
        g.second_layer.iter().copied().collect(),
        g.u.iter().copied().collect(),
        g.b.to_vec(),
        vec![g.log_alpha],
    ];
    if bn {
        analytic.push(g.gamma.as_ref().unwrap().to_vec());
        analytic.push(g.beta.as_ref().unwrap().to_vec());
    }
    let blocks = flatten(&model, j);
    let mut worst: f64 = 0.0;
    for (b, x) in blocks.iter().enumerate() {
        let noisy = matches!(mode, ForwardMode::TrainSample | ForwardMode::TrainLrt);
        if b == 3 && !noisy && pen.kl_weight == 0.0 {
            continue;
        }
        let numeric = central_diff(x, 1e-4, |v| {
            let mut m = model.clone();
            set_block(&mut m, j, b, v);
            loss(&m).loss
        });
        worst = worst.max(rel_err(&numeric, &analytic[b]));
    }
    worst
}

fn baseline_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, dim, c) = (15, 7, 4);
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let w = Array2::from_shape_fn((c, dim), |_| rng.random_range(-1.0..1.0));
    let b = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
    let lambda = rng.random_range(0.01..1.0);
    let (_, gw, gb) = baseline::objective(x.view(), &labels, w.view(), &b, lambda);
    let mut theta: Vec<f64> = w.iter().copied().collect();
    theta.extend(b.iter());
    let numeric = central_diff(&theta, 1e-4, |t| {
        let w = Array2::from_shape_vec((c, dim), t[..c * dim].to_vec()).unwrap();
        let b = Array1::from(t[c * dim..].to_vec());
        baseline::objective(x.view(), &labels, w.view(), &b, lambda).0
    });
    let mut analytic: Vec<f64> = gw.iter().copied().collect();
    analytic.extend(gb.iter());
    rel_err(&numeric, &analytic)
}

fn criterion_gradients() -> Outcome {
    let zero = Penalties {
        kl_weight: 0.0,
        l2_shared: 0.0,
        l2_head: 0.0,
    };
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    let worst = |f: &dyn Fn(u64) -> f64| (0..5).map(|s| f(s)).fold(0.0f64, f64::max);
    rows.push(("baseline nll+ridge".into(), worst(&|s| baseline_gradient_error(100 + s)), 1e-5));
    for (name, mode) in [
        ("no dropout", ForwardMode::TrainPlain),
        ("gaussian dropout", ForwardMode::TrainSample),
        ("variational (lrt)", ForwardMode::TrainLrt),
    ] {
        for bn in [false, true] {
            let e = worst(&|s| joint_gradient_error(mode, bn, zero, 200 + s));
            rows.push((format!("joint {name}{}", if bn { " + batch norm" } else { "" }), e, 1e-5));
        }
    }
    let l2 = Penalties {
        kl_weight: 0.0,
        l2_shared: 0.3,
        l2_head: 0.7,
    };
    rows.push(("l2-factored".into(), worst(&|s| joint_gradient_error(ForwardMode::TrainPlain, true, l2, 300 + s)), 1e-5));
    let kl = Penalties {
        kl_weight: 0.4,
        l2_shared: 0.0,
        l2_head: 0.0,
    };
    rows.push(("joint with kl term".into(), worst(&|s| joint_gradient_error(ForwardMode::TrainLrt, true, kl, 400 + s)), 1e-5));
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let kl_err = (0..5)
        .map(|_| {
            let u = rng.random_range(trainer::LOG_ALPHA_MIN..trainer::LOG_ALPHA_MAX);
            let numeric = central_diff(&[u], 1e-4, |v| kl_scalar(v[0]));
            rel_err(&numeric, &[kl_grad_log_alpha(u)])
        })
        .fold(0.0f64, f64::max);
    rows.push(("kl penalty".into(), kl_err, 1e-6));
    let failed: Vec<String> = rows
        .iter()
        .filter(|(_, e, tol)| !(e < tol))
        .map(|(n, e, tol)| format!("{n}: {e:.2e} >= {tol:e}"))
        .collect();
    let (worst_name, max) = rows
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|r| (r.0.clone(), r.1))
        .unwrap();
    for (n, e, _) in &rows {
        log_line(&format!("  {n}: {e:.2e}"));
    }
    check(
        failed.is_empty(),
        format!("{} objectives x 5 points, max relative error {max:.2e} ({worst_name})", rows.len()),
        failed.join("; "),
    )
}

fn log_line(s: &str) {
    if std::env::var_os("ACCEPTANCE_VERBOSE").is_some() {
        println!("{s}");
    }
}

// ------------------------------------------------------- criteria 2, 5, 10

struct PipelineRun {
    report: EvaluationReport,
    out: tempfile::TempDir,
    cfg: ExperimentConfig,
}

const PIPELINE: [Stage; 7] = [
    Stage::Gen,
    Stage::Dict,
    Stage::FitBaseline,
    Stage::Fit,
    Stage::FitL2,
    Stage::Consensus,
    Stage::Eval,
];

fn run_pipeline(threads: usize) -> PipelineRun {
    let out = tempfile::tempdir().unwrap();
    let cfg = pipeline_config(out.path(), 5);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let summary = pool.install(|| run_experiment(&cfg, &PIPELINE)).expect("pipeline runs");
    PipelineRun {
        report: summary.report.expect("eval ran"),
        out,
        cfg,
    }
}

fn gain(report: &EvaluationReport, method: &str) -> metrics::GainSummary {
    metrics::gain_summary(&report.scores(method), &report.scores(BASELINE_METHOD)).unwrap()
}

fn criterion_transfer(run: &PipelineRun) -> Outcome {
    let g = gain(&run.report, "consensus");
    check(
        g.mean > 0.0 && g.fraction_positive >= 0.6,
        format!(
            "consensus vs voxel over {} study x split pairs: mean gain {:+.4}, net increase {:.1}%",
            g.n,
            g.mean,
            100.0 * g.fraction_positive
        ),
        format!("mean gain {:+.4}, net increase {:.1}%", g.mean, 100.0 * g.fraction_positive),
    )
}

fn criterion_regularizer(run: &PipelineRun) -> Outcome {
    let drop = gain(&run.report, "multistudy");
    let cons = gain(&run.report, "consensus");
    let l2 = gain(&run.report, L2_BEST_METHOD);
    let per_lambda: Vec<String> = run
        .cfg
        .l2
        .grid
        .iter()
        .map(|&l| format!("{l:e}: {:+.4}", gain(&run.report, &experiment::l2_method(l)).mean))
        .collect();
    let text = format!(
        "mean gain dropout+rank {:+.4} (consensus {:+.4}) vs l2-factored best-on-test {:+.4} [{}]",
        drop.mean,
        cons.mean,
        l2.mean,
        per_lambda.join(", ")
    );
    check(drop.mean >= l2.mean, text.clone(), text)
}

fn criterion_determinism(a: &PipelineRun) -> Outcome {
    let b = run_pipeline(3);
    let mut diffs = Vec::new();
    for name in ["accuracy.csv", "balanced_accuracy.csv", "summary.txt"] {
        let fa = fs::read(a.out.path().join("report").join(name)).unwrap();
        let fb = fs::read(b.out.path().join("report").join(name)).unwrap();
        if fa != fb {
            diffs.push(name.to_string());
        }
    }
    // parallel vs serial ensemble on one split
    let corpus = msdecode::corpus::load_corpus(&a.out.path().join("corpus").join("manifest.json")).unwrap();
    let d = match load_model(&a.out.path().join("dictionary.ckpt")).unwrap().model {
        Model::Dictionary(d) => d,
        _ => unreachable!(),
    };
    let train = half_split(&corpus, 5, 0.5).unwrap().train;
    let cfg = TrainConfig {
        l: L,
        lr: LR,
        ..TrainConfig::default()
    };
    let serial = consensus::run_ensemble(&train, &d, None, &cfg, 5, 42, false).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let parallel = pool.install(|| consensus::run_ensemble(&train, &d, None, &cfg, 5, 42, true)).unwrap();
    let same_runs = serial.runs == parallel.runs;
    if !same_runs {
        diffs.push("parallel ensemble".into());
    }
    check(
        diffs.is_empty(),
        "reports byte-identical across two runs (1 vs 3 threads); parallel and serial ensembles identical".into(),
        format!("differences in {}", diffs.join(", ")),
    )
}

// -------------------------------------------------------------- criterion 3

fn criterion_small_study() -> Outcome {
    const SPLITS: usize = 10;
    const R: usize = 5;
    let sizes = [4usize, 8, 16];
    let mut subjects = SUBJECTS.to_vec();
    subjects[0] = 32;
    let gen = transfer_gen(&subjects, 23);
    let (corpus, truth) = synth::generate_corpus(&gen).unwrap();
    let unlabeled = synth::generate_unlabeled(&truth, 2000, 1.0, 0.002, 7);
    let (_, fit) =
        dictionary::select_dictionary_lambda(unlabeled.view(), K, &dictionary::default_lambda_grid(), 30, 3, 0.95).unwrap();
    let d = fit.dictionary;
    let target = corpus.studies()[0].id().to_string();
    let cfg = TrainConfig {
        l: L,
        lr: LR,
        ..TrainConfig::default()
    };
    let opt = SolverConfig::default();
    let mut gains = vec![0.0; sizes.len()];
    for s in 0..SPLITS {
        let split = half_split(&corpus, 1000 + s as u64, 0.5).unwrap();
        let test = split.test.study(&target).unwrap();
        let train_target = split.train.study(&target).unwrap();
        let mut pool: Vec<&str> = train_target.subjects();
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + s as u64);
        rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), &mut rng);
        for (i, &n) in sizes.iter().enumerate() {
            let keep: HashSet<&str> = pool[..n].iter().copied().collect();
            let small = train_target.select_subjects(&keep);
            let lambda = baseline::select_lambda(
                &small,
                &baseline::default_lambda_grid(),
                3,
                3000 + s as u64,
                DecoderInput::Voxels,
                &opt,
            )
            .unwrap();
            let voxel = baseline::fit_voxel_decoder(&small, lambda, &opt).unwrap();
            let acc_voxel = metrics::accuracy(&voxel.predict(test.data()).unwrap(), test.labels()).unwrap();
            let train = split.train.with_study(small).unwrap();
            let ens = consensus::run_ensemble(&train, &d, None, &cfg, R, 4000 + 100 * s as u64, false).unwrap();
            let model = consensus::build_consensus(&ens.runs, L, ConsensusRidge::Tuned, None).unwrap();
            let acc = metrics::accuracy(&model.predict(&target, test.data()).unwrap(), test.labels()).unwrap();
            gains[i] += (acc - acc_voxel) / SPLITS as f64;
        }
    }
    let text = format!(
        "mean gain on the target study by training subjects: {}",
        sizes
            .iter()
            .zip(&gains)
            .map(|(n, g)| format!("{n} -> {g:+.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    check(gains[0] >= gains[1] && gains[1] >= gains[2], format!("{text} ({SPLITS} splits each)"), text)
}

// -------------------------------------------------------------- criterion 4

fn criterion_no_transfer() -> Outcome {
    let corpus = toy_corpus(&[4, 3], 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = Dictionary::new(random_simplex_rows(10, 16, &mut rng)).unwrap();
    let opt = SolverConfig {
        max_iter: 200,
        ..SolverConfig::default()
    };
    let report = trainer::verify_no_transfer_construction(&corpus, &d, 7, 0.6, &opt).unwrap();
    check(
        report.passed && report.relative_error < 1e-6,
        format!("relative objective gap {:.2e}", report.relative_error),
        format!("relative objective gap {:.2e}", report.relative_error),
    )
}

// -------------------------------------------------------------- criterion 6

fn feasible(a: &Array2<f64>) -> bool {
    a.rows()
        .into_iter()
        .all(|r| r.iter().all(|&v| v >= 0.0) && r.sum() <= 1.0 + 1e-9)
}

fn monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0))
}

fn criterion_nmf() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut problems = Vec::new();

    for _ in 0..200 {
        let v = Array1::from_shape_fn(rng.random_range(1..20), |_| rng.random_range(-3.0..3.0));
        let u = simplex_project(v.view());
        if !(u.iter().all(|&x| x >= 0.0) && u.sum() <= 1.0 + 1e-9) {
            problems.push("simplex_project output infeasible".to_string());
            break;
        }
    }

    let x = Array2::from_shape_fn((40, 30), |_| rng.random_range(0.0..1.0));
    for epochs in 1..=8 {
        let fit = dictionary::fit_sparse_nmf(x.view(), 5, 0.1, epochs, 9).unwrap();
        if !feasible(&fit.dictionary.atoms().to_owned()) {
            problems.push(format!("dictionary infeasible after epoch {epochs}"));
        }
    }
    for seed in 0..5 {
        let x = Array2::from_shape_fn((30, 20), |_| rng.random_range(-1.0..2.0));
        let fit = dictionary::fit_sparse_nmf(x.view(), 4, 0.05, 40, seed).unwrap();
        if !monotone(&fit.objective_trace) {
            problems.push(format!("nmf trace not monotone (seed {seed})"));
        }
    }
    let mask: Vec<bool> = (0..30).map(|i| i < 20).collect();
    let fit = dictionary::fit_sparse_nmf(x.view(), 6, 0.1, 10, 1).unwrap();
    if let Ok((r, _)) = dictionary::restrict_components(&fit.dictionary, &mask, 0.5) {
        if !feasible(&r.atoms().to_owned()) {
            problems.push("restricted dictionary infeasible".into());
        }
    }

    // rank-one recovery
    let lambda = 1e-3;
    let mut d0 = Array1::from_shape_fn(25, |_| rng.random_range(0.0..1.0));
    d0 /= d0.sum();
    let a = Array1::from_shape_fn(30, |_| rng.random_range(0.5..2.0));
    let x1 = a.view().insert_axis(Axis(1)).dot(&d0.view().insert_axis(Axis(0)));
    let fit = dictionary::fit_sparse_nmf(x1.view(), 1, lambda, 200, 0).unwrap();
    let final_obj = *fit.objective_trace.last().unwrap();
    let bound = lambda * a.dot(&a) + 1e-6 * frobenius_sq(x1.view());
    if final_obj > bound {
        problems.push(format!("rank-one objective {final_obj:.3e} > {bound:.3e}"));
    }

    // consensus on stacked copies
    let l0 = random_simplex_rows(4, 12, &mut rng);
    let stack = vstack(&vec![l0.view(); 6]).unwrap();
    let cf = consensus::consensus_nmf(stack.view(), 4, 1e-6, None).unwrap();
    let rel = frobenius_sq((&stack - &cf.codes.dot(&cf.l_bar)).view()).sqrt() / frobenius_sq(stack.view()).sqrt();
    if rel >= 1e-3 {
        problems.push(format!("consensus reconstruction {rel:.2e}"));
    }
    if !feasible(&cf.l_bar) || !monotone(&cf.objective_trace) {
        problems.push("consensus infeasible or non-monotone".into());
    }
    let random_stack = Array2::from_shape_fn((20, 12), |_| rng.random_range(-1.0..1.0));
    for lambda in [1e-4, 1e-2, 1.0] {
        let cf = consensus::consensus_nmf(random_stack.view(), 3, lambda, None).unwrap();
        if !feasible(&cf.l_bar) || !monotone(&cf.objective_trace) {
            problems.push(format!("consensus infeasible or non-monotone at ridge {lambda:e}"));
        }
    }
    check(
        problems.is_empty(),
        format!("feasibility, monotone traces, rank-one bound ({final_obj:.2e} <= {bound:.2e}), stacked-copies error {rel:.1e}"),
        problems.join("; "),
    )
}

// -------------------------------------------------------------- criterion 7

fn confusion_oracle(pred: &[usize], truth: &[usize], c: usize, y: usize) -> f64 {
    let mut m = vec![vec![0usize; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    let row: usize = m[y].iter().sum();
    let col: usize = (0..c).map(|t| m[t][y]).sum();
    let total: usize = m.iter().flatten().sum();
    let tp = m[y][y];
    let negatives = total - row;
    let sens = tp as f64 / row as f64;
    let specificity = if negatives == 0 {
        1.0
    } else {
        (negatives - (col - tp)) as f64 / negatives as f64
    };
    0.5 * (sens + specificity)
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = rng.random_range(2..8);
        let n = rng.random_range(1..60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y = truth[rng.random_range(0..n)];
        if metrics::balanced_accuracy(&pred, &truth, y).unwrap() != confusion_oracle(&pred, &truth, c, y) {
            mismatches += 1;
        }
    }
    let trials = 20_000;
    let vals: Vec<f64> = (0..trials)
        .map(|_| {
            let c = rng.random_range(2..10);
            let truth: Vec<usize> = (0..50).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
            let pred: Vec<usize> = (0..50).map(|_| rng.random_range(0..c)).collect();
            metrics::balanced_accuracy(&pred, &truth, rng.random_range(0..c)).unwrap()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
    let sigma = sd / (trials as f64).sqrt();
    let chance_ok = (mean - 0.5).abs() <= 3.0 * sigma;

    let mut quantile_bad = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for q in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let pos = q * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            let oracle = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
            if metrics::quantile_sorted(&sorted, q) != oracle {
                quantile_bad += 1;
            }
        }
        let s = metrics::summarize(v.clone()).unwrap();
        let median_oracle = {
            let pos = 0.5 * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        };
        if s.median != median_oracle {
            quantile_bad += 1;
        }
    }
    let text = format!(
        "{mismatches} confusion-oracle mismatches / 1000; chance level {mean:.4} +- {:.4} (3 sigma); {quantile_bad} quantile mismatches",
        3.0 * sigma
    );
    check(mismatches == 0 && chance_ok && quantile_bad == 0, text.clone(), text)
}

// -------------------------------------------------------------- criterion 8

fn criterion_equivalence(run: &PipelineRun) -> Outcome {
    let out = run.out.path();
    let single = match load_model(&out.join("fit/split_000/run_00.ckpt")).unwrap().model {
        Model::MultiStudy(r) => r.model,
        _ => unreachable!(),
    };
    let cons = match load_model(&out.join("consensus/split_000.ckpt")).unwrap().model {
        Model::Consensus(c) => c,
        _ => unreachable!(),
    };
    let corpus = msdecode::corpus::load_corpus(&out.join("corpus/manifest.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let atlas_single = analysis::classification_maps(&single);
    let atlas_cons = analysis::classification_maps(&cons);
    let mut mismatches = 0;
    for i in 0..100 {
        let study = &corpus.studies()[i % corpus.n_studies()];
        let row = study.data().row(rng.random_range(0..study.n_maps())).to_owned();
        let x = (&row + &Array1::from_shape_fn(row.len(), |_| rng.random_range(-0.1..0.1))).insert_axis(Axis(0));
        if single.predict(study.id(), x.view()).unwrap() != atlas_single.predict(study.id(), x.view()).unwrap() {
            mismatches += 1;
        }
        if cons.predict(study.id(), x.view()).unwrap() != atlas_cons.predict(study.id(), x.view()).unwrap() {
            mismatches += 1;
        }
    }
    let mston = MstonAtlas::from_consensus(&cons).unwrap();
    let proj = Projector::new(&mston).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Array1::from_shape_fn(mston.m.ncols(), |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(mston.m.ncols(), |_| rng.random_range(-1.0..1.0));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let px = proj.project(x.view());
        let ppx = proj.project(px.view());
        let idem = (&ppx - &px).dot(&(&ppx - &px)).sqrt() / x.dot(&x).sqrt();
        let combo = &x * a + &y * b;
        let lin = &proj.project(combo.view()) - &(&px * a + &proj.project(y.view()) * b);
        let lin = lin.dot(&lin).sqrt() / combo.dot(&combo).sqrt();
        worst = worst.max(idem).max(lin);
    }
    let text = format!("{mismatches} prediction mismatches over 2 x 100 inputs; projection error {worst:.1e}");
    check(mismatches == 0 && worst <= 1e-9, text.clone(), text)
}

// -------------------------------------------------------------- criterion 9

fn criterion_weighting() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    for _ in 0..100 {
        let sizes: Vec<usize> = (0..rng.random_range(1..10)).map(|_| rng.random_range(1..2000)).collect();
        let total: f64 = sizes.iter().sum::<usize>() as f64;
        let beta = rng.random_range(0.0..1.0);
        let ess = effective_sample_size(&sizes, beta).unwrap();
        if ((ess.iter().sum::<f64>() - total) / total).abs() > 1e-9 {
            problems.push("sum not preserved".to_string());
        }
        let e0 = effective_sample_size(&sizes, 0.0).unwrap();
        let e1 = effective_sample_size(&sizes, 1.0).unwrap();
        let s = sizes.len() as f64;
        for (j, &n) in sizes.iter().enumerate() {
            if ((e0[j] - total / s) / (total / s)).abs() > 1e-9 || ((e1[j] - n as f64) / n as f64).abs() > 1e-9 {
                problems.push("endpoint mismatch".to_string());
            }
        }
    }
    let draws = 1_000_000;
    let mut worst_z: f64 = 0.0;
    for (sizes, beta) in [
        (vec![16usize, 787], 0.6),
        (vec![16, 787, 120, 45], 0.6),
        (vec![16, 787, 120, 45], 0.0),
        (vec![16, 787, 120, 45], 1.0),
    ] {
        let pis = study_probabilities(&sizes, beta).unwrap();
        let sampler = StudySampler::new(&sizes, beta).unwrap();
        let mut counts = vec![0usize; sizes.len()];
        for _ in 0..draws {
            counts[sampler.sample(&mut rng)] += 1;
        }
        for (j, &cnt) in counts.iter().enumerate() {
            let expected = draws as f64 * pis[j];
            let sd = (draws as f64 * pis[j] * (1.0 - pis[j])).sqrt();
            let z = (cnt as f64 - expected).abs() / sd;
            worst_z = worst_z.max(z);
        }
    }
    if worst_z > 3.0 {
        problems.push(format!("frequency off by {worst_z:.2} sigma"));
    }
    problems.dedup();
    check(
        problems.is_empty(),
        format!("identities exact to 1e-9; largest frequency deviation {worst_z:.2} sigma over 10^6 draws"),
        problems.join("; "),
    )
}

// ------------------------------------------------------------- criterion 11

fn criterion_span(run: &PipelineRun) -> Outcome {
    let out = run.out.path();
    let corpus = msdecode::corpus::load_corpus(&out.join("corpus/manifest.json")).unwrap();
    let d = match load_model(&out.join("dictionary.ckpt")).unwrap().model {
        Model::Dictionary(d) => d,
        _ => unreachable!(),
    };
    let cfg = TrainConfig {
        l: L,
        lr: LR,
        ..TrainConfig::default()
    };
    let ens = consensus::run_ensemble(&corpus, &d, None, &cfg, 10, 77, false).unwrap();
    let ls: Vec<Array2<f64>> = ens.runs.iter().map(|r| r.model.second_layer.clone()).collect();
    let ratio = consensus::span_stability(&ls, L).unwrap();

    // random orthonormal-row baseline with the same shapes
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut baseline = Vec::new();
    for _ in 0..50 {
        let mats: Vec<Array2<f64>> = (0..10)
            .map(|_| {
                let g = Array2::from_shape_fn((K, L), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
                let q = msdecode::linalg::to_nalgebra(g.view()).qr().q();
                msdecode::linalg::from_nalgebra(&q).reversed_axes()
            })
            .collect();
        baseline.push(consensus::span_stability(&mats, L).unwrap());
    }
    let threshold = baseline.iter().cloned().fold(f64::MIN, f64::max);
    let mean = baseline.iter().sum::<f64>() / baseline.len() as f64;
    let text = format!("10-run captured variance {ratio:.4} vs random orthonormal baseline mean {mean:.4}, max {threshold:.4}");
    check(ratio > threshold, text.clone(), text)
}

// ------------------------------------------------------------------- main

/// `ACCEPTANCE_ONLY=1,7` restricts the run to the listed criteria.
fn selected() -> Option<HashSet<usize>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let wanted = |id: usize| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut results: BTreeMap<usize, (&str, Outcome, f64)> = BTreeMap::new();
    let mut timed = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let line = match &r {
            Ok(m) => format!("criterion {id:>2} [{name}]: PASS ({m}) [{secs:.1}s]"),
            Err(m) => format!("criterion {id:>2} [{name}]: FAIL ({m}) [{secs:.1}s]"),
        };
        println!("{line}");
        results.insert(id, (name, r, secs));
    };
    timed(1, "gradient correctness", &criterion_gradients);
    timed(4, "no-transfer construction", &criterion_no_transfer);
    timed(6, "nmf suites", &criterion_nmf);
    timed(7, "metric oracles", &criterion_metrics);
    timed(9, "study weighting", &criterion_weighting);

    if [2, 5, 8, 10, 11].into_iter().any(wanted) {
        let t = Instant::now();
        let run = run_pipeline(1);
        println!("(pipeline on the synthetic corpus: {:.1}s)", t.elapsed().as_secs_f64());
        timed(2, "transfer gain", &|| criterion_transfer(&run));
        timed(5, "regularizer ordering", &|| criterion_regularizer(&run));
        timed(8, "equivalence and idempotence", &|| criterion_equivalence(&run));
        timed(10, "determinism", &|| criterion_determinism(&run));
        timed(11, "span stability", &|| criterion_span(&run));
    }
    timed(3, "small-study amplification", &criterion_small_study);

    let failed: Vec<usize> = results.iter().filter(|(_, v)| v.1.is_err()).map(|(k, _)| *k).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
