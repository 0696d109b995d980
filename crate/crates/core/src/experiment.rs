//! Batch experiment orchestration: configuration, the staged pipeline
//! (generate, dictionary, fits, consensus, evaluation, analysis) and the
//! artifacts each stage leaves on disk.
//!
//! Every stage reads its inputs from the output directory, so stages can be
//! re-run one at a time. Seeds for splits and runs are derived from the
//! experiment seed, and all reductions run in a fixed order, so the thread
//! count changes wall time only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, MstonAtlas};
use crate::baseline::{self, DecoderInput};
use crate::checkpoint::{self, BaselineSet, Checkpoint, Model, Provenance};
use crate::consensus::{self, ConsensusRidge};
use crate::corpus::{self, half_split, Corpus};
use crate::dictionary::{self, Dictionary};
use crate::error::{Error, Result};
use crate::lbfgs::SolverConfig;
use crate::matfile;
use crate::metrics::EvaluationReport;
use crate::synth::{self, GenConfig};
use crate::trainer::{self, TrainConfig, TrainedRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Gen,
    Dict,
    FitBaseline,
    Fit,
    FitL2,
    Consensus,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Gen,
        Stage::Dict,
        Stage::FitBaseline,
        Stage::Fit,
        Stage::FitL2,
        Stage::Consensus,
        Stage::Eval,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Dict => "dict",
            Stage::FitBaseline => "fit-baseline",
            Stage::Fit => "fit",
            Stage::FitL2 => "fit-l2",
            Stage::Consensus => "consensus",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

/// Unlabeled samples for dictionary learning: read from `path`, or drawn
/// from the generator's components when a `gen` section is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlabeledConfig {
    pub path: Option<PathBuf>,
    pub n_samples: usize,
    pub code_scale: f64,
    pub noise_sd: f64,
}

impl Default for UnlabeledConfig {
    fn default() -> Self {
        UnlabeledConfig {
            path: None,
            n_samples: 2000,
            code_scale: 1.0,
            noise_sd: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    /// Precomputed atoms (`k x p`, matrix container or CSV); skips learning.
    pub path: Option<PathBuf>,
    pub k: usize,
    /// Code ridge; selected on `lambda_grid` by coverage when absent.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub min_coverage: f64,
    pub epochs: usize,
    /// Also learn an `l`-component dictionary and start the second layer
    /// from its least-squares coordinates.
    pub init_second_layer: bool,
    /// 0/1 feature mask (matrix container or CSV, `p` entries); components
    /// mostly outside it are dropped, so the final `k` can be smaller.
    pub mask: Option<PathBuf>,
    /// Minimum in-mask share of a component's l1 mass.
    pub mask_threshold: f64,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig {
            path: None,
            k: 32,
            lambda: None,
            lambda_grid: dictionary::default_lambda_grid(),
            min_coverage: 0.95,
            epochs: 30,
            init_second_layer: false,
            mask: None,
            mask_threshold: dictionary::DEFAULT_MASK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Fixed ridge; otherwise chosen per study on `grid` by inner half-splits
    /// of the training subjects.
    pub lambda: Option<f64>,
    pub grid: Vec<f64>,
    pub select_splits: usize,
    /// Also fit decoders on dictionary loadings.
    pub reduced: bool,
    pub solver: SolverConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lambda: None,
            grid: baseline::default_lambda_grid(),
            select_splits: 3,
            reduced: false,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2Config {
    pub grid: Vec<f64>,
    /// Latent size of the weight-decay variant; the dictionary size when absent.
    pub l: Option<usize>,
}

impl Default for L2Config {
    fn default() -> Self {
        L2Config {
            grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            l: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    /// Fixed ridge; tuned toward the target sparsity when absent.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub split: usize,
    pub top: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            split: 0,
            top: analysis::DEFAULT_TOP,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_splits() -> usize {
    20
}

fn default_fraction() -> f64 {
    0.5
}

fn default_r() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Corpus manifest; the generated corpus under `out` is used when absent.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    /// Ensemble size.
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default)]
    pub gen: Option<GenConfig>,
    #[serde(default)]
    pub unlabeled: UnlabeledConfig,
    #[serde(default)]
    pub dictionary: DictionaryConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub l2: L2Config,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        for p in [&mut self.corpus, &mut self.unlabeled.path, &mut self.dictionary.path, &mut self.dictionary.mask].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.train.validate()?;
        if self.n_splits == 0 {
            return bad("n_splits must be at least 1".into());
        }
        if self.r == 0 {
            return bad("r must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction = {} must lie in (0, 1)", self.train_fraction));
        }
        if self.gen.is_some() == self.corpus.is_some() {
            return bad("exactly one of `corpus` and a `[gen]` section must be given".into());
        }
        if self.dictionary.path.is_none() {
            if self.dictionary.k == 0 {
                return bad("dictionary.k must be at least 1".into());
            }
            if self.train.l > self.dictionary.k {
                return bad(format!(
                    "train.l = {} exceeds dictionary.k = {}",
                    self.train.l, self.dictionary.k
                ));
            }
            if self.dictionary.lambda.is_none() && self.dictionary.lambda_grid.is_empty() {
                return bad("dictionary.lambda_grid is empty".into());
            }
            if self.unlabeled.path.is_none() && self.gen.is_none() {
                return bad("dictionary learning needs unlabeled.path or a [gen] section".into());
            }
        }
        if !(0.0..=1.0).contains(&self.dictionary.mask_threshold) {
            return bad(format!("dictionary.mask_threshold = {} must lie in [0, 1]", self.dictionary.mask_threshold));
        }
        if self.baseline.lambda.is_none() && (self.baseline.grid.is_empty() || self.baseline.select_splits == 0) {
            return bad("baseline lambda selection needs a grid and at least one split".into());
        }
        if self.l2.grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return bad("l2.grid values must be finite and non-negative".into());
        }
        if self.analysis.split >= self.n_splits {
            return bad(format!(
                "analysis.split = {} but only {} splits",
                self.analysis.split, self.n_splits
            ));
        }
        Ok(())
    }

    /// Hash of everything that can change results (the output directory is
    /// excluded so two runs in different places compare equal).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        checkpoint::config_hash(&c)
    }
}

/// Sub-seed for `(tag, index)`, independent of thread schedule.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Paths of the artifacts under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn unlabeled(&self) -> PathBuf {
        self.root.join("unlabeled.ckpt")
    }
    /// Generating components `M_true`, as a bare matrix container.
    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.cogmat")
    }
    pub fn dictionary(&self) -> PathBuf {
        self.root.join("dictionary.ckpt")
    }
    pub fn coarse_dictionary(&self) -> PathBuf {
        self.root.join("dictionary_coarse.ckpt")
    }
    pub fn baseline(&self, split: usize) -> PathBuf {
        self.root.join("baseline").join(format!("split_{split:03}.ckpt"))
    }
    pub fn reduced(&self, split: usize) -> PathBuf {
        self.root.join("baseline").join(format!("reduced_split_{split:03}.ckpt"))
    }
    pub fn run(&self, split: usize, run: usize) -> PathBuf {
        self.root.join("fit").join(format!("split_{split:03}")).join(format!("run_{run:02}.ckpt"))
    }
    pub fn l2(&self, split: usize, index: usize) -> PathBuf {
        self.root.join("fit_l2").join(format!("split_{split:03}")).join(format!("lambda_{index}.ckpt"))
    }
    pub fn consensus(&self, split: usize) -> PathBuf {
        self.root.join("consensus").join(format!("split_{split:03}.ckpt"))
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    /// Relative path to SHA-256 of the file.
    pub artifacts: BTreeMap<String, String>,
}

/// Seeds and hashes needed to re-run and check every stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub report: Option<EvaluationReport>,
    pub artifacts: Vec<PathBuf>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    layout: Layout,
    provenance: Provenance,
    written: Vec<PathBuf>,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

impl Ctx<'_> {
    fn save(&mut self, path: PathBuf, model: Model) -> Result<()> {
        ensure_parent(&path)?;
        checkpoint::save_model(
            &path,
            &Checkpoint {
                provenance: self.provenance.clone(),
                model,
            },
        )?;
        self.written.push(path);
        Ok(())
    }

    fn write_text(&mut self, path: PathBuf, body: &str) -> Result<()> {
        ensure_parent(&path)?;
        let mut text = format!(
            "# config_hash={} seed={}\n",
            self.provenance.config_hash, self.provenance.seed
        );
        text.push_str(body);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn load(&self, path: &Path) -> Result<Model> {
        let ck = checkpoint::load_model(path)?;
        if ck.provenance.config_hash != self.provenance.config_hash {
            warn!("{} was produced by a different configuration", path.display());
        }
        Ok(ck.model)
    }

    fn corpus(&self) -> Result<Corpus> {
        match &self.cfg.corpus {
            Some(p) => corpus::load_corpus(p),
            None => corpus::load_corpus(&self.layout.corpus_dir().join("manifest.json")),
        }
    }

    fn dictionary(&self) -> Result<Dictionary> {
        match self.load(&self.layout.dictionary())? {
            Model::Dictionary(d) => Ok(d),
            other => Err(wrong_kind(&self.layout.dictionary(), "dictionary", &other)),
        }
    }

    fn l_init(&self, d: &Dictionary) -> Result<Option<Array2<f64>>> {
        if !self.cfg.dictionary.init_second_layer {
            return Ok(None);
        }
        match self.load(&self.layout.coarse_dictionary())? {
            Model::Dictionary(coarse) => Ok(Some(dictionary::init_second_layer(&coarse, d)?)),
            other => Err(wrong_kind(&self.layout.coarse_dictionary(), "dictionary", &other)),
        }
    }

    fn split(&self, corpus: &Corpus, s: usize) -> Result<corpus::SplitPair> {
        half_split(corpus, derive_seed(self.cfg.seed, "split", s as u64), self.cfg.train_fraction)
    }
}

fn wrong_kind(path: &Path, expected: &str, found: &Model) -> Error {
    Error::Format(format!(
        "{}: expected a {expected} checkpoint, found {}",
        path.display(),
        found.kind()
    ))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Runs `stages` in order and returns the evaluation report when `eval` ran.
pub fn run_experiment(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<RunSummary> {
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg,
        layout: Layout { root: cfg.out.clone() },
        provenance: Provenance {
            seed: cfg.seed,
            config_hash: cfg.hash(),
        },
        written: Vec::new(),
    };
    fs::create_dir_all(&ctx.layout.root).map_err(|e| Error::io(&ctx.layout.root, e))?;
    let mut summary = RunSummary::default();
    for &stage in stages {
        info!("stage {}", stage.name());
        let start = ctx.written.len();
        let report = run_stage(&mut ctx, stage).map_err(|e| e.in_stage(stage.name()))?;
        if report.is_some() {
            summary.report = report;
        }
        record_stage(&ctx, stage, &ctx.written[start..])?;
    }
    summary.artifacts = ctx.written;
    Ok(summary)
}

fn record_stage(ctx: &Ctx<'_>, stage: Stage, files: &[PathBuf]) -> Result<()> {
    let path = ctx.layout.manifest();
    let mut manifest: RunManifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        Err(_) => RunManifest::default(),
    };
    if manifest.config_hash != ctx.provenance.config_hash {
        manifest.stages.clear();
    }
    manifest.config_hash = ctx.provenance.config_hash.clone();
    manifest.seed = ctx.cfg.seed;
    let mut rec = StageRecord {
        seed: derive_seed(ctx.cfg.seed, stage.name(), 0),
        artifacts: BTreeMap::new(),
    };
    for f in files {
        let rel = f.strip_prefix(&ctx.layout.root).unwrap_or(f);
        rec.artifacts.insert(rel.display().to_string(), file_sha256(f)?);
    }
    manifest.stages.insert(stage.name().to_string(), rec);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn run_stage(ctx: &mut Ctx<'_>, stage: Stage) -> Result<Option<EvaluationReport>> {
    match stage {
        Stage::Gen => stage_gen(ctx)?,
        Stage::Dict => stage_dict(ctx)?,
        Stage::FitBaseline => stage_baseline(ctx)?,
        Stage::Fit => stage_fit(ctx)?,
        Stage::FitL2 => stage_fit_l2(ctx)?,
        Stage::Consensus => stage_consensus(ctx)?,
        Stage::Eval => return stage_eval(ctx).map(Some),
        Stage::Analyze => stage_analyze(ctx)?,
    }
    Ok(None)
}

fn stage_gen(ctx: &mut Ctx<'_>) -> Result<()> {
    let gen = ctx
        .cfg
        .gen
        .as_ref()
        .ok_or_else(|| Error::Config("the gen stage needs a [gen] section".into()))?;
    let (corpus, truth) = synth::generate_corpus(gen)?;
    let dir = ctx.layout.corpus_dir();
    let manifest = corpus::save_corpus_with_provenance(&corpus, &dir, Some(&ctx.provenance))?;
    for s in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = s.map_err(|e| Error::io(&dir, e))?.path();
        if path != manifest {
            ctx.written.push(path);
        }
    }
    ctx.written.push(manifest);
    let u = &ctx.cfg.unlabeled;
    let x = synth::generate_unlabeled(&truth, u.n_samples, u.code_scale, u.noise_sd, derive_seed(gen.seed, "unlabeled", 0));
    ctx.save(ctx.layout.unlabeled(), Model::Data(x))?;
    let gt = ctx.layout.ground_truth();
    matfile::write_matrix(&gt, truth.m_true.view(), matfile::Precision::F64)?;
    ctx.written.push(gt);
    ctx.written.sort();
    Ok(())
}

fn unlabeled_data(ctx: &Ctx<'_>) -> Result<Array2<f64>> {
    if let Some(p) = &ctx.cfg.unlabeled.path {
        return matfile::read_matrix(p);
    }
    match ctx.load(&ctx.layout.unlabeled())? {
        Model::Data(x) => Ok(x),
        other => Err(wrong_kind(&ctx.layout.unlabeled(), "data", &other)),
    }
}

fn learn_dictionary(x: &Array2<f64>, k: usize, cfg: &DictionaryConfig, seed: u64) -> Result<Dictionary> {
    let fit = match cfg.lambda {
        Some(lambda) => dictionary::fit_sparse_nmf(x.view(), k, lambda, cfg.epochs, seed)?,
        None => {
            let (lambda, fit) =
                dictionary::select_dictionary_lambda(x.view(), k, &cfg.lambda_grid, cfg.epochs, seed, cfg.min_coverage)?;
            info!("dictionary k = {k}: code ridge {lambda:e}");
            fit
        }
    };
    let names = (0..k).map(|t| format!("component{t:03}")).collect();
    fit.dictionary.with_names(names)
}

fn stage_dict(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = &ctx.cfg.dictionary;
    let seed = derive_seed(ctx.cfg.seed, "dict", 0);
    let d = match &cfg.path {
        Some(p) => Dictionary::new(matfile::read_matrix(p)?)?,
        None => learn_dictionary(&unlabeled_data(ctx)?, cfg.k, cfg, seed)?,
    };
    let d = match &cfg.mask {
        Some(p) => {
            let mask: Vec<bool> = matfile::read_matrix(p)?.iter().map(|&v| v != 0.0).collect();
            let before = d.k();
            let (d, _) = dictionary::restrict_components(&d, &mask, cfg.mask_threshold)?;
            info!("mask restriction kept {} of {before} components", d.k());
            d
        }
        None => d,
    };
    if d.k() < ctx.cfg.train.l {
        return Err(Error::Config(format!("dictionary has {} atoms, fewer than l = {}", d.k(), ctx.cfg.train.l)));
    }
    if cfg.init_second_layer {
        let coarse = learn_dictionary(&unlabeled_data(ctx)?, ctx.cfg.train.l, cfg, derive_seed(ctx.cfg.seed, "dict", 1))?;
        ctx.save(ctx.layout.coarse_dictionary(), Model::Dictionary(coarse))?;
    }
    ctx.save(ctx.layout.dictionary(), Model::Dictionary(d))
}

/// Fits one voxel (or dictionary-space) decoder per study of `train`.
pub fn fit_baselines(train: &Corpus, cfg: &BaselineConfig, d: Option<&Dictionary>, seed: u64) -> Result<BaselineSet> {
    let input = match d {
        Some(d) => DecoderInput::Dictionary(d),
        None => DecoderInput::Voxels,
    };
    let decoders = train
        .studies()
        .iter()
        .enumerate()
        .map(|(j, study)| {
            let lambda = match cfg.lambda {
                Some(l) => l,
                None => baseline::select_lambda(
                    study,
                    &cfg.grid,
                    cfg.select_splits,
                    derive_seed(seed, study.id(), j as u64),
                    input,
                    &cfg.solver,
                )?,
            };
            match d {
                Some(d) => baseline::fit_reduced_decoder(study, d, lambda, &cfg.solver),
                None => baseline::fit_voxel_decoder(study, lambda, &cfg.solver),
            }
            .map_err(|e| e.in_stage(&format!("study {}", study.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineSet {
        decoders,
        dictionary: d.cloned(),
    })
}

fn per_split<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..n)
        .into_par_iter()
        .map(|s| f(s).map_err(|e| e.in_stage(&format!("split {s}"))))
        .collect()
}

fn stage_baseline(ctx: &mut Ctx<'_>) -> Result<()> {
    let corpus = ctx.corpus()?;
    let d = if ctx.cfg.baseline.reduced { Some(ctx.dictionary()?) } else { None };
    let sets = per_split(ctx.cfg.n_splits, |s| {
        let split = ctx.split(&corpus, s)?;
        let seed = derive_seed(ctx.cfg.seed, "baseline", s as u64);
        let voxel = fit_baselines(&split.train, &ctx.cfg.baseline, None, seed)?;
        let reduced = match &d {
            Some(d) => Some(fit_baselines(&split.train, &ctx.cfg.baseline, Some(d), seed)?),
            None => None,
        };
        Ok((voxel, reduced))
    })?;
    for (s, (voxel, reduced)) in sets.into_iter().enumerate() {
        ctx.save(ctx.layout.baseline(s), Model::Baseline(voxel))?;
        if let Some(r) = reduced {
            ctx.save(ctx.layout.reduced(s), Model::Baseline(r))?;
        }
    }
    Ok(())
}

fn stage_fit(ctx: &mut Ctx<'_>) -> Result<()> {
    let corpus = ctx.corpus()?;
    let d = ctx.dictionary()?;
    let l_init = ctx.l_init(&d)?;
    let ensembles = per_split(ctx.cfg.n_splits, |s| {
        let split = ctx.split(&corpus, s)?;
        let seed0 = derive_seed(ctx.cfg.seed, "fit", s as u64);
        let e = consensus::run_ensemble(&split.train, &d, l_init.as_ref(), &ctx.cfg.train, ctx.cfg.r, seed0, false)?;
        if e.runs.is_empty() {
            let (_, err) = e.failures.into_iter().next().expect("at least one run");
            return Err(err);
        }
        Ok(e.runs)
    })?;
    for (s, runs) in ensembles.into_iter().enumerate() {
        for (i, run) in runs.into_iter().enumerate() {
            ctx.save(ctx.layout.run(s, i), Model::MultiStudy(run))?;
        }
    }
    Ok(())
}

fn stage_fit_l2(ctx: &mut Ctx<'_>) -> Result<()> {
    let corpus = ctx.corpus()?;
    let d = ctx.dictionary()?;
    let l = ctx.cfg.l2.l.unwrap_or(d.k());
    let fits = per_split(ctx.cfg.n_splits, |s| {
        let split = ctx.split(&corpus, s)?;
        let seed = derive_seed(ctx.cfg.seed, "fit-l2", s as u64);
        ctx.cfg
            .l2
            .grid
            .iter()
            .map(|&lambda| {
                let cfg = TrainConfig {
                    l,
                    lambda_l2: lambda,
                    dropout_mode: trainer::DropoutMode::None,
                    seed,
                    ..ctx.cfg.train.clone()
                };
                trainer::fit_l2_factored(&split.train, &d, None, &cfg)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for (s, runs) in fits.into_iter().enumerate() {
        for (i, run) in runs.into_iter().enumerate() {
            ctx.save(ctx.layout.l2(s, i), Model::MultiStudy(run))?;
        }
    }
    Ok(())
}

fn load_runs(ctx: &Ctx<'_>, s: usize) -> Result<Vec<TrainedRun>> {
    let mut runs = Vec::new();
    for i in 0..ctx.cfg.r {
        let path = ctx.layout.run(s, i);
        if i > 0 && !path.exists() {
            // failed runs leave gaps at the end
            break;
        }
        match ctx.load(&path)? {
            Model::MultiStudy(r) => runs.push(r),
            other => return Err(wrong_kind(&path, "multistudy", &other)),
        }
    }
    Ok(runs)
}

fn consensus_ridge(cfg: &ConsensusConfig) -> ConsensusRidge {
    match cfg.lambda {
        Some(l) => ConsensusRidge::Fixed(l),
        None => ConsensusRidge::Tuned,
    }
}

fn stage_consensus(ctx: &mut Ctx<'_>) -> Result<()> {
    let models = per_split(ctx.cfg.n_splits, |s| {
        let runs = load_runs(ctx, s)?;
        consensus::build_consensus(&runs, ctx.cfg.train.l, consensus_ridge(&ctx.cfg.consensus), None)
    })?;
    for (s, m) in models.into_iter().enumerate() {
        ctx.save(ctx.layout.consensus(s), Model::Consensus(m))?;
    }
    Ok(())
}

/// Scores `model` on every study of `test`.
pub fn score_model(report: &mut EvaluationReport, method: &str, model: &Model, test: &Corpus, split: usize) -> Result<()> {
    for study in test.studies() {
        let pred = model.predict(study.id(), study.data())?;
        report.record(method, study.id(), split, &pred, study.labels(), study.contrast_names())?;
    }
    Ok(())
}

pub const BASELINE_METHOD: &str = "voxel";
pub const L2_BEST_METHOD: &str = "l2_factored_best";

pub fn l2_method(lambda: f64) -> String {
    format!("l2_factored[{lambda:e}]")
}

fn stage_eval(ctx: &mut Ctx<'_>) -> Result<EvaluationReport> {
    let corpus = ctx.corpus()?;
    let layout = ctx.layout.clone();
    let layout = &layout;
    let mut methods: Vec<(String, Box<dyn Fn(usize) -> PathBuf + Sync + '_>)> = Vec::new();
    if layout.baseline(0).exists() {
        methods.push((BASELINE_METHOD.into(), Box::new(|s| layout.baseline(s))));
    }
    if layout.reduced(0).exists() {
        methods.push(("reduced".into(), Box::new(|s| layout.reduced(s))));
    }
    if layout.run(0, 0).exists() {
        methods.push(("multistudy".into(), Box::new(|s| layout.run(s, 0))));
    }
    if layout.consensus(0).exists() {
        methods.push(("consensus".into(), Box::new(|s| layout.consensus(s))));
    }
    for (i, &lambda) in ctx.cfg.l2.grid.iter().enumerate() {
        if layout.l2(0, i).exists() {
            methods.push((l2_method(lambda), Box::new(move |s| layout.l2(s, i))));
        }
    }
    if methods.is_empty() {
        return Err(Error::MissingFile(layout.root.join("baseline")));
    }
    let parts = per_split(ctx.cfg.n_splits, |s| {
        let test = ctx.split(&corpus, s)?.test;
        let mut part = EvaluationReport::default();
        for (name, path) in &methods {
            let model = ctx.load(&path(s))?;
            score_model(&mut part, name, &model, &test, s)?;
        }
        Ok(part)
    })?;
    let mut report = EvaluationReport::default();
    for p in parts {
        report.accuracy.extend(p.accuracy);
        report.balanced.extend(p.balanced);
    }
    add_best_l2(&mut report, &ctx.cfg.l2.grid);
    if report.methods().iter().any(|m| m == BASELINE_METHOD) {
        report.summarize_against(BASELINE_METHOD)?;
    }
    let dir = ctx.layout.report_dir();
    ctx.write_text(dir.join("accuracy.csv"), &report.accuracy_csv())?;
    ctx.write_text(dir.join("balanced_accuracy.csv"), &report.balanced_csv())?;
    ctx.write_text(dir.join("summary.txt"), &report.summary_text())?;
    Ok(report)
}

/// Adds the weight-decay grid value with the best mean test accuracy as its
/// own method (selection on test, used only as an optimistic reference).
pub fn add_best_l2(report: &mut EvaluationReport, grid: &[f64]) {
    let mut best: Option<(String, f64)> = None;
    for &lambda in grid {
        let name = l2_method(lambda);
        let s = report.scores(&name);
        if s.is_empty() {
            continue;
        }
        let mean = s.values().sum::<f64>() / s.len() as f64;
        if best.as_ref().is_none_or(|(_, m)| mean > *m) {
            best = Some((name, mean));
        }
    }
    if let Some((name, _)) = best {
        let acc: Vec<_> = report.accuracy.iter().filter(|r| r.method == name).cloned().collect();
        let bal: Vec<_> = report.balanced.iter().filter(|r| r.method == name).cloned().collect();
        for mut r in acc {
            r.method = L2_BEST_METHOD.into();
            report.accuracy.push(r);
        }
        for mut r in bal {
            r.method = L2_BEST_METHOD.into();
            report.balanced.push(r);
        }
    }
}

fn stage_analyze(ctx: &mut Ctx<'_>) -> Result<()> {
    let s = ctx.cfg.analysis.split;
    let path = ctx.layout.consensus(s);
    let model = match ctx.load(&path)? {
        Model::Consensus(m) => m,
        other => return Err(wrong_kind(&path, "consensus", &other)),
    };
    let mston = MstonAtlas::from_consensus(&model)?;
    let atlas = analysis::classification_maps(&model);
    let rankings = analysis::network_contrast_ranking(&mston, &atlas, ctx.cfg.analysis.top);
    let clustering = analysis::cluster_maps(&atlas)?;
    let mut text = String::new();
    let _ = writeln!(text, "split {s}: {} networks, consensus ridge {:e}, sparsity {:.3}", model.l(), model.lambda, model.sparsity);
    let _ = writeln!(text, "cophenetic correlation {:.4}", clustering.cophenetic_coefficient);
    let _ = writeln!(text, "mean |correlation| of consensus maps {:.4}", analysis::mean_abs_correlation(&atlas));
    let base_path = ctx.layout.baseline(s);
    if base_path.exists() {
        if let Model::Baseline(set) = ctx.load(&base_path)? {
            let base = analysis::decoder_atlas(&set.decoders, set.dictionary.as_ref())?;
            let _ = writeln!(text, "mean |correlation| of voxel-decoder maps {:.4}", analysis::mean_abs_correlation(&base));
        }
    }
    let runs = load_runs(ctx, s)?;
    if runs.len() >= 2 {
        let ls: Vec<_> = runs.iter().map(|r| r.model.second_layer.clone()).collect();
        let _ = writeln!(text, "ensemble span stability {:.4}", consensus::span_stability(&ls, model.l())?);
    }
    let dir = ctx.layout.analysis_dir();
    ctx.write_text(dir.join("mston.csv"), &mston.matrix_csv())?;
    ctx.write_text(dir.join("ranking.csv"), &analysis::ranking_csv(&rankings))?;
    ctx.write_text(dir.join("linkage.csv"), &clustering.linkage_csv())?;
    ctx.write_text(dir.join("summary.txt"), &text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("corpus = \"c.json\"\nbogus_key = 1\n", Path::new("/tmp")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("bogus_key")), "{err}");
        let err = ExperimentConfig::from_toml_str("corpus = \"c.json\"\n[train]\nlr2 = 1\n", Path::new("/tmp")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("lr2")), "{err}");
    }

    #[test]
    fn paths_resolve_against_base() {
        let cfg = ExperimentConfig::from_toml_str("corpus = \"data/c.json\"\nout = \"o\"\n[unlabeled]\npath = \"u.csv\"\n", Path::new("/x/y")).unwrap();
        assert_eq!(cfg.corpus.unwrap(), PathBuf::from("/x/y/data/c.json"));
        assert_eq!(cfg.out, PathBuf::from("/x/y/o"));
        assert_eq!(cfg.unlabeled.path.unwrap(), PathBuf::from("/x/y/u.csv"));
        assert_eq!(cfg.n_splits, 20);
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::from_toml_str("corpus = \"c\"\nout = \"o1\"\n[unlabeled]\npath = \"u\"\n", Path::new("/")).unwrap();
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_index() {
        assert_ne!(derive_seed(0, "split", 0), derive_seed(0, "split", 1));
        assert_ne!(derive_seed(0, "split", 0), derive_seed(0, "fit", 0));
        assert_eq!(derive_seed(7, "fit", 3), derive_seed(7, "fit", 3));
    }

    #[test]
    fn corpus_and_gen_are_exclusive() {
        assert!(ExperimentConfig::from_toml_str("", Path::new("/")).is_err());
    }

    #[test]
    fn mask_drops_components_outside_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = 20;
        let mask: Vec<String> = (0..p).map(|i| if i < 10 { "1" } else { "0" }.to_string()).collect();
        std::fs::write(dir.path().join("mask.csv"), mask.join(",") + "\n").unwrap();
        let text = format!(
            "seed = 1\n[gen]\np = {p}\nl_true = 2\nsubject_noise_sd = 0.3\nvoxel_noise_sd = 0.1\nclass_sep = 1.0\nseed = 2\n\
             studies = [{{ n_subjects = 4, n_contrasts = 2 }}]\n[unlabeled]\nn_samples = 200\n\
             [dictionary]\nk = 8\nlambda = 1e-3\nepochs = 5\nmask = \"mask.csv\"\n[train]\nl = 1\n"
        );
        let cfg = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap();
        run_experiment(&cfg, &[Stage::Gen, Stage::Dict]).unwrap();
        let d = match checkpoint::load_model(&cfg.out.join("dictionary.ckpt")).unwrap().model {
            Model::Dictionary(d) => d,
            other => panic!("{}", other.kind()),
        };
        assert!(d.k() <= 8);
        for row in d.atoms().rows() {
            let inside: f64 = row.iter().take(10).sum();
            assert!(inside >= 0.5 * row.sum() - 1e-12);
        }
    }
}
