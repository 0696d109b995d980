//! Multi-study labeled sample collections, on-disk ingestion, and
//! subject-aware train/test splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Provenance;
use crate::error::{Error, Result};
use crate::matfile::{self, Precision};

/// One study: statistical maps (one per row) with contrast labels and the
/// subject each map comes from. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    id: String,
    data: Array2<f64>,
    labels: Vec<usize>,
    subject_ids: Vec<String>,
    contrast_names: Vec<String>,
}

impl Study {
    pub fn new(
        id: impl Into<String>,
        data: Array2<f64>,
        labels: Vec<usize>,
        subject_ids: Vec<String>,
        contrast_names: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        if labels.len() != data.nrows() {
            return Err(Error::shape(
                format!("labels of study `{id}`"),
                data.nrows(),
                labels.len(),
            ));
        }
        if subject_ids.len() != data.nrows() {
            return Err(Error::shape(
                format!("subject ids of study `{id}`"),
                data.nrows(),
                subject_ids.len(),
            ));
        }
        if contrast_names.is_empty() {
            return Err(Error::InvalidInput(format!("study `{id}` declares no contrasts")));
        }
        let c = contrast_names.len();
        let mut seen = HashSet::new();
        for (&label, subject) in labels.iter().zip(&subject_ids) {
            if label >= c {
                return Err(Error::LabelOutOfRange {
                    study: id,
                    label,
                    n_contrasts: c,
                });
            }
            if !seen.insert((subject.as_str(), label)) {
                return Err(Error::DuplicateContrast {
                    study: id,
                    subject: subject.clone(),
                    label,
                });
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("study `{id}` has non-finite entries")));
        }
        Ok(Study {
            id,
            data,
            labels,
            subject_ids,
            contrast_names,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn contrast_names(&self) -> &[String] {
        &self.contrast_names
    }

    pub fn n_maps(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_contrasts(&self) -> usize {
        self.contrast_names.len()
    }

    /// Distinct subjects, in order of first appearance.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.subject_ids
            .iter()
            .filter(|s| seen.insert(s.as_str()))
            .map(|s| s.as_str())
            .collect()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects().len()
    }

    /// Keeps the maps of the given subjects, preserving row order.
    pub fn select_subjects(&self, keep: &HashSet<&str>) -> Study {
        let rows: Vec<usize> = (0..self.n_maps())
            .filter(|&i| keep.contains(self.subject_ids[i].as_str()))
            .collect();
        self.select_rows(&rows)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Study {
        Study {
            id: self.id.clone(),
            data: self.data.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: rows.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            contrast_names: self.contrast_names.clone(),
        }
    }

    /// Random subset of `n` subjects (all maps of each), deterministic in `seed`.
    pub fn subsample_subjects(&self, n: usize, seed: u64) -> Result<Study> {
        let mut subjects = self.subjects();
        if n == 0 || n > subjects.len() {
            return Err(Error::InvalidInput(format!(
                "study `{}` has {} subjects, cannot keep {n}",
                self.id,
                subjects.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        subjects.shuffle(&mut rng);
        let keep: HashSet<&str> = subjects[..n].iter().copied().collect();
        Ok(self.select_subjects(&keep))
    }

    /// Number of distinct classes present among the labels.
    pub fn n_classes_present(&self) -> usize {
        self.labels.iter().collect::<HashSet<_>>().len()
    }
}

/// An ordered collection of studies sharing one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    studies: Vec<Study>,
    p: usize,
}

impl Corpus {
    pub fn new(studies: Vec<Study>) -> Result<Self> {
        let first = studies
            .first()
            .ok_or_else(|| Error::InvalidInput("corpus needs at least one study".into()))?;
        let p = first.n_features();
        let mut ids = HashSet::new();
        for s in &studies {
            if s.n_features() != p {
                return Err(Error::shape(
                    format!("feature dimension of study `{}`", s.id()),
                    p,
                    s.n_features(),
                ));
            }
            if !ids.insert(s.id()) {
                return Err(Error::DuplicateStudy(s.id().to_string()));
            }
        }
        Ok(Corpus { studies, p })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn study(&self, id: &str) -> Result<&Study> {
        self.studies
            .iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| Error::UnknownStudy(id.to_string()))
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.studies
            .iter()
            .position(|s| s.id() == id)
            .ok_or_else(|| Error::UnknownStudy(id.to_string()))
    }

    pub fn total_maps(&self) -> usize {
        self.studies.iter().map(Study::n_maps).sum()
    }

    pub fn total_contrasts(&self) -> usize {
        self.studies.iter().map(Study::n_contrasts).sum()
    }

    /// Returns a corpus with study `id` replaced.
    pub fn with_study(&self, replacement: Study) -> Result<Corpus> {
        let idx = self.index_of(replacement.id())?;
        let mut studies = self.studies.clone();
        studies[idx] = replacement;
        Corpus::new(studies)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    p: usize,
    studies: Vec<ManifestStudy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestStudy {
    id: String,
    contrasts: Vec<String>,
    /// One subject id per line, one line per map.
    subjects: PathBuf,
    /// One integer label per line, one line per map.
    labels: PathBuf,
    /// Matrix container (or CSV) with one map per row.
    data: PathBuf,
}

/// Loads a corpus from a JSON manifest. Relative paths are resolved against
/// the manifest's directory. Maps are used exactly as stored.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut studies = Vec::with_capacity(manifest.studies.len());
    let mut ids = HashSet::new();
    for entry in manifest.studies {
        if !ids.insert(entry.id.clone()) {
            return Err(Error::DuplicateStudy(entry.id));
        }
        let data = matfile::read_matrix(&base.join(&entry.data))?;
        if data.ncols() != manifest.p {
            return Err(Error::shape(
                format!("columns of {}", entry.data.display()),
                manifest.p,
                data.ncols(),
            ));
        }
        let subjects = read_lines(&base.join(&entry.subjects))?;
        let labels = read_lines(&base.join(&entry.labels))?
            .into_iter()
            .map(|l| {
                l.parse::<usize>().map_err(|_| {
                    Error::Format(format!("study `{}`: bad label `{l}`", entry.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        studies.push(Study::new(entry.id, data, labels, subjects, entry.contrasts)?);
    }
    Corpus::new(studies)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes the corpus as `manifest.json` plus per-study files under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    save_corpus_with_provenance(corpus, dir, None)
}

/// Same as [`save_corpus`], recording `provenance` in the manifest.
pub fn save_corpus_with_provenance(corpus: &Corpus, dir: &Path, provenance: Option<&Provenance>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, s) in corpus.studies().iter().enumerate() {
        let stem = format!("{i:03}_{}", file_stem(s.id()));
        let data = PathBuf::from(format!("{stem}.cogmat"));
        let subjects = PathBuf::from(format!("{stem}.subjects.txt"));
        let labels = PathBuf::from(format!("{stem}.labels.txt"));
        matfile::write_matrix(&dir.join(&data), s.data(), Precision::F32)?;
        write_lines(&dir.join(&subjects), s.subject_ids().iter().map(String::as_str))?;
        let label_lines: Vec<String> = s.labels().iter().map(|l| l.to_string()).collect();
        write_lines(&dir.join(&labels), label_lines.iter().map(String::as_str))?;
        entries.push(ManifestStudy {
            id: s.id().to_string(),
            contrasts: s.contrast_names().to_vec(),
            subjects,
            labels,
            data,
        });
    }
    let manifest = Manifest {
        p: corpus.p(),
        studies: entries,
        provenance: provenance.cloned(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Corpus,
    pub test: Corpus,
    pub seed: u64,
    pub fraction: f64,
}

/// Number of training subjects for a study of `n` subjects: `fraction * n`
/// rounded half toward train, keeping at least one subject on each side.
pub fn train_count(n: usize, fraction: f64) -> usize {
    let t = (fraction * n as f64 + 0.5).floor() as usize;
    t.clamp(1, n.saturating_sub(1).max(1))
}

/// Assigns every subject id of the corpus to one side.
///
/// A subject id is a global identity: when several studies share a subject,
/// that subject lands on the same side in all of them. Studies are processed
/// in corpus order; subjects already placed by an earlier study are kept and
/// the remaining ones are shuffled and used to reach the study's train quota.
pub fn split_assignment(corpus: &Corpus, seed: u64, fraction: f64) -> Result<BTreeMap<String, Side>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut side: HashMap<String, Side> = HashMap::new();
    for study in corpus.studies() {
        let subjects = study.subjects();
        let n = subjects.len();
        if n < 2 {
            return Err(Error::SplitInfeasible {
                study: study.id().to_string(),
                reason: format!("{n} subject(s), need at least 2"),
            });
        }
        let target = train_count(n, fraction);
        let mut placed_train = 0;
        let mut free = Vec::new();
        for s in &subjects {
            match side.get(*s) {
                Some(Side::Train) => placed_train += 1,
                Some(Side::Test) => {}
                None => free.push(*s),
            }
        }
        free.shuffle(&mut rng);
        let need = target.saturating_sub(placed_train).min(free.len());
        for (i, s) in free.iter().enumerate() {
            let sd = if i < need { Side::Train } else { Side::Test };
            side.insert((*s).to_string(), sd);
        }
        let n_train = subjects.iter().filter(|s| side[**s] == Side::Train).count();
        if n_train == 0 || n_train == n {
            return Err(Error::SplitInfeasible {
                study: study.id().to_string(),
                reason: "subjects shared with earlier studies leave one side empty".into(),
            });
        }
    }
    Ok(side.into_iter().collect())
}

/// Splits every study by subject; see [`split_assignment`].
pub fn half_split(corpus: &Corpus, seed: u64, fraction: f64) -> Result<SplitPair> {
    let assignment = split_assignment(corpus, seed, fraction)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for study in corpus.studies() {
        let (tr, te): (HashSet<&str>, HashSet<&str>) = {
            let mut tr = HashSet::new();
            let mut te = HashSet::new();
            for s in study.subjects() {
                match assignment[s] {
                    Side::Train => tr.insert(s),
                    Side::Test => te.insert(s),
                };
            }
            (tr, te)
        };
        train.push(study.select_subjects(&tr));
        test.push(study.select_subjects(&te));
    }
    Ok(SplitPair {
        train: Corpus::new(train)?,
        test: Corpus::new(test)?,
        seed,
        fraction,
    })
}
