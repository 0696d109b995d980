//! Post-hoc introspection: classification maps, projections onto the
//! consensus networks, network-to-contrast rankings and map clustering.

use std::fmt::Write as _;

use kodama::{linkage, Method};
use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::baseline::LinearDecoder;
use crate::consensus::ConsensusModel;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg::{cosine, to_nalgebra};
use crate::trainer::MultiStudyModel;

/// Voxel-space maps of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyMaps {
    pub study_id: String,
    pub contrast_names: Vec<String>,
    /// `c x p`.
    pub maps: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationAtlas {
    pub studies: Vec<StudyMaps>,
}

impl ClassificationAtlas {
    /// All maps stacked in study order, with `(study, contrast)` labels.
    pub fn stacked(&self) -> (Array2<f64>, Vec<(String, String)>) {
        let views: Vec<_> = self.studies.iter().map(|s| s.maps.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).expect("maps share a width");
        let names = self
            .studies
            .iter()
            .flat_map(|s| s.contrast_names.iter().map(move |c| (s.study_id.clone(), c.clone())))
            .collect();
        (all, names)
    }

    /// Argmax of `W x + b` for study `study_id`.
    pub fn predict(&self, study_id: &str, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let s = self
            .studies
            .iter()
            .find(|s| s.study_id == study_id)
            .ok_or_else(|| Error::UnknownStudy(study_id.to_string()))?;
        if x.ncols() != s.maps.ncols() {
            return Err(Error::shape("map width", s.maps.ncols(), x.ncols()));
        }
        Ok(crate::softmax::argmax_rows(crate::softmax::affine(x, s.maps.view(), &s.bias).view()))
    }
}

/// Models that can be unrolled into explicit voxel-space linear maps.
pub trait MapSource {
    fn classification_atlas(&self) -> ClassificationAtlas;
}

impl MapSource for MultiStudyModel {
    fn classification_atlas(&self) -> ClassificationAtlas {
        let studies = self
            .heads
            .iter()
            .enumerate()
            .map(|(j, h)| {
                let (maps, bias) = self.classification_maps(j);
                StudyMaps {
                    study_id: h.study_id.clone(),
                    contrast_names: h.contrast_names.clone(),
                    maps,
                    bias,
                }
            })
            .collect();
        ClassificationAtlas { studies }
    }
}

impl MapSource for ConsensusModel {
    fn classification_atlas(&self) -> ClassificationAtlas {
        let studies = self
            .heads
            .iter()
            .enumerate()
            .map(|(j, h)| {
                let (maps, bias) = self.classification_maps(j);
                StudyMaps {
                    study_id: h.study_id.clone(),
                    contrast_names: h.contrast_names.clone(),
                    maps,
                    bias,
                }
            })
            .collect();
        ClassificationAtlas { studies }
    }
}

/// Per-study explicit maps with batch norm folded into the weights.
pub fn classification_maps<M: MapSource + ?Sized>(model: &M) -> ClassificationAtlas {
    model.classification_atlas()
}

/// Atlas of separately trained decoders (reduced ones need their dictionary).
pub fn decoder_atlas(decoders: &[LinearDecoder], dictionary: Option<&Dictionary>) -> Result<ClassificationAtlas> {
    let studies = decoders
        .iter()
        .map(|d| {
            Ok(StudyMaps {
                study_id: d.study_id.clone(),
                contrast_names: d.contrast_names.clone(),
                maps: d.voxel_weights(dictionary)?,
                bias: d.bias.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClassificationAtlas { studies })
}

/// The consensus networks `M = L_bar D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MstonAtlas {
    /// `l x p`, non-negative.
    pub m: Array2<f64>,
    pub network_names: Vec<String>,
}

impl MstonAtlas {
    pub fn new(m: Array2<f64>, network_names: Vec<String>) -> Result<Self> {
        if network_names.len() != m.nrows() {
            return Err(Error::shape("network names", m.nrows(), network_names.len()));
        }
        if m.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("network matrix must be finite and non-negative".into()));
        }
        Ok(MstonAtlas { m, network_names })
    }

    /// Atlas of a consensus model; all-zero networks are dropped with a warning.
    pub fn from_consensus(model: &ConsensusModel) -> Result<Self> {
        let m = model.mston();
        let keep: Vec<usize> = (0..m.nrows()).filter(|&t| m.row(t).iter().any(|&v| v > 0.0)).collect();
        if keep.len() < m.nrows() {
            warn!("{} all-zero consensus networks dropped", m.nrows() - keep.len());
        }
        if keep.is_empty() {
            return Err(Error::InvalidInput("every consensus network is zero".into()));
        }
        let names = keep.iter().map(|t| format!("network_{t:02}")).collect();
        MstonAtlas::new(m.select(Axis(0), &keep), names)
    }

    pub fn matrix_csv(&self) -> String {
        let mut out = String::new();
        for (name, row) in self.network_names.iter().zip(self.m.rows()) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v:.10e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Orthonormal basis (as columns, `p x r`) of the row span of `m`.
fn row_span_basis(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let svd = to_nalgebra(m.t()).svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = s_max * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol).collect();
    Array2::from_shape_fn((m.ncols(), keep.len()), |(i, c)| u[(i, keep[c])])
}

/// Orthogonal projection of `x` onto the row span of the networks,
/// `M^T (M M^T)^{-1} M x`.
pub fn project_map(atlas: &MstonAtlas, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    Ok(Projector::new(atlas)?.project(x))
}

/// Reusable projector onto the span of an atlas.
#[derive(Debug, Clone)]
pub struct Projector {
    basis: Array2<f64>,
}

impl Projector {
    pub fn new(atlas: &MstonAtlas) -> Result<Self> {
        Ok(Projector {
            basis: row_span_basis(atlas.m.view()),
        })
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.basis.dot(&self.basis.t().dot(&x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub study_id: String,
    pub contrast: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkRanking {
    pub network: String,
    pub entries: Vec<RankEntry>,
}

pub const DEFAULT_TOP: usize = 20;

/// For each network, contrasts sorted by decreasing cosine similarity of
/// their maps with the network (ties kept in atlas order), truncated to `top`.
pub fn network_contrast_ranking(mston: &MstonAtlas, atlas: &ClassificationAtlas, top: usize) -> Vec<NetworkRanking> {
    let (maps, names) = atlas.stacked();
    let mut usable = Vec::new();
    for (i, row) in maps.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            warn!("map of `{}` / `{}` is zero and is left out of the ranking", names[i].0, names[i].1);
        } else {
            usable.push(i);
        }
    }
    mston
        .network_names
        .iter()
        .zip(mston.m.rows())
        .map(|(net, row)| {
            let row = row.to_vec();
            let mut entries: Vec<(usize, f64)> = usable
                .iter()
                .map(|&i| (i, cosine(&row, &maps.row(i).to_vec()).unwrap_or(0.0)))
                .collect();
            entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            NetworkRanking {
                network: net.clone(),
                entries: entries
                    .into_iter()
                    .take(top)
                    .map(|(i, score)| RankEntry {
                        study_id: names[i].0.clone(),
                        contrast: names[i].1.clone(),
                        score,
                    })
                    .collect(),
            }
        })
        .collect()
}

pub fn ranking_csv(rankings: &[NetworkRanking]) -> String {
    let mut out = String::from("network,rank,study,contrast,cosine\n");
    for r in rankings {
        for (i, e) in r.entries.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{:.10}", r.network, i + 1, e.study_id, e.contrast, e.score);
        }
    }
    out
}

/// One agglomeration: clusters `a` and `b` (leaves are `0..n`, the cluster
/// formed at step `s` is `n + s`) merged at `distance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapClustering {
    pub labels: Vec<(String, String)>,
    pub merges: Vec<Merge>,
    pub cophenetic_coefficient: f64,
}

impl MapClustering {
    pub fn linkage_csv(&self) -> String {
        let mut out = String::from("cluster_a,cluster_b,distance,size\n");
        for m in &self.merges {
            let _ = writeln!(out, "{},{},{:.10},{}", m.a, m.b, m.distance, m.size);
        }
        out
    }
}

/// Condensed (upper-triangle, row-major) `1 - |cos|` distances between rows.
pub fn cosine_distances(maps: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = maps.nrows();
    let rows: Vec<Vec<f64>> = maps.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(&rows[i], &rows[j]).unwrap_or(0.0);
            out.push((1.0 - c.abs()).max(0.0));
        }
    }
    out
}

/// Height at which each pair of leaves first shares a cluster (condensed order).
pub fn cophenetic_distances(n: usize, merges: &[Merge]) -> Vec<f64> {
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut coph = vec![0.0; n * (n - 1) / 2];
    let index = |i: usize, j: usize| {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        n * i - i * (i + 1) / 2 + (j - i - 1)
    };
    for m in merges {
        let (left, right) = (members[m.a].clone(), members[m.b].clone());
        for &i in &left {
            for &j in &right {
                coph[index(i, j)] = m.distance;
            }
        }
        let mut joined = left;
        joined.extend(right);
        members.push(joined);
    }
    coph
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        // a constant distance set is reproduced exactly by any tree
        return if saa == sbb { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Average-linkage clustering of all maps on `1 - |cos|` distances.
pub fn cluster_maps(atlas: &ClassificationAtlas) -> Result<MapClustering> {
    let (maps, labels) = atlas.stacked();
    let n = maps.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("clustering needs at least two maps".into()));
    }
    let dist = cosine_distances(maps.view());
    let mut work = dist.clone();
    let dendrogram = linkage(&mut work, n, Method::Average);
    let merges: Vec<Merge> = dendrogram
        .steps()
        .iter()
        .map(|s| Merge {
            a: s.cluster1.min(s.cluster2),
            b: s.cluster1.max(s.cluster2),
            distance: s.dissimilarity,
            size: s.size,
        })
        .collect();
    let coph = cophenetic_distances(n, &merges);
    Ok(MapClustering {
        labels,
        cophenetic_coefficient: pearson(&dist, &coph),
        merges,
    })
}

/// Mean `|cos|` over distinct pairs of maps.
pub fn mean_abs_correlation(atlas: &ClassificationAtlas) -> f64 {
    let (maps, _) = atlas.stacked();
    let d = cosine_distances(maps.view());
    if d.is_empty() {
        return 0.0;
    }
    d.iter().map(|v| 1.0 - v).sum::<f64>() / d.len() as f64
}
