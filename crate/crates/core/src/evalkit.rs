//! Cross-modality retrieval metrics (CMC, mAP) and the intra/inter-class
//! distance gap of cross-modality pairs.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PdmError, Result};
use crate::ndnum::Tensor;
use crate::synthdata::Modality;

/// Environment variable capping the evaluation worker count.
pub const THREADS_ENV: &str = "PDM_THREADS";

const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Infrared queries against a visible gallery.
    Ir2Vis,
    Vis2Ir,
}

impl Direction {
    pub fn query(self) -> Modality {
        match self {
            Direction::Ir2Vis => Modality::Ir,
            Direction::Vis2Ir => Modality::Vis,
        }
    }

    pub fn gallery(self) -> Modality {
        match self {
            Direction::Ir2Vis => Modality::Vis,
            Direction::Vis2Ir => Modality::Ir,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Ir2Vis => "ir2vis",
            Direction::Vis2Ir => "vis2ir",
        }
    }
}

impl FromStr for Direction {
    type Err = PdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ir2vis" => Ok(Direction::Ir2Vis),
            "vis2ir" => Ok(Direction::Vis2Ir),
            other => Err(PdmError::contract(format!(
                "unknown direction {other:?}, expected ir2vis or vis2ir"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalProtocol {
    /// `[Q, d]`
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// `[G, d]`
    pub gallery: Tensor,
    pub gallery_labels: Vec<usize>,
    pub direction: Direction,
}

fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
    }
    Tensor::new([rows.len(), d], data)
}

fn check_rows(x: &Tensor, labels: &[usize], what: &str) -> Result<()> {
    if x.ndim() != 2 || x.shape()[0] != labels.len() {
        return Err(PdmError::contract(format!(
            "{what} must be [{}, d], got {:?}",
            labels.len(),
            x.shape()
        )));
    }
    Ok(())
}

impl RetrievalProtocol {
    /// Splits one descriptor matrix by modality according to `direction`.
    pub fn split(
        descriptors: &Tensor,
        labels: &[usize],
        modalities: &[Modality],
        direction: Direction,
    ) -> Result<Self> {
        check_rows(descriptors, labels, "descriptors")?;
        if modalities.len() != labels.len() {
            return Err(PdmError::contract(
                "one modality flag per descriptor required",
            ));
        }
        let pick = |m: Modality| -> Vec<usize> {
            (0..labels.len()).filter(|&i| modalities[i] == m).collect()
        };
        let (q, g) = (pick(direction.query()), pick(direction.gallery()));
        if q.is_empty() || g.is_empty() {
            return Err(PdmError::contract(format!(
                "{} needs samples of both modalities",
                direction.as_str()
            )));
        }
        Ok(RetrievalProtocol {
            query: select_rows(descriptors, &q)?,
            query_labels: q.iter().map(|&i| labels[i]).collect(),
            gallery: select_rows(descriptors, &g)?,
            gallery_labels: g.iter().map(|&i| labels[i]).collect(),
            direction,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `cmc[k-1]` is CMC@k, for every rank up to the gallery size.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub ap: Vec<f64>,
}

impl RetrievalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Worker pool sized by `PDM_THREADS` when set, else rayon's default.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| {
            PdmError::contract(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        if n == 0 {
            return Err(PdmError::contract(format!(
                "{THREADS_ENV} must be positive"
            )));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| PdmError::contract(format!("thread pool: {e}")))
}

/// First rank of a correct match and average precision for one query.
fn rank_query(
    query: &[f64],
    qy: usize,
    gallery: &Tensor,
    labels: &[usize],
) -> Option<(usize, f64)> {
    let d = gallery.shape()[1];
    let mut order: Vec<(f64, usize)> = gallery
        .data()
        .chunks(d)
        .enumerate()
        .map(|(j, g)| (euclidean(query, g), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &(_, j)) in order.iter().enumerate() {
        if labels[j] == qy {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    first.map(|f| (f, precision_sum / hits as f64))
}

pub fn cmc_map(p: &RetrievalProtocol) -> Result<RetrievalReport> {
    check_rows(&p.query, &p.query_labels, "query")?;
    check_rows(&p.gallery, &p.gallery_labels, "gallery")?;
    if p.query.shape()[1] != p.gallery.shape()[1] {
        return Err(PdmError::contract("query and gallery dimensions differ"));
    }
    let nq = p.query_labels.len();
    let ng = p.gallery_labels.len();
    if nq == 0 || ng == 0 {
        return Err(PdmError::contract("empty query or gallery"));
    }
    let d = p.query.shape()[1];
    let pool = worker_pool()?;
    let ranked: Vec<Option<(usize, f64)>> = pool.install(|| {
        (0..nq)
            .into_par_iter()
            .map(|i| {
                let q = &p.query.data()[i * d..(i + 1) * d];
                rank_query(q, p.query_labels[i], &p.gallery, &p.gallery_labels)
            })
            .collect()
    });
    let mut first_hit = vec![0usize; ng];
    let mut ap = Vec::with_capacity(nq);
    for (i, r) in ranked.into_iter().enumerate() {
        let (first, a) = r.ok_or_else(|| {
            PdmError::contract(format!(
                "query {i} (identity {}) has no match in the gallery",
                p.query_labels[i]
            ))
        })?;
        first_hit[first] += 1;
        ap.push(a);
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0usize;
    for h in first_hit {
        acc += h;
        cmc.push(acc as f64 / nq as f64);
    }
    let map = ap.iter().sum::<f64>() / nq as f64;
    Ok(RetrievalReport { cmc, map, ap })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin includes its upper edge.
    pub edges: Vec<f64>,
    pub intra: Vec<u64>,
    pub inter: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// `inter_mean - intra_mean`
    pub delta: f64,
    pub intra_pairs: u64,
    pub inter_pairs: u64,
    pub histogram: Histogram,
}

/// Means of same-identity and different-identity distances over all
/// visible/infrared pairs.
pub fn distance_gap(
    features: &Tensor,
    labels: &[usize],
    modalities: &[Modality],
) -> Result<DistanceStats> {
    check_rows(features, labels, "features")?;
    if modalities.len() != labels.len() {
        return Err(PdmError::contract("one modality flag per feature required"));
    }
    let d = features.shape()[1];
    let rows: Vec<&[f64]> = features.data().chunks(d.max(1)).collect();
    let vis: Vec<usize> = (0..labels.len())
        .filter(|&i| modalities[i] == Modality::Vis)
        .collect();
    let ir: Vec<usize> = (0..labels.len())
        .filter(|&i| modalities[i] == Modality::Ir)
        .collect();
    if vis.is_empty() || ir.is_empty() {
        return Err(PdmError::contract("distance gap needs both modalities"));
    }
    let mut ids = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(PdmError::contract(
            "distance gap needs at least two identities",
        ));
    }
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for &i in &vis {
        for &j in &ir {
            let dist = euclidean(rows[i], rows[j]);
            if labels[i] == labels[j] {
                intra.push(dist);
            } else {
                inter.push(dist);
            }
        }
    }
    if intra.is_empty() || inter.is_empty() {
        return Err(PdmError::contract(
            "distance gap needs same-identity and different-identity cross-modality pairs",
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (intra_mean, inter_mean) = (mean(&intra), mean(&inter));
    let top = intra.iter().chain(&inter).cloned().fold(0.0, f64::max);
    let top = if top > 0.0 { top } else { 1.0 };
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|k| top * k as f64 / HISTOGRAM_BINS as f64)
        .collect();
    let count = |v: &[f64]| {
        let mut bins = vec![0u64; HISTOGRAM_BINS];
        for &x in v {
            let b = ((x / top) * HISTOGRAM_BINS as f64) as usize;
            bins[b.min(HISTOGRAM_BINS - 1)] += 1;
        }
        bins
    };
    Ok(DistanceStats {
        intra_mean,
        inter_mean,
        delta: inter_mean - intra_mean,
        intra_pairs: intra.len() as u64,
        inter_pairs: inter.len() as u64,
        histogram: Histogram {
            edges,
            intra: count(&intra),
            inter: count(&inter),
        },
    })
}

/// Serialized evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub direction: Direction,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub ap: Vec<f64>,
    pub delta: f64,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub histograms: Histogram,
}

impl EvalReport {
    pub fn new(direction: Direction, retrieval: RetrievalReport, gap: DistanceStats) -> Self {
        EvalReport {
            direction,
            cmc: retrieval.cmc,
            map: retrieval.map,
            ap: retrieval.ap,
            delta: gap.delta,
            intra_mean: gap.intra_mean,
            inter_mean: gap.inter_mean,
            histograms: gap.histogram,
        }
    }

    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| PdmError::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| PdmError::Format(e.to_string()))
    }

    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k + 1, v));
        }
        out
    }
}

/// Retrieval in `direction` plus the distance gap over all samples.
pub fn evaluate(
    descriptors: &Tensor,
    labels: &[usize],
    modalities: &[Modality],
    direction: Direction,
) -> Result<EvalReport> {
    let protocol = RetrievalProtocol::split(descriptors, labels, modalities, direction)?;
    let retrieval = cmc_map(&protocol)?;
    let gap = distance_gap(descriptors, labels, modalities)?;
    Ok(EvalReport::new(direction, retrieval, gap))
}
