//! Training objectives. Every loss is built on a [`Tape`] so it can be
//! differentiated; [`total_loss`] composes the scalar values for reporting.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PdmError, Result};
use crate::ndnum::{Extreme, Tape, Tensor, Var};
use crate::synthdata::Modality;

/// Batch-norm epsilon of the identity head.
pub const BN_EPS: f64 = 1e-5;

/// One mini-batch as seen by the losses. All tensors are tape variables with
/// one row per sample.
#[derive(Clone, Debug)]
pub struct IdentityBatch {
    /// `[N, d]` retrieval descriptors.
    pub descriptors: Var,
    /// `[N, c]` globally pooled features (triplet loss input).
    pub global: Var,
    pub labels: Vec<usize>,
    pub modalities: Vec<Modality>,
    /// `[N, c]` pooled backbone features, present when generated branches are.
    pub original: Option<Var>,
    /// `[N, c]` pooled features of each generated branch.
    pub generated: Vec<Var>,
}

impl IdentityBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_rows(&self, tape: &Tape) -> Result<()> {
        let n = self.labels.len();
        if self.modalities.len() != n {
            return Err(PdmError::contract(format!(
                "{n} labels but {} modality flags",
                self.modalities.len()
            )));
        }
        let mut vars = vec![("descriptors", self.descriptors), ("global", self.global)];
        if let Some(o) = self.original {
            vars.push(("original", o));
        }
        vars.extend(self.generated.iter().map(|&g| ("generated", g)));
        for (name, v) in vars {
            if tape.shape(v).len() != 2 || tape.shape(v)[0] != n {
                return Err(PdmError::contract(format!(
                    "{name} must be [{n}, d], got {:?}",
                    tape.shape(v)
                )));
            }
        }
        if !self.generated.is_empty() && self.original.is_none() {
            return Err(PdmError::contract(
                "generated features without original features",
            ));
        }
        Ok(())
    }
}

/// Batch-local centers. Row `j` of every matrix belongs to `identities[j]`.
#[derive(Clone, Debug)]
pub struct CenterSet {
    pub identities: Vec<usize>,
    /// For each batch row, its row in the center matrices.
    pub slot: Vec<usize>,
    /// `[M, c]` means of the original features per modality.
    pub vis: Option<Var>,
    pub ir: Option<Var>,
    /// Per branch, `[M, c]` means of generated features per modality.
    pub vis_generated: Vec<Var>,
    pub ir_generated: Vec<Var>,
    /// `[M, d]` descriptor means over both modalities.
    pub centroids: Var,
}

impl CenterSet {
    pub fn count(&self) -> usize {
        self.identities.len()
    }
}

fn averaging_matrix(groups: &[Vec<usize>], n: usize) -> Tensor {
    let mut a = Tensor::zeros([groups.len(), n]);
    for (g, rows) in groups.iter().enumerate() {
        for &r in rows {
            a.data_mut()[g * n + r] = 1.0 / rows.len() as f64;
        }
    }
    a
}

pub fn compute_centers(tape: &mut Tape, batch: &IdentityBatch) -> Result<CenterSet> {
    batch.check_rows(tape)?;
    let n = batch.len();
    if n == 0 {
        return Err(PdmError::contract("empty batch"));
    }
    let mut groups: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
    for (row, (&y, &m)) in batch.labels.iter().zip(&batch.modalities).enumerate() {
        groups.entry(y).or_default()[m.code() as usize].push(row);
    }
    for (y, g) in &groups {
        for m in Modality::BOTH {
            if g[m.code() as usize].is_empty() {
                return Err(PdmError::contract(format!(
                    "identity {y} has no {m:?} sample in the batch"
                )));
            }
        }
    }
    let identities: Vec<usize> = groups.keys().copied().collect();
    let slot = batch
        .labels
        .iter()
        .map(|y| identities.binary_search(y).unwrap())
        .collect();
    let vis_rows: Vec<Vec<usize>> = groups.values().map(|g| g[0].clone()).collect();
    let ir_rows: Vec<Vec<usize>> = groups.values().map(|g| g[1].clone()).collect();
    let all_rows: Vec<Vec<usize>> = groups
        .values()
        .map(|g| [&g[0][..], &g[1][..]].concat())
        .collect();

    let vis_avg = tape.constant(averaging_matrix(&vis_rows, n));
    let ir_avg = tape.constant(averaging_matrix(&ir_rows, n));
    let all_avg = tape.constant(averaging_matrix(&all_rows, n));

    let (vis, ir) = match batch.original {
        Some(o) => (
            Some(tape.matmul(vis_avg, o)?),
            Some(tape.matmul(ir_avg, o)?),
        ),
        None => (None, None),
    };
    let mut vis_generated = Vec::new();
    let mut ir_generated = Vec::new();
    for &g in &batch.generated {
        vis_generated.push(tape.matmul(vis_avg, g)?);
        ir_generated.push(tape.matmul(ir_avg, g)?);
    }
    let centroids = tape.matmul(all_avg, batch.descriptors)?;
    Ok(CenterSet {
        identities,
        slot,
        vis,
        ir,
        vis_generated,
        ir_generated,
        centroids,
    })
}

fn off_diagonal(m: usize) -> Tensor {
    Tensor::from_fn([m, m], |i| if i / m != i % m { 1.0 } else { 0.0 })
}

fn upper_triangle(m: usize) -> Tensor {
    Tensor::from_fn([m, m], |i| if i / m < i % m { 1.0 } else { 0.0 })
}

/// One modality's half of the pair-mining loss, summed over branches and
/// `(j, k != j)` tuples.
fn cpm_part(tape: &mut Tape, own: Var, other: Var, generated: &[Var], alpha: f64) -> Result<Var> {
    let m = tape.shape(own)[0];
    let mask = tape.constant(off_diagonal(m));
    let between = tape.pairwise_euclidean(own, own)?;
    let mut total: Option<Var> = None;
    for &g in generated {
        let cross = tape.rowwise_euclidean(other, g)?;
        let intra = tape.rowwise_euclidean(own, g)?;
        let gap = tape.sub(cross, intra)?;
        let gap = tape.reshape(gap, &[m, 1])?;
        let hinge = tape.sub(gap, between)?;
        let hinge = tape.add_scalar(hinge, alpha)?;
        let hinge = tape.relu(hinge)?;
        let hinge = tape.mul(hinge, mask)?;
        let part = tape.sum_all(hinge)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    total.ok_or_else(|| PdmError::contract("no generated branch"))
}

/// Center-guided pair mining: mean hinge over `(branch, j, k != j)` for the
/// visible part plus the same for the infrared part.
pub fn cpm_loss(tape: &mut Tape, centers: &CenterSet, alpha: f64) -> Result<Var> {
    let m = centers.count();
    if m < 2 {
        return Err(PdmError::contract(format!(
            "pair mining needs at least two identities, got {m}"
        )));
    }
    let (Some(vis), Some(ir)) = (centers.vis, centers.ir) else {
        return Err(PdmError::contract(
            "pair mining needs original feature centers",
        ));
    };
    let b = centers.vis_generated.len();
    if b == 0 {
        return Err(PdmError::contract(
            "pair mining needs at least one generated branch",
        ));
    }
    let vis_part = cpm_part(tape, vis, ir, &centers.vis_generated, alpha)?;
    let ir_part = cpm_part(tape, ir, vis, &centers.ir_generated, alpha)?;
    let total = tape.add(vis_part, ir_part)?;
    tape.scale(total, 1.0 / (b * m * (m - 1)) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChVariant {
    /// Mean pairwise cosine; minimising pushes responses apart.
    #[default]
    Prose,
    /// One minus the mean pairwise cosine.
    AsWritten,
}

/// Cosine heterogeneity over prototype responses `P Iᵀ`, given as `[m, n]`
/// or `[N, m, n]` and averaged over samples.
pub fn cosine_heterogeneity_loss(
    tape: &mut Tape,
    responses: Var,
    variant: ChVariant,
) -> Result<Var> {
    let r = match tape.shape(responses).len() {
        3 => responses,
        2 => {
            let mut s = vec![1];
            s.extend_from_slice(tape.shape(responses));
            tape.reshape(responses, &s)?
        }
        _ => return Err(PdmError::contract("responses must be [m,n] or [N,m,n]")),
    };
    let [nb, m, _] = tape.shape(r)[..] else {
        unreachable!()
    };
    if m < 2 {
        return Err(PdmError::contract(format!(
            "need at least two prototypes, got {m}"
        )));
    }
    let norms = tape.norm_last(r)?;
    if let Some(i) = tape.value(norms).data().iter().position(|&v| v == 0.0) {
        return Err(PdmError::Degenerate(format!(
            "response of prototype {} in sample {} has zero norm",
            i % m,
            i / m
        )));
    }
    let norms = tape.reshape(norms, &[nb, m, 1])?;
    let unit = tape.div(r, norms)?;
    let unit_t = tape.transpose(unit)?;
    let gram = tape.matmul(unit, unit_t)?;
    let mask = tape.constant(upper_triangle(m));
    let pairs = tape.mul(gram, mask)?;
    let total = tape.sum_all(pairs)?;
    let mean = tape.scale(total, 2.0 / (nb * m * (m - 1)) as f64)?;
    match variant {
        ChVariant::Prose => Ok(mean),
        ChVariant::AsWritten => {
            let neg = tape.neg(mean)?;
            tape.add_scalar(neg, 1.0)
        }
    }
}

/// Pull each descriptor to within `rho1` of its identity centroid and push
/// centroids at least `rho2` apart.
pub fn dual_center_separation_loss(
    tape: &mut Tape,
    batch: &IdentityBatch,
    centers: &CenterSet,
    rho1: f64,
    rho2: f64,
) -> Result<Var> {
    if !(rho1 >= 0.0 && rho2 >= 0.0) {
        return Err(PdmError::contract(format!(
            "thresholds must be non-negative, got rho1={rho1} rho2={rho2}"
        )));
    }
    if batch.is_empty() {
        return Err(PdmError::contract("empty batch"));
    }
    let own = tape.index_select(centers.centroids, &centers.slot)?;
    let spread = tape.rowwise_euclidean(batch.descriptors, own)?;
    let spread = tape.add_scalar(spread, -rho1)?;
    let spread = tape.relu(spread)?;
    let pull = tape.mean_all(spread)?;
    let m = centers.count();
    if m < 2 {
        return Ok(pull);
    }
    let between = tape.pairwise_euclidean(centers.centroids, centers.centroids)?;
    let push = tape.neg(between)?;
    let push = tape.add_scalar(push, rho2)?;
    let push = tape.relu(push)?;
    let mask = tape.constant(upper_triangle(m));
    let push = tape.mul(push, mask)?;
    let push = tape.sum_all(push)?;
    let push = tape.scale(push, 2.0 / (m * (m - 1)) as f64)?;
    tape.add(pull, push)
}

/// Batch-hard triplet loss over `features [N, c]`.
pub fn triplet_loss(tape: &mut Tape, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let n = labels.len();
    if tape.shape(features).len() != 2 || tape.shape(features)[0] != n {
        return Err(PdmError::contract(format!(
            "triplet features must be [{n}, c], got {:?}",
            tape.shape(features)
        )));
    }
    let mut positive = vec![false; n * n];
    let mut negative = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            positive[i * n + j] = i != j && labels[i] == labels[j];
            negative[i * n + j] = labels[i] != labels[j];
        }
        if !positive[i * n..(i + 1) * n].iter().any(|&b| b) {
            return Err(PdmError::contract(format!("anchor {i} has no positive")));
        }
        if !negative[i * n..(i + 1) * n].iter().any(|&b| b) {
            return Err(PdmError::contract(format!("anchor {i} has no negative")));
        }
    }
    let dist = tape.pairwise_euclidean(features, features)?;
    let hardest_pos = tape.masked_extreme(dist, &positive, Extreme::Max)?;
    let hardest_neg = tape.masked_extreme(dist, &negative, Extreme::Min)?;
    let gap = tape.sub(hardest_pos, hardest_neg)?;
    let gap = tape.add_scalar(gap, margin)?;
    let gap = tape.relu(gap)?;
    tape.mean_all(gap)
}

/// Batch-norm then linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T> {
    /// `[d]`
    pub bn_scale: T,
    /// `[d]`
    pub bn_shift: T,
    /// `[d, C]`
    pub weight: T,
    /// `[C]`
    pub bias: T,
}

impl<T> ClassifierParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ClassifierParams<U> {
        ClassifierParams {
            bn_scale: f(&self.bn_scale),
            bn_shift: f(&self.bn_shift),
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &T)> {
        vec![
            ("bn_scale", &self.bn_scale),
            ("bn_shift", &self.bn_shift),
            ("weight", &self.weight),
            ("bias", &self.bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        vec![
            ("bn_scale", &mut self.bn_scale),
            ("bn_shift", &mut self.bn_shift),
            ("weight", &mut self.weight),
            ("bias", &mut self.bias),
        ]
    }
}

impl ClassifierParams<Tensor> {
    pub fn shapes(dim: usize, classes: usize) -> ClassifierParams<Vec<usize>> {
        ClassifierParams {
            bn_scale: vec![dim],
            bn_shift: vec![dim],
            weight: vec![dim, classes],
            bias: vec![classes],
        }
    }

    /// Unit scale, zero shift and bias, weights uniform in `±1/√d`.
    pub fn init(dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        ClassifierParams {
            bn_scale: Tensor::full([dim], 1.0),
            bn_shift: Tensor::zeros([dim]),
            weight: crate::rng::uniform_tensor(rng, &[dim, classes], bound),
            bias: Tensor::zeros([classes]),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Standardises each column of `x [N, d]` with batch statistics, then applies
/// the learnable scale and shift.
pub fn batch_norm(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let mean = tape.mean(x, 0)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, 0)?;
    let var = tape.add_scalar(var, BN_EPS)?;
    let std = tape.sqrt(var)?;
    let normed = tape.div(centered, std)?;
    let normed = tape.mul(normed, scale)?;
    tape.add(normed, shift)
}

pub fn classifier_logits(
    tape: &mut Tape,
    descriptors: Var,
    params: &ClassifierParams<Var>,
) -> Result<Var> {
    let normed = batch_norm(tape, descriptors, params.bn_scale, params.bn_shift)?;
    let logits = tape.matmul(normed, params.weight)?;
    tape.add(logits, params.bias)
}

/// Softmax cross-entropy of the batch-normalised, classified descriptors.
pub fn identity_loss(
    tape: &mut Tape,
    descriptors: Var,
    labels: &[usize],
    params: &ClassifierParams<Var>,
) -> Result<Var> {
    let logits = classifier_logits(tape, descriptors, params)?;
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub id: f64,
    pub tri: f64,
    pub ch: f64,
    pub dcs: f64,
    pub cpm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub id: f64,
    pub tri: f64,
    pub ch: f64,
    pub dcs: f64,
    pub cpm: f64,
    pub plm: f64,
    pub total: f64,
}

pub fn total_loss(parts: LossParts) -> Result<LossReport> {
    for (name, v) in [
        ("id", parts.id),
        ("tri", parts.tri),
        ("ch", parts.ch),
        ("dcs", parts.dcs),
        ("cpm", parts.cpm),
    ] {
        if !v.is_finite() {
            return Err(PdmError::numeric(name, format!("loss component is {v}")));
        }
    }
    let plm = parts.tri + parts.ch + parts.dcs;
    Ok(LossReport {
        id: parts.id,
        tri: parts.tri,
        ch: parts.ch,
        dcs: parts.dcs,
        cpm: parts.cpm,
        plm,
        total: parts.id + plm + parts.cpm,
    })
}
