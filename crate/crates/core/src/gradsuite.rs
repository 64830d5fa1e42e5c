//! Registry of central-difference gradient checks: every differentiable tape
//! op, the network modules and the five losses.
//!
//! Each check draws [`POINTS`] random inputs. A draw whose forward pass comes
//! within `10·EPS` of a relu, max or hinge kink (see [`Tape::kink_margin`])
//! is discarded and redrawn.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PdmError, Result};
use crate::losses::{
    batch_norm, compute_centers, cosine_heterogeneity_loss, cpm_loss, dual_center_separation_loss,
    identity_loss, triplet_loss, ChVariant, ClassifierParams, IdentityBatch,
};
use crate::mfgm::{
    branch_forward, channel_attention, dilated_fusion, mfgm_forward, spatial_attention,
    BranchParams, MfgmConfig,
};
use crate::ndnum::{grad_check, Extreme, Tape, Tensor, UnaryKind, Var};
use crate::plm::{plm_forward, prototype_logits, PrototypeBank};
use crate::rng::{stream, uniform_tensor};
use crate::synthdata::Modality;
use crate::trainer::{forward_pipeline, ModelConfig, ModelState};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const POINTS: usize = 20;
const CLEARANCE: f64 = 10.0 * EPS;
const MAX_DRAWS: usize = 1000;

pub type Objective = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One evaluation point: the tensor to perturb and a scalar function of it.
pub struct Probe {
    pub x: Tensor,
    pub f: Objective,
}

#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Result<Probe>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub name: String,
    pub max_rel_err: f64,
    /// Draws discarded for sitting too close to a kink.
    pub redraws: usize,
    pub passed: bool,
}

pub fn run_check(check: &Check, rng: &mut ChaCha8Rng) -> Result<Row> {
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    for _ in 0..POINTS {
        let probe = loop {
            let probe = (check.build)(rng)?;
            let mut tape = Tape::new();
            let x = tape.param(probe.x.clone());
            (probe.f)(&mut tape, x)?;
            if tape.kink_margin() > CLEARANCE {
                break probe;
            }
            redraws += 1;
            if redraws > MAX_DRAWS {
                return Err(PdmError::numeric(
                    check.name,
                    "could not draw a point away from every kink",
                ));
            }
        };
        let err = grad_check(|t, x| (probe.f)(t, x), &probe.x, EPS)?;
        worst = worst.max(err);
    }
    Ok(Row {
        name: check.name.to_string(),
        max_rel_err: worst,
        redraws,
        passed: worst < TOLERANCE,
    })
}

/// Runs every check on its own random stream, in registry order.
pub fn run_suite(checks: &[Check], seed: u64) -> Result<Vec<Row>> {
    checks
        .iter()
        .enumerate()
        .map(|(i, c)| run_check(c, &mut stream(seed, i as u64)))
        .collect()
}

pub fn render_table(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:>12}  {:>7}  result\n",
        "name", "max_rel_err", "redraws"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.3e}  {:>7}  {}",
            r.name,
            r.max_rel_err,
            r.redraws,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    out
}

// ---- helpers -----------------------------------------------------------

/// Fixed random weights so the readout does not sum gradients away.
fn readout(t: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(out, w)?;
    t.sum_all(p)
}

/// Slices a flat `x` into consecutive tensors of the given shapes.
fn split(t: &mut Tape, x: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut off = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let len: usize = s.iter().product();
        let part = t.narrow(x, 0, off, len)?;
        out.push(t.reshape(part, s)?);
        off += len;
    }
    Ok(out)
}

fn pack(parts: &[&Tensor]) -> Tensor {
    let data: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Tensor::from_vec(data)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform_tensor(rng, shape, 1.0)
}

/// Magnitudes in `[lo, hi]`, random sign unless `positive`.
fn bounded(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, positive: bool) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.random_range(lo..hi);
        if positive || rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn mapped(
    rng: &mut ChaCha8Rng,
    x: Tensor,
    out_shape: &[usize],
    op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Probe {
    let w = uniform(rng, out_shape);
    Probe {
        x,
        f: Box::new(move |t, x| {
            let y = op(t, x)?;
            readout(t, y, &w)
        }),
    }
}

fn unary(rng: &mut ChaCha8Rng, kind: UnaryKind, lo: f64, hi: f64, positive: bool) -> Result<Probe> {
    let x = bounded(rng, &[3, 4], lo, hi, positive);
    Ok(mapped(rng, x, &[3, 4], move |t, x| t.unary(kind, x)))
}

fn binary(
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
    away_from_zero: bool,
) -> Result<Probe> {
    let a = uniform(rng, &[2, 3, 4]);
    let b = if away_from_zero {
        bounded(rng, &[3, 1], 0.5, 2.0, false)
    } else {
        uniform(rng, &[3, 1])
    };
    let x = pack(&[&a, &b]);
    Ok(mapped(rng, x, &[2, 3, 4], move |t, x| {
        let v = split(t, x, &[vec![2, 3, 4], vec![3, 1]])?;
        op(t, v[0], v[1])
    }))
}

fn two_operands(
    rng: &mut ChaCha8Rng,
    a: &[usize],
    b: &[usize],
    out: &[usize],
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Probe> {
    let (ta, tb) = (uniform(rng, a), uniform(rng, b));
    let shapes = vec![a.to_vec(), b.to_vec()];
    Ok(mapped(rng, pack(&[&ta, &tb]), out, move |t, x| {
        let v = split(t, x, &shapes)?;
        op(t, v[0], v[1])
    }))
}

fn conv(rng: &mut ChaCha8Rng, dilation: usize) -> Result<Probe> {
    let (xs, ks) = (vec![2, 3, 5, 4], vec![2, 3, 3, 3]);
    let x = pack(&[&uniform(rng, &xs), &uniform(rng, &ks)]);
    Ok(mapped(rng, x, &[2, 2, 5, 4], move |t, v| {
        let p = split(t, v, &[xs.clone(), ks.clone()])?;
        t.conv2d(p[0], p[1], dilation)
    }))
}

fn selection(rng: &mut ChaCha8Rng, which: Extreme) -> Result<Probe> {
    let x = uniform(rng, &[3, 4]);
    let mask = vec![
        true, false, true, true, false, true, true, false, true, true, true, true,
    ];
    Ok(mapped(rng, x, &[3], move |t, x| {
        t.masked_extreme(x, &mask, which)
    }))
}

const MFGM_CFG: MfgmConfig = MfgmConfig {
    branches: 2,
    channels: 4,
    reduction: 2,
};

fn branch_tensors(rng: &mut ChaCha8Rng) -> BranchParams<Tensor> {
    // wider than the training init so attention and relus see varied inputs
    BranchParams::<Tensor>::shapes(&MFGM_CFG).map(|s| uniform_tensor(rng, s, 0.6))
}

fn constants(t: &mut Tape, p: &BranchParams<Tensor>) -> BranchParams<Var> {
    p.map(|v| t.constant(v.clone()))
}

fn branch_module(
    rng: &mut ChaCha8Rng,
    channels: (usize, usize),
    op: fn(&mut Tape, Var, &BranchParams<Var>) -> Result<Var>,
) -> Result<Probe> {
    let p = branch_tensors(rng);
    let x = uniform(rng, &[2, channels.0, 4, 3]);
    Ok(mapped(rng, x, &[2, channels.1, 4, 3], move |t, x| {
        let pv = constants(t, &p);
        op(t, x, &pv)
    }))
}

fn branch_parameters(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let p = branch_tensors(rng);
    let shapes: Vec<Vec<usize>> = p.named().iter().map(|(_, v)| v.shape().to_vec()).collect();
    let x = pack(&p.named().iter().map(|(_, v)| *v).collect::<Vec<_>>());
    let f = uniform(rng, &[2, 4, 4, 3]);
    Ok(mapped(rng, x, &[2, 4, 4, 3], move |t, x| {
        let mut parts = split(t, x, &shapes)?.into_iter();
        let pv = BranchParams::<Tensor>::shapes(&MFGM_CFG).map(|_| parts.next().expect("layout"));
        let fv = t.constant(f.clone());
        branch_forward(t, fv, &pv)
    }))
}

fn mfgm_module(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let params: Vec<BranchParams<Tensor>> = (0..MFGM_CFG.branches)
        .map(|_| branch_tensors(rng))
        .collect();
    let x = uniform(rng, &[2, 4, 4, 3]);
    Ok(mapped(rng, x, &[2, 12, 4, 3], move |t, x| {
        let pv: Vec<_> = params.iter().map(|p| constants(t, p)).collect();
        Ok(mfgm_forward(t, x, &MFGM_CFG, &pv)?.stacked)
    }))
}

fn plm_module(rng: &mut ChaCha8Rng, wrt_prototypes: bool) -> Result<Probe> {
    let bank = PrototypeBank::init(3, 4, rng)?.into_tensor();
    let f = uniform(rng, &[2, 4, 3, 2]);
    let (x, other) = if wrt_prototypes { (bank, f) } else { (f, bank) };
    Ok(mapped(rng, x, &[2, 16], move |t, x| {
        let o = t.constant(other.clone());
        let (f, p) = if wrt_prototypes { (o, x) } else { (x, o) };
        Ok(plm_forward(t, f, p)?.descriptor)
    }))
}

fn pipeline(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let cfg = ModelConfig {
        channels: 4,
        branches: 1,
        reduction: 2,
        prototypes: 3,
        classes: 2,
    };
    let state = ModelState::init(&cfg, rng.random())?;
    let x = uniform(rng, &[2, 4, 3, 3]);
    Ok(mapped(rng, x, &[2, cfg.descriptor_dim()], move |t, x| {
        let m = state.map(|v| t.constant(v.clone()));
        Ok(forward_pipeline(t, &m, x)?.descriptor)
    }))
}

/// `ids` identities with `k` samples per modality, identity-major, VIS rows
/// before IR rows.
fn batch_layout(ids: usize, k: usize) -> (Vec<usize>, Vec<Modality>) {
    let mut labels = Vec::new();
    let mut mods = Vec::new();
    for id in 0..ids {
        for m in Modality::BOTH {
            for _ in 0..k {
                labels.push(id);
                mods.push(m);
            }
        }
    }
    (labels, mods)
}

fn identity_batch(descriptors: Var, global: Var, ids: usize, k: usize) -> IdentityBatch {
    let (labels, modalities) = batch_layout(ids, k);
    IdentityBatch {
        descriptors,
        global,
        labels,
        modalities,
        original: None,
        generated: Vec::new(),
    }
}

fn id_loss(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let (n, d, classes) = (8, 5, 3);
    let params = ClassifierParams::init(d, classes, rng);
    let scale = bounded(rng, &[d], 0.5, 1.5, true);
    let x = pack(&[&uniform(rng, &[n, d]), &params.weight, &scale]);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let shapes = vec![vec![n, d], vec![d, classes], vec![d]];
    Ok(Probe {
        x,
        f: Box::new(move |t, x| {
            let v = split(t, x, &shapes)?;
            let mut p = params.map(|p| t.constant(p.clone()));
            p.weight = v[1];
            p.bn_scale = v[2];
            identity_loss(t, v[0], &labels, &p)
        }),
    })
}

fn tri_loss(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let x = uniform(rng, &[12, 3]);
    let (labels, _) = batch_layout(3, 2);
    Ok(Probe {
        x,
        f: Box::new(move |t, x| triplet_loss(t, x, &labels, 0.3)),
    })
}

fn ch_loss(rng: &mut ChaCha8Rng, variant: ChVariant) -> Result<Probe> {
    let pixels = uniform(rng, &[2, 7, 4]);
    let x = uniform(rng, &[4, 4]);
    Ok(Probe {
        x,
        f: Box::new(move |t, p| {
            let i = t.constant(pixels.clone());
            let r = prototype_logits(t, p, i)?;
            cosine_heterogeneity_loss(t, r, variant)
        }),
    })
}

fn dcs_loss(rng: &mut ChaCha8Rng) -> Result<Probe> {
    // spread comparable to the thresholds so both hinges switch
    let x = uniform_tensor(rng, &[12, 3], 0.6);
    let global = uniform(rng, &[12, 2]);
    Ok(Probe {
        x,
        f: Box::new(move |t, x| {
            let g = t.constant(global.clone());
            let b = identity_batch(x, g, 3, 2);
            let c = compute_centers(t, &b)?;
            dual_center_separation_loss(t, &b, &c, 0.1, 1.0)
        }),
    })
}

fn cpm(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let (n, c, branches) = (12, 3, 2);
    let x = uniform(rng, &[(branches + 1) * n * c]);
    let fixed = uniform(rng, &[n, c]);
    Ok(Probe {
        x,
        f: Box::new(move |t, x| {
            let shapes = vec![vec![n, c]; branches + 1];
            let v = split(t, x, &shapes)?;
            let d = t.constant(fixed.clone());
            let mut b = identity_batch(d, d, 3, 2);
            b.original = Some(v[0]);
            b.generated = v[1..].to_vec();
            let centers = compute_centers(t, &b)?;
            cpm_loss(t, &centers, 0.3)
        }),
    })
}

fn batch_norm_module(rng: &mut ChaCha8Rng) -> Result<Probe> {
    let scale = bounded(rng, &[4], 0.5, 1.5, true);
    let shift = uniform(rng, &[4]);
    let x = uniform(rng, &[6, 4]);
    Ok(mapped(rng, x, &[6, 4], move |t, x| {
        let (s, b) = (t.constant(scale.clone()), t.constant(shift.clone()));
        batch_norm(t, x, s, b)
    }))
}

macro_rules! check {
    ($name:expr, $build:expr) => {
        Check {
            name: $name,
            build: $build,
        }
    };
}

/// Every registered check, in table order.
pub fn registry() -> Vec<Check> {
    vec![
        check!("op.neg", |r| unary(r, UnaryKind::Neg, 0.0, 2.0, false)),
        check!("op.relu", |r| unary(r, UnaryKind::Relu, 0.0, 2.0, false)),
        check!("op.sigmoid", |r| unary(
            r,
            UnaryKind::Sigmoid,
            0.0,
            3.0,
            false
        )),
        check!("op.exp", |r| unary(r, UnaryKind::Exp, 0.0, 2.0, false)),
        check!("op.ln", |r| unary(r, UnaryKind::Ln, 0.5, 3.0, true)),
        check!("op.sqrt", |r| unary(r, UnaryKind::Sqrt, 0.5, 3.0, true)),
        check!("op.square", |r| unary(
            r,
            UnaryKind::Square,
            0.0,
            2.0,
            false
        )),
        check!("op.scale", |r| unary(
            r,
            UnaryKind::Scale(-1.7),
            0.0,
            2.0,
            false
        )),
        check!("op.add_scalar", |r| unary(
            r,
            UnaryKind::AddScalar(0.4),
            0.0,
            2.0,
            false
        )),
        check!("op.add", |r| binary(r, Tape::add, false)),
        check!("op.sub", |r| binary(r, Tape::sub, false)),
        check!("op.mul", |r| binary(r, Tape::mul, false)),
        check!("op.div", |r| binary(r, Tape::div, true)),
        check!("op.matmul", |r| two_operands(
            r,
            &[3, 4],
            &[4, 2],
            &[3, 2],
            Tape::matmul
        )),
        check!("op.matmul_batched", |r| two_operands(
            r,
            &[2, 3, 4],
            &[2, 4, 2],
            &[2, 3, 2],
            Tape::matmul
        )),
        check!("op.transpose", |r| {
            let x = uniform(r, &[3, 4]);
            Ok(mapped(r, x, &[4, 3], |t, x| t.transpose(x)))
        }),
        check!("op.conv2d_dil1", |r| conv(r, 1)),
        check!("op.conv2d_dil2", |r| conv(r, 2)),
        check!("op.conv2d_dil3", |r| conv(r, 3)),
        check!("op.sum", |r| {
            let x = uniform(r, &[2, 3, 4]);
            Ok(mapped(r, x, &[2, 4], |t, x| t.sum(x, 1)))
        }),
        check!("op.mean", |r| {
            let x = uniform(r, &[2, 3, 4]);
            Ok(mapped(r, x, &[2, 3], |t, x| t.mean(x, 2)))
        }),
        check!("op.sum_all", |r| {
            let x = uniform(r, &[2, 3]);
            Ok(mapped(r, x, &[], |t, x| t.sum_all(x)))
        }),
        check!("op.mean_all", |r| {
            let x = uniform(r, &[2, 3]);
            Ok(mapped(r, x, &[], |t, x| t.mean_all(x)))
        }),
        check!("op.max", |r| {
            let x = uniform(r, &[2, 4, 3]);
            Ok(mapped(r, x, &[2, 3], |t, x| t.max(x, 1)))
        }),
        check!("op.masked_max", |r| selection(r, Extreme::Max)),
        check!("op.masked_min", |r| selection(r, Extreme::Min)),
        check!("op.concat", |r| {
            two_operands(r, &[2, 3], &[2, 2], &[2, 5], |t, a, b| t.concat(&[a, b], 1))
        }),
        check!("op.reshape", |r| {
            let x = uniform(r, &[2, 6]);
            Ok(mapped(r, x, &[3, 4], |t, x| t.reshape(x, &[3, 4])))
        }),
        check!("op.permute", |r| {
            let x = uniform(r, &[2, 3, 4]);
            Ok(mapped(r, x, &[4, 2, 3], |t, x| t.permute(x, &[2, 0, 1])))
        }),
        check!("op.narrow", |r| {
            let x = uniform(r, &[3, 5]);
            Ok(mapped(r, x, &[3, 2], |t, x| t.narrow(x, 1, 2, 2)))
        }),
        check!("op.index_select", |r| {
            let x = uniform(r, &[3, 2]);
            Ok(mapped(r, x, &[4, 2], |t, x| {
                t.index_select(x, &[2, 0, 2, 1])
            }))
        }),
        check!("op.pairwise_euclidean", |r| {
            two_operands(r, &[3, 4], &[2, 4], &[3, 2], Tape::pairwise_euclidean)
        }),
        check!("op.rowwise_euclidean", |r| {
            two_operands(r, &[3, 4], &[3, 4], &[3], Tape::rowwise_euclidean)
        }),
        check!("op.norm_last", |r| {
            let x = uniform(r, &[3, 4]);
            Ok(mapped(r, x, &[3], |t, x| t.norm_last(x)))
        }),
        check!("op.cosine", |r| two_operands(
            r,
            &[5],
            &[5],
            &[],
            Tape::cosine
        )),
        check!("op.cross_entropy", |r| {
            let x = uniform_tensor(r, &[4, 3], 2.0);
            Ok(Probe {
                x,
                f: Box::new(|t, x| t.cross_entropy(x, &[0, 2, 1, 2])),
            })
        }),
        check!("module.dilated_fusion", |r| branch_module(
            r,
            (4, 2),
            dilated_fusion
        )),
        check!("module.channel_attention", |r| branch_module(
            r,
            (2, 2),
            channel_attention
        )),
        check!("module.spatial_attention", |r| branch_module(
            r,
            (2, 2),
            spatial_attention
        )),
        check!("module.branch", |r| branch_module(
            r,
            (4, 4),
            branch_forward
        )),
        check!("module.branch_params", branch_parameters),
        check!("module.mfgm", mfgm_module),
        check!("module.plm_features", |r| plm_module(r, false)),
        check!("module.plm_prototypes", |r| plm_module(r, true)),
        check!("module.batch_norm", batch_norm_module),
        check!("module.pipeline", pipeline),
        check!("loss.id", id_loss),
        check!("loss.tri", tri_loss),
        check!("loss.ch_prose", |r| ch_loss(r, ChVariant::Prose)),
        check!("loss.ch_as_written", |r| ch_loss(r, ChVariant::AsWritten)),
        check!("loss.dcs", dcs_loss),
        check!("loss.cpm", cpm),
    ]
}

/// A deliberately wrong gradient: the value is `sum(x²)` but the detached
/// factors leave an analytic gradient of `-2x` instead of `2x`.
pub fn sign_flip_fixture() -> Check {
    check!("fault.sign_flip", |r| {
        let x = bounded(r, &[6], 0.5, 2.0, false);
        Ok(Probe {
            x,
            f: Box::new(|t, x| {
                let sg = t.detach(x);
                let cross = t.mul(sg, x)?;
                let cross = t.sum_all(cross)?;
                let cross = t.scale(cross, -2.0)?;
                let sq = t.square(sg)?;
                let sq = t.sum_all(sq)?;
                let sq = t.scale(sq, 3.0)?;
                t.add(cross, sq)
            }),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_check_passes() {
        let checks = registry();
        let rows = run_suite(&checks, 0).unwrap();
        assert_eq!(rows.len(), checks.len());
        for r in &rows {
            assert!(r.passed, "{}: {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn sign_flip_is_caught() {
        let rows = run_suite(&[sign_flip_fixture()], 0).unwrap();
        assert!(!rows[0].passed);
        // analytic -2x against numeric 2x
        assert!(rows[0].max_rel_err > 1.0);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let rows = run_suite(&registry()[..3], 1).unwrap();
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().skip(1).all(|l| l.ends_with("pass")));
    }
}
