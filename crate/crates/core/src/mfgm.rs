//! Multi-feature generation: `B` independent branches, each fusing three
//! dilated 3x3 convolutions and re-weighting the result with channel and
//! spatial attention before a per-pixel linear map restores the input width.
//! The branch outputs are stacked after the untouched input map.

use rand::Rng;

use crate::error::{PdmError, Result};
use crate::ndnum::{Tape, Tensor, Var};
use crate::rng::uniform_tensor;

pub const DILATIONS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfgmConfig {
    pub branches: usize,
    pub channels: usize,
    pub reduction: usize,
}

impl Default for MfgmConfig {
    fn default() -> Self {
        MfgmConfig {
            branches: 2,
            channels: 16,
            reduction: 4,
        }
    }
}

impl MfgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(PdmError::contract("MFGM needs at least one branch"));
        }
        if self.reduction == 0 || self.channels == 0 || self.channels % self.reduction != 0 {
            return Err(PdmError::contract(format!(
                "channels ({}) must be a positive multiple of the reduction factor ({})",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    /// Channel count of the fused dilated-conv output (`c / r`).
    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }

    /// Bottleneck width inside channel attention.
    pub fn attention_hidden(&self) -> usize {
        (self.reduced() / 2).max(1)
    }
}

/// Parameters of one branch. Generic so the same layout holds raw tensors,
/// tape handles, gradients or optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<T> {
    /// `[c/r, c, 3, 3]` kernels for dilation 1, 2 and 3.
    pub dilated: [T; 3],
    /// `[c/r, hidden]`
    pub ca_down_w: T,
    pub ca_down_b: T,
    /// `[hidden, c/r]`
    pub ca_up_w: T,
    pub ca_up_b: T,
    /// `[1, 2, 3, 3]` over the (mean, max) channel summary.
    pub sa_kernel: T,
    pub sa_bias: T,
    /// `[2c/r, c]`
    pub fc_w: T,
    pub fc_b: T,
}

impl<T> BranchParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BranchParams<U> {
        BranchParams {
            dilated: [
                f(&self.dilated[0]),
                f(&self.dilated[1]),
                f(&self.dilated[2]),
            ],
            ca_down_w: f(&self.ca_down_w),
            ca_down_b: f(&self.ca_down_b),
            ca_up_w: f(&self.ca_up_w),
            ca_up_b: f(&self.ca_up_b),
            sa_kernel: f(&self.sa_kernel),
            sa_bias: f(&self.sa_bias),
            fc_w: f(&self.fc_w),
            fc_b: f(&self.fc_b),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &T)> {
        vec![
            ("dilated1", &self.dilated[0]),
            ("dilated2", &self.dilated[1]),
            ("dilated3", &self.dilated[2]),
            ("ca_down_w", &self.ca_down_w),
            ("ca_down_b", &self.ca_down_b),
            ("ca_up_w", &self.ca_up_w),
            ("ca_up_b", &self.ca_up_b),
            ("sa_kernel", &self.sa_kernel),
            ("sa_bias", &self.sa_bias),
            ("fc_w", &self.fc_w),
            ("fc_b", &self.fc_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        let [d1, d2, d3] = &mut self.dilated;
        vec![
            ("dilated1", d1),
            ("dilated2", d2),
            ("dilated3", d3),
            ("ca_down_w", &mut self.ca_down_w),
            ("ca_down_b", &mut self.ca_down_b),
            ("ca_up_w", &mut self.ca_up_w),
            ("ca_up_b", &mut self.ca_up_b),
            ("sa_kernel", &mut self.sa_kernel),
            ("sa_bias", &mut self.sa_bias),
            ("fc_w", &mut self.fc_w),
            ("fc_b", &mut self.fc_b),
        ]
    }
}

impl BranchParams<Tensor> {
    pub fn shapes(cfg: &MfgmConfig) -> BranchParams<Vec<usize>> {
        let (c, cr, hid) = (cfg.channels, cfg.reduced(), cfg.attention_hidden());
        let conv = vec![cr, c, 3, 3];
        BranchParams {
            dilated: [conv.clone(), conv.clone(), conv],
            ca_down_w: vec![cr, hid],
            ca_down_b: vec![hid],
            ca_up_w: vec![hid, cr],
            ca_up_b: vec![cr],
            sa_kernel: vec![1, 2, 3, 3],
            sa_bias: vec![1],
            fc_w: vec![2 * cr, c],
            fc_b: vec![c],
        }
    }

    pub fn zeros(cfg: &MfgmConfig) -> Self {
        Self::shapes(cfg).map(|s| Tensor::zeros(s.clone()))
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(cfg: &MfgmConfig, rng: &mut impl Rng) -> Self {
        let shapes = Self::shapes(cfg);
        let mut weight = |shape: &Vec<usize>, fan_in: usize| {
            uniform_tensor(rng, shape, 1.0 / (fan_in as f64).sqrt())
        };
        let (c, cr, hid) = (cfg.channels, cfg.reduced(), cfg.attention_hidden());
        BranchParams {
            dilated: [
                weight(&shapes.dilated[0], c * 9),
                weight(&shapes.dilated[1], c * 9),
                weight(&shapes.dilated[2], c * 9),
            ],
            ca_down_w: weight(&shapes.ca_down_w, cr),
            ca_down_b: Tensor::zeros(shapes.ca_down_b),
            ca_up_w: weight(&shapes.ca_up_w, hid),
            ca_up_b: Tensor::zeros(shapes.ca_up_b),
            sa_kernel: weight(&shapes.sa_kernel, 18),
            sa_bias: Tensor::zeros(shapes.sa_bias),
            fc_w: weight(&shapes.fc_w, 2 * cr),
            fc_b: Tensor::zeros(shapes.fc_b),
        }
    }
}

/// Lifts `[c,h,w]` to `[1,c,h,w]`; returns whether it did.
fn as_batched(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    match tape.shape(x).len() {
        4 => Ok((x, false)),
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(tape.shape(x));
            Ok((tape.reshape(x, &s)?, true))
        }
        _ => Err(PdmError::contract(format!(
            "feature map must be [c,h,w] or [n,c,h,w], got {:?}",
            tape.shape(x)
        ))),
    }
}

fn unbatch(tape: &mut Tape, x: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let s = tape.shape(x)[1..].to_vec();
        tape.reshape(x, &s)
    } else {
        Ok(x)
    }
}

/// 1x1 convolution: `[n,ci,h,w] -> [n,co,h,w]` with weight `[ci,co]`.
pub fn pointwise_linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (x, lifted) = as_batched(tape, x)?;
    let [n, ci, h, w] = tape.shape(x)[..] else {
        unreachable!()
    };
    let co = match tape.shape(weight) {
        [wi, wo] if *wi == ci => *wo,
        s => {
            return Err(PdmError::contract(format!(
                "pointwise weight {s:?} does not take {ci} channels"
            )))
        }
    };
    let pix = tape.permute(x, &[0, 2, 3, 1])?;
    let flat = tape.reshape(pix, &[n * h * w, ci])?;
    let mut y = tape.matmul(flat, weight)?;
    if let Some(b) = bias {
        y = tape.add(y, b)?;
    }
    let y = tape.reshape(y, &[n, h, w, co])?;
    let y = tape.permute(y, &[0, 3, 1, 2])?;
    unbatch(tape, y, lifted)
}

/// Sum of the three dilated convolutions, each mapping `c -> c/r`.
pub fn dilated_fusion(tape: &mut Tape, f: Var, branch: &BranchParams<Var>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (kernel, dilation) in branch.dilated.iter().zip(DILATIONS) {
        let y = tape.conv2d(f, *kernel, dilation)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    Ok(acc.expect("three dilations"))
}

/// Per-channel weights in (0,1) from a squeeze-excite bottleneck, shaped
/// `[n, c', 1, 1]` for broadcasting.
pub fn channel_weights(tape: &mut Tape, x: Var, branch: &BranchParams<Var>) -> Result<Var> {
    let (x, _) = as_batched(tape, x)?;
    let [n, c, h, w] = tape.shape(x)[..] else {
        unreachable!()
    };
    let flat = tape.reshape(x, &[n, c, h * w])?;
    let pooled = tape.mean(flat, 2)?;
    let z = tape.matmul(pooled, branch.ca_down_w)?;
    let z = tape.add(z, branch.ca_down_b)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, branch.ca_up_w)?;
    let z = tape.add(z, branch.ca_up_b)?;
    let s = tape.sigmoid(z)?;
    tape.reshape(s, &[n, c, 1, 1])
}

pub fn channel_attention(tape: &mut Tape, x: Var, branch: &BranchParams<Var>) -> Result<Var> {
    let (xb, lifted) = as_batched(tape, x)?;
    let weights = channel_weights(tape, xb, branch)?;
    let y = tape.mul(xb, weights)?;
    unbatch(tape, y, lifted)
}

/// Per-pixel weights in (0,1), shaped `[n, 1, h, w]`.
pub fn spatial_weights(tape: &mut Tape, x: Var, branch: &BranchParams<Var>) -> Result<Var> {
    let (x, _) = as_batched(tape, x)?;
    let [n, _, h, w] = tape.shape(x)[..] else {
        unreachable!()
    };
    let avg = tape.mean(x, 1)?;
    let avg = tape.reshape(avg, &[n, 1, h, w])?;
    let max = tape.max(x, 1)?;
    let max = tape.reshape(max, &[n, 1, h, w])?;
    let summary = tape.concat(&[avg, max], 1)?;
    let z = tape.conv2d(summary, branch.sa_kernel, 1)?;
    let z = tape.add(z, branch.sa_bias)?;
    tape.sigmoid(z)
}

pub fn spatial_attention(tape: &mut Tape, x: Var, branch: &BranchParams<Var>) -> Result<Var> {
    let (xb, lifted) = as_batched(tape, x)?;
    let weights = spatial_weights(tape, xb, branch)?;
    let y = tape.mul(xb, weights)?;
    unbatch(tape, y, lifted)
}

/// One generated embedding: `FC(ReLU([CA(f'), SA(f')]))` with `f'` the
/// dilated fusion of `f`. Output has the shape of `f`.
pub fn branch_forward(tape: &mut Tape, f: Var, branch: &BranchParams<Var>) -> Result<Var> {
    let (fb, lifted) = as_batched(tape, f)?;
    let fused = dilated_fusion(tape, fb, branch)?;
    let ca = channel_attention(tape, fused, branch)?;
    let sa = spatial_attention(tape, fused, branch)?;
    let both = tape.concat(&[ca, sa], 1)?;
    let act = tape.relu(both)?;
    let out = pointwise_linear(tape, act, branch.fc_w, Some(branch.fc_b))?;
    unbatch(tape, out, lifted)
}

#[derive(Clone, Debug)]
pub struct MfgmOutput {
    /// `[f, f_1+, ..., f_B+]` along channels.
    pub stacked: Var,
    /// The generated maps `f_i+`, one per branch.
    pub generated: Vec<Var>,
}

pub fn mfgm_forward(
    tape: &mut Tape,
    f: Var,
    cfg: &MfgmConfig,
    branches: &[BranchParams<Var>],
) -> Result<MfgmOutput> {
    cfg.validate()?;
    if branches.len() != cfg.branches {
        return Err(PdmError::contract(format!(
            "config has {} branches, {} parameter sets given",
            cfg.branches,
            branches.len()
        )));
    }
    let channel_axis = tape.shape(f).len() - 3;
    if tape.shape(f)[channel_axis] != cfg.channels {
        return Err(PdmError::contract(format!(
            "feature map has {} channels, config expects {}",
            tape.shape(f)[channel_axis],
            cfg.channels
        )));
    }
    let generated = branches
        .iter()
        .map(|b| branch_forward(tape, f, b))
        .collect::<Result<Vec<_>>>()?;
    let mut parts = vec![f];
    parts.extend(&generated);
    let stacked = tape.concat(&parts, channel_axis)?;
    Ok(MfgmOutput { stacked, generated })
}
