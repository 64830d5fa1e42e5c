//! Prototype learning: `m` learnable prototypes score every pixel of a map
//! through a sigmoid of their dot product, and each prototype pools the
//! pixels with those scores into one local feature. The local features are
//! concatenated with the globally pooled map.
//!
//! All functions accept a single map `[c,h,w]` or a batch `[N,c,h,w]`; the
//! batch axis is carried through every output.

use rand::Rng;

use crate::error::{PdmError, Result};
use crate::ndnum::{Tape, Tensor, Var};
use crate::rng::normal_tensor;

/// Learnable prototype matrix `[m, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank(Tensor);

impl PrototypeBank {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        let [m, c] = prototypes.shape()[..] else {
            return Err(PdmError::contract("prototypes must be an [m, c] matrix"));
        };
        if m < 2 {
            return Err(PdmError::contract(format!(
                "at least two prototypes are required, got {m}"
            )));
        }
        if let Some(row) = prototypes
            .data()
            .chunks(c)
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(PdmError::Degenerate(format!(
                "prototype {row} has zero norm"
            )));
        }
        Ok(PrototypeBank(prototypes))
    }

    /// Zero-mean gaussian rows rescaled to unit norm.
    pub fn init(m: usize, c: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = normal_tensor(rng, &[m, c], 1.0);
        for row in p.data_mut().chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(p)
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Fixed 2-D sinusoidal encoding `[h*w, c]`: the first `c/2` channels encode
/// the row index, the rest the column index.
pub fn position_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c % 2 != 0 || c == 0 {
        return Err(PdmError::Unsupported(format!(
            "position encoding needs an even channel count, got {c}"
        )));
    }
    let half = c / 2;
    let code = |pos: usize, t: usize| {
        let k = (t / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * k / half as f64);
        if t % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    Ok(Tensor::from_fn([h * w, c], |idx| {
        let (pix, ch) = (idx / c, idx % c);
        let (row, col) = (pix / w, pix % w);
        if ch < half {
            code(row, ch)
        } else {
            code(col, ch - half)
        }
    }))
}

fn batched(tape: &mut Tape, f: Var) -> Result<(Var, bool)> {
    match tape.shape(f).len() {
        4 => Ok((f, false)),
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(tape.shape(f));
            Ok((tape.reshape(f, &s)?, true))
        }
        _ => Err(PdmError::contract(format!(
            "feature map must be [c,h,w] or [n,c,h,w], got {:?}",
            tape.shape(f)
        ))),
    }
}

fn drop_batch(tape: &mut Tape, x: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let s = tape.shape(x)[1..].to_vec();
        tape.reshape(x, &s)
    } else {
        Ok(x)
    }
}

/// Flattens a map to pixel rows (`[n,c]`, or `[N,n,c]`) plus the position code.
pub fn encode_positions(tape: &mut Tape, f: Var) -> Result<Var> {
    let (fb, lifted) = batched(tape, f)?;
    let [nb, c, h, w] = tape.shape(fb)[..] else {
        unreachable!()
    };
    let code = position_encoding(h, w, c)?;
    let flat = tape.reshape(fb, &[nb, c, h * w])?;
    let pixels = tape.permute(flat, &[0, 2, 1])?;
    let code = tape.constant(code);
    let encoded = tape.add(pixels, code)?;
    drop_batch(tape, encoded, lifted)
}

fn pixel_batch(tape: &mut Tape, pixels: Var) -> Result<(Var, bool)> {
    match tape.shape(pixels).len() {
        3 => Ok((pixels, false)),
        2 => {
            let mut s = vec![1];
            s.extend_from_slice(tape.shape(pixels));
            Ok((tape.reshape(pixels, &s)?, true))
        }
        _ => Err(PdmError::contract(
            "pixel features must be [n,c] or [N,n,c]",
        )),
    }
}

/// Raw prototype responses `P Iᵀ`: `[m,n]` (or `[N,m,n]`).
pub fn prototype_logits(tape: &mut Tape, prototypes: Var, pixels: Var) -> Result<Var> {
    let (ib, lifted) = pixel_batch(tape, pixels)?;
    let [nb, n, c] = tape.shape(ib)[..] else {
        unreachable!()
    };
    let [m, pc] = tape.shape(prototypes)[..] else {
        return Err(PdmError::contract("prototypes must be [m, c]"));
    };
    if pc != c {
        return Err(PdmError::contract(format!(
            "prototypes have {pc} channels, pixel features {c}"
        )));
    }
    let flat = tape.reshape(ib, &[nb * n, c])?;
    let pt = tape.transpose(prototypes)?;
    let scores = tape.matmul(flat, pt)?;
    let scores = tape.reshape(scores, &[nb, n, m])?;
    let scores = tape.permute(scores, &[0, 2, 1])?;
    drop_batch(tape, scores, lifted)
}

/// `S = sigmoid(P Iᵀ)`, entries in (0,1).
pub fn prototype_similarity(tape: &mut Tape, prototypes: Var, pixels: Var) -> Result<Var> {
    let logits = prototype_logits(tape, prototypes, pixels)?;
    tape.sigmoid(logits)
}

/// `p_i = (1/n) Σ_j S_ij I_j`: `[m,c]` (or `[N,m,c]`).
pub fn local_features(tape: &mut Tape, similarity: Var, pixels: Var) -> Result<Var> {
    let (ib, lifted_i) = pixel_batch(tape, pixels)?;
    let sb = match tape.shape(similarity).len() {
        3 => similarity,
        2 => {
            let mut s = vec![1];
            s.extend_from_slice(tape.shape(similarity));
            tape.reshape(similarity, &s)?
        }
        _ => return Err(PdmError::contract("similarity must be [m,n] or [N,m,n]")),
    };
    let n = tape.shape(ib)[1];
    if tape.shape(sb)[2] != n || tape.shape(sb)[0] != tape.shape(ib)[0] {
        return Err(PdmError::contract(format!(
            "similarity {:?} does not match pixel features {:?}",
            tape.shape(sb),
            tape.shape(ib)
        )));
    }
    let pooled = tape.matmul(sb, ib)?;
    let pooled = tape.scale(pooled, 1.0 / n as f64)?;
    drop_batch(tape, pooled, lifted_i)
}

/// Spatial mean of a map: `[c]` (or `[N,c]`).
pub fn global_feature(tape: &mut Tape, f: Var) -> Result<Var> {
    let (fb, lifted) = batched(tape, f)?;
    let [nb, c, h, w] = tape.shape(fb)[..] else {
        unreachable!()
    };
    let flat = tape.reshape(fb, &[nb, c, h * w])?;
    let g = tape.mean(flat, 2)?;
    drop_batch(tape, g, lifted)
}

/// `[p_1, ..., p_m, F_g]`, length `(m+1)c` (or `[N,(m+1)c]`).
pub fn assemble_descriptor(tape: &mut Tape, local: Var, f: Var) -> Result<Var> {
    let (fb, lifted) = batched(tape, f)?;
    let lb = if tape.shape(local).len() == 2 {
        let mut s = vec![1];
        s.extend_from_slice(tape.shape(local));
        tape.reshape(local, &s)?
    } else {
        local
    };
    let [nb, m, c] = tape.shape(lb)[..] else {
        return Err(PdmError::contract(
            "local features must be [m,c] or [N,m,c]",
        ));
    };
    if tape.shape(fb)[0] != nb || tape.shape(fb)[1] != c {
        return Err(PdmError::contract(format!(
            "local features {:?} do not match map {:?}",
            tape.shape(lb),
            tape.shape(fb)
        )));
    }
    let flat = tape.reshape(lb, &[nb, m * c])?;
    let global = global_feature(tape, fb)?;
    let desc = tape.concat(&[flat, global], 1)?;
    if lifted {
        tape.reshape(desc, &[(m + 1) * c])
    } else {
        Ok(desc)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PlmOutput {
    /// `[N, (m+1)c]`
    pub descriptor: Var,
    /// `[N, c]`
    pub global: Var,
    /// `[N, m, n]` pre-sigmoid responses, the vectors compared by the
    /// cosine heterogeneity loss.
    pub logits: Var,
    /// `[N, n, c]`
    pub pixels: Var,
}

/// Full prototype pass over a batch `[N,c,h,w]`.
pub fn plm_forward(tape: &mut Tape, f: Var, prototypes: Var) -> Result<PlmOutput> {
    let (fb, _) = batched(tape, f)?;
    let pixels = encode_positions(tape, fb)?;
    let logits = prototype_logits(tape, prototypes, pixels)?;
    let similarity = tape.sigmoid(logits)?;
    let local = local_features(tape, similarity, pixels)?;
    let descriptor = assemble_descriptor(tape, local, fb)?;
    let global = global_feature(tape, fb)?;
    Ok(PlmOutput {
        descriptor,
        global,
        logits,
        pixels,
    })
}
