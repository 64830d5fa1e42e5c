//! Scalar-loop reference implementations used only by unit tests. Nothing in
//! here touches the tape.

pub mod oracle {
    use crate::mfgm::{BranchParams, DILATIONS};
    use crate::ndnum::Tensor;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct sliding-window 3x3 convolution with padding = dilation.
    pub fn conv2d(x: &Tensor, k: &Tensor, dil: usize) -> Tensor {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let co = k.shape()[0];
        let mut out = Tensor::zeros([co, h, w]);
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for i in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + (ky as isize - 1) * dil as isize;
                                let sx = xx as isize + (kx as isize - 1) * dil as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += k.at(&[o, i, ky, kx]) * x.at(&[i, sy as usize, sx as usize]);
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    pub fn channel_attention(x: &Tensor, p: &BranchParams<Tensor>) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hid = p.ca_down_b.len();
        let pooled: Vec<f64> = (0..c)
            .map(|ch| x.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let mid: Vec<f64> = (0..hid)
            .map(|j| {
                let mut s = p.ca_down_b.data()[j];
                for (i, pv) in pooled.iter().enumerate() {
                    s += pv * p.ca_down_w.at(&[i, j]);
                }
                s.max(0.0)
            })
            .collect();
        let weights: Vec<f64> = (0..c)
            .map(|i| {
                let mut s = p.ca_up_b.data()[i];
                for (j, m) in mid.iter().enumerate() {
                    s += m * p.ca_up_w.at(&[j, i]);
                }
                sigmoid(s)
            })
            .collect();
        Tensor::from_fn([c, h, w], |idx| x.data()[idx] * weights[idx / (h * w)])
    }

    pub fn spatial_attention(x: &Tensor, p: &BranchParams<Tensor>) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut summary = Tensor::zeros([2, h, w]);
        for y in 0..h {
            for xx in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| x.at(&[ch, y, xx])).collect();
                summary.data_mut()[y * w + xx] = vals.iter().sum::<f64>() / c as f64;
                summary.data_mut()[h * w + y * w + xx] =
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let z = conv2d(&summary, &p.sa_kernel, 1);
        let b = p.sa_bias.data()[0];
        Tensor::from_fn([c, h, w], |idx| {
            x.data()[idx] * sigmoid(z.data()[idx % (h * w)] + b)
        })
    }

    pub fn branch(f: &Tensor, p: &BranchParams<Tensor>) -> Tensor {
        let (h, w) = (f.shape()[1], f.shape()[2]);
        let cr = p.dilated[0].shape()[0];
        let mut fused = Tensor::zeros([cr, h, w]);
        for (k, d) in p.dilated.iter().zip(DILATIONS) {
            let part = conv2d(f, k, d);
            for (a, b) in fused.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
        let ca = channel_attention(&fused, p);
        let sa = spatial_attention(&fused, p);
        let mut cat: Vec<f64> = ca.data().to_vec();
        cat.extend_from_slice(sa.data());
        let co = p.fc_b.len();
        let mut out = Tensor::zeros([co, h, w]);
        for o in 0..co {
            for pix in 0..h * w {
                let mut s = p.fc_b.data()[o];
                for i in 0..2 * cr {
                    s += cat[i * h * w + pix].max(0.0) * p.fc_w.at(&[i, o]);
                }
                out.data_mut()[o * h * w + pix] = s;
            }
        }
        out
    }
}
