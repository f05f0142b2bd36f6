//! Optical flow composed entirely from differentiable graph ops, so flow
//! features can sit inside the training objective. Default estimator is a
//! windowed Lucas-Kanade solve; the trait leaves room for a learned one.

use crate::{data, Error, Result};
use lipsynth_grad::{ConvSpec, Exec, Graph, Id, Tensor};

pub trait FlowEstimator {
    fn name(&self) -> &'static str;
    /// [N, 3, T, H, W] video -> [N, 2, T-1, H, W] flow (u = x, v = y),
    /// where flow is the motion of the pattern from frame t to t+1.
    fn flow(&self, g: &mut Graph, video: Id) -> Result<Id>;
}

/// Classic windowed Lucas-Kanade on blurred luma with central-difference
/// gradients and a Tikhonov-regularized closed-form 2x2 solve. Zero motion
/// yields exactly zero flow regardless of the regularizer.
pub struct LucasKanade {
    pub window: usize,
    pub delta: f64,
}

impl Default for LucasKanade {
    fn default() -> Self {
        Self { window: 7, delta: 1e-3 }
    }
}

fn const_conv(g: &mut Graph, x: Id, shape: &[usize], data: Vec<f64>, pad: [usize; 3]) -> Id {
    let w = g.constant(Tensor::new(shape, data));
    g.conv3d(x, w, None, ConvSpec::new([1, 1, 1], pad))
}

impl FlowEstimator for LucasKanade {
    fn name(&self) -> &'static str {
        "lucas-kanade"
    }

    fn flow(&self, g: &mut Graph, video: Id) -> Result<Id> {
        let shape = g.shape(video).to_vec();
        if shape.len() != 5 || shape[1] != 3 {
            return Err(Error::invalid("flow expects [N, 3, T, H, W]"));
        }
        let t = shape[2];
        if t < 2 {
            return Err(Error::invalid("flow needs at least 2 frames"));
        }
        if self.window % 2 == 0 {
            return Err(Error::invalid("window must be odd"));
        }

        let luma = const_conv(g, video, &[1, 3, 1, 1, 1], vec![0.299, 0.587, 0.114], [0; 3]);
        let binom = [1.0, 4.0, 6.0, 4.0, 1.0];
        let mut blur_k = Vec::with_capacity(25);
        for a in binom {
            for b in binom {
                blur_k.push(a * b / 256.0);
            }
        }
        let blurred = const_conv(g, luma, &[1, 1, 1, 5, 5], blur_k, [0, 2, 2]);

        let ia = g.narrow(blurred, 2, 0, t - 1);
        let ib = g.narrow(blurred, 2, 1, t - 1);
        let it = g.sub(ib, ia);
        let sum = g.add(ia, ib);
        let avg = g.mul_scalar(sum, 0.5);

        let gx = const_conv(g, avg, &[1, 1, 1, 1, 3], vec![-0.5, 0.0, 0.5], [0, 0, 1]);
        let gy = const_conv(g, avg, &[1, 1, 1, 3, 1], vec![-0.5, 0.0, 0.5], [0, 1, 0]);

        let k = self.window;
        let half = k / 2;
        let win = |g: &mut Graph, x: Id| {
            const_conv(g, x, &[1, 1, 1, k, k], vec![1.0; k * k], [0, half, half])
        };
        let gxgx = g.mul(gx, gx);
        let sxx = win(g, gxgx);
        let gxgy = g.mul(gx, gy);
        let sxy = win(g, gxgy);
        let gygy = g.mul(gy, gy);
        let syy = win(g, gygy);
        let gxit = g.mul(gx, it);
        let sxt = win(g, gxit);
        let gyit = g.mul(gy, it);
        let syt = win(g, gyit);

        let sxx_d = g.add_scalar(sxx, self.delta);
        let syy_d = g.add_scalar(syy, self.delta);
        let prod = g.mul(sxx_d, syy_d);
        let sxy2 = g.square(sxy);
        let det = g.sub(prod, sxy2);

        let nu1 = g.mul(syy_d, sxt);
        let nu2 = g.mul(sxy, syt);
        let nu = g.sub(nu1, nu2);
        let u_pos = g.div(nu, det);
        let u = g.neg(u_pos);

        let nv1 = g.mul(sxx_d, syt);
        let nv2 = g.mul(sxy, sxt);
        let nv = g.sub(nv1, nv2);
        let v_pos = g.div(nv, det);
        let v = g.neg(v_pos);

        Ok(g.concat(&[u, v], 1))
    }
}

/// Average-pool the video spatially before estimating flow; the correlation
/// and discriminator branches run flow at 16x16.
pub fn pooled_flow(
    g: &mut Graph,
    video: Id,
    est: &dyn FlowEstimator,
    pool: [usize; 3],
) -> Result<Id> {
    let x = if pool == [1, 1, 1] { video } else { g.avgpool3d(video, pool, pool) };
    est.flow(g, x)
}

/// Mean flow magnitude per frame transition of a single [T, C, H, W] video
/// in [0, 1]; the visual half of the delay analysis.
pub fn flow_magnitude_series(
    frames: &Tensor,
    est: &dyn FlowEstimator,
    exec: Exec,
) -> Result<Vec<f64>> {
    let t = frames.shape()[0];
    if t < 2 {
        return Err(Error::invalid("need at least 2 frames"));
    }
    let mut g = Graph::new(exec);
    let video = g.constant(data::to_ncthw(frames));
    let flow = est.flow(&mut g, video)?;
    let val = g.value(flow);
    let (tm1, h, w) = (val.shape()[2], val.shape()[3], val.shape()[4]);
    let hw = h * w;
    let d = val.data();
    let mut out = Vec::with_capacity(tm1);
    for k in 0..tm1 {
        let us = &d[k * hw..(k + 1) * hw];
        let vs = &d[(tm1 + k) * hw..(tm1 + k + 1) * hw];
        let mean = us
            .iter()
            .zip(vs)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .sum::<f64>()
            / hw as f64;
        out.push(mean);
    }
    Ok(out)
}
