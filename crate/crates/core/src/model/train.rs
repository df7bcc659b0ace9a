use super::network::forward;
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::metrics::{psnr, rgb_to_y, ImageU8};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Real;

/// Adam with bias correction. Moments are kept per tensor in canonical order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.t as usize
    }

    /// One update of `params` given gradients with the same layout.
    pub fn step(&mut self, params: &ModelParams<T>, grads: &ModelParams<T>) -> Result<ModelParams<T>> {
        let p = params.named();
        let g = grads.named();
        if p.len() != g.len() {
            return Err(Error::InvalidArgument("gradient layout does not match parameters".into()));
        }
        if self.m.is_empty() {
            self.m = p.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let mut out = Vec::with_capacity(p.len());
        for (i, ((name, pt), (_, gt))) in p.iter().zip(&g).enumerate() {
            if pt.shape() != gt.shape() {
                return Err(Error::shape("adam", pt.shape(), gt.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != pt.numel() {
                return Err(Error::InvalidArgument(format!("optimizer state does not fit {name}")));
            }
            let mut next = pt.to_vec();
            for (j, (x, &gr)) in next.iter_mut().zip(gt.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gr;
                v[j] = b2 * v[j] + (one - b2) * gr * gr;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
            out.push(Tensor::from_vec(pt.shape(), next)?);
        }
        params.from_ordered(out)
    }
}

#[derive(Debug, Clone)]
pub struct OverfitReport<T: Real> {
    pub params: ModelParams<T>,
    /// Training-image Y PSNR (dB) before the first step and after each step.
    pub psnr_trace: Vec<f64>,
    /// L1 loss at the same points as `psnr_trace`.
    pub loss_trace: Vec<f64>,
}

impl<T: Real> OverfitReport<T> {
    pub fn final_psnr(&self) -> f64 {
        *self.psnr_trace.last().expect("trace is non-empty")
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is non-empty")
    }
}

/// Converts `[B, H, W, 3]` values in `[0, 1]` to 8-bit images.
pub fn to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageU8>> {
    let (b, h, w) = match *t.shape() {
        [b, h, w, 3] => (b, h, w),
        _ => return Err(Error::invalid_shape("to_images", t.shape(), "expected B x H x W x 3")),
    };
    let per = h * w * 3;
    (0..b)
        .map(|i| {
            let px: Vec<f64> = t.data()[i * per..(i + 1) * per].iter().map(|v| v.to_f64_lossy()).collect();
            ImageU8::from_unit_f64(h, w, &px)
        })
        .collect()
}

/// Mean over the batch of Y-channel PSNR after 8-bit quantization.
pub fn batch_psnr_y<T: Real>(out: &Tensor<T>, target: &Tensor<T>, crop: usize) -> Result<f64> {
    let a = to_images(out)?;
    let b = to_images(target)?;
    if a.len() != b.len() {
        return Err(Error::shape("batch_psnr_y", out.shape(), target.shape()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        total += psnr(&rgb_to_y(x), &rgb_to_y(y), crop)?;
    }
    Ok(total / a.len() as f64)
}

fn l1<T: Real>(out: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    out.sub(hr)?.abs()?.mean_all()
}

/// Fits `params` to a single `(lr, hr)` pair with Adam on the L1 loss.
///
/// Deterministic: no sampling happens inside the loop.
pub fn overfit_single<T: Real>(
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    steps: usize,
    lr_rate: f64,
) -> Result<OverfitReport<T>> {
    config.validate()?;
    params.check_shapes(config)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(lr_rate >= 0.0) || !lr_rate.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be finite and non-negative, got {lr_rate}")));
    }
    let s = config.scale;
    match (lr.shape(), hr.shape()) {
        ([b, h, w, 3], [hb, hh, hw, 3]) if b == hb && h * s == *hh && w * s == *hw => {}
        _ => return Err(Error::shape("overfit_single", lr.shape(), hr.shape())),
    }

    let tape = Tape::new();
    let lr_v = Var::constant(lr.clone());
    let hr_v = Var::constant(hr.clone());
    let mut adam = Adam::new(lr_rate);
    let mut params = params.clone();
    let mut psnr_trace = Vec::with_capacity(steps + 1);
    let mut loss_trace = Vec::with_capacity(steps + 1);

    for step in 0..=steps {
        tape.reset();
        let leaves = params.try_map(|_, t| Ok(tape.leaf(t.clone())))?;
        let out = forward(&lr_v, &leaves, config)?;
        let loss = l1(&out, &hr_v)?;
        let lv = loss.value().item()?.to_f64_lossy();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        loss_trace.push(lv);
        psnr_trace.push(batch_psnr_y(out.value(), hr, s)?);
        if step == steps {
            break;
        }
        let grads = loss.backward()?;
        let g = leaves.try_map(|_, v| grads.wrt(v))?;
        drop(leaves);
        params = adam.step(&params, &g)?;
        if !params.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
    }
    tape.reset();
    Ok(OverfitReport { params, psnr_trace, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::{seeded, uniform};

    fn pair(h: usize) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = seeded(5);
        (
            uniform(&[1, h, h, 3], 0.0, 1.0, &mut rng).unwrap(),
            uniform(&[1, 2 * h, 2 * h, 3], 0.0, 1.0, &mut rng).unwrap(),
        )
    }

    #[test]
    fn zero_steps_rejected() {
        let c = ModelConfig::default();
        let p = init_params::<f32>(&c, 0).unwrap();
        let (lr, hr) = pair(4);
        assert!(overfit_single(&lr, &hr, &p, &c, 0, 1e-3).is_err());
        assert!(overfit_single(&lr, &lr, &p, &c, 1, 1e-3).is_err());
    }

    #[test]
    fn zero_rate_leaves_params() {
        let c = ModelConfig::default();
        let p = init_params::<f32>(&c, 0).unwrap();
        let (lr, hr) = pair(4);
        let r = overfit_single(&lr, &hr, &p, &c, 3, 0.0).unwrap();
        assert_eq!(r.params, p);
        assert_eq!(r.psnr_trace.len(), 4);
        assert!(r.psnr_trace.windows(2).all(|w| w[0] == w[1]));
        assert!(r.psnr_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let c = ModelConfig::default();
        let p = init_params::<f32>(&c, 0).unwrap();
        let (lr, hr) = pair(6);
        let a = overfit_single(&lr, &hr, &p, &c, 5, 1e-2).unwrap();
        let b = overfit_single(&lr, &hr, &p, &c, 5, 1e-2).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.final_loss() < a.loss_trace[0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let c = ModelConfig::default();
        let p = init_params::<f64>(&c, 0).unwrap();
        let g = p.try_map(|_, t| Ok(t.map(|_| 3.0))).unwrap();
        let mut opt = Adam::new(0.1);
        let q = opt.step(&p, &g).unwrap();
        let d = q.recon_bias.sub(&p.recon_bias).unwrap();
        assert!(d.data().iter().all(|&x| (x + 0.1).abs() < 1e-6));
        assert_eq!(opt.steps_taken(), 1);
    }
}
