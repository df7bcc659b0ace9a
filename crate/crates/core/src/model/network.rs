use super::params::{BlockParams, ParamSet};
use super::{ModelConfig, ModelParams, LAYER_NORM_EPS};
use crate::attention::{multi_head, AttentionSpec};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::scalar::Real;
use crate::windowing::{pixel_embed, window_merge, window_partition, WindowSpec};

/// Fixed per-channel mean removed from the input and restored at the output
/// (DIV2K RGB mean, as in SwinIR).
pub const RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

fn check_finite<T: Real>(x: &Var<T>, stage: impl FnOnce() -> String) -> Result<()> {
    if x.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { stage: stage() })
    }
}

/// `x [.., Cin] @ w [Cin, Cout] + b`.
fn linear<T: Real>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    let cin = s[s.len() - 1];
    let rows = x.value().numel() / cin.max(1);
    let mut out_shape = s.to_vec();
    *out_shape.last_mut().unwrap() = w.shape()[1];
    x.reshape(&[rows, cin])?.matmul(w)?.add(b)?.reshape(&out_shape)
}

fn block<T: Real>(
    x: &Var<T>,
    p: &BlockParams<Var<T>>,
    window: &WindowSpec,
    attn: &AttentionSpec,
) -> Result<Var<T>> {
    let (h, w, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);

    let y = x.layer_norm(&p.norm1_gamma, &p.norm1_beta, LAYER_NORM_EPS)?;
    let (wins, _) = window_partition(&y, window)?;
    let qkv = linear(&wins, &p.qkv_weight, &p.qkv_bias)?;
    let q = qkv.slice_last(0, c)?;
    let k = qkv.slice_last(c, c)?;
    let v = qkv.slice_last(2 * c, c)?;
    let a = multi_head(&q, &k, &v, attn)?;
    let proj = linear(&a, &p.proj_weight, &p.proj_bias)?;
    let x = x.add(&window_merge(&proj, window, h, w)?)?;

    let y = x.layer_norm(&p.norm2_gamma, &p.norm2_beta, LAYER_NORM_EPS)?;
    let hid = linear(&y, &p.fc1_weight, &p.fc1_bias)?.gelu()?;
    x.add(&linear(&hid, &p.fc2_weight, &p.fc2_bias)?)
}

/// Runs the network on `lr` `[B, H, W, 3]` and returns `[B, sH, sW, 3]`.
///
/// Works on tape vars so the same code path serves inference (constants) and
/// training (leaves).
pub fn forward<T: Real>(lr: &Var<T>, params: &ParamSet<Var<T>>, config: &ModelConfig) -> Result<Var<T>> {
    config.validate()?;
    match *lr.shape() {
        [_, h, w, 3] if h > 0 && w > 0 => {}
        _ => return Err(Error::invalid_shape("forward", lr.shape(), "expected B x H x W x 3")),
    }
    if params.groups.len() != config.groups
        || params.groups.iter().any(|g| g.blocks.len() != config.blocks_per_group)
    {
        return Err(Error::InvalidArgument("parameter layout does not match config".into()));
    }
    check_finite(lr, || "input".into())?;
    let attn = config.attention_spec();
    let mean = Var::constant(Tensor::from_vec(&[3], RGB_MEAN.iter().map(|&m| T::lit(m)).collect())?);

    let shallow = lr.sub(&mean)?.conv2d_3x3(&params.shallow_weight, Some(&params.shallow_bias))?;
    let x0 = pixel_embed(&shallow, &params.embed_weight, &params.embed_bias)?;
    check_finite(&x0, || "shallow".into())?;

    let mut x = x0.clone();
    for (g, grp) in params.groups.iter().enumerate() {
        let mut y = x.clone();
        for (b, blk) in grp.blocks.iter().enumerate() {
            y = block(&y, blk, &config.window_spec(b)?, &attn)?;
            check_finite(&y, || format!("groups.{g}.blocks.{b}"))?;
        }
        x = y.conv2d_3x3(&grp.conv_weight, Some(&grp.conv_bias))?.add(&x)?;
        check_finite(&x, || format!("groups.{g}.conv"))?;
    }

    let x = x.conv2d_3x3(&params.recon_weight, Some(&params.recon_bias))?.add(&x0)?;
    let up = x.conv2d_3x3(&params.upsample_weight, Some(&params.upsample_bias))?;
    let out = up.pixel_shuffle(config.scale)?.add(&mean)?;
    check_finite(&out, || "upsample".into())?;
    Ok(out)
}

/// Tape-free inference.
pub fn forward_tensor<T: Real>(lr: &Tensor<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    params.check_shapes(config)?;
    let consts = params.try_map(|_, t| Ok(Var::constant(t.clone())))?;
    Ok(forward(&Var::constant(lr.clone()), &consts, config)?.into_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::model::init_params;
    use crate::rng::{seeded, uniform};

    #[test]
    fn output_shape_for_each_scale() {
        for s in 2..=4 {
            let c = ModelConfig { scale: s, window: 4, ..Default::default() };
            let p = init_params::<f32>(&c, 0).unwrap();
            let x = uniform::<f32>(&[1, 6, 5, 3], 0.0, 1.0, &mut seeded(1)).unwrap();
            let y = forward_tensor(&x, &p, &c).unwrap();
            assert_eq!(y.shape(), &[1, 6 * s, 5 * s, 3]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn rejects_bad_input() {
        let c = ModelConfig::default();
        let p = init_params::<f32>(&c, 0).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 1]).unwrap();
        assert!(forward_tensor(&x, &p, &c).is_err());
        let x = Tensor::<f32>::full(&[1, 4, 4, 3], f32::NAN).unwrap();
        assert!(matches!(
            forward_tensor(&x, &p, &c),
            Err(Error::NonFiniteActivation { .. })
        ));
    }

    #[test]
    fn reports_first_bad_block() {
        let c = ModelConfig::default();
        let mut p = init_params::<f64>(&c, 0).unwrap();
        p.groups[0].blocks[1].fc2_bias = Tensor::full(&[16], f64::INFINITY).unwrap();
        let x = uniform::<f64>(&[1, 8, 8, 3], 0.0, 1.0, &mut seeded(1)).unwrap();
        match forward_tensor(&x, &p, &c) {
            Err(Error::NonFiniteActivation { stage }) => assert_eq!(stage, "groups.0.blocks.1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn direct_and_efficient_agree() {
        let base = ModelConfig::default();
        let p = init_params::<f64>(&base, 3).unwrap();
        let x = uniform::<f64>(&[1, 12, 12, 3], 0.0, 1.0, &mut seeded(2)).unwrap();
        let run = |v| forward_tensor(&x, &p, &ModelConfig { variant: v, ..base.clone() }).unwrap();
        let d = run(Variant::DirectTaylor);
        let e = run(Variant::EfficientTaylor);
        assert!(d.max_abs_diff(&e).unwrap() < 1e-9);
    }
}
