use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::seeded;
use crate::scalar::Real;

/// Per transformer block. Linear weights are `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub qkv_weight: P,
    pub qkv_bias: P,
    pub proj_weight: P,
    pub proj_bias: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
    pub fc1_weight: P,
    pub fc1_bias: P,
    pub fc2_weight: P,
    pub fc2_bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams<P> {
    pub blocks: Vec<BlockParams<P>>,
    pub conv_weight: P,
    pub conv_bias: P,
}

/// All learnable tensors, generic over the slot type so the same layout holds
/// plain tensors, tape vars, or optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<P> {
    pub shallow_weight: P,
    pub shallow_bias: P,
    pub embed_weight: P,
    pub embed_bias: P,
    pub groups: Vec<GroupParams<P>>,
    pub recon_weight: P,
    pub recon_bias: P,
    pub upsample_weight: P,
    pub upsample_bias: P,
}

pub type ModelParams<T> = ParamSet<Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Weight,
    Bias,
    Gain,
}

/// Builds a set in canonical order, asking `make(name, shape, kind)` for each slot.
fn build<Q>(config: &ModelConfig, make: &mut impl FnMut(&str, &[usize], Kind) -> Result<Q>) -> Result<ParamSet<Q>> {
    let c = config.embed_dim;
    let hid = config.hidden_dim();
    let up = config.upsample_channels();
    let mut groups = Vec::with_capacity(config.groups);
    let shallow_weight = make("shallow.weight", &[3, 3, 3, c], Kind::Weight)?;
    let shallow_bias = make("shallow.bias", &[c], Kind::Bias)?;
    let embed_weight = make("embed.weight", &[c, c], Kind::Weight)?;
    let embed_bias = make("embed.bias", &[c], Kind::Bias)?;
    for g in 0..config.groups {
        let mut blocks = Vec::with_capacity(config.blocks_per_group);
        for b in 0..config.blocks_per_group {
            let p = format!("groups.{g}.blocks.{b}");
            blocks.push(BlockParams {
                norm1_gamma: make(&format!("{p}.norm1.gamma"), &[c], Kind::Gain)?,
                norm1_beta: make(&format!("{p}.norm1.beta"), &[c], Kind::Bias)?,
                qkv_weight: make(&format!("{p}.qkv.weight"), &[c, 3 * c], Kind::Weight)?,
                qkv_bias: make(&format!("{p}.qkv.bias"), &[3 * c], Kind::Bias)?,
                proj_weight: make(&format!("{p}.proj.weight"), &[c, c], Kind::Weight)?,
                proj_bias: make(&format!("{p}.proj.bias"), &[c], Kind::Bias)?,
                norm2_gamma: make(&format!("{p}.norm2.gamma"), &[c], Kind::Gain)?,
                norm2_beta: make(&format!("{p}.norm2.beta"), &[c], Kind::Bias)?,
                fc1_weight: make(&format!("{p}.fc1.weight"), &[c, hid], Kind::Weight)?,
                fc1_bias: make(&format!("{p}.fc1.bias"), &[hid], Kind::Bias)?,
                fc2_weight: make(&format!("{p}.fc2.weight"), &[hid, c], Kind::Weight)?,
                fc2_bias: make(&format!("{p}.fc2.bias"), &[c], Kind::Bias)?,
            });
        }
        groups.push(GroupParams {
            blocks,
            conv_weight: make(&format!("groups.{g}.conv.weight"), &[3, 3, c, c], Kind::Weight)?,
            conv_bias: make(&format!("groups.{g}.conv.bias"), &[c], Kind::Bias)?,
        });
    }
    Ok(ParamSet {
        shallow_weight,
        shallow_bias,
        embed_weight,
        embed_bias,
        groups,
        recon_weight: make("recon.weight", &[3, 3, c, c], Kind::Weight)?,
        recon_bias: make("recon.bias", &[c], Kind::Bias)?,
        upsample_weight: make("upsample.weight", &[3, 3, c, up], Kind::Weight)?,
        upsample_bias: make("upsample.bias", &[up], Kind::Bias)?,
    })
}

/// Canonical `(name, shape)` list for a config.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    build(config, &mut |name, shape, _| {
        out.push((name.to_string(), shape.to_vec()));
        Ok(())
    })
    .expect("shape listing cannot fail");
    out
}

impl<P> ParamSet<P> {
    /// Slots in canonical order with their dotted names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("shallow.weight".to_string(), &self.shallow_weight),
            ("shallow.bias".to_string(), &self.shallow_bias),
            ("embed.weight".to_string(), &self.embed_weight),
            ("embed.bias".to_string(), &self.embed_bias),
        ];
        for (g, grp) in self.groups.iter().enumerate() {
            for (b, blk) in grp.blocks.iter().enumerate() {
                let p = format!("groups.{g}.blocks.{b}");
                out.extend([
                    (format!("{p}.norm1.gamma"), &blk.norm1_gamma),
                    (format!("{p}.norm1.beta"), &blk.norm1_beta),
                    (format!("{p}.qkv.weight"), &blk.qkv_weight),
                    (format!("{p}.qkv.bias"), &blk.qkv_bias),
                    (format!("{p}.proj.weight"), &blk.proj_weight),
                    (format!("{p}.proj.bias"), &blk.proj_bias),
                    (format!("{p}.norm2.gamma"), &blk.norm2_gamma),
                    (format!("{p}.norm2.beta"), &blk.norm2_beta),
                    (format!("{p}.fc1.weight"), &blk.fc1_weight),
                    (format!("{p}.fc1.bias"), &blk.fc1_bias),
                    (format!("{p}.fc2.weight"), &blk.fc2_weight),
                    (format!("{p}.fc2.bias"), &blk.fc2_bias),
                ]);
            }
            out.push((format!("groups.{g}.conv.weight"), &grp.conv_weight));
            out.push((format!("groups.{g}.conv.bias"), &grp.conv_bias));
        }
        out.extend([
            ("recon.weight".to_string(), &self.recon_weight),
            ("recon.bias".to_string(), &self.recon_bias),
            ("upsample.weight".to_string(), &self.upsample_weight),
            ("upsample.bias".to_string(), &self.upsample_bias),
        ]);
        out
    }

    pub fn get(&self, name: &str) -> Option<&P> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// Rebuilds with the same layout, mapping every slot in canonical order.
    pub fn try_map<Q>(&self, mut f: impl FnMut(&str, &P) -> Result<Q>) -> Result<ParamSet<Q>> {
        let named = self.named();
        let mut it = named.into_iter();
        let mut next = |_: &str, _: &[usize], _: Kind| -> Result<Q> {
            let (n, p) = it.next().expect("layout mismatch");
            f(&n, p)
        };
        let config = self.layout_config();
        build(&config, &mut next)
    }

    /// Replaces each slot with the matching element of `values` (canonical order).
    pub fn from_ordered<Q>(&self, values: Vec<Q>) -> Result<ParamSet<Q>> {
        if values.len() != self.named().len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.named().len(),
                values.len()
            )));
        }
        let mut it = values.into_iter();
        self.try_map(|_, _| Ok(it.next().unwrap()))
    }

    /// A config with the same slot structure (only counts matter to `build`).
    fn layout_config(&self) -> ModelConfig {
        ModelConfig {
            groups: self.groups.len(),
            blocks_per_group: self.groups.first().map_or(0, |g| g.blocks.len()),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.named().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl<T: Real> ModelParams<T> {
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.try_map(|_, t| Ok(t.cast())).expect("cast preserves layout")
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks slot shapes against what `config` requires.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let want = param_shapes(config);
        let have = self.named();
        if want.len() != have.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count {} does not match config ({})",
                have.len(),
                want.len()
            )));
        }
        for ((wn, ws), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || ws.as_slice() != ht.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {hn} has shape {:?}, config expects {wn} {ws:?}",
                    ht.shape()
                )));
            }
        }
        Ok(())
    }
}

pub const INIT_STD: f64 = 0.02;

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization: truncated normal (std 0.02, cut at 2 std)
/// for weights, zeros for biases and norm shifts, ones for norm gains.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = seeded(seed);
    build(config, &mut |_, shape, kind| match kind {
        Kind::Weight => Tensor::from_fn(shape, |_| T::lit(truncated_normal(&mut rng, INIT_STD))),
        Kind::Bias => Tensor::zeros(shape),
        Kind::Gain => Tensor::ones(shape),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        let a = init_params::<f32>(&c, 7).unwrap();
        let b = init_params::<f32>(&c, 7).unwrap();
        assert_eq!(a, b);
        let d = init_params::<f32>(&c, 8).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn init_respects_truncation() {
        let c = ModelConfig::default();
        let p = init_params::<f64>(&c, 1).unwrap();
        for (name, t) in p.named() {
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            } else {
                assert!(t.data().iter().all(|&v| (-0.04..=0.04).contains(&v)), "{name}");
            }
            if name.ends_with("bias") || name.ends_with("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        p.check_shapes(&c).unwrap();
    }

    #[test]
    fn layout_and_names() {
        let c = ModelConfig { groups: 2, blocks_per_group: 3, ..Default::default() };
        let p = init_params::<f32>(&c, 0).unwrap();
        assert_eq!(p.len(), 4 + 2 * (3 * 12 + 2) + 4);
        assert_eq!(p.get("groups.1.blocks.2.fc1.weight").unwrap().shape(), &[16, 32]);
        assert_eq!(p.get("upsample.weight").unwrap().shape(), &[3, 3, 16, 12]);
        let shapes = param_shapes(&c);
        assert_eq!(shapes.len(), p.len());
        let wrong = ModelConfig { embed_dim: 8, heads: 2, groups: 2, blocks_per_group: 3, ..Default::default() };
        assert!(p.check_shapes(&wrong).is_err());
        let doubled = p.try_map(|_, t| Ok(t.scale(2.0))).unwrap();
        assert_eq!(doubled.recon_weight.data()[0], 2.0 * p.recon_weight.data()[0]);
    }
}
