//! Flat little-endian parameter file.
//!
//! ```text
//! magic      8 bytes  "TSIRCKPT"
//! version    u32      1
//! config     u32 embed_dim, blocks_per_group, groups, heads, window,
//!            shift_windows (0/1), scale; f64 mlp_ratio; u8 variant
//!            (0 softmax, 1 direct, 2 efficient, 3 auto); f64 score_scale
//!            (NaN = d_head^-1/2); f64 auto_threshold_c
//! count      u32
//! tensors    count x { u32 name_len, name (UTF-8), u32 rank,
//!            rank x u32 extent, numel x f32 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::attention::Variant;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSIRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

fn io(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Softmax => 0,
        Variant::DirectTaylor => 1,
        Variant::EfficientTaylor => 2,
        Variant::Auto => 3,
    }
}

fn variant_from(code: u8) -> Result<Variant> {
    Ok(match code {
        0 => Variant::Softmax,
        1 => Variant::DirectTaylor,
        2 => Variant::EfficientTaylor,
        3 => Variant::Auto,
        _ => return Err(Error::Checkpoint(format!("unknown variant code {code}"))),
    })
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(mut w: W, config: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    params.check_shapes(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (n, what) in [
        (config.embed_dim, "embed_dim"),
        (config.blocks_per_group, "blocks_per_group"),
        (config.groups, "groups"),
        (config.heads, "heads"),
        (config.window, "window"),
        (config.shift_windows as usize, "shift_windows"),
        (config.scale, "scale"),
    ] {
        buf.extend_from_slice(&u32_of(n, what)?.to_le_bytes());
    }
    buf.extend_from_slice(&config.mlp_ratio.to_le_bytes());
    buf.push(variant_code(config.variant));
    buf.extend_from_slice(&config.score_scale.unwrap_or(f64::NAN).to_le_bytes());
    buf.extend_from_slice(&config.auto_threshold_c.to_le_bytes());

    let named = params.named();
    buf.extend_from_slice(&u32_of(named.len(), "tensor count")?.to_le_bytes());
    w.write_all(&buf).map_err(io)?;
    for (name, t) in named {
        buf.clear();
        buf.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&u32_of(e, "extent")?.to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn vec(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut v = vec![0u8; len];
        self.r
            .read_exact(&mut v)
            .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
        Ok(v)
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(ModelConfig, ModelParams<f32>)> {
    let mut rd = Reader { r };
    let magic: [u8; 8] = rd.bytes("magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut u = |what| rd.u32(what).map(|x| x as usize);
    let embed_dim = u("embed_dim")?;
    let blocks_per_group = u("blocks_per_group")?;
    let groups = u("groups")?;
    let heads = u("heads")?;
    let window = u("window")?;
    let shift = u("shift_windows")?;
    let scale = u("scale")?;
    let mlp_ratio = rd.f64("mlp_ratio")?;
    let variant = variant_from(rd.bytes::<1>("variant")?[0])?;
    let score_scale = rd.f64("score_scale")?;
    let auto_threshold_c = rd.f64("auto_threshold_c")?;
    if shift > 1 {
        return Err(Error::Checkpoint(format!("shift flag must be 0 or 1, got {shift}")));
    }
    let config = ModelConfig {
        embed_dim,
        blocks_per_group,
        groups,
        heads,
        window,
        shift_windows: shift == 1,
        scale,
        mlp_ratio,
        variant,
        score_scale: if score_scale.is_nan() { None } else { Some(score_scale) },
        auto_threshold_c,
    };
    config.validate().map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

    let expected = super::params::param_shapes(&config);
    let count = rd.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {count} tensors, config needs {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = rd.u32("name length")?;
        if name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name length {name_len} is implausible")));
        }
        let name = String::from_utf8(rd.vec(name_len as usize, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if &name != want_name {
            return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let rank = rd.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} is implausible")));
        }
        let shape = (0..rank)
            .map(|_| rd.u32("extent").map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, config expects {want_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = rd.vec(numel * 4, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::from_vec(&shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if rd.r.read(&mut trailing).map_err(io)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    let template = super::init_params::<f32>(&config, 0)?;
    let params = template.from_ordered(tensors)?;
    Ok((config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    write_checkpoint(BufWriter::new(f), config, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams<f32>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(f))
}
