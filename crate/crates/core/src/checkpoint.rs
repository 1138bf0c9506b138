//! Binary checkpoint container.
//!
//! Layout: magic `AESN`, version u32 = 1, tensor count u64; then per tensor
//! a name (length-prefixed UTF-8), rank u32, extents as u64, and row-major
//! little-endian f32 data. Network configuration and optimizer
//! hyperparameters ride along as scalar tensors under the reserved
//! `config/` namespace, which makes checkpoints self-describing; parameter
//! gradients are not persisted.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{AestheticNet, NetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;

const MAGIC: &[u8; 4] = b"AESN";
const VERSION: u32 = 1;

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn push_tensor(out: &mut Vec<RawTensor>, name: &str, shape: &[usize], data: Vec<f32>) {
    out.push(RawTensor { name: name.to_string(), shape: shape.to_vec(), data })
}

fn config_tensors(cfg: &NetConfig, momentum: f64, base_lr: f64) -> Vec<RawTensor> {
    let mut out = Vec::new();
    push_tensor(&mut out, "config/growth_rate", &[1], vec![cfg.growth_rate as f32]);
    push_tensor(
        &mut out,
        "config/layers_per_block",
        &[3],
        cfg.layers_per_block.iter().map(|&l| l as f32).collect(),
    );
    push_tensor(&mut out, "config/stem_channels", &[1], vec![cfg.stem_channels as f32]);
    push_tensor(
        &mut out,
        "config/input_size",
        &[2],
        vec![cfg.input_size.0 as f32, cfg.input_size.1 as f32],
    );
    push_tensor(&mut out, "config/level_fc_dim", &[1], vec![cfg.level_fc_dim as f32]);
    push_tensor(&mut out, "config/num_classes", &[1], vec![cfg.num_classes as f32]);
    push_tensor(&mut out, "config/momentum", &[1], vec![momentum as f32]);
    push_tensor(&mut out, "config/base_lr", &[1], vec![base_lr as f32]);
    out
}

fn encode(tensors: &[RawTensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::FormatViolation(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::FormatViolation("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::FormatViolation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::FormatViolation("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(RawTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::FormatViolation(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

/// Writes parameters, running statistics, optimizer velocities, and config.
pub fn save_checkpoint<T: Scalar>(
    net: &mut AestheticNet<T>,
    opt: &OptimizerState<T>,
    path: &Path,
) -> Result<()> {
    let mut tensors = config_tensors(net.config(), opt.momentum, opt.base_lr);
    net.visit_params_mut(&mut |name, t| {
        push_tensor(&mut tensors, name, t.shape(), t.data().iter().map(|v| v.as_f32()).collect());
    });
    net.visit_state_mut(&mut |name, t| {
        push_tensor(&mut tensors, name, t.shape(), t.data().iter().map(|v| v.as_f32()).collect());
    });
    for (name, v) in opt.velocities() {
        push_tensor(
            &mut tensors,
            &format!("velocity/{name}"),
            v.shape(),
            v.data().iter().map(|v| v.as_f32()).collect(),
        );
    }
    let bytes = encode(&tensors);
    let display = path.display().to_string();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(display, e))
}

fn usize_of(raw: &RawTensor, i: usize) -> usize {
    raw.data[i] as usize
}

/// Rebuilds the network and optimizer state from a checkpoint. Every tensor
/// the rebuilt network names must be present with matching shape, and no
/// unknown tensors may remain.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(AestheticNet<T>, OptimizerState<T>)> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(display, e))?;
    let tensors = decode(&bytes)?;
    let mut by_name: HashMap<String, RawTensor> = HashMap::new();
    for t in tensors {
        if by_name.insert(t.name.clone(), t).is_some() {
            return Err(Error::FormatViolation("duplicate tensor name".into()));
        }
    }

    let mut take_cfg = |name: &str, len: usize| -> Result<RawTensor> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::FormatViolation(format!("missing `{name}`")))?;
        if t.data.len() != len {
            return Err(Error::FormatViolation(format!("`{name}` must have {len} values")));
        }
        Ok(t)
    };
    let growth = take_cfg("config/growth_rate", 1)?;
    let layers = take_cfg("config/layers_per_block", 3)?;
    let stem = take_cfg("config/stem_channels", 1)?;
    let input = take_cfg("config/input_size", 2)?;
    let fc_dim = take_cfg("config/level_fc_dim", 1)?;
    let classes = take_cfg("config/num_classes", 1)?;
    let momentum = take_cfg("config/momentum", 1)?.data[0] as f64;
    let base_lr = take_cfg("config/base_lr", 1)?.data[0] as f64;

    let cfg = NetConfig {
        growth_rate: usize_of(&growth, 0),
        layers_per_block: [usize_of(&layers, 0), usize_of(&layers, 1), usize_of(&layers, 2)],
        stem_channels: usize_of(&stem, 0),
        input_size: (usize_of(&input, 0), usize_of(&input, 1)),
        level_fc_dim: usize_of(&fc_dim, 0),
        num_classes: usize_of(&classes, 0),
    };

    let mut net = AestheticNet::<T>::build(cfg, 0)?;
    let mut fill = |name: &str, t: &mut Tensor<T>| -> Result<()> {
        let raw = by_name.remove(name).ok_or_else(|| {
            Error::NameMismatch(format!("checkpoint is missing tensor `{name}`"))
        })?;
        if raw.shape != t.shape() {
            return Err(Error::NameMismatch(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                raw.shape,
                t.shape()
            )));
        }
        for (dst, &src) in t.data_mut().iter_mut().zip(raw.data.iter()) {
            *dst = T::from_f32(src);
        }
        Ok(())
    };

    let mut first_err: Option<Error> = None;
    let mut velocity_names: Vec<(String, Vec<usize>)> = Vec::new();
    net.visit_params_mut(&mut |name, t| {
        if first_err.is_none() {
            if let Err(e) = fill(name, t) {
                first_err = Some(e);
            }
            velocity_names.push((name.to_string(), t.shape().to_vec()));
        }
    });
    net.visit_state_mut(&mut |name, t| {
        if first_err.is_none() {
            if let Err(e) = fill(name, t) {
                first_err = Some(e);
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }

    let mut velocities = Vec::with_capacity(velocity_names.len());
    for (name, shape) in velocity_names {
        let key = format!("velocity/{name}");
        let raw = by_name
            .remove(&key)
            .ok_or_else(|| Error::NameMismatch(format!("checkpoint is missing `{key}`")))?;
        if raw.shape != shape {
            return Err(Error::NameMismatch(format!(
                "`{key}` has shape {:?}, expected {shape:?}",
                raw.shape
            )));
        }
        let data: Vec<T> = raw.data.iter().map(|&v| T::from_f32(v)).collect();
        velocities.push((name, Tensor::new(&shape, data)?));
    }

    if !by_name.is_empty() {
        let mut names: Vec<&String> = by_name.keys().collect();
        names.sort();
        return Err(Error::NameMismatch(format!(
            "checkpoint carries unknown tensors: {names:?}"
        )));
    }

    let opt = OptimizerState::from_parts(momentum, base_lr, velocities);
    Ok((net, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    fn small_net(seed: u64) -> AestheticNet<f32> {
        let cfg = NetConfig {
            growth_rate: 3,
            layers_per_block: [1, 1, 1],
            stem_channels: 6,
            input_size: (8, 8),
            level_fc_dim: 5,
            num_classes: 2,
        };
        AestheticNet::build(cfg, seed).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = small_net(1);
        let opt = OptimizerState::new(&mut net, 0.9, 0.01);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&mut net, &opt, &p1).unwrap();
        let (mut net2, opt2) = load_checkpoint::<f32>(&p1).unwrap();
        save_checkpoint(&mut net2, &opt2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn reload_preserves_eval_logits_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = small_net(2);
        // Give running stats non-initial values.
        let xt = Tensor::from_fn(&[4, 3, 8, 8], |i| ((i % 13) as f32) / 13.0 - 0.4);
        let _ = net.forward_train(&xt).unwrap();
        let opt = OptimizerState::new(&mut net, 0.9, 0.01);
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&mut net, &opt, &path).unwrap();

        let probe = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 7 % 31) as f32) / 31.0);
        let before = net.forward_eval(&probe).unwrap();
        let (net2, _) = load_checkpoint::<f32>(&path).unwrap();
        let after = net2.forward_eval(&probe).unwrap();
        assert_eq!(before.data(), after.data());

        let p = ops::softmax_rows(&after).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn truncated_file_is_format_violation() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = small_net(3);
        let opt = OptimizerState::new(&mut net, 0.9, 0.01);
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&mut net, &opt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::FormatViolation(_))
        ));
    }

    #[test]
    fn bad_magic_is_format_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::FormatViolation(_))
        ));
    }

    #[test]
    fn renamed_tensor_is_name_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = small_net(4);
        let opt = OptimizerState::new(&mut net, 0.9, 0.01);
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&mut net, &opt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Corrupt one byte of the first parameter tensor's name.
        let needle = b"stem/conv/weight";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("name present");
        bytes[pos] = b'x';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::NameMismatch(_))
        ));
    }
}
