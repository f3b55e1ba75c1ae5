//! Little-endian binary model checkpoints.
//!
//! Layout: `b"ECOF"`, version `u32`, record count `u32`, then per record the
//! name length `u32`, UTF-8 name, rank `u32`, one `u64` per extent and the
//! raw `f64` data. The model configuration travels as the `config` record.

use std::collections::HashMap;
use std::path::Path;

use crate::attention::Psi;
use crate::autodiff::RowStats;
use crate::block::{Activation, BlockConfig, NormMode};
use crate::error::{Error, Result};
use crate::model::{Arch, Body, Model, ModelConfig};
use crate::synth::Modality;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ECOF";
pub const VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode_config(c: &ModelConfig) -> Vec<f64> {
    let b = &c.block;
    let psi = match b.psi {
        Psi::SquaredRelu => 0.0,
        Psi::Relu => 1.0,
        Psi::Linear => 2.0,
    };
    let modality = match c.modality {
        Modality::Both => 0.0,
        Modality::Lip => 1.0,
        Modality::Hand => 2.0,
    };
    vec![
        (c.arch == Arch::Mhsa) as u8 as f64,
        c.layers as f64,
        b.d_model as f64,
        b.d_hidden as f64,
        b.chunk as f64,
        b.topk as f64,
        b.kernel as f64,
        psi,
        (b.phi == Activation::Identity) as u8 as f64,
        b.fusion as u8 as f64,
        b.gate as u8 as f64,
        (b.norm == NormMode::Identity) as u8 as f64,
        c.phonemes as f64,
        c.heads as f64,
        modality,
        (c.seed >> 32) as f64,
        (c.seed & 0xffff_ffff) as f64,
    ]
}

fn decode_config(v: &[f64]) -> Result<ModelConfig> {
    if v.len() != 17 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(ck("malformed config record"));
    }
    let u = |i: usize| v[i] as usize;
    let flag = |i: usize| v[i] != 0.0;
    let psi = match u(7) {
        0 => Psi::SquaredRelu,
        1 => Psi::Relu,
        2 => Psi::Linear,
        x => return Err(ck(format!("unknown score activation {x}"))),
    };
    let modality = match u(14) {
        0 => Modality::Both,
        1 => Modality::Lip,
        2 => Modality::Hand,
        x => return Err(ck(format!("unknown modality {x}"))),
    };
    Ok(ModelConfig {
        arch: if flag(0) { Arch::Mhsa } else { Arch::EcoCued },
        layers: u(1),
        block: BlockConfig {
            d_model: u(2),
            d_hidden: u(3),
            chunk: u(4),
            topk: u(5),
            kernel: u(6),
            psi,
            phi: if flag(8) {
                Activation::Identity
            } else {
                Activation::Swish
            },
            fusion: flag(9),
            gate: flag(10),
            norm: if flag(11) {
                NormMode::Identity
            } else {
                NormMode::Batch
            },
        },
        phonemes: u(12),
        heads: u(13),
        modality,
        seed: ((v[15] as u64) << 32) | v[16] as u64,
    })
}

fn running_name(layer: usize, stream: usize, which: usize, field: &str) -> String {
    format!("layer{layer}.running{stream}.{which}.{field}")
}

/// Every record of `model` in file order.
pub fn records(model: &Model) -> Vec<(String, Tensor)> {
    let cfg = encode_config(&model.config);
    let mut out = vec![(
        "config".to_string(),
        Tensor::new(&[cfg.len()], cfg).expect("config length"),
    )];
    out.extend(
        model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone())),
    );
    for (l, streams) in model.running_stats().iter().enumerate() {
        for (s, pair) in streams.iter().enumerate() {
            for (w, st) in pair.iter().enumerate() {
                let v = |x: &Vec<f64>| Tensor::new(&[x.len()], x.clone()).expect("vector");
                out.push((running_name(l, s, w, "mean"), v(&st.mean)));
                out.push((running_name(l, s, w, "var"), v(&st.var)));
            }
        }
    }
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let recs = records(model);
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in &recs {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            b.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for x in t.data() {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(ck(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses the record list without interpreting it.
pub fn parse_records(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(ck("missing ECOF magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ck("record name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(ck(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| ck("extent overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| ck("size overflow"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| ck("size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(ck(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut map: HashMap<String, Tensor> = parse_records(bytes)?.into_iter().collect();
    let cfg = map
        .remove("config")
        .ok_or_else(|| ck("missing config record"))?;
    let config = decode_config(cfg.data())?;
    let mut model = Model::new(config).map_err(|e| ck(format!("invalid stored config: {e}")))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let t = map
            .remove(name)
            .ok_or_else(|| ck(format!("missing record {name}")))?;
        if t.shape() != slot.shape() {
            return Err(ck(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Body::Eco(layers) = &mut model.body {
        for (l, layer) in layers.iter_mut().enumerate() {
            for (s, pair) in layer.running.iter_mut().enumerate() {
                for (w, st) in pair.iter_mut().enumerate() {
                    let mut get = |field: &str| {
                        let name = running_name(l, s, w, field);
                        map.remove(&name)
                            .ok_or_else(|| ck(format!("missing record {name}")))
                    };
                    let (mean, var) = (get("mean")?, get("var")?);
                    if mean.len() != st.mean.len() || var.len() != st.var.len() {
                        return Err(ck(format!("layer{l}: running statistics length")));
                    }
                    *st = RowStats {
                        mean: mean.into_data(),
                        var: var.into_data(),
                    };
                }
            }
        }
    }
    if let Some(extra) = map.keys().next() {
        return Err(ck(format!("unexpected record {extra}")));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
