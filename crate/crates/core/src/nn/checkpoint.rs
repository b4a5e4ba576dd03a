//! Versioned parameter container: magic `LSRS`, format version, a JSON
//! metadata block, the layer manifest, then every parameter tensor in
//! declaration order as 32-bit little-endian floats.

use std::path::Path;

use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::layer::{Layer, LayerKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSRS";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_kind(w: &mut ByteWriter, kind: &LayerKind) {
    w.u8(kind.code());
    let (a, b, h) = match *kind {
        LayerKind::Dense { inputs, outputs }
        | LayerKind::Conv3x3 { inputs, outputs }
        | LayerKind::Conv1x1 { inputs, outputs } => (inputs, outputs, 0.0),
        LayerKind::ChannelNorm { channels, eps } => (channels, 0, eps),
        LayerKind::LeakyRelu { slope } => (0, 0, slope),
        LayerKind::Embedding { rows, dim } => (rows, dim, 0.0),
    };
    w.u32(a as u32);
    w.u32(b as u32);
    w.f32(h);
}

fn read_kind(r: &mut ByteReader) -> Result<LayerKind> {
    let code = r.u8()?;
    let a = r.u32()? as usize;
    let b = r.u32()? as usize;
    let h = r.f32()?;
    Ok(match code {
        0 => LayerKind::Dense {
            inputs: a,
            outputs: b,
        },
        1 => LayerKind::Conv3x3 {
            inputs: a,
            outputs: b,
        },
        2 => LayerKind::Conv1x1 {
            inputs: a,
            outputs: b,
        },
        3 => LayerKind::ChannelNorm {
            channels: a,
            eps: h,
        },
        4 => LayerKind::LeakyRelu { slope: h },
        5 => LayerKind::Embedding { rows: a, dim: b },
        other => return Err(r.err(&format!("unknown layer kind code {other}"))),
    })
}

pub fn encode_checkpoint(layers: &[Layer], meta: &serde_json::Value) -> Vec<u8> {
    let mut w = ByteWriter::with_header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.str(&meta.to_string());
    w.u32(layers.len() as u32);
    for layer in layers {
        w.str(&layer.name);
        write_kind(&mut w, &layer.kind);
    }
    for layer in layers {
        for p in &layer.params {
            w.f32s(p.data());
        }
    }
    w.finish()
}

/// Decode a checkpoint into freshly built layers plus its metadata.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<Layer>, serde_json::Value)> {
    let (mut r, version) = ByteReader::header(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let meta: serde_json::Value = serde_json::from_str(&r.str()?)?;
    let n = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        manifest.push((name, read_kind(&mut r)?));
    }
    let mut layers = Vec::with_capacity(n);
    for (name, kind) in manifest {
        let mut params = Vec::new();
        for shape in kind.param_shapes() {
            let len = shape.iter().product();
            params.push(crate::nn::tensor::Tensor::new(shape, r.f32s(len)?)?);
        }
        layers.push(Layer::new(name, kind, params)?);
    }
    r.expect_end()?;
    Ok((layers, meta))
}

/// Overwrite the parameters of an already constructed model, refusing any
/// manifest difference (count, names, kinds, hyper-parameters).
pub fn load_into(layers: &mut [Layer], bytes: &[u8]) -> Result<serde_json::Value> {
    let (loaded, meta) = decode_checkpoint(bytes)?;
    if loaded.len() != layers.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} layers, model has {}",
            loaded.len(),
            layers.len()
        )));
    }
    for (have, got) in layers.iter().zip(&loaded) {
        if have.name != got.name || have.kind != got.kind {
            return Err(Error::Format(format!(
                "manifest mismatch: model layer {} ({:?}) vs checkpoint {} ({:?})",
                have.name, have.kind, got.name, got.kind
            )));
        }
    }
    for (have, got) in layers.iter_mut().zip(loaded) {
        have.params = got.params;
    }
    Ok(meta)
}

pub fn save_checkpoint(path: &Path, layers: &[Layer], meta: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(layers, meta))
}

pub fn read_checkpoint(path: &Path) -> Result<(Vec<Layer>, serde_json::Value)> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn model(seed: u64) -> Vec<Layer> {
        let mut rng = StreamKey::root(seed).stream();
        vec![
            Layer::init("stem", LayerKind::Conv3x3 { inputs: 4, outputs: 8 }, 1.0, &mut rng),
            Layer::init(
                "norm",
                LayerKind::ChannelNorm {
                    channels: 8,
                    eps: 1e-5,
                },
                1.0,
                &mut rng,
            ),
            Layer::new("act", LayerKind::LeakyRelu { slope: 0.01 }, vec![]).unwrap(),
            Layer::init("emb", LayerKind::Embedding { rows: 3, dim: 8 }, 0.1, &mut rng),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let layers = model(1);
        let meta = serde_json::json!({"role": "test"});
        let bytes = encode_checkpoint(&layers, &meta);
        assert_eq!(&bytes[..4], b"LSRS");
        let mut target = model(2);
        assert_eq!(load_into(&mut target, &bytes).unwrap(), meta);
        assert_eq!(target, layers);
    }

    #[test]
    fn manifest_mismatch_and_truncation_are_rejected() {
        let bytes = encode_checkpoint(&model(1), &serde_json::Value::Null);
        let mut other = model(1);
        other[1].name = "renamed".into();
        assert!(load_into(&mut other, &bytes).is_err());
        let mut fewer = model(1);
        fewer.pop();
        assert!(load_into(&mut fewer, &bytes).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
