//! Binary model files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "RFG1" | u16 version | u32 meta_len | meta JSON
//! u32 tensor_count | per tensor: u16 name_len, name, u8 ndim, ndim x u32 dim
//! tensor values in table order (f32, or f64 when meta.dtype is "f64")
//! u32 CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use super::tensor::{Scalar, Tensor};
use super::NetworkError;
use crate::task::Task;

pub const MAGIC: &[u8; 4] = b"RFG1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    tasks: Vec<Task>,
    frozen_backbone: bool,
    dtype: String,
}

pub fn encode_model<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let wide = T::NAME == "f64";
    let meta = Meta {
        config: model.config().clone(),
        tasks: model.tasks(),
        frozen_backbone: model.frozen_backbone,
        dtype: if wide { "f64" } else { "f32" }.into(),
    };
    let meta = serde_json::to_vec(&meta).expect("meta serializes");
    let tensors = model.named_tensors();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in tensors.values() {
        for v in t.data() {
            let v = v.to_f64().unwrap();
            if wide {
                out.extend_from_slice(&v.to_le_bytes());
            } else {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NetworkError::Decode("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetworkError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NetworkError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Model<T>, NetworkError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(NetworkError::Decode("missing RFG1 magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(NetworkError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 10 {
        return Err(NetworkError::Decode("truncated checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(NetworkError::Decode("checksum mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 6 };
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| NetworkError::Decode(format!("bad metadata: {e}")))?;
    let width = match meta.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(NetworkError::Decode(format!("unknown dtype {other:?}"))),
    };
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NetworkError::Decode("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        table.push((name, shape));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in table {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| NetworkError::Decode(format!("tensor {name} is too large")))?;
        let raw = r.take(n.checked_mul(width).ok_or_else(|| NetworkError::Decode("size overflow".into()))?)?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect()
        };
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
            return Err(NetworkError::Decode(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(NetworkError::Decode("trailing bytes after tensor data".into()));
    }
    meta.config.validate().map_err(|e| NetworkError::Decode(format!("stored config invalid: {e}")))?;
    Model::from_parts(meta.config, tensors, &meta.tasks, meta.frozen_backbone)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), NetworkError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| NetworkError::Io { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, encode_model(model)).map_err(|source| NetworkError::Io { path: path.display().to_string(), source })
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>, NetworkError> {
    let bytes = std::fs::read(path).map_err(|source| NetworkError::Io { path: path.display().to_string(), source })?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::BlockConfig;
    use crate::nn::model::softmax;
    use proptest::prelude::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: (32, 32),
            stem_channels: 4,
            inception_blocks: vec![BlockConfig::uniform(2, 2)],
            embedding_dim: 8,
            ..ModelConfig::toy()
        }
    }

    fn input() -> Tensor<f32> {
        Tensor::from_vec(&[2, 1, 32, 32], (0..2048).map(|i| ((i * 37) % 101) as f32 / 100.0).collect())
    }

    #[test]
    fn round_trip_reproduces_logits() {
        let mut m = Model::<f32>::build(&small(), &[Task::Alteration, Task::Gender], 5).unwrap();
        m.frozen_backbone = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfg");
        save_model(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RFG1");
        let back: Model<f32> = load_model(&path).unwrap();
        assert!(back.frozen_backbone);
        assert_eq!(back.tasks(), m.tasks());
        assert_eq!(back.backbone_checksum(), m.backbone_checksum());
        for t in [Task::Alteration, Task::Gender] {
            assert_eq!(back.forward(&input(), t).unwrap(), m.forward(&input(), t).unwrap());
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let m = Model::<f64>::build(&small(), &[Task::Hand], 5).unwrap();
        let back: Model<f64> = decode_model(&encode_model(&m)).unwrap();
        let x = input().cast::<f64>();
        assert_eq!(back.forward(&x, Task::Hand).unwrap(), m.forward(&x, Task::Hand).unwrap());
    }

    #[test]
    fn corruption_is_reported() {
        let m = Model::<f32>::build(&small(), &[Task::Hand], 5).unwrap();
        let bytes = encode_model(&m);
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_model::<f32>(&v), Err(NetworkError::VersionMismatch { found: 9, .. })));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(decode_model::<f32>(&v), Err(NetworkError::Decode(_))));
        let mut v = bytes.clone();
        let mid = v.len() / 2;
        v[mid] ^= 0xff;
        assert!(matches!(decode_model::<f32>(&v), Err(NetworkError::Decode(_))));
        assert!(matches!(decode_model::<f32>(&bytes[..bytes.len() - 9]), Err(NetworkError::Decode(_))));
        assert!(matches!(decode_model::<f32>(&[]), Err(NetworkError::Decode(_))));
        let err = load_model::<f32>(Path::new("/nonexistent/model.rfg")).unwrap_err();
        assert!(matches!(err, NetworkError::Io { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_bytes_never_panic(tail in proptest::collection::vec(any::<u8>(), 0..256), version in 0u16..3) {
            let mut v = MAGIC.to_vec();
            v.extend_from_slice(&version.to_le_bytes());
            v.extend(tail);
            let _ = decode_model::<f32>(&v);
        }

        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-80.0f32..80.0, 1..40)) {
            let k = 5;
            let rows = values.len() / k + 1;
            let mut data = values.clone();
            data.resize(rows * k, 0.0);
            let p = softmax(&Tensor::from_vec(&[rows, k], data));
            for row in p.data().chunks(k) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
