//! Self-describing binary checkpoints: a magic tag, the model config as a
//! JSON header, then named f64 tensors in little-endian order. Loading
//! rebuilds the parameter struct and validates every shape against the
//! config, so a checkpoint trained elsewhere either fits or fails loudly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"GTSC";
const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let werr = io_err(path);

    w.write_all(MAGIC).map_err(&werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(&werr)?;
    let header = serde_json::to_vec(cfg).map_err(|e| Error::BadCheckpoint {
        path: path.to_path_buf(),
        msg: format!("config serialization failed: {e}"),
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(&werr)?;
    w.write_all(&header).map_err(&werr)?;

    let tensors = params.named_tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes()).map_err(&werr)?;
    for (name, shape, data) in &tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(&werr)?;
        w.write_all(bytes).map_err(&werr)?;
        w.write_all(&(shape.len() as u64).to_le_bytes()).map_err(&werr)?;
        for &dim in shape {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(&werr)?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes()).map_err(&werr)?;
        }
    }
    w.flush().map_err(&werr)?;
    Ok(())
}

struct Reader<'a> {
    r: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::BadCheckpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| self.bad("unexpected end of file"))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rd = Reader {
        r: BufReader::new(file),
        path,
    };

    let magic = rd.bytes(4)?;
    if magic != MAGIC {
        return Err(rd.bad("bad magic tag; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(rd.bytes(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(rd.bad(format!("unsupported version {version}")));
    }
    let header_len = rd.u64()? as usize;
    let header = rd.bytes(header_len)?;
    let cfg: ModelConfig = serde_json::from_slice(&header)
        .map_err(|e| rd.bad(format!("config header parse failed: {e}")))?;

    let num_tensors = rd.u64()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..num_tensors {
        let name_len = rd.u64()? as usize;
        let name = String::from_utf8(rd.bytes(name_len)?)
            .map_err(|_| rd.bad("tensor name is not UTF-8"))?;
        let ndim = rd.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = rd.f64s(len)?;
        tensors.insert(name, (shape, data));
    }
    let mut trailing = [0u8; 1];
    if rd.r.read(&mut trailing).map_err(|_| rd.bad("read error"))? != 0 {
        return Err(rd.bad("trailing bytes after last tensor"));
    }

    let params = assemble(path, &cfg, tensors)?;
    Ok((cfg, params))
}

type TensorMap = HashMap<String, (Vec<usize>, Vec<f64>)>;

fn bad(path: &Path, msg: String) -> Error {
    Error::BadCheckpoint {
        path: path.to_path_buf(),
        msg,
    }
}

fn take_mat(
    path: &Path,
    tensors: &mut TensorMap,
    name: &str,
    rows: Option<usize>,
    cols: usize,
) -> Result<Array2<f64>> {
    let (shape, data) = tensors
        .remove(name)
        .ok_or_else(|| bad(path, format!("missing tensor {name}")))?;
    if shape.len() != 2 || shape[1] != cols || rows.map_or(false, |r| shape[0] != r) {
        return Err(bad(path, format!("tensor {name} has shape {shape:?}")));
    }
    Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| bad(path, format!("tensor {name}: {e}")))
}

fn take_vec(path: &Path, tensors: &mut TensorMap, name: &str, len: usize) -> Result<Array1<f64>> {
    let (shape, data) = tensors
        .remove(name)
        .ok_or_else(|| bad(path, format!("missing tensor {name}")))?;
    if shape != [len] {
        return Err(bad(path, format!("tensor {name} has shape {shape:?}")));
    }
    Ok(Array1::from_vec(data))
}

fn take_scalar(path: &Path, tensors: &mut TensorMap, name: &str) -> Result<f64> {
    let (shape, data) = tensors
        .remove(name)
        .ok_or_else(|| bad(path, format!("missing tensor {name}")))?;
    if !shape.is_empty() || data.len() != 1 {
        return Err(bad(path, format!("tensor {name} has shape {shape:?}")));
    }
    Ok(data[0])
}

fn assemble(path: &Path, cfg: &ModelConfig, mut tensors: TensorMap) -> Result<ModelParams> {
    let d = cfg.hidden_dim;
    let d_desc = cfg.tokenizer.descriptor_dim;
    let w_in = take_mat(path, &mut tensors, "w_in", Some(cfg.num_features), d)?;
    let mut layers: Vec<LayerParams> = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let r = take_mat(path, &mut tensors, &format!("layer{i}.r"), None, d_desc)?;
        if let Some(first) = layers.first() {
            if first.r.nrows() != r.nrows() {
                return Err(bad(path, "layers disagree on node count".into()));
            }
        }
        let beta = take_scalar(path, &mut tensors, &format!("layer{i}.beta"))?;
        let w_m = take_mat(path, &mut tensors, &format!("layer{i}.w_m"), Some(d), d)?;
        let w_q = take_mat(path, &mut tensors, &format!("layer{i}.w_q"), Some(d), d)?;
        let w_v = take_mat(path, &mut tensors, &format!("layer{i}.w_v"), Some(d), d)?;
        let w_c = take_mat(path, &mut tensors, &format!("layer{i}.w_c"), Some(d_desc), d)?;
        let b_c = take_vec(path, &mut tensors, &format!("layer{i}.b_c"), d)?;
        let w_r = take_mat(path, &mut tensors, &format!("layer{i}.w_r"), Some(d), d)?;
        layers.push(LayerParams {
            r,
            beta,
            w_m,
            attn: AttentionParams { w_q, w_v, w_c, b_c },
            w_r,
        });
    }
    let w_cls = take_mat(path, &mut tensors, "w_cls", Some(d), cfg.num_classes)?;
    let b_cls = take_vec(path, &mut tensors, "b_cls", cfg.num_classes)?;
    if !tensors.is_empty() {
        let mut extra: Vec<&String> = tensors.keys().collect();
        extra.sort();
        return Err(bad(path, format!("unexpected tensors: {extra:?}")));
    }
    Ok(ModelParams {
        w_in,
        layers,
        w_cls,
        b_cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EmbedNorm;
    use crate::neuron::NeuronConfig;
    use crate::tokenizer::TokenizerConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            tokenizer: TokenizerConfig {
                t_steps: 3,
                descriptor_dim: 4,
                b_max: 64,
                seed: 6,
            },
            neuron: NeuronConfig::default(),
            embed_norm: EmbedNorm::RowL2,
            num_features: 10,
            num_classes: 3,
        }
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let cfg = cfg();
        let mut params = ModelParams::init(&cfg, 23, 77);
        params.layers[0].beta = -0.125;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
        assert_eq!(params2.to_vec(), params.to_vec());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE followed by junk").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_file() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 12, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn rejects_trailing_garbage() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 12, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"oops");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
