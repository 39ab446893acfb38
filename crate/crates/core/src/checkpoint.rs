//! Model persistence.
//!
//! Layout: magic `DFSM`, u16 version, length-prefixed UTF-8 topology string,
//! one precision byte, then every parameter tensor in the canonical layer
//! order as a u32 byte-length prefix plus little-endian values. Tensor shapes
//! are reproducible from the topology string alone, so the file carries no
//! shape metadata.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::{Matrix, Precision, Scalar};
use crate::topology::{format_topology, parse_topology, TopologySpec};

const MAGIC: &[u8; 4] = b"DFSM";
const VERSION: u16 = 1;

/// A loaded model in whichever precision the checkpoint declared.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn spec(&self) -> &TopologySpec {
        match self {
            AnyModel::F32(m) => &m.spec,
            AnyModel::F64(m) => &m.spec,
        }
    }
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn encode_model<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let topo = format_topology(&model.spec);
    out.extend_from_slice(&(topo.len() as u32).to_le_bytes());
    out.extend_from_slice(topo.as_bytes());
    out.push(S::PRECISION.flag());
    for tensor in model.params() {
        let bytes = tensor.data().len() * S::BYTES;
        out.extend_from_slice(&(bytes as u32).to_le_bytes());
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn load_model(path: &Path) -> Result<AnyModel> {
    let buf = std::fs::read(path)?;
    decode_model(&buf)
}

pub fn decode_model(buf: &[u8]) -> Result<AnyModel> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if n > buf.len() - *pos {
            return Err(Error::Format {
                offset: *pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"DFSM\""),
        });
    }
    let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let topo_len = u32::from_le_bytes(take(&mut pos, 4, "topology length")?.try_into().unwrap()) as usize;
    let topo_at = pos;
    let topo_bytes = take(&mut pos, topo_len, "topology string")?;
    let topo = std::str::from_utf8(topo_bytes).map_err(|_| Error::Format {
        offset: topo_at,
        message: "topology string is not UTF-8".into(),
    })?;
    let spec = parse_topology(topo)?;
    let flag = take(&mut pos, 1, "precision flag")?[0];
    let precision = Precision::from_flag(flag).ok_or_else(|| Error::Format {
        offset: pos - 1,
        message: format!("unknown precision flag {flag}"),
    })?;

    match precision {
        Precision::F32 => Ok(AnyModel::F32(fill_params::<f32>(spec, buf, pos)?)),
        Precision::F64 => Ok(AnyModel::F64(fill_params::<f64>(spec, buf, pos)?)),
    }
}

fn fill_params<S: Scalar>(spec: TopologySpec, buf: &[u8], mut pos: usize) -> Result<Model<S>> {
    let mut model = Model::<S>::zeros(spec)?;
    let names = model.param_names();
    for (tensor, name) in model.params_mut().into_iter().zip(names) {
        if 4 > buf.len() - pos {
            return Err(Error::Format {
                offset: pos,
                message: format!("truncated before blob {name}"),
            });
        }
        let blob_len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        let want = tensor.data().len() * S::BYTES;
        if blob_len != want {
            return Err(Error::Format {
                offset: pos - 4,
                message: format!("blob {name} holds {blob_len} bytes, topology implies {want}"),
            });
        }
        if blob_len > buf.len() - pos {
            return Err(Error::Format {
                offset: pos,
                message: format!("truncated inside blob {name}"),
            });
        }
        fill_tensor(tensor, &buf[pos..pos + blob_len]);
        pos += blob_len;
    }
    if pos != buf.len() {
        return Err(Error::Format {
            offset: pos,
            message: format!("{} trailing bytes after the last blob", buf.len() - pos),
        });
    }
    Ok(model)
}

fn fill_tensor<S: Scalar>(tensor: &mut Matrix<S>, bytes: &[u8]) {
    for (v, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(S::BYTES)) {
        *v = S::read_le(chunk);
    }
}
