//! `GSWT` weight files.
//!
//! Layout (little-endian): magic `GSWT`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `rank × u64`
//! dims, row-major `f64` values. Activations and RFF scales are stored as
//! rank-0 tensors so a file fully determines the architecture.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{
    Activation, EncoderError, Linear, LocationBranch, LocationEncoder, Mlp, ProjectionHeads, RffLayer,
};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GSWT";
pub const WEIGHTS_VERSION: u32 = 1;

struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn push_mlp<T: Scalar>(out: &mut Vec<(String, Tensor)>, prefix: &str, mlp: &Mlp<T>) {
    out.push((
        format!("{prefix}.act"),
        Tensor {
            dims: vec![],
            data: vec![mlp.activation().code() as f64],
        },
    ));
    for (j, l) in mlp.layers().iter().enumerate() {
        out.push((
            format!("{prefix}.{j}.weight"),
            Tensor {
                dims: vec![l.weight.rows(), l.weight.cols()],
                data: l.weight.as_slice().iter().map(|v| v.as_f64()).collect(),
            },
        ));
        out.push((
            format!("{prefix}.{j}.bias"),
            Tensor {
                dims: vec![l.bias.len()],
                data: l.bias.iter().map(|v| v.as_f64()).collect(),
            },
        ));
    }
}

pub fn save_weights<T: Scalar>(
    path: impl AsRef<Path>,
    encoder: &LocationEncoder<T>,
    heads: &ProjectionHeads<T>,
) -> Result<(), EncoderError> {
    let mut tensors = Vec::new();
    for (i, b) in encoder.branches().iter().enumerate() {
        tensors.push((
            format!("loc.{i}.sigma"),
            Tensor {
                dims: vec![],
                data: vec![b.rff.sigma().as_f64()],
            },
        ));
        let w = b.rff.frequencies();
        tensors.push((
            format!("loc.{i}.rff.w"),
            Tensor {
                dims: vec![w.rows(), w.cols()],
                data: w.as_slice().iter().map(|v| v.as_f64()).collect(),
            },
        ));
        push_mlp(&mut tensors, &format!("loc.{i}.mlp"), &b.mlp);
    }
    push_mlp(&mut tensors, "heads.f_txt", &heads.f_txt);
    push_mlp(&mut tensors, "heads.f_loc", &heads.f_loc);
    push_mlp(&mut tensors, "heads.g_txt", &heads.g_txt);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_u32::<LittleEndian>(WEIGHTS_VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in &tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.dims.len() as u32)?;
        for &d in &t.dims {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn eof_as_truncation(e: std::io::Error) -> EncoderError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        EncoderError::Format("truncated file".into())
    } else {
        EncoderError::Io(e)
    }
}

fn read_tensors(r: &mut impl Read) -> Result<BTreeMap<String, Tensor>, EncoderError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncation)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(EncoderError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof_as_truncation)?;
    if version != WEIGHTS_VERSION {
        return Err(EncoderError::Format(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(eof_as_truncation)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(eof_as_truncation)? as usize;
        if len > 4096 {
            return Err(EncoderError::Format(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(eof_as_truncation)?;
        let name = String::from_utf8(name).map_err(|_| EncoderError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(eof_as_truncation)? as usize;
        if rank > 2 {
            return Err(EncoderError::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u64::<LittleEndian>().map_err(eof_as_truncation)? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 31)
            .ok_or_else(|| EncoderError::Format(format!("tensor {name} is too large")))?;
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(eof_as_truncation)?;
        out.insert(name, Tensor { dims, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(EncoderError::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

struct Assembler(BTreeMap<String, Tensor>);

impl Assembler {
    fn take(&mut self, name: &str) -> Result<Tensor, EncoderError> {
        self.0
            .remove(name)
            .ok_or_else(|| EncoderError::Format(format!("missing tensor {name}")))
    }

    fn scalar(&mut self, name: &str) -> Result<f64, EncoderError> {
        let t = self.take(name)?;
        if !t.dims.is_empty() {
            return Err(EncoderError::Format(format!("{name} should be rank 0")));
        }
        Ok(t.data[0])
    }

    fn matrix<T: Scalar>(&mut self, name: &str) -> Result<Matrix<T>, EncoderError> {
        let t = self.take(name)?;
        if t.dims.len() != 2 {
            return Err(EncoderError::Format(format!("{name} should be rank 2")));
        }
        Ok(Matrix::from_vec(t.dims[0], t.dims[1], t.data.into_iter().map(T::of).collect()))
    }

    fn vector<T: Scalar>(&mut self, name: &str) -> Result<Vec<T>, EncoderError> {
        let t = self.take(name)?;
        if t.dims.len() != 1 {
            return Err(EncoderError::Format(format!("{name} should be rank 1")));
        }
        Ok(t.data.into_iter().map(T::of).collect())
    }

    fn mlp<T: Scalar>(&mut self, prefix: &str) -> Result<Mlp<T>, EncoderError> {
        let code = self.scalar(&format!("{prefix}.act"))?;
        let activation = Activation::from_code(code as u8)
            .filter(|_| code.fract() == 0.0)
            .ok_or_else(|| EncoderError::Format(format!("{prefix}: unknown activation {code}")))?;
        let mut layers = Vec::new();
        let mut j = 0;
        while self.0.contains_key(&format!("{prefix}.{j}.weight")) {
            let weight = self.matrix(&format!("{prefix}.{j}.weight"))?;
            let bias = self.vector(&format!("{prefix}.{j}.bias"))?;
            layers.push(Linear { weight, bias });
            j += 1;
        }
        Mlp::new(layers, activation)
    }
}

pub fn load_weights<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(LocationEncoder<T>, ProjectionHeads<T>), EncoderError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut a = Assembler(read_tensors(&mut r)?);
    let mut branches = Vec::new();
    let mut i = 0;
    while a.0.contains_key(&format!("loc.{i}.sigma")) {
        let sigma = a.scalar(&format!("loc.{i}.sigma"))?;
        let w = a.matrix(&format!("loc.{i}.rff.w"))?;
        let rff = RffLayer::new(T::of(sigma), w)?;
        let mlp = a.mlp(&format!("loc.{i}.mlp"))?;
        branches.push(LocationBranch { rff, mlp });
        i += 1;
    }
    let encoder = LocationEncoder::new(branches)?;
    let heads = ProjectionHeads::new(a.mlp("heads.f_txt")?, a.mlp("heads.f_loc")?, a.mlp("heads.g_txt")?)?;
    if let Some(name) = a.0.keys().next() {
        return Err(EncoderError::Format(format!("unexpected tensor {name}")));
    }
    Ok((encoder, heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, GeoModel};

    fn model() -> GeoModel<f64> {
        let cfg = EncoderConfig {
            visual_dim: 6,
            embed_dim: 4,
            rff_features: 5,
            sigmas: vec![1.0, 4.0, 16.0],
            location_hidden: vec![7, 3],
            head_hidden: vec![6],
            activation: Activation::Relu,
        };
        GeoModel::init(&cfg, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gswt");
        let m = model();
        save_weights(&path, &m.encoder, &m.heads).unwrap();
        let (enc, heads) = load_weights::<f64>(&path).unwrap();
        assert_eq!(enc, m.encoder);
        assert_eq!(heads, m.heads);
    }

    #[test]
    fn f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gswt");
        let cfg = EncoderConfig::toy(8, 4);
        let m = GeoModel::<f32>::init(&cfg, 1).unwrap();
        save_weights(&path, &m.encoder, &m.heads).unwrap();
        let (enc, heads) = load_weights::<f32>(&path).unwrap();
        assert_eq!(GeoModel { encoder: enc, heads }, m);
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gswt");
        let m = model();
        save_weights(&path, &m.encoder, &m.heads).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_weights::<f64>(&path), Err(EncoderError::Format(m)) if m.contains("magic")));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_weights::<f64>(&path), Err(EncoderError::Format(m)) if m.contains("truncated")));

        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(load_weights::<f64>(&path).is_err());
    }
}
