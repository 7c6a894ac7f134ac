//! Single-file binary checkpoints: magic, format version, a JSON header
//! echoing the run config, and a named tensor table of 64-bit little-endian
//! floats. Save and load round-trip bit-exactly.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::params::{self, ParamBlock};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"OCNT";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    Header(serde_json::Error),
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    Corrupt {
        what: &'static str,
    },
    MissingTensor {
        name: String,
    },
    UnexpectedTensor {
        name: String,
    },
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "i/o error: {e}"),
            CheckpointError::Header(e) => write!(f, "bad header json: {e}"),
            CheckpointError::BadMagic(m) => write!(f, "not a checkpoint file (magic {m:?})"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::Corrupt { what } => write!(f, "corrupt checkpoint: {what}"),
            CheckpointError::MissingTensor { name } => {
                write!(f, "checkpoint is missing tensor {name:?}")
            }
            CheckpointError::UnexpectedTensor { name } => {
                write!(f, "checkpoint has unexpected tensor {name:?}")
            }
            CheckpointError::ShapeMismatch {
                name,
                expected,
                found,
            } => write!(
                f,
                "tensor {name:?}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
        }
    }
}

// Display already includes the wrapped error, so `source` stays None and
// chained reporters do not print the cause twice.
impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<serde_json::Error> for CheckpointError {
    fn from(e: serde_json::Error) -> Self {
        CheckpointError::Header(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

fn write_u64<W: Write>(out: &mut W, v: u64) -> io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

pub fn save<W: Write>(
    out: &mut W,
    header: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header_bytes = serde_json::to_vec(header)?;
    write_u64(out, header_bytes.len() as u64)?;
    out.write_all(&header_bytes)?;
    write_u64(out, tensors.len() as u64)?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        write_u64(out, name_bytes.len() as u64)?;
        out.write_all(name_bytes)?;
        let (rows, cols) = t.shape();
        write_u64(out, rows as u64)?;
        write_u64(out, cols as u64)?;
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Save a parameter block under its traversal-order names.
pub fn save_block<P: AsRef<Path>, B: ParamBlock>(
    path: P,
    header: &serde_json::Value,
    block: &B,
) -> Result<(), CheckpointError> {
    let names = params::names(block, "");
    let tensors = params::tensors(block);
    let named: Vec<(String, &Tensor)> = names.into_iter().zip(tensors).collect();
    let mut out = BufWriter::new(File::create(path)?);
    save(&mut out, header, &named)?;
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_len<R: Read>(input: &mut R, what: &'static str) -> Result<usize, CheckpointError> {
    let v = read_u64(input)?;
    usize::try_from(v).map_err(|_| CheckpointError::Corrupt { what })
}

pub fn load<R: Read>(input: &mut R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut version = [0u8; 4];
    input.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let header_len = read_len(input, "header length")?;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;

    let count = read_len(input, "tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_len(input, "name length")?;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::Corrupt {
            what: "tensor name is not utf-8",
        })?;
        let rows = read_len(input, "row count")?;
        let cols = read_len(input, "column count")?;
        let len = rows
            .checked_mul(cols)
            .ok_or(CheckpointError::Corrupt {
                what: "tensor size overflows",
            })?;
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::new(rows, cols, data)));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn load_file<P: AsRef<Path>>(path: P) -> Result<Checkpoint, CheckpointError> {
    let mut input = BufReader::new(File::open(path)?);
    load(&mut input)
}

/// Copy checkpoint tensors into a block by name. The checkpoint must carry
/// exactly the block's tensor set with matching shapes.
pub fn load_into_block<B: ParamBlock>(
    ck: &Checkpoint,
    block: &mut B,
) -> Result<(), CheckpointError> {
    let names = params::names(block, "");
    for (name, _) in &ck.tensors {
        if !names.contains(name) {
            return Err(CheckpointError::UnexpectedTensor { name: name.clone() });
        }
    }
    let mut targets = params::tensors_mut(block);
    for (name, dst) in names.iter().zip(targets.iter_mut()) {
        let src = ck
            .tensor(name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if src.shape() != dst.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: dst.shape(),
                found: src.shape(),
            });
        }
        **dst = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{GateKind, GatedLstm};
    use crate::rng::RngStream;

    fn awkward_tensor() -> Tensor {
        Tensor::new(
            2,
            3,
            vec![
                0.1 + 0.2,
                -0.0,
                f64::MIN_POSITIVE,
                1.0 / 3.0,
                f64::MAX,
                5e-324, // smallest subnormal
            ],
        )
    }

    fn header() -> serde_json::Value {
        serde_json::json!({ "task": "needle", "hidden": 16, "seed": 7 })
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let t = awkward_tensor();
        let named = vec![("w".to_string(), &t)];
        let mut bytes = Vec::new();
        save(&mut bytes, &header(), &named).unwrap();

        let ck = load(&mut bytes.as_slice()).unwrap();
        assert_eq!(ck.header, header());
        assert_eq!(ck.tensors.len(), 1);
        assert_eq!(ck.tensors[0].0, "w");
        let loaded = &ck.tensors[0].1;
        assert_eq!(loaded.shape(), t.shape());
        for (a, b) in loaded.data().iter().zip(t.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn saving_twice_yields_identical_bytes() {
        let t = awkward_tensor();
        let named = vec![("w".to_string(), &t)];
        let mut a = Vec::new();
        save(&mut a, &header(), &named).unwrap();
        let mut b = Vec::new();
        save(&mut b, &header(), &named).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let t = Tensor::scalar(1.0);
        let named = vec![("w".to_string(), &t)];
        let mut bytes = Vec::new();
        save(&mut bytes, &header(), &named).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            load(&mut wrong.as_slice()),
            Err(CheckpointError::BadMagic(_))
        ));

        let mut future = bytes.clone();
        future[4] = 99;
        assert!(matches!(
            load(&mut future.as_slice()),
            Err(CheckpointError::UnsupportedVersion(99))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            load(&mut &truncated[..]),
            Err(CheckpointError::Io(_))
        ));
    }

    #[test]
    fn block_round_trip_restores_parameters() {
        let block = GatedLstm::new(GateKind::Quad, 3, 4, &mut RngStream::new(21));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_block(&path, &header(), &block).unwrap();

        let mut restored = GatedLstm::new(GateKind::Quad, 3, 4, &mut RngStream::new(99));
        let ck = load_file(&path).unwrap();
        load_into_block(&ck, &mut restored).unwrap();

        let a = params::tensors(&block);
        let b = params::tensors(&restored);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn name_and_shape_mismatches_are_reported() {
        let block = GatedLstm::new(GateKind::Linear, 2, 2, &mut RngStream::new(22));
        let mut bytes = Vec::new();
        {
            let names = params::names(&block, "");
            let tensors = params::tensors(&block);
            let named: Vec<(String, &Tensor)> = names.into_iter().zip(tensors).collect();
            save(&mut bytes, &header(), &named).unwrap();
        }
        let ck = load(&mut bytes.as_slice()).unwrap();

        // Same tensor set, larger hidden size: first shape check fails.
        let mut bigger = GatedLstm::new(GateKind::Linear, 2, 3, &mut RngStream::new(23));
        assert!(matches!(
            load_into_block(&ck, &mut bigger),
            Err(CheckpointError::ShapeMismatch { .. })
        ));

        // A quad-gate block wants a `gate.w` the linear checkpoint lacks.
        let mut quad = GatedLstm::new(GateKind::Quad, 2, 2, &mut RngStream::new(24));
        assert!(matches!(
            load_into_block(&ck, &mut quad),
            Err(CheckpointError::MissingTensor { .. })
        ));

        // The reverse direction carries a tensor the target cannot place.
        let quad_block = GatedLstm::new(GateKind::Quad, 2, 2, &mut RngStream::new(25));
        let mut quad_bytes = Vec::new();
        {
            let names = params::names(&quad_block, "");
            let tensors = params::tensors(&quad_block);
            let named: Vec<(String, &Tensor)> = names.into_iter().zip(tensors).collect();
            save(&mut quad_bytes, &header(), &named).unwrap();
        }
        let quad_ck = load(&mut quad_bytes.as_slice()).unwrap();
        let mut linear = GatedLstm::new(GateKind::Linear, 2, 2, &mut RngStream::new(26));
        assert!(matches!(
            load_into_block(&quad_ck, &mut linear),
            Err(CheckpointError::UnexpectedTensor { .. })
        ));
    }
}
