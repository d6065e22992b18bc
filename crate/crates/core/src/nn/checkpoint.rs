//! Checkpoint container: a named set of networks plus a small string
//! metadata table, written little-endian with a magic tag and a format
//! version. Momentum buffers are included so training can resume exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{MlpParams, MlpSpec};

pub const MAGIC: &[u8; 8] = b"SNAVCKP1";
pub const FORMAT_VERSION: u32 = 1;

/// Sorted so serialization order never depends on insertion order.
pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("network {name:?}: expected widths {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("trailing bytes after checkpoint payload")]
    TrailingBytes,
    #[error("checkpoint has no network named {0:?}")]
    MissingNet(String),
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> Result<u8, CheckpointError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(CheckpointError::Malformed(format!(
            "{what} length {len} is implausible"
        )));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    nets: &[(&str, &MlpParams)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (k, v) in meta {
        for s in [k, v] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
    }
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    for (name, params) in nets {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let spec = params.spec();
        w.write_all(&[spec.output_relu as u8])?;
        w.write_all(&(spec.widths.len() as u32).to_le_bytes())?;
        for &width in &spec.widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        for (wts, bias, mw, mb) in params.blocks() {
            write_f64s(&mut w, wts)?;
            write_f64s(&mut w, bias)?;
            write_f64s(&mut w, mw)?;
            write_f64s(&mut w, mb)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointMeta, Vec<(String, MlpParams)>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_meta = read_u32(&mut r)?;
    if n_meta > 4096 {
        return Err(CheckpointError::Malformed(format!(
            "{n_meta} metadata entries"
        )));
    }
    let mut meta = CheckpointMeta::new();
    for _ in 0..n_meta {
        let k = read_string(&mut r, "metadata key")?;
        let v = read_string(&mut r, "metadata value")?;
        meta.insert(k, v);
    }
    let n_nets = read_u32(&mut r)?;
    if n_nets > 256 {
        return Err(CheckpointError::Malformed(format!("{n_nets} networks")));
    }
    let mut nets = Vec::with_capacity(n_nets as usize);
    for _ in 0..n_nets {
        let name = read_string(&mut r, "network name")?;
        let output_relu = match read_u8(&mut r)? {
            0 => false,
            1 => true,
            b => {
                return Err(CheckpointError::Malformed(format!(
                    "bad output activation byte {b}"
                )))
            }
        };
        let n_widths = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n_widths) {
            return Err(CheckpointError::Malformed(format!("{n_widths} widths")));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            let width = read_u32(&mut r)? as usize;
            if width == 0 || width > 1 << 20 {
                return Err(CheckpointError::Malformed(format!("layer width {width}")));
            }
            widths.push(width);
        }
        let spec = MlpSpec::new(&widths, output_relu);
        let mut blocks = Vec::with_capacity(spec.n_layers());
        for l in 0..spec.n_layers() {
            let (nin, nout) = (widths[l], widths[l + 1]);
            let wts = read_f64s(&mut r, nin * nout)?;
            let bias = read_f64s(&mut r, nout)?;
            let mw = read_f64s(&mut r, nin * nout)?;
            let mb = read_f64s(&mut r, nout)?;
            blocks.push((wts, bias, mw, mb));
        }
        nets.push((name, MlpParams::from_blocks(spec, blocks)));
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok((meta, nets)),
        _ => Err(CheckpointError::TrailingBytes),
    }
}

/// Loads a single named network and insists on its shape.
pub fn load_net_expecting(
    path: &Path,
    name: &str,
    expected: &MlpSpec,
) -> Result<MlpParams, CheckpointError> {
    let (_, nets) = load_checkpoint(path)?;
    for (n, params) in nets {
        if n == name {
            if params.spec() != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name: n,
                    expected: expected.widths.clone(),
                    found: params.spec().widths.clone(),
                });
            }
            return Ok(params);
        }
    }
    Err(CheckpointError::MissingNet(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpGrads;
    use crate::rng::{domain, substream};

    fn sample_net(seed: u64, widths: &[usize]) -> MlpParams {
        let mut rng = substream(seed, &[domain::NET_INIT, 17]);
        let mut p = MlpParams::init(MlpSpec::new(widths, false), &mut rng);
        // Touch the momentum buffers so the round trip covers them.
        let mut g = MlpGrads::zeros_like(&p);
        g.w[0][0] = 0.5;
        p.sgd_step(&g, 0.01, 0.9).unwrap();
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let a = sample_net(1, &[4, 8, 1]);
        let b = sample_net(2, &[3, 5, 2]);
        let mut meta = CheckpointMeta::new();
        meta.insert("episodes".into(), "123".into());
        save_checkpoint(&path, &meta, &[("a", &a), ("b", &b)]).unwrap();
        let (meta2, nets) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.get("episodes").map(String::as_str), Some("123"));
        assert_eq!(nets.len(), 2);
        assert_eq!(nets[0].0, "a");
        for ((w1, b1, m1, n1), (w2, b2, m2, n2)) in a.blocks().zip(nets[0].1.blocks()) {
            assert_eq!(w1, w2);
            assert_eq!(b1, b2);
            assert_eq!(m1, m2);
            assert_eq!(n1, n2);
        }
        assert_eq!(nets[1].1.spec().widths, vec![3, 5, 2]);
    }

    #[test]
    fn save_is_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.ckpt"), dir.path().join("2.ckpt"));
        let net = sample_net(3, &[6, 4, 1]);
        let meta = CheckpointMeta::new();
        save_checkpoint(&p1, &meta, &[("net", &net)]).unwrap();
        save_checkpoint(&p2, &meta, &[("net", &net)]).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &CheckpointMeta::new(), &[("n", &sample_net(4, &[2, 1]))]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            CheckpointError::VersionMismatch { found, expected } => {
                assert_eq!(found, 9);
                assert_eq!(expected, FORMAT_VERSION);
            }
            e => panic!("wrong error: {e}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &CheckpointMeta::new(), &[("n", &sample_net(5, &[4, 3]))]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::Truncated
        ));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::BadMagic
        ));
        save_checkpoint(&path, &CheckpointMeta::new(), &[("n", &sample_net(6, &[2, 2]))]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::TrailingBytes
        ));
    }

    #[test]
    fn shape_expectations_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &CheckpointMeta::new(), &[("n", &sample_net(7, &[4, 3]))]).unwrap();
        let want = MlpSpec::new(&[5, 3], false);
        match load_net_expecting(&path, "n", &want).unwrap_err() {
            CheckpointError::ShapeMismatch { expected, found, .. } => {
                assert_eq!(expected, vec![5, 3]);
                assert_eq!(found, vec![4, 3]);
            }
            e => panic!("wrong error: {e}"),
        }
        assert!(matches!(
            load_net_expecting(&path, "zzz", &want).unwrap_err(),
            CheckpointError::MissingNet(_)
        ));
    }
}
