//! The on-disk tensor format ("CCRT") and the checkpoint container
//! ("CCRC") that bundles many tensors behind one text manifest.
//!
//! A blob is: the 4-byte magic `CCRT`, a version byte (currently 1), a
//! little-endian u32 header length, a UTF-8 header
//! `name \t dtype \t rank \t e0,e1,...`, then the payload as
//! little-endian values in row-major order. Supported dtypes are `f32`
//! (parameters, images, continuous labels) and `i32` (class labels).
//!
//! A container is: magic `CCRC`, version byte 1, a little-endian u32
//! manifest length, the UTF-8 manifest text, a little-endian u32 blob
//! count, then that many blobs in the plain blob encoding. Every reader
//! error names the field it choked on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const BLOB_MAGIC: &[u8; 4] = b"CCRT";
const CONTAINER_MAGIC: &[u8; 4] = b"CCRC";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl BlobData {
    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            BlobData::F32(_) => "f32",
            BlobData::I32(_) => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn new(name: &str, shape: &[usize], data: BlobData) -> Result<Self> {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Blob(format!("invalid blob name {:?}", name)));
        }
        if shape.is_empty() {
            return Err(Error::Blob(format!("blob {}: rank must be at least 1", name)));
        }
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != data.len() {
            return Err(Error::Blob(format!(
                "blob {}: shape {:?} does not hold {} values",
                name,
                shape,
                data.len()
            )));
        }
        Ok(Blob { name: name.to_string(), shape: shape.to_vec(), data })
    }

    pub fn f32(name: &str, shape: &[usize], values: Vec<f32>) -> Result<Self> {
        Blob::new(name, shape, BlobData::F32(values))
    }

    pub fn i32(name: &str, shape: &[usize], values: Vec<i32>) -> Result<Self> {
        Blob::new(name, shape, BlobData::I32(values))
    }

    /// Stores `f64` values as `f32`; the crate's persistent format is
    /// deliberately single precision.
    pub fn from_f64(name: &str, shape: &[usize], values: &[f64]) -> Result<Self> {
        Blob::f32(name, shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            BlobData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            BlobData::I32(_) => Err(Error::Blob(format!("blob {} holds i32, expected f32", self.name))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            BlobData::I32(v) => Ok(v),
            BlobData::F32(_) => Err(Error::Blob(format!("blob {} holds f32, expected i32", self.name))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let extents: Vec<String> = self.shape.iter().map(|e| e.to_string()).collect();
        let header = format!(
            "{}\t{}\t{}\t{}",
            self.name,
            self.data.dtype_name(),
            self.shape.len(),
            extents.join(",")
        );
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        match &self.data {
            BlobData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            BlobData::I32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exactly(r, &mut magic, "magic")?;
        if &magic != BLOB_MAGIC {
            return Err(Error::Blob(format!("bad magic {:?}, expected \"CCRT\"", magic)));
        }
        let mut version = [0u8; 1];
        read_exactly(r, &mut version, "version")?;
        if version[0] != VERSION {
            return Err(Error::Blob(format!("unsupported version {}", version[0])));
        }
        let mut len4 = [0u8; 4];
        read_exactly(r, &mut len4, "header length")?;
        let header_len = u32::from_le_bytes(len4) as usize;
        let mut header = vec![0u8; header_len];
        read_exactly(r, &mut header, "header")?;
        let header = String::from_utf8(header).map_err(|_| Error::Blob("header is not valid UTF-8".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Blob(format!("header has {} fields, expected 4", fields.len())));
        }
        let name = fields[0].to_string();
        let dtype = fields[1];
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| Error::Blob(format!("blob {}: bad rank {:?}", name, fields[2])))?;
        if rank == 0 {
            return Err(Error::Blob(format!("blob {}: rank must be at least 1", name)));
        }
        let shape: Vec<usize> = fields[3]
            .split(',')
            .map(|e| e.parse::<usize>().map_err(|_| Error::Blob(format!("blob {}: bad extent {:?}", name, e))))
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(Error::Blob(format!(
                "blob {}: rank {} does not match {} extents",
                name,
                rank,
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Blob(format!("blob {}: zero extent in {:?}", name, shape)));
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload).map_err(|_| {
            Error::Blob(format!(
                "blob {}: payload length mismatch, header wants {} values ({} bytes)",
                name,
                numel,
                numel * 4
            ))
        })?;
        let data = match dtype {
            "f32" => BlobData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            "i32" => BlobData::I32(
                payload.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            ),
            other => return Err(Error::Blob(format!("blob {}: unknown dtype {:?}", name, other))),
        };
        Blob::new(&name, &shape, data)
    }
}

fn read_exactly(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Blob(format!("truncated while reading {}", what)))
}

pub fn write_blob(path: &Path, blob: &Blob) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    blob.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::Blob(format!("cannot open {}: {}", path.display(), e))
    })?);
    let blob = Blob::read_from(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Blob(format!("{}: trailing bytes after payload", path.display())));
    }
    Ok(blob)
}

/// Writes a checkpoint container: a text manifest plus named blobs.
pub fn write_container(path: &Path, manifest: &str, blobs: &[Blob]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    w.write_all(&(blobs.len() as u32).to_le_bytes())?;
    for b in blobs {
        b.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, Vec<Blob>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::Blob(format!("cannot open {}: {}", path.display(), e))
    })?);
    let mut magic = [0u8; 4];
    read_exactly(&mut r, &mut magic, "container magic")?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Blob(format!("bad container magic {:?}, expected \"CCRC\"", magic)));
    }
    let mut version = [0u8; 1];
    read_exactly(&mut r, &mut version, "container version")?;
    if version[0] != VERSION {
        return Err(Error::Blob(format!("unsupported container version {}", version[0])));
    }
    let mut len4 = [0u8; 4];
    read_exactly(&mut r, &mut len4, "manifest length")?;
    let mlen = u32::from_le_bytes(len4) as usize;
    let mut manifest = vec![0u8; mlen];
    read_exactly(&mut r, &mut manifest, "manifest")?;
    let manifest =
        String::from_utf8(manifest).map_err(|_| Error::Blob("manifest is not valid UTF-8".into()))?;
    read_exactly(&mut r, &mut len4, "blob count")?;
    let count = u32::from_le_bytes(len4) as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        blobs.push(Blob::read_from(&mut r)?);
    }
    Ok((manifest, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ccrt");
        let blob = Blob::f32("weights", &[2, 3], vec![1.5, -2.0, 0.0, 3.25, -0.5, 10.0]).unwrap();
        write_blob(&path, &blob).unwrap();
        let back = read_blob(&path).unwrap();
        assert_eq!(back, blob);
    }

    #[test]
    fn i32_round_trip_with_ignore_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.ccrt");
        let blob = Blob::i32("seg", &[2, 2], vec![0, 3, -1, 2]).unwrap();
        write_blob(&path, &blob).unwrap();
        let back = read_blob(&path).unwrap();
        assert_eq!(back.as_i32().unwrap(), &[0, 3, -1, 2]);
    }

    #[test]
    fn truncated_payload_is_loud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ccrt");
        let blob = Blob::f32("x", &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_blob(&path, &blob).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_blob(&path).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{}", err);
    }

    #[test]
    fn bad_magic_is_loud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ccrt");
        std::fs::write(&path, b"NOPE....").unwrap();
        let err = read_blob(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{}", err);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ccrt");
        let blob = Blob::f32("x", &[1], vec![1.0]).unwrap();
        write_blob(&path, &blob).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_blob(&path).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ccrt");
        let blobs = vec![
            Blob::f32("a", &[2], vec![1.0, 2.0]).unwrap(),
            Blob::i32("b", &[3], vec![7, 8, 9]).unwrap(),
        ];
        write_container(&path, "kind = test\n", &blobs).unwrap();
        let (manifest, back) = read_container(&path).unwrap();
        assert_eq!(manifest, "kind = test\n");
        assert_eq!(back, blobs);
    }

    #[test]
    fn f64_values_survive_the_f32_cast_when_representable() {
        let blob = Blob::from_f64("x", &[3], &[0.5, -1.25, 2.0]).unwrap();
        assert_eq!(blob.to_f64().unwrap(), vec![0.5, -1.25, 2.0]);
    }
}
