//! Versioned binary checkpoint: `b"BBDT"`, version `u32`, JSON header length
//! `u32`, JSON header, then every parameter as little-endian `f32` in
//! [`Parameterized::params_mut`] order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::model::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::Parameterized;

const MAGIC: &[u8; 4] = b"BBDT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    num_classes: usize,
    pixel_mean: [f64; 3],
    shapes: Vec<Vec<usize>>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, det: &Detector<f32>) -> Result<()> {
    let mut det = det.clone();
    let (config, num_classes, pixel_mean) = (det.config.clone(), det.num_classes, det.pixel_mean);
    let params = det.params_mut();
    let header = Header {
        config,
        num_classes,
        pixel_mean,
        shapes: params.iter().map(|p| p.value.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    for p in params {
        for &v in p.value.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Detector<f32>> {
    let invalid = |m: &str| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            m.to_string(),
        ))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a detector checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut det = Detector::<f32>::new(header.config, header.num_classes, header.pixel_mean, 0);
    let params = det.params_mut();
    if params.len() != header.shapes.len() {
        return Err(invalid("parameter count does not match the architecture"));
    }
    for (p, shape) in params.into_iter().zip(&header.shapes) {
        if p.value.shape() != shape.as_slice() {
            return Err(invalid("parameter shape does not match the architecture"));
        }
        let mut buf = vec![0f32; p.value.len()];
        r.read_f32_into::<LittleEndian>(&mut buf)?;
        for (d, s) in p.value.iter_mut().zip(buf) {
            *d = s;
        }
    }
    Ok(det)
}

pub fn save_checkpoint(path: &Path, det: &Detector<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?);
    write_checkpoint(&mut w, det)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Detector<f32>> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = BufReader::new(file);
    let det = read_checkpoint(&mut r).map_err(|e| match e {
        Error::Io(io) => Error::Corrupt {
            path: path.to_path_buf(),
            reason: io.to_string(),
        },
        other => other,
    })?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", rest.len()),
        });
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{BBox, HeadModel};

    #[test]
    fn round_trip_preserves_outputs() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 5, [0.4, 0.5, 0.6], 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        save_checkpoint(&path, &det).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let img = ndarray::Array3::<f32>::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((c + y * x) % 7) as f32 / 7.0
        });
        let p = [BBox::new(5.0, 6.0, 40.0, 50.0)];
        assert_eq!(
            det.heads(img.view(), &p).unwrap(),
            back.heads(img.view(), &p).unwrap()
        );
        assert_eq!(back.pixel_mean, [0.4, 0.5, 0.6]);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 3, [0.5; 3], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        save_checkpoint(&path, &det).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    }
}
