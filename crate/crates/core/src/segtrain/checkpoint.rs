//! Segmentation model checkpoint, same layout as the detector's with magic
//! `b"BBSG"`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::model::{SegModel, SegModelConfig};
use crate::error::{Error, Result};
use crate::nn::Parameterized;

const MAGIC: &[u8; 4] = b"BBSG";
pub const SEG_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: SegModelConfig,
    num_labels: usize,
    pixel_mean: [f64; 3],
    shapes: Vec<Vec<usize>>,
}

pub fn save_seg_model(path: &Path, model: &SegModel) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?);
    let mut m = model.clone();
    let (config, num_labels, pixel_mean) = (m.config.clone(), m.num_labels, m.pixel_mean);
    let params = m.params_mut();
    let header = Header {
        config,
        num_labels,
        pixel_mean,
        shapes: params.iter().map(|p| p.value.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(SEG_CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    for p in params {
        for &v in p.value.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_seg_model(path: &Path) -> Result<SegModel> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| corrupt(e.to_string()))?;
    if &magic != MAGIC {
        return Err(corrupt("not a segmentation checkpoint".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| corrupt(e.to_string()))?;
    if version != SEG_CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: SEG_CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = r
        .read_u32::<LittleEndian>()
        .map_err(|e| corrupt(e.to_string()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| corrupt(e.to_string()))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut model = SegModel::new(header.config, header.num_labels, header.pixel_mean, 0);
    let params = model.params_mut();
    if params.len() != header.shapes.len() {
        return Err(corrupt(
            "parameter count does not match the architecture".into(),
        ));
    }
    for (p, shape) in params.into_iter().zip(&header.shapes) {
        if p.value.shape() != shape.as_slice() {
            return Err(corrupt(
                "parameter shape does not match the architecture".into(),
            ));
        }
        let mut buf = vec![0f32; p.value.len()];
        r.read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|e| corrupt(e.to_string()))?;
        for (d, s) in p.value.iter_mut().zip(buf) {
            *d = s;
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}
