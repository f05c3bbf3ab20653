//! On-disk dataset layout: `manifest.toml` plus one `scene_NNNNN.bin` record
//! per scene.
//!
//! Scene record (little endian):
//! `b"BBSC"`, version `u32`, width `u32`, height `u32`, seed `u64`,
//! instance count `u32`, image `f32 × H·W·3` (row-major, RGB interleaved),
//! then per instance: class `u32`, z-order `u32`, box `f64 × 4`, mask bits
//! packed row-major (LSB first, `ceil(H·W/8)` bytes).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::{
    derive_seed, generate_scene, GeneratorConfig, Instance, Scene, GENERATOR_VERSION,
};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::masks::BinaryMask;

const SCENE_MAGIC: &[u8; 4] = b"BBSC";
pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub scene_count: usize,
    pub class_names: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub generator_version: u32,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl DatasetManifest {
    pub fn new(split: &str, scene_count: usize, seed: u64, generator: GeneratorConfig) -> Self {
        Self {
            split: split.to_string(),
            scene_count,
            class_names: generator.class_names(),
            width: generator.width,
            height: generator.height,
            generator_version: GENERATOR_VERSION,
            seed,
            generator,
        }
    }

    /// Seed of scene `index`; train and val splits draw from disjoint streams.
    pub fn scene_seed(&self, index: usize) -> u64 {
        let salt = self.split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        derive_seed(self.seed ^ salt, index as u64)
    }

    /// Regenerates every scene described by the manifest.
    pub fn generate(&self) -> Result<Vec<Scene>> {
        if self.generator_version != GENERATOR_VERSION {
            return Err(Error::Version {
                expected: GENERATOR_VERSION,
                found: self.generator_version,
            });
        }
        (0..self.scene_count)
            .map(|i| generate_scene(&self.generator, self.scene_seed(i)))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn scene_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("scene_{index:05}.bin"))
}

pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, scenes: &[Scene]) -> Result<()> {
    if scenes.len() != manifest.scene_count {
        return Err(Error::ShapeMismatch(format!(
            "manifest lists {} scenes but {} were given",
            manifest.scene_count,
            scenes.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    for (i, scene) in scenes.iter().enumerate() {
        let mut w = BufWriter::new(File::create(scene_file(dir, i))?);
        write_scene(&mut w, scene)?;
        w.flush()?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.generator_version != GENERATOR_VERSION {
        return Err(Error::Version {
            expected: GENERATOR_VERSION,
            found: manifest.generator_version,
        });
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Scene>)> {
    let manifest = load_manifest(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scene_count);
    for i in 0..manifest.scene_count {
        let path = scene_file(dir, i);
        let file = File::open(&path).map_err(|e| Error::io_at(&path, e))?;
        let mut r = BufReader::new(file);
        let scene = read_scene(&mut r).map_err(|e| match e {
            Error::Io(io) => Error::Corrupt {
                path: path.clone(),
                reason: io.to_string(),
            },
            other => other,
        })?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Corrupt {
                path,
                reason: format!("{} trailing bytes", rest.len()),
            });
        }
        scenes.push(scene);
    }
    Ok((manifest, scenes))
}

pub fn write_scene<W: Write>(w: &mut W, scene: &Scene) -> Result<()> {
    let (h, wd, _) = scene.image.dim();
    w.write_all(SCENE_MAGIC)?;
    w.write_u32::<LittleEndian>(SCENE_FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(wd as u32)?;
    w.write_u32::<LittleEndian>(h as u32)?;
    w.write_u64::<LittleEndian>(scene.seed)?;
    w.write_u32::<LittleEndian>(scene.instances.len() as u32)?;
    for &v in scene.image.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    for inst in &scene.instances {
        w.write_u32::<LittleEndian>(inst.class_id as u32)?;
        w.write_u32::<LittleEndian>(inst.z_order)?;
        for v in inst.bbox.to_array() {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_all(&pack_bits(&inst.mask))?;
    }
    Ok(())
}

pub fn read_scene<R: Read>(r: &mut R) -> Result<Scene> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad scene magic",
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SCENE_FORMAT_VERSION {
        return Err(Error::Version {
            expected: SCENE_FORMAT_VERSION,
            found: version,
        });
    }
    let w = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let seed = r.read_u64::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; h * w * 3];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let image = Array3::from_shape_vec((h, w, 3), data).expect("length checked");
    let mut instances = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = r.read_u32::<LittleEndian>()? as usize;
        let z_order = r.read_u32::<LittleEndian>()?;
        let mut b = [0f64; 4];
        r.read_f64_into::<LittleEndian>(&mut b)?;
        let mut bits = vec![0u8; (h * w).div_ceil(8)];
        r.read_exact(&mut bits)?;
        instances.push(Instance {
            class_id,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            mask: unpack_bits(&bits, h, w),
            z_order,
        });
    }
    Ok(Scene {
        image,
        instances,
        seed,
    })
}

pub fn pack_bits(mask: &BinaryMask) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &v) in mask.iter().enumerate() {
        if v {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bits: &[u8], h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_shape_fn((h, w), |(y, x)| {
        let i = y * w + x;
        bits[i / 8] >> (i % 8) & 1 == 1
    })
}

/// SHA-256 over the serialized scenes, used to compare datasets across runs.
pub fn dataset_digest(scenes: &[Scene]) -> String {
    let mut hasher = Sha256::new();
    for s in scenes {
        let mut buf = Vec::new();
        write_scene(&mut buf, s).expect("writing to memory");
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest(n: usize) -> DatasetManifest {
        let g = GeneratorConfig {
            width: 64,
            height: 64,
            ..Default::default()
        };
        DatasetManifest::new("val", n, 42, g)
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(10);
        let scenes = m.generate().unwrap();
        save_dataset(dir.path(), &m, &scenes).unwrap();
        let (m2, s2) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(scenes, s2);
    }

    #[test]
    fn missing_directory_is_not_found() {
        let err = load_dataset(Path::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)), "{err}");
    }

    #[test]
    fn truncated_record_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(2);
        save_dataset(dir.path(), &m, &m.generate().unwrap()).unwrap();
        let path = scene_file(dir.path(), 1);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small_manifest(1);
        save_dataset(dir.path(), &m, &m.generate().unwrap()).unwrap();
        m.generator_version = 99;
        fs::write(dir.path().join(MANIFEST_FILE), toml::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Version { found: 99, .. })
        ));
    }

    #[test]
    fn splits_use_distinct_seeds() {
        let a = DatasetManifest::new("train", 3, 1, GeneratorConfig::default());
        let b = DatasetManifest::new("val", 3, 1, GeneratorConfig::default());
        assert_ne!(a.scene_seed(0), b.scene_seed(0));
        assert_eq!(a.scene_seed(2), a.clone().scene_seed(2));
    }
}
