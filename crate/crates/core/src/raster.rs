//! Raster containers and the `SKYD` depth file format.
//!
//! `SKYD` layout: magic `b"SKYD"`, `u32` width, `u32` height, `u32` reserved
//! (zero), then `width·height` little-endian `f32` values, row-major.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const DEPTH_MAGIC: &[u8; 4] = b"SKYD";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("malformed depth file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Single-channel depth raster in meters; `0.0` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; width as usize * height as usize] }
    }

    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, d: f32) {
        let w = self.width as usize;
        self.data[v as usize * w + u as usize] = d;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for d in &self.data {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != DEPTH_MAGIC {
            return Err(RasterError::Malformed("missing SKYD header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (width, height) = (word(4), word(8));
        let n = width as usize * height as usize;
        if bytes.len() != HEADER_LEN + 4 * n {
            return Err(RasterError::Malformed(format!(
                "expected {} payload bytes for {width}x{height}, found {}",
                4 * n,
                bytes.len() - HEADER_LEN
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), RasterError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, RasterError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Planar 3-channel image with `f64` samples, channel-major (`c, y, x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image3 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image3 {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; 3 * width as usize * height as usize] }
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self { width, height, data: vec![value; 3 * width as usize * height as usize] }
    }

    #[inline]
    pub fn index(&self, c: usize, x: u32, y: u32) -> usize {
        (c * self.height as usize + y as usize) * self.width as usize + x as usize
    }

    pub fn get(&self, c: usize, x: u32, y: u32) -> f64 {
        self.data[self.index(c, x, y)]
    }

    pub fn set(&mut self, c: usize, x: u32, y: u32, v: f64) {
        let i = self.index(c, x, y);
        self.data[i] = v;
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.{}.tmp", std::process::id(), unique_suffix()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

fn unique_suffix() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_file_layout() {
        let mut d = DepthMap::zeros(3, 2);
        d.set(2, 1, 7.5);
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"SKYD");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[36..40], &7.5f32.to_le_bytes());
        assert_eq!(DepthMap::from_bytes(&bytes).unwrap(), d);
    }

    #[test]
    fn truncated_depth_rejected() {
        let bytes = DepthMap::zeros(4, 4).to_bytes();
        assert!(matches!(DepthMap::from_bytes(&bytes[..30]), Err(RasterError::Malformed(_))));
        assert!(matches!(DepthMap::from_bytes(b"NOPE0000000000000000"), Err(RasterError::Malformed(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/depth.skyd");
        DepthMap::zeros(2, 2).write(&path).unwrap();
        assert_eq!(DepthMap::read(&path).unwrap(), DepthMap::zeros(2, 2));
        let entries: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
