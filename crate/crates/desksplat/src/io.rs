//! File formats: binary PPM/PGM images, the raw float32 depth format, and
//! JSON documents for scenes, cameras, and candidate pose sets.
//!
//! The depth format is a 16-byte ASCII header `"SSDEPTH W H\n"` (space-padded
//! to exactly 16 bytes) followed by row-major little-endian f32 values; NaN
//! is preserved for invalid pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::camera::{CameraView, Intrinsics, PoseRecord, ProjectionModel};
use crate::grid::{ColorImage, DepthImage, Grid, MaskImage, ScalarImage};
use crate::scene::SceneModel;
use crate::{Error, Result};

/// Format-version identifiers recorded in run manifests.
pub const DEPTH_FORMAT_VERSION: &str = "SSDEPTH/1";
pub const SCENE_FORMAT_VERSION: &str = "scene-json/1";
pub const CANDIDATES_FORMAT_VERSION: &str = "candidates-json/1";

const DEPTH_HEADER_LEN: usize = 16;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a color (or any [0,1]-valued 3-channel) image as binary PPM (P6).
pub fn write_ppm(path: &Path, image: &ColorImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    for px in &image.data {
        w.write_all(&[to_byte(px[0]), to_byte(px[1]), to_byte(px[2])])?;
    }
    Ok(())
}

/// Write a scalar [0,1] image as binary PGM (P5).
pub fn write_pgm(path: &Path, image: &ScalarImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", image.width, image.height)?;
    for v in &image.data {
        w.write_all(&[to_byte(*v)])?;
    }
    Ok(())
}

/// Read a binary PGM as a mask: nonzero = inside.
pub fn read_pgm_mask(path: &Path) -> Result<MaskImage> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let header_err = || Error::InvalidInput(format!("{}: not a binary PGM", path.display()));

    // Parse "P5  <w> <h> <maxval>" allowing arbitrary whitespace.
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(header_err());
    }
    let width: usize = fields[1].parse().map_err(|_| header_err())?;
    let height: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let data = bytes
        .get(pos..pos + width * height)
        .ok_or_else(header_err)?;
    Ok(Grid {
        width,
        height,
        data: data.iter().map(|&b| b != 0).collect(),
    })
}

/// Write a depth image in the raw float32 format.
pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    let header = format!("SSDEPTH {} {}\n", depth.width, depth.height);
    if header.len() > DEPTH_HEADER_LEN {
        return Err(Error::InvalidInput(format!(
            "depth dimensions {}x{} do not fit the 16-byte header",
            depth.width, depth.height
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    // Pad with spaces ahead of the terminating newline.
    let pad = DEPTH_HEADER_LEN - header.len();
    write!(w, "SSDEPTH {} {}", depth.width, depth.height)?;
    w.write_all(&vec![b' '; pad])?;
    w.write_all(b"\n")?;
    for v in &depth.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read a depth image written by [`write_depth`].
pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < DEPTH_HEADER_LEN {
        return Err(Error::InvalidInput(format!(
            "{}: truncated depth file",
            path.display()
        )));
    }
    let header = std::str::from_utf8(&bytes[..DEPTH_HEADER_LEN])
        .map_err(|_| Error::InvalidInput("depth header is not ASCII".into()))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("SSDEPTH") {
        return Err(Error::InvalidInput("missing SSDEPTH magic".into()));
    }
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidInput("bad depth width".into()))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidInput("bad depth height".into()))?;
    let expected = DEPTH_HEADER_LEN + width * height * 4;
    if bytes.len() < expected {
        return Err(Error::InvalidInput(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(width * height);
    for chunk in bytes[DEPTH_HEADER_LEN..expected].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Ok(Grid {
        width,
        height,
        data,
    })
}

pub fn write_scene(path: &Path, scene: &SceneModel) -> Result<()> {
    let json = serde_json::to_string_pretty(scene)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<SceneModel> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// On-disk camera description (pose + intrinsics + projection model).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CameraRecord {
    pub pose: PoseRecord,
    pub intrinsics: Intrinsics,
    #[serde(default = "default_projection")]
    pub projection: ProjectionModel,
    #[serde(default)]
    pub depth_only: bool,
}

fn default_projection() -> ProjectionModel {
    ProjectionModel::Pinhole
}

impl CameraRecord {
    pub fn to_view(&self, id: usize) -> CameraView {
        let mut v = CameraView::new(id, (&self.pose).into(), self.intrinsics);
        v.projection = self.projection;
        v.depth_only = self.depth_only;
        v
    }

    pub fn from_view(view: &CameraView) -> Self {
        CameraRecord {
            pose: (&view.pose).into(),
            intrinsics: view.intrinsics,
            projection: view.projection,
            depth_only: view.depth_only,
        }
    }
}

pub fn read_camera(path: &Path) -> Result<CameraRecord> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_camera(path: &Path, cam: &CameraRecord) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cam)?)?;
    Ok(())
}

/// Candidate pose entry for view-selection files.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CandidateRecord {
    pub id: usize,
    pub pose: PoseRecord,
    #[serde(default = "default_feasible")]
    pub feasible: bool,
}

fn default_feasible() -> bool {
    true
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_candidates(path: &Path, candidates: &[CandidateRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(candidates)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip_preserves_nan() {
        let dir = std::env::temp_dir().join("desksplat-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("depth.f32");
        let mut depth = Grid::filled(5, 3, 0.0f64);
        depth.set(1, 1, 2.5);
        depth.set(4, 2, f64::NAN);
        write_depth(&path, &depth).unwrap();

        // Header is exactly 16 bytes.
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 5 * 3 * 4);
        assert_eq!(&bytes[..8], b"SSDEPTH ");
        assert_eq!(bytes[15], b'\n');

        let back = read_depth(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        assert_eq!(*back.get(1, 1), 2.5);
        assert!(back.get(4, 2).is_nan());
        assert_eq!(*back.get(0, 0), 0.0);
    }

    #[test]
    fn oversized_depth_header_is_rejected() {
        let dir = std::env::temp_dir().join("desksplat-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let depth = Grid::filled(10000, 200, 0.0f64);
        assert!(write_depth(&dir.join("big.f32"), &depth).is_err());
    }

    #[test]
    fn pgm_mask_round_trip() {
        let dir = std::env::temp_dir().join("desksplat-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mask.pgm");
        let mut mask = Grid::filled(4, 4, 0.0f64);
        mask.set(2, 1, 1.0);
        write_pgm(&path, &mask).unwrap();
        let back = read_pgm_mask(&path).unwrap();
        assert_eq!(back.count_true(), 1);
        assert!(*back.get(2, 1));
    }
}
