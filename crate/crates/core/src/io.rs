//! Little-endian binary files for meshes and field trajectories.
//!
//! ```text
//! MSH1: "MSH1" | u32 dim | u64 node_count | node_count*dim f64 (node-major)
//! FLD1: "FLD1" | u32 T | u32 N | u32 C | T*N*C f32 (channel fastest)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::geometry::{Level, Mesh};
use crate::nn::Tensor2D;

pub const MESH_MAGIC: &[u8; 4] = b"MSH1";
pub const FIELD_MAGIC: &[u8; 4] = b"FLD1";
pub const MESH_HEADER_LEN: usize = 16;
pub const FIELD_HEADER_LEN: usize = 16;

fn format_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: PathBuf::from(path),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_header(path: &Path, bytes: &[u8], magic: &[u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < header_len {
        return Err(format_error(
            path,
            bytes.len(),
            format!("truncated header: expected {header_len} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[..4] != magic {
        return Err(format_error(
            path,
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    Ok(())
}

fn check_length(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(format_error(
            path,
            bytes.len().min(expected),
            format!("expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    Ok(())
}

pub fn encode_mesh(mesh: &Mesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(MESH_HEADER_LEN + mesh.coords().len() * 8);
    out.extend_from_slice(MESH_MAGIC);
    out.extend_from_slice(&(mesh.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(mesh.node_count() as u64).to_le_bytes());
    for v in mesh.coords() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a mesh; `path` only labels errors.
pub fn decode_mesh(bytes: &[u8], path: &Path) -> Result<Mesh> {
    check_header(path, bytes, MESH_MAGIC, MESH_HEADER_LEN)?;
    let dim = read_u32(bytes, 4) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if !(1..=3).contains(&dim) {
        return Err(format_error(path, 4, format!("unsupported dimension {dim}")));
    }
    check_length(path, bytes, MESH_HEADER_LEN + count * dim * 8)?;
    let coords = bytes[MESH_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Mesh::new(dim, coords, Level::Output)
}

pub fn write_mesh(path: &Path, mesh: &Mesh) -> Result<()> {
    fs::write(path, encode_mesh(mesh)).map_err(io_err(path))
}

pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_mesh(&bytes, path)
}

/// Encodes `T` frames of `N x C` fields as float32.
pub fn encode_fields(frames: &[Tensor2D]) -> Result<Vec<u8>> {
    let (n, c) = frames.first().map_or((0, 0), Tensor2D::shape);
    if let Some(bad) = frames.iter().position(|f| f.shape() != (n, c)) {
        return Err(Error::InvalidArgument(format!("frame {bad} has a different shape")));
    }
    let mut out = Vec::with_capacity(FIELD_HEADER_LEN + frames.len() * n * c * 4);
    out.extend_from_slice(FIELD_MAGIC);
    for v in [frames.len(), n, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for frame in frames {
        for v in frame.as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_fields(bytes: &[u8], path: &Path) -> Result<Vec<Tensor2D>> {
    check_header(path, bytes, FIELD_MAGIC, FIELD_HEADER_LEN)?;
    let t = read_u32(bytes, 4) as usize;
    let n = read_u32(bytes, 8) as usize;
    let c = read_u32(bytes, 12) as usize;
    check_length(path, bytes, FIELD_HEADER_LEN + t * n * c * 4)?;
    let values: Vec<f64> = bytes[FIELD_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    if n * c == 0 {
        return Ok(vec![Tensor2D::zeros(n, c); t]);
    }
    values
        .chunks_exact(n * c)
        .map(|frame| Tensor2D::new(n, c, frame.to_vec()))
        .collect()
}

pub fn write_fields(path: &Path, frames: &[Tensor2D]) -> Result<()> {
    fs::write(path, encode_fields(frames)?).map_err(io_err(path))
}

pub fn read_fields(path: &Path) -> Result<Vec<Tensor2D>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_fields(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn field_file_size() {
        let frame = Tensor2D::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_fields(&[frame]).unwrap();
        // 4-byte magic + three u32 counts, then 6 float32 values
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn truncated_fields_name_lengths() {
        let frame = Tensor2D::zeros(2, 3);
        let bytes = encode_fields(&[frame.clone(), frame]).unwrap();
        let err = decode_fields(&bytes[..bytes.len() - 4], p()).unwrap_err();
        assert!(err.to_string().contains("expected 64 bytes, got 60"), "{err}");
        let err = decode_fields(&bytes[..10], p()).unwrap_err();
        assert!(err.to_string().contains("truncated header"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_fields(&[Tensor2D::zeros(1, 3)]).unwrap();
        bytes[0] = b'X';
        match decode_fields(&bytes, p()) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mesh = Mesh::new(2, vec![0.0, 0.0, 1.0, 1.0], Level::Output).unwrap();
        let mut bytes = encode_mesh(&mesh);
        bytes[3] = b'2';
        assert!(matches!(decode_mesh(&bytes, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn mesh_header_layout() {
        let mesh = Mesh::new(2, vec![0.5, 0.25, 1.0, 0.0], Level::Output).unwrap();
        let bytes = encode_mesh(&mesh);
        assert_eq!(&bytes[..4], b"MSH1");
        assert_eq!(bytes[4..8], 2u32.to_le_bytes());
        assert_eq!(bytes[8..16], 2u64.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 4 * 8);
        assert!(decode_mesh(&bytes[..20], p()).is_err());
    }

    proptest! {
        #[test]
        fn mesh_round_trip_is_bitwise(coords in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let dim = 2;
            let mut coords = coords;
            coords.truncate(coords.len() / dim * dim);
            prop_assume!(!coords.is_empty());
            if let Ok(mesh) = Mesh::new(dim, coords, Level::Output) {
                let back = decode_mesh(&encode_mesh(&mesh), p()).unwrap();
                prop_assert_eq!(back, mesh);
            }
        }

        #[test]
        fn fields_round_trip_within_f32(values in prop::collection::vec(-1e3f64..1e3, 6..60)) {
            let frames: Vec<Tensor2D> = values
                .chunks_exact(6)
                .map(|c| Tensor2D::new(2, 3, c.to_vec()).unwrap())
                .collect();
            let back = decode_fields(&encode_fields(&frames).unwrap(), p()).unwrap();
            prop_assert_eq!(back.len(), frames.len());
            for (a, b) in frames.iter().zip(&back) {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    prop_assert_eq!(*y, *x as f32 as f64);
                }
            }
            // already-representable values survive a second trip exactly
            let again = decode_fields(&encode_fields(&back).unwrap(), p()).unwrap();
            prop_assert_eq!(again, back);
        }
    }
}
