//! On-disk formats: the little-endian binary image container and the
//! convergence-metrics CSV.

use std::io::Write;
use std::path::Path;

use crate::ct::ImageGrid;
use crate::error::{Error, Result};
use crate::metrics::ConvergenceRecord;

const MAGIC: &[u8; 4] = b"PDFW";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// Writes an image as `PDFW` magic, format version (u32), nx (u32), ny (u32),
/// spacing (f64), then the row-major values (f64 each), all little-endian.
pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * image.values.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(image.nx as u32).to_le_bytes());
    bytes.extend_from_slice(&(image.ny as u32).to_le_bytes());
    bytes.extend_from_slice(&image.spacing.to_le_bytes());
    for v in &image.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an image written by [`write_image`], validating magic, version, and
/// payload length before reconstructing it bit-exactly.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::bad_file(
            path,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::bad_file(path, "magic bytes are not PDFW"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::bad_file(
            path,
            format!("unsupported format version {version} (expected {VERSION})"),
        ));
    }
    let nx = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let ny = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let spacing = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let n = nx
        .checked_mul(ny)
        .ok_or_else(|| Error::bad_file(path, "image dimensions overflow"))?;
    let expected = HEADER_LEN + 8 * n;
    if bytes.len() != expected {
        return Err(Error::bad_file(
            path,
            format!("expected {expected} bytes for a {nx}x{ny} image, got {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageGrid::new(nx, ny, spacing, values)
}

/// Writes a convergence record as CSV with header
/// `k,cost,normalized_cost,rmsd,wall_seconds` and one row per logged
/// iteration. Floats carry 17 significant digits, enough for an exact
/// round-trip back to the identical f64.
pub fn write_metrics_csv(path: &Path, record: &ConvergenceRecord) -> Result<()> {
    if record.is_empty() {
        return Err(Error::invalid("record", "refusing to write an empty metrics CSV"));
    }
    let mut out = String::from("k,cost,normalized_cost,rmsd,wall_seconds\n");
    for row in record.rows() {
        use std::fmt::Write as _;
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            row.k, row.cost, row.normalized_cost, row.rmsd, row.wall_seconds
        )
        .expect("string writes cannot fail");
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
