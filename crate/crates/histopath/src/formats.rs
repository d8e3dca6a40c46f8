//! On-disk formats: 8-bit PNG for images and masks, the `PMAP` binary
//! format for probability maps, and CSV for prediction matrices.
//!
//! `PMAP` layout:
//!
//! ```text
//! PMAP1\n            six magic bytes
//! <K> <H> <W>\n      ASCII channel count, height, width
//! payload            K*H*W little-endian IEEE-754 f32, channel-major,
//!                    rows within a channel stored top to bottom
//! ```
//!
//! Format errors carry the byte offset at which parsing stopped making
//! sense; for PNG payloads decoded by the `image` crate the offset
//! points at the end of the signature, the last region this module
//! validates itself.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask, ProbMap, PredMatrix, NUM_CLASSES};

const PMAP_MAGIC: &[u8; 6] = b"PMAP1\n";
const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Read an 8-bit grayscale or RGB PNG.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    check_png_signature(&bytes)?;
    let decoded = ::image::load_from_memory(&bytes)
        .map_err(|e| Error::format(PNG_MAGIC.len() as u64, format!("png decode failed: {e}")))?;
    match decoded {
        ::image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Image::new_u8(h, w, 1, img.into_raw())
        }
        ::image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Image::new_u8(h, w, 3, img.into_raw())
        }
        other => Err(Error::validation(format!(
            "unsupported png color type {:?}: expected 8-bit grayscale or RGB",
            other.color()
        ))),
    }
}

/// Write an 8-bit image as PNG. Float images must be quantized by the
/// caller first; refusing them here keeps the round trip lossless.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let data = img.as_u8().ok_or_else(|| {
        Error::validation("only 8-bit images can be written as PNG")
    })?;
    let color = match img.channels() {
        1 => ::image::ExtendedColorType::L8,
        3 => ::image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::validation(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    };
    ::image::save_buffer(
        path,
        data,
        img.width() as u32,
        img.height() as u32,
        color,
    )
    .map_err(|e| Error::validation(format!("png encode failed: {e}")))
}

/// Read a label mask stored as an 8-bit grayscale PNG with raw class
/// ids (not rescaled for display).
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = read_image(path)?;
    if img.channels() != 1 {
        return Err(Error::validation(format!(
            "mask PNG must be grayscale, got {} channels",
            img.channels()
        )));
    }
    let data = img.as_u8().expect("read_image returns 8-bit data").to_vec();
    LabelMask::new(img.height(), img.width(), data).map_err(|e| match e {
        Error::Validation(msg) => Error::validation(format!(
            "{msg} (mask PNGs store raw class ids 0..={})",
            NUM_CLASSES - 1
        )),
        other => other,
    })
}

/// Write a label mask as an 8-bit grayscale PNG with raw class ids.
pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let img = Image::new_u8(mask.height(), mask.width(), 1, mask.labels().to_vec())?;
    write_image(path, &img)
}

fn check_png_signature(bytes: &[u8]) -> Result<()> {
    for (i, &expect) in PNG_MAGIC.iter().enumerate() {
        match bytes.get(i) {
            Some(&b) if b == expect => {}
            Some(_) => {
                return Err(Error::format(
                    i as u64,
                    format!("not a PNG file (signature mismatch at byte {i})"),
                ))
            }
            None => {
                return Err(Error::format(
                    bytes.len() as u64,
                    "file truncated inside PNG signature".to_string(),
                ))
            }
        }
    }
    Ok(())
}

/// Write a probability map in `PMAP` format.
pub fn write_probmap(path: &Path, map: &ProbMap) -> Result<()> {
    let mut out = Vec::with_capacity(16 + map.values().len() * 4);
    out.extend_from_slice(PMAP_MAGIC);
    out.extend_from_slice(format!("{} {} {}\n", map.classes(), map.height(), map.width()).as_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a `PMAP` probability map.
///
/// The normalization flag is not stored; it is inferred by checking
/// whether every pixel's channels sum to 1 within 1e-5.
pub fn read_probmap(path: &Path) -> Result<ProbMap> {
    let bytes = fs::read(path)?;
    parse_probmap(&bytes)
}

fn parse_probmap(bytes: &[u8]) -> Result<ProbMap> {
    if bytes.len() < PMAP_MAGIC.len() || &bytes[..PMAP_MAGIC.len()] != PMAP_MAGIC {
        let offset = bytes
            .iter()
            .zip(PMAP_MAGIC.iter())
            .position(|(a, b)| a != b)
            .unwrap_or(bytes.len().min(PMAP_MAGIC.len()));
        return Err(Error::format(offset as u64, "bad PMAP magic".to_string()));
    }
    let header_start = PMAP_MAGIC.len();
    let rel_newline = bytes[header_start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| {
            Error::format(bytes.len() as u64, "unterminated PMAP header line".to_string())
        })?;
    let header_end = header_start + rel_newline;
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|e| Error::format(header_start as u64, format!("header is not ASCII: {e}")))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::format(
            header_start as u64,
            format!("header must be '<K> <H> <W>', got {header:?}"),
        ));
    }
    let parse_dim = |s: &str, name: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| {
            Error::format(header_start as u64, format!("bad {name} {s:?} in header"))
        })
    };
    let k = parse_dim(fields[0], "channel count")?;
    let h = parse_dim(fields[1], "height")?;
    let w = parse_dim(fields[2], "width")?;
    let count = k
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| {
            Error::format(header_start as u64, "header dimensions overflow".to_string())
        })?;
    let payload_start = header_end + 1;
    let expected_len = payload_start + count * 4;
    if bytes.len() < expected_len {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "payload truncated: need {count} floats ({} bytes), file ends early",
                count * 4
            ),
        ));
    }
    if bytes.len() > expected_len {
        return Err(Error::format(
            expected_len as u64,
            format!("{} trailing bytes after payload", bytes.len() - expected_len),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in bytes[payload_start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::format(
                (payload_start + i * 4) as u64,
                format!("probability {v} is outside [0, 1]"),
            ));
        }
        values.push(v);
    }
    let normalized = k > 1 && pixelwise_sums_to_one(k, h, w, &values);
    ProbMap::new(k, h, w, values, normalized)
}

fn pixelwise_sums_to_one(k: usize, h: usize, w: usize, values: &[f32]) -> bool {
    for y in 0..h {
        for x in 0..w {
            let s: f32 = (0..k).map(|c| values[(c * h + y) * w + x]).sum();
            if (s - 1.0).abs() > 1e-5 {
                return false;
            }
        }
    }
    true
}

/// Write a prediction matrix as CSV with one `c<i>` column per class.
/// Floats are printed in shortest round-trip form, so read-back is
/// bit-exact.
pub fn write_predmatrix_csv(path: &Path, m: &PredMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(csv_to_io)?;
    let header: Vec<String> = (0..m.classes()).map(|c| format!("c{c}")).collect();
    wtr.write_record(&header).map_err(csv_to_io)?;
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        wtr.write_record(&row).map_err(csv_to_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a prediction matrix written by [`write_predmatrix_csv`].
pub fn read_predmatrix_csv(path: &Path) -> Result<PredMatrix> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_to_io)?;
    let classes = rdr.headers().map_err(csv_to_io)?.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(csv_to_io)?;
        if record.len() != classes {
            return Err(Error::validation(format!(
                "csv row {} has {} fields, header has {classes}",
                rows + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f32 = field.parse().map_err(|_| {
                Error::validation(format!("bad float {field:?} in prediction csv"))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    PredMatrix::new(rows, classes, values)
}

fn csv_to_io(e: csv::Error) -> Error {
    Error::validation(format!("csv: {e}"))
}
