//! Binary PGM (P5) image export and read-back.
//!
//! Images are written with maxval 255; pixels are the clamped `[0,1]` values
//! rounded to the nearest of the 256 levels, so a write/read round trip is
//! exact to within one quantization step (1/255).

use std::fs;
use std::path::Path;

use roadcast_core::{Error, Result, Tensor};

/// Encodes an `[H,W,1]` image, clamping pixels to `[0,1]`.
pub fn pgm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[2] != 1 {
        return Err(Error::InvalidConfig(format!(
            "PGM export expects an [H,W,1] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, pgm_bytes(image)?)?;
    Ok(())
}

/// Decodes a maxval-255 P5 file back to an `[H,W,1]` image with pixels in
/// `[0,1]`. Comment lines (`#`) in the header are accepted. The binary only
/// writes PGMs; this parser exists to round-trip them in tests.
#[cfg(test)]
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a binary PGM (magic P5 missing)"));
    }
    // read three whitespace-separated header integers after the magic,
    // skipping '#' comments, then exactly one whitespace before the raster
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are ASCII")
            .parse()
            .map_err(|_| bad("header value out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (expected 255)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace before raster"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != w * h {
        return Err(bad(&format!(
            "raster holds {} bytes, header promises {}",
            raster.len(),
            w * h
        )));
    }
    Tensor::from_vec(
        &[h, w, 1],
        raster.iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

/// Rescales an image to span `[0,1]` for visual export, returning the scaled
/// image with the original minimum and maximum. A constant image maps to 0.
pub fn normalize_for_export(image: &Tensor<f32>) -> (Tensor<f32>, f32, f32) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in image.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let scaled = if span > 0.0 {
        image.map(|v| (v - lo) / span)
    } else {
        image.map(|_| 0.0)
    };
    (scaled, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = Tensor::from_fn(&[5, 7, 1], |i| (i as f32 * 0.031).sin().abs());
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn header_is_canonical_p5() {
        let img = Tensor::<f32>::zeros(&[3, 4, 1]);
        let bytes = pgm_bytes(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 3\n255\n".len() + 12);
    }

    #[test]
    fn out_of_range_pixels_are_clamped() {
        let img = Tensor::from_vec(&[1, 3, 1], vec![-0.5, 0.5, 1.7]).unwrap();
        let bytes = pgm_bytes(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0u8, 128, 255]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\n____").unwrap();
        assert!(read_pgm(&path).is_err());
        std::fs::write(&path, b"P5\n2 2\n255\nxy").unwrap();
        let err = read_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("raster"), "{err}");
    }

    #[test]
    fn export_normalization_reports_raw_range() {
        let img = Tensor::from_vec(&[1, 3, 1], vec![2.0, 3.0, 4.0]).unwrap();
        let (scaled, lo, hi) = normalize_for_export(&img);
        assert_eq!((lo, hi), (2.0, 4.0));
        assert_eq!(scaled.data(), &[0.0, 0.5, 1.0]);
        let flat = Tensor::from_vec(&[1, 2, 1], vec![0.7, 0.7]).unwrap();
        let (scaled, lo, hi) = normalize_for_export(&flat);
        assert_eq!((lo, hi), (0.7, 0.7));
        assert_eq!(scaled.data(), &[0.0, 0.0]);
    }
}
