//! Binary PPM (P6) images, the interchange format for all image artifacts.
//!
//! Writer grammar, byte for byte: `P6\n{width} {height}\n255\n` followed by
//! `3 * width * height` RGB bytes in row-major order. The reader accepts any
//! single whitespace byte where the writer puts one, and reports malformed
//! input with the byte offset where parsing stopped.

use std::path::Path;

use crate::error::{QartError, Result};
use crate::tensor::Tensor;

/// Serialize a `[3, h*w]` image with values in [0, 1].
pub fn encode_ppm(img: &Tensor, h: usize, w: usize) -> Result<Vec<u8>> {
    if img.shape() != [3, h * w] {
        return Err(QartError::dim(format!(
            "image shape {:?}, expected [3, {}]",
            img.shape(),
            h * w
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for p in 0..h * w {
        for ch in 0..3 {
            let v = img.data()[ch * h * w + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> QartError {
        QartError::format(self.pos, msg)
    }

    fn take(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.fail("unexpected end of file"))?;
        self.pos += 1;
        Ok(b)
    }

    fn expect_whitespace(&mut self) -> Result<()> {
        let b = self.take()?;
        if !b.is_ascii_whitespace() {
            return Err(QartError::format(
                self.pos - 1,
                format!("expected whitespace, got 0x{:02x}", b),
            ));
        }
        Ok(())
    }

    fn integer(&mut self) -> Result<usize> {
        let start = self.pos;
        let mut val: usize = 0;
        let mut any = false;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                any = true;
                val = val
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as usize))
                    .ok_or_else(|| QartError::format(start, "integer overflow"))?;
                self.pos += 1;
            } else {
                break;
            }
        }
        if !any {
            return Err(QartError::format(self.pos, "expected a decimal integer"));
        }
        Ok(val)
    }
}

/// Parse a P6 image to a `[3, h*w]` tensor with values in [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<(Tensor, usize, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take()? != b'P' || cur.take()? != b'6' {
        return Err(QartError::format(0, "not a P6 image"));
    }
    cur.expect_whitespace()?;
    let w = cur.integer()?;
    cur.expect_whitespace()?;
    let h = cur.integer()?;
    cur.expect_whitespace()?;
    let maxval = cur.integer()?;
    if maxval != 255 {
        return Err(QartError::format(
            cur.pos,
            format!("unsupported max value {}", maxval),
        ));
    }
    cur.expect_whitespace()?;
    if w == 0 || h == 0 {
        return Err(QartError::format(cur.pos, "zero-sized image"));
    }
    let need = 3 * w * h;
    let rest = &bytes[cur.pos..];
    if rest.len() < need {
        return Err(QartError::format(
            bytes.len(),
            format!("pixel payload truncated: {} of {} bytes", rest.len(), need),
        ));
    }
    if rest.len() > need {
        return Err(QartError::format(
            cur.pos + need,
            format!("{} trailing bytes after pixel payload", rest.len() - need),
        ));
    }
    let mut img = Tensor::zeros(vec![3, h * w]);
    for p in 0..h * w {
        for ch in 0..3 {
            img.data_mut()[ch * h * w + p] = rest[p * 3 + ch] as f64 / 255.0;
        }
    }
    Ok((img, h, w))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor, h: usize, w: usize) -> Result<()> {
    let bytes = encode_ppm(img, h, w)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(Tensor, usize, usize)> {
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_layout_is_frozen() {
        let mut img = Tensor::zeros(vec![3, 1]);
        img.data_mut().copy_from_slice(&[1.0, 0.0, 0.5]);
        let bytes = encode_ppm(&img, 1, 1).unwrap();
        // Header is exactly "P6\n1 1\n255\n" (11 bytes), total 14.
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(bytes.len(), 14);
        assert_eq!(&bytes[11..], &[255, 0, 128]);
    }

    #[test]
    fn round_trip_is_exact_on_the_byte_grid() {
        let mut img = Tensor::zeros(vec![3, 12]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let bytes = encode_ppm(&img, 3, 4).unwrap();
        let (back, h, w) = decode_ppm(&bytes).unwrap();
        assert_eq!((h, w), (3, 4));
        assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
    }

    #[test]
    fn values_clamp_and_round_to_bytes() {
        let mut img = Tensor::zeros(vec![3, 1]);
        img.data_mut()
            .copy_from_slice(&[-0.5, 2.0, 0.5019607843137255]);
        let bytes = encode_ppm(&img, 1, 1).unwrap();
        assert_eq!(&bytes[11..], &[0, 255, 128]);
    }

    #[test]
    fn malformed_input_reports_the_failing_offset() {
        // Wrong magic.
        let err = decode_ppm(b"P5\n1 1\n255\n___").unwrap_err();
        assert!(
            matches!(err, QartError::Format { offset: 0, .. }),
            "{:?}",
            err
        );

        // Truncated payload: offset points at the end of the input.
        let err = decode_ppm(b"P6\n2 1\n255\nxxx").unwrap_err();
        match err {
            QartError::Format { offset, msg } => {
                assert_eq!(offset, 14);
                assert!(msg.contains("3 of 6"), "{}", msg);
            }
            other => panic!("unexpected error {:?}", other),
        }

        // Garbage where a dimension should be.
        let err = decode_ppm(b"P6\nx 1\n255\n___").unwrap_err();
        assert!(
            matches!(err, QartError::Format { offset: 3, .. }),
            "{:?}",
            err
        );

        // Unsupported max value.
        let err = decode_ppm(b"P6\n1 1\n127\n___").unwrap_err();
        assert!(matches!(err, QartError::Format { .. }), "{:?}", err);

        // Trailing junk.
        let err = decode_ppm(b"P6\n1 1\n255\nabcZ").unwrap_err();
        assert!(
            matches!(err, QartError::Format { offset: 14, .. }),
            "{:?}",
            err
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = Tensor::zeros(vec![3, 4]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64 / 11.0;
        }
        write_ppm(&path, &img, 2, 2).unwrap();
        let (back, h, w) = read_ppm(&path).unwrap();
        assert_eq!((h, w), (2, 2));
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
    }
}
