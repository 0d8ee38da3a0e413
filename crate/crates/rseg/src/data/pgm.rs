//! Binary PGM (P5) reading and writing.
//!
//! Images quantize [0, 1] to 0..=255; masks store {0, 1} as {0, 255} and
//! round-trip exactly. The reader accepts the full P5 grammar: `#` comments
//! and arbitrary whitespace between header tokens, maxval up to 255.

use std::path::Path;

use super::{io_err, DataError, GrayImage, Mask};

fn header(w: usize, h: usize) -> String {
    format!("P5\n{w} {h}\n255\n")
}

pub fn write_image_pgm(image: &GrayImage, path: &Path) -> Result<(), DataError> {
    let mut bytes = header(image.w, image.h).into_bytes();
    bytes.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_mask_pgm(mask: &Mask, path: &Path) -> Result<(), DataError> {
    let mut bytes = header(mask.w, mask.h).into_bytes();
    bytes.extend(mask.data().iter().map(|&v| v * 255));
    std::fs::write(path, bytes).map_err(io_err(path))
}

struct P5 {
    w: usize,
    h: usize,
    maxval: u32,
    pixels: Vec<u8>,
}

fn parse_p5(bytes: &[u8], path: &Path) -> Result<P5, DataError> {
    let bad = |detail: &str| DataError::MalformedPgm {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0usize;
    // token reader honoring '#' comments
    let mut next_token = |bytes: &[u8], pos: &mut usize| -> Option<Vec<u8>> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        if *pos >= bytes.len() {
            return None;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        Some(bytes[start..*pos].to_vec())
    };

    let magic = next_token(bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
    if magic != b"P5" {
        return Err(bad(&format!("magic {:?} is not P5", String::from_utf8_lossy(&magic))));
    }
    let mut read_num = |what: &str, pos: &mut usize| -> Result<usize, DataError> {
        let tok = next_token(bytes, pos).ok_or_else(|| bad(&format!("missing {what}")))?;
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad(&format!("bad {what} token")))
    };
    let w = read_num("width", &mut pos)?;
    let h = read_num("height", &mut pos)?;
    let maxval = read_num("maxval", &mut pos)?;
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing payload separator"));
    }
    pos += 1;
    let need = w * h;
    if bytes.len() - pos < need {
        return Err(bad(&format!(
            "truncated payload: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    Ok(P5 { w, h, maxval: maxval as u32, pixels: bytes[pos..pos + need].to_vec() })
}

pub fn read_image_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let p5 = parse_p5(&bytes, path)?;
    let scale = 1.0 / p5.maxval as f32;
    Ok(GrayImage {
        w: p5.w,
        h: p5.h,
        data: p5.pixels.iter().map(|&b| b as f32 * scale).collect(),
    })
}

/// Read a mask stored as {0, maxval}; anything else is rejected.
pub fn read_mask_pgm(path: &Path) -> Result<Mask, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let p5 = parse_p5(&bytes, path)?;
    let mut data = Vec::with_capacity(p5.pixels.len());
    for &b in &p5.pixels {
        if b == 0 {
            data.push(0);
        } else if b as u32 == p5.maxval {
            data.push(1);
        } else {
            return Err(DataError::NonBinaryMask(b));
        }
    }
    Mask::from_raw(p5.w, p5.h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = GrayImage { w: 2, h: 2, data: vec![0.0, 1.0, 0.5, 0.25] };
        write_image_pgm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"P5\n2 2\n255".as_slice());
        assert_eq!(bytes.len(), "P5\n2 2\n255\n".len() + 4);
    }

    #[test]
    fn mask_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut m = Mask::zeros(7, 5);
        for (i, v) in [(3usize, 2usize), (0, 0), (6, 4)] {
            m.set(i, v, true);
        }
        write_mask_pgm(&m, &path).unwrap();
        assert_eq!(read_mask_pgm(&path).unwrap(), m);
    }

    #[test]
    fn image_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.pgm");
        let img = GrayImage {
            w: 16,
            h: 4,
            data: (0..64).map(|i| i as f32 / 63.0).collect(),
        };
        write_image_pgm(&img, &path).unwrap();
        let back = read_image_pgm(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn foreign_p5_with_comments_and_odd_whitespace_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        // hand-built file in the style another tool might emit
        let mut bytes = b"P5 # magic\n# a comment line\n  3\t2 # dims\n255\n".to_vec();
        bytes.extend([0u8, 255, 0, 255, 0, 255]);
        std::fs::write(&path, &bytes).unwrap();
        let m = read_mask_pgm(&path).unwrap();
        assert_eq!((m.w, m.h), (3, 2));
        assert_eq!(m.data(), &[0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_image_pgm(&path), Err(DataError::MalformedPgm { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\nx").unwrap();
        assert!(matches!(read_image_pgm(&path), Err(DataError::MalformedPgm { .. })));
    }

    #[test]
    fn gray_mask_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 128]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_mask_pgm(&path), Err(DataError::NonBinaryMask(128))));
    }
}
