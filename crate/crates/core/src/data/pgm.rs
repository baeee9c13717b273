//! Binary greyscale PGM (`P5`, 8-bit) codec.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("malformed PGM header: bad {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Data("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2;
    let width = header_int(bytes, &mut pos, "width")?;
    let height = header_int(bytes, &mut pos, "height")?;
    let maxval = header_int(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Data(format!("PGM has empty size {width}×{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("only 8-bit PGM is supported (maxval {maxval})")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Data("malformed PGM header: missing separator".into()));
    }
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Data(format!("PGM raster truncated: need {n} bytes, have {}", bytes.len() - pos)))?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster.iter().map(|&p| ((u32::from(p.min(maxval as u8)) * 255 + maxval as u32 / 2) / maxval as u32) as u8).collect()
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let img = GrayImage { width: 3, height: 2, pixels: vec![0, 1, 2, 253, 254, 255] };
        assert_eq!(decode(&encode(&img)).unwrap(), img);
        let with_comment = b"P5\n# made by hand\n3 2\n255\n\x00\x01\x02\xfd\xfe\xff";
        assert_eq!(decode(with_comment).unwrap(), img);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00\x01").is_err());
        assert!(decode(b"P5\nx 2\n255\n").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
