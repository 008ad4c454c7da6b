//! Binary netpbm export (`P5` grayscale, `P6` RGB) and a header parser.

use std::io;
use std::path::Path;

/// `P6` with maxval 255; `rgb` is interleaved, row-major.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "ppm payload size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// `P5` with maxval 255.
pub fn encode_pgm8(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pgm payload size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// `P5` with maxval 65535; samples are big-endian as netpbm requires.
pub fn encode_pgm16(width: usize, height: usize, gray: &[u16]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pgm payload size");
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Planar `[3, H, W]` values in `[0, 1]` to interleaved 8-bit RGB.
pub fn planar_to_rgb8(planar: &[f64], width: usize, height: usize) -> Vec<u8> {
    let n = width * height;
    assert_eq!(planar.len(), 3 * n, "planar image size");
    let mut out = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            out.push(quantize_u8(planar[c * n + p]));
        }
    }
    out
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> io::Result<()> {
    std::fs::write(path, bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnmHeader {
    /// `5` for P5, `6` for P6.
    pub kind: u8,
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    /// Offset of the first payload byte.
    pub data_offset: usize,
}

impl PnmHeader {
    pub fn payload_len(&self) -> usize {
        let channels = if self.kind == 6 { 3 } else { 1 };
        let bytes = if self.maxval > 255 { 2 } else { 1 };
        self.width * self.height * channels * bytes
    }
}

/// Parses a binary netpbm header: magic, whitespace-separated width, height
/// and maxval (with `#` comments allowed), then exactly one whitespace byte.
pub fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader, String> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err("not a binary P5/P6 file".into());
    }
    let kind = bytes[1] - b'0';
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("expected a decimal header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| format!("bad header field: {e}"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let header = PnmHeader {
        kind,
        width: fields[0] as usize,
        height: fields[1] as usize,
        maxval: fields[2] as u32,
        data_offset: pos + 1,
    };
    if header.maxval == 0 || header.maxval > 65535 {
        return Err(format!("maxval {} out of range", header.maxval));
    }
    if bytes.len() - header.data_offset != header.payload_len() {
        return Err(format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - header.data_offset,
            header.payload_len()
        ));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_parse_back() {
        let ppm = encode_ppm(3, 2, &[7; 18]);
        let h = parse_pnm_header(&ppm).unwrap();
        assert_eq!((h.kind, h.width, h.height, h.maxval), (6, 3, 2, 255));
        let pgm = encode_pgm16(2, 2, &[0, 1, 65535, 256]);
        let h = parse_pnm_header(&pgm).unwrap();
        assert_eq!((h.kind, h.maxval), (5, 65535));
        assert_eq!(&pgm[h.data_offset + 4..h.data_offset + 6], &[0xff, 0xff]);
        let commented = b"P5\n# note\n1 1\n255\n\x07";
        assert_eq!(parse_pnm_header(commented).unwrap().data_offset, 18);
    }

    #[test]
    fn rejects_short_payload() {
        let mut pgm = encode_pgm8(2, 2, &[1, 2, 3, 4]);
        pgm.pop();
        assert!(parse_pnm_header(&pgm).is_err());
        assert!(parse_pnm_header(b"P3\n1 1\n255\n").is_err());
    }
}
