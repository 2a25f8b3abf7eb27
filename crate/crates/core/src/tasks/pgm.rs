//! Binary greyscale PGM (`P5`) images, 8 or 16 bit.

use std::fs;
use std::path::Path;

use crate::error::{Result, SpenError};
use crate::tensor::Tensor;

fn fmt_err(offset: usize, msg: impl Into<String>) -> SpenError {
    SpenError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(fmt_err(0, "not a binary PGM (expected `P5`)"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // Whitespace and comments between fields.
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(pos, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&buf[start..pos]).expect("ascii digits");
        fields[i] = text
            .parse()
            .map_err(|_| fmt_err(start, format!("{name} `{text}` out of range")))?;
    }
    match buf.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt_err(pos, "expected one whitespace byte after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fmt_err(2, format!("empty image {width}×{height}")));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(fmt_err(
            2,
            format!("unsupported maxval {maxval} (need 255 or 65535)"),
        ));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data_start: pos,
    })
}

/// Decode a `P5` buffer into a `[1, h, w]` tensor scaled to `[0, 1]`.
pub fn decode_pgm(buf: &[u8]) -> Result<Tensor> {
    let h = parse_header(buf)?;
    let bytes_per = if h.maxval > 255 { 2 } else { 1 };
    let need = h.width * h.height * bytes_per;
    let payload = &buf[h.data_start..];
    if payload.len() < need {
        return Err(fmt_err(
            buf.len(),
            format!(
                "truncated payload: need {need} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let scale = 1.0 / h.maxval as f64;
    let data = if bytes_per == 1 {
        payload[..need].iter().map(|&b| b as f64 * scale).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Ok(Tensor::from_parts(vec![1, h.height, h.width], data))
}

/// Encode a `[1, h, w]` (or `[h, w]`) tensor with values in `[0, 1]`.
pub fn encode_pgm(img: &Tensor, maxval: u32) -> Result<Vec<u8>> {
    if maxval != 255 && maxval != 65535 {
        return Err(SpenError::Config(format!("unsupported maxval {maxval}")));
    }
    let (h, w) = match img.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => {
            return Err(SpenError::dim(
                "encode_pgm",
                format!("expected one image, got {s:?}"),
            ))
        }
    };
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor, maxval: u32) -> Result<()> {
    fs::write(path, encode_pgm(img, maxval)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SpenRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn decode_8bit() {
        let mut buf = b"P5\n2 2\n255\n".to_vec();
        buf.extend([0, 255, 128, 64]);
        let t = decode_pgm(&buf).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in t.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((t.data()[2] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn decode_16bit_big_endian() {
        let mut buf = b"P5 # depth\n1 2\n65535\n".to_vec();
        buf.extend([0xFF, 0xFF, 0x00, 0x01]);
        let t = decode_pgm(&buf).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 1.0 / 65535.0);
    }

    #[test]
    fn malformed() {
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n\0"),
            Err(SpenError::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 x\n"),
            Err(SpenError::Format { offset: 5, .. })
        ));
        match decode_pgm(b"P5\n2 2\n255\n\x01\x02") {
            Err(SpenError::Format { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("{other:?}"),
        }
        assert!(decode_pgm(b"P5\n1 1\n100\n\0").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_within_quantization(seed in any::<u64>(), wide in any::<bool>()) {
            let maxval = if wide { 65535 } else { 255 };
            let mut r = SpenRng::seed_from_u64(seed);
            let img = Tensor::uniform(&[1, 7, 5], 0.0, 1.0, &mut r);
            let back = decode_pgm(&encode_pgm(&img, maxval).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&img) <= 0.5 / maxval as f64 + 1e-12);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Tensor::from_slice(&[1, 1, 2], &[0.0, 1.0]).unwrap();
        write_pgm(&p, &img, 255).unwrap();
        assert_eq!(load_pgm(&p).unwrap(), img);
    }
}
