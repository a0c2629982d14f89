use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parses binary P5 (grey) or P6 (RGB) with maxval 255 into `[H, W, C]` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PPM header".into()))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported magic '{m}'"))),
    };
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad {what} '{s}' in PPM header")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::Unsupported(format!("PPM maxval {maxval}; only 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("PPM with zero size".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator after PPM header".into()));
    }
    let data = &bytes[pos + 1..];
    let need = w * h * channels;
    if data.len() < need {
        return Err(Error::Length {
            expected: need,
            found: data.len(),
        });
    }
    Tensor::new([h, w, channels], data[..need].iter().map(|&b| b as f32 / 255.0).collect())
}

/// Encodes `[H, W, 1]` as P5 or `[H, W, 3]` as P6, rounding to 8 bits.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, magic) = match *img.dims() {
        [h, w, 1] => (h, w, "P5"),
        [h, w, 3] => (h, w, "P6"),
        ref d => return Err(Error::Shape(format!("PPM needs [H,W,1|3], got {d:?}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(img.as_slice().iter().map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_ppm<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_pixel() {
        let t = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.dims(), &[1, 1, 3]);
        assert_eq!(t.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn comments_and_grey() {
        let t = decode_ppm(b"P5 # grey\n# size next\n2 1 255\n\x00\x80").unwrap();
        assert_eq!(t.dims(), &[1, 2, 1]);
        assert_eq!(t.as_slice()[1], 128.0 / 255.0);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bytes = b"P6\n5 3\n255\n".to_vec();
        bytes.extend((0..45).map(|_| rng.gen::<u8>()));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        std::fs::write(&p, &bytes).unwrap();
        let t = load_ppm(&p).unwrap();
        save_ppm(dir.path().join("b.ppm"), &t).unwrap();
        assert_eq!(std::fs::read(dir.path().join("b.ppm")).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Unsupported(_))));
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n1 2 3"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n1 x\n255\n"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0"), Err(Error::Length { .. })));
        assert!(matches!(decode_ppm(b"P6\n2"), Err(Error::Format(_))));
        assert!(encode_ppm(&Tensor::<f32>::zeros([2, 2, 2]).unwrap()).is_err());
    }
}
