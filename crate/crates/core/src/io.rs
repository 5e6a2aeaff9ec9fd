//! Binary tensor files and 8-bit PGM images.
//!
//! Tensor file layout, all little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4  | magic `CRFT` |
//! | 4  | 1  | version (1) |
//! | 5  | 1  | dtype (1 = f32, 2 = f64) |
//! | 6  | 16 | shape `n, c, h, w` as u32 |
//! | 22 | .. | payload, `n*c*h*w` elements |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"CRFT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

/// A tensor file of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype_code(T::DTYPE));
    for d in s.dims() {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn decode_payload<T: Scalar>(shape: Shape, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_shape_vec(shape, data)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        1 => DType::F32,
        2 => DType::F64,
        code => return Err(Error::format(5, format!("unknown dtype code {code}"))),
    };
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 6 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    }
    let shape = Shape::try_from(dims).map_err(|e| Error::format(6, format!("invalid shape: {e}")))?;
    let expected = shape
        .len()
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::format(6, "shape overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            (HEADER_LEN + payload.len().min(expected)) as u64,
            format!(
                "payload length mismatch: expected {} bytes, got {}",
                HEADER_LEN + expected,
                bytes.len()
            ),
        ));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, payload)?),
    })
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    match (decode_any(bytes)?, T::DTYPE) {
        (AnyTensor::F32(t), DType::F32) => Ok(t.cast()),
        (AnyTensor::F64(t), DType::F64) => Ok(t.cast()),
        (other, want) => Err(Error::format(
            5,
            format!("file holds {:?} data, requested {want:?}", other.dtype()),
        )),
    }
}

pub fn save_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode_any(&fs::read(path)?)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("expected {what}")))
    }
}

/// Parses a binary (P5) 8-bit PGM into a `(1, 1, h, w)` tensor scaled by 1/255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(0, "not a PGM file"));
    }
    if bytes[1] != b'5' {
        return Err(Error::format(
            1,
            format!("unsupported PGM variant P{}; only binary P5 is read", bytes[1] as char),
        ));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let maxval_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at as u64,
            format!("unsupported PGM variant: maxval {maxval}, only 8-bit (255) is read"),
        ));
    }
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(Error::format(hdr.pos as u64, "missing whitespace after maxval"));
    }
    let start = hdr.pos + 1;
    let shape = Shape::new(1, 1, h, w).map_err(|e| Error::format(3, format!("invalid size: {e}")))?;
    let pixels = &bytes[start..];
    if pixels.len() < shape.len() {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated pixel data: expected {} bytes, got {}",
                start + shape.len(),
                bytes.len()
            ),
        ));
    }
    let data = pixels[..shape.len()].iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::from_shape_vec(shape, data)
}

/// Encodes a single-image, single-channel tensor, clamping to [0, 1] and
/// rounding to the nearest 8-bit level.
pub fn encode_pgm(t: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape(format!("PGM needs shape (1, 1, h, w), got {s}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(t.data().iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_pgm(t: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec([1, 2, 1, 3], vec![1.0; 6]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(b.len(), HEADER_LEN + 24);
        assert_eq!(&b[..6], b"CRFT\x01\x01");
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_f64_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::random_uniform(Shape::new(2, 3, 4, 5).unwrap(), -1e3, 1e3, &mut rng);
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t), bits(&back));
    }

    #[test]
    fn truncation_reports_lengths() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2).unwrap());
        let b = encode_tensor(&t).unwrap();
        let err = decode_any(&b[..b.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("54") && msg.contains("51"), "{msg}");
    }

    #[test]
    fn wrong_magic_and_dtype() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1).unwrap());
        let mut b = encode_tensor(&t).unwrap();
        assert!(matches!(decode_tensor::<f32>(&b), Err(Error::Format { offset: 5, .. })));
        b[0] = b'X';
        assert!(matches!(decode_any(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn pgm_values() {
        let mut b = b"P5\n# comment\n2 2\n255\n".to_vec();
        b.extend([0u8, 255, 128, 64]);
        let t = decode_pgm(&b).unwrap();
        assert_eq!(t.shape().dims(), [1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn ascii_pgm_rejected() {
        let err = decode_pgm(b"P2\n2 2\n255\n0 1 2 3\n").unwrap_err();
        assert!(err.to_string().contains("unsupported PGM variant"));
    }
}
