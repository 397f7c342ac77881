//! On-disk formats: single matrices, named-tensor checkpoints, binary PGM
//! images and JSON documents.
//!
//! Matrix record (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SVFM"
//! 4       1     version = 1
//! 5       1     dtype = 1 (f64 LE)
//! 6       2     reserved = 0
//! 8       8     rows (u64)
//! 16      8     cols (u64)
//! 24      8·n   payload, row-major
//! ```
//!
//! Checkpoint: magic "SVFC", version u8 = 1, tensor count u32, then per tensor
//! a u16 name length, the UTF-8 name and an embedded matrix record; a trailing
//! u32 CRC-32 (IEEE) covers every preceding byte.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::tasks::GrayImage;

pub const MATRIX_MAGIC: [u8; 4] = *b"SVFM";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVFC";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;
pub const MATRIX_HEADER_LEN: usize = 24;

type Matrix = DenseMatrix<f64>;

/// Ordered set of uniquely named matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet {
    entries: Vec<(String, Matrix)>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Matrix) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte slice; every read is bounds-checked.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::TruncatedPayload { needed: self.pos.saturating_add(n), found: self.bytes.len() },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

fn encode_matrix_into(m: &Matrix, out: &mut Vec<u8>) {
    out.extend_from_slice(&MATRIX_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(DTYPE_F64);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn decode_matrix_from(r: &mut Reader<'_>) -> Result<Matrix> {
    let magic = r.array::<4>()?;
    if magic != MATRIX_MAGIC {
        return Err(Error::BadMagic { expected: MATRIX_MAGIC, found: magic });
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(Error::BadFormat(format!("reserved header field is {reserved}")));
    }
    let rows = r.u64()?;
    let cols = r.u64()?;
    if rows == 0 || cols == 0 {
        return Err(Error::BadFormat(format!("empty {rows}x{cols} matrix")));
    }
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::BadFormat(format!("{rows}x{cols} matrix is too large")))?;
    let payload = r.take(len)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    DenseMatrix::from_vec(rows as usize, cols as usize, data)
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + 8 * m.as_slice().len());
    encode_matrix_into(m, &mut out);
    out
}

/// Parses one matrix record; the slice must contain nothing else.
pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes);
    let m = decode_matrix_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::BadFormat(format!("{} trailing bytes after matrix payload", bytes.len() - r.pos)));
    }
    Ok(m)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_file(path.as_ref(), &encode_matrix(m))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&read_file(path.as_ref())?)
}

pub fn encode_checkpoint(set: &TensorSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    let count = u32::try_from(set.len()).map_err(|_| Error::InvalidInput("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, m) in set.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidInput(format!("tensor name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_matrix_into(m, &mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TensorSet> {
    const MIN_LEN: usize = 4 + 1 + 4 + 4;
    if bytes.len() < MIN_LEN {
        return Err(Error::TruncatedPayload { needed: MIN_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumError { stored, computed });
    }

    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut set = TensorSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::BadFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let m = decode_matrix_from(&mut r)?;
        set.insert(name, m)?;
    }
    if r.pos != body.len() {
        return Err(Error::BadFormat(format!("{} trailing bytes before checksum", body.len() - r.pos)));
    }
    Ok(set)
}

pub fn write_checkpoint(path: impl AsRef<Path>, set: &TensorSet) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(set)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorSet> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

/// Parses a binary (`P5`) PGM. Comments are accepted anywhere in the header;
/// samples are scaled by `1/maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::BadFormat("not a PNM file".into()));
    }
    if bytes[1] != b'5' {
        return Err(Error::BadFormat(format!("unsupported PNM variant P{}", bytes[1] as char)));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        *field = pgm_header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65_535 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::BadFormat(format!("empty {width}x{height} image")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::BadFormat("missing whitespace after maxval".into())),
    }
    let n = width as usize * height as usize;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..pos + n * sample_bytes).ok_or(Error::TruncatedPayload {
        needed: pos + n * sample_bytes,
        found: bytes.len(),
    })?;
    let scale = f64::from(maxval);
    let pixels = if sample_bytes == 1 {
        raster.iter().map(|&v| f64::from(v) / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    GrayImage::new(width as usize, height as usize, pixels)
}

fn pgm_header_number(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::BadFormat("truncated PGM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::BadFormat("expected a number in PGM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| Error::BadFormat("PGM header number out of range".into()))
}

/// Encodes as 8-bit `P5` with no comments; pixels are clamped to `[0, 1]`
/// and rounded to the nearest level.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&read_file(path.as_ref())?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(img))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let bytes = read_file(path.as_ref())?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_file_is_32_bytes() {
        let bytes = encode_matrix(&Matrix::zeros(1, 1));
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..8], b"SVFM\x01\x01\x00\x00");
    }

    #[test]
    fn negative_zero_and_subnormals_survive() {
        let m = Matrix::from_rows(&[&[-0.0, f64::MIN_POSITIVE / 4.0, -f64::MAX]]);
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn matrix_header_errors() {
        let mut bytes = encode_matrix(&Matrix::identity(2));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_matrix(&bytes), Err(Error::BadMagic { .. })));

        let mut bytes = encode_matrix(&Matrix::identity(2));
        bytes[4] = 2;
        assert!(matches!(decode_matrix(&bytes), Err(Error::UnsupportedVersion(2))));

        let bytes = encode_matrix(&Matrix::identity(2));
        assert!(matches!(decode_matrix(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(decode_matrix(&bytes[..10]), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn empty_checkpoint() {
        let bytes = encode_checkpoint(&TensorSet::new()).unwrap();
        assert_eq!(bytes.len(), 13);
        assert_eq!(&bytes[5..9], &0u32.to_le_bytes());
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn checkpoint_keeps_order_and_rejects_duplicates() {
        let mut set = TensorSet::new();
        set.insert("zeta", Matrix::identity(2)).unwrap();
        set.insert("alpha", Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(set.insert("zeta", Matrix::zeros(1, 1)), Err(Error::DuplicateName(_))));
        let back = decode_checkpoint(&encode_checkpoint(&set).unwrap()).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), ["zeta", "alpha"]);
        assert_eq!(back, set);
    }

    #[test]
    fn flipped_bit_fails_checksum() {
        let mut set = TensorSet::new();
        set.insert("w", Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64)).unwrap();
        let mut bytes = encode_checkpoint(&set).unwrap();
        let payload_byte = bytes.len() - 4 - 20;
        bytes[payload_byte] ^= 0x10;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::ChecksumError { .. })));
    }

    #[test]
    fn pgm_levels() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn pgm_sixteen_bit() {
        let mut bytes = b"P5 1 2 65535 ".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x01]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[1.0, 1.0 / 65535.0]);
    }

    #[test]
    fn pgm_rejections() {
        assert!(matches!(decode_pgm(b"P2\n2 2\n255\n0 1 2 3"), Err(Error::BadFormat(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n70000\n"), Err(Error::UnsupportedMaxval(70000))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n0\n"), Err(Error::UnsupportedMaxval(0))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01\x02"), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(decode_pgm(b"P5\n2"), Err(Error::BadFormat(_))));
    }

    #[test]
    fn pgm_quantization_is_a_fixed_point() {
        let img = GrayImage::new(3, 2, vec![0.1, 0.5, 0.333, 1.2, -0.1, 0.999]).unwrap();
        let once = encode_pgm(&img);
        let twice = encode_pgm(&decode_pgm(&once).unwrap());
        assert_eq!(once, twice);
    }
}
