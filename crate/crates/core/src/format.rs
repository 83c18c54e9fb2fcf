//! Bit-exact binary serialization: dense tensor files and packed
//! quantized-layer files. All multi-byte values are little-endian.
//!
//! Tensor file layout:
//!   magic "DQTEN\0" | version u16 | dtype u8 (0=f32, 1=f64) | ndim u8 |
//!   dims: ndim × u64 | payload: row-major values
//!
//! Quantized-layer file layout:
//!   magic "DQQNT\0" | version u16 | bits u8 | alpha i32 | beta i32 |
//!   d_in u64 | d_out u64 | ng u32 |
//!   codes: d_out blocks of ceil(d_in·bits/8) bytes (one per output column,
//!          byte-aligned, LSB-first within each byte, code = w − alpha) |
//!   scales: d_out×ng f32 | zeros: d_out×ng f32

use std::path::Path;

use crate::error::DqError;
use crate::layerwise::QuantizedLayer;
use crate::tensor::Tensor2D;

pub const TENSOR_MAGIC: &[u8; 6] = b"DQTEN\0";
pub const QUANT_MAGIC: &[u8; 6] = b"DQQNT\0";
pub const FORMAT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Bytes needed for one column of packed codes.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs integer grid values as unsigned codes c = w − alpha, LSB-first
/// across consecutive bit positions, padded with zero bits to a whole byte.
pub fn pack_codes(qweights: &[i32], bits: u8, alpha: i32) -> Result<Vec<u8>, DqError> {
    if !(2..=4).contains(&bits) {
        return Err(DqError::InvalidConfig(format!(
            "unsupported bit width {bits} (expected 2, 3, or 4)"
        )));
    }
    let max_code = (1u32 << bits) - 1;
    let mut out = vec![0u8; packed_len(qweights.len(), bits)];
    for (k, &w) in qweights.iter().enumerate() {
        let c = w.wrapping_sub(alpha);
        if c < 0 || c as u32 > max_code {
            return Err(DqError::InvalidData(format!(
                "weight {w} at index {k} is outside the {bits}-bit grid [{alpha}, {}]",
                alpha + max_code as i32
            )));
        }
        let c = c as u32;
        let bit = k * bits as usize;
        let byte = bit / 8;
        let off = bit % 8;
        out[byte] |= (c << off) as u8;
        if off + bits as usize > 8 {
            out[byte + 1] |= (c >> (8 - off)) as u8;
        }
    }
    Ok(out)
}

/// Inverse of `pack_codes`; trailing pad bits are ignored.
pub fn unpack_codes(bytes: &[u8], count: usize, bits: u8, alpha: i32) -> Result<Vec<i32>, DqError> {
    if !(2..=4).contains(&bits) {
        return Err(DqError::InvalidConfig(format!(
            "unsupported bit width {bits} (expected 2, 3, or 4)"
        )));
    }
    let needed = packed_len(count, bits);
    if bytes.len() < needed {
        return Err(DqError::Format(format!(
            "packed codes truncated: expected {needed} bytes for {count} values at {bits} bits, \
             got {} (missing from offset {})",
            bytes.len(),
            bytes.len()
        )));
    }
    let mask = (1u32 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let bit = k * bits as usize;
        let byte = bit / 8;
        let off = bit % 8;
        let mut c = (bytes[byte] as u32) >> off;
        if off + bits as usize > 8 {
            c |= (bytes[byte + 1] as u32) << (8 - off);
        }
        out.push((c & mask) as i32 + alpha);
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8], path: &Path) -> Self {
        Self {
            data,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DqError> {
        if self.pos + n > self.data.len() {
            return Err(DqError::Format(format!(
                "{}: truncated while reading {what} at offset {} (need {n} bytes, {} left)",
                self.path,
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DqError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DqError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DqError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32, DqError> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DqError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn expect_end(&self) -> Result<(), DqError> {
        if self.pos != self.data.len() {
            return Err(DqError::Format(format!(
                "{}: {} unexpected trailing bytes after offset {}",
                self.path,
                self.data.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }

    fn expect_magic(&mut self, magic: &[u8; 6]) -> Result<(), DqError> {
        let found = self.take(6, "magic")?;
        if found != magic {
            return Err(DqError::Format(format!(
                "{}: bad magic {:02x?}, expected {:02x?}",
                self.path, found, magic
            )));
        }
        Ok(())
    }

    fn expect_version(&mut self) -> Result<(), DqError> {
        let v = self.u16("version")?;
        if v != FORMAT_VERSION {
            return Err(DqError::Format(format!(
                "{}: unsupported format version {v} (this build reads version {FORMAT_VERSION})",
                self.path
            )));
        }
        Ok(())
    }
}

fn usize_from(v: u64, what: &str, path: &Path) -> Result<usize, DqError> {
    usize::try_from(v).map_err(|_| {
        DqError::Format(format!(
            "{}: {what} = {v} does not fit this platform",
            path.display()
        ))
    })
}

/// Writes a tensor with an f64 payload.
pub fn write_tensor(path: &Path, t: &Tensor2D) -> Result<(), DqError> {
    write_tensor_impl(path, t, DTYPE_F64)
}

/// Writes a tensor with an f32 payload (values are narrowed).
pub fn write_tensor_f32(path: &Path, t: &Tensor2D) -> Result<(), DqError> {
    write_tensor_impl(path, t, DTYPE_F32)
}

fn write_tensor_impl(path: &Path, t: &Tensor2D, dtype: u8) -> Result<(), DqError> {
    let elem = if dtype == DTYPE_F64 { 8 } else { 4 };
    let mut out = Vec::with_capacity(6 + 2 + 1 + 1 + 16 + t.data().len() * elem);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(2u8);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for &v in t.data() {
        if dtype == DTYPE_F64 {
            out.extend_from_slice(&v.to_le_bytes());
        } else {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| DqError::io(path, e))
}

/// Reads a tensor file. Rank-1 payloads come back as a single-row matrix;
/// f32 payloads are widened exactly.
pub fn read_tensor(path: &Path) -> Result<Tensor2D, DqError> {
    let data = std::fs::read(path).map_err(|e| DqError::io(path, e))?;
    let mut cur = Cursor::new(&data, path);
    cur.expect_magic(TENSOR_MAGIC)?;
    cur.expect_version()?;
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(DqError::Format(format!(
            "{}: unknown dtype {dtype} (0 = f32, 1 = f64)",
            path.display()
        )));
    }
    let ndim = cur.u8("ndim")?;
    let (rows, cols) = match ndim {
        1 => (1usize, usize_from(cur.u64("dims[0]")?, "dims[0]", path)?),
        2 => {
            let r = usize_from(cur.u64("dims[0]")?, "dims[0]", path)?;
            let c = usize_from(cur.u64("dims[1]")?, "dims[1]", path)?;
            (r, c)
        }
        other => {
            return Err(DqError::Format(format!(
                "{}: rank-{other} tensors are not supported (expected 1 or 2)",
                path.display()
            )))
        }
    };
    let count = rows.checked_mul(cols).ok_or_else(|| {
        DqError::Format(format!("{}: dimension product overflows", path.display()))
    })?;
    let elem = if dtype == DTYPE_F64 { 8 } else { 4 };
    let payload = cur.take(count * elem, "payload")?;
    cur.expect_end()?;
    let values: Vec<f64> = if dtype == DTYPE_F64 {
        payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect()
    };
    Tensor2D::new(rows, cols, values)
}

/// Writes a quantized layer in the packed format.
pub fn write_quant(path: &Path, layer: &QuantizedLayer) -> Result<(), DqError> {
    layer.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(QUANT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(layer.bits);
    out.extend_from_slice(&layer.alpha.to_le_bytes());
    out.extend_from_slice(&layer.beta.to_le_bytes());
    out.extend_from_slice(&(layer.d_in as u64).to_le_bytes());
    out.extend_from_slice(&(layer.d_out as u64).to_le_bytes());
    out.extend_from_slice(&(layer.group_count as u32).to_le_bytes());
    out.extend_from_slice(&layer.codes);
    for &s in &layer.scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &z in &layer.zeros {
        out.extend_from_slice(&z.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| DqError::io(path, e))
}

/// Reads and validates a quantized layer file.
pub fn read_quant(path: &Path) -> Result<QuantizedLayer, DqError> {
    let data = std::fs::read(path).map_err(|e| DqError::io(path, e))?;
    let mut cur = Cursor::new(&data, path);
    cur.expect_magic(QUANT_MAGIC)?;
    cur.expect_version()?;
    let bits = cur.u8("bits")?;
    if !(2..=4).contains(&bits) {
        return Err(DqError::Format(format!(
            "{}: unsupported bit width {bits}",
            path.display()
        )));
    }
    let alpha = cur.i32("alpha")?;
    let beta = cur.i32("beta")?;
    if i64::from(beta) - i64::from(alpha) + 1 != 1i64 << bits {
        return Err(DqError::Format(format!(
            "{}: grid [{alpha}, {beta}] inconsistent with {bits} bits",
            path.display()
        )));
    }
    let d_in = usize_from(cur.u64("d_in")?, "d_in", path)?;
    let d_out = usize_from(cur.u64("d_out")?, "d_out", path)?;
    let ng = usize_from(cur.u32("ng")? as u64, "ng", path)?;
    if d_in == 0 || d_out == 0 || ng == 0 || d_in % ng != 0 {
        return Err(DqError::Format(format!(
            "{}: invalid shape d_in={d_in}, d_out={d_out}, ng={ng}",
            path.display()
        )));
    }
    let stride = packed_len(d_in, bits);
    let codes_len = d_out
        .checked_mul(stride)
        .ok_or_else(|| DqError::Format(format!("{}: codes section overflows", path.display())))?;
    let codes = cur.take(codes_len, "codes")?.to_vec();
    let n_sz = d_out * ng;
    let mut scales = Vec::with_capacity(n_sz);
    for b in cur.take(n_sz * 4, "scales")?.chunks_exact(4) {
        scales.push(f32::from_le_bytes(b.try_into().unwrap()));
    }
    let mut zeros = Vec::with_capacity(n_sz);
    for b in cur.take(n_sz * 4, "zeros")?.chunks_exact(4) {
        zeros.push(f32::from_le_bytes(b.try_into().unwrap()));
    }
    cur.expect_end()?;
    if let Some(i) = scales.iter().chain(&zeros).position(|v| !v.is_finite()) {
        return Err(DqError::Format(format!(
            "{}: non-finite scale/zero at flat index {i}",
            path.display()
        )));
    }
    let layer = QuantizedLayer {
        d_in,
        d_out,
        bits,
        alpha,
        beta,
        group_count: ng,
        codes,
        scales,
        zeros,
    };
    layer.validate()?;
    Ok(layer)
}
