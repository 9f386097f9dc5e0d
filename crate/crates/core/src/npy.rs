//! Reading and writing the numpy `.npy` v1.0 format.
//!
//! Only little-endian `f4`/`f8` payloads in C order are supported. Single
//! precision is widened to `f64` on read; writes are always `<f8`.
//!
//! Format reference: <https://numpy.org/neps/nep-0001-npy-format.html>

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Unsupported(m) => Error::Unsupported(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_npy(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(tensor)).map_err(|e| Error::io(path, e))
}

/// Serializes a tensor as an in-memory `.npy` v1.0 image.
pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let shape = match tensor.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // magic + version + u16 length + dict + trailing newline, padded to ALIGN
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(unpadded + pad + tensor.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an in-memory `.npy` image.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let mut magic = [0u8; 6];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic string".into()));
    }
    let mut version = [0u8; 2];
    cursor
        .read_exact(&mut version)
        .map_err(|_| Error::Format("truncated version".into()))?;
    if version[0] != 1 {
        return Err(Error::Unsupported(format!(
            "format version {}.{}",
            version[0], version[1]
        )));
    }
    let mut len = [0u8; 2];
    cursor
        .read_exact(&mut len)
        .map_err(|_| Error::Format("truncated header length".into()))?;
    let header_len = u16::from_le_bytes(len) as usize;
    if cursor.len() < header_len {
        return Err(Error::Format("truncated header".into()));
    }
    let (dict, payload) = cursor.split_at(header_len);
    let dict = std::str::from_utf8(dict).map_err(|_| Error::Format("header is not ASCII".into()))?;
    let header = parse_header(dict)?;

    let count: usize = header.shape.iter().product();
    let width = match header.dtype {
        Dtype::F4 => 4,
        Dtype::F8 => 8,
    };
    if payload.len() != count * width {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * width
        )));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at flat index {pos}")));
    }
    Tensor::new(header.shape, data)
}

fn parse_header(dict: &str) -> Result<Header> {
    let body = dict.trim_end_matches(['\n', ' ', '\0']).trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| Error::Format("header is not a dict literal".into()))?;

    let descr = dict_value(body, "descr")?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => return Err(Error::Unsupported(format!("dtype '{other}'"))),
    };

    match dict_value(body, "fortran_order")? {
        "False" => {}
        "True" => return Err(Error::Unsupported("fortran_order arrays".into())),
        other => return Err(Error::Format(format!("fortran_order value '{other}'"))),
    }

    let shape = dict_value(body, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format(format!("shape '{shape}' is not a tuple")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Header { dtype, shape })
}

/// Raw text of the value bound to `key`, up to the next top-level comma.
fn dict_value<'a>(body: &'a str, key: &str) -> Result<&'a str> {
    let missing = || Error::Format(format!("header lacks key '{key}'"));
    let at = body
        .find(&format!("'{key}'"))
        .or_else(|| body.find(&format!("\"{key}\"")))
        .ok_or_else(missing)?;
    let rest = &body[at + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':').ok_or_else(missing)?.trim_start();
    let mut depth = 0usize;
    for (i, c) in rest.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => return Ok(rest[..i].trim()),
            _ => {}
        }
    }
    Ok(rest.trim())
}
