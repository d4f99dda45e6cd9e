//! NBLA activation dumps.
//!
//! One file holds the activations of one attention sublayer in one role
//! (input or output). Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "NBLA"
//!      4     2  version (1)
//!      6     2  layer index
//!      8     1  role (0 = sublayer input X, 1 = sublayer output Y)
//!      9     4  feature dim h
//!     13     8  token count N
//!     21     1  dtype (0 = f32)
//!     22     2  reserved, zero
//!     24  4·h·N payload, f32, column-major (one token's h values contiguous)
//! ```
//!
//! Files are paired by name: `layer{k:03}_input.nbla` / `layer{k:03}_output.nbla`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{NblError, Result};

pub const MAGIC: [u8; 4] = *b"NBLA";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Input,
    Output,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Input => 0,
            Role::Output => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Role::Input),
            1 => Ok(Role::Output),
            other => Err(NblError::InvalidHeader(format!("unknown role code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Output => "output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u16,
    pub layer_index: u16,
    pub role: Role,
    pub feature_dim: u32,
    pub token_count: u64,
    pub dtype: u8,
}

impl DumpHeader {
    pub fn new(layer_index: u16, role: Role, feature_dim: u32, token_count: u64) -> Self {
        DumpHeader {
            version: FORMAT_VERSION,
            layer_index,
            role,
            feature_dim,
            token_count,
            dtype: DTYPE_F32,
        }
    }

    pub fn payload_len(&self) -> u64 {
        4 * self.feature_dim as u64 * self.token_count
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..6].copy_from_slice(&self.version.to_le_bytes());
        buf[6..8].copy_from_slice(&self.layer_index.to_le_bytes());
        buf[8] = self.role.code();
        buf[9..13].copy_from_slice(&self.feature_dim.to_le_bytes());
        buf[13..21].copy_from_slice(&self.token_count.to_le_bytes());
        buf[21] = self.dtype;
        buf
    }

    pub fn from_bytes(buf: &[u8; HEADER_LEN]) -> Result<Self> {
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(NblError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != FORMAT_VERSION {
            return Err(NblError::UnsupportedVersion(version));
        }
        let layer_index = u16::from_le_bytes([buf[6], buf[7]]);
        let role = Role::from_code(buf[8])?;
        let feature_dim = u32::from_le_bytes(buf[9..13].try_into().unwrap());
        let token_count = u64::from_le_bytes(buf[13..21].try_into().unwrap());
        let dtype = buf[21];
        if dtype != DTYPE_F32 {
            return Err(NblError::UnsupportedDtype(dtype));
        }
        if buf[22] != 0 || buf[23] != 0 {
            return Err(NblError::InvalidHeader("reserved bytes are not zero".into()));
        }
        let header = DumpHeader {
            version,
            layer_index,
            role,
            feature_dim,
            token_count,
            dtype,
        };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(NblError::InvalidHeader("feature dim is zero".into()));
        }
        if self.token_count == 0 {
            return Err(NblError::InvalidHeader("token count is zero".into()));
        }
        (self.feature_dim as u64)
            .checked_mul(self.token_count)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| NblError::InvalidHeader("payload size overflows".into()))?;
        Ok(())
    }
}

/// `h × N` matrix of finite f32 activations, one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    data: DMatrix<f32>,
}

impl ActivationMatrix {
    /// Builds from column-major data (token-contiguous).
    pub fn from_column_major(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NblError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Self::from_matrix(DMatrix::from_vec(rows, cols, data))
    }

    pub fn from_matrix(data: DMatrix<f32>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NblError::NonFinite(pos));
        }
        Ok(ActivationMatrix { data })
    }

    /// Rounds a 64-bit matrix to f32 storage.
    pub fn from_f64(m: &DMatrix<f64>) -> Result<Self> {
        Self::from_matrix(m.map(|v| v as f32))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ActivationMatrix {
            data: DMatrix::zeros(rows, cols),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f32> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f32> {
        self.data
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.data.map(|v| v as f64)
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice()
    }

    /// Concatenates along the token axis.
    pub fn hstack(parts: &[ActivationMatrix]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(NblError::DimensionMismatch("row counts differ in hstack".into()));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(p.as_slice());
        }
        let cols = parts.iter().map(|p| p.cols()).sum();
        Ok(ActivationMatrix {
            data: DMatrix::from_vec(rows, cols, data),
        })
    }
}

/// Writes a header followed by the payload. Returns the number of bytes written.
pub fn write_dump<W: Write>(header: &DumpHeader, matrix: &ActivationMatrix, mut sink: W) -> Result<u64> {
    if header.feature_dim as usize != matrix.rows() || header.token_count as usize != matrix.cols() {
        return Err(NblError::DimensionMismatch(format!(
            "header declares {}x{}, matrix is {}x{}",
            header.feature_dim,
            header.token_count,
            matrix.rows(),
            matrix.cols()
        )));
    }
    header.validate()?;
    sink.write_all(&header.to_bytes())?;
    write_payload(matrix, &mut sink)?;
    sink.flush()?;
    Ok(HEADER_LEN as u64 + header.payload_len())
}

/// Appends the raw f32 payload of `matrix` (no header). Used when streaming
/// columns into a file whose header was written up front.
pub fn write_payload<W: Write>(matrix: &ActivationMatrix, sink: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(matrix.as_slice().len() * 4);
    for v in matrix.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_dump<R: Read>(mut source: R) -> Result<(DumpHeader, ActivationMatrix)> {
    let mut head = [0u8; HEADER_LEN];
    let got = read_up_to(&mut source, &mut head)?;
    if got < HEADER_LEN {
        // A short file with the wrong magic is reported as bad magic.
        if got >= 4 && head[0..4] != MAGIC {
            return Err(NblError::BadMagic(head[0..4].try_into().unwrap()));
        }
        return Err(NblError::Truncated {
            expected: HEADER_LEN as u64,
            actual: got as u64,
        });
    }
    let header = DumpHeader::from_bytes(&head)?;
    let expected = header.payload_len();
    let len = usize::try_from(expected)
        .map_err(|_| NblError::InvalidHeader("payload does not fit in memory".into()))?;
    let mut payload = vec![0u8; len];
    let got = read_up_to(&mut source, &mut payload)?;
    if got < len {
        return Err(NblError::Truncated {
            expected: HEADER_LEN as u64 + expected,
            actual: (HEADER_LEN + got) as u64,
        });
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(NblError::InvalidHeader("trailing bytes after payload".into()));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = ActivationMatrix::from_column_major(
        header.feature_dim as usize,
        header.token_count as usize,
        values,
    )?;
    Ok((header, matrix))
}

fn read_up_to<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn dump_file_name(layer: usize, role: Role) -> String {
    format!("layer{layer:03}_{}.nbla", role.name())
}

pub fn dump_path(dir: &Path, layer: usize, role: Role) -> PathBuf {
    dir.join(dump_file_name(layer, role))
}

pub fn write_dump_file(path: &Path, header: &DumpHeader, matrix: &ActivationMatrix) -> Result<u64> {
    let file = File::create(path)?;
    write_dump(header, matrix, BufWriter::new(file))
}

pub fn read_dump_file(path: &Path) -> Result<(DumpHeader, ActivationMatrix)> {
    let file = File::open(path)
        .map_err(|e| NblError::MissingInput(format!("{}: {e}", path.display())))?;
    read_dump(BufReader::new(file))
}

/// Reads the (input, output) pair for `layer` from a dump directory.
pub fn read_layer_pair(dir: &Path, layer: usize) -> Result<(ActivationMatrix, ActivationMatrix)> {
    let (hx, x) = read_dump_file(&dump_path(dir, layer, Role::Input))?;
    let (hy, y) = read_dump_file(&dump_path(dir, layer, Role::Output))?;
    if hx.role != Role::Input || hy.role != Role::Output {
        return Err(NblError::InvalidHeader(format!("layer {layer}: role does not match file name")));
    }
    if hx.token_count != hy.token_count {
        return Err(NblError::DimensionMismatch(format!(
            "layer {layer}: {} input tokens vs {} output tokens",
            hx.token_count, hy.token_count
        )));
    }
    Ok((x, y))
}

/// Layer indices that have an input dump in `dir`, ascending.
pub fn list_dump_layers(dir: &Path) -> Result<Vec<usize>> {
    let mut layers = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| NblError::MissingInput(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("layer") {
            if let Some(idx) = rest.strip_suffix("_input.nbla") {
                if let Ok(k) = idx.parse::<usize>() {
                    layers.push(k);
                }
            }
        }
    }
    layers.sort_unstable();
    Ok(layers)
}
