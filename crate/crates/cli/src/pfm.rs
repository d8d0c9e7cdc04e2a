//! Portable Float Map reader and writer.
//!
//! Header is `PF` (three channels) or `Pf` (one channel), then `width
//! height`, then a scale whose sign gives the byte order (negative means
//! little-endian). Rows are stored bottom to top. The writer always emits
//! little-endian with scale `-1`, one header field per line.

use std::path::Path;

use derender_core::{Grid, Image, NormalMap, ScalarMap, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum PfmError {
    #[error("malformed PFM header: {0}")]
    BadHeader(String),
    #[error("PFM payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("PFM has {found} channel(s), expected {expected}")]
    ChannelCount { expected: usize, found: usize },
    #[error("PFM contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("PFM normal at row {row}, column {col} is not unit length")]
    NotUnit { row: usize, col: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Decoded float map, rows top to bottom, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Split off the next whitespace-delimited token. A single whitespace byte
/// after the final token separates the header from the payload.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], PfmError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
        if *pos - start > 32 {
            return Err(PfmError::BadHeader("header field too long".into()));
        }
    }
    if start == *pos {
        return Err(PfmError::BadHeader("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number<T: std::str::FromStr>(tok: &[u8], what: &str) -> Result<T, PfmError> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            PfmError::BadHeader(format!("invalid {what} {:?}", String::from_utf8_lossy(tok)))
        })
}

impl Pfm {
    pub fn decode(bytes: &[u8]) -> Result<Self, PfmError> {
        let mut pos = 0;
        let channels = match token(bytes, &mut pos)? {
            b"PF" => 3,
            b"Pf" => 1,
            other => {
                return Err(PfmError::BadHeader(format!(
                    "unknown magic {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width: usize = number(token(bytes, &mut pos)?, "width")?;
        let height: usize = number(token(bytes, &mut pos)?, "height")?;
        let scale: f32 = number(token(bytes, &mut pos)?, "scale")?;
        if width == 0 || height == 0 {
            return Err(PfmError::BadHeader(format!("empty image {width}x{height}")));
        }
        if !scale.is_finite() || scale == 0.0 {
            return Err(PfmError::BadHeader(format!("invalid scale {scale}")));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => {
                return Err(PfmError::BadHeader(
                    "missing separator before payload".into(),
                ))
            }
        }
        let little = scale < 0.0;
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| PfmError::BadHeader("dimensions overflow".into()))?;
        let expected = count * 4;
        let payload = &bytes[pos..];
        if payload.len() < expected {
            return Err(PfmError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let mut data = vec![0f32; count];
        let row_len = width * channels;
        for (file_row, chunk) in payload[..expected].chunks_exact(row_len * 4).enumerate() {
            let row = height - 1 - file_row;
            for (k, b) in chunk.chunks_exact(4).enumerate() {
                let raw = [b[0], b[1], b[2], b[3]];
                data[row * row_len + k] = if little {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{magic}\n{} {}\n-1\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        let row_len = self.width * self.channels;
        for row in (0..self.height).rev() {
            for v in &self.data[row * row_len..(row + 1) * row_len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn expect_channels(&self, expected: usize) -> Result<(), PfmError> {
        if self.channels == expected {
            Ok(())
        } else {
            Err(PfmError::ChannelCount {
                expected,
                found: self.channels,
            })
        }
    }

    fn check_finite(&self) -> Result<(), PfmError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => {
                let px = k / self.channels;
                Err(PfmError::NonFinite {
                    row: px / self.width,
                    col: px % self.width,
                })
            }
            None => Ok(()),
        }
    }

    pub fn from_scalar(map: &ScalarMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            channels: 1,
            data: map.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_rgb(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            channels: 3,
            data: img.as_slice().iter().flatten().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_normals(map: &NormalMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            channels: 3,
            data: map
                .as_slice()
                .iter()
                .flat_map(|n| [n.x as f32, n.y as f32, n.z as f32])
                .collect(),
        }
    }

    pub fn to_scalar(&self) -> Result<ScalarMap, PfmError> {
        self.expect_channels(1)?;
        self.check_finite()?;
        Ok(Grid::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("dims checked"))
    }

    pub fn to_rgb(&self) -> Result<Image, PfmError> {
        self.expect_channels(3)?;
        self.check_finite()?;
        let data = self
            .data
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Ok(Grid::new(self.height, self.width, data).expect("dims checked"))
    }

    /// Normals must be finite and unit length to single precision.
    pub fn to_normals(&self) -> Result<NormalMap, PfmError> {
        self.expect_channels(3)?;
        self.check_finite()?;
        let data: Vec<Vec3> = self
            .data
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        if let Some(k) = data.iter().position(|n| (n.norm() - 1.0).abs() > 1e-5) {
            return Err(PfmError::NotUnit {
                row: k / self.width,
                col: k % self.width,
            });
        }
        Ok(Grid::new(self.height, self.width, data).expect("dims checked"))
    }

    pub fn read(path: &Path) -> Result<Self, PfmError> {
        let bytes = std::fs::read(path).map_err(|source| PfmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), PfmError> {
        std::fs::write(path, self.encode()).map_err(|source| PfmError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn read_scalar(path: &Path) -> Result<ScalarMap, PfmError> {
    Pfm::read(path)?.to_scalar()
}

pub fn read_rgb(path: &Path) -> Result<Image, PfmError> {
    Pfm::read(path)?.to_rgb()
}

pub fn read_normals(path: &Path) -> Result<NormalMap, PfmError> {
    Pfm::read(path)?.to_normals()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let m = Grid::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let bytes = Pfm::from_scalar(&m).encode();
        let back = Pfm::decode(&bytes).unwrap().to_scalar().unwrap();
        assert_eq!(back, m);
        assert_eq!(Pfm::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let m = Grid::new(2, 1, vec![1.0, 2.0]).unwrap();
        let bytes = Pfm::from_scalar(&m).encode();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(&payload[..4], &2f32.to_le_bytes());
        assert_eq!(&payload[4..], &1f32.to_le_bytes());
    }

    #[test]
    fn big_endian_payload() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_be_bytes());
        let m = Pfm::decode(&bytes).unwrap().to_scalar().unwrap();
        assert_eq!(m.as_slice(), &[0.5, -3.0]);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(
            Pfm::decode(b"P6\n1 1\n-1\n\0\0\0\0"),
            Err(PfmError::BadHeader(_))
        ));
        assert!(matches!(
            Pfm::decode(b"Pf\n1 x\n-1\n\0\0\0\0"),
            Err(PfmError::BadHeader(_))
        ));
        assert!(matches!(
            Pfm::decode(b"Pf\n1 1\n0\n\0\0\0\0"),
            Err(PfmError::BadHeader(_))
        ));
        assert!(matches!(
            Pfm::decode(b"Pf\n1 1"),
            Err(PfmError::BadHeader(_))
        ));
        assert!(matches!(
            Pfm::decode(b"Pf\n2 2\n-1\n\0\0\0\0"),
            Err(PfmError::Truncated {
                expected: 16,
                found: 4
            })
        ));
        let mut nan = b"PF\n1 1\n-1\n".to_vec();
        for v in [f32::NAN, 0.0, 1.0] {
            nan.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            Pfm::decode(&nan).unwrap().to_normals(),
            Err(PfmError::NonFinite { row: 0, col: 0 })
        ));
        let m = Pfm::decode(&nan).unwrap();
        assert!(matches!(m.to_scalar(), Err(PfmError::ChannelCount { .. })));
    }
}
