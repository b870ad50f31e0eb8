//! Binary model files.
//!
//! ```text
//! "SWNN" | version u16 | layer count u16 | input ndim u8 | input dims u32…
//! per layer: kind u8 | hyper count u16 | hypers u32… | tensor count u8 |
//!            per tensor: ndim u8 | dims u32… | f32 data
//! CRC32 (IEEE) of everything above, u32
//! ```
//!
//! All integers and floats are little-endian. Real-valued hyperparameters
//! (L2 coefficient, dropout rate) are stored as the two u32 halves of their
//! f64 bit pattern, low half first.

use std::fs;
use std::path::Path;

use super::layers::LayerSpec;
use super::model::Model;
use super::NnError;

pub const MAGIC: &[u8; 4] = b"SWNN";
pub const FORMAT_VERSION: u16 = 1;

fn kind_code(spec: &LayerSpec) -> u8 {
    match spec {
        LayerSpec::Dense { .. } => 0,
        LayerSpec::Conv1d { .. } => 1,
        LayerSpec::ConvTranspose1d { .. } => 2,
        LayerSpec::Dropout { .. } => 3,
        LayerSpec::Relu => 4,
        LayerSpec::Sigmoid => 5,
        LayerSpec::Flatten => 6,
        LayerSpec::Reshape { .. } => 7,
    }
}

fn split(v: f64) -> [u32; 2] {
    let b = v.to_bits();
    [b as u32, (b >> 32) as u32]
}

fn join(lo: u32, hi: u32) -> f64 {
    f64::from_bits(u64::from(lo) | (u64::from(hi) << 32))
}

fn hypers(spec: &LayerSpec) -> Vec<u32> {
    let u = |v: usize| v as u32;
    match spec {
        LayerSpec::Dense { inputs, units, l2 } => {
            let [lo, hi] = split(*l2);
            vec![u(*inputs), u(*units), lo, hi]
        }
        LayerSpec::Conv1d {
            in_len,
            in_channels,
            filters,
            kernel,
            stride,
            l2,
        }
        | LayerSpec::ConvTranspose1d {
            in_len,
            in_channels,
            filters,
            kernel,
            stride,
            l2,
        } => {
            let [lo, hi] = split(*l2);
            vec![u(*in_len), u(*in_channels), u(*filters), u(*kernel), u(*stride), lo, hi]
        }
        LayerSpec::Dropout { rate } => split(*rate).to_vec(),
        LayerSpec::Reshape { shape } => shape.iter().map(|d| u(*d)).collect(),
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Flatten => vec![],
    }
}

fn spec_from(kind: u8, h: &[u32]) -> Result<LayerSpec, NnError> {
    let bad = || NnError::Corrupt(format!("layer kind {kind} with {} hyperparameters", h.len()));
    let z = |i: usize| h[i] as usize;
    Ok(match (kind, h.len()) {
        (0, 4) => LayerSpec::Dense {
            inputs: z(0),
            units: z(1),
            l2: join(h[2], h[3]),
        },
        (1, 7) => LayerSpec::Conv1d {
            in_len: z(0),
            in_channels: z(1),
            filters: z(2),
            kernel: z(3),
            stride: z(4),
            l2: join(h[5], h[6]),
        },
        (2, 7) => LayerSpec::ConvTranspose1d {
            in_len: z(0),
            in_channels: z(1),
            filters: z(2),
            kernel: z(3),
            stride: z(4),
            l2: join(h[5], h[6]),
        },
        (3, 2) => LayerSpec::Dropout { rate: join(h[0], h[1]) },
        (4, 0) => LayerSpec::Relu,
        (5, 0) => LayerSpec::Sigmoid,
        (6, 0) => LayerSpec::Flatten,
        (7, n) if n > 0 => LayerSpec::Reshape {
            shape: h.iter().map(|d| *d as usize).collect(),
        },
        _ => return Err(bad()),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).ok_or(NnError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(NnError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Model<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers().len() as u16).to_le_bytes());
        out.push(self.input_shape().len() as u8);
        for d in self.input_shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for layer in self.layers() {
            let spec = layer.spec();
            out.push(kind_code(&spec));
            let h = hypers(&spec);
            out.extend_from_slice(&(h.len() as u16).to_le_bytes());
            for v in h {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let params = layer.params();
            out.push(params.len() as u8);
            for p in params {
                out.push(p.shape.len() as u8);
                for d in &p.shape {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                for v in &p.value {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(NnError::NotAModel);
        }
        if bytes.len() < 6 {
            return Err(NnError::Truncated);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(NnError::UnsupportedVersion(version));
        }
        if bytes.len() < 12 {
            return Err(NnError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(NnError::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 6 };
        let n_layers = r.u16()? as usize;
        let ndim = r.u8()? as usize;
        let input_shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let mut specs = Vec::with_capacity(n_layers);
        let mut tensors = Vec::new();
        for _ in 0..n_layers {
            let kind = r.u8()?;
            let nh = r.u16()? as usize;
            let h = (0..nh).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            specs.push(spec_from(kind, &h)?);
            let nt = r.u8()? as usize;
            for _ in 0..nt {
                let nd = r.u8()? as usize;
                let dims = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let len = dims
                    .iter()
                    .try_fold(1usize, |a, d| a.checked_mul(*d))
                    .ok_or_else(|| NnError::Corrupt("tensor size overflows".into()))?;
                let raw = r.take(len.checked_mul(4).ok_or(NnError::Truncated)?)?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                tensors.push((dims, data));
            }
        }
        if r.pos != body.len() {
            return Err(NnError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }

        let mut model = Model::uninitialized(&input_shape, &specs).map_err(|e| NnError::Corrupt(e.to_string()))?;
        let mut params = model.params_mut();
        if params.len() != tensors.len() {
            return Err(NnError::Corrupt(format!(
                "{} parameter tensors stored, architecture needs {}",
                tensors.len(),
                params.len()
            )));
        }
        for (p, (dims, data)) in params.iter_mut().zip(tensors) {
            if p.shape != dims {
                return Err(NnError::Corrupt(format!(
                    "parameter shape {dims:?} does not match {:?}",
                    p.shape
                )));
            }
            p.value = data;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Model<f32> {
        let specs = [
            LayerSpec::Conv1d {
                in_len: 16,
                in_channels: 1,
                filters: 4,
                kernel: 4,
                stride: 2,
                l2: 0.1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 32, units: 8, l2: 0.0 },
            LayerSpec::Dropout { rate: 0.2 },
            LayerSpec::Reshape { shape: vec![4, 2] },
            LayerSpec::ConvTranspose1d {
                in_len: 4,
                in_channels: 2,
                filters: 1,
                kernel: 3,
                stride: 4,
                l2: 0.1,
            },
            LayerSpec::Sigmoid,
        ];
        Model::build(&[16, 1], &specs, 8).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_files_give_typed_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(Model::from_bytes(b"SWF1xxxxxxxx"), Err(NnError::NotAModel)));
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 9]), Err(NnError::Checksum { .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(Model::from_bytes(&flipped), Err(NnError::Checksum { .. })));
        let mut future = bytes.clone();
        future[4] = 9;
        assert!(matches!(Model::from_bytes(&future), Err(NnError::UnsupportedVersion(9))));
        assert!(matches!(Model::from_bytes(&bytes[..5]), Err(NnError::Truncated)));
    }
}
