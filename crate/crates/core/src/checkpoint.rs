//! Binary checkpoints of a network, its gradient memories and class
//! statistics.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic   "IFLR"
//! version u32
//! count   u32                      number of tensors
//! tensor  count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   data     f64 × product(dims)
//! ```
//!
//! Tensors are written in a fixed order, so equal states give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{ClassStat, ClassStats};
use crate::experiment::write_atomic;
use crate::gpmem::{GradientMemory, MemoryMode};
use crate::linalg::Matrix;
use crate::model::{Activation, Branch, Head, LoraLinearLayer, Network};

pub const MAGIC: &[u8; 4] = b"IFLR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    /// One entry per backbone layer, `None` for layers without memory.
    pub memories: Vec<Option<GradientMemory>>,
    pub stats: ClassStats,
}

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn matrix(name: String, m: &Matrix) -> Self {
        Tensor {
            name,
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    fn vector(name: String, v: &[f64]) -> Self {
        Tensor {
            name,
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt {
                offset: 0,
                msg: "missing IFLR magic".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt {
                    offset: at + 4,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::Corrupt {
                    offset: r.pos,
                    msg: format!("tensor `{name}` has an impossible size"),
                })?;
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if tensors
                .insert(name.clone(), (at, Tensor { name, dims, data }))
                .is_some()
            {
                return Err(Error::Corrupt {
                    offset: at,
                    msg: "duplicate tensor name".into(),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Assembler { tensors }.build()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::vector(
            "net/layers".into(),
            &[self.net.layers.len() as f64],
        )];
        for (i, l) in self.net.layers.iter().enumerate() {
            let p = format!("net/layer{i}");
            out.push(Tensor::vector(
                format!("{p}/flags"),
                &[f64::from(u8::from(l.adapted)), l.activation.code()],
            ));
            out.push(Tensor::matrix(format!("{p}/w"), l.weight()));
            out.push(Tensor::vector(format!("{p}/bias"), l.bias()));
            if let Some(br) = l.branch() {
                out.push(Tensor::matrix(format!("{p}/branch_a"), &br.a));
                out.push(Tensor::matrix(format!("{p}/branch_b"), &br.b));
            }
        }
        out.push(Tensor::matrix("net/head/w".into(), &self.net.head.w));
        out.push(Tensor::vector("net/head/b".into(), &self.net.head.b));
        for (i, m) in self.memories.iter().enumerate() {
            if let Some(m) = m {
                let mode = match m.mode() {
                    MemoryMode::GradSpace => 0.0,
                    MemoryMode::Complement => 1.0,
                };
                out.push(Tensor::vector(format!("mem/layer{i}/mode"), &[mode]));
                out.push(Tensor::matrix(format!("mem/layer{i}/basis"), m.basis()));
            }
        }
        for (c, s) in &self.stats.classes {
            out.push(Tensor::vector(format!("stats/class{c}/mean"), &s.mean));
            out.push(Tensor::matrix(format!("stats/class{c}/cov"), &s.cov));
            out.push(Tensor::vector(
                format!("stats/class{c}/count"),
                &[s.count as f64],
            ));
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt {
                offset: self.bytes.len(),
                msg: format!("file ends while reading {n} bytes at offset {}", self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Rebuilds typed state from the parsed tensors, reporting the offset of
/// the offending tensor on any inconsistency.
struct Assembler {
    tensors: BTreeMap<String, (usize, Tensor)>,
}

impl Assembler {
    fn get(&self, name: &str) -> Result<&(usize, Tensor)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    fn bad(at: usize, name: &str, what: &str) -> Error {
        Error::Corrupt {
            offset: at,
            msg: format!("tensor `{name}`: {what}"),
        }
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let (at, t) = self.get(name)?;
        if t.dims.len() != 2 {
            return Err(Self::bad(*at, name, "expected 2 dimensions"));
        }
        Matrix::from_vec(t.dims[0], t.dims[1], t.data.clone())
            .map_err(|e| Self::bad(*at, name, &e.to_string()))
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (at, t) = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(Self::bad(*at, name, "expected 1 dimension"));
        }
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(Self::bad(*at, name, "non-finite entry"));
        }
        Ok(t.data.clone())
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let (at, _) = self.get(name)?;
        match self.vector(name)?.as_slice() {
            [x] => Ok(*x),
            _ => Err(Self::bad(*at, name, "expected a single value")),
        }
    }

    fn count(&self, name: &str) -> Result<usize> {
        let x = self.scalar(name)?;
        if x < 0.0 || x.fract() != 0.0 || x > u32::MAX as f64 {
            let (at, _) = self.get(name)?;
            return Err(Self::bad(*at, name, "expected a non-negative integer"));
        }
        Ok(x as usize)
    }

    fn build(self) -> Result<Checkpoint> {
        let n_layers = self.count("net/layers")?;
        let mut layers = Vec::with_capacity(n_layers);
        let mut memories = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("net/layer{i}");
            let flags = self.vector(&format!("{p}/flags"))?;
            let (at, _) = self.get(&format!("{p}/flags"))?;
            let (adapted, activation) = match flags.as_slice() {
                [a, c] if (*a == 0.0 || *a == 1.0) => match Activation::from_code(*c) {
                    Some(act) => (*a == 1.0, act),
                    None => return Err(Self::bad(*at, &p, "unknown activation code")),
                },
                _ => return Err(Self::bad(*at, &p, "malformed layer flags")),
            };
            let mut layer = LoraLinearLayer::new(
                self.matrix(&format!("{p}/w"))?,
                self.vector(&format!("{p}/bias"))?,
                activation,
                adapted,
            )?;
            let a_name = format!("{p}/branch_a");
            if self.tensors.contains_key(&a_name) {
                let a = self.matrix(&a_name)?;
                let b = self.matrix(&format!("{p}/branch_b"))?;
                if a.rows() != layer.d_out() || b.cols() != layer.d_in() || a.cols() != b.rows() {
                    let (at, _) = self.get(&a_name)?;
                    return Err(Self::bad(
                        *at,
                        &a_name,
                        "branch shape does not fit the layer",
                    ));
                }
                layer.branch = Some(Branch { a, b });
            }
            layers.push(layer);

            let mode_name = format!("mem/layer{i}/mode");
            memories.push(if self.tensors.contains_key(&mode_name) {
                let mode = match self.scalar(&mode_name)? {
                    0.0 => MemoryMode::GradSpace,
                    1.0 => MemoryMode::Complement,
                    _ => {
                        let (at, _) = self.get(&mode_name)?;
                        return Err(Self::bad(*at, &mode_name, "unknown memory mode"));
                    }
                };
                let basis_name = format!("mem/layer{i}/basis");
                let basis = self.matrix(&basis_name)?;
                let (at, _) = self.get(&basis_name)?;
                Some(
                    GradientMemory::from_parts(mode, basis)
                        .map_err(|e| Self::bad(*at, &basis_name, &e.to_string()))?,
                )
            } else {
                None
            });
        }
        let head = Head {
            w: self.matrix("net/head/w")?,
            b: self.vector("net/head/b")?,
        };
        let net = Network::new(layers, head)?;

        let mut stats = ClassStats::default();
        for name in self.tensors.keys() {
            let Some(rest) = name.strip_prefix("stats/class") else {
                continue;
            };
            let Some(class) = rest.strip_suffix("/mean") else {
                continue;
            };
            let (at, _) = self.get(name)?;
            let c: usize = class
                .parse()
                .map_err(|_| Self::bad(*at, name, "bad class id"))?;
            let p = format!("stats/class{c}");
            stats.classes.insert(
                c,
                ClassStat {
                    mean: self.vector(&format!("{p}/mean"))?,
                    cov: self.matrix(&format!("{p}/cov"))?,
                    count: self.count(&format!("{p}/count"))?,
                },
            );
        }
        Ok(Checkpoint {
            net,
            memories,
            stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkDims;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let mut net = Network::random(&NetworkDims::default(), 6, &mut stream(4, "ckpt")).unwrap();
        let mut b = Matrix::zeros(1, 32);
        b[(0, 3)] = 1.0;
        net.expand_branch(0, b).unwrap();
        let memories = vec![
            Some(
                GradientMemory::from_parts(
                    MemoryMode::GradSpace,
                    Matrix::identity(32).select_columns(&[0, 1]),
                )
                .unwrap(),
            ),
            Some(GradientMemory::new(64)),
        ];
        let mut stats = ClassStats::default();
        stats.classes.insert(
            2,
            ClassStat {
                mean: vec![0.5; 64],
                cov: Matrix::identity(64),
                count: 9,
            },
        );
        Checkpoint {
            net,
            memories,
            stats,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Corrupt { offset: 0, .. })
        ));
    }
}
