//! Flat binary snapshot of trained weights: magic `MTAL`, format version,
//! model kind, SGC power, matrix count, then per matrix its rows and cols
//! followed by row-major values. All integers and floats little-endian.

use super::{GcnParams, Model, SgcParams};
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MTAL";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.bytes.len() < N {
            return Err(Error::Model("truncated snapshot".into()));
        }
        let (head, rest) = self.bytes.split_at(N);
        self.bytes = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take()?)).map_err(|_| Error::Model("dimension overflow".into()))
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let (rows, cols) = (self.u64()?, self.u64()?);
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Model("truncated snapshot".into()))?;
        let data = (0..len).map(|_| self.take().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        Ok(DenseMatrix::from_vec(rows, cols, data)?)
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let weights = self.weights();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (kind, k) = match self {
            Model::Gcn(_) => (0u32, 0u32),
            Model::Sgc(p) => (1, p.k as u32),
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
        for w in weights {
            out.extend_from_slice(&(w.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(w.cols() as u64).to_le_bytes());
            for x in w.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes };
        if &r.take::<4>()? != MAGIC {
            return Err(Error::Model("not a model snapshot".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Model(format!("unsupported snapshot version {version}")));
        }
        let (kind, k, count) = (r.u32()?, r.u32()? as usize, r.u32()?);
        let model = match (kind, count) {
            (0, 2) => {
                let theta0 = r.matrix()?;
                let theta1 = r.matrix()?;
                if theta0.cols() != theta1.rows() {
                    return Err(Error::Model("inconsistent hidden width".into()));
                }
                Model::Gcn(GcnParams { theta0, theta1 })
            }
            (1, 1) => Model::Sgc(SgcParams { theta: r.matrix()?, k }),
            _ => return Err(Error::Model("unknown model layout".into())),
        };
        if !r.bytes.is_empty() {
            return Err(Error::Model("trailing bytes after snapshot".into()));
        }
        Ok(model)
    }
}
