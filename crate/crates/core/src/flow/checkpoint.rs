//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic          4 bytes  "LFCK"
//! version        u32      1
//! latent_dim     u64
//! num_conditions u64
//! activation     u8       0 = tanh, 1 = relu
//! hidden_count   u64
//! hidden widths  u64 × hidden_count
//! scheduler      u8       0 = rectified, 1 = tabulated
//!   if tabulated: point count n (u64), then α, β, α̇, β̇ columns (f64 × n each)
//! rng seed       32 bytes ChaCha8 key
//! rng stream     u64
//! rng word_pos   u128
//! tensor_count   u64
//! per tensor:    ndim (u64), dims (u64 × ndim), values (f64 × product)
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::model::{Activation, NetSpec, VelocityModel, VelocityNet};
use crate::flow::scheduler::{ScheduleTable, Scheduler};

const MAGIC: &[u8; 4] = b"LFCK";
const VERSION: u32 = 1;

/// A velocity network together with its scheduler and RNG stream position.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: VelocityNet,
    pub scheduler: Scheduler,
    pub rng: ChaCha8Rng,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

impl Checkpoint {
    pub fn new(net: VelocityNet, scheduler: Scheduler, rng: ChaCha8Rng) -> Self {
        Self { net, scheduler, rng }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let spec = self.net.spec();
        put_u64(&mut out, spec.latent_dim);
        put_u64(&mut out, spec.num_conditions);
        out.push(match spec.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        });
        put_u64(&mut out, spec.hidden.len());
        for &h in &spec.hidden {
            put_u64(&mut out, h);
        }
        match &self.scheduler {
            Scheduler::Rectified => out.push(0),
            Scheduler::Generic(table) => {
                out.push(1);
                put_u64(&mut out, table.intervals() + 1);
                for col in table.columns() {
                    for &v in col {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let params = self.net.params();
        put_u64(&mut out, params.len());
        for p in params {
            put_u64(&mut out, p.shape().len());
            for &d in p.shape() {
                put_u64(&mut out, d);
            }
            for &v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let latent_dim = r.usize()?;
        let num_conditions = r.usize()?;
        let activation = match r.take(1)?[0] {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        };
        let hidden_count = r.usize()?;
        let hidden = (0..hidden_count).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let scheduler = match r.take(1)?[0] {
            0 => Scheduler::Rectified,
            1 => {
                let n = r.usize()?;
                let mut cols = (0..4).map(|_| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let d_beta = cols.pop().unwrap();
                let d_alpha = cols.pop().unwrap();
                let beta = cols.pop().unwrap();
                let alpha = cols.pop().unwrap();
                Scheduler::Generic(ScheduleTable::from_columns(alpha, beta, d_alpha, d_beta)?)
            }
            other => return Err(Error::Checkpoint(format!("unknown scheduler tag {other}"))),
        };
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let count = r.usize()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = r.usize()?;
            let dims = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let len = len.ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
            params.push(Tensor::new(dims, r.f64s(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let spec = NetSpec {
            latent_dim,
            num_conditions,
            hidden,
            activation,
        };
        Ok(Self {
            net: VelocityNet::from_params(spec, params)?,
            scheduler,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_is_bitwise() {
        let net = VelocityNet::new(NetSpec::new(2, 3, vec![5, 4]), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        rng.next_u32();
        let ck = Checkpoint::new(net, Scheduler::cosine(8).unwrap(), rng);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut a = ck.rng.clone();
        let mut b = back.rng.clone();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let net = VelocityNet::new(NetSpec::new(1, 1, vec![]), 0).unwrap();
        let bytes = Checkpoint::new(net, Scheduler::Rectified, ChaCha8Rng::seed_from_u64(0)).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
