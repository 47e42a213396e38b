//! Flat binary checkpoints for an adapter stack plus classifier head.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "FPIACKPT"
//! version  u32      1
//! seed     u64
//! step     u64
//! depth    u32      adapter layers; 4 tensors each, then 2 head tensors
//! count    u32      number of tensors (= 4·depth + 2)
//! shapes   count × (rows u32, cols u32)
//! nonlin   depth × u8   0 = relu, 1 = tanh
//! payload  every tensor's f64 values, row-major, in manifest order
//! ```
//!
//! Bias vectors are recorded as `1 × len` tensors.

use crate::error::{Error, Result};
use crate::model::{AdapterLayer, AdapterStack, ClassifierHead, Nonlinearity};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"FPIACKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub adapters: AdapterStack,
    pub head: ClassifierHead,
}

fn tensor_shapes(ckpt: &Checkpoint) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for l in &ckpt.adapters.layers {
        shapes.push(l.w_down.shape());
        shapes.push((1, l.b_down.len()));
        shapes.push(l.w_up.shape());
        shapes.push((1, l.b_up.len()));
    }
    shapes.push(ckpt.head.w.shape());
    shapes.push((1, ckpt.head.b.len()));
    shapes
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("dimension {v} exceeds u32")))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.adapters.check_shapes()?;
    let shapes = tensor_shapes(ckpt);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&to_u32(ckpt.adapters.depth())?.to_le_bytes());
    out.extend_from_slice(&to_u32(shapes.len())?.to_le_bytes());
    for (r, c) in &shapes {
        out.extend_from_slice(&to_u32(*r)?.to_le_bytes());
        out.extend_from_slice(&to_u32(*c)?.to_le_bytes());
    }
    for l in &ckpt.adapters.layers {
        out.push(match l.nonlinearity {
            Nonlinearity::Relu => 0,
            Nonlinearity::Tanh => 1,
        });
    }
    let tensors = ckpt
        .adapters
        .layers
        .iter()
        .flat_map(|l| {
            [
                l.w_down.as_slice(),
                l.b_down.as_slice(),
                l.w_up.as_slice(),
                l.b_up.as_slice(),
            ]
        })
        .chain([ckpt.head.w.as_slice(), ckpt.head.b.as_slice()]);
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint("tensor size overflow".into())
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = rd.u64()?;
    let step = rd.u64()?;
    let depth = rd.u32()? as usize;
    let count = rd.u32()? as usize;
    if count != 4 * depth + 2 {
        return Err(Error::Checkpoint(format!(
            "{count} tensors listed for depth {depth}"
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((rd.u32()? as usize, rd.u32()? as usize));
    }
    let mut nonlins = Vec::with_capacity(depth);
    for _ in 0..depth {
        nonlins.push(match rd.u8()? {
            0 => Nonlinearity::Relu,
            1 => Nonlinearity::Tanh,
            other => return Err(Error::Checkpoint(format!("unknown nonlinearity tag {other}"))),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for &(r, c) in &shapes {
        tensors.push(Matrix::from_vec(r, c, rd.f64s(r * c)?)?);
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - rd.pos
        )));
    }

    let mut it = tensors.into_iter();
    let mut layers = Vec::with_capacity(depth);
    for nonlinearity in nonlins {
        let w_down = it.next().unwrap();
        let b_down = it.next().unwrap().into_vec();
        let w_up = it.next().unwrap();
        let b_up = it.next().unwrap().into_vec();
        layers.push(AdapterLayer {
            w_down,
            b_down,
            w_up,
            b_up,
            nonlinearity,
        });
    }
    let adapters = AdapterStack { layers };
    adapters.check_shapes()?;
    let head = ClassifierHead {
        w: it.next().unwrap(),
        b: it.next().unwrap().into_vec(),
    };
    if head.w.cols() != head.b.len() {
        return Err(Error::Checkpoint("head bias does not match head width".into()));
    }
    Ok(Checkpoint {
        seed,
        step,
        adapters,
        head,
    })
}
