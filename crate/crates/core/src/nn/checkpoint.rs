//! Binary parameter checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "MGZC"
//! version      u32      1
//! n_layers     u32
//! per layer:
//!   name_len   u32, name (UTF-8)
//!   kind       u8       0 = conv2d, 1 = dense
//!   weights    tensor
//!   bias       tensor
//! has_opt      u8       0 or 1
//! if has_opt:
//!   step_count u64, base_lr f64, decay_factor f64, decay_every u64,
//!   rho f64, eps f64, n_accum u32, n_accum tensors
//!
//! tensor:      ndim u32, ndim x u64 extents, row-major f64 values
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::layers::{LayerKind, LayerParams};
use super::optim::OptimizerState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGZC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<(String, LayerParams)>,
    pub optimizer: Option<OptimizerState>,
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_u32::<LE>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LE>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let ndim = r.read_u32::<LE>()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LE>()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(Error::Checkpoint(format!("tensor {shape:?} too large")));
    }
    let mut data = vec![0.0; n];
    r.read_f64_into::<LE>(&mut data)?;
    Tensor::new(shape, data)
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(ckpt.layers.len() as u32)?;
    for (name, layer) in &ckpt.layers {
        w.write_u32::<LE>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(match layer.kind {
            LayerKind::Conv2d => 0,
            LayerKind::Dense => 1,
        })?;
        write_tensor(w, &layer.weights)?;
        write_tensor(w, &layer.bias)?;
    }
    match &ckpt.optimizer {
        None => w.write_u8(0)?,
        Some(opt) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(opt.step_count)?;
            w.write_f64::<LE>(opt.base_lr)?;
            w.write_f64::<LE>(opt.decay_factor)?;
            w.write_u64::<LE>(opt.decay_every)?;
            w.write_f64::<LE>(opt.rho)?;
            w.write_f64::<LE>(opt.eps)?;
            w.write_u32::<LE>(opt.accum.len() as u32)?;
            for t in &opt.accum {
                write_tensor(w, t)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LE>()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u32::<LE>()? as usize;
        if len > 4096 {
            return Err(Error::Checkpoint("layer name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let kind = match r.read_u8()? {
            0 => LayerKind::Conv2d,
            1 => LayerKind::Dense,
            k => return Err(Error::Checkpoint(format!("unknown layer kind {k}"))),
        };
        let weights = read_tensor(r)?;
        let bias = read_tensor(r)?;
        let layer = LayerParams {
            kind,
            weights,
            bias,
        };
        layer.validate()?;
        layers.push((name, layer));
    }
    let optimizer = match r.read_u8()? {
        0 => None,
        1 => {
            let step_count = r.read_u64::<LE>()?;
            let base_lr = r.read_f64::<LE>()?;
            let decay_factor = r.read_f64::<LE>()?;
            let decay_every = r.read_u64::<LE>()?;
            let rho = r.read_f64::<LE>()?;
            let eps = r.read_f64::<LE>()?;
            let na = r.read_u32::<LE>()? as usize;
            let accum = (0..na)
                .map(|_| read_tensor(r))
                .collect::<Result<Vec<_>>>()?;
            Some(OptimizerState {
                accum,
                step_count,
                base_lr,
                decay_factor,
                decay_every,
                rho,
                eps,
            })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    Ok(Checkpoint { layers, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::RmspropConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = LayerParams::conv2d(4, 2, 3, &mut rng);
        let dense = LayerParams::dense(3, 5, &mut rng);
        let mut opt =
            OptimizerState::new(RmspropConfig::default(), [&conv.weights, &dense.bias]).unwrap();
        opt.step_count = 17;
        opt.accum[1].data_mut()[2] = 0.25;
        let ckpt = Checkpoint {
            layers: vec![("c".into(), conv), ("d".into(), dense)],
            optimizer: Some(opt),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&mut buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
        let mut truncated = Vec::new();
        write_checkpoint(
            &mut truncated,
            &Checkpoint {
                layers: vec![],
                optimizer: None,
            },
        )
        .unwrap();
        truncated.pop();
        assert!(read_checkpoint(&mut truncated.as_slice()).is_err());
    }
}
