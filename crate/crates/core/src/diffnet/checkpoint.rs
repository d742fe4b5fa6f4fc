//! Binary net checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MITANET1"
//! u64 input_dim
//! u64 hidden layer count H, then H x u64 hidden dims
//! u64 num_classes
//! u64 activation (0 = relu, 1 = tanh)
//! u64 use_norm_layers (0 / 1)
//! f64 x param_count            parameters in layout order
//! per norm layer: f64 x h running mean, then f64 x h running variance
//! ```

use std::fs;
use std::path::Path;

use super::{Activation, NetError, NetSpec, NormStats, ParamNet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MITANET1";

impl ParamNet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.spec();
        let mut out = Vec::with_capacity(64 + 8 * self.params().len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut put = |v: u64| out.extend_from_slice(&v.to_le_bytes());
        put(spec.input_dim as u64);
        put(spec.hidden_dims.len() as u64);
        for &h in &spec.hidden_dims {
            put(h as u64);
        }
        put(spec.num_classes as u64);
        put(match spec.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        put(spec.use_norm_layers as u64);
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for st in self.norm_state() {
            for v in st.mean.iter().chain(&st.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("bad magic".into()));
        }
        let input_dim = r.usize()?;
        let n_hidden = r.usize()?;
        if n_hidden > 1 << 16 {
            return Err(NetError::Checkpoint("implausible layer count".into()));
        }
        let hidden_dims = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
        let num_classes = r.usize()?;
        let activation = match r.u64()? {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(NetError::Checkpoint(format!("unknown activation {other}"))),
        };
        let use_norm_layers = match r.u64()? {
            0 => false,
            1 => true,
            other => return Err(NetError::Checkpoint(format!("bad norm flag {other}"))),
        };
        let spec = NetSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
            use_norm_layers,
        };
        spec.validate()?;
        let params = r.f64s(spec.param_count())?;
        let mut norm_state = Vec::new();
        for &h in spec.hidden_dims.iter().take(spec.norm_layer_count()) {
            let mean = r.f64s(h)?;
            let var = r.f64s(h)?;
            norm_state.push(NormStats { mean, var });
        }
        if r.pos != bytes.len() {
            return Err(NetError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        ParamNet::from_parts(spec, params, norm_state)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NetError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, NetError> {
        usize::try_from(self.u64()?).map_err(|_| NetError::Checkpoint("size overflow".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NetError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NetError::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint(net: &ParamNet, path: &Path) -> Result<(), NetError> {
    fs::write(path, net.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamNet, NetError> {
    ParamNet::from_bytes(&fs::read(path)?)
}
