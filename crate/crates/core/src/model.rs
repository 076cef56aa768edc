//! Fully-connected network with ReLU hidden layers and a linear head.
//!
//! Parameters live in one flat vector so optimizers can treat them as a
//! single slice. Layer `l` maps `dims[l] -> dims[l + 1]` with a weight block
//! stored row-major as `in x out` followed by `out` biases, i.e.
//! `y = x W + b`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSKM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `inputs[l]` is the (post-activation) input of layer `l`, `batch x dims[l]`.
    inputs: Vec<Vec<f64>>,
    /// `pre[l]` is the pre-activation output of layer `l`.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Pre-activation outputs of every layer, `batch x dims[l + 1]` each.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub inputs: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "need at least one layer with non-zero widths, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad dims {dims:?}")));
        }
        if params.len() != param_count(dims) {
            return Err(Error::LengthMismatch {
                expected: param_count(dims),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    /// Weight block and bias of `layer`.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let start = self.offset(layer);
        let w = &self.params[start..start + i * o];
        let b = &self.params[start + i * o..start + i * o + o];
        (w, b)
    }

    /// Runs `x` (row-major, `batch x input_dim`) through the network.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let d = self.input_dim();
        if x.len() % d != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input length {} is not a multiple of {d}",
                x.len()
            )));
        }
        let batch = x.len() / d;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = Vec::with_capacity(batch * o);
            for row in h.chunks_exact(i) {
                let at = z.len();
                z.extend_from_slice(b);
                let out = &mut z[at..];
                for (xi, wrow) in row.iter().zip(w.chunks_exact(o)) {
                    if *xi == 0.0 {
                        continue;
                    }
                    for (acc, wij) in out.iter_mut().zip(wrow) {
                        *acc += xi * wij;
                    }
                }
            }
            let next = if l + 1 < self.num_layers() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        Ok((h, ForwardCache { batch, inputs, pre }))
    }

    /// Outputs only.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Back-propagates `output_grads` (`batch x output_dim`).
    pub fn backward(&self, cache: &ForwardCache, output_grads: &[f64]) -> Result<Gradients> {
        if cache.inputs.len() != self.num_layers()
            || cache
                .inputs
                .iter()
                .enumerate()
                .any(|(l, h)| h.len() != cache.batch * self.dims[l])
        {
            return Err(Error::ShapeMismatch("cache does not match this model".into()));
        }
        if output_grads.len() != cache.batch * self.output_dim() {
            return Err(Error::LengthMismatch {
                expected: cache.batch * self.output_dim(),
                got: output_grads.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = output_grads.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            if l + 1 < self.num_layers() {
                // ReLU, subgradient 0 at 0
                for (gv, z) in g.iter_mut().zip(&cache.pre[l]) {
                    if *z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let start = self.offset(l);
            let (gw, rest) = grads[start..start + i * o + o].split_at_mut(i * o);
            let (w, _) = self.layer(l);
            let mut g_in = vec![0.0; cache.batch * i];
            for ((xrow, grow), gin) in cache.inputs[l]
                .chunks_exact(i)
                .zip(g.chunks_exact(o))
                .zip(g_in.chunks_exact_mut(i))
            {
                for (gb, gv) in rest.iter_mut().zip(grow) {
                    *gb += gv;
                }
                for ((xi, gwrow), (wrow, gi)) in xrow
                    .iter()
                    .zip(gw.chunks_exact_mut(o))
                    .zip(w.chunks_exact(o).zip(gin.iter_mut()))
                {
                    let mut acc = 0.0;
                    for ((gwij, wij), gv) in gwrow.iter_mut().zip(wrow).zip(grow) {
                        *gwij += xi * gv;
                        acc += wij * gv;
                    }
                    *gi = acc;
                }
            }
            g = g_in;
        }
        Ok(Gradients {
            params: grads,
            inputs: g,
        })
    }

    /// Writes the little-endian checkpoint: magic, version, layer count,
    /// dims (all `u32`), then the raw `f64` parameters.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.num_layers() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let layers = read_u32(&mut r)? as usize;
        let dims = (0..=layers)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut params = vec![0.0; param_count(&dims)];
        let mut buf = [0u8; 8];
        for p in &mut params {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated checkpoint".into()))?;
            *p = f64::from_le_bytes(buf);
        }
        Self::from_params(&dims, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(fs::File::open(path)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}
