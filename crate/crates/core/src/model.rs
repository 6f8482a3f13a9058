//! Fully convolutional encoder and linear classifier.
//!
//! ```text
//! x  : n x 28 x 28 x d
//! conv1 3x3, stride 1, pad 1, 16 ch + ReLU -> n x 28 x 28 x 16
//! conv2 3x3, stride 2, pad 0,  8 ch + ReLU -> n x 13 x 13 x 8
//! conv3 3x3, stride 2, pad 0,  5 ch        -> n x  6 x  6 x 5   (= z)
//! fc    180 -> 3                           -> logits
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::{Graph, Tensor, Var};

pub const IMAGE_SIZE: usize = 28;
pub const CONV_CHANNELS: [usize; 3] = [16, 8, 5];
pub const LATENT_SHAPE: [usize; 3] = [6, 6, 5];
pub const LATENT_DIM: usize = 6 * 6 * 5;
pub const NUM_CLASSES: usize = 3;

/// Parameter names in canonical (checkpoint and optimizer) order.
pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "fc.weight",
    "fc.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    /// Seed used by [`init_params`]; `None` for checkpoints loaded from disk.
    pub init_seed: Option<u64>,
    tensors: Vec<Tensor>,
}

/// Leaf handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    vars: [Var; 8],
}

impl ParamVars {
    /// Handles in [`PARAM_NAMES`] order.
    pub fn from_vars(vars: [Var; 8]) -> Self {
        Self { vars }
    }

    pub fn all(&self) -> &[Var; 8] {
        &self.vars
    }
}

fn expected_shapes(d: usize) -> [Vec<usize>; 8] {
    let [c1, c2, c3] = CONV_CHANNELS;
    [
        vec![3, 3, d, c1],
        vec![c1],
        vec![3, 3, c1, c2],
        vec![c2],
        vec![3, 3, c2, c3],
        vec![c3],
        vec![LATENT_DIM, NUM_CLASSES],
        vec![NUM_CLASSES],
    ]
}

/// Uniform weights in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, zero biases.
pub fn init_params(seed: u64, d: usize) -> Result<ModelParams> {
    if d == 0 {
        return Err(Error::Config("color dimension must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(derive_seed(seed, tag("init")));
    let tensors = expected_shapes(d)
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::new(shape, data).expect("shape")
        })
        .collect();
    Ok(ModelParams {
        d,
        init_seed: Some(seed),
        tensors,
    })
}

impl ModelParams {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::shape(format!("expected 8 parameter tensors, got {}", tensors.len())));
        }
        let d = match tensors[0].shape() {
            &[3, 3, d, _] => d,
            s => return Err(Error::shape(format!("conv1.weight shape {s:?}"))),
        };
        for ((name, t), want) in PARAM_NAMES.iter().zip(&tensors).zip(expected_shapes(d)) {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(format!("{name}: shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(Self {
            d,
            init_seed: None,
            tensors,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|&n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        PARAM_NAMES.iter().position(|&n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every tensor as a trainable leaf.
    pub fn register(&self, graph: &mut Graph) -> ParamVars {
        ParamVars {
            vars: std::array::from_fn(|i| graph.param(self.tensors[i].clone())),
        }
    }

    /// Register every tensor as a constant (inference only).
    pub fn register_frozen(&self, graph: &mut Graph) -> ParamVars {
        ParamVars {
            vars: std::array::from_fn(|i| graph.constant(self.tensors[i].clone())),
        }
    }
}

/// `x -> z`, with ReLU after the first two convolutions only.
pub fn encode(graph: &mut Graph, params: &ParamVars, x: Var) -> Result<Var> {
    match graph.shape(x) {
        &[_, IMAGE_SIZE, IMAGE_SIZE, _] => {}
        s => {
            return Err(Error::shape(format!(
                "encoder expects n x {IMAGE_SIZE} x {IMAGE_SIZE} x d input, got {s:?}"
            )))
        }
    }
    let [w1, b1, w2, b2, w3, b3, _, _] = params.vars;
    let h = graph.conv2d(x, w1, Some(b1), 1, 1)?;
    let h = graph.relu(h);
    let h = graph.conv2d(h, w2, Some(b2), 2, 0)?;
    let h = graph.relu(h);
    graph.conv2d(h, w3, Some(b3), 2, 0)
}

/// `logits = flatten(z) W + b`.
pub fn classify(graph: &mut Graph, params: &ParamVars, z: Var) -> Result<Var> {
    let shape = graph.shape(z);
    if shape.len() != 4 || shape[1..] != LATENT_SHAPE {
        return Err(Error::shape(format!(
            "classifier expects n x 6 x 6 x 5 input, got {shape:?}"
        )));
    }
    let [.., w, b] = params.vars;
    let flat = graph.flatten(z)?;
    let logits = graph.matmul(flat, w)?;
    graph.add(logits, b)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize to the `RCKP` layout: magic, `u32` version, then for each
/// tensor `u16` name length, UTF-8 name, `u8` ndim, `u32` dims and `f32`
/// values; finally the CRC32 of everything after the version field. All
/// integers and floats are little-endian.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let body_start = out.len();
    for (name, t) in PARAM_NAMES.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint: truncated record"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint: bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("checkpoint: unsupported version {version}")));
    }
    let (body, crc) = bytes[8..].split_at(bytes.len() - 12);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::format("checkpoint: CRC mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let mut named = Vec::new();
    while r.pos < body.len() {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("checkpoint: tensor name is not UTF-8"))?
            .to_owned();
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    for want in PARAM_NAMES {
        let pos = named
            .iter()
            .position(|(n, _)| n == want)
            .ok_or_else(|| Error::format(format!("checkpoint: missing tensor {want}")))?;
        tensors.push(named.swap_remove(pos).1);
    }
    if let Some((extra, _)) = named.first() {
        return Err(Error::format(format!("checkpoint: unexpected tensor {extra}")));
    }
    ModelParams::from_tensors(tensors).map_err(|e| Error::format(format!("checkpoint: {e}")))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
