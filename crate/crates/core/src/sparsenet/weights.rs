//! Network description, random initialization and the "P2EN" weight file.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! "P2EN"  u32 version (1)
//! u32 levels
//! u32 n, n × u32 encoder widths (input channels first)
//! u32 n, n × u32 decoder widths (coarsest first)
//! u32 head hidden width
//! u32 head input (0 = decoder features only)
//! u32 layer count
//! per layer: u8 kind, u8 kernel, u32 in, u32 out,
//!            f32 × (taps · out · in) weights, f32 × out bias
//! ```
//!
//! Weights are stored `[tap][out][in]` with taps in lexicographic
//! `(dz, dy, dx)` order.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetError;
use crate::voxelgrid::INPUT_CHANNELS;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"P2EN";
pub const WEIGHTS_VERSION: u32 = 1;
pub const RAW_OUTPUTS: usize = 14;
pub const CONV_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    Mlp,
}

impl LayerKind {
    fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::TransposedConv => 1,
            LayerKind::Mlp => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(LayerKind::Conv),
            1 => Some(LayerKind::TransposedConv),
            2 => Some(LayerKind::Mlp),
            _ => None,
        }
    }
}

/// Shape of one layer. Strides are implied by the grid a layer runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Odd for convolutions, 2 for transposed convolutions, 1 for MLP layers.
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn transposed(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::TransposedConv,
            kernel: 2,
            in_channels,
            out_channels,
        }
    }

    pub fn mlp(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Mlp,
            kernel: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::Mlp => self.in_channels * self.out_channels,
            _ => self.taps() * self.in_channels * self.out_channels,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && match self.kind {
                LayerKind::Conv => self.kernel % 2 == 1,
                LayerKind::TransposedConv => self.kernel == 2,
                LayerKind::Mlp => self.kernel == 1,
            };
        if ok {
            Ok(())
        } else {
            Err(NetError::InvalidLayer(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `[tap][out][in]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: vec![0.0; spec.weight_count()],
            bias: vec![0.0; spec.out_channels],
        }
    }
}

/// Channel plan of the UNet.
///
/// `encoder` starts with the input channel count and has `levels + 2`
/// entries: one convolution at full resolution and one after each of the
/// `levels` poolings. `decoder` has `levels` entries, coarsest first; each
/// decoder level is a transposed convolution, a skip concatenation and a
/// convolution back to the level width. The head maps the final decoder
/// width through `head_hidden` to the 14 raw outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkPlan {
    pub levels: usize,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for NetworkPlan {
    fn default() -> Self {
        Self {
            levels: 3,
            encoder: vec![INPUT_CHANNELS, 16, 32, 64, 128],
            decoder: vec![64, 32, 16],
            head_hidden: 64,
        }
    }
}

impl NetworkPlan {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Topology(m));
        if self.levels == 0 {
            return bad("at least one level is required".into());
        }
        if self.encoder.len() != self.levels + 2 {
            return bad(format!("{} encoder widths for {} levels", self.encoder.len(), self.levels));
        }
        if self.decoder.len() != self.levels {
            return bad(format!("{} decoder widths for {} levels", self.decoder.len(), self.levels));
        }
        if self.encoder.iter().chain(&self.decoder).any(|&w| w == 0) || self.head_hidden == 0 {
            return bad("zero channel width".into());
        }
        Ok(())
    }

    /// Layer shapes in execution order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let l = self.levels;
        let e = &self.encoder;
        let mut specs: Vec<LayerSpec> = (0..=l).map(|i| LayerSpec::conv(CONV_KERNEL, e[i], e[i + 1])).collect();
        let mut width = e[l + 1];
        for (i, &d) in self.decoder.iter().enumerate() {
            let skip = e[l - i];
            specs.push(LayerSpec::transposed(width, d));
            specs.push(LayerSpec::conv(CONV_KERNEL, d + skip, d));
            width = d;
        }
        specs.push(LayerSpec::mlp(width, self.head_hidden));
        specs.push(LayerSpec::mlp(self.head_hidden, RAW_OUTPUTS));
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub plan: NetworkPlan,
    pub layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn new(plan: NetworkPlan, layers: Vec<Layer>) -> Result<Self, NetError> {
        let w = Self { plan, layers };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(plan: NetworkPlan) -> Result<Self, NetError> {
        plan.validate()?;
        let layers = plan.layer_specs().into_iter().map(Layer::zeros).collect();
        Self::new(plan, layers)
    }

    /// Checks the layer list against the plan and every tensor size.
    pub fn validate(&self) -> Result<(), NetError> {
        self.plan.validate()?;
        let specs = self.plan.layer_specs();
        if specs.len() != self.layers.len() {
            return Err(NetError::Topology(format!(
                "plan needs {} layers, found {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for (i, (want, layer)) in specs.iter().zip(&self.layers).enumerate() {
            layer.spec.validate()?;
            if *want != layer.spec {
                return Err(NetError::Topology(format!("layer {i}: expected {want:?}, found {:?}", layer.spec)));
            }
            if layer.weights.len() != layer.spec.weight_count() {
                return Err(NetError::SizeMismatch {
                    layer: i,
                    expected: layer.spec.weight_count(),
                    got: layer.weights.len(),
                });
            }
            if layer.bias.len() != layer.spec.out_channels {
                return Err(NetError::SizeMismatch {
                    layer: i,
                    expected: layer.spec.out_channels,
                    got: layer.bias.len(),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(WEIGHTS_MAGIC);
        u32le(&mut out, WEIGHTS_VERSION as usize);
        u32le(&mut out, self.plan.levels);
        u32le(&mut out, self.plan.encoder.len());
        for &w in &self.plan.encoder {
            u32le(&mut out, w);
        }
        u32le(&mut out, self.plan.decoder.len());
        for &w in &self.plan.decoder {
            u32le(&mut out, w);
        }
        u32le(&mut out, self.plan.head_hidden);
        u32le(&mut out, 0);
        u32le(&mut out, self.layers.len());
        for layer in &self.layers {
            out.push(layer.spec.kind.code());
            out.push(layer.spec.kernel as u8);
            u32le(&mut out, layer.spec.in_channels);
            u32le(&mut out, layer.spec.out_channels);
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != WEIGHTS_MAGIC {
            return Err(NetError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != WEIGHTS_VERSION {
            return Err(NetError::UnsupportedVersion(version));
        }
        let levels = r.u32("level count")? as usize;
        let encoder = r.widths("encoder plan")?;
        let decoder = r.widths("decoder plan")?;
        let head_hidden = r.u32("head width")? as usize;
        let head_input = r.u32("head input")?;
        if head_input != 0 {
            return Err(NetError::Topology(format!("unsupported head input mode {head_input}")));
        }
        let plan = NetworkPlan {
            levels,
            encoder,
            decoder,
            head_hidden,
        };
        plan.validate()?;
        let count = r.u32("layer count")? as usize;
        let expected = plan.layer_specs();
        if count != expected.len() {
            return Err(NetError::Topology(format!("plan needs {} layers, file has {count}", expected.len())));
        }
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let kind = r.take(1, "layer kind")?[0];
            let kind = LayerKind::from_code(kind).ok_or_else(|| NetError::InvalidLayer(format!("layer {i}: kind code {kind}")))?;
            let kernel = r.take(1, "layer kernel")?[0] as usize;
            let spec = LayerSpec {
                kind,
                kernel,
                in_channels: r.u32("layer channels")? as usize,
                out_channels: r.u32("layer channels")? as usize,
            };
            spec.validate()?;
            if spec != expected[i] {
                return Err(NetError::SizeMismatch {
                    layer: i,
                    expected: expected[i].weight_count(),
                    got: spec.weight_count(),
                });
            }
            let weights = r.f32s(spec.weight_count(), "layer weights")?;
            let bias = r.f32s(spec.out_channels, "layer bias")?;
            layers.push(Layer { spec, weights, bias });
        }
        if r.pos != bytes.len() {
            return Err(NetError::TrailingBytes(bytes.len() - r.pos));
        }
        Self::new(plan, layers)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        fs::write(path, self.to_bytes()).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = fs::read(path).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_weights(weights: &NetworkWeights, path: &Path) -> Result<(), NetError> {
    weights.save(path)
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights, NetError> {
    NetworkWeights::load(path)
}

/// He-uniform weights in `±sqrt(6 / fan_in)` with `fan_in = taps · in`,
/// zero biases, drawn from ChaCha8 seeded with `seed`.
pub fn init_random(plan: &NetworkPlan, seed: u64) -> Result<NetworkWeights, NetError> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = plan
        .layer_specs()
        .into_iter()
        .map(|spec| {
            let fan_in = spec.weight_count() / spec.out_channels;
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let weights = (0..spec.weight_count()).map(|_| rng.gen_range(-bound..=bound)).collect();
            Layer {
                spec,
                weights,
                bias: vec![0.0; spec.out_channels],
            }
        })
        .collect();
    NetworkWeights::new(plan.clone(), layers)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(NetError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn widths(&mut self, what: &'static str) -> Result<Vec<usize>, NetError> {
        let n = self.u32(what)? as usize;
        if n > 1024 {
            return Err(NetError::Topology(format!("{what}: {n} entries")));
        }
        (0..n).map(|_| self.u32(what).map(|v| v as usize)).collect()
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, NetError> {
        let bytes = self.take(n.checked_mul(4).ok_or(NetError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}
