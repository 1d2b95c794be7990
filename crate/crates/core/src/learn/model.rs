//! Per-point MLP encoder followed by an affine vision-language adapter.
//! Output rows are L2-normalized.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointScene;

/// Normalized xyz, rgb, and mean rgb of the point's context voxel.
pub const INPUT_DIM: usize = 9;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub logit_scale: f64,
    /// Edge length of the voxel grid used for the local mean-color feature.
    pub context_voxel: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 3,
            logit_scale: 100.0,
            context_voxel: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn uniform(rng: &mut ChaCha8Rng, out: usize, inp: usize, bound: f64) -> Self {
        Self {
            weight: Array2::from_shape_fn((out, inp), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(out),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Linear>,
    pub adapter: Linear,
    pub logit_scale: f64,
    pub context_voxel: f64,
}

pub struct Activations {
    input: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    norms: Array1<f64>,
    pub output: Array2<f64>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, embed_dim: usize, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || embed_dim < 2 {
            return Err(Error::config("model needs >= 1 layer, hidden > 0 and embed dim >= 2"));
        }
        if !(cfg.logit_scale > 0.0) || !(cfg.context_voxel > 0.0) {
            return Err(Error::config("logit_scale and context_voxel must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(cfg.layers);
        let mut fan_in = INPUT_DIM;
        for _ in 0..cfg.layers {
            encoder.push(Linear::uniform(&mut rng, cfg.hidden, fan_in, (6.0 / fan_in as f64).sqrt()));
            fan_in = cfg.hidden;
        }
        let adapter = Linear::uniform(&mut rng, embed_dim, cfg.hidden, (6.0 / (cfg.hidden + embed_dim) as f64).sqrt());
        Ok(Self {
            encoder,
            adapter,
            logit_scale: cfg.logit_scale,
            context_voxel: cfg.context_voxel,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.adapter.weight.nrows()
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.encoder.iter().chain(std::iter::once(&self.adapter))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.encoder.iter_mut().chain(std::iter::once(&mut self.adapter))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidParams("logit scale must be positive and finite".into()));
        }
        let mut fan_in = INPUT_DIM;
        for (i, l) in self.layers().enumerate() {
            if l.weight.ncols() != fan_in || l.bias.len() != l.weight.nrows() {
                return Err(Error::InvalidParams(format!("layer {i} has inconsistent shape")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(format!("layer {i} has non-finite weights")));
            }
            fan_in = l.weight.nrows();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for l in self.layers_mut() {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("flat parameter vector too short");
            }
        }
    }

    /// Zero-valued parameters with the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(|l| Linear::zeros(l.weight.nrows(), l.weight.ncols())).collect(),
            adapter: Linear::zeros(self.adapter.weight.nrows(), self.adapter.weight.ncols()),
            logit_scale: self.logit_scale,
            context_voxel: self.context_voxel,
        }
    }

    pub fn forward(&self, input: Array2<f64>) -> Activations {
        let mut hidden = Vec::with_capacity(self.encoder.len());
        let mut x = input.clone();
        for l in &self.encoder {
            x = l.apply(&x).mapv_into(|v| v.max(0.0));
            hidden.push(x.clone());
        }
        let mut output = self.adapter.apply(&x);
        let norms = output.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_FLOOR));
        for (mut r, n) in output.rows_mut().into_iter().zip(&norms) {
            r /= *n;
        }
        Activations {
            input,
            hidden,
            norms,
            output,
        }
    }

    /// Parameter gradients for `grad_output = dL/d(normalized features)`.
    pub fn backward(&self, act: &Activations, grad_output: &Array2<f64>) -> ModelParams {
        let mut grads = self.zeros_like();
        // Through the row normalization: (g - y (y . g)) / |a|.
        let mut g = grad_output.clone();
        for ((mut gr, y), n) in g.rows_mut().into_iter().zip(act.output.rows()).zip(&act.norms) {
            let proj = y.dot(&gr);
            gr.scaled_add(-proj, &y);
            gr /= *n;
        }
        let last = act.hidden.last().unwrap_or(&act.input);
        grads.adapter.weight = g.t().dot(last);
        grads.adapter.bias = g.sum_axis(Axis(0));
        let mut g = g.dot(&self.adapter.weight);
        for k in (0..self.encoder.len()).rev() {
            let out = &act.hidden[k];
            g.zip_mut_with(out, |gv, &h| {
                if h <= 0.0 {
                    *gv = 0.0
                }
            });
            let inp = if k == 0 { &act.input } else { &act.hidden[k - 1] };
            grads.encoder[k].weight = g.t().dot(inp);
            grads.encoder[k].bias = g.sum_axis(Axis(0));
            if k > 0 {
                g = g.dot(&self.encoder[k].weight);
            }
        }
        grads
    }
}

/// Per-point encoder inputs: xyz scaled to [-1, 1] over the scene's bounding
/// box, rgb and the mean rgb of the point's context voxel (both centred).
pub fn point_inputs(scene: &PointScene, context_voxel: f64) -> Array2<f64> {
    let n = scene.len();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &scene.points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k] as f64);
            hi[k] = hi[k].max(p[k] as f64);
        }
    }
    let key = |p: &[f32; 3]| -> [i64; 3] { std::array::from_fn(|k| (p[k] as f64 / context_voxel).floor() as i64) };
    let mut cells: HashMap<[i64; 3], ([f64; 3], usize)> = HashMap::new();
    for (p, c) in scene.points.iter().zip(&scene.colors) {
        let e = cells.entry(key(p)).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            e.0[k] += c[k] as f64;
        }
        e.1 += 1;
    }
    let mut x = Array2::zeros((n, INPUT_DIM));
    for (i, (p, c)) in scene.points.iter().zip(&scene.colors).enumerate() {
        let (sum, count) = cells[&key(p)];
        for k in 0..3 {
            let span = (hi[k] - lo[k]).max(1e-9);
            x[(i, k)] = 2.0 * (p[k] as f64 - lo[k]) / span - 1.0;
            x[(i, 3 + k)] = 2.0 * c[k] as f64 - 1.0;
            x[(i, 6 + k)] = 2.0 * sum[k] / count as f64 - 1.0;
        }
    }
    x
}

/// Unit-norm point features for every point of `scene`.
pub fn encode_points(params: &ModelParams, scene: &PointScene) -> Result<Array2<f64>> {
    params.validate()?;
    Ok(params.forward(point_inputs(scene, params.context_voxel)).output)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLCW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian): `"PLCW"`, version u32, layer count u32
/// (encoder layers then the adapter), logit scale f32, context voxel f32,
/// per layer out u32 and in u32, then per layer the row-major f32 weight
/// followed by the f32 bias.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&((params.encoder.len() + 1) as u32).to_le_bytes());
    buf.extend_from_slice(&(params.logit_scale as f32).to_le_bytes());
    buf.extend_from_slice(&(params.context_voxel as f32).to_le_bytes());
    for l in params.layers() {
        buf.extend_from_slice(&(l.weight.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.weight.ncols() as u32).to_le_bytes());
    }
    for l in params.layers() {
        for w in l.weight.iter().chain(l.bias.iter()) {
            buf.extend_from_slice(&(*w as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams> {
    let bad = |d: &str| Error::format("checkpoint", d);
    let mut pos = 0;
    let mut take4 = || -> Result<[u8; 4]> {
        let b = buf.get(pos..pos + 4).ok_or_else(|| bad("unexpected end of data"))?;
        pos += 4;
        Ok(b.try_into().unwrap())
    };
    if &take4()? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(take4()?) != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let n_layers = u32::from_le_bytes(take4()?) as usize;
    if n_layers < 2 {
        return Err(bad("need at least one encoder layer and the adapter"));
    }
    let logit_scale = f32::from_le_bytes(take4()?) as f64;
    let context_voxel = f32::from_le_bytes(take4()?) as f64;
    let shapes = (0..n_layers)
        .map(|_| Ok((u32::from_le_bytes(take4()?) as usize, u32::from_le_bytes(take4()?) as usize)))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for (out, inp) in shapes {
        let mut l = Linear::zeros(out, inp);
        for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *w = f32::from_le_bytes(take4()?) as f64;
        }
        layers.push(l);
    }
    if pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    let adapter = layers.pop().unwrap();
    let params = ModelParams {
        encoder: layers,
        adapter,
        logit_scale,
        context_voxel,
    };
    params.validate()?;
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}
