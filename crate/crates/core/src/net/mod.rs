//! The view-distribution network.
//!
//! A 10-layer, 256-wide rectifier trunk over the 60 encoded position features,
//! with those features concatenated again onto the sixth layer's input. The
//! trunk output joins the 40 encoded direction features in a 128-wide tanh
//! layer (the latent code), followed by a linear map to `k` logits and a
//! softmax.
//!
//! Parameters live in one flat vector, layer by layer, each layer storing its
//! `fan_in × fan_out` weight matrix row-major followed by its bias.

mod checkpoint;
mod kernel;
mod scalar;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use scalar::Scalar;

use crate::error::{Error, Result};
use crate::field::{
    encode_derivative, encode_normalized, Normalizer, ThematicDistribution, Viewpoint,
    DIRECTION_FEATURES, ENCODING_DIM, FREQUENCIES, POSITION_FEATURES,
};
use crate::raster::BinSpec;

pub const WIDTH: usize = 256;
pub const DEPTH: usize = 10;
/// Trunk layer whose input also receives the position features.
pub const SKIP_LAYER: usize = 5;
pub const LATENT: usize = 128;
const HEAD: usize = DEPTH;
const OUT: usize = DEPTH + 1;
/// Rows per work item in batched inference.
const CHUNK: usize = 256;

/// `[fan_in, fan_out]` of every layer for `k` outputs.
pub fn layer_shapes(k: usize) -> Vec<[usize; 2]> {
    let mut shapes = vec![[POSITION_FEATURES, WIDTH]];
    for l in 1..DEPTH {
        let fan_in = if l == SKIP_LAYER { WIDTH + POSITION_FEATURES } else { WIDTH };
        shapes.push([fan_in, WIDTH]);
    }
    shapes.push([WIDTH + DIRECTION_FEATURES, LATENT]);
    shapes.push([LATENT, k]);
    shapes
}

pub fn param_count(k: usize) -> usize {
    layer_shapes(k).iter().map(|[i, o]| i * o + o).sum()
}

/// Encoded network inputs for a batch, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Features<F> {
    pub n: usize,
    pub pos: Vec<F>,
    pub dir: Vec<F>,
    /// The normalized 5-vectors the features were computed from.
    pub normalized: Vec<[f64; 5]>,
}

impl<F: Scalar> Features<F> {
    pub fn from_normalized(ts: Vec<[f64; 5]>) -> Self {
        let n = ts.len();
        let mut pos = Vec::with_capacity(n * POSITION_FEATURES);
        let mut dir = Vec::with_capacity(n * DIRECTION_FEATURES);
        let mut p = [0.0; POSITION_FEATURES];
        let mut d = [0.0; DIRECTION_FEATURES];
        for t in &ts {
            encode_normalized(t, &mut p, &mut d);
            pos.extend(p.iter().map(|&v| F::from_f64(v)));
            dir.extend(d.iter().map(|&v| F::from_f64(v)));
        }
        Features {
            n,
            pos,
            dir,
            normalized: ts,
        }
    }

    /// Fails on the first non-finite viewpoint.
    pub fn from_viewpoints(normalizer: &Normalizer, vps: &[Viewpoint]) -> Result<Self> {
        if let Some(index) = vps.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self::from_normalized(
            vps.iter().map(|v| normalizer.normalize(v)).collect(),
        ))
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        let mut pos = Vec::with_capacity(idx.len() * POSITION_FEATURES);
        let mut dir = Vec::with_capacity(idx.len() * DIRECTION_FEATURES);
        for &i in idx {
            pos.extend_from_slice(&self.pos[i * POSITION_FEATURES..(i + 1) * POSITION_FEATURES]);
            dir.extend_from_slice(&self.dir[i * DIRECTION_FEATURES..(i + 1) * DIRECTION_FEATURES]);
        }
        Features {
            n: idx.len(),
            pos,
            dir,
            normalized: idx.iter().map(|&i| self.normalized[i]).collect(),
        }
    }
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    pub n: usize,
    /// Post-activation output of each trunk layer, `n × WIDTH`.
    pub trunk: Vec<Vec<F>>,
    /// `n × LATENT` tanh activations.
    pub latent: Vec<F>,
    /// `n × k` softmax outputs.
    pub output: Vec<F>,
}

/// Outputs and latent codes of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<F> {
    pub n: usize,
    pub k: usize,
    pub output: Vec<F>,
    pub latent: Vec<F>,
}

impl<F: Scalar> Inference<F> {
    pub fn output_row(&self, i: usize) -> &[F] {
        &self.output[i * self.k..(i + 1) * self.k]
    }

    pub fn latent_row(&self, i: usize) -> &[F] {
        &self.latent[i * LATENT..(i + 1) * LATENT]
    }

    pub fn distributions(&self) -> Vec<ThematicDistribution> {
        (0..self.n)
            .map(|i| ThematicDistribution(self.output_row(i).iter().map(|v| v.to_f64()).collect()))
            .collect()
    }
}

/// Loss, prediction and loss gradient for one viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub m: Vec<f64>,
    pub loss: f64,
    /// With respect to the normalized coordinates.
    pub normalized: [f64; 5],
    /// With respect to the raw `(x, y, z, α, γ)`.
    pub raw: [f64; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    k: usize,
    shapes: Vec<[usize; 2]>,
    offsets: Vec<usize>,
    data: Vec<F>,
}

fn offsets_of(shapes: &[[usize; 2]]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(shapes.len() + 1);
    let mut at = 0;
    for [i, o] in shapes {
        offsets.push(at);
        at += i * o + o;
    }
    offsets.push(at);
    offsets
}

fn relu<F: Scalar>(x: &mut [F]) {
    for v in x {
        *v = v.relu();
    }
}

fn softmax_rows<F: Scalar>(x: &mut [F], k: usize) {
    for row in x.chunks_exact_mut(k) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

impl<F: Scalar> Weights<F> {
    pub fn zeros(k: usize) -> Self {
        let shapes = layer_shapes(k);
        let offsets = offsets_of(&shapes);
        let data = vec![F::ZERO; offsets[shapes.len()]];
        Weights {
            k,
            shapes,
            offsets,
            data,
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(k: usize, seed: u64) -> Self {
        let mut w = Self::zeros(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..w.shapes.len() {
            let [fan_in, fan_out] = w.shapes[l];
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (wr, _) = w.layer_ranges(l);
            for v in &mut w.data[wr] {
                *v = F::from_f64(rng.gen_range(-limit..limit));
            }
        }
        w
    }

    pub fn from_vec(k: usize, data: Vec<F>) -> Result<Self> {
        let mut w = Self::zeros(k);
        if data.len() != w.data.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters for k = {k}, got {}",
                w.data.len(),
                data.len()
            )));
        }
        w.data = data;
        Ok(w)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shapes(&self) -> &[[usize; 2]] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn cast<G: Scalar>(&self) -> Weights<G> {
        Weights {
            k: self.k,
            shapes: self.shapes.clone(),
            offsets: self.offsets.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index ranges of layer `l`'s weight matrix and bias in the flat vector.
    pub fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let [fan_in, fan_out] = self.shapes[l];
        let start = self.offsets[l];
        let mid = start + fan_in * fan_out;
        (start..mid, mid..mid + fan_out)
    }

    /// `out = [x₁ x₂ …] · W + b` where the input is given as column blocks.
    fn dense(&self, l: usize, n: usize, blocks: &[(&[F], usize)], out: &mut [F]) {
        let [fan_in, fan_out] = self.shapes[l];
        let (wr, br) = self.layer_ranges(l);
        let (w, b) = (&self.data[wr], &self.data[br]);
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(b);
        }
        let mut r = 0;
        for &(x, width) in blocks {
            F::gemm_acc(n, width, fan_out, x, &w[r * fan_out..(r + width) * fan_out], out);
            r += width;
        }
        debug_assert_eq!(r, fan_in);
    }

    /// Backpropagates `dz` (gradient at layer `l`'s pre-activation) into its
    /// parameters and, for blocks flagged in `need`, its inputs.
    fn dense_backward(
        &self,
        l: usize,
        n: usize,
        blocks: &[(&[F], usize, bool)],
        dz: &[F],
        grad: Option<&mut [F]>,
    ) -> Vec<Option<Vec<F>>> {
        let [_, fan_out] = self.shapes[l];
        let (wr, br) = self.layer_ranges(l);
        if let Some(grad) = grad {
            let (gw, gb) = grad[wr.start..br.end].split_at_mut(wr.len());
            let mut r = 0;
            for &(x, width, _) in blocks {
                F::gemm(width, n, fan_out, x, true, dz, false, &mut gw[r * fan_out..(r + width) * fan_out], false);
                r += width;
            }
            gb.fill(F::ZERO);
            for row in dz.chunks_exact(fan_out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let w = &self.data[wr];
        let mut r = 0;
        blocks
            .iter()
            .map(|&(_, width, need)| {
                let block = &w[r * fan_out..(r + width) * fan_out];
                r += width;
                need.then(|| {
                    let mut dx = vec![F::ZERO; n * width];
                    F::gemm(n, fan_out, width, dz, false, block, true, &mut dx, false);
                    dx
                })
            })
            .collect()
    }

    fn forward_rows(&self, n: usize, pos: &[F], dir: &[F]) -> Trace<F> {
        let mut trunk: Vec<Vec<F>> = Vec::with_capacity(DEPTH);
        for l in 0..DEPTH {
            let mut h = vec![F::ZERO; n * WIDTH];
            match l {
                0 => self.dense(l, n, &[(pos, POSITION_FEATURES)], &mut h),
                SKIP_LAYER => self.dense(l, n, &[(&trunk[l - 1], WIDTH), (pos, POSITION_FEATURES)], &mut h),
                _ => self.dense(l, n, &[(&trunk[l - 1], WIDTH)], &mut h),
            }
            relu(&mut h);
            trunk.push(h);
        }
        let mut latent = vec![F::ZERO; n * LATENT];
        self.dense(HEAD, n, &[(&trunk[DEPTH - 1], WIDTH), (dir, DIRECTION_FEATURES)], &mut latent);
        for v in &mut latent {
            *v = v.tanh();
        }
        let mut output = vec![F::ZERO; n * self.k];
        self.dense(OUT, n, &[(&latent, LATENT)], &mut output);
        softmax_rows(&mut output, self.k);
        Trace {
            n,
            trunk,
            latent,
            output,
        }
    }

    pub fn forward(&self, x: &Features<F>) -> Trace<F> {
        self.forward_rows(x.n, &x.pos, &x.dir)
    }

    /// Outputs and latents only, computed chunk-parallel. Row results do not
    /// depend on the batch they are evaluated in.
    pub fn infer(&self, x: &Features<F>) -> Inference<F> {
        let parts: Vec<(Vec<F>, Vec<F>)> = x
            .pos
            .par_chunks(CHUNK * POSITION_FEATURES)
            .zip(x.dir.par_chunks(CHUNK * DIRECTION_FEATURES))
            .map(|(pos, dir)| {
                let t = self.forward_rows(pos.len() / POSITION_FEATURES, pos, dir);
                (t.output, t.latent)
            })
            .collect();
        let mut output = Vec::with_capacity(x.n * self.k);
        let mut latent = Vec::with_capacity(x.n * LATENT);
        for (o, l) in parts {
            output.extend(o);
            latent.extend(l);
        }
        Inference {
            n: x.n,
            k: self.k,
            output,
            latent,
        }
    }

    /// Backpropagates `grad_m = ∂L/∂output` through a forward trace. Writes the
    /// parameter gradient into `grad` when given; returns the gradients with
    /// respect to the position and direction features when `inputs` is set.
    pub fn backward(
        &self,
        x: &Features<F>,
        trace: &Trace<F>,
        grad_m: &[F],
        mut grad: Option<&mut [F]>,
        inputs: bool,
    ) -> Option<(Vec<F>, Vec<F>)> {
        let (n, k) = (trace.n, self.k);
        let mut dz = vec![F::ZERO; n * k];
        for ((d, m), g) in dz
            .chunks_exact_mut(k)
            .zip(trace.output.chunks_exact(k))
            .zip(grad_m.chunks_exact(k))
        {
            let mut dot = F::ZERO;
            for c in 0..k {
                dot += g[c] * m[c];
            }
            for c in 0..k {
                d[c] = m[c] * (g[c] - dot);
            }
        }
        let mut dlat = self.dense_backward(OUT, n, &[(&trace.latent, LATENT, true)], &dz, grad.as_deref_mut())
            [0]
            .take()
            .expect("latent gradient requested");
        for (d, &a) in dlat.iter_mut().zip(&trace.latent) {
            *d *= F::ONE - a * a;
        }
        let mut head = self.dense_backward(
            HEAD,
            n,
            &[(&trace.trunk[DEPTH - 1], WIDTH, true), (&x.dir, DIRECTION_FEATURES, inputs)],
            &dlat,
            grad.as_deref_mut(),
        );
        let ddir = head[1].take();
        let mut dh = head[0].take().expect("trunk gradient requested");
        let mut dpos: Option<Vec<F>> = None;
        let mut add_pos = |g: Option<Vec<F>>| {
            if let Some(g) = g {
                match dpos.as_mut() {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => dpos = Some(g),
                }
            }
        };
        for l in (0..DEPTH).rev() {
            for (d, &h) in dh.iter_mut().zip(&trace.trunk[l]) {
                *d = h.relu_mask(*d);
            }
            let mut res = match l {
                0 => self.dense_backward(l, n, &[(&x.pos, POSITION_FEATURES, inputs)], &dh, grad.as_deref_mut()),
                SKIP_LAYER => self.dense_backward(
                    l,
                    n,
                    &[(&trace.trunk[l - 1], WIDTH, true), (&x.pos, POSITION_FEATURES, inputs)],
                    &dh,
                    grad.as_deref_mut(),
                ),
                _ => self.dense_backward(l, n, &[(&trace.trunk[l - 1], WIDTH, true)], &dh, grad.as_deref_mut()),
            };
            if l == 0 {
                add_pos(res[0].take());
            } else {
                if l == SKIP_LAYER {
                    add_pos(res[1].take());
                }
                dh = res[0].take().expect("trunk gradient requested");
            }
        }
        inputs.then(|| (dpos.expect("position gradient"), ddir.expect("direction gradient")))
    }

    /// Loss `(1/N) Σᵢ ‖mᵢ − tᵢ‖²` and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &Features<F>, targets: &[F]) -> (f64, Vec<F>) {
        let trace = self.forward(x);
        let n = x.n as f64;
        let mut loss = 0.0;
        let scale = F::from_f64(2.0 / n);
        let grad_m: Vec<F> = trace
            .output
            .iter()
            .zip(targets)
            .map(|(&m, &t)| {
                let d = m - t;
                loss += d.to_f64() * d.to_f64();
                scale * d
            })
            .collect();
        let mut grad = vec![F::ZERO; self.data.len()];
        self.backward(x, &trace, &grad_m, Some(&mut grad), false);
        (loss / n, grad)
    }

    /// Per-sample loss gradients with respect to the viewpoint. `loss(i, m)`
    /// returns sample `i`'s loss and `∂loss/∂m`.
    pub fn input_gradients(
        &self,
        normalizer: &Normalizer,
        x: &Features<F>,
        loss: impl Fn(usize, &[f64]) -> (f64, Vec<f64>),
    ) -> Vec<InputGradient> {
        let trace = self.forward(x);
        let k = self.k;
        let mut grad_m = Vec::with_capacity(x.n * k);
        let mut results = Vec::with_capacity(x.n);
        for i in 0..x.n {
            let m: Vec<f64> = trace.output[i * k..(i + 1) * k].iter().map(|v| v.to_f64()).collect();
            let (l, g) = loss(i, &m);
            grad_m.extend(g.iter().map(|&v| F::from_f64(v)));
            results.push(InputGradient {
                m,
                loss: l,
                normalized: [0.0; 5],
                raw: [0.0; 5],
            });
        }
        let (dpos, ddir) = self
            .backward(x, &trace, &grad_m, None, true)
            .expect("input gradients requested");
        let scale = normalizer.input_scale();
        for (i, r) in results.iter_mut().enumerate() {
            let t = &x.normalized[i];
            for axis in 0..5 {
                let feats: &[F] = if axis < 3 {
                    &dpos[i * POSITION_FEATURES + axis * ENCODING_DIM..][..ENCODING_DIM]
                } else {
                    &ddir[i * DIRECTION_FEATURES + (axis - 3) * ENCODING_DIM..][..ENCODING_DIM]
                };
                let de = encode_derivative(t[axis]);
                let d: f64 = feats.iter().zip(de).map(|(g, e)| g.to_f64() * e).sum();
                r.normalized[axis] = d;
                r.raw[axis] = d * scale[axis];
            }
        }
        results
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub frequencies: usize,
    pub position_features: usize,
    pub direction_features: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            frequencies: FREQUENCIES,
            position_features: POSITION_FEATURES,
            direction_features: DIRECTION_FEATURES,
        }
    }
}

/// Everything needed to interpret the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub k: usize,
    pub components: Vec<String>,
    pub bins: BinSpec,
    pub normalizer: Normalizer,
    pub encoding: EncodingConfig,
    pub layers: Vec<[usize; 2]>,
    pub param_count: usize,
    /// Free-form training provenance (seed, epochs, sample counts, …).
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl ModelMeta {
    pub fn new(components: Vec<String>, bins: BinSpec, normalizer: Normalizer) -> Result<Self> {
        let k = components.len();
        if k < 2 {
            return Err(Error::invalid(format!("a model needs at least 2 outputs, got {k}")));
        }
        if bins.k() != k {
            return Err(Error::invalid(format!(
                "bins define {} components but {k} names were given",
                bins.k()
            )));
        }
        Ok(ModelMeta {
            k,
            components,
            bins,
            normalizer,
            encoding: EncodingConfig::default(),
            layers: layer_shapes(k),
            param_count: param_count(k),
            provenance: BTreeMap::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Checkpoint(msg));
        if self.k < 2 || self.components.len() != self.k || self.bins.k() != self.k {
            return bad(format!(
                "inconsistent output size: k = {}, {} names, {} bins",
                self.k,
                self.components.len(),
                self.bins.k()
            ));
        }
        if self.encoding != EncodingConfig::default() {
            return bad(format!("unsupported encoding {:?}", self.encoding));
        }
        if self.layers != layer_shapes(self.k) {
            return bad("layer shapes do not match the architecture".into());
        }
        if self.param_count != param_count(self.k) {
            return bad(format!(
                "header declares {} parameters, architecture has {}",
                self.param_count,
                param_count(self.k)
            ));
        }
        Ok(())
    }

    pub fn component_index(&self, name: &str) -> Option<usize> {
        self.components
            .iter()
            .position(|c| c == name)
            .or_else(|| name.strip_prefix("m_").and_then(|s| self.component_index(s)))
    }
}

/// A trained (or freshly initialized) field: metadata plus `f32` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub meta: ModelMeta,
    pub weights: Weights<f32>,
}

impl ModelParams {
    pub fn init(seed: u64, meta: ModelMeta) -> Self {
        let weights = Weights::init(meta.k, seed);
        ModelParams { meta, weights }
    }

    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.meta.normalizer
    }

    pub fn features(&self, vps: &[Viewpoint]) -> Result<Features<f32>> {
        Features::from_viewpoints(&self.meta.normalizer, vps)
    }

    pub fn forward(&self, vps: &[Viewpoint]) -> Result<Inference<f32>> {
        if vps.is_empty() {
            return Err(Error::invalid("empty viewpoint batch"));
        }
        Ok(self.weights.infer(&self.features(vps)?))
    }

    pub fn predict(&self, vps: &[Viewpoint]) -> Result<Vec<ThematicDistribution>> {
        Ok(self.forward(vps)?.distributions())
    }

    /// Mean squared error over the batch and its parameter gradient.
    pub fn backward_params(
        &self,
        vps: &[Viewpoint],
        targets: &[ThematicDistribution],
    ) -> Result<(f64, Vec<f32>)> {
        let x = self.features(vps)?;
        let t = flatten_targets(targets, self.k(), vps.len())?;
        Ok(self.weights.loss_and_grad(&x, &t))
    }

    pub fn backward_inputs(
        &self,
        vps: &[Viewpoint],
        loss: impl Fn(usize, &[f64]) -> (f64, Vec<f64>),
    ) -> Result<Vec<InputGradient>> {
        let x = self.features(vps)?;
        Ok(self.weights.input_gradients(&self.meta.normalizer, &x, loss))
    }
}

pub fn flatten_targets<F: Scalar>(
    targets: &[ThematicDistribution],
    k: usize,
    n: usize,
) -> Result<Vec<F>> {
    if targets.len() != n {
        return Err(Error::invalid(format!(
            "{} targets for {n} inputs",
            targets.len()
        )));
    }
    let mut out = Vec::with_capacity(n * k);
    for (i, t) in targets.iter().enumerate() {
        if t.len() != k {
            return Err(Error::invalid(format!(
                "target {i} has {} components, expected {k}",
                t.len()
            )));
        }
        out.extend(t.as_slice().iter().map(|&v| F::from_f64(v)));
    }
    Ok(out)
}
