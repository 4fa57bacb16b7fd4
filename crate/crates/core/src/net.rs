//! A small bias-free embedding network with two input branches.
//!
//! ```text
//! spectrogram (F x S, time-pooled) -> dense -> relu -> ... ┐
//!                                                          ├ concat -> dense -> normalize
//! spectrum (L)                     -> dense -> relu -> ... ┘
//! ```
//!
//! There are no additive biases, the activation is the (unbounded) rectifier
//! and the class centers live outside the network. With all weights at zero
//! every input maps to the zero vector, which the normalization rejects.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dsp::{mean_pool_time, ClipFeatures, SPECTRUM_LEN};
use crate::error::{Error, Result};
use crate::geometry::{normalize, UnitVector};

/// Layer widths of both branches and the embedding size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Frequency bins of the spectrogram input.
    pub spec_freq: usize,
    /// Time segments the spectrogram is mean-pooled to.
    pub spec_segments: usize,
    pub spectrum_len: usize,
    pub spec_hidden: Vec<usize>,
    pub spectrum_hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            spec_freq: 513,
            spec_segments: 8,
            spectrum_len: SPECTRUM_LEN,
            spec_hidden: vec![128, 128],
            spectrum_hidden: vec![128, 128],
            embed_dim: 256,
        }
    }
}

impl NetSpec {
    pub fn spec_input(&self) -> usize {
        self.spec_freq * self.spec_segments
    }

    fn validate(&self) -> Result<()> {
        let widths = [
            self.spec_freq,
            self.spec_segments,
            self.spectrum_len,
            self.embed_dim,
        ];
        if widths.iter().chain(&self.spec_hidden).chain(&self.spectrum_hidden).any(|w| *w == 0)
            || self.spec_hidden.is_empty()
            || self.spectrum_hidden.is_empty()
        {
            return Err(Error::InvalidParameter(
                "every layer width must be >= 1 and each branch needs a layer".into(),
            ));
        }
        Ok(())
    }

    /// `(out, in)` shape of every weight matrix, in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.spec_input();
        for &w in &self.spec_hidden {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        let mut fan_in = self.spectrum_len;
        for &w in &self.spectrum_hidden {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        let concat = self.spec_hidden.last().unwrap() + self.spectrum_hidden.last().unwrap();
        shapes.push((self.embed_dim, concat));
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i).sum()
    }
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

/// Weights of the embedding network, each `out x in`.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    spec: NetSpec,
    seed: u64,
    weights: Vec<Array2<f64>>,
    id: u64,
    generation: u64,
}

impl PartialEq for EmbeddingNet {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.seed == other.seed && self.weights == other.weights
    }
}

/// Shifts and scales `x` in place to zero mean and unit variance; a constant
/// row becomes all zeros.
///
/// Applied per clip. The log spectrum otherwise carries a large common
/// offset that dominates every embedding.
pub fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// A batch of network inputs, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub spec: Array2<f64>,
    pub spectrum: Array2<f64>,
}

impl NetInput {
    pub fn len(&self) -> usize {
        self.spec.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.nrows() == 0
    }

    /// Flattens clip features into one input row, pooling the spectrogram over
    /// time to `spec.spec_segments` segments. Each branch's row is then
    /// standardized to zero mean and unit variance, see [`standardize`].
    pub fn from_features(spec: &NetSpec, feats: &[&ClipFeatures]) -> Result<Self> {
        let mut a = Array2::zeros((feats.len(), spec.spec_input()));
        let mut b = Array2::zeros((feats.len(), spec.spectrum_len));
        for (i, f) in feats.iter().enumerate() {
            if f.spectrogram.n_freq() != spec.spec_freq || f.spectrum.len() != spec.spectrum_len {
                return Err(Error::Shape(format!(
                    "features {}x{} / {} do not match the network ({} bins / {})",
                    f.spectrogram.n_freq(),
                    f.spectrogram.n_time(),
                    f.spectrum.len(),
                    spec.spec_freq,
                    spec.spectrum_len
                )));
            }
            let pooled = mean_pool_time(&f.spectrogram, spec.spec_segments)?;
            a.row_mut(i)
                .iter_mut()
                .zip(pooled.values())
                .for_each(|(d, s)| *d = *s);
            b.row_mut(i)
                .iter_mut()
                .zip(&f.spectrum.0)
                .for_each(|(d, s)| *d = *s);
            standardize(a.row_mut(i).as_slice_mut().expect("standard layout"));
            standardize(b.row_mut(i).as_slice_mut().expect("standard layout"));
        }
        Ok(NetInput { spec: a, spectrum: b })
    }

    /// Rows `idx` of this batch, in order.
    pub fn select(&self, idx: &[usize]) -> NetInput {
        NetInput {
            spec: self.spec.select(Axis(0), idx),
            spectrum: self.spectrum.select(Axis(0), idx),
        }
    }
}

/// Activations retained by [`EmbeddingNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    generation: u64,
    input: NetInput,
    /// Post-activation outputs of every hidden layer, branch by branch.
    spec_acts: Vec<Array2<f64>>,
    spectrum_acts: Vec<Array2<f64>>,
    concat: Array2<f64>,
    /// Raw (pre-normalization) embeddings, one per row.
    pub raw: Array2<f64>,
}

impl ForwardCache {
    pub fn raw_rows(&self) -> Vec<Vec<f64>> {
        self.raw.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    /// Unit embeddings; fails on a zero raw embedding.
    pub fn embeddings(&self) -> Result<Vec<UnitVector>> {
        self.raw
            .rows()
            .into_iter()
            .map(|r| normalize(&r.to_vec()))
            .collect()
    }
}

/// Parameter gradients, one matrix per weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads(pub Vec<Array2<f64>>);

impl NetGrads {
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn relu(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

impl EmbeddingNet {
    /// He-initialized weights, `N(0, 2 / fan_in)`, deterministic in `seed`.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = spec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| {
                let normal = Normal::new(0.0, (2.0 / i as f64).sqrt()).expect("positive std");
                Array2::from_shape_simple_fn((o, i), || normal.sample(&mut rng))
            })
            .collect();
        Ok(Self::from_parts(spec, seed, weights))
    }

    fn from_parts(spec: NetSpec, seed: u64, weights: Vec<Array2<f64>>) -> Self {
        EmbeddingNet {
            spec,
            seed,
            weights,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    /// Mutable access for tests and checkpoints; invalidates existing caches.
    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        self.generation += 1;
        &mut self.weights
    }

    fn n_spec(&self) -> usize {
        self.spec.spec_hidden.len()
    }

    fn n_spectrum(&self) -> usize {
        self.spec.spectrum_hidden.len()
    }

    /// Runs a batch through the network, keeping activations for backward.
    pub fn forward(&self, input: &NetInput) -> Result<ForwardCache> {
        if input.spec.ncols() != self.spec.spec_input()
            || input.spectrum.ncols() != self.spec.spectrum_len
            || input.spec.nrows() != input.spectrum.nrows()
        {
            return Err(Error::Shape(format!(
                "input {}x{} / {}x{} does not match network {} / {}",
                input.spec.nrows(),
                input.spec.ncols(),
                input.spectrum.nrows(),
                input.spectrum.ncols(),
                self.spec.spec_input(),
                self.spec.spectrum_len
            )));
        }
        let branch = |x: ArrayView2<f64>, layers: &[Array2<f64>]| {
            let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
            for w in layers {
                let prev = acts.last().map(|a| a.view()).unwrap_or(x);
                acts.push(relu(prev.dot(&w.t())));
            }
            acts
        };
        let ns = self.n_spec();
        let spec_acts = branch(input.spec.view(), &self.weights[..ns]);
        let spectrum_acts = branch(
            input.spectrum.view(),
            &self.weights[ns..ns + self.n_spectrum()],
        );
        let concat = concatenate(
            Axis(1),
            &[
                spec_acts.last().unwrap().view(),
                spectrum_acts.last().unwrap().view(),
            ],
        )
        .expect("equal row counts");
        let raw = concat.dot(&self.weights.last().unwrap().t());
        check_finite(&raw, "embedding activations")?;
        Ok(ForwardCache {
            net_id: self.id,
            generation: self.generation,
            input: input.clone(),
            spec_acts,
            spectrum_acts,
            concat,
            raw,
        })
    }

    /// Unit embeddings of a batch.
    pub fn embed(&self, input: &NetInput) -> Result<Vec<UnitVector>> {
        self.forward(input)?.embeddings()
    }

    /// Parameter gradients for gradients taken with respect to the *unit*
    /// embeddings; applies the normalization Jacobian `(I - e e^T) / |z|`.
    pub fn backward(&self, cache: &ForwardCache, unit_grads: &Array2<f64>) -> Result<NetGrads> {
        let mut raw = unit_grads.clone();
        for (mut g, z) in raw.rows_mut().into_iter().zip(cache.raw.rows()) {
            let n = z.dot(&z).sqrt();
            if n <= crate::geometry::MIN_NORM {
                return Err(Error::DegenerateEmbedding(n));
            }
            let along = g.dot(&z) / n;
            g.zip_mut_with(&z, |gi, zi| *gi = (*gi - along * zi / n) / n);
        }
        self.backward_raw(cache, &raw)
    }

    /// Parameter gradients for gradients taken with respect to the *raw*
    /// embeddings, as returned in [`crate::losses::LossOutput`].
    pub fn backward_raw(&self, cache: &ForwardCache, raw_grads: &Array2<f64>) -> Result<NetGrads> {
        if cache.net_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache(
                "forward cache does not belong to the current weights".into(),
            ));
        }
        if raw_grads.dim() != cache.raw.dim() {
            return Err(Error::Shape("gradient batch does not match cache".into()));
        }
        let ns = self.n_spec();
        let nb = self.n_spectrum();
        let mut grads = vec![Array2::zeros((0, 0)); self.weights.len()];
        let proj = self.weights.last().unwrap();
        grads[ns + nb] = raw_grads.t().dot(&cache.concat);
        let d_concat = raw_grads.dot(proj);
        let split = cache.spec_acts.last().unwrap().ncols();

        let mut run_branch = |d_out: Array2<f64>,
                              acts: &[Array2<f64>],
                              input: &Array2<f64>,
                              offset: usize| {
            let mut delta = d_out;
            for l in (0..acts.len()).rev() {
                // relu'(pre) = 1 where the post-activation is positive
                delta.zip_mut_with(&acts[l], |d, a| {
                    if *a <= 0.0 {
                        *d = 0.0
                    }
                });
                let prev = if l == 0 { input } else { &acts[l - 1] };
                grads[offset + l] = delta.t().dot(prev);
                if l > 0 {
                    delta = delta.dot(&self.weights[offset + l]);
                }
            }
        };
        run_branch(
            d_concat.slice(s![.., ..split]).to_owned(),
            &cache.spec_acts,
            &cache.input.spec,
            0,
        );
        run_branch(
            d_concat.slice(s![.., split..]).to_owned(),
            &cache.spectrum_acts,
            &cache.input.spectrum,
            ns,
        );
        Ok(NetGrads(grads))
    }

    /// `w -= lr * (g + weight_decay * w)` for every weight matrix.
    pub fn sgd_step(&mut self, grads: &NetGrads, lr: f64, weight_decay: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.0) {
            if weight_decay != 0.0 {
                w.zip_mut_with(g, |wi, gi| *wi -= lr * (gi + weight_decay * *wi));
            } else {
                w.scaled_add(-lr, g);
            }
        }
        self.generation += 1;
    }
}

/// First and second moment estimates for Adam, one pair per weight matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-7;

    pub fn new(net: &EmbeddingNet) -> Self {
        let zeros: Vec<Array2<f64>> = net.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update; `weight_decay` adds `weight_decay * w`
    /// to the gradient.
    pub fn step(&mut self, net: &mut EmbeddingNet, grads: &NetGrads, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((w, g), (m, v)) in net
            .weights
            .iter_mut()
            .zip(&grads.0)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                let g = g + weight_decay * *w;
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
        }
        net.generation += 1;
    }
}

const CKPT_MAGIC: &[u8; 4] = b"MASN";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader<M> {
    spec: NetSpec,
    seed: u64,
    meta: M,
}

/// Writes `"MASN"`, version `u32`, a length-prefixed JSON header holding the
/// layer spec, seed and caller metadata, then every weight as little-endian
/// `f64` in layer order.
pub fn save_checkpoint<M: Serialize>(path: &Path, net: &EmbeddingNet, meta: &M) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        spec: net.spec.clone(),
        seed: net.seed,
        meta,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for m in &net.weights {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<(EmbeddingNet, M)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| bad("truncated"))?;
    if &head[..4] != CKPT_MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: CheckpointHeader<M> =
        serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
    header.spec.validate()?;
    let mut weights = Vec::new();
    for (o, i) in header.spec.layer_shapes() {
        let mut bytes = vec![0u8; o * i * 8];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated weights"))?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.push(Array2::from_shape_vec((o, i), vals).expect("shape matches"));
    }
    Ok((
        EmbeddingNet::from_parts(header.spec, header.seed, weights),
        header.meta,
    ))
}
