//! Mini-batch training with optional mixup, per-epoch compactness monitoring
//! and a runtime check of the gradient decomposition.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::ClipFeatures;
use crate::error::{Error, Result};
use crate::geometry::{init_centers, sq_dist, CenterBank};
use crate::losses::{
    adacos_scale_update, arcface_loss, class_compactness_loss, compactness_plus_cce_loss,
    single_center_grad, subcluster_adacos_loss, subcluster_scale_update, decomposed_grad,
    AngleBatch, LabelDist, LossKind, LossOutput, ScaleState,
};
use crate::net::{AdamState, EmbeddingNet, NetGrads, NetInput, NetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Training hyperparameters, readable from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Sub-clusters per class; only the sub-cluster loss uses more than one.
    pub subclusters: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub seed: u64,
    pub mixup: bool,
    pub weight_decay: f64,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    /// Fixed scale of the CCE term in the compactness + CCE loss.
    pub cce_scale: f64,
    /// Weight of that CCE term.
    pub cce_weight: f64,
    /// Time segments the spectrogram is pooled to before the first layer.
    pub spec_segments: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::SubClusterAdaCos,
            epochs: 10,
            batch_size: 64,
            subclusters: 16,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            seed: 0,
            mixup: true,
            weight_decay: 0.0,
            arcface_scale: 30.0,
            arcface_margin: 0.5,
            cce_scale: 16.0,
            cce_weight: 1.0,
            spec_segments: 8,
            hidden: 128,
            embed_dim: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 || (self.mixup && self.batch_size < 2) {
            return bad("batch_size must be >= 1, and >= 2 with mixup");
        }
        if self.subclusters < 1 || self.spec_segments < 1 || self.hidden < 1 || self.embed_dim < 1 {
            return bad("subclusters, spec_segments, hidden and embed_dim must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Network layout for inputs with `spec_freq` bins and a
    /// `spectrum_len`-bin spectrum: two hidden layers of `hidden` units per
    /// branch.
    pub fn net_spec(&self, spec_freq: usize, spectrum_len: usize) -> NetSpec {
        NetSpec {
            spec_freq,
            spec_segments: self.spec_segments,
            spectrum_len,
            spec_hidden: vec![self.hidden; 2],
            spectrum_hidden: vec![self.hidden; 2],
            embed_dim: self.embed_dim,
        }
    }

    fn n_sub(&self) -> usize {
        if self.loss.uses_subclusters() {
            self.subclusters
        } else {
            1
        }
    }

    fn initial_scale(&self, n_classes: usize) -> ScaleState {
        match self.loss {
            LossKind::AdaCos => ScaleState::adacos(n_classes),
            LossKind::SubClusterAdaCos => ScaleState::subcluster(n_classes, self.subclusters),
            LossKind::ArcFace => ScaleState::fixed(self.arcface_scale),
            LossKind::CompactnessCce => ScaleState::fixed(self.cce_scale),
            LossKind::Compactness => ScaleState::fixed(1.0),
        }
    }
}

/// Network inputs with one class id per row.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub input: NetInput,
    pub classes: Vec<usize>,
    pub n_classes: usize,
}

impl FeatureSet {
    pub fn new(input: NetInput, classes: Vec<usize>, n_classes: usize) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if classes.len() != input.len() {
            return Err(Error::Shape(format!(
                "{} class ids for {} inputs",
                classes.len(),
                input.len()
            )));
        }
        if let Some(c) = classes.iter().find(|c| **c >= n_classes) {
            return Err(Error::InvalidParameter(format!(
                "class id {c} out of range for {n_classes} classes"
            )));
        }
        Ok(FeatureSet {
            input,
            classes,
            n_classes,
        })
    }

    pub fn from_features(
        spec: &NetSpec,
        feats: &[&ClipFeatures],
        classes: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        Self::new(NetInput::from_features(spec, feats)?, classes, n_classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn labels(&self, idx: &[usize]) -> Result<Vec<LabelDist>> {
        idx.iter()
            .map(|&i| LabelDist::one_hot(self.n_classes, self.classes[i]))
            .collect()
    }
}

/// Losses recorded after one epoch (epoch 0 is before any update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub intra: f64,
    /// Absent with a single class.
    pub inter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<EpochRecord>,
}

impl LossTrace {
    /// CSV with header `epoch,loss,intra,inter`; an absent inter value is an
    /// empty field.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["epoch", "loss", "intra", "inter"]).map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.intra.to_string(),
                r.inter.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: EmbeddingNet,
    pub bank: CenterBank,
    /// Scale in effect after the last update.
    pub scale: ScaleState,
    pub trace: LossTrace,
}

/// Seed of the center bank, kept apart from the weight seed.
pub fn center_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_c3e7_e45b_a4c5
}

const SHUFFLE_STREAM: u64 = 1;
/// Rows per forward pass when embedding a whole set.
const EVAL_CHUNK: usize = 256;

fn rows_to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Loss and raw-embedding gradients of one batch at the given scale.
pub fn batch_loss(
    cfg: &TrainConfig,
    raw: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
    state: &ScaleState,
) -> Result<LossOutput> {
    match cfg.loss {
        LossKind::Compactness => class_compactness_loss(raw, labels, bank),
        LossKind::ArcFace => arcface_loss(raw, labels, bank, cfg.arcface_scale, cfg.arcface_margin),
        LossKind::AdaCos | LossKind::SubClusterAdaCos => {
            subcluster_adacos_loss(raw, labels, bank, state)
        }
        LossKind::CompactnessCce => {
            compactness_plus_cce_loss(raw, labels, bank, cfg.cce_scale, cfg.cce_weight)
        }
    }
}

fn update_scale(
    kind: LossKind,
    state: &ScaleState,
    raw: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
) -> Result<ScaleState> {
    match kind {
        LossKind::AdaCos => adacos_scale_update(state, &AngleBatch::new(raw, labels, bank)?),
        LossKind::SubClusterAdaCos => {
            subcluster_scale_update(state, &AngleBatch::new(raw, labels, bank)?)
        }
        _ => Ok(*state),
    }
}

/// Sattolo's algorithm: a uniformly random cyclic permutation, which has no
/// fixed points.
fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Mixes every sample of the batch with a partner drawn by a random
/// derangement, `lambda ~ U(0, 1)` per sample.
fn mixup_batch(
    input: &NetInput,
    labels: &[LabelDist],
    rng: &mut ChaCha8Rng,
) -> Result<(NetInput, Vec<LabelDist>)> {
    let n = input.len();
    let partner = derangement(n, rng);
    let mut out = input.clone();
    let mut mixed = Vec::with_capacity(n);
    for (i, &j) in partner.iter().enumerate() {
        let lambda: f64 = rng.random();
        for (a, b) in [(&mut out.spec, &input.spec), (&mut out.spectrum, &input.spectrum)] {
            let (xi, xj) = (b.row(i), b.row(j));
            a.row_mut(i)
                .iter_mut()
                .zip(xi.iter().zip(xj.iter()))
                .for_each(|(o, (p, q))| *o = lambda * p + (1.0 - lambda) * q);
        }
        let (_, l) = crate::losses::mixup(&[], &[], &labels[i], &labels[j], lambda)?;
        mixed.push(l);
    }
    Ok((out, mixed))
}

/// Raw embeddings of every row, computed in chunks.
pub fn embed_raw(net: &EmbeddingNet, input: &NetInput) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(input.len());
    let idx: Vec<usize> = (0..input.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(net.forward(&input.select(chunk))?.raw_rows());
    }
    Ok(out)
}

fn full_loss(
    cfg: &TrainConfig,
    raw: &[Vec<f64>],
    data: &FeatureSet,
    bank: &CenterBank,
    state: &ScaleState,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let labels = data.labels(&idx)?;
    batch_loss(cfg, raw, &labels, bank, state).map(|o| o.value)
}

/// Mean intra-class and inter-class compactness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    /// Mean over classes of the mean squared distance of a class's
    /// embeddings to their nearest center of that class.
    pub intra: f64,
    /// Mean over classes of the mean squared distance of a class's
    /// embeddings to every center of every other class.
    pub inter: Option<f64>,
}

/// Compactness of raw embeddings `raw` with classes `classes`.
pub fn compactness_of(raw: &[Vec<f64>], classes: &[usize], bank: &CenterBank) -> Result<Compactness> {
    let n = bank.n_classes();
    let mut intra = vec![0.0; n];
    let mut inter = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (z, &j) in raw.iter().zip(classes) {
        let e = crate::geometry::normalize(z)?;
        let own = bank
            .class_centers(j)
            .iter()
            .map(|c| sq_dist(&e, c))
            .fold(f64::INFINITY, f64::min);
        intra[j] += own;
        if n > 1 {
            let others: f64 = (0..n)
                .filter(|k| *k != j)
                .flat_map(|k| bank.class_centers(k))
                .map(|c| sq_dist(&e, c))
                .sum();
            inter[j] += others / ((n - 1) * bank.n_sub()) as f64;
        }
        count[j] += 1;
    }
    let present: Vec<usize> = (0..n).filter(|j| count[*j] > 0).collect();
    if present.is_empty() {
        return Err(Error::Empty("no embeddings to monitor".into()));
    }
    if present.len() < n {
        warn!("{} of {n} classes have no samples and are skipped", n - present.len());
    }
    let mean = |v: &[f64]| {
        present.iter().map(|&j| v[j] / count[j] as f64).sum::<f64>() / present.len() as f64
    };
    Ok(Compactness {
        intra: mean(&intra),
        inter: (n > 1).then(|| mean(&inter)),
    })
}

pub fn monitor_losses(net: &EmbeddingNet, bank: &CenterBank, data: &FeatureSet) -> Result<Compactness> {
    compactness_of(&embed_raw(net, &data.input)?, &data.classes, bank)
}

fn record(
    epoch: usize,
    cfg: &TrainConfig,
    net: &EmbeddingNet,
    bank: &CenterBank,
    state: &ScaleState,
    data: &FeatureSet,
) -> Result<EpochRecord> {
    let raw = embed_raw(net, &data.input)?;
    let loss = full_loss(cfg, &raw, data, bank, state)?;
    let c = compactness_of(&raw, &data.classes, bank)?;
    debug!("epoch {epoch}: loss {loss:.6} intra {:.6} inter {:?}", c.intra, c.inter);
    Ok(EpochRecord {
        epoch,
        loss,
        intra: c.intra,
        inter: c.inter,
    })
}

/// Trains a freshly initialized network on `data`.
///
/// The adaptive scales are updated from every batch but the first, before
/// that batch's loss is evaluated. Everything is deterministic in
/// `cfg.seed`.
pub fn train(data: &FeatureSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let spec_cols = data.input.spec.ncols();
    if spec_cols % cfg.spec_segments != 0 {
        return Err(Error::Shape(format!(
            "{spec_cols} spectrogram inputs do not split into {} segments",
            cfg.spec_segments
        )));
    }
    let spec = cfg.net_spec(spec_cols / cfg.spec_segments, data.input.spectrum.ncols());
    let mut net = EmbeddingNet::init(spec, cfg.seed)?;
    let bank = init_centers(data.n_classes, cfg.n_sub(), cfg.embed_dim, center_seed(cfg.seed))?;
    let mut state = cfg.initial_scale(data.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut trace = LossTrace::default();
    trace.records.push(record(0, cfg, &net, &bank, &state, data)?);
    let mut adam = AdamState::new(&net);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let input = data.input.select(batch);
            let labels = data.labels(batch)?;
            let (input, labels) = if cfg.mixup && batch.len() >= 2 {
                mixup_batch(&input, &labels, &mut rng)?
            } else {
                (input, labels)
            };
            let cache = net.forward(&input)?;
            let raw = cache.raw_rows();
            if step > 0 {
                state = update_scale(cfg.loss, &state, &raw, &labels, &bank)?;
            }
            let out = batch_loss(cfg, &raw, &labels, &bank, &state)?;
            if !out.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} loss {} at epoch {epoch}, step {step} (scale {})",
                    cfg.loss, out.value, state.s
                )));
            }
            let grads = net.backward_raw(&cache, &rows_to_array(&out.emb_grads))?;
            match cfg.optimizer {
                Optimizer::Sgd => net.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay),
                Optimizer::Adam => adam.step(&mut net, &grads, cfg.learning_rate, cfg.weight_decay),
            }
            step += 1;
        }
        trace.records.push(record(epoch, cfg, &net, &bank, &state, data)?);
    }
    Ok(TrainOutput {
        net,
        bank,
        scale: state,
        trace,
    })
}

/// `max |a - b| / max(max |a|, max |b|)` over all parameters; zero when both
/// are identically zero.
pub fn relative_discrepancy(a: &NetGrads, b: &NetGrads) -> f64 {
    let mut diff: f64 = 0.0;
    for (x, y) in a.0.iter().zip(&b.0) {
        for (p, q) in x.iter().zip(y.iter()) {
            diff = diff.max((p - q).abs());
        }
    }
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest relative discrepancies between gradient forms of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Direct gradient against the weighted squared-distance decomposition.
    pub decomposition: f64,
    /// Direct gradient against the single-center form; only with one center
    /// per class.
    pub single_center: Option<f64>,
}

impl GradientCheck {
    pub fn worst(&self) -> f64 {
        self.decomposition.max(self.single_center.unwrap_or(0.0))
    }
}

/// Compares the parameter gradient of the sub-cluster loss with the same
/// gradient assembled from weighted squared-distance gradients, both pushed
/// through the same backward pass. With one center per class the
/// single-center form is checked as well.
pub fn verify_decomposition(
    net: &EmbeddingNet,
    bank: &CenterBank,
    state: &ScaleState,
    input: &NetInput,
    labels: &[LabelDist],
) -> Result<GradientCheck> {
    let cache = net.forward(input)?;
    let raw = cache.raw_rows();
    let direct = subcluster_adacos_loss(&raw, labels, bank, state)?;
    let direct = net.backward_raw(&cache, &rows_to_array(&direct.emb_grads))?;
    let split = decomposed_grad(&raw, labels, bank, state)?.total();
    let split = net.backward_raw(&cache, &rows_to_array(&split))?;
    let single_center = if bank.n_sub() == 1 {
        let single = single_center_grad(&raw, labels, bank, state.s)?;
        let single = net.backward_raw(&cache, &rows_to_array(&single))?;
        Some(relative_discrepancy(&direct, &single))
    } else {
        None
    };
    Ok(GradientCheck {
        decomposition: relative_discrepancy(&direct, &split),
        single_center,
    })
}

/// Mixes a batch the way training does, for checks that need mixed labels.
pub fn mixed_batch(
    input: &NetInput,
    labels: &[LabelDist],
    seed: u64,
) -> Result<(NetInput, Vec<LabelDist>)> {
    if input.len() < 2 {
        return Err(Error::InvalidParameter("mixup needs at least two samples".into()));
    }
    mixup_batch(input, labels, &mut ChaCha8Rng::seed_from_u64(seed))
}
