//! Losses on unit-normalized embeddings and their analytic gradients.
//!
//! Every loss takes *raw* (pre-normalization) embeddings, normalizes them
//! internally and returns gradients with respect to the raw vectors, i.e. the
//! normalization Jacobian `(I - e e^T) / |z|` is already applied. A caller that
//! feeds unit vectors gets `|z| = 1` and only the tangent-space projection.
//!
//! The cosine-softmax losses share one evaluation kernel
//! ([`subcluster_adacos_loss`] with `n_sub = 1` is the AdaCos loss; with a
//! fixed scale it is the plain cosine-softmax CCE).

use std::f64::consts::{FRAC_PI_4, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_margin, cos_margin_of, dot, normalize, CenterBank, UnitVector};

/// Replacement for a non-positive or non-finite adaptive scale.
///
/// `sqrt(2) ln(N M - 1)` is zero for two centers and undefined for one, and a
/// batch with `B_avg < 1` yields a negative recursion value.
pub const MIN_SCALE: f64 = 1.0;

/// Per-sample class weights summing to one, with at most two nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDist(Vec<f64>);

impl LabelDist {
    pub fn one_hot(n_classes: usize, class: usize) -> Result<Self> {
        if class >= n_classes {
            return Err(Error::InvalidParameter(format!(
                "class {class} out of range for {n_classes} classes"
            )));
        }
        let mut w = vec![0.0; n_classes];
        w[class] = 1.0;
        Ok(LabelDist(w))
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("label weights must be >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "label weights sum to {sum}"
            )));
        }
        if weights.iter().filter(|w| **w > 0.0).count() > 2 {
            return Err(Error::InvalidParameter(
                "at most two classes may carry weight".into(),
            ));
        }
        Ok(LabelDist(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }

    /// The class holding the largest weight (ties resolve to the lower index).
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (j, w) in self.0.iter().enumerate() {
            if *w > self.0[best] {
                best = j;
            }
        }
        best
    }

    fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().copied().enumerate().filter(|(_, w)| *w > 0.0)
    }
}

/// Convex combination `lambda * a + (1 - lambda) * b` of two samples and their labels.
pub fn mixup(
    a: &[f64],
    b: &[f64],
    la: &LabelDist,
    lb: &LabelDist,
    lambda: f64,
) -> Result<(Vec<f64>, LabelDist)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "mixing coefficient {lambda} outside [0, 1]"
        )));
    }
    if a.len() != b.len() || la.n_classes() != lb.n_classes() {
        return Err(Error::Shape("mixup operands differ in shape".into()));
    }
    let x = a
        .iter()
        .zip(b)
        .map(|(p, q)| lambda * p + (1.0 - lambda) * q)
        .collect();
    let w: Vec<f64> = la
        .0
        .iter()
        .zip(&lb.0)
        .map(|(p, q)| lambda * p + (1.0 - lambda) * q)
        .collect();
    // Renormalize away the last ulp so the sum invariant is exact.
    let sum: f64 = w.iter().sum();
    let w = w.into_iter().map(|v| v / sum).collect();
    Ok((x, LabelDist(w)))
}

/// A loss value together with per-sample gradients with respect to the raw
/// (pre-normalization) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub emb_grads: Vec<Vec<f64>>,
}

/// The training losses selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "compactness")]
    Compactness,
    #[serde(rename = "arcface")]
    ArcFace,
    #[serde(rename = "adacos")]
    AdaCos,
    #[serde(rename = "sc-adacos")]
    SubClusterAdaCos,
    #[serde(rename = "compactness-cce")]
    CompactnessCce,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Compactness,
        LossKind::ArcFace,
        LossKind::AdaCos,
        LossKind::SubClusterAdaCos,
        LossKind::CompactnessCce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Compactness => "compactness",
            LossKind::ArcFace => "arcface",
            LossKind::AdaCos => "adacos",
            LossKind::SubClusterAdaCos => "sc-adacos",
            LossKind::CompactnessCce => "compactness-cce",
        }
    }

    /// Only the sub-cluster loss uses more than one center per class.
    pub fn uses_subclusters(self) -> bool {
        self == LossKind::SubClusterAdaCos
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown loss '{s}'")))
    }
}

/// Unit embeddings plus the norms needed to back-propagate through the
/// normalization layer.
struct Normalized {
    units: Vec<UnitVector>,
    norms: Vec<f64>,
}

impl Normalized {
    fn new(raw: &[Vec<f64>]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("embedding batch".into()));
        }
        let dim = raw[0].len();
        let mut units = Vec::with_capacity(raw.len());
        let mut norms = Vec::with_capacity(raw.len());
        for z in raw {
            if z.len() != dim {
                return Err(Error::Shape("ragged embedding batch".into()));
            }
            norms.push(dot(z, z).sqrt());
            units.push(normalize(z)?);
        }
        Ok(Normalized { units, norms })
    }

    fn len(&self) -> usize {
        self.units.len()
    }
}

/// Applies the normalization Jacobian `(I - e e^T) / |z|` to a gradient taken
/// with respect to the unit embedding `e`.
pub fn project_to_raw(unit: &[f64], raw_norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let along = dot(unit, grad_unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, e)| (g - along * e) / raw_norm)
        .collect()
}

fn check_labels(labels: &[LabelDist], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    if labels.iter().any(|l| l.n_classes() != classes) {
        return Err(Error::Shape(format!(
            "label dimension differs from {classes} classes"
        )));
    }
    Ok(())
}

fn check_dim(units: &Normalized, bank: &CenterBank) -> Result<()> {
    if units.units[0].dim() != bank.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs center dim {}",
            units.units[0].dim(),
            bank.dim()
        )));
    }
    Ok(())
}

/// Compactness loss against a single center: `mean |e - c|^2`.
pub fn compactness_loss(embs: &[Vec<f64>], center: &UnitVector) -> Result<LossOutput> {
    let norm = Normalized::new(embs)?;
    if norm.units[0].dim() != center.dim() {
        return Err(Error::Shape("embedding and center dims differ".into()));
    }
    let scale = 1.0 / norm.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(norm.len());
    for (e, r) in norm.units.iter().zip(&norm.norms) {
        let diff: Vec<f64> = e
            .as_slice()
            .iter()
            .zip(center.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        value += dot(&diff, &diff) * scale;
        let g: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
        grads.push(project_to_raw(e.as_slice(), *r, &g));
    }
    Ok(LossOutput {
        value,
        emb_grads: grads,
    })
}

/// Mean over classes of the per-class compactness loss.
///
/// Each sample contributes `l_j(x) |e - c_j|^2` to class `j`, and each class
/// term is normalized by its total label weight. With one-hot labels this is
/// the plain mean of the per-class losses. Classes without weight in the
/// batch are skipped. Uses the first center of every class.
pub fn class_compactness_loss(
    embs: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
) -> Result<LossOutput> {
    let norm = Normalized::new(embs)?;
    check_dim(&norm, bank)?;
    check_labels(labels, norm.len(), bank.n_classes())?;
    Ok(class_compactness(&norm, labels, bank))
}

fn class_compactness(norm: &Normalized, labels: &[LabelDist], bank: &CenterBank) -> LossOutput {
    let n = bank.n_classes();
    let mut mass = vec![0.0; n];
    for l in labels {
        for (j, w) in l.nonzero() {
            mass[j] += w;
        }
    }
    let active = mass.iter().filter(|m| **m > 0.0).count() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(norm.len());
    for ((e, r), l) in norm.units.iter().zip(&norm.norms).zip(labels) {
        let mut g = vec![0.0; e.dim()];
        for (j, w) in l.nonzero() {
            let c = bank.center(j, 0);
            let coef = w / (mass[j] * active);
            let mut d2 = 0.0;
            for ((gi, a), b) in g.iter_mut().zip(e.as_slice()).zip(c.as_slice()) {
                let d = a - b;
                d2 += d * d;
                *gi += 2.0 * coef * d;
            }
            value += coef * d2;
        }
        grads.push(project_to_raw(e.as_slice(), *r, &g));
    }
    LossOutput {
        value,
        emb_grads: grads,
    }
}

/// Per-sample softmax bookkeeping over all `N * M` centers.
struct SoftmaxTerms {
    /// `P(c)` over all centers, class-major.
    p_all: Vec<f64>,
    /// `P(c | c in C_j)` within each class.
    p_within: Vec<f64>,
    /// `log softmax_j` for every class.
    log_class: Vec<f64>,
}

fn softmax_terms(e: &UnitVector, bank: &CenterBank, s: f64) -> Result<SoftmaxTerms> {
    let m = bank.n_sub();
    let logits: Vec<f64> = bank
        .all()
        .iter()
        .map(|c| s * dot(e.as_slice(), c.as_slice()))
        .collect();
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let class_sums: Vec<f64> = ex.chunks(m).map(|ch| ch.iter().sum()).collect();
    let total: f64 = class_sums.iter().sum();
    let log_total = total.ln();
    let p_all = ex.iter().map(|v| v / total).collect();
    let p_within = ex
        .chunks(m)
        .zip(&class_sums)
        .flat_map(|(ch, s)| ch.iter().map(move |v| v / s))
        .collect();
    let log_class = class_sums.iter().map(|s| s.ln() - log_total).collect();
    Ok(SoftmaxTerms {
        p_all,
        p_within,
        log_class,
    })
}

fn cosine_softmax_ce(
    norm: &Normalized,
    labels: &[LabelDist],
    bank: &CenterBank,
    s: f64,
) -> Result<LossOutput> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidParameter(format!("scale {s} must be > 0")));
    }
    let b = norm.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(norm.len());
    for ((e, r), l) in norm.units.iter().zip(&norm.norms).zip(labels) {
        let t = softmax_terms(e, bank, s)?;
        let mut loss_x = 0.0;
        // dL/de = (s / B) sum_c [ P(c) - l_j(c) P(c|C_j(c)) ] c
        let mut coef = t.p_all.clone();
        for (j, w) in l.nonzero() {
            loss_x -= w * t.log_class[j];
            let base = j * bank.n_sub();
            for k in 0..bank.n_sub() {
                coef[base + k] -= w * t.p_within[base + k];
            }
        }
        let mut g = vec![0.0; e.dim()];
        for (c, a) in bank.all().iter().zip(&coef) {
            if *a != 0.0 {
                axpy(&mut g, s * a / b, c.as_slice());
            }
        }
        value += loss_x / b;
        grads.push(project_to_raw(e.as_slice(), *r, &g));
    }
    Ok(LossOutput {
        value: value.max(0.0),
        emb_grads: grads,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// ArcFace: cosine softmax with the additive angular margin `m * l_j(x)`
/// applied to every class carrying label weight.
pub fn arcface_loss(
    embs: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
    s: f64,
    m: f64,
) -> Result<LossOutput> {
    if bank.n_sub() != 1 {
        return Err(Error::InvalidParameter(
            "ArcFace uses one center per class".into(),
        ));
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidParameter(format!("scale {s} must be > 0")));
    }
    check_margin(m)?;
    let norm = Normalized::new(embs)?;
    check_dim(&norm, bank)?;
    check_labels(labels, norm.len(), bank.n_classes())?;

    let b = norm.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(norm.len());
    for ((e, r), l) in norm.units.iter().zip(&norm.norms).zip(labels) {
        let w = l.weights();
        let mut logits = Vec::with_capacity(w.len());
        let mut dlogit_dcos = Vec::with_capacity(w.len());
        for (j, c) in bank.all().iter().enumerate() {
            let cos = dot(e.as_slice(), c.as_slice()).clamp(-1.0, 1.0);
            let mj = m * w[j];
            logits.push(s * cos_margin_of(cos, mj));
            dlogit_dcos.push(s * margin_derivative(cos, mj));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = ex.iter().sum();
        let log_total = total.ln();
        let mut g = vec![0.0; e.dim()];
        for (j, c) in bank.all().iter().enumerate() {
            let p = ex[j] / total;
            if w[j] > 0.0 {
                value -= w[j] * ((logits[j] - max) - log_total) / b;
            }
            axpy(&mut g, (p - w[j]) * dlogit_dcos[j] / b, c.as_slice());
        }
        grads.push(project_to_raw(e.as_slice(), *r, &g));
    }
    Ok(LossOutput {
        value: value.max(0.0),
        emb_grads: grads,
    })
}

/// `d/dcos cos(arccos(cos) + m)`.
fn margin_derivative(cos: f64, m: f64) -> f64 {
    if m == 0.0 {
        return 1.0;
    }
    let theta = cos.acos();
    if theta + m >= PI {
        return 0.0;
    }
    let sin_theta = (1.0 - cos * cos).max(0.0).sqrt().max(1e-12);
    (theta + m).sin() / sin_theta
}

/// State of the dynamically adaptive scale parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleState {
    pub s: f64,
    pub step: u64,
    pub last_theta_med: Option<f64>,
    pub last_b_avg: Option<f64>,
    pub last_f_max: Option<f64>,
}

impl ScaleState {
    /// `s~(0) = sqrt(2) ln(N - 1)`, or [`MIN_SCALE`] when that is not positive.
    pub fn adacos(n_classes: usize) -> Self {
        Self::initial(n_classes)
    }

    /// `s^(0) = sqrt(2) ln(N M - 1)`, or [`MIN_SCALE`] when that is not positive.
    pub fn subcluster(n_classes: usize, n_sub: usize) -> Self {
        Self::initial(n_classes * n_sub)
    }

    /// A constant scale that is never updated by the trainer.
    pub fn fixed(s: f64) -> Self {
        ScaleState {
            s,
            step: 0,
            last_theta_med: None,
            last_b_avg: None,
            last_f_max: None,
        }
    }

    fn initial(n_centers: usize) -> Self {
        Self::fixed(initial_scale(n_centers))
    }
}

/// `sqrt(2) ln(n_centers - 1)`, or [`MIN_SCALE`] when that is not positive.
pub fn initial_scale(n_centers: usize) -> f64 {
    positive_scale(SQRT_2 * (n_centers as f64 - 1.0).ln())
}

fn positive_scale(s: f64) -> f64 {
    if s.is_finite() && s > 0.0 {
        s
    } else {
        MIN_SCALE
    }
}

/// Batch statistics needed by the scale recursions: cosines of every sample to
/// every center and the sample labels.
#[derive(Debug, Clone)]
pub struct AngleBatch {
    /// `cos[x][j * M + k]`.
    cos: Vec<Vec<f64>>,
    labels: Vec<LabelDist>,
    n_sub: usize,
}

impl AngleBatch {
    pub fn new(embs: &[Vec<f64>], labels: &[LabelDist], bank: &CenterBank) -> Result<Self> {
        let norm = Normalized::new(embs)?;
        check_dim(&norm, bank)?;
        check_labels(labels, norm.len(), bank.n_classes())?;
        let cos = norm
            .units
            .iter()
            .map(|e| {
                bank.all()
                    .iter()
                    .map(|c| dot(e.as_slice(), c.as_slice()).clamp(-1.0, 1.0))
                    .collect()
            })
            .collect();
        Ok(AngleBatch {
            cos,
            labels: labels.to_vec(),
            n_sub: bank.n_sub(),
        })
    }

    /// Builds a batch from explicit cosines (`cos[x][j * n_sub + k]`).
    pub fn from_cosines(cos: Vec<Vec<f64>>, labels: Vec<LabelDist>, n_sub: usize) -> Result<Self> {
        if cos.is_empty() || cos.len() != labels.len() || n_sub == 0 {
            return Err(Error::Shape("cosine batch".into()));
        }
        for (row, l) in cos.iter().zip(&labels) {
            if row.len() != l.n_classes() * n_sub {
                return Err(Error::Shape("cosine row length".into()));
            }
        }
        Ok(AngleBatch { cos, labels, n_sub })
    }

    pub fn len(&self) -> usize {
        self.cos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    /// Angle of sample `x` to class `j`: the smallest angle to any of the
    /// class's sub-cluster centers.
    fn class_angle(&self, x: usize, j: usize) -> f64 {
        let row = &self.cos[x][j * self.n_sub..(j + 1) * self.n_sub];
        row.iter().cloned().fold(-1.0, f64::max).acos()
    }

    /// Label-weighted target angle; for a mixed sample this is
    /// `lambda * theta_1 + (1 - lambda) * theta_2`.
    fn target_angle(&self, x: usize) -> f64 {
        self.labels[x]
            .nonzero()
            .map(|(j, w)| w * self.class_angle(x, j))
            .sum()
    }

    /// Lower median of the per-sample target angles.
    pub fn median_target_angle(&self) -> f64 {
        let mut a: Vec<f64> = (0..self.len()).map(|x| self.target_angle(x)).collect();
        a.sort_by(f64::total_cmp);
        a[(a.len() - 1) / 2]
    }
}

fn next_scale(numer: f64, theta_med: f64) -> f64 {
    positive_scale(numer / theta_med.min(FRAC_PI_4).cos())
}

/// One step of the AdaCos scale recursion,
/// `s~(t) = ln B_avg / cos(min(pi/4, theta_med))`.
///
/// `B_avg` averages, over the batch, the summed `exp(s~(t-1) cos)` of every
/// class whose label weight is not exactly one (the non-target classes for
/// one-hot labels). Cosines are taken to the nearest sub-cluster center.
pub fn adacos_scale_update(state: &ScaleState, batch: &AngleBatch) -> Result<ScaleState> {
    if batch.is_empty() {
        return Err(Error::Empty("scale batch".into()));
    }
    let mut b_avg = 0.0;
    for x in 0..batch.len() {
        let l = batch.labels[x].weights();
        for (j, w) in l.iter().enumerate() {
            if *w != 1.0 {
                b_avg += (state.s * batch.class_angle(x, j).cos()).exp();
            }
        }
    }
    b_avg /= batch.len() as f64;
    let theta_med = batch.median_target_angle();
    Ok(ScaleState {
        s: next_scale(b_avg.ln(), theta_med),
        step: state.step + 1,
        last_theta_med: Some(theta_med),
        last_b_avg: Some(b_avg),
        last_f_max: None,
    })
}

/// One step of the sub-cluster AdaCos recursion,
/// `s^(t) = (f_max + ln B^_avg) / cos(min(pi/4, theta_med))`.
///
/// `B^_avg` sums `exp(s^(t-1) cos - f_max)` over all classes and all
/// sub-clusters, the target class included.
pub fn subcluster_scale_update(state: &ScaleState, batch: &AngleBatch) -> Result<ScaleState> {
    if batch.is_empty() {
        return Err(Error::Empty("scale batch".into()));
    }
    let f_max = batch
        .cos
        .iter()
        .flatten()
        .map(|c| state.s * c)
        .fold(f64::NEG_INFINITY, f64::max);
    let b_avg = batch
        .cos
        .iter()
        .flatten()
        .map(|c| (state.s * c - f_max).exp())
        .sum::<f64>()
        / batch.len() as f64;
    let theta_med = batch.median_target_angle();
    Ok(ScaleState {
        s: next_scale(f_max + b_avg.ln(), theta_med),
        step: state.step + 1,
        last_theta_med: Some(theta_med),
        last_b_avg: Some(b_avg),
        last_f_max: Some(f_max),
    })
}

/// Sub-cluster AdaCos loss at the (frozen) scale `state.s`.
///
/// `-mean_x sum_j l_j(x) log( sum_{c in C_j} exp(s cos(e, c)) / sum_c exp(s cos(e, c)) )`
///
/// With one sub-cluster per class this is the AdaCos loss.
pub fn subcluster_adacos_loss(
    embs: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
    state: &ScaleState,
) -> Result<LossOutput> {
    let norm = Normalized::new(embs)?;
    check_dim(&norm, bank)?;
    check_labels(labels, norm.len(), bank.n_classes())?;
    cosine_softmax_ce(&norm, labels, bank, state.s)
}

/// Class probabilities `softmax_j` of the summed sub-cluster softmax.
pub fn class_probabilities(emb: &[f64], bank: &CenterBank, s: f64) -> Result<Vec<f64>> {
    let e = normalize(emb)?;
    if e.dim() != bank.dim() {
        return Err(Error::Shape("embedding and center dims differ".into()));
    }
    Ok(softmax_terms(&e, bank, s)?
        .log_class
        .iter()
        .map(|l| l.exp())
        .collect())
}

/// Compactness of every class against its center plus `alpha` times a
/// cosine-softmax CCE at the fixed scale `s_fixed`. One center per class.
pub fn compactness_plus_cce_loss(
    embs: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
    s_fixed: f64,
    alpha: f64,
) -> Result<LossOutput> {
    if bank.n_sub() != 1 {
        return Err(Error::InvalidParameter(
            "compactness + CCE uses one center per class".into(),
        ));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("weight {alpha} must be >= 0")));
    }
    let norm = Normalized::new(embs)?;
    check_dim(&norm, bank)?;
    check_labels(labels, norm.len(), bank.n_classes())?;
    let mut out = class_compactness(&norm, labels, bank);
    if alpha > 0.0 {
        let cce = cosine_softmax_ce(&norm, labels, bank, s_fixed)?;
        out.value += alpha * cce.value;
        for (g, h) in out.emb_grads.iter_mut().zip(&cce.emb_grads) {
            axpy(g, alpha, h);
        }
    }
    Ok(out)
}

/// The sub-cluster AdaCos gradient written as intra-class compactness
/// gradients minus inter-class compactness gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedGrad {
    /// `(s/2) sum_j l_j sum_{c in C_j} P(c | C_j) d|e - c|^2` per sample.
    pub intra: Vec<Vec<f64>>,
    /// `-(s/2) sum_c P(c) d|e - c|^2` per sample.
    pub inter: Vec<Vec<f64>>,
}

impl DecomposedGrad {
    /// `intra + inter`, the full loss gradient.
    pub fn total(&self) -> Vec<Vec<f64>> {
        self.intra
            .iter()
            .zip(&self.inter)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect()
    }
}

/// Gradient of [`subcluster_adacos_loss`] assembled from weighted
/// squared-distance gradients `d|e - c|^2 / de = 2 (e - c)`, never from the
/// cosine-softmax derivative.
///
/// Both parts are routed through the normalization Jacobian.
pub fn decomposed_grad(
    embs: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
    state: &ScaleState,
) -> Result<DecomposedGrad> {
    let norm = Normalized::new(embs)?;
    check_dim(&norm, bank)?;
    check_labels(labels, norm.len(), bank.n_classes())?;
    let s = state.s;
    let b = norm.len() as f64;
    let mut intra = Vec::with_capacity(norm.len());
    let mut inter = Vec::with_capacity(norm.len());
    for ((e, r), l) in norm.units.iter().zip(&norm.norms).zip(labels) {
        let t = softmax_terms(e, bank, s)?;
        let mut gi = vec![0.0; e.dim()];
        let mut go = vec![0.0; e.dim()];
        for (j, w) in l.nonzero() {
            for (k, c) in bank.class_centers(j).iter().enumerate() {
                let p = t.p_within[j * bank.n_sub() + k];
                add_sq_dist_grad(&mut gi, 0.5 * s * w * p / b, e, c);
            }
        }
        for (c, p) in bank.all().iter().zip(&t.p_all) {
            add_sq_dist_grad(&mut go, -0.5 * s * p / b, e, c);
        }
        intra.push(project_to_raw(e.as_slice(), *r, &gi));
        inter.push(project_to_raw(e.as_slice(), *r, &go));
    }
    Ok(DecomposedGrad { intra, inter })
}

/// `g += a * d|e - c|^2 / de`.
fn add_sq_dist_grad(g: &mut [f64], a: f64, e: &UnitVector, c: &UnitVector) {
    for ((gi, ei), ci) in g.iter_mut().zip(e.as_slice()).zip(c.as_slice()) {
        *gi += a * 2.0 * (ei - ci);
    }
}

/// Single-center form of the same identity:
/// `(s/2) sum_j l_j sum_k softmax_k (d|e - c_j|^2 - d|e - c_k|^2)` per sample.
pub fn single_center_grad(
    embs: &[Vec<f64>],
    labels: &[LabelDist],
    bank: &CenterBank,
    s: f64,
) -> Result<Vec<Vec<f64>>> {
    if bank.n_sub() != 1 {
        return Err(Error::InvalidParameter(
            "single-center form needs one center per class".into(),
        ));
    }
    let norm = Normalized::new(embs)?;
    check_dim(&norm, bank)?;
    check_labels(labels, norm.len(), bank.n_classes())?;
    let b = norm.len() as f64;
    let mut out = Vec::with_capacity(norm.len());
    for ((e, r), l) in norm.units.iter().zip(&norm.norms).zip(labels) {
        let t = softmax_terms(e, bank, s)?;
        let mut g = vec![0.0; e.dim()];
        for (j, w) in l.nonzero() {
            let cj = bank.center(j, 0);
            for (k, ck) in bank.all().iter().enumerate() {
                let a = 0.5 * s * w * t.p_all[k] / b;
                add_sq_dist_grad(&mut g, a, e, cj);
                add_sq_dist_grad(&mut g, -a, e, ck);
            }
        }
        out.push(project_to_raw(e.as_slice(), *r, &g));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::init_centers;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn uv(v: &[f64]) -> UnitVector {
        normalize(v).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn compactness_examples() {
        let c = uv(&[1.0, 0.0]);
        assert_eq!(compactness_loss(&[vec![1.0, 0.0]], &c).unwrap().value, 0.0);
        assert_eq!(compactness_loss(&[vec![0.0, 1.0]], &c).unwrap().value, 2.0);
        let two = compactness_loss(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &c).unwrap();
        assert_eq!(two.value, 2.0);
        assert!(compactness_loss(&[], &c).is_err());
    }

    #[test]
    fn compactness_gradient_of_unit_input_is_tangent() {
        let c = uv(&[0.3, -0.2, 0.9]);
        let e = uv(&[1.0, 2.0, -0.5]).into_inner();
        let out = compactness_loss(std::slice::from_ref(&e), &c).unwrap();
        assert!(dot(&out.emb_grads[0], &e).abs() < 1e-15);
    }

    #[test]
    fn arcface_examples() {
        let bank =
            CenterBank::from_centers(2, 1, vec![uv(&[1.0, 0.0]), uv(&[0.0, 1.0])]).unwrap();
        let one = LabelDist::one_hot(2, 0).unwrap();
        // equidistant, m = 0
        let eq = arcface_loss(&[vec![1.0, 1.0]], &[one.clone()], &bank, 3.0, 0.0).unwrap();
        assert!((eq.value - 2f64.ln()).abs() < 1e-12);
        // s = 1, cos 1 and 0
        let v = arcface_loss(&[vec![1.0, 0.0]], &[one.clone()], &bank, 1.0, 0.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((v.value - want).abs() < 1e-12);
        assert!((want - 0.31326).abs() < 1e-5);
        // m = 0 equals fixed-scale cosine softmax
        let e = vec![vec![0.3, 0.7], vec![-0.4, 0.2]];
        let l = vec![one.clone(), LabelDist::one_hot(2, 1).unwrap()];
        let a = arcface_loss(&e, &l, &bank, 2.5, 0.0).unwrap();
        let b = subcluster_adacos_loss(&e, &l, &bank, &ScaleState::fixed(2.5)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        // M != 1 rejected
        let sub = init_centers(2, 2, 2, 0).unwrap();
        assert!(arcface_loss(&e, &l, &sub, 1.0, 0.1).is_err());
    }

    #[test]
    fn arcface_margin_raises_loss() {
        let bank = init_centers(4, 1, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e: Vec<_> = (0..5).map(|_| randn(&mut rng, 6)).collect();
        let l: Vec<_> = (0..5).map(|i| LabelDist::one_hot(4, i % 4).unwrap()).collect();
        let plain = arcface_loss(&e, &l, &bank, 4.0, 0.0).unwrap().value;
        let marg = arcface_loss(&e, &l, &bank, 4.0, 0.5).unwrap().value;
        assert!(marg > plain);
    }

    #[test]
    fn initial_scales() {
        assert!((ScaleState::adacos(3).s - 0.980_258_143_468_547).abs() < 1e-12);
        assert!((ScaleState::adacos(342).s - SQRT_2 * 341f64.ln()).abs() < 1e-15);
        assert!((ScaleState::adacos(342).s - 8.2475).abs() < 1e-4);
        assert!((ScaleState::subcluster(3, 2).s - 2.2761).abs() < 1e-4);
        // degenerate counts fall back to the floor
        assert_eq!(ScaleState::adacos(2).s, MIN_SCALE);
        assert_eq!(ScaleState::adacos(1).s, MIN_SCALE);
    }

    #[test]
    fn theta_med_clamp() {
        // every target angle is pi/2
        let cos = vec![vec![0.0, 0.5], vec![0.0, 0.2], vec![0.0, -0.3]];
        let labels = vec![LabelDist::one_hot(2, 0).unwrap(); 3];
        let batch = AngleBatch::from_cosines(cos, labels, 1).unwrap();
        let st = ScaleState::fixed(3.0);
        let next = adacos_scale_update(&st, &batch).unwrap();
        assert!((next.last_theta_med.unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let b_avg = ((3.0f64 * 0.5).exp() + (0.6f64).exp() + (-0.9f64).exp()) / 3.0;
        let want = b_avg.ln() / FRAC_PI_4.cos();
        assert!((next.s - want).abs() < 1e-12);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn subcluster_update_single_logit() {
        let batch = AngleBatch::from_cosines(
            vec![vec![0.4]],
            vec![LabelDist::one_hot(1, 0).unwrap()],
            1,
        )
        .unwrap();
        let st = ScaleState::fixed(2.0);
        let next = subcluster_scale_update(&st, &batch).unwrap();
        assert_eq!(next.last_f_max, Some(0.8));
        assert_eq!(next.last_b_avg, Some(1.0));
    }

    #[test]
    fn subcluster_equidistant_cases() {
        let bank =
            CenterBank::from_centers(2, 1, vec![uv(&[1.0, 0.0]), uv(&[0.0, 1.0])]).unwrap();
        let l = [LabelDist::one_hot(2, 1).unwrap()];
        let v = subcluster_adacos_loss(&[vec![2.0, 2.0]], &l, &bank, &ScaleState::fixed(5.0))
            .unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-12);

        let bank4 = CenterBank::from_centers(
            2,
            2,
            vec![
                uv(&[1.0, 0.0, 0.0, 0.0]),
                uv(&[0.0, 1.0, 0.0, 0.0]),
                uv(&[0.0, 0.0, 1.0, 0.0]),
                uv(&[0.0, 0.0, 0.0, 1.0]),
            ],
        )
        .unwrap();
        let v = subcluster_adacos_loss(&[vec![1.0; 4]], &l, &bank4, &ScaleState::fixed(5.0))
            .unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-12);
        let p = class_probabilities(&[1.0; 4], &bank4, 5.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_degenerate() {
        let bank = init_centers(1, 3, 5, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e: Vec<_> = (0..4).map(|_| randn(&mut rng, 5)).collect();
        let l = vec![LabelDist::one_hot(1, 0).unwrap(); 4];
        let st = ScaleState::subcluster(1, 3);
        let out = subcluster_adacos_loss(&e, &l, &bank, &st).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.emb_grads.iter().flatten().all(|g| *g == 0.0));
        let d = decomposed_grad(&e, &l, &bank, &st).unwrap();
        assert!(d.total().iter().flatten().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn mixup_examples() {
        let a = [1.0, 2.0];
        let b = [3.0, -4.0];
        let la = LabelDist::one_hot(4, 1).unwrap();
        let lb = LabelDist::one_hot(4, 2).unwrap();
        let (x, l) = mixup(&a, &b, &la, &lb, 1.0).unwrap();
        assert_eq!(x, a.to_vec());
        assert_eq!(l, la);
        let (_, l) = mixup(&a, &b, &la, &lb, 0.5).unwrap();
        assert_eq!(l.weights(), &[0.0, 0.5, 0.5, 0.0]);
        assert!(mixup(&a, &[1.0], &la, &lb, 0.5).is_err());
        assert!(mixup(&a, &b, &la, &lb, 1.5).is_err());
    }

    #[test]
    fn mixed_angle_is_convex_combination() {
        let cos = vec![vec![1.0, 0.0]];
        let l = LabelDist::from_weights(vec![0.25, 0.75]).unwrap();
        let batch = AngleBatch::from_cosines(cos, vec![l], 1).unwrap();
        let want = 0.75 * std::f64::consts::FRAC_PI_2;
        assert!((batch.median_target_angle() - want).abs() < 1e-15);
    }

    #[test]
    fn lower_median_for_even_batches() {
        let cos = vec![vec![1.0], vec![0.0], vec![-1.0], vec![0.5]];
        let labels = vec![LabelDist::one_hot(1, 0).unwrap(); 4];
        let batch = AngleBatch::from_cosines(cos, labels, 1).unwrap();
        // angles 0, pi/2, pi, pi/3 -> sorted 0, pi/3, pi/2, pi
        assert!((batch.median_target_angle() - std::f64::consts::FRAC_PI_3).abs() < 1e-15);
    }

    #[test]
    fn compactness_cce_examples() {
        let c0 = uv(&[1.0, 0.2, 0.0]);
        let c1 = uv(&[0.1, 1.0, 0.3]);
        let bank = CenterBank::from_centers(2, 1, vec![c0.clone(), c1.clone()]).unwrap();
        let e = vec![c0.as_slice().to_vec(), c1.as_slice().to_vec()];
        let l = vec![
            LabelDist::one_hot(2, 0).unwrap(),
            LabelDist::one_hot(2, 1).unwrap(),
        ];
        let s = 4.0;
        let out = compactness_plus_cce_loss(&e, &l, &bank, s, 1.0).unwrap();
        let cc = dot(c0.as_slice(), c1.as_slice());
        let want = -(s.exp() / (s.exp() + (s * cc).exp())).ln();
        assert!((out.value - want).abs() < 1e-12);
        let pure = compactness_plus_cce_loss(&e, &l, &bank, s, 0.0).unwrap();
        assert!(pure.value.abs() < 1e-15);

        // uniform logits: embedding orthogonal to both centers
        let ortho = CenterBank::from_centers(
            2,
            1,
            vec![uv(&[1.0, 0.0, 0.0]), uv(&[0.0, 1.0, 0.0])],
        )
        .unwrap();
        let e = vec![vec![0.0, 0.0, 1.0]];
        let l = vec![LabelDist::one_hot(2, 0).unwrap()];
        let out = compactness_plus_cce_loss(&e, &l, &ortho, 7.0, 1.0).unwrap();
        assert!((out.value - (2.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn loss_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("cosface".parse::<LossKind>().is_err());
    }

    #[test]
    fn subcluster_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(1..5);
            let bank = init_centers(n, m, 7, rng.random()).unwrap();
            let e = randn(&mut rng, 7);
            let p = class_probabilities(&e, &bank, rng.random_range(0.5..20.0)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
