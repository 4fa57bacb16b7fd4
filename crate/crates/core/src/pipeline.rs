//! Glue between the stages: features for a manifest, training on its
//! training split, reference fitting, scoring and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassGranularity, ClassIndex, ClipRecord, Domain, Split, SynthClip};
use crate::dsp::{
    extract_features, extract_raw, load_features, read_wav, save_features, temporal_mean_normalize,
    ClipFeatures, SpectroGrid, SpectrumVec, SPECTRUM_LEN,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, ScoredEntry};
use crate::explain::{importance_map, ImportanceMap, MaskParams};
use crate::geometry::{CenterBank, CenterBankParams, UnitVector};
use crate::losses::{LossKind, ScaleState};
use crate::net::{EmbeddingNet, NetInput};
use crate::score::{anomaly_score, fit_reference, ReferenceModel, ScoreRow, SectionEmbeddings};
use crate::train::{train, FeatureSet, LossTrace, TrainConfig};

/// Everything besides the weights needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub loss: LossKind,
    pub classes: ClassIndex,
    pub bank: CenterBankParams,
    pub scale: ScaleState,
    pub trace: LossTrace,
}

/// Cache file of a clip's features inside `dir`.
pub fn feature_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.feat"))
}

/// Reads every clip's WAV and writes its features to `dir`.
pub fn extract_to_dir(records: &[ClipRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    records.par_iter().try_for_each(|r| {
        let feats = extract_features(&read_wav(&r.path)?, SPECTRUM_LEN)?;
        save_features(&feature_path(dir, &r.clip_id), &feats)
    })
}

pub fn load_from_dir(records: &[ClipRecord], dir: &Path) -> Result<Vec<ClipFeatures>> {
    records
        .par_iter()
        .map(|r| load_features(&feature_path(dir, &r.clip_id)))
        .collect()
}

/// Features of in-memory clips.
pub fn extract_clips(clips: &[SynthClip], spectrum_len: usize) -> Result<Vec<ClipFeatures>> {
    clips
        .par_iter()
        .map(|c| extract_features(&c.waveform, spectrum_len))
        .collect()
}

/// Training-split clips with their class ids at `granularity`.
pub fn training_set(
    records: &[ClipRecord],
    feats: &[ClipFeatures],
    granularity: ClassGranularity,
    cfg: &TrainConfig,
) -> Result<(FeatureSet, ClassIndex)> {
    let idx: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].split == Split::Train)
        .collect();
    if idx.is_empty() {
        return Err(Error::Empty("manifest has no training clips".into()));
    }
    let classes = ClassIndex::build(idx.iter().map(|&i| &records[i]), granularity);
    let ids = idx
        .iter()
        .map(|&i| classes.id_of(&records[i]).expect("class built from these records"))
        .collect();
    let first = &feats[idx[0]];
    let spec = cfg.net_spec(first.spectrogram.n_freq(), first.spectrum.len());
    let chosen: Vec<&ClipFeatures> = idx.iter().map(|&i| &feats[i]).collect();
    let set = FeatureSet::from_features(&spec, &chosen, ids, classes.len())?;
    Ok((set, classes))
}

/// Trains on the training split and returns the network with its metadata.
pub fn train_model(
    records: &[ClipRecord],
    feats: &[ClipFeatures],
    granularity: ClassGranularity,
    cfg: &TrainConfig,
) -> Result<(EmbeddingNet, ModelMeta)> {
    let (set, classes) = training_set(records, feats, granularity, cfg)?;
    let out = train(&set, cfg)?;
    let meta = ModelMeta {
        loss: cfg.loss,
        classes,
        bank: out.bank.params(),
        scale: out.scale,
        trace: out.trace,
    };
    Ok((out.net, meta))
}

impl ModelMeta {
    pub fn bank(&self) -> Result<CenterBank> {
        CenterBank::from_params(self.bank)
    }
}

/// Unit embeddings of all clips, in order.
pub fn embed_all(net: &EmbeddingNet, feats: &[ClipFeatures]) -> Result<Vec<UnitVector>> {
    let refs: Vec<&ClipFeatures> = feats.iter().collect();
    let mut out = Vec::with_capacity(feats.len());
    for chunk in refs.chunks(256) {
        out.extend(net.embed(&NetInput::from_features(net.spec(), chunk)?)?);
    }
    Ok(out)
}

/// Reference model from the training-split embeddings.
pub fn fit_refs(
    records: &[ClipRecord],
    embs: &[UnitVector],
    k: usize,
    seed: u64,
) -> Result<ReferenceModel> {
    let mut by_section: BTreeMap<String, SectionEmbeddings> = BTreeMap::new();
    for (r, e) in records.iter().zip(embs) {
        if r.split != Split::Train {
            continue;
        }
        let s = by_section.entry(r.section_key()).or_default();
        match r.domain {
            Domain::Source => s.source.push(e.clone()),
            Domain::Target => s.target.push(e.clone()),
        }
    }
    fit_reference(&by_section, k, seed)
}

/// Scores every test clip.
pub fn score_tests(
    records: &[ClipRecord],
    embs: &[UnitVector],
    refs: &ReferenceModel,
) -> Result<Vec<ScoreRow>> {
    records
        .iter()
        .zip(embs)
        .filter(|(r, _)| r.split == Split::Test)
        .map(|(r, e)| {
            Ok(ScoreRow {
                clip_id: r.clip_id.clone(),
                section: r.section_key(),
                score: anomaly_score(e, refs, &r.section_key())?,
            })
        })
        .collect()
}

/// Joins scores with the manifest by clip id.
pub fn scored_entries(records: &[ClipRecord], scores: &[ScoreRow]) -> Result<Vec<ScoredEntry>> {
    let by_id: BTreeMap<&str, &ClipRecord> =
        records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    scores
        .iter()
        .map(|s| {
            let r = by_id.get(s.clip_id.as_str()).ok_or_else(|| {
                Error::InvalidParameter(format!("scored clip '{}' is not in the manifest", s.clip_id))
            })?;
            Ok(ScoredEntry {
                score: s.score,
                is_anomalous: r.is_anomalous(),
                section: s.section.clone(),
                domain: r.domain,
            })
        })
        .collect()
}

/// Train, fit references, score and evaluate in memory.
pub fn run(
    records: &[ClipRecord],
    feats: &[ClipFeatures],
    granularity: ClassGranularity,
    cfg: &TrainConfig,
    k: usize,
    p: f64,
) -> Result<MetricsReport> {
    let (net, _) = train_model(records, feats, granularity, cfg)?;
    let embs = embed_all(&net, feats)?;
    let refs = fit_refs(records, &embs, k, cfg.seed)?;
    let scores = score_tests(records, &embs, &refs)?;
    evaluate(&scored_entries(records, &scores)?, p)
}

/// Scores a clip from its linear magnitude spectrogram, holding the clip's
/// spectrum branch fixed.
pub struct ClipScorer<'a> {
    pub net: &'a EmbeddingNet,
    pub refs: &'a ReferenceModel,
    pub section: String,
    pub spectrum: SpectrumVec,
}

impl ClipScorer<'_> {
    pub fn score(&self, magnitude: &SpectroGrid) -> Result<f64> {
        let feats = ClipFeatures {
            spectrogram: temporal_mean_normalize(magnitude),
            spectrum: self.spectrum.clone(),
        };
        let input = NetInput::from_features(self.net.spec(), &[&feats])?;
        let emb = self.net.embed(&input)?;
        anomaly_score(&emb[0], self.refs, &self.section)
    }
}

/// Importance map of one clip under a trained model.
pub fn explain_clip(
    net: &EmbeddingNet,
    refs: &ReferenceModel,
    record: &ClipRecord,
    params: &MaskParams,
) -> Result<ImportanceMap> {
    let (magnitude, spectrum) = extract_raw(&read_wav(&record.path)?, net.spec().spectrum_len)?;
    let scorer = ClipScorer {
        net,
        refs,
        section: record.section_key(),
        spectrum,
    };
    importance_map(|g| scorer.score(g), &magnitude, params)
}
