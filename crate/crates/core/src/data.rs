//! Clip manifests and a synthetic machine-sound generator.
//!
//! A manifest is JSON lines, one [`ClipRecord`] per line. Relative paths are
//! resolved against the manifest's directory on load.
//!
//! The generator builds every `(machine type, section, attribute)` class from a
//! few amplitude-modulated sinusoids. A machine type contributes one to three
//! tones shared by all its sections, each section adds two of its own, and the
//! attribute is an operating speed that scales every frequency and modulation
//! rate of the section's signature. Telling attributes apart therefore
//! requires tracking exact frequencies, while coarser classes can be separated
//! from cruder cues. All classes share the same kind of background: broadband
//! noise plus randomly placed interfering tones, none of them class-specific.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// One recording and its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub path: PathBuf,
    pub machine_type: String,
    pub section: String,
    pub domain: Domain,
    pub split: Split,
    pub label: Label,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl ClipRecord {
    /// Sections are numbered per machine type, so the key joins both.
    pub fn section_key(&self) -> String {
        format!("{}/{}", self.machine_type, self.section)
    }

    pub fn is_anomalous(&self) -> bool {
        self.label == Label::Anomalous
    }

    /// Auxiliary class key at the given granularity.
    pub fn class_key(&self, g: ClassGranularity) -> String {
        match g {
            ClassGranularity::None => "all".to_string(),
            ClassGranularity::Type => self.machine_type.clone(),
            ClassGranularity::TypeSection => self.section_key(),
            ClassGranularity::TypeSectionAttr => {
                let attrs: Vec<String> = self
                    .attributes
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                format!("{}/{}", self.section_key(), attrs.join(";"))
            }
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.clip_id.is_empty() {
            return Err("empty clip_id".into());
        }
        if self.split == Split::Train && self.label == Label::Anomalous {
            return Err(format!(
                "clip '{}' is anomalous but belongs to the training split",
                self.clip_id
            ));
        }
        Ok(())
    }
}

/// How training clips are grouped into auxiliary classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassGranularity {
    /// A single class for everything.
    #[serde(rename = "none")]
    None,
    #[serde(rename = "type")]
    Type,
    #[serde(rename = "type-section")]
    TypeSection,
    #[serde(rename = "type-section-attr")]
    TypeSectionAttr,
}

impl ClassGranularity {
    pub const ALL: [ClassGranularity; 4] = [
        ClassGranularity::None,
        ClassGranularity::Type,
        ClassGranularity::TypeSection,
        ClassGranularity::TypeSectionAttr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassGranularity::None => "none",
            ClassGranularity::Type => "type",
            ClassGranularity::TypeSection => "type-section",
            ClassGranularity::TypeSectionAttr => "type-section-attr",
        }
    }
}

impl fmt::Display for ClassGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassGranularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown class granularity '{s}'")))
    }
}

/// Dense class ids for the class keys seen in a set of records, sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIndex {
    pub granularity: ClassGranularity,
    pub keys: Vec<String>,
}

impl ClassIndex {
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a ClipRecord>,
        granularity: ClassGranularity,
    ) -> Self {
        let mut keys: Vec<String> = records
            .into_iter()
            .map(|r| r.class_key(granularity))
            .collect();
        keys.sort();
        keys.dedup();
        ClassIndex { granularity, keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id_of(&self, r: &ClipRecord) -> Option<usize> {
        self.keys.binary_search(&r.class_key(self.granularity)).ok()
    }
}

/// Parses a JSON-lines manifest. Blank lines are skipped.
pub fn parse_manifest<R: BufRead>(input: R) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|message| Error::Manifest {
            line: i + 1,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads and validates a manifest, resolving relative clip paths.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = parse_manifest(BufReader::new(file))?;
    if records.is_empty() {
        warn!("manifest {} contains no records", path.display());
    }
    let base = path.parent().unwrap_or(Path::new(""));
    for r in &mut records {
        if r.path.is_relative() {
            r.path = base.join(&r.path);
        }
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// How anomalous clips deviate from their class signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnomalyKind {
    /// Every signature tone moves up by `anomaly_shift` (relative).
    #[serde(rename = "band-shift")]
    BandShift,
    /// The loudest signature tone and its harmonic disappear.
    #[serde(rename = "harmonic-drop")]
    HarmonicDrop,
    /// Short broadband clicks are added at a steady rate.
    #[serde(rename = "transient")]
    Transient,
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band-shift" => Ok(AnomalyKind::BandShift),
            "harmonic-drop" => Ok(AnomalyKind::HarmonicDrop),
            "transient" => Ok(AnomalyKind::Transient),
            _ => Err(Error::InvalidParameter(format!("unknown anomaly kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_machine_types: usize,
    pub sections_per_type: usize,
    pub attributes_per_section: usize,
    /// Normal source-domain training clips per section.
    pub source_train_count: usize,
    /// Normal target-domain training clips per section.
    pub target_train_count: usize,
    /// Test clips per section and domain, for each label.
    pub test_count_per_domain: usize,
    pub clip_seconds: f64,
    pub anomaly_kind: AnomalyKind,
    /// Relative frequency change of band-shift anomalies.
    pub anomaly_shift: f64,
    /// Relative frequency change of the target domain.
    pub domain_shift: f64,
    /// Signature-to-background ratio; `inf` disables the background.
    pub noise_snr_db: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_machine_types: 7,
            sections_per_type: 6,
            attributes_per_section: 2,
            source_train_count: 990,
            target_train_count: 10,
            test_count_per_domain: 50,
            clip_seconds: 10.0,
            anomaly_kind: AnomalyKind::BandShift,
            anomaly_shift: 0.08,
            domain_shift: 0.02,
            noise_snr_db: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_machine_types,
            self.sections_per_type,
            self.attributes_per_section,
            self.source_train_count,
            self.target_train_count,
            self.test_count_per_domain,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidParameter("synthetic counts must be >= 1".into()));
        }
        if !(self.clip_seconds.is_finite() && self.clip_seconds > 0.0) {
            return Err(Error::InvalidParameter("clip length must be > 0".into()));
        }
        if self.noise_snr_db.is_nan() {
            return Err(Error::InvalidParameter("SNR is NaN".into()));
        }
        for shift in [self.anomaly_shift, self.domain_shift] {
            if !(shift.is_finite() && shift > -0.5 && shift < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "relative shift {shift} outside (-0.5, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Reads a TOML table; missing keys keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_classes(&self) -> usize {
        self.n_machine_types * self.sections_per_type * self.attributes_per_section
    }

    fn n_samples(&self) -> usize {
        (self.clip_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

/// A record together with the indices the generator needs.
#[derive(Debug, Clone)]
struct ClipPlan {
    record: ClipRecord,
    stream: u64,
    machine: usize,
    section: usize,
    attr: usize,
}

fn plan(cfg: &SynthConfig) -> Vec<ClipPlan> {
    let mut out = Vec::new();
    for t in 0..cfg.n_machine_types {
        for s in 0..cfg.sections_per_type {
            for domain in [Domain::Source, Domain::Target] {
                let train = match domain {
                    Domain::Source => cfg.source_train_count,
                    Domain::Target => cfg.target_train_count,
                };
                let groups = [
                    (Split::Train, Label::Normal, train),
                    (Split::Test, Label::Normal, cfg.test_count_per_domain),
                    (Split::Test, Label::Anomalous, cfg.test_count_per_domain),
                ];
                for (split, label, count) in groups {
                    for i in 0..count {
                        let a = i % cfg.attributes_per_section;
                        let clip_id = format!(
                            "m{t:02}_s{s:02}_{domain}_{}_{}_{i:04}",
                            match split {
                                Split::Train => "train",
                                Split::Test => "test",
                            },
                            match label {
                                Label::Normal => "normal",
                                Label::Anomalous => "anomaly",
                            }
                        );
                        let record = ClipRecord {
                            path: PathBuf::from("audio").join(format!("{clip_id}.wav")),
                            clip_id,
                            machine_type: format!("m{t:02}"),
                            section: format!("{s:02}"),
                            domain,
                            split,
                            label,
                            attributes: BTreeMap::from([(
                                "setting".to_string(),
                                format!("a{a}"),
                            )]),
                        };
                        out.push(ClipPlan {
                            record,
                            stream: out.len() as u64,
                            machine: t,
                            section: s,
                            attr: a,
                        });
                    }
                }
            }
        }
    }
    out
}

/// The records [`generate_synthetic`] would write, with paths relative to
/// the output directory. No audio is rendered.
pub fn synthetic_manifest(cfg: &SynthConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    Ok(plan(cfg).into_iter().map(|p| p.record).collect())
}

#[derive(Debug, Clone, Copy)]
struct Tone {
    freq: f64,
    amp: f64,
    am_rate: f64,
    am_depth: f64,
}

// Streams are disjoint per purpose so adding clips never changes a signature.
const TYPE_STREAM: u64 = 1 << 62;
const SECTION_STREAM: u64 = (1 << 62) + (1 << 40);

/// Ratio between the speeds of neighboring attribute values.
const SPEED_STEP: f64 = 1.25;
/// Partials above this frequency are not rendered.
const MAX_PARTIAL_HZ: f64 = 7600.0;

fn level_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_tone(rng: &mut ChaCha8Rng) -> Tone {
    // log-uniform over 150 Hz .. 2.5 kHz
    let freq = (150f64.ln() + rng.random::<f64>() * (2500f64 / 150.0).ln()).exp();
    Tone {
        freq,
        amp: rng.random_range(0.5..1.0),
        am_rate: rng.random_range(0.5..8.0),
        am_depth: rng.random_range(0.0..0.6),
    }
}

/// Speed of attribute value `a`, geometric steps centered on 1.
fn attribute_speed(a: usize, n_attrs: usize) -> f64 {
    SPEED_STEP.powf(a as f64 - (n_attrs as f64 - 1.0) / 2.0)
}

/// Three to five tones: one to three per machine type and two per section,
/// all run at the attribute's speed.
fn class_signature(cfg: &SynthConfig, t: usize, s: usize, a: usize) -> Vec<Tone> {
    let mut rng = level_rng(cfg.seed, TYPE_STREAM + t as u64);
    let n_type = rng.random_range(1..=3);
    let mut tones: Vec<Tone> = (0..n_type).map(|_| random_tone(&mut rng)).collect();
    let key = (t * cfg.sections_per_type + s) as u64;
    let mut rng = level_rng(cfg.seed, SECTION_STREAM + key);
    tones.extend((0..2).map(|_| random_tone(&mut rng)));
    let speed = attribute_speed(a, cfg.attributes_per_section);
    for tone in &mut tones {
        tone.freq *= speed;
        tone.am_rate *= speed;
    }
    tones
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn render_tones(tones: &[Tone], freq_scale: f64, n: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let sr = SAMPLE_RATE as f64;
    for tone in tones {
        let z: f64 = StandardNormal.sample(rng);
        let jitter = 1.0 + 0.002 * z;
        let f = tone.freq * freq_scale * jitter;
        let amp = tone.amp * rng.random_range(0.9..1.1);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let am_phase: f64 = rng.random_range(0.0..2.0 * PI);
        // fundamental plus a weaker second harmonic
        let partials: Vec<(f64, f64)> = [(1.0, 1.0), (2.0, 0.4)]
            .into_iter()
            .filter(|(k, _)| k * f < MAX_PARTIAL_HZ)
            .collect();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let time = i as f64 / sr;
            let env = 1.0 + tone.am_depth * (2.0 * PI * tone.am_rate * time + am_phase).sin();
            let w = 2.0 * PI * f * time + phase;
            *o += amp * env * partials.iter().map(|(k, g)| g * (k * w).sin()).sum::<f64>();
        }
    }
}

/// Background shared by all classes: colored noise plus interfering tones at
/// random frequencies. The coloring differs per domain.
fn render_background(domain: Domain, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut noise = vec![0.0; n];
    let mut prev_in = 0.0;
    let mut prev_out = 0.0;
    for v in noise.iter_mut() {
        let w: f64 = StandardNormal.sample(rng);
        *v = match domain {
            // low-passed, rumbling
            Domain::Source => {
                prev_out = 0.9 * prev_out + w;
                prev_out
            }
            // high-passed, hissing
            Domain::Target => {
                let y = w - prev_in;
                prev_in = w;
                y
            }
        };
    }
    let r = rms(&noise).max(1e-12);
    noise.iter_mut().for_each(|v| *v /= r);

    let n_interferers = rng.random_range(3..=6);
    let interferers: Vec<Tone> = (0..n_interferers)
        .map(|_| {
            let mut t = random_tone(rng);
            t.freq = rng.random_range(100.0..7000.0);
            t.am_depth = rng.random_range(0.0..1.0);
            t
        })
        .collect();
    let mut tonal = vec![0.0; n];
    render_tones(&interferers, 1.0, n, rng, &mut tonal);
    let r = rms(&tonal).max(1e-12);
    noise.iter_mut().zip(&tonal).for_each(|(v, t)| *v += t / r);
    noise
}

fn add_transients(out: &mut [f64], level: f64, rng: &mut ChaCha8Rng) {
    let sr = SAMPLE_RATE as f64;
    let period = (sr / rng.random_range(4.0..8.0)) as usize;
    let len = (0.004 * sr) as usize;
    let mut start = rng.random_range(0..period.max(1));
    while start < out.len() {
        for k in 0..len.min(out.len() - start) {
            let decay = (-(k as f64) / (len as f64 / 4.0)).exp();
            let w: f64 = StandardNormal.sample(rng);
            out[start + k] += 4.0 * level * decay * w;
        }
        start += period;
    }
}

const OUTPUT_RMS: f64 = 0.1;

fn render(cfg: &SynthConfig, p: &ClipPlan) -> Waveform {
    let n = cfg.n_samples();
    let mut rng = level_rng(cfg.seed, p.stream);
    let mut tones = class_signature(cfg, p.machine, p.section, p.attr);
    let mut scale = match p.record.domain {
        Domain::Source => 1.0,
        Domain::Target => 1.0 + cfg.domain_shift,
    };
    if p.record.is_anomalous() {
        match cfg.anomaly_kind {
            AnomalyKind::BandShift => scale *= 1.0 + cfg.anomaly_shift,
            AnomalyKind::HarmonicDrop => {
                let loudest = (0..tones.len())
                    .max_by(|&i, &j| tones[i].amp.total_cmp(&tones[j].amp))
                    .expect("signatures have tones");
                tones.remove(loudest);
            }
            AnomalyKind::Transient => {}
        }
    }
    let mut x = vec![0.0; n];
    render_tones(&tones, scale, n, &mut rng, &mut x);
    let sig_rms = rms(&x).max(1e-12);
    if p.record.is_anomalous() && cfg.anomaly_kind == AnomalyKind::Transient {
        add_transients(&mut x, sig_rms, &mut rng);
    }
    if cfg.noise_snr_db.is_finite() {
        let bg = render_background(p.record.domain, n, &mut rng);
        let gain = sig_rms / 10f64.powf(cfg.noise_snr_db / 20.0) / rms(&bg).max(1e-12);
        x.iter_mut().zip(&bg).for_each(|(v, b)| *v += gain * b);
    }
    let r = rms(&x).max(1e-12);
    Waveform::new(x.into_iter().map(|v| (v * OUTPUT_RMS / r).clamp(-1.0, 1.0)).collect())
}

/// A rendered clip and its record.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub waveform: Waveform,
}

/// Renders every clip in memory. Each clip draws from its own seeded stream,
/// so the result does not depend on thread scheduling.
pub fn synthesize_all(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    cfg.validate()?;
    Ok(plan(cfg)
        .into_par_iter()
        .map(|p| SynthClip {
            waveform: render(cfg, &p),
            record: p.record,
        })
        .collect())
}

/// Writes `audio/<clip_id>.wav` for every clip and `manifest.jsonl` under
/// `out_dir`. The manifest stores paths relative to `out_dir`; the returned
/// records carry them joined onto `out_dir`, as [`load_manifest`] would.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let audio = out_dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let plans = plan(cfg);
    plans
        .par_iter()
        .try_for_each(|p| write_wav(&out_dir.join(&p.record.path), &render(cfg, p)))?;
    let mut records: Vec<ClipRecord> = plans.into_iter().map(|p| p.record).collect();
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    for r in &mut records {
        r.path = out_dir.join(&r.path);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{magnitude_spectrogram, HOP, N_FFT};
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            n_machine_types: 2,
            sections_per_type: 2,
            attributes_per_section: 2,
            source_train_count: 6,
            target_train_count: 2,
            test_count_per_domain: 2,
            clip_seconds: 0.5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn canonical_manifest_has_42_sections() {
        let recs = synthetic_manifest(&SynthConfig::default()).unwrap();
        let sections: HashSet<String> = recs.iter().map(|r| r.section_key()).collect();
        assert_eq!(sections.len(), 42);
        let per_section = recs.iter().filter(|r| r.section_key() == "m03/05");
        let counts = per_section.fold([0usize; 4], |mut c, r| {
            let k = match (r.domain, r.split) {
                (Domain::Source, Split::Train) => 0,
                (Domain::Target, Split::Train) => 1,
                (Domain::Source, Split::Test) => 2,
                (Domain::Target, Split::Test) => 3,
            };
            c[k] += 1;
            c
        });
        assert_eq!(counts, [990, 10, 100, 100]);
    }

    #[test]
    fn class_counts_per_granularity() {
        let cfg = small();
        let recs = synthetic_manifest(&cfg).unwrap();
        let train: Vec<_> = recs.iter().filter(|r| r.split == Split::Train).collect();
        let n = |g| ClassIndex::build(train.iter().copied(), g).len();
        assert_eq!(n(ClassGranularity::None), 1);
        assert_eq!(n(ClassGranularity::Type), 2);
        assert_eq!(n(ClassGranularity::TypeSection), 4);
        assert_eq!(n(ClassGranularity::TypeSectionAttr), cfg.n_classes());
        assert!(train.iter().all(|r| r.label == Label::Normal));
    }

    #[test]
    fn manifest_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let recs = synthetic_manifest(&small()).unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &recs).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), recs.len());
        assert_eq!(back[0].path, dir.path().join(&recs[0].path));
        assert_eq!(back[3].attributes, recs[3].attributes);
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn anomalous_training_clip_is_rejected() {
        let line = r#"{"clip_id":"x","path":"x.wav","machine_type":"fan","section":"00","domain":"source","split":"train","label":"anomalous"}"#;
        let err = parse_manifest(line.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }), "{err}");
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let line = r#"{"clip_id":"x","path":"x.wav","machine_type":"fan","section":"00","domain":"other","split":"test","label":"normal"}"#;
        let text = format!("\n{line}\n");
        let err = parse_manifest(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
    }

    #[test]
    fn same_seed_gives_identical_wavs() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let recs = generate_synthetic(&cfg, a.path()).unwrap();
        generate_synthetic(&cfg, b.path()).unwrap();
        for r in recs.iter().step_by(5) {
            let rel = r.path.strip_prefix(a.path()).unwrap();
            let x = fs::read(&r.path).unwrap();
            let y = fs::read(b.path().join(rel)).unwrap();
            assert_eq!(x, y);
        }
        let m1 = fs::read(a.path().join("manifest.jsonl")).unwrap();
        let m2 = fs::read(b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
    }

    fn peak_bin(w: &Waveform) -> usize {
        let g = magnitude_spectrogram(w, N_FFT, HOP).unwrap();
        (0..g.n_freq())
            .max_by(|&i, &j| {
                let a: f64 = g.row(i).iter().sum();
                let b: f64 = g.row(j).iter().sum();
                a.total_cmp(&b)
            })
            .unwrap()
    }

    #[test]
    fn band_shift_moves_the_dominant_bin() {
        let cfg = SynthConfig {
            noise_snr_db: f64::INFINITY,
            clip_seconds: 1.0,
            anomaly_shift: 0.2,
            ..small()
        };
        let clips = synthesize_all(&cfg).unwrap();
        let pick = |label| {
            clips
                .iter()
                .find(|c| {
                    c.record.section_key() == "m00/00"
                        && c.record.domain == Domain::Source
                        && c.record.split == Split::Test
                        && c.record.label == label
                        && c.record.attributes["setting"] == "a0"
                })
                .unwrap()
        };
        let normal = peak_bin(&pick(Label::Normal).waveform) as f64;
        let anomal = peak_bin(&pick(Label::Anomalous).waveform) as f64;
        // bins are 15.6 Hz wide; allow one bin of rounding either way
        assert!((anomal - normal * 1.2).abs() <= 1.5, "{normal} -> {anomal}");
    }

    #[test]
    fn signatures_have_three_to_five_tones() {
        let cfg = SynthConfig::default();
        for t in 0..cfg.n_machine_types {
            let n = class_signature(&cfg, t, 0, 0).len();
            assert!((3..=5).contains(&n));
        }
    }

    #[test]
    fn output_level_is_bounded() {
        let clips = synthesize_all(&small()).unwrap();
        for c in &clips {
            assert_eq!(c.waveform.len(), 8000);
            assert!(c.waveform.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }
}
