//! Per-section reference embeddings and the cosine-distance anomaly score.
//!
//! Source-domain training embeddings of a section are summarized by k-means
//! means projected back onto the sphere. The few target-domain training
//! embeddings are kept as they are. A test clip scores the smallest cosine
//! distance to any reference of its section, over both domains.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cosine, normalize, UnitVector};

pub const DEFAULT_K: usize = 16;
pub const MAX_LLOYD_ITERS: usize = 300;

fn sq_euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest mean (lowest index on ties).
fn nearest(p: &[f64], means: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, m) in means.iter().enumerate() {
        let d = sq_euclid(p, m);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding: each further seed is drawn with probability
/// proportional to its squared distance from the closest seed so far.
fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut means = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_euclid(p, &means[0])).collect();
    while means.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // every point already coincides with a seed
            rng.random_range(0..points.len())
        };
        means.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_euclid(p, &means[means.len() - 1]));
        }
    }
    means
}

/// Lloyd's algorithm with k-means++ seeding, run until the assignment stops
/// changing or for [`MAX_LLOYD_ITERS`] iterations. A cluster that loses all
/// its points is moved to the point farthest from its current mean. `k` is
/// clamped to the number of points.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Err(Error::Empty("k-means needs points".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("ragged k-means input".into()));
    }
    let k = if k > points.len() {
        warn!("k = {k} exceeds {} points; using k = {}", points.len(), points.len());
        points.len()
    } else {
        k
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = plus_plus_seeds(points, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut dist = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &means);
            dist[i] = d;
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assign) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                means[j] = sums[j].iter().map(|s| s / n).collect();
            } else {
                let far = (0..points.len())
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]))
                    .expect("points are nonempty");
                means[j] = points[far].clone();
                dist[far] = f64::NEG_INFINITY;
                assign[far] = usize::MAX;
            }
        }
    }
    Ok(means)
}

/// References of one section.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionRefs {
    pub source_means: Vec<UnitVector>,
    pub target_refs: Vec<UnitVector>,
}

/// Training embeddings of one section, split by domain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SectionEmbeddings {
    pub source: Vec<UnitVector>,
    pub target: Vec<UnitVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub k: usize,
    pub seed: u64,
    pub sections: BTreeMap<String, SectionRefs>,
}

/// Runs k-means on each section's source embeddings and keeps the target
/// embeddings verbatim. Section `i` (in sorted order) uses seed `seed + i`.
pub fn fit_reference(
    train: &BTreeMap<String, SectionEmbeddings>,
    k: usize,
    seed: u64,
) -> Result<ReferenceModel> {
    let mut sections = BTreeMap::new();
    for (i, (name, embs)) in train.iter().enumerate() {
        if embs.source.is_empty() || embs.target.is_empty() {
            return Err(Error::Empty(format!(
                "section '{name}' needs source and target training embeddings"
            )));
        }
        let points: Vec<Vec<f64>> = embs.source.iter().map(|e| e.as_slice().to_vec()).collect();
        let source_means = kmeans(&points, k, seed.wrapping_add(i as u64))?
            .iter()
            .map(|m| normalize(m))
            .collect::<Result<Vec<_>>>()?;
        sections.insert(
            name.clone(),
            SectionRefs {
                source_means,
                target_refs: embs.target.clone(),
            },
        );
    }
    Ok(ReferenceModel { k, seed, sections })
}

/// `min(min_source (1 - cos), min_target (1 - cos))`, in `[0, 2]`.
pub fn anomaly_score(e: &UnitVector, refs: &ReferenceModel, section: &str) -> Result<f64> {
    let r = refs
        .sections
        .get(section)
        .ok_or_else(|| Error::UnknownSection(section.to_string()))?;
    let best = r
        .source_means
        .iter()
        .chain(&r.target_refs)
        .map(|c| 1.0 - cosine(e, c))
        .fold(f64::INFINITY, f64::min);
    Ok(best.clamp(0.0, 2.0))
}

const REFS_MAGIC: &[u8; 4] = b"MASR";
const REFS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RefsHeader {
    k: usize,
    seed: u64,
    dim: usize,
    /// `(name, source count, target count)` in storage order.
    sections: Vec<(String, usize, usize)>,
}

impl ReferenceModel {
    fn dim(&self) -> usize {
        self.sections
            .values()
            .flat_map(|s| s.source_means.first())
            .map(|u| u.dim())
            .next()
            .unwrap_or(0)
    }

    /// `"MASR"`, version `u32`, a length-prefixed JSON header, then all
    /// vectors as little-endian `f64`, section by section, source first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = RefsHeader {
            k: self.k,
            seed: self.seed,
            dim: self.dim(),
            sections: self
                .sections
                .iter()
                .map(|(n, s)| (n.clone(), s.source_means.len(), s.target_refs.len()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(REFS_MAGIC)?;
            w.write_all(&REFS_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u32).to_le_bytes())?;
            w.write_all(&json)?;
            for s in self.sections.values() {
                for u in s.source_means.iter().chain(&s.target_refs) {
                    for v in u.as_slice() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| bad("truncated"))?;
        if &head[..4] != REFS_MAGIC {
            return Err(bad("not a reference model"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != REFS_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: RefsHeader = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
        let mut read_vec = || -> Result<UnitVector> {
            let mut v = vec![0.0; header.dim];
            let mut buf = [0u8; 8];
            for x in v.iter_mut() {
                r.read_exact(&mut buf).map_err(|_| bad("truncated vectors"))?;
                *x = f64::from_le_bytes(buf);
            }
            UnitVector::from_unit(v)
        };
        let mut sections = BTreeMap::new();
        for (name, ns, nt) in header.sections {
            let source_means = (0..ns).map(|_| read_vec()).collect::<Result<_>>()?;
            let target_refs = (0..nt).map(|_| read_vec()).collect::<Result<_>>()?;
            sections.insert(
                name,
                SectionRefs {
                    source_means,
                    target_refs,
                },
            );
        }
        Ok(ReferenceModel {
            k: header.k,
            seed: header.seed,
            sections,
        })
    }
}

/// One line of the score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub clip_id: String,
    pub section: String,
    pub score: f64,
}

/// CSV with header `clip_id,section,score`.
pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
