//! Audio input and the two input representations of the embedding network:
//! a temporally mean-normalized log-magnitude spectrogram and a max-pooled
//! log-magnitude spectrum of the whole clip.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 512;
/// Floor added to magnitudes before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;
/// Default length of the pooled spectrum.
pub const SPECTRUM_LEN: usize = 8192;

/// A mono clip with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// An `F x T` grid stored row-major (one row per frequency bin).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroGrid {
    n_freq: usize,
    n_time: usize,
    values: Vec<f64>,
}

impl SpectroGrid {
    pub fn new(n_freq: usize, n_time: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_freq * n_time {
            return Err(Error::Shape(format!(
                "{} values for a {n_freq}x{n_time} grid",
                values.len()
            )));
        }
        Ok(SpectroGrid {
            n_freq,
            n_time,
            values,
        })
    }

    pub fn zeros(n_freq: usize, n_time: usize) -> Self {
        SpectroGrid {
            n_freq,
            n_time,
            values: vec![0.0; n_freq * n_time],
        }
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.n_time + t]
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.values[f * self.n_time..(f + 1) * self.n_time]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// A (log-)magnitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumVec(pub Vec<f64>);

impl SpectrumVec {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Reads a 16-bit PCM mono 16 kHz WAV file. Other encodings are rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {:?} {}-bit, expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(pcm_to_f64))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Ok(Waveform::new(samples))
}

pub fn pcm_to_f64(s: i16) -> f64 {
    s as f64 / 32768.0
}

/// Writes a waveform as 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other.to_string()),
    })?;
    for s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Wav(e.to_string()))
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// STFT magnitudes of Hann-windowed frames without padding.
///
/// The result has `n_fft / 2 + 1` rows and `(len - n_fft) / hop + 1` columns.
pub fn magnitude_spectrogram(w: &Waveform, n_fft: usize, hop: usize) -> Result<SpectroGrid> {
    if hop == 0 || n_fft < hop {
        return Err(Error::InvalidParameter(format!(
            "need n_fft >= hop >= 1, got n_fft={n_fft} hop={hop}"
        )));
    }
    if w.len() < n_fft {
        return Err(Error::ClipTooShort {
            len: w.len(),
            n_fft,
        });
    }
    let n_freq = n_fft / 2 + 1;
    let n_time = (w.len() - n_fft) / hop + 1;
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut grid = SpectroGrid::zeros(n_freq, n_time);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..n_time {
        let frame = &w.samples[t * hop..t * hop + n_fft];
        for ((b, x), h) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(x * h, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (f, c) in buf.iter().take(n_freq).enumerate() {
            grid.values[f * n_time + t] = c.norm();
        }
    }
    Ok(grid)
}

/// Log-compresses a magnitude grid and removes each frequency bin's mean over
/// time.
pub fn temporal_mean_normalize(g: &SpectroGrid) -> SpectroGrid {
    let mut out = g.clone();
    if g.n_time == 0 {
        return out;
    }
    for row in out.values.chunks_mut(g.n_time) {
        for v in row.iter_mut() {
            *v = (LOG_EPS + *v).ln();
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// Non-overlapping pooling cell `i` of `out_len` over `n` inputs.
fn pool_cell(i: usize, n: usize, out_len: usize) -> std::ops::Range<usize> {
    (i * n / out_len)..((i + 1) * n / out_len)
}

/// Log-magnitude of the full-clip real DFT, max-pooled to `out_len` bins.
pub fn magnitude_spectrum(w: &Waveform, out_len: usize) -> Result<SpectrumVec> {
    if out_len < 1 {
        return Err(Error::InvalidParameter("spectrum length must be >= 1".into()));
    }
    let n_bins = w.len() / 2 + 1;
    if w.is_empty() || out_len > n_bins {
        return Err(Error::InvalidParameter(format!(
            "spectrum length {out_len} exceeds {n_bins} DFT bins"
        )));
    }
    let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|x| Complex::new(*x, 0.0)).collect();
    FftPlanner::<f64>::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    let mags: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm()).collect();
    let pooled = (0..out_len)
        .map(|i| {
            let peak = mags[pool_cell(i, n_bins, out_len)]
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            (LOG_EPS + peak).ln()
        })
        .collect();
    Ok(SpectrumVec(pooled))
}

/// Index of the pooled cell containing full-resolution bin `bin`.
pub fn pooled_cell_of(bin: usize, n_bins: usize, out_len: usize) -> usize {
    (0..out_len)
        .find(|&i| pool_cell(i, n_bins, out_len).contains(&bin))
        .unwrap_or(out_len - 1)
}

/// Averages contiguous time segments, reducing `T` frames to `segments`.
pub fn mean_pool_time(g: &SpectroGrid, segments: usize) -> Result<SpectroGrid> {
    if segments == 0 || g.n_time < segments {
        return Err(Error::Shape(format!(
            "cannot pool {} frames into {segments} segments",
            g.n_time
        )));
    }
    let mut out = SpectroGrid::zeros(g.n_freq, segments);
    for f in 0..g.n_freq {
        let row = g.row(f);
        for s in 0..segments {
            let cell = pool_cell(s, g.n_time, segments);
            let len = cell.len() as f64;
            out.values[f * segments + s] = row[cell].iter().sum::<f64>() / len;
        }
    }
    Ok(out)
}

/// Both network inputs computed from one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    /// Temporally mean-normalized log spectrogram.
    pub spectrogram: SpectroGrid,
    pub spectrum: SpectrumVec,
}

/// Linear magnitude spectrogram plus log spectrum of a clip.
///
/// The linear spectrogram is kept so masks can be applied before
/// normalization.
pub fn extract_raw(w: &Waveform, spectrum_len: usize) -> Result<(SpectroGrid, SpectrumVec)> {
    Ok((
        magnitude_spectrogram(w, N_FFT, HOP)?,
        magnitude_spectrum(w, spectrum_len)?,
    ))
}

pub fn extract_features(w: &Waveform, spectrum_len: usize) -> Result<ClipFeatures> {
    let (spec, spectrum) = extract_raw(w, spectrum_len)?;
    Ok(ClipFeatures {
        spectrogram: temporal_mean_normalize(&spec),
        spectrum,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"MASD";
const CACHE_VERSION: u32 = 1;

/// Writes a grid as `"MASD"`, version `u32`, `F` and `T` as `u32`, then
/// row-major little-endian `f64` values.
pub fn write_grid<W: Write>(mut out: W, g: &SpectroGrid) -> std::io::Result<()> {
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(g.n_freq as u32).to_le_bytes())?;
    out.write_all(&(g.n_time as u32).to_le_bytes())?;
    for v in &g.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_grid<R: Read>(mut input: R) -> Result<SpectroGrid> {
    let bad = |m: &str| Error::Format(format!("feature cache: {m}"));
    let mut head = [0u8; 16];
    input
        .read_exact(&mut head)
        .map_err(|_| bad("truncated header"))?;
    if &head[..4] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    if word(4) != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (n_freq, n_time) = (word(8) as usize, word(12) as usize);
    let mut bytes = vec![0u8; n_freq * n_time * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|_| bad("truncated body"))?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SpectroGrid::new(n_freq, n_time, values)
}

/// Caches the features of a clip: the spectrogram grid followed by the
/// spectrum stored as an `L x 1` grid.
pub fn save_features(path: &Path, feats: &ClipFeatures) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let spectrum = SpectroGrid::new(feats.spectrum.len(), 1, feats.spectrum.0.clone())?;
    write_grid(&mut w, &feats.spectrogram)
        .and_then(|_| write_grid(&mut w, &spectrum))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<ClipFeatures> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let spectrogram = read_grid(&mut r)?;
    let spectrum = read_grid(&mut r)?;
    if spectrum.n_time != 1 {
        return Err(Error::Format("spectrum record must have one column".into()));
    }
    Ok(ClipFeatures {
        spectrogram,
        spectrum: SpectrumVec(spectrum.values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, len: usize) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|n| 0.5 * (2.0 * PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
    }

    /// Direct O(N^2) DFT magnitude at a single bin.
    fn dft_mag(x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let a = -2.0 * PI * k as f64 * i as f64 / n;
            re += v * a.cos();
            im += v * a.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn pcm_scaling() {
        assert_eq!(pcm_to_f64(0), 0.0);
        assert_eq!(pcm_to_f64(-32768), -1.0);
    }

    #[test]
    fn canonical_shape() {
        let g = magnitude_spectrogram(&Waveform::new(vec![0.0; 160_000]), N_FFT, HOP).unwrap();
        assert_eq!((g.n_freq(), g.n_time()), (513, 311));
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn short_clip_rejected() {
        assert!(matches!(
            magnitude_spectrogram(&Waveform::new(vec![0.0; 100]), 1024, 512),
            Err(Error::ClipTooShort { .. })
        ));
        assert!(magnitude_spectrogram(&Waveform::new(vec![0.0; 4096]), 256, 512).is_err());
    }

    #[test]
    fn sinusoid_peak_bin() {
        let g = magnitude_spectrogram(&sine(1000.0, 16_000), N_FFT, HOP).unwrap();
        // independent check: direct DFT of the first windowed frame
        let h = hann(N_FFT);
        let frame: Vec<f64> = sine(1000.0, N_FFT)
            .samples
            .iter()
            .zip(&h)
            .map(|(a, b)| a * b)
            .collect();
        let direct_peak = (0..513)
            .max_by(|a, b| dft_mag(&frame, *a).total_cmp(&dft_mag(&frame, *b)))
            .unwrap();
        assert_eq!(direct_peak, 64);
        for t in 0..g.n_time() {
            let peak = (0..g.n_freq())
                .max_by(|a, b| g.get(*a, t).total_cmp(&g.get(*b, t)))
                .unwrap();
            assert_eq!(peak, 64);
        }
        assert!((g.get(64, 0) - dft_mag(&frame, 64)).abs() < 1e-9);
    }

    #[test]
    fn parseval_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Waveform::new((0..4096).map(|_| rng.random_range(-1.0..1.0)).collect());
        let g = magnitude_spectrogram(&w, N_FFT, HOP).unwrap();
        let h = hann(N_FFT);
        for t in 0..g.n_time() {
            let energy: f64 = w.samples[t * HOP..t * HOP + N_FFT]
                .iter()
                .zip(&h)
                .map(|(x, w)| (x * w).powi(2))
                .sum();
            let spec: f64 = (0..g.n_freq())
                .map(|f| {
                    let weight = if f == 0 || f == N_FFT / 2 { 1.0 } else { 2.0 };
                    weight * g.get(f, t).powi(2)
                })
                .sum::<f64>()
                / N_FFT as f64;
            assert!((spec - energy).abs() <= 1e-6 * energy);
        }
    }

    #[test]
    fn normalization_examples() {
        let g = SpectroGrid::new(2, 3, vec![5.0, 5.0, 5.0, 0.0, 0.0, 0.0]).unwrap();
        let n = temporal_mean_normalize(&g);
        assert!(n.values().iter().all(|v| v.abs() < 1e-12));

        let (a, b) = (2.0, 7.0);
        let n = temporal_mean_normalize(&SpectroGrid::new(1, 2, vec![a, b]).unwrap());
        let (la, lb) = ((LOG_EPS + a).ln(), (LOG_EPS + b).ln());
        let m = (la + lb) / 2.0;
        assert_eq!(n.values(), &[la - m, lb - m]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = SpectroGrid::new(
            40,
            31,
            (0..40 * 31).map(|_| rng.random_range(0.0..100.0)).collect(),
        )
        .unwrap();
        let n = temporal_mean_normalize(&g);
        for f in 0..40 {
            let mean: f64 = n.row(f).iter().sum::<f64>() / 31.0;
            assert!(mean.abs() <= 1e-9);
        }
    }

    #[test]
    fn spectrum_examples() {
        let s = magnitude_spectrum(&Waveform::new(vec![0.0; 2048]), 64).unwrap();
        assert!(s.0.iter().all(|v| *v == LOG_EPS.ln()));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Waveform::new((0..256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let full = magnitude_spectrum(&w, 129).unwrap();
        for (k, v) in full.0.iter().enumerate() {
            assert!((v - (LOG_EPS + dft_mag(&w.samples, k)).ln()).abs() < 1e-9);
        }
        assert!(magnitude_spectrum(&w, 0).is_err());
        assert!(magnitude_spectrum(&w, 130).is_err());
    }

    #[test]
    fn spectrum_peak_lands_in_its_pool_cell() {
        let len = 20_000;
        let k = 1234; // bin k is exactly k * 16000 / len Hz
        let w = sine(k as f64 * SAMPLE_RATE as f64 / len as f64, len);
        assert!(dft_mag(&w.samples, k) > 1000.0);
        let n_bins = len / 2 + 1;
        let out = magnitude_spectrum(&w, 3000).unwrap();
        let peak = (0..out.len())
            .max_by(|a, b| out.0[*a].total_cmp(&out.0[*b]))
            .unwrap();
        assert_eq!(peak, pooled_cell_of(k, n_bins, 3000));
    }

    #[test]
    fn time_pooling() {
        let g = SpectroGrid::new(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = mean_pool_time(&g, 2).unwrap();
        assert_eq!(p.values(), &[1.5, 4.0]);
        assert!(mean_pool_time(&g, 6).is_err());
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.masd");
        let feats = ClipFeatures {
            spectrogram: SpectroGrid::new(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap(),
            spectrum: SpectrumVec(vec![0.5, -27.0, 1e300]),
        };
        save_features(&path, &feats).unwrap();
        assert_eq!(load_features(&path).unwrap(), feats);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MASD");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert!(read_grid(&b"NOPE0000000000000000"[..]).is_err());
    }

    #[test]
    fn wav_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 160_000])).unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.len(), 160_000);
        assert!(w.samples.iter().all(|v| *v == 0.0));

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(Error::UnsupportedAudio(_))));

        let rate = dir.path().join("r.wav");
        let mut wr = hound::WavWriter::create(
            &rate,
            hound::WavSpec {
                channels: 1,
                sample_rate: 44_100,
                ..spec
            },
        )
        .unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&rate), Err(Error::UnsupportedAudio(_))));

        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"not a wav file at all").unwrap();
        assert!(matches!(read_wav(&junk), Err(Error::Wav(_))));
    }
}
