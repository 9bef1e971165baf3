//! Waveform to stacked log-mel / delta / delta-delta features.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUPPORTED_RATES: [u32; 2] = [8000, 16000];

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    /// Samples in `[-1, 1]`.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::Input(format!(
                "unsupported sample rate {sample_rate} Hz (expected 8000 or 16000)"
            )));
        }
        Ok(Waveform { samples, sample_rate })
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Input(format!(
                "{}: expected mono 16-bit PCM, found {} channel(s) of {}-bit {:?}",
                path.display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        Waveform::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub low_hz: f64,
    /// Upper band edge as a fraction of the Nyquist frequency.
    pub high_nyquist_fraction: f64,
    pub log_floor: f64,
    pub delta_window: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_mels: 80,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            low_hz: 125.0,
            high_nyquist_fraction: 0.95,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl FrontendConfig {
    pub fn window_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// `1 + floor((n − window) / hop)`, or 0 when shorter than one window.
    pub fn num_frames(&self, num_samples: usize, rate: u32) -> usize {
        let (win, hop) = (self.window_samples(rate), self.hop_samples(rate));
        if num_samples < win {
            0
        } else {
            1 + (num_samples - win) / hop
        }
    }

    pub fn fft_size(&self, rate: u32) -> usize {
        self.window_samples(rate).next_power_of_two()
    }

    /// Center frequencies (Hz) of the triangular filters, equally spaced on
    /// the mel scale between the band edges.
    pub fn mel_centers(&self, rate: u32) -> Vec<f64> {
        let edges = self.mel_edges(rate);
        edges[1..=self.n_mels].to_vec()
    }

    fn mel_edges(&self, rate: u32) -> Vec<f64> {
        let lo = hz_to_mel(self.low_hz);
        let hi = hz_to_mel(self.high_nyquist_fraction * rate as f64 / 2.0);
        let step = (hi - lo) / (self.n_mels + 1) as f64;
        (0..self.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.frame_length_ms > 0.0 && self.frame_shift_ms > 0.0) {
            return Err(Error::Config("frame length and shift must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// Triangular mel filterbank evaluated on FFT bin frequencies.
struct Filterbank {
    /// `(first bin, weights)` per filter.
    filters: Vec<(usize, Vec<f64>)>,
}

impl Filterbank {
    fn new(cfg: &FrontendConfig, rate: u32) -> Self {
        let n_fft = cfg.fft_size(rate);
        let edges = cfg.mel_edges(rate);
        let bin_hz = rate as f64 / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let first = (lo / bin_hz).ceil() as usize;
                let weights = (first..n_bins)
                    .map(|k| k as f64 * bin_hz)
                    .take_while(|&f| f < hi)
                    .map(|f| if f <= mid { (f - lo) / (mid - lo) } else { (hi - f) / (hi - mid) })
                    .map(|w| w.max(0.0))
                    .collect();
                (first, weights)
            })
            .collect();
        Filterbank { filters }
    }
}

/// Log mel energies, `T × n_mels`.
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<Tensor> {
    cfg.validate()?;
    let rate = w.sample_rate;
    let win = cfg.window_samples(rate);
    let hop = cfg.hop_samples(rate);
    let frames = cfg.num_frames(w.samples.len(), rate);
    if frames == 0 {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            w.samples.len()
        )));
    }
    let n_fft = cfg.fft_size(rate);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1).max(1) as f64).cos())
        .collect();
    let bank = Filterbank::new(cfg, rate);
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    for t in 0..frames {
        let frame = &w.samples[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if i < win { frame[i] * hann[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for (first, weights) in &bank.filters {
            let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
            out.push(e.max(cfg.log_floor).ln());
        }
    }
    Tensor::new(vec![frames, cfg.n_mels], out)
}

/// Regression deltas along time with edge replication:
/// `d_t = Σ n·(c_{t+n} − c_{t−n}) / (2·Σ n²)`.
pub fn deltas(f: &Tensor, window: usize) -> Tensor {
    let (t_len, dim) = (f.rows(), f.cols());
    let mut out = vec![0.0; t_len * dim];
    if window == 0 {
        return Tensor::from_parts(vec![t_len, dim], out);
    }
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, t_len as isize - 1) as usize;
    for t in 0..t_len {
        for n in 1..=window {
            let next = f.row_slice(clamp(t as isize + n as isize));
            let prev = f.row_slice(clamp(t as isize - n as isize));
            let row = &mut out[t * dim..(t + 1) * dim];
            for ((o, a), b) in row.iter_mut().zip(next).zip(prev) {
                *o += n as f64 * (a - b);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= denom);
    Tensor::from_parts(vec![t_len, dim], out)
}

/// Stacked input features `T × n_mels × 3`: static, delta, delta-delta.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Tensor,
    pub sample_rate: u32,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Writes `<stem>.sqt` (tensor) and `<stem>.txt` (header).
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.frames.save(dir.join(format!("{stem}.sqt")))?;
        let header = format!(
            "utterance_id={}\nsample_rate={}\nframes={}\nn_mels={}\n",
            self.id,
            self.sample_rate,
            self.num_frames(),
            self.n_mels()
        );
        let p = dir.join(format!("{stem}.txt"));
        fs::write(&p, header).map_err(|e| Error::io(p, e))
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let frames = Tensor::load(dir.join(format!("{stem}.sqt")))?;
        let p = dir.join(format!("{stem}.txt"));
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut id = None;
        let mut rate = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::corrupt(p.display().to_string(), format!("bad header line {line:?}")))?;
            match k {
                "utterance_id" => id = Some(v.to_string()),
                "sample_rate" => rate = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(id), Some(sample_rate)) = (id, rate) else {
            return Err(Error::corrupt(p.display().to_string(), "missing utterance_id or sample_rate"));
        };
        if frames.rank() != 3 || frames.shape()[2] != 3 {
            return Err(Error::corrupt(
                p.display().to_string(),
                format!("feature tensor has shape {:?}, expected T×F×3", frames.shape()),
            ));
        }
        Ok(FeatureSequence { id, frames, sample_rate })
    }
}

pub fn stack_features(id: &str, w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    let stat = log_mel(w, cfg)?;
    let d1 = deltas(&stat, cfg.delta_window);
    let d2 = deltas(&d1, cfg.delta_window);
    let (t_len, n) = (stat.rows(), stat.cols());
    let mut data = Vec::with_capacity(t_len * n * 3);
    for ((a, b), c) in stat.data().iter().zip(d1.data()).zip(d2.data()) {
        data.extend_from_slice(&[*a, *b, *c]);
    }
    Ok(FeatureSequence {
        id: id.to_string(),
        frames: Tensor::new(vec![t_len, n, 3], data)?,
        sample_rate: w.sample_rate,
    })
}

/// Per (channel, depth) mean/variance normalization fit on a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels with smaller standard deviation are only centered.
const MIN_STD: f64 = 1e-8;

impl FeatureNormalizer {
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for fs in corpus {
            let width = fs.n_mels() * 3;
            if sum.is_empty() {
                sum = vec![0.0; width];
                sum_sq = vec![0.0; width];
            } else if sum.len() != width {
                return Err(Error::dim("normalizer", format!("feature width {width} != {}", sum.len())));
            }
            for row in fs.frames.data().chunks(width) {
                for ((s, q), v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(row) {
                    *s += v;
                    *q += v * v;
                }
            }
            count += fs.num_frames();
        }
        if count == 0 {
            return Err(Error::Input("cannot fit feature normalizer on an empty corpus".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(FeatureNormalizer { mean, std })
    }

    pub fn apply(&self, fs: &FeatureSequence) -> Result<FeatureSequence> {
        let width = self.mean.len();
        if fs.n_mels() * 3 != width {
            return Err(Error::dim(
                "normalizer",
                format!("feature width {} != {width}", fs.n_mels() * 3),
            ));
        }
        let mut out = fs.clone();
        for row in out.frames.data_mut().chunks_mut(width) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s > MIN_STD { (*v - m) / s } else { *v - m };
            }
        }
        Ok(out)
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.std);
        Tensor::from_parts(vec![2, self.mean.len()], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] != 2 {
            return Err(Error::corrupt("normalizer", format!("expected 2×W tensor, got {:?}", t.shape())));
        }
        Ok(FeatureNormalizer {
            mean: t.row_slice(0).to_vec(),
            std: t.row_slice(1).to_vec(),
        })
    }
}
