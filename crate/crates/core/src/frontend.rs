//! Waveform ingestion and log-Mel feature extraction.
//!
//! Frames are 25 ms long with a 10 ms shift, Hann-windowed, zero-padded to
//! the next power of two and turned into a power spectrum. A triangular
//! filterbank on the HTK Mel scale (0 Hz to Nyquist) pools the spectrum, and
//! the natural log is taken with a floor of `1e-10`. Speech tokens are formed
//! by stacking consecutive frames and projecting them to the model width.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub stack_factor: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mels: 80,
            stack_factor: 4,
        }
    }
}

impl FrontendConfig {
    pub fn win_length(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.frame_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.win_length().next_power_of_two()
    }

    /// Width of one stacked speech token before projection.
    pub fn stacked_width(&self) -> usize {
        self.n_mels * self.stack_factor
    }

    /// Number of frames for a signal of `len` samples, or `None` if the
    /// signal is shorter than one window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let win = self.win_length();
        (len >= win).then(|| (len - win) / self.hop_length() + 1)
    }

    pub fn num_tokens(&self, len: usize) -> Option<usize> {
        self.num_frames(len).map(|t| t.div_ceil(self.stack_factor))
    }
}

/// Windowed frames, `num_frames` rows of `win` samples each.
#[derive(Clone, Debug)]
pub struct FramedSignal {
    pub frames: Vec<Vec<f64>>,
    pub win: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    /// T_f × n_mels.
    pub frames: Tensor,
}

impl LogMelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos())
        .collect()
}

pub fn frame_signal(w: &Waveform, cfg: &FrontendConfig) -> Result<FramedSignal> {
    let win = cfg.win_length();
    let hop = cfg.hop_length();
    let n = cfg.num_frames(w.samples.len()).ok_or_else(|| {
        Error::Input(format!(
            "waveform has {} samples, at least {win} required for one frame",
            w.samples.len()
        ))
    })?;
    let window = hann(win);
    let frames = (0..n)
        .map(|t| {
            w.samples[t * hop..t * hop + win]
                .iter()
                .zip(&window)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect();
    Ok(FramedSignal { frames, win })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency in Hz of each Mel filter.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Tensor {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(&[n_mels, n_bins]);
    let data = fb.data_mut();
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            data[m * n_bins + k] = w;
        }
    }
    fb
}

/// Power spectrum of each frame (`n_fft/2 + 1` bins).
pub fn power_spectrum(framed: &FramedSignal, n_fft: usize) -> Vec<Vec<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    framed
        .frames
        .iter()
        .map(|frame| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, &s) in buf.iter_mut().zip(frame) {
                b.re = s;
            }
            fft.process(&mut buf);
            buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

pub fn log_mel(framed: &FramedSignal, n_mels: usize, sample_rate: u32) -> Result<LogMelSpectrogram> {
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be >= 1".into()));
    }
    let n_fft = framed.win.next_power_of_two();
    let fb = mel_filterbank(n_mels, n_fft, sample_rate);
    let n_bins = n_fft / 2 + 1;
    let spectra = power_spectrum(framed, n_fft);
    let mut out = Vec::with_capacity(spectra.len() * n_mels);
    for spec in &spectra {
        for m in 0..n_mels {
            let row = &fb.data()[m * n_bins..(m + 1) * n_bins];
            let e: f64 = row.iter().zip(spec).map(|(w, p)| w * p).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(LogMelSpectrogram {
        frames: Tensor::new(vec![spectra.len(), n_mels], out)?,
    })
}

/// Waveform to log-Mel frames under `cfg`.
pub fn features(w: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Input(format!(
            "waveform sample rate {} does not match frontend rate {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("waveform contains non-finite samples".into()));
    }
    log_mel(&frame_signal(w, cfg)?, cfg.n_mels, cfg.sample_rate)
}

/// Concatenates groups of `factor` consecutive frames into one row,
/// zero-padding the last group. Output is `ceil(T_f / factor) × factor·n_mels`.
pub fn stack_frames(mel: &LogMelSpectrogram, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Config("stack factor must be >= 1".into()));
    }
    let (t, m) = (mel.frames.rows(), mel.frames.cols());
    let n = t.div_ceil(factor);
    let mut data = vec![0.0; n * factor * m];
    data[..t * m].copy_from_slice(mel.frames.data());
    Tensor::new(vec![n, factor * m], data)
}

/// Learned projection from stacked frames to speech tokens.
#[derive(Clone, Debug)]
pub struct SpeechProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SpeechProjection {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, in_width: usize, width: usize, rng: &mut R) -> Self {
        SpeechProjection {
            weight: store.normal("frontend.proj.weight", &[in_width, width], (1.0 / in_width as f64).sqrt(), rng),
            bias: store.zeros("frontend.proj.bias", &[width]),
        }
    }

    /// `stacked · W + b`: the speech tokens `s`, N × D.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, stacked: &Tensor) -> Result<Var> {
        let x = tape.constant(stacked.clone());
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

// ---- file formats ------------------------------------------------------

const F64_MAGIC: &str = "F64LE";

/// Mono 16-bit PCM WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    fs::write(path, encode_wav(w)).map_err(|e| Error::io(path, e))
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let bad = |offset: usize, message: &str| Error::Ingest {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad(0, "not a RIFF/WAVE file"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(bad(pos, "chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad(pos, "fmt chunk too short"));
                }
                format = Some((u16_at(body), u16_at(body + 2), u32_at(body + 4), u16_at(body + 14)));
            }
            b"data" => {
                let (fmt, channels, rate, bits) = format.ok_or_else(|| bad(pos, "data chunk before fmt chunk"))?;
                if fmt != 1 || channels != 1 || bits != 16 {
                    return Err(bad(
                        body - 8,
                        &format!("only mono 16-bit PCM supported (format {fmt}, {channels} ch, {bits} bit)"),
                    ));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
                    .collect();
                return Ok(Waveform {
                    samples,
                    sample_rate: rate,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(bad(pos, "no data chunk"))
}

/// Raw float format: `"F64LE <count> <rate>\n"` then `count` little-endian f64.
pub fn encode_f64le(w: &Waveform) -> Vec<u8> {
    let mut out = format!("{F64_MAGIC} {} {}\n", w.samples.len(), w.sample_rate).into_bytes();
    for s in &w.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_f64le(bytes: &[u8]) -> Result<Waveform> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Ingest { offset: 0, message: "missing header line".into() })?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Ingest { offset: 0, message: "header is not ASCII".into() })?;
    let fields: Vec<&str> = header.split(' ').collect();
    let parsed = match fields.as_slice() {
        [magic, count, rate] if *magic == F64_MAGIC => count.parse::<usize>().ok().zip(rate.parse::<u32>().ok()),
        _ => None,
    };
    let (count, rate) = parsed.ok_or_else(|| Error::Ingest {
        offset: 0,
        message: format!("malformed header {header:?}, expected \"{F64_MAGIC} <count> <rate>\""),
    })?;
    let payload = &bytes[nl + 1..];
    if payload.len() != count * 8 {
        return Err(Error::Ingest {
            offset: nl + 1,
            message: format!("expected {count} samples ({} bytes), found {} bytes", count * 8, payload.len()),
        });
    }
    let samples: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::Ingest {
            offset: nl + 1 + 8 * i,
            message: format!("non-finite sample {}", samples[i]),
        });
    }
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Reads a WAV or raw-float file, chosen by its leading bytes.
pub fn load_audio(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"RIFF") {
        decode_wav(&bytes)
    } else if bytes.starts_with(F64_MAGIC.as_bytes()) {
        decode_f64le(&bytes)
    } else {
        Err(Error::Ingest {
            offset: 0,
            message: format!("{}: unrecognized audio format", path.display()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, amp: f64) -> Waveform {
        let sr = 16_000;
        let n = (secs * sr as f64) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sample_rate: sr,
        }
    }

    #[test]
    fn frame_geometry() {
        let cfg = FrontendConfig::default();
        assert_eq!((cfg.win_length(), cfg.hop_length(), cfg.n_fft()), (400, 160, 512));
        let one_sec = Waveform { samples: vec![0.0; 16_000], sample_rate: 16_000 };
        assert_eq!(frame_signal(&one_sec, &cfg).unwrap().frames.len(), 98);
        let exact = Waveform { samples: vec![0.0; 400], sample_rate: 16_000 };
        assert_eq!(frame_signal(&exact, &cfg).unwrap().frames.len(), 1);
        let short = Waveform { samples: vec![0.0; 399], sample_rate: 16_000 };
        let err = frame_signal(&short, &cfg).unwrap_err();
        assert!(err.to_string().contains("400"), "{err}");
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FrontendConfig::default();
        let w = Waveform { samples: vec![0.0; 4000], sample_rate: 16_000 };
        let mel = features(&w, &cfg).unwrap();
        assert!(mel.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    /// Direct O(n^2) DFT power spectrum.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn sine_peaks_at_nearest_mel_bin_and_matches_dft() {
        let cfg = FrontendConfig::default();
        let w = sine(1000.0, 0.2, 0.5);
        let framed = frame_signal(&w, &cfg).unwrap();
        let fft_power = power_spectrum(&framed, cfg.n_fft());
        let dft = dft_power(&framed.frames[3], cfg.n_fft());
        for (a, b) in fft_power[3].iter().zip(&dft) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let centers = mel_center_frequencies(cfg.n_mels, cfg.sample_rate);
        let nearest = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().partial_cmp(&(centers[b] - 1000.0).abs()).unwrap())
            .unwrap();
        // Mel energies recomputed from the DFT oracle.
        let fb = mel_filterbank(cfg.n_mels, cfg.n_fft(), cfg.sample_rate);
        let oracle: Vec<f64> = (0..cfg.n_mels)
            .map(|m| fb.row(m).iter().zip(&dft).map(|(a, b)| a * b).sum())
            .collect();
        let oracle_arg = (0..oracle.len()).max_by(|&a, &b| oracle[a].partial_cmp(&oracle[b]).unwrap()).unwrap();
        let mel = log_mel(&framed, cfg.n_mels, cfg.sample_rate).unwrap();
        let row = mel.frames.row(3);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(arg, nearest);
        assert_eq!(arg, oracle_arg);
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let cfg = FrontendConfig::default();
        let mut w = sine(700.0, 0.1, 0.2);
        // Broadband content so most cells sit above the floor.
        for (i, s) in w.samples.iter_mut().enumerate() {
            *s += 0.01 * ((i * 7919 % 101) as f64 / 50.0 - 1.0);
        }
        let a = features(&w, &cfg).unwrap();
        let doubled = Waveform { samples: w.samples.iter().map(|s| 2.0 * s).collect(), sample_rate: w.sample_rate };
        let b = features(&doubled, &cfg).unwrap();
        let mut checked = 0;
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            if *x > LOG_FLOOR.ln() + 1.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn filterbank_partition_bound() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(cfg.n_mels, cfg.n_fft(), cfg.sample_rate);
        assert!(fb.data().iter().all(|&w| w >= 0.0));
        let n_bins = fb.cols();
        for k in 0..n_bins {
            let total: f64 = (0..cfg.n_mels).map(|m| fb.get(m, k)).sum();
            assert!(total <= 1.0 + 1e-9, "bin {k}: {total}");
        }
    }

    #[test]
    fn stacking_pads_the_last_group() {
        let mel = LogMelSpectrogram { frames: Tensor::full(&[98, 3], 1.0) };
        let s = stack_frames(&mel, 4).unwrap();
        assert_eq!(s.shape(), &[25, 12]);
        // Last token holds frames 96, 97 then two zero frames.
        assert_eq!(&s.row(24)[..6], &[1.0; 6]);
        assert_eq!(&s.row(24)[6..], &[0.0; 6]);
        assert_eq!(stack_frames(&mel, 1).unwrap().rows(), 98);
        assert!(stack_frames(&mel, 0).is_err());
    }

    #[test]
    fn f64le_round_trip_and_errors() {
        let w = Waveform { samples: vec![0.25, -1.0, 1e-300], sample_rate: 8000 };
        let bytes = encode_f64le(&w);
        assert!(bytes.starts_with(b"F64LE 3 8000\n"));
        assert_eq!(decode_f64le(&bytes).unwrap(), w);
        let err = decode_f64le(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Ingest { offset: 13, .. }), "{err}");
        assert!(decode_f64le(b"F64LE x 8000\n").is_err());
        let nan = Waveform { samples: vec![0.0, f64::NAN], sample_rate: 8000 };
        let err = decode_f64le(&encode_f64le(&nan)).unwrap_err();
        assert!(matches!(err, Error::Ingest { offset: 21, .. }), "{err}");
        assert!(matches!(features(&nan, &FrontendConfig { sample_rate: 8000, ..FrontendConfig::default() }), Err(Error::Input(_))));
    }

    #[test]
    fn wav_round_trip_quantizes() {
        let w = sine(440.0, 0.05, 0.5);
        let back = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples.len(), w.samples.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-12);
        }
        assert!(decode_wav(b"RIFX....WAVE").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn frame_count_formula(len in 400usize..20_000) {
            let cfg = FrontendConfig::default();
            let w = Waveform { samples: vec![0.0; len], sample_rate: 16_000 };
            let frames = frame_signal(&w, &cfg).unwrap().frames.len();
            prop_assert_eq!(frames, (len - 400) / 160 + 1);
        }

        #[test]
        fn trailing_samples_short_of_a_hop_change_nothing(len in 400usize..4000, seed in 0u64..1000) {
            let cfg = FrontendConfig::default();
            let base: Vec<f64> = (0..len).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5).collect();
            let frames = (len - 400) / 160 + 1;
            let room = 400 + frames * 160 - len; // samples until the next frame fits
            let extra = (seed as usize) % room;
            let mut longer = base.clone();
            longer.extend(std::iter::repeat_n(0.3, extra));
            let a = features(&Waveform { samples: base, sample_rate: 16_000 }, &cfg).unwrap();
            let b = features(&Waveform { samples: longer, sample_rate: 16_000 }, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
