//! 80-bin log mel filterbank features at 16 kHz.
//!
//! Frames are 25 ms (400 samples) with a 10 ms (160 sample) shift. Each frame
//! is pre-emphasised (0.97), Hamming windowed, zero padded to 512 points and
//! transformed; the power spectrum is pooled by 80 triangular filters spaced
//! evenly on the mel scale between 0 Hz and 8 kHz, then `ln(max(e, 1e-10))`.
//!
//! All intermediate arithmetic is `f64` and the FFT is a fixed radix-2
//! schedule, so results do not depend on SIMD dispatch.

use std::f64::consts::PI;
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LENGTH: usize = 400;
pub const FRAME_SHIFT: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MEL_BINS: usize = 80;
pub const PREEMPHASIS: f64 = 0.97;
pub const ENERGY_FLOOR: f64 = 1e-10;
const LOW_FREQ: f64 = 0.0;
const HIGH_FREQ: f64 = 8000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    /// Reads a mono WAV file. Integer PCM is scaled to [-1, 1).
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Audio(format!("{}: {}", path.display(), e)))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Audio(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>(),
        }
        .map_err(|e| Error::Audio(format!("{}: {}", path.display(), e)))?;
        Ok(Waveform::new(samples, spec.sample_rate))
    }

    /// Writes 16-bit mono PCM.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let audio = |e: hound::Error| Error::Audio(format!("{}: {}", path.display(), e));
        let mut writer = hound::WavWriter::create(path, spec).map_err(audio)?;
        for &s in &self.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(audio)?;
        }
        writer.finalize().map_err(audio)
    }
}

/// `1 + ⌊(n − 400) / 160⌋`, or 0 when fewer than 400 samples.
pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < FRAME_LENGTH {
        0
    } else {
        1 + (num_samples - FRAME_LENGTH) / FRAME_SHIFT
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (hz / 700.0).ln_1p()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (mel / 1127.0).exp_m1()
}

/// Triangular filters over the `FFT_SIZE / 2 + 1` power bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `(first_bin, weights)` per filter.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(num_bins: usize, fft_size: usize, sample_rate: u32) -> Self {
        let (lo, hi) = (hz_to_mel(LOW_FREQ), hz_to_mel(HIGH_FREQ));
        let step = (hi - lo) / (num_bins + 1) as f64;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut filters = Vec::with_capacity(num_bins);
        let mut centers_hz = Vec::with_capacity(num_bins);
        for m in 0..num_bins {
            let left = lo + m as f64 * step;
            let center = left + step;
            let right = center + step;
            centers_hz.push(mel_to_hz(center));
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..=fft_size / 2 {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel < right {
                    if mel <= center {
                        (mel - left) / (center - left)
                    } else {
                        (right - mel) / (right - center)
                    }
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        MelFilterbank {
            filters,
            centers_hz,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.filters.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Dense weight of filter `m` at power bin `k`.
    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let (first, w) = &self.filters[m];
        if k < *first {
            0.0
        } else {
            w.get(k - first).copied().unwrap_or(0.0)
        }
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
fn fft_in_place(re: &mut [f64], im: &mut [f64], twiddles: &[(f64, f64)]) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = twiddles[k * stride];
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Reusable extractor holding the window, twiddles and filterbank.
pub struct Fbank {
    window: Vec<f64>,
    twiddles: Vec<(f64, f64)>,
    mel: MelFilterbank,
}

impl Default for Fbank {
    fn default() -> Self {
        Self::new()
    }
}

impl Fbank {
    pub fn new() -> Self {
        let window = (0..FRAME_LENGTH)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (FRAME_LENGTH - 1) as f64).cos())
            .collect();
        let twiddles = (0..FFT_SIZE / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / FFT_SIZE as f64;
                (a.cos(), a.sin())
            })
            .collect();
        Fbank {
            window,
            twiddles,
            mel: MelFilterbank::new(NUM_MEL_BINS, FFT_SIZE, SAMPLE_RATE),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Pre-emphasised, windowed frame starting at `start`.
    pub fn prepare_frame(&self, samples: &[f64], start: usize) -> Vec<f64> {
        let mut frame = samples[start..start + FRAME_LENGTH].to_vec();
        for i in (1..FRAME_LENGTH).rev() {
            frame[i] -= PREEMPHASIS * frame[i - 1];
        }
        frame[0] -= PREEMPHASIS * frame[0];
        for (s, w) in frame.iter_mut().zip(&self.window) {
            *s *= w;
        }
        frame
    }

    pub fn compute(&self, wave: &Waveform) -> Result<FeatureSequence> {
        if wave.sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate {} Hz is not supported, expected {} Hz",
                wave.sample_rate, SAMPLE_RATE
            )));
        }
        let frames = num_frames(wave.samples.len());
        if frames == 0 {
            return Err(Error::Audio(format!(
                "waveform has {} samples, need at least {}",
                wave.samples.len(),
                FRAME_LENGTH
            )));
        }
        let mut values = Vec::with_capacity(frames * NUM_MEL_BINS);
        let mut re = vec![0.0; FFT_SIZE];
        let mut im = vec![0.0; FFT_SIZE];
        let mut power = vec![0.0; FFT_SIZE / 2 + 1];
        let mut energies = vec![0.0; NUM_MEL_BINS];
        for f in 0..frames {
            let frame = self.prepare_frame(&wave.samples, f * FRAME_SHIFT);
            re[..FRAME_LENGTH].copy_from_slice(&frame);
            re[FRAME_LENGTH..].iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            fft_in_place(&mut re, &mut im, &self.twiddles);
            for (k, p) in power.iter_mut().enumerate() {
                *p = re[k] * re[k] + im[k] * im[k];
            }
            self.mel.apply(&power, &mut energies);
            values.extend(energies.iter().map(|&e| e.max(ENERGY_FLOOR).ln() as f32));
        }
        FeatureSequence::new(frames, NUM_MEL_BINS, values)
    }
}

/// Convenience wrapper around [`Fbank::compute`].
pub fn fbank(wave: &Waveform) -> Result<FeatureSequence> {
    Fbank::new().compute(wave)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(N²) DFT power spectrum.
    fn naive_power(frame: &[f64]) -> Vec<f64> {
        (0..=FFT_SIZE / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / FFT_SIZE as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn sine(freq: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE)
    }

    #[test]
    fn one_second_gives_98_frames() {
        assert_eq!(num_frames(16000), 98);
        let f = fbank(&sine(440.0, 16000)).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn frame_count_edges() {
        assert_eq!(num_frames(399), 0);
        assert_eq!(num_frames(400), 1);
        assert_eq!(num_frames(559), 1);
        assert_eq!(num_frames(560), 2);
    }

    #[test]
    fn silence_hits_the_floor() {
        let f = fbank(&Waveform::new(vec![0.0; 800], SAMPLE_RATE)).unwrap();
        let floor = ENERGY_FLOOR.ln() as f32;
        assert!(f.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn rejects_short_or_wrong_rate() {
        assert!(fbank(&Waveform::new(vec![0.0; 399], SAMPLE_RATE)).is_err());
        assert!(fbank(&Waveform::new(vec![0.0; 8000], 8000)).is_err());
    }

    #[test]
    fn fft_matches_naive_dft() {
        let fb = Fbank::new();
        let w = sine(1234.5, 1200);
        let frame = fb.prepare_frame(&w.samples, 160);
        let mut re = vec![0.0; FFT_SIZE];
        let mut im = vec![0.0; FFT_SIZE];
        re[..FRAME_LENGTH].copy_from_slice(&frame);
        fft_in_place(&mut re, &mut im, &fb.twiddles);
        let naive = naive_power(&frame);
        for k in 0..=FFT_SIZE / 2 {
            let p = re[k] * re[k] + im[k] * im[k];
            assert!((p - naive[k]).abs() <= 1e-9 * naive[k].max(1.0), "bin {}", k);
        }
    }

    #[test]
    fn sine_peaks_at_nearest_mel_center() {
        let fb = Fbank::new();
        let w = sine(1000.0, 16000);
        let feats = fb.compute(&w).unwrap();
        let centers = fb.filterbank().centers_hz();
        let nearest = (0..NUM_MEL_BINS)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(centers[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        for t in 0..feats.num_frames() {
            // naive DFT + dense filterbank oracle for this frame
            let frame = fb.prepare_frame(&w.samples, t * FRAME_SHIFT);
            let power = naive_power(&frame);
            let oracle: Vec<f64> = (0..NUM_MEL_BINS)
                .map(|m| {
                    let e: f64 = (0..=FFT_SIZE / 2)
                        .map(|k| fb.filterbank().weight(m, k) * power[k])
                        .sum();
                    e.max(ENERGY_FLOOR).ln()
                })
                .collect();
            let row = feats.frame(t);
            for (a, o) in row.iter().zip(&oracle) {
                assert!((*a as f64 - o).abs() < 1e-4);
            }
            let argmax = |v: &[f64]| {
                (0..v.len())
                    .max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap())
                    .unwrap()
            };
            let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            assert_eq!(argmax(&row64), nearest, "frame {}", t);
            assert_eq!(argmax(&oracle), nearest, "frame {}", t);
        }
    }

    #[test]
    fn deterministic() {
        let w = sine(300.0, 5000);
        assert_eq!(fbank(&w).unwrap(), fbank(&w).unwrap());
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }
}
