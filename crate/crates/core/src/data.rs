//! Synthetic two-source mixtures, dataset splits and audio I/O (PCM16 WAV, manifests).

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
const PEAK: f64 = 0.5;

/// One mixture with its references; `mixture == Σ references` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub mixture: Vec<f32>,
    pub references: Vec<Vec<f32>>,
}

const PARTIALS: [f64; 3] = [1.0, 0.3, 0.1];
const AM_DEPTH: f64 = 0.2;

fn harmonic_source(rng: &mut ChaCha8Rng, f0_range: (f64, f64), len: usize, rate: f64) -> Vec<f64> {
    let f0 = rng.random_range(f0_range.0..f0_range.1);
    let am_rate = rng.random_range(1.0..4.0);
    let am_phase = rng.random_range(0.0..TAU);
    let mut x: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            let env = 1.0 - AM_DEPTH + AM_DEPTH * (TAU * am_rate * t + am_phase).sin();
            let tone: f64 = PARTIALS
                .iter()
                .enumerate()
                .map(|(k, a)| ((k + 1) as f64 * f0, a))
                .filter(|(f, _)| *f < rate / 2.0)
                .map(|(f, a)| a * (TAU * f * t).sin())
                .sum();
            env * tone
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    x
}

/// Low source: `f₀ ∈ [100, 300)` Hz. High source: `f₀ ∈ [400, 900)` Hz.
/// Each is a three-partial harmonic stack under a slow AM envelope, peak
/// normalised to 0.5.
pub fn synth_pair(seed: u64, duration_s: f64, sample_rate: u32) -> Result<Example> {
    if !duration_s.is_finite() || duration_s <= 0.0 || sample_rate < 2000 {
        return Err(Error::InvalidConfig(format!(
            "synthetic pairs need a positive duration and a rate of at least 2000 Hz (got {duration_s} s, {sample_rate} Hz)"
        )));
    }
    let rate = sample_rate as f64;
    let len = ((duration_s * rate).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1 = harmonic_source(&mut rng, (100.0, 300.0), len, rate);
    let s2 = harmonic_source(&mut rng, (400.0, 900.0), len, rate);
    let s1: Vec<f32> = s1.into_iter().map(|v| v as f32).collect();
    let s2: Vec<f32> = s2.into_iter().map(|v| v as f32).collect();
    let mixture = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
    Ok(Example { mixture, references: vec![s1, s2] })
}

/// `count` pairs; item `i` uses the generator seeded by `(seed, i)`.
pub fn synth_dataset(count: usize, seed: u64, duration_s: f64, sample_rate: u32) -> Result<Vec<Example>> {
    (0..count)
        .map(|i| synth_pair(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64), duration_s, sample_rate))
        .collect()
}

/// Mixtures with their references and a shared sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationBatch {
    pub mixtures: Vec<Vec<f32>>,
    pub references: Vec<Vec<Vec<f32>>>,
    pub sample_rate: u32,
}

impl SeparationBatch {
    pub fn new(examples: &[Example], sample_rate: u32) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
        let (len, sources) = (first.mixture.len(), first.references.len());
        for ex in examples {
            if ex.references.len() != sources {
                return Err(Error::LengthMismatch(ex.references.len(), sources));
            }
            for r in std::iter::once(&ex.mixture).chain(&ex.references) {
                if r.len() != len {
                    return Err(Error::LengthMismatch(r.len(), len));
                }
            }
        }
        Ok(Self {
            mixtures: examples.iter().map(|e| e.mixture.clone()).collect(),
            references: examples.iter().map(|e| e.references.clone()).collect(),
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    /// Whether every mixture equals the sum of its references bit for bit.
    pub fn is_additive(&self) -> bool {
        self.mixtures.iter().zip(&self.references).all(|(m, refs)| {
            m.iter().enumerate().all(|(t, &v)| v == refs.iter().fold(0.0f32, |acc, r| acc + r[t]))
        })
    }
}

/// Train/validation/test proportions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: [69.0, 21.0, 10.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder sizes for `n` items; ties go to the earlier part.
pub fn split_sizes(n: usize, spec: &SplitSpec) -> Result<[usize; 3]> {
    if spec.ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::InvalidConfig(format!("split ratios must be positive, got {:?}", spec.ratios)));
    }
    let total: f64 = spec.ratios.iter().sum();
    let quotas = spec.ratios.map(|r| n as f64 * r / total);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle of `0..n` cut into train/val/test.
pub fn split(n: usize, spec: &SplitSpec, seed: u64) -> Result<Split> {
    if n < 10 {
        return Err(Error::TooFewItems(n));
    }
    let [a, b, _] = split_sizes(n, spec)?;
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Split {
        train: idx[..a].to_vec(),
        val: idx[a..a + b].to_vec(),
        test: idx[a + b..].to_vec(),
    })
}

/// Decoded mono PCM16 audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Wav {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::UnexpectedEof(what));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Parses a RIFF/WAVE byte stream holding 16-bit mono PCM.
pub fn wav_decode(bytes: &[u8]) -> Result<Wav> {
    let mut rest = bytes;
    let header = take(&mut rest, 12, "RIFF header")?;
    if &header[..4] != b"RIFF" {
        return Err(Error::UnsupportedFormat { field: "riff", detail: "missing RIFF magic".into() });
    }
    if &header[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat { field: "wave", detail: "RIFF form type is not WAVE".into() });
    }
    let mut rate = None;
    loop {
        let chunk = take(&mut rest, 8, "chunk header")?;
        let size = u32_at(chunk, 4) as usize;
        let body = take(&mut rest, size, "chunk body")?;
        if size % 2 == 1 && !rest.is_empty() {
            take(&mut rest, 1, "chunk padding")?;
        }
        match &chunk[..4] {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::UnexpectedEof("fmt chunk"));
                }
                let format = u16_at(body, 0);
                if format != 1 {
                    return Err(Error::UnsupportedFormat {
                        field: "audio_format",
                        detail: format!("only PCM (1) is supported, found {format}"),
                    });
                }
                let channels = u16_at(body, 2);
                if channels != 1 {
                    return Err(Error::UnsupportedFormat {
                        field: "channels",
                        detail: format!("only mono is supported, found {channels} channels"),
                    });
                }
                let bits = u16_at(body, 14);
                if bits != 16 {
                    return Err(Error::UnsupportedFormat {
                        field: "bits_per_sample",
                        detail: format!("only 16-bit samples are supported, found {bits}"),
                    });
                }
                let r = u32_at(body, 4);
                if r == 0 {
                    return Err(Error::UnsupportedFormat { field: "sample_rate", detail: "sample rate is zero".into() });
                }
                rate = Some(r);
            }
            b"data" => {
                let sample_rate = rate.ok_or(Error::UnsupportedFormat {
                    field: "fmt",
                    detail: "data chunk precedes the fmt chunk".into(),
                })?;
                if body.len() % 2 != 0 {
                    return Err(Error::UnexpectedEof("sample data"));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|p| i16::from_le_bytes([p[0], p[1]]) as f32 / 32768.0)
                    .collect();
                return Ok(Wav { samples, sample_rate });
            }
            _ => {}
        }
    }
}

/// Encodes samples as 16-bit mono PCM, clamping to `[−1, 1 − 2⁻¹⁵]` and
/// rounding to the nearest step.
pub fn wav_encode(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "wav_encode" });
    }
    if sample_rate == 0 {
        return Err(Error::InvalidConfig("sample rate must be positive".into()));
    }
    let data_len = u32::try_from(samples.len() * 2)
        .ok()
        .filter(|&n| n <= u32::MAX - 36)
        .ok_or_else(|| Error::InvalidConfig("too many samples for a WAV file".into()))?;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    Ok(out)
}

pub fn wav_read(path: &Path) -> Result<Wav> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    wav_decode(&bytes)
}

pub fn wav_write(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let bytes = wav_encode(samples, sample_rate)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One manifest line: a mixture and its reference files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub line: usize,
    pub mixture: PathBuf,
    pub references: Vec<PathBuf>,
}

/// Parses `mix<TAB>ref1<TAB>ref2…` lines. Blank lines and `#` comments are
/// skipped; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Vec<ManifestEntry>> {
    let resolve = |p: &str| match base {
        Some(b) if Path::new(p).is_relative() => b.join(p),
        _ => PathBuf::from(p),
    };
    let mut entries = Vec::new();
    let mut sources = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Manifest {
                line,
                message: format!("expected a mixture and at least two references separated by tabs, found {} field(s)", fields.len()),
            });
        }
        if let Some(bad) = fields.iter().position(|f| f.trim().is_empty()) {
            return Err(Error::Manifest { line, message: format!("field {} is empty", bad + 1) });
        }
        match sources {
            None => sources = Some(fields.len() - 1),
            Some(n) if n != fields.len() - 1 => {
                return Err(Error::Manifest {
                    line,
                    message: format!("expected {n} references like earlier lines, found {}", fields.len() - 1),
                })
            }
            _ => {}
        }
        entries.push(ManifestEntry {
            line,
            mixture: resolve(fields[0].trim()),
            references: fields[1..].iter().map(|f| resolve(f.trim())).collect(),
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::si_snr;
    use proptest::prelude::*;

    #[test]
    fn mixtures_are_exact_sums_within_range() {
        for seed in 0..5 {
            let ex = synth_pair(seed, 0.25, 8000).unwrap();
            assert_eq!(ex.mixture.len(), 2000);
            for t in 0..ex.mixture.len() {
                assert_eq!(ex.mixture[t] - (ex.references[0][t] + ex.references[1][t]), 0.0);
                assert!(ex.mixture[t].abs() <= 1.0);
            }
            let b = SeparationBatch::new(&[ex], 8000).unwrap();
            assert!(b.is_additive());
        }
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(synth_pair(9, 0.1, 8000).unwrap(), synth_pair(9, 0.1, 8000).unwrap());
        assert_ne!(synth_pair(9, 0.1, 8000).unwrap(), synth_pair(10, 0.1, 8000).unwrap());
        assert!(synth_pair(1, 0.0, 8000).is_err());
    }

    #[test]
    fn sources_have_comparable_power() {
        for seed in 0..200 {
            let ex = synth_pair(seed, 0.25, 8000).unwrap();
            let v = si_snr(&ex.mixture, &ex.references[0]).unwrap();
            assert!(v.abs() <= 3.0, "seed {seed}: {v} dB");
        }
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        assert_eq!(split_sizes(100, &SplitSpec::default()).unwrap(), [69, 21, 10]);
        assert_eq!(split_sizes(10, &SplitSpec::default()).unwrap(), [7, 2, 1]);
        assert!(matches!(split(9, &SplitSpec::default(), 0), Err(Error::TooFewItems(9))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 10usize..400, seed in any::<u64>()) {
            let s = split(n, &SplitSpec::default(), seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.clone(), split(n, &SplitSpec::default(), seed).unwrap());
        }

        #[test]
        fn wav_round_trip_within_one_step(samples in proptest::collection::vec(-1.2f32..1.2, 0..200)) {
            let w = wav_decode(&wav_encode(&samples, 8000).unwrap()).unwrap();
            prop_assert_eq!(w.sample_rate, 8000);
            for (a, b) in samples.iter().zip(&w.samples) {
                let clamped = a.clamp(-1.0, 1.0 - 1.0 / 32768.0);
                prop_assert!((clamped - b).abs() <= 1.0 / 32768.0);
            }
            let again = wav_decode(&wav_encode(&w.samples, 8000).unwrap()).unwrap();
            prop_assert_eq!(again, w);
        }
    }

    #[test]
    fn wav_hand_values() {
        let w = wav_decode(&wav_encode(&[0.0, 0.5, -0.5], 8000).unwrap()).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -0.5]);
    }

    fn with_field(offset: usize, value: u16) -> Vec<u8> {
        let mut b = wav_encode(&[0.1, 0.2], 8000).unwrap();
        b[offset..offset + 2].copy_from_slice(&value.to_le_bytes());
        b
    }

    #[test]
    fn unsupported_wavs_name_the_field() {
        let field = |b: &[u8]| match wav_decode(b) {
            Err(Error::UnsupportedFormat { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut bad = wav_encode(&[0.0], 8000).unwrap();
        bad[0] = b'X';
        assert_eq!(field(&bad), "riff");
        assert_eq!(field(&with_field(20, 3)), "audio_format");
        assert_eq!(field(&with_field(22, 2)), "channels");
        assert_eq!(field(&with_field(34, 8)), "bits_per_sample");
        let good = wav_encode(&[0.1, 0.2], 8000).unwrap();
        assert!(matches!(wav_decode(&good[..good.len() - 1]), Err(Error::UnexpectedEof(_))));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\na.wav\tb.wav\tc.wav\n\n/abs/m.wav\tx.wav\ty.wav\n";
        let m = parse_manifest(text, Some(Path::new("/data"))).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].mixture, PathBuf::from("/data/a.wav"));
        assert_eq!(m[1].mixture, PathBuf::from("/abs/m.wav"));
        assert_eq!(m[1].line, 4);
        match parse_manifest("a\tb\tc\nbroken line\n", None) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_manifest("", None).unwrap().is_empty());
    }
}
