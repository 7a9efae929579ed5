//! Synthetic tagged audio. Each tag is an acoustic signature; a song mixes
//! one to three signatures plus white noise at a fixed SNR and is labelled
//! with exactly the signatures it contains.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audio::{write_raw_f32, write_wav_pcm16, SAMPLE_RATE};
use super::{Clip, Dataset, Split, TagVocabulary};
use crate::error::{Error, Result};

/// Box-Muller draw from N(0, 1).
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Signature {
    /// Three partials at `hz · {0.97, 1, 1.03}`.
    SineBand { hz: f64 },
    /// Unit impulses every `period` samples.
    PulseTrain { period: usize },
    /// Linear sweep from `from_hz` to `to_hz`, restarting every `period` samples.
    Chirp { from_hz: f64, to_hz: f64, period: usize },
    /// White noise through a twice-applied first difference (`highpass`) or
    /// an 8-tap moving average, amplitude-modulated at `rate_hz`.
    AmNoise { highpass: bool, rate_hz: f64 },
}

/// The available signatures, in tag order. Families alternate so that any
/// prefix mixes tonal, impulsive, swept and noisy material.
pub const SIGNATURES: [(&str, Signature); 12] = [
    ("sine_220", Signature::SineBand { hz: 220.0 }),
    ("pulse_100", Signature::PulseTrain { period: 220 }),
    ("chirp_up", Signature::Chirp { from_hz: 500.0, to_hz: 2500.0, period: 1024 }),
    ("noise_high", Signature::AmNoise { highpass: true, rate_hz: 8.0 }),
    ("sine_1100", Signature::SineBand { hz: 1100.0 }),
    ("pulse_450", Signature::PulseTrain { period: 49 }),
    ("chirp_down", Signature::Chirp { from_hz: 6000.0, to_hz: 3000.0, period: 700 }),
    ("noise_low", Signature::AmNoise { highpass: false, rate_hz: 12.0 }),
    ("sine_3300", Signature::SineBand { hz: 3300.0 }),
    ("sine_7000", Signature::SineBand { hz: 7000.0 }),
    ("chirp_low", Signature::Chirp { from_hz: 1500.0, to_hz: 300.0, period: 1500 }),
    ("pulse_200", Signature::PulseTrain { period: 110 }),
];

const MOVING_AVERAGE_TAPS: usize = 8;

impl Signature {
    /// Whether frequency `hz` belongs to this signature's characteristic band.
    pub fn in_band(&self, hz: f64) -> bool {
        let sr = f64::from(SAMPLE_RATE);
        match *self {
            Signature::SineBand { hz: c } => (0.9 * c..=1.1 * c).contains(&hz),
            Signature::PulseTrain { period } => {
                let f0 = sr / period as f64;
                let k = (hz / f0).round();
                k >= 1.0 && (hz - k * f0).abs() <= 0.15 * f0
            }
            Signature::Chirp { from_hz, to_hz, .. } => {
                (0.9 * from_hz.min(to_hz)..=1.1 * from_hz.max(to_hz)).contains(&hz)
            }
            Signature::AmNoise { highpass: true, .. } => hz >= sr / 4.0,
            Signature::AmNoise { highpass: false, .. } => hz <= sr / MOVING_AVERAGE_TAPS as f64,
        }
    }

    /// `n` samples at [`SAMPLE_RATE`] with unit RMS and random phase.
    pub fn render(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let sr = f64::from(SAMPLE_RATE);
        let mut x: Vec<f64> = match *self {
            Signature::SineBand { hz } => {
                let partials: Vec<(f64, f64)> = [0.97, 1.0, 1.03]
                    .iter()
                    .map(|m| (m * hz, rng.gen_range(0.0..2.0 * PI)))
                    .collect();
                (0..n)
                    .map(|i| {
                        let t = i as f64 / sr;
                        partials.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum()
                    })
                    .collect()
            }
            Signature::PulseTrain { period } => {
                let start = rng.gen_range(0..period);
                (0..n)
                    .map(|i| if i % period == start { 1.0 } else { 0.0 })
                    .collect()
            }
            Signature::Chirp { from_hz, to_hz, period } => {
                let start = rng.gen_range(0..period);
                let dur = period as f64 / sr;
                (0..n)
                    .map(|i| {
                        let t = ((i + start) % period) as f64 / sr;
                        let phase = from_hz * t + (to_hz - from_hz) * t * t / (2.0 * dur);
                        (2.0 * PI * phase).sin()
                    })
                    .collect()
            }
            Signature::AmNoise { highpass, rate_hz } => {
                let pad = MOVING_AVERAGE_TAPS;
                let w: Vec<f64> = (0..n + pad).map(|_| standard_normal(rng)).collect();
                let filtered: Vec<f64> = if highpass {
                    (pad..n + pad)
                        .map(|i| w[i] - 2.0 * w[i - 1] + w[i - 2])
                        .collect()
                } else {
                    (pad..n + pad)
                        .map(|i| w[i + 1 - MOVING_AVERAGE_TAPS..=i].iter().sum::<f64>())
                        .collect()
                };
                let phase = rng.gen_range(0.0..2.0 * PI);
                filtered
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (0.6 + 0.4 * (2.0 * PI * rate_hz * i as f64 / sr + phase).sin()))
                    .collect()
            }
        };
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
        if rms > 0.0 {
            x.iter_mut().for_each(|v| *v /= rms);
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_songs: usize,
    pub num_tags: usize,
    pub input_len: usize,
    pub segments_per_song: usize,
    pub seed: u64,
    pub snr_db: f64,
    /// Train / valid fractions; the rest is test.
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_songs: 200,
            num_tags: 8,
            input_len: 2187,
            segments_per_song: 2,
            seed: 0,
            snr_db: 10.0,
            train_fraction: 0.7,
            valid_fraction: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tags == 0 || self.num_tags > SIGNATURES.len() {
            return Err(Error::Config(format!(
                "num_tags must be between 1 and {} available signatures, got {}",
                SIGNATURES.len(),
                self.num_tags
            )));
        }
        if self.num_songs == 0 || self.input_len == 0 || self.segments_per_song == 0 {
            return Err(Error::Config(
                "num_songs, input_len and segments_per_song must be positive".into(),
            ));
        }
        let (tr, va) = (self.train_fraction, self.valid_fraction);
        if !(0.0..=1.0).contains(&tr) || !(0.0..=1.0).contains(&va) || tr + va > 1.0 {
            return Err(Error::Config(format!("invalid split fractions {tr} / {va}")));
        }
        Ok(())
    }
}

/// Deals tags from a reshuffled deck so that label counts stay balanced.
struct Deck {
    cards: Vec<usize>,
    num_tags: usize,
}

impl Deck {
    fn draw(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut hand = Vec::with_capacity(k);
        let mut skipped = Vec::new();
        while hand.len() < k {
            if self.cards.is_empty() {
                self.cards = (0..self.num_tags).collect();
                self.cards.shuffle(rng);
            }
            let c = self.cards.pop().expect("refilled");
            if hand.contains(&c) {
                skipped.push(c);
            } else {
                hand.push(c);
            }
        }
        self.cards.extend(skipped);
        hand.sort_unstable();
        hand
    }
}

/// Builds the dataset in memory. Identical configs give identical datasets.
/// Samples lie on the 16-bit grid so a PCM export reloads bit-exactly.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = SIGNATURES[..cfg.num_tags]
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let vocab = TagVocabulary::new(names)?;
    let n = cfg.input_len * cfg.segments_per_song;

    let mut order: Vec<usize> = (0..cfg.num_songs).collect();
    order.shuffle(&mut rng);
    let n_train = ((cfg.train_fraction * cfg.num_songs as f64).round() as usize).min(cfg.num_songs);
    let n_valid = ((cfg.valid_fraction * cfg.num_songs as f64).round() as usize)
        .min(cfg.num_songs - n_train);
    let mut split = vec![Split::Test; cfg.num_songs];
    for (rank, &song) in order.iter().enumerate() {
        split[song] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    let mut deck = Deck {
        cards: Vec::new(),
        num_tags: cfg.num_tags,
    };
    let noise_ratio = 10f64.powf(-cfg.snr_db / 10.0);
    let mut clips = Vec::with_capacity(cfg.num_songs);
    for (song, &song_split) in split.iter().enumerate() {
        let k = rng.gen_range(1..=3usize).min(cfg.num_tags);
        let chosen = deck.draw(k, &mut rng);
        let mut mix = vec![0.0f64; n];
        for &t in &chosen {
            let amp = rng.gen_range(0.6..1.0);
            for (m, v) in mix.iter_mut().zip(SIGNATURES[t].1.render(n, &mut rng)) {
                *m += amp * v;
            }
        }
        let power = mix.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sigma = (power * noise_ratio).sqrt();
        for m in mix.iter_mut() {
            *m += sigma * standard_normal(&mut rng);
        }
        let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let gain = if peak > 0.0 { 0.9 / peak } else { 0.0 };
        let waveform = mix
            .iter()
            .map(|v| ((v * gain * 32768.0).round() / 32768.0) as f32)
            .collect();
        let mut tags = vec![false; cfg.num_tags];
        for &t in &chosen {
            tags[t] = true;
        }
        clips.push(Clip {
            song_id: format!("synth_{song:05}"),
            waveform,
            tags,
            split: song_split,
        });
    }
    Dataset::new(vocab, clips)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioFormat {
    Wav,
    F32,
}

impl std::str::FromStr for AudioFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wav" => Ok(AudioFormat::Wav),
            "f32" | "raw" => Ok(AudioFormat::F32),
            other => Err(Error::Config(format!("unknown audio format {other:?} (wav or f32)"))),
        }
    }
}

/// Writes `audio/<song_id>.{wav,f32}` and `manifest.csv` under `dir`.
pub fn export_dataset(data: &Dataset, dir: impl AsRef<Path>, format: AudioFormat) -> Result<()> {
    let dir = dir.as_ref();
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", manifest_path.display()));
    w.write_record(super::manifest::MANIFEST_COLUMNS).map_err(csv_err)?;
    for (clip, (_, tags)) in data.clips.iter().zip(data.manifest_rows()) {
        let file = match format {
            AudioFormat::Wav => format!("{}.wav", clip.song_id),
            AudioFormat::F32 => format!("{}.f32", clip.song_id),
        };
        let path = audio_dir.join(&file);
        match format {
            AudioFormat::Wav => write_wav_pcm16(&path, &clip.waveform, SAMPLE_RATE)?,
            AudioFormat::F32 => write_raw_f32(&path, &clip.waveform, SAMPLE_RATE)?,
        }
        let rel = format!("audio/{file}");
        let tags = tags.join("|");
        w.write_record([clip.song_id.as_str(), &rel, clip.split.name(), &tags])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))
}
