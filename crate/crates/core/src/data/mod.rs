//! Datasets: manifests, tag vocabularies, audio loading, segmentation,
//! tag co-occurrence and a synthetic tagged-audio generator.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub mod audio;
pub mod manifest;
pub mod synth;

pub use audio::{load_waveform, resample_linear, write_raw_f32, write_wav_pcm16, SAMPLE_RATE};
pub use manifest::{load_manifest, read_manifest, select_vocabulary, DatasetManifest, ManifestRow};
pub use synth::{export_dataset, synth_generate, AudioFormat, Signature, SynthConfig, SIGNATURES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!(
                "unknown split {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

/// Ordered tag names with a reverse index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Parse("empty tag name in vocabulary".into()));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate tag {n:?} in vocabulary")));
            }
        }
        Ok(TagVocabulary { names, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    /// Binary label vector; tags outside the vocabulary are ignored.
    pub fn encode<S: AsRef<str>>(&self, tags: &[S]) -> Vec<bool> {
        let mut v = vec![false; self.len()];
        for t in tags {
            if let Some(i) = self.index_of(t.as_ref()) {
                v[i] = true;
            }
        }
        v
    }
}

/// One song: mono waveform at [`SAMPLE_RATE`] with its label vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub song_id: String,
    pub waveform: Vec<f32>,
    pub tags: Vec<bool>,
    pub split: Split,
}

/// A window `[offset, offset + length)` of clip `clip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub clip: usize,
    pub offset: usize,
    pub length: usize,
}

/// Consecutive non-overlapping windows from sample 0; the remainder is
/// dropped. A clip shorter than one window yields no segments and a warning.
pub fn segment(clip_index: usize, clip: &Clip, input_len: usize) -> Vec<Segment> {
    let n = clip.waveform.len() / input_len.max(1);
    if n == 0 {
        warn!(
            "skipping {}: {} samples is shorter than one segment of {input_len}",
            clip.song_id,
            clip.waveform.len()
        );
    }
    (0..n)
        .map(|k| Segment {
            clip: clip_index,
            offset: k * input_len,
            length: input_len,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: TagVocabulary,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn new(vocab: TagVocabulary, clips: Vec<Clip>) -> Result<Self> {
        for c in &clips {
            if c.tags.len() != vocab.len() {
                return Err(Error::Data(format!(
                    "{}: {} labels for a vocabulary of {}",
                    c.song_id,
                    c.tags.len(),
                    vocab.len()
                )));
            }
        }
        Ok(Dataset { vocab, clips })
    }

    /// Loads every audio file named by `manifest`, labelled over `vocab`.
    pub fn load(manifest: &DatasetManifest, vocab: &TagVocabulary) -> Result<Self> {
        let clips = manifest
            .rows
            .iter()
            .map(|row| {
                Ok(Clip {
                    song_id: row.song_id.clone(),
                    waveform: load_waveform(&row.audio_path)?,
                    tags: vocab.encode(&row.tags),
                    split: row.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(vocab.clone(), clips)
    }

    /// All segments of the clips in `split` (every clip when `None`).
    pub fn view(&self, split: Option<Split>, input_len: usize) -> SplitView<'_> {
        let segments = self
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| split.is_none_or(|s| c.split == s))
            .flat_map(|(i, c)| segment(i, c, input_len))
            .collect();
        SplitView {
            dataset: self,
            segments,
        }
    }

    pub fn manifest_rows(&self) -> Vec<(String, Vec<String>)> {
        self.clips
            .iter()
            .map(|c| {
                let tags = c
                    .tags
                    .iter()
                    .zip(self.vocab.names())
                    .filter(|(on, _)| **on)
                    .map(|(_, n)| n.clone())
                    .collect();
                (c.song_id.clone(), tags)
            })
            .collect()
    }
}

/// A list of segments over a dataset, batched into network inputs.
#[derive(Clone, Debug)]
pub struct SplitView<'a> {
    pub dataset: &'a Dataset,
    pub segments: Vec<Segment>,
}

impl SplitView<'_> {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Distinct clip indices in first-seen order.
    pub fn clips(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for s in &self.segments {
            if out.last() != Some(&s.clip) && !out.contains(&s.clip) {
                out.push(s.clip);
            }
        }
        out
    }

    /// Waveforms `(B, input_len, 1)` and labels `(B, 1, num_tags)` for the
    /// segments at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let first = indices
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let len = self.segments[*first].length;
        let k = self.dataset.vocab.len();
        let mut x = Vec::with_capacity(indices.len() * len);
        let mut y = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            let s = self
                .segments
                .get(i)
                .ok_or_else(|| Error::Data(format!("segment index {i} out of range")))?;
            let clip = &self.dataset.clips[s.clip];
            x.extend_from_slice(&clip.waveform[s.offset..s.offset + s.length]);
            y.extend(clip.tags.iter().map(|&t| if t { 1.0f32 } else { 0.0 }));
        }
        Ok((
            Tensor::new(Shape::new(indices.len(), len, 1), x)?,
            Tensor::new(Shape::new(indices.len(), 1, k), y)?,
        ))
    }
}

/// Tag co-occurrence counts over songs: entry `(i, j)` counts songs carrying
/// both `tags[i]` and `tags[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cooccurrence {
    pub tags: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Cooccurrence {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag");
        for t in &self.tags {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (t, row) in self.tags.iter().zip(&self.counts) {
            out.push_str(t);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Co-occurrence of `tags` over `songs`, each given as its tag list.
/// Every requested tag must belong to `vocab`.
pub fn cooccurrence<S: AsRef<str>>(
    songs: &[(String, Vec<String>)],
    vocab: &TagVocabulary,
    tags: &[S],
) -> Result<Cooccurrence> {
    let tags: Vec<String> = tags.iter().map(|t| t.as_ref().to_string()).collect();
    for t in &tags {
        if vocab.index_of(t).is_none() {
            return Err(Error::Config(format!("tag {t:?} is not in the vocabulary")));
        }
    }
    let k = tags.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (_, song_tags) in songs {
        let has: Vec<bool> = tags.iter().map(|t| song_tags.contains(t)).collect();
        for i in 0..k {
            for j in 0..k {
                if has[i] && has[j] {
                    counts[i][j] += 1;
                }
            }
        }
    }
    Ok(Cooccurrence { tags, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize) -> Clip {
        Clip {
            song_id: "s".into(),
            waveform: (0..n).map(|i| i as f32).collect(),
            tags: vec![true],
            split: Split::Train,
        }
    }

    #[test]
    fn full_scale_segment_count() {
        let segs = segment(0, &clip(639_450), 59_049);
        assert_eq!(segs.len(), 10);
        assert_eq!(639_450 - 10 * 59_049, 48_960);
        let c = clip(639_450);
        let joined: Vec<f32> = segs
            .iter()
            .flat_map(|s| c.waveform[s.offset..s.offset + s.length].iter().copied())
            .collect();
        assert_eq!(joined, c.waveform[..10 * 59_049]);
    }

    #[test]
    fn segment_edges() {
        assert_eq!(segment(0, &clip(27), 27).len(), 1);
        assert!(segment(0, &clip(26), 27).is_empty());
    }

    fn songs(list: &[&[&str]]) -> Vec<(String, Vec<String>)> {
        list.iter()
            .enumerate()
            .map(|(i, t)| (i.to_string(), t.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn cooccurrence_example() {
        let vocab = TagVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let c = cooccurrence(&songs(&[&["a"], &["a", "b"], &["b"]]), &vocab, &["a", "b"]).unwrap();
        assert_eq!(c.counts, vec![vec![2, 1], vec![1, 2]]);
        let d = cooccurrence(&songs(&[&["a"], &["b"]]), &vocab, &["a", "b"]).unwrap();
        assert_eq!(d.counts, vec![vec![1, 0], vec![0, 1]]);
        assert!(cooccurrence(&songs(&[]), &vocab, &["z"]).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(TagVocabulary::new(vec!["a".into(), "a".into()]).is_err());
        let v = TagVocabulary::new(vec!["x".into(), "y".into()]).unwrap();
        assert_eq!(v.encode(&["y", "nope"]), vec![false, true]);
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert_eq!("validation".parse::<Split>().unwrap(), Split::Valid);
        assert!("dev".parse::<Split>().is_err());
    }
}
