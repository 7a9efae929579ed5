//! ROC-AUC per tag, macro averaging, and song-level predictions obtained by
//! averaging segment outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SplitView;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// ROC-AUC from the rank-sum statistic with average ranks for ties.
/// `None` when only one class is present.
pub fn auc_tag(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc_tag: length mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Song-level probabilities and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub tags: Vec<String>,
    pub song_ids: Vec<String>,
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<bool>>,
}

impl PredictionTable {
    /// Averages segment predictions per song. `segment_song[i]` is the song
    /// index of segment `i`; every song needs at least one segment.
    pub fn from_segments(
        tags: Vec<String>,
        songs: Vec<(String, Vec<bool>)>,
        segment_song: &[usize],
        segment_probs: &[Vec<f64>],
    ) -> Result<Self> {
        if segment_song.len() != segment_probs.len() {
            return Err(Error::Dimension(format!(
                "{} segment owners for {} segment predictions",
                segment_song.len(),
                segment_probs.len()
            )));
        }
        let k = tags.len();
        let mut sums = vec![vec![0.0; k]; songs.len()];
        let mut counts = vec![0usize; songs.len()];
        for (&s, p) in segment_song.iter().zip(segment_probs) {
            if s >= songs.len() || p.len() != k {
                return Err(Error::Dimension(format!(
                    "segment of song {s} with {} scores (songs {}, tags {k})",
                    p.len(),
                    songs.len()
                )));
            }
            sums[s].iter_mut().zip(p).for_each(|(a, b)| *a += b);
            counts[s] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("song {} has no segments", songs[i].0)));
        }
        let probs = sums
            .into_iter()
            .zip(&counts)
            .map(|(row, &c)| row.into_iter().map(|v| v / c as f64).collect())
            .collect();
        let (song_ids, labels) = songs.into_iter().unzip();
        Ok(PredictionTable {
            tags,
            song_ids,
            probs,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tags: Vec<String>,
    /// `None` for tags with a single class among the evaluated songs.
    pub per_tag: Vec<Option<f64>>,
    pub macro_auc: f64,
    pub songs: usize,
}

impl EvalReport {
    /// `tag,auc` rows (`nan` for undefined tags) followed by `macro,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (t, a) in self.tags.iter().zip(&self.per_tag) {
            match a {
                Some(v) => writeln!(out, "{t},{v:.6}").unwrap(),
                None => writeln!(out, "{t},nan").unwrap(),
            }
        }
        writeln!(out, "macro,{:.6}", self.macro_auc).unwrap();
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-tag AUC and their mean over the tags where it is defined. Fails with
/// a data error when no tag has both classes.
pub fn macro_auc(table: &PredictionTable) -> Result<EvalReport> {
    let per_tag: Vec<Option<f64>> = (0..table.tags.len())
        .map(|t| {
            let scores: Vec<f64> = table.probs.iter().map(|p| p[t]).collect();
            let labels: Vec<bool> = table.labels.iter().map(|l| l[t]).collect();
            auc_tag(&scores, &labels)
        })
        .collect();
    for (t, a) in table.tags.iter().zip(&per_tag) {
        if a.is_none() {
            log::warn!("tag {t} has a single class among the evaluated songs; excluded from the macro AUC");
        }
    }
    let defined: Vec<f64> = per_tag.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Data(format!(
            "no tag has both positive and negative songs among {}",
            table.song_ids.len()
        )));
    }
    Ok(EvalReport {
        tags: table.tags.clone(),
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_tag,
        songs: table.song_ids.len(),
    })
}

/// Anything mapping a `(B, L, 1)` batch to `(B, 1, K)` probabilities.
pub trait SegmentPredictor {
    fn predict_batch(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl SegmentPredictor for Network<f32> {
    fn predict_batch(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(x)
    }
}

pub const EVAL_BATCH: usize = 32;

/// Runs `model` over every segment of `view` and averages per song.
pub fn predict_view(model: &mut impl SegmentPredictor, view: &SplitView<'_>) -> Result<PredictionTable> {
    let clips = view.clips();
    let mut song_of_clip = std::collections::HashMap::new();
    for (i, &c) in clips.iter().enumerate() {
        song_of_clip.insert(c, i);
    }
    let idx: Vec<usize> = (0..view.len()).collect();
    let mut segment_probs = Vec::with_capacity(view.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = view.batch(chunk)?;
        let p = model.predict_batch(&x)?;
        for b in 0..chunk.len() {
            segment_probs.push(p.item(b).iter().map(|&v| f64::from(v)).collect());
        }
    }
    let segment_song: Vec<usize> = view.segments.iter().map(|s| song_of_clip[&s.clip]).collect();
    let songs = clips
        .iter()
        .map(|&c| {
            let clip = &view.dataset.clips[c];
            (clip.song_id.clone(), clip.tags.clone())
        })
        .collect();
    PredictionTable::from_segments(
        view.dataset.vocab.names().to_vec(),
        songs,
        &segment_song,
        &segment_probs,
    )
}

pub fn evaluate(model: &mut impl SegmentPredictor, view: &SplitView<'_>) -> Result<EvalReport> {
    if view.is_empty() {
        return Err(Error::Config("nothing to evaluate: no segments".into()));
    }
    macro_auc(&predict_view(model, view)?)
}
