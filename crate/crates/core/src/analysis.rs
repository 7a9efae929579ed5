//! Excitation analysis of SE gates: capture per segment, average per tag,
//! sort channels, and reduce each SE block to one spread-across-tags value.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Cooccurrence, Dataset, SplitView};
use crate::error::{Error, Result};
use crate::eval::EVAL_BATCH;
use crate::model::Network;
use crate::tensor::{Layer, Session};

/// Gate values of every SE-bearing block, one row per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExcitationCapture {
    /// Zero-based block indices in the network.
    pub blocks: Vec<usize>,
    /// `gates[b][segment][channel]`.
    pub gates: Vec<Vec<Vec<f64>>>,
    /// Clip index of each captured segment.
    pub segment_clip: Vec<usize>,
}

/// Runs `net` in eval mode over every segment of `view`, recording the SE
/// gate vectors.
pub fn capture(net: &mut Network<f32>, view: &SplitView<'_>) -> Result<ExcitationCapture> {
    let blocks = net.se_block_indices();
    if blocks.is_empty() {
        return Err(Error::Config(format!(
            "{} network has no SE units to analyze",
            net.config.block_kind
        )));
    }
    let mut gates = vec![Vec::with_capacity(view.len()); blocks.len()];
    let idx: Vec<usize> = (0..view.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = view.batch(chunk)?;
        let mut sess = Session::inference().capturing_gates();
        net.forward(&x, &mut sess)?;
        let captured = sess.gates.take().unwrap_or_default();
        if captured.len() != blocks.len() {
            return Err(Error::State(format!(
                "captured {} gate tensors for {} SE blocks",
                captured.len(),
                blocks.len()
            )));
        }
        for (dst, g) in gates.iter_mut().zip(&captured) {
            for b in 0..chunk.len() {
                dst.push(g.item(b).iter().map(|&v| f64::from(v)).collect());
            }
        }
    }
    Ok(ExcitationCapture {
        blocks,
        gates,
        segment_clip: view.segments.iter().map(|s| s.clip).collect(),
    })
}

/// Mean gate activation per (tag, channel) for one block. Rows of tags that
/// no captured segment carries are absent (`None`).
#[derive(Clone, Debug, PartialEq)]
pub struct TagMeans {
    pub block: usize,
    pub tags: Vec<String>,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl TagMeans {
    pub fn channels(&self) -> usize {
        self.rows.iter().flatten().map(Vec::len).next().unwrap_or(0)
    }

    fn present(&self) -> Vec<&Vec<f64>> {
        self.rows.iter().flatten().collect()
    }
}

/// Averages each block's gates over the segments of every tag. A segment
/// counts toward every tag of its song.
pub fn tag_means(capture: &ExcitationCapture, dataset: &Dataset) -> Result<Vec<TagMeans>> {
    let k = dataset.vocab.len();
    let mut out = Vec::with_capacity(capture.blocks.len());
    for (&block, rows) in capture.blocks.iter().zip(&capture.gates) {
        if rows.len() != capture.segment_clip.len() {
            return Err(Error::Dimension(format!(
                "block {block}: {} gate rows for {} segments",
                rows.len(),
                capture.segment_clip.len()
            )));
        }
        let c = rows.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; c]; k];
        let mut counts = vec![0usize; k];
        for (row, &clip) in rows.iter().zip(&capture.segment_clip) {
            let tags = &dataset.clips[clip].tags;
            for t in (0..k).filter(|&t| tags[t]) {
                sums[t].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                counts[t] += 1;
            }
        }
        let rows = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        out.push(TagMeans {
            block,
            tags: dataset.vocab.names().to_vec(),
            rows,
        });
    }
    Ok(out)
}

/// Channel permutation by descending mean over the present tag rows; ties
/// keep channel order.
pub fn sort_channels(means: &TagMeans) -> Vec<usize> {
    let rows = means.present();
    let c = means.channels();
    let col: Vec<f64> = (0..c)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len().max(1) as f64)
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    order
}

/// How a block's tag-mean matrix is reduced to a single spread value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdReduction {
    /// Population std of each channel across tags, averaged over channels.
    #[default]
    AcrossTags,
    /// Population std of each tag row across channels, averaged over tags.
    AcrossChannels,
}

impl FromStr for StdReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "across-tags" => Ok(StdReduction::AcrossTags),
            "across-channels" => Ok(StdReduction::AcrossChannels),
            other => Err(Error::Config(format!(
                "unknown std reduction {other:?} (across-tags or across-channels)"
            ))),
        }
    }
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One value per block, ignoring absent tag rows.
pub fn std_profile(means: &[TagMeans], reduction: StdReduction) -> Vec<f64> {
    means
        .iter()
        .map(|m| {
            let rows = m.present();
            let per: Vec<f64> = match reduction {
                StdReduction::AcrossTags => (0..m.channels())
                    .map(|j| population_std(rows.iter().map(move |r| r[j])))
                    .collect(),
                StdReduction::AcrossChannels => rows
                    .iter()
                    .map(|r| population_std(r.iter().copied()))
                    .collect(),
            };
            mean(&per)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub means: TagMeans,
    pub order: Vec<usize>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExcitationReport {
    pub blocks: Vec<BlockReport>,
    pub reduction: StdReduction,
    pub cooccurrence: Option<Cooccurrence>,
}

impl ExcitationReport {
    pub fn from_means(means: Vec<TagMeans>, reduction: StdReduction) -> Self {
        let stds = std_profile(&means, reduction);
        let blocks = means
            .into_iter()
            .zip(stds)
            .map(|(m, std)| BlockReport {
                order: sort_channels(&m),
                means: m,
                std,
            })
            .collect();
        ExcitationReport {
            blocks,
            reduction,
            cooccurrence: None,
        }
    }
}

/// Capture, per-tag averaging, channel sorting and the std profile.
pub fn analyze(net: &mut Network<f32>, view: &SplitView<'_>, reduction: StdReduction) -> Result<ExcitationReport> {
    let cap = capture(net, view)?;
    Ok(ExcitationReport::from_means(tag_means(&cap, view.dataset)?, reduction))
}

/// File holding block `block`'s tag means; blocks are numbered from 1.
pub fn tag_means_file(block: usize) -> String {
    format!("block{}_tag_means.csv", block + 1)
}

pub const STD_PROFILE_FILE: &str = "std_profile.csv";
pub const LONG_TABLE_FILE: &str = "excitation_long.csv";
pub const COOCCURRENCE_FILE: &str = "cooccurrence.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one tag-mean matrix per block, the std profile, a long-format
/// table `(block, tag, channel_rank, value)` in sorted channel order, and
/// the co-occurrence matrix when present. Returns the written paths.
pub fn emit_report(report: &ExcitationReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut long = String::from("block,tag,channel_rank,value\n");
    let mut profile = String::from("block,std\n");
    for b in &report.blocks {
        let m = &b.means;
        let mut text = String::from("tag");
        for j in 0..m.channels() {
            write!(text, ",c{j}").unwrap();
        }
        text.push('\n');
        for (tag, row) in m.tags.iter().zip(&m.rows) {
            text.push_str(tag);
            match row {
                Some(r) => r.iter().for_each(|v| write!(text, ",{v}").unwrap()),
                None => (0..m.channels()).for_each(|_| text.push_str(",nan")),
            }
            text.push('\n');
            if let Some(r) = row {
                for (rank, &j) in b.order.iter().enumerate() {
                    writeln!(long, "{},{tag},{rank},{}", m.block + 1, r[j]).unwrap();
                }
            }
        }
        let path = dir.join(tag_means_file(m.block));
        write(&path, &text)?;
        written.push(path);
        writeln!(profile, "{},{}", m.block + 1, b.std).unwrap();
    }
    for (name, text) in [(STD_PROFILE_FILE, &profile), (LONG_TABLE_FILE, &long)] {
        let path = dir.join(name);
        write(&path, text)?;
        written.push(path);
    }
    if let Some(c) = &report.cooccurrence {
        let path = dir.join(COOCCURRENCE_FILE);
        write(&path, &c.to_csv())?;
        written.push(path);
    }
    Ok(written)
}

fn parse_value(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{}: bad number {s:?}", path.display())))
}

/// Reads a file written by [`emit_report`] for block `block`.
pub fn read_tag_means(path: impl AsRef<Path>, block: usize) -> Result<TagMeans> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tags = Vec::new();
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let mut fields = line.split(',');
        tags.push(fields.next().unwrap_or_default().to_string());
        let values = fields.map(|f| parse_value(f, path)).collect::<Result<Vec<f64>>>()?;
        rows.push(if values.iter().all(|v| v.is_nan()) && !values.is_empty() {
            None
        } else {
            Some(values)
        });
    }
    Ok(TagMeans { block, tags, rows })
}

/// Reads `std_profile.csv` as `(zero-based block, std)` pairs.
pub fn read_std_profile(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let (b, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("{}: bad row {line:?}", path.display())))?;
            let b: usize = b
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad block {b:?}", path.display())))?;
            Ok((b.saturating_sub(1), parse_value(v, path)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Clip, Split, TagVocabulary};

    fn dataset(tags: &[&[bool]]) -> Dataset {
        let k = tags[0].len();
        let vocab = TagVocabulary::new((0..k).map(|i| format!("t{i}")).collect()).unwrap();
        let clips = tags
            .iter()
            .enumerate()
            .map(|(i, t)| Clip {
                song_id: format!("s{i}"),
                waveform: vec![0.0; 9],
                tags: t.to_vec(),
                split: Split::Test,
            })
            .collect();
        Dataset::new(vocab, clips).unwrap()
    }

    fn means(rows: Vec<Option<Vec<f64>>>) -> TagMeans {
        TagMeans {
            block: 0,
            tags: (0..rows.len()).map(|i| format!("t{i}")).collect(),
            rows,
        }
    }

    #[test]
    fn hand_built_capture_averages() {
        let ds = dataset(&[&[true, false, false], &[true, true, false]]);
        let cap = ExcitationCapture {
            blocks: vec![2],
            gates: vec![vec![vec![0.2, 0.4], vec![0.4, 0.6], vec![0.9, 0.1]]],
            segment_clip: vec![0, 0, 1],
        };
        let m = &tag_means(&cap, &ds).unwrap()[0];
        let r0 = m.rows[0].as_ref().unwrap();
        assert!((r0[0] - 0.5).abs() < 1e-12 && (r0[1] - 1.1 / 3.0).abs() < 1e-12);
        assert_eq!(m.rows[1], Some(vec![0.9, 0.1]));
        assert_eq!(m.rows[2], None);
    }

    #[test]
    fn identical_song_sets_give_identical_rows() {
        let ds = dataset(&[&[true, true], &[false, false]]);
        let cap = ExcitationCapture {
            blocks: vec![0],
            gates: vec![vec![vec![0.3], vec![0.8]]],
            segment_clip: vec![0, 1],
        };
        let m = &tag_means(&cap, &ds).unwrap()[0];
        assert_eq!(m.rows[0], m.rows[1]);
        assert_eq!(m.rows[0], Some(vec![0.3]));
    }

    #[test]
    fn channel_sorting() {
        assert_eq!(sort_channels(&means(vec![Some(vec![0.2, 0.9, 0.5])])), vec![1, 2, 0]);
        assert_eq!(
            sort_channels(&means(vec![Some(vec![0.5; 4]), Some(vec![0.3; 4])])),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn std_examples() {
        let two = means(vec![Some(vec![0.4]), Some(vec![0.6])]);
        assert!((std_profile(&[two], StdReduction::AcrossTags)[0] - 0.1).abs() < 1e-12);
        let same = means(vec![Some(vec![0.3, 0.7]), Some(vec![0.3, 0.7]), None]);
        assert_eq!(std_profile(std::slice::from_ref(&same), StdReduction::AcrossTags), vec![0.0]);
        let alt = std_profile(&[same], StdReduction::AcrossChannels)[0];
        assert!((alt - 0.2).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = vec![
            TagMeans {
                block: 3,
                ..means(vec![Some(vec![0.123456789, 0.5]), None])
            },
            TagMeans {
                block: 4,
                ..means(vec![Some(vec![0.25, 0.75]), Some(vec![0.1, 0.2])])
            },
        ];
        let report = ExcitationReport::from_means(m, StdReduction::AcrossTags);
        let files = emit_report(&report, dir.path()).unwrap();
        assert_eq!(files.len(), report.blocks.len() + 2);
        for b in &report.blocks {
            let back = read_tag_means(dir.path().join(tag_means_file(b.means.block)), b.means.block).unwrap();
            assert_eq!(back, b.means);
        }
        let prof = read_std_profile(dir.path().join(STD_PROFILE_FILE)).unwrap();
        assert_eq!(prof, vec![(3, report.blocks[0].std), (4, report.blocks[1].std)]);
        let long = fs::read_to_string(dir.path().join(LONG_TABLE_FILE)).unwrap();
        assert_eq!(long.lines().count(), 1 + 2 + 4);
        assert!(long.lines().nth(1).unwrap().starts_with("4,t0,0,0.5"));
    }
}
