//! CSV manifests with header `song_id,audio_path,split,tags`, tags
//! separated by `|`. Relative audio paths resolve against the manifest's
//! directory.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use log::info;

use super::{Split, TagVocabulary};
use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 4] = ["song_id", "audio_path", "split", "tags"];
pub const TAG_SEPARATOR: char = '|';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub song_id: String,
    pub audio_path: PathBuf,
    pub split: Split,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn split_count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    /// Keeps only the songs with at least one tag in `vocab`.
    pub fn restrict(&self, vocab: &TagVocabulary) -> DatasetManifest {
        let rows: Vec<ManifestRow> = self
            .rows
            .iter()
            .filter(|r| r.tags.iter().any(|t| vocab.index_of(t).is_some()))
            .cloned()
            .collect();
        let dropped = self.rows.len() - rows.len();
        if dropped > 0 {
            info!("dropped {dropped} songs with no selected tag");
        }
        DatasetManifest { rows }
    }

    /// `(song_id, tags)` pairs, the input of co-occurrence counting.
    pub fn song_tags(&self) -> Vec<(String, Vec<String>)> {
        self.rows
            .iter()
            .map(|r| (r.song_id.clone(), r.tags.clone()))
            .collect()
    }
}

/// Parses a manifest without selecting a vocabulary.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("header: {e}")))?
        .clone();
    let mut col = [0usize; 4];
    for (slot, name) in col.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column {name:?}")))?;
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let song_id = field(col[0]).to_string();
        if song_id.is_empty() {
            return Err(Error::Parse(format!("line {line}: empty song_id")));
        }
        if !seen.insert(song_id.clone()) {
            return Err(Error::Parse(format!("line {line}: duplicate song_id {song_id:?}")));
        }
        let audio = field(col[1]);
        if audio.is_empty() {
            return Err(Error::Parse(format!("line {line}: empty audio_path")));
        }
        let split = field(col[2])
            .parse::<Split>()
            .map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let mut tags: Vec<String> = field(col[3])
            .split(TAG_SEPARATOR)
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        tags.dedup();
        rows.push(ManifestRow {
            song_id,
            audio_path: base.join(audio),
            split,
            tags,
        });
    }
    Ok(DatasetManifest { rows })
}

/// The `k` most frequent tags of the training split, ties broken by name.
pub fn select_vocabulary(manifest: &DatasetManifest, k: usize) -> Result<TagVocabulary> {
    if k == 0 {
        return Err(Error::Config("number of tags must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in manifest.rows.iter().filter(|r| r.split == Split::Train) {
        for t in &r.tags {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if ranked.len() < k {
        log::warn!("only {} distinct training tags, fewer than {k}", ranked.len());
    }
    TagVocabulary::new(ranked.into_iter().take(k).map(|(t, _)| t.to_string()).collect())
}

/// Reads a manifest, selects the top-`k` training tags and drops songs with
/// none of them. Both the raw and filtered training splits must be non-empty.
pub fn load_manifest(path: impl AsRef<Path>, k: usize) -> Result<(DatasetManifest, TagVocabulary)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    if manifest.split_count(Split::Train) == 0 {
        return Err(Error::Parse(format!("{}: train split is empty", path.display())));
    }
    let vocab = select_vocabulary(&manifest, k)?;
    let manifest = manifest.restrict(&vocab);
    if manifest.split_count(Split::Train) == 0 {
        return Err(Error::Parse(format!(
            "{}: no training song carries a selected tag",
            path.display()
        )));
    }
    Ok((manifest, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(text, Path::new("/data"))
    }

    #[test]
    fn frequency_rule_drops_untagged_songs() {
        let m = parse("song_id,audio_path,split,tags\n1,a.wav,train,a\n2,b.wav,train,a\n3,c.wav,train,b\n")
            .unwrap();
        let v = select_vocabulary(&m, 1).unwrap();
        assert_eq!(v.names(), ["a"]);
        let kept = m.restrict(&v);
        assert_eq!(kept.rows.len(), 2);
        assert!(kept.rows.iter().all(|r| r.song_id != "3"));
        assert_eq!(kept.rows[0].audio_path, Path::new("/data/a.wav"));
    }

    #[test]
    fn ties_break_lexicographically() {
        let m = parse("song_id,audio_path,split,tags\n1,x,train,zeta|beta\n2,y,train,alpha\n").unwrap();
        assert_eq!(select_vocabulary(&m, 2).unwrap().names(), ["alpha", "beta"]);
    }

    #[test]
    fn vocabulary_ignores_other_splits() {
        let m = parse("song_id,audio_path,split,tags\n1,x,train,a\n2,y,test,b\n3,z,test,b\n").unwrap();
        assert_eq!(select_vocabulary(&m, 1).unwrap().names(), ["a"]);
    }

    #[test]
    fn errors_are_descriptive() {
        let e = parse("song_id,audio_path,tags\n1,x,a\n").unwrap_err();
        assert!(e.to_string().contains("split"), "{e}");
        let e = parse("song_id,audio_path,split,tags\n1,x,train,a\n1,y,train,b\n").unwrap_err();
        assert!(e.to_string().contains("duplicate song_id"), "{e}");
        let e = parse("song_id,audio_path,split,tags\n1,x,holdout,a\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "song_id,audio_path,split,tags\n1,x,test,a\n").unwrap();
        let e = load_manifest(&p, 1).unwrap_err();
        assert!(e.to_string().contains("train split is empty"), "{e}");
    }
}
