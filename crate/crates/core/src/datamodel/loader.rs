use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::records::{DatasetSplit, RecordLimits, TextRecord, VideoRecord};
use crate::error::{Error, Result};

pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const TEXTS_FILE: &str = "texts.jsonl";

/// Parses one record per non-blank line. Errors carry the 1-based line number.
pub fn parse_jsonl<T: DeserializeOwned>(source: &str, name: &str) -> Result<Vec<T>> {
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: name.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_videos(source: &str, name: &str) -> Result<Vec<VideoRecord>> {
    parse_jsonl(source, name)
}

pub fn parse_texts(source: &str, name: &str) -> Result<Vec<TextRecord>> {
    parse_jsonl(source, name)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_fixtures(videos_path: &Path, texts_path: &Path, limits: &RecordLimits) -> Result<DatasetSplit> {
    let videos = parse_videos(&read(videos_path)?, &videos_path.display().to_string())?;
    let texts = parse_texts(&read(texts_path)?, &texts_path.display().to_string())?;
    DatasetSplit::new(videos, texts, limits)
}

/// Loads `videos.jsonl` and `texts.jsonl` from a directory.
pub fn load_dir(dir: &Path, limits: &RecordLimits) -> Result<DatasetSplit> {
    load_fixtures(&dir.join(VIDEOS_FILE), &dir.join(TEXTS_FILE), limits)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

pub fn write_dir(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(VIDEOS_FILE), to_jsonl(&split.videos)?.as_bytes())?;
    write_file(&dir.join(TEXTS_FILE), to_jsonl(&split.texts)?.as_bytes())
}
