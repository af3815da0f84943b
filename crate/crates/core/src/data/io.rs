//! On-disk corpus: a tab-separated manifest plus one raw clip file per video.
//!
//! A clip file starts with eight little-endian 32-bit words (magic `VCCV`,
//! version, F, H, W, C, two reserved zeros) followed by `F*H*W*C`
//! little-endian `f32` values.

use std::fs;
use std::path::Path;

use super::synth::{Attributes, Clip, Corpus};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VIDEO_MAGIC: &[u8; 4] = b"VCCV";
pub const VIDEO_VERSION: u32 = 1;

pub fn video_to_bytes(frames: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::shape("video_to_bytes", s, &[0, 0, 0, 0]));
    }
    let mut w = Writer::new();
    w.bytes(VIDEO_MAGIC);
    w.u32(VIDEO_VERSION);
    for &e in s {
        w.len_u32(e)?;
    }
    w.u32(0);
    w.u32(0);
    w.f32s(frames.data());
    Ok(w.finish())
}

pub fn video_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes, "video file");
    r.magic(VIDEO_MAGIC)?;
    let version = r.u32()?;
    if version != VIDEO_VERSION {
        return Err(Error::Format(format!("unsupported video version {version}")));
    }
    let shape = (0..4).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    r.u32()?;
    r.u32()?;
    let data = r.f32s(shape.iter().product())?;
    if !r.is_at_end() {
        return Err(Error::Format("trailing bytes in video file".into()));
    }
    Tensor::new(shape, data)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub relpath: String,
    pub class_id: usize,
    pub multi_labels: Vec<usize>,
    pub caption: String,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        let labels: Vec<String> = self.multi_labels.iter().map(usize::to_string).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            self.relpath,
            self.class_id,
            labels.join(","),
            self.caption
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "manifest line has {} fields, expected 5: `{line}`",
                fields.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad integer `{s}` in manifest")))
        };
        let multi_labels = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3].split(',').map(num).collect::<Result<_>>()?
        };
        Ok(ManifestEntry {
            id: fields[0].to_string(),
            relpath: fields[1].to_string(),
            class_id: num(fields[2])?,
            multi_labels,
            caption: fields[4].to_string(),
        })
    }
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| e.to_line() + "\n").collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines().filter(|l| !l.is_empty()).map(ManifestEntry::parse).collect()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    write_file(path, text.as_bytes())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes `{split}.tsv`, `videos/{id}.vccv`, `classes.txt` and `labels.txt`
/// under `dir`.
pub fn write_corpus(dir: &Path, split: &str, corpus: &Corpus) -> Result<()> {
    let videos = dir.join("videos");
    fs::create_dir_all(&videos).map_err(|e| Error::io(&videos, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for clip in &corpus.clips {
        let relpath = format!("videos/{}.vccv", clip.id);
        write_file(&dir.join(&relpath), &video_to_bytes(&clip.frames)?)?;
        entries.push(ManifestEntry {
            id: clip.id.clone(),
            relpath,
            class_id: clip.class_id,
            multi_labels: clip.multi_labels.clone(),
            caption: clip.caption.clone(),
        });
    }
    write_file(&dir.join(format!("{split}.tsv")), manifest_to_string(&entries).as_bytes())?;
    write_lines(&dir.join("classes.txt"), &corpus.class_names)?;
    write_lines(&dir.join("labels.txt"), &corpus.label_names)
}

/// Reads a split written by [`write_corpus`]. Attributes are not stored on
/// disk and come back zeroed.
pub fn read_corpus(dir: &Path, split: &str) -> Result<Corpus> {
    let path = dir.join(format!("{split}.tsv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let clips = parse_manifest(&text)?
        .into_iter()
        .map(|e| {
            Ok(Clip {
                frames: video_from_bytes(&read_file(&dir.join(&e.relpath))?)?,
                id: e.id,
                class_id: e.class_id,
                multi_labels: e.multi_labels,
                caption: e.caption,
                attributes: Attributes {
                    size: 0,
                    speed: 0,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        class_names: read_lines(&dir.join("classes.txt"))?,
        label_names: read_lines(&dir.join("labels.txt"))?,
        clips,
    })
}
