//! On-disk dataset layout: `clips/<id>.wav` (16-bit PCM mono),
//! `annotations.jsonl` (one [`ClipAnnotation`] per line) and `classes.json`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{ClipAnnotation, SynthClip};
use crate::error::{Error, Result};

pub const CLIPS_DIR: &str = "clips";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetClip {
    pub annotation: ClipAnnotation,
    pub waveform: Vec<f64>,
    pub sample_rate: u32,
}

pub fn write_wav(path: &Path, waveform: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &x in waveform {
        let q = (x.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Reads a mono 16-bit wav into samples scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Config(format!(
            "{}: expected 16-bit PCM mono, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok((samples, spec.sample_rate))
}

pub fn write_annotations(path: &Path, annotations: &[ClipAnnotation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ann in annotations {
        let line = serde_json::to_string(ann).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<ClipAnnotation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_class_map(path: &Path, names: &[String]) -> Result<()> {
    let text = serde_json::to_string_pretty(names).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_class_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        line: source.line(),
        source,
    })
}

pub fn write_dataset(dir: &Path, clips: &[SynthClip], class_names: &[String], sample_rate: u32) -> Result<()> {
    let clip_dir = dir.join(CLIPS_DIR);
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    for clip in clips {
        let path = clip_dir.join(format!("{}.wav", clip.annotation.clip_id));
        write_wav(&path, &clip.waveform, sample_rate)?;
    }
    let anns: Vec<ClipAnnotation> = clips.iter().map(|c| c.annotation.clone()).collect();
    write_annotations(&dir.join(ANNOTATIONS_FILE), &anns)?;
    write_class_map(&dir.join(CLASSES_FILE), class_names)
}

/// Loads every annotated clip of a dataset directory, validating annotations
/// against the class map.
pub fn read_dataset(dir: &Path) -> Result<(Vec<DatasetClip>, Vec<String>)> {
    let classes = read_class_map(&dir.join(CLASSES_FILE))?;
    let anns = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let mut clips = Vec::with_capacity(anns.len());
    for annotation in anns {
        annotation.validate(classes.len())?;
        let path: PathBuf = dir.join(CLIPS_DIR).join(format!("{}.wav", annotation.clip_id));
        let (waveform, sample_rate) = read_wav(&path)?;
        clips.push(DatasetClip {
            annotation,
            waveform,
            sample_rate,
        });
    }
    Ok((clips, classes))
}
