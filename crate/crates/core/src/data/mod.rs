//! Manifests, WAV I/O, the character tokenizer and the synthetic two-domain corpus.

pub mod synth;
pub mod tokenizer;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frontend::SAMPLE_RATE;

pub use synth::{synth_generate, DomainSpec};
pub use tokenizer::Tokenizer;

/// Lowercase and collapse runs of whitespace to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub enum Audio {
    Path(PathBuf),
    Pcm(Vec<i16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub audio: Audio,
    pub transcript: String,
}

impl Utterance {
    pub fn samples(&self) -> Result<Vec<i16>> {
        match &self.audio {
            Audio::Pcm(s) => Ok(s.clone()),
            Audio::Path(p) => read_wav(p),
        }
    }
}

/// Reads `utt_id<TAB>audio_path<TAB>transcript` lines. Relative audio paths
/// are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let (id, audio, transcript) = (fields[0].trim(), fields[1].trim(), normalize_text(fields[2]));
        if id.is_empty() {
            return Err(err(lineno, "empty utterance id".into()));
        }
        if transcript.is_empty() {
            return Err(err(lineno, format!("utterance {id} has an empty transcript")));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(lineno, format!("duplicate utterance id {id}")));
        }
        let audio_path = PathBuf::from(audio);
        let audio_path = if audio_path.is_absolute() { audio_path } else { base.join(audio_path) };
        out.push(Utterance {
            utt_id: id.to_string(),
            audio: Audio::Path(audio_path),
            transcript,
        });
    }
    Ok(out)
}

/// Writes a manifest; in-memory audio is first saved as `<audio_dir>/<utt_id>.wav`.
pub fn write_manifest(path: &Path, utts: &[Utterance], audio_dir: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(audio_dir)?;
    let mut f = fs::File::create(path)?;
    for u in utts {
        let wav = match &u.audio {
            Audio::Path(p) => p.clone(),
            Audio::Pcm(s) => {
                let p = audio_dir.join(format!("{}.wav", u.utt_id));
                write_wav(&p, s)?;
                p
            }
        };
        let shown = wav.strip_prefix(base).unwrap_or(&wav);
        writeln!(f, "{}\t{}\t{}", u.utt_id, shown.display(), u.transcript)?;
    }
    Ok(())
}

/// Mono 16-bit PCM at 16 kHz only; anything else is rejected rather than converted.
pub fn read_wav(path: &Path) -> Result<Vec<i16>> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::invalid(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    Ok(reader.into_samples::<i16>().collect::<std::result::Result<_, _>>()?)
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}
