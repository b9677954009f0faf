//! 16-bit PCM mono WAV files. Anything else is rejected.

use std::io::{Read, Seek};
use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};
use crate::io::atomic_write;

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedFormat("WAV encoding not supported".into()),
        other => Error::Format(format!("WAV: {other}")),
    }
}

pub fn read_wav<Rd: Read>(reader: Rd) -> Result<AudioClip> {
    let reader = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!("{:?} {}-bit, expected 16-bit PCM", spec.sample_format, spec.bits_per_sample)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0).map_err(map_hound))
        .collect::<Result<Vec<f32>>>()?;
    AudioClip::new(spec.sample_rate, samples)
}

pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let file = std::fs::File::open(path)?;
    read_wav(std::io::BufReader::new(file))
}

/// Quantizes one sample: clamp to [-1, 1], scale by 32768, round half away
/// from zero, saturate to the i16 range.
pub fn quantize(v: f32) -> i16 {
    (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav<W: std::io::Write + Seek>(clip: &AudioClip, writer: W) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::new(writer, spec).map_err(map_hound)?;
    for &v in &clip.samples {
        w.write_sample(quantize(v)).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        let mut buf = std::io::Cursor::new(Vec::new());
        write_wav(clip, &mut buf)?;
        std::io::Write::write_all(w, buf.get_ref())?;
        Ok(())
    })
}
