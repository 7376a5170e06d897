use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Read a 16-bit PCM mono WAV. When `expected_rate` is given the file must
/// match it.
pub fn load_waveform(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    check_spec(&spec, expected_rate)?;
    let samples = reader.samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0)).collect::<std::result::Result<Vec<_>, _>>().map_err(wav_err)?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Read a WAV from any reader, for in-memory sources.
pub fn read_wav<R: std::io::Read>(reader: R, expected_rate: Option<u32>) -> Result<Waveform> {
    let wav_err = |source| Error::Wav { path: "<memory>".into(), source };
    let mut reader = hound::WavReader::new(reader).map_err(wav_err)?;
    let spec = reader.spec();
    check_spec(&spec, expected_rate)?;
    let samples = reader.samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0)).collect::<std::result::Result<Vec<_>, _>>().map_err(wav_err)?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

fn check_spec(spec: &WavSpec, expected_rate: Option<u32>) -> Result<()> {
    if spec.channels != 1 {
        return Err(Error::Format { property: "channel count", found: spec.channels.to_string(), expected: "1".into() });
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format {
            property: "encoding",
            found: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
            expected: "16-bit integer PCM".into(),
        });
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::Format { property: "sample rate", found: spec.sample_rate.to_string(), expected: rate.to_string() });
        }
    }
    Ok(())
}

/// Write samples as 16-bit PCM, clamping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

pub(crate) fn quantize(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: WavSpec, samples: &[i32]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            if spec.bits_per_sample == 16 {
                w.write_sample(s as i16).unwrap();
            } else {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    fn mono16(rate: u32) -> WavSpec {
        WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: SampleFormat::Int }
    }

    #[test]
    fn one_second_file_keeps_its_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, mono16(16000), &vec![100; 16000]);
        let w = load_waveform(&p, Some(16000)).unwrap();
        assert_eq!(w.len(), 16000);
    }

    #[test]
    fn zeros_stay_zero_and_full_scale_maps_to_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_raw(&p, mono16(16000), &[0, 0, 0, 32767, -32768]);
        let w = load_waveform(&p, None).unwrap();
        assert!(w.samples[..3].iter().all(|&s| s == 0.0));
        assert!((w.samples[3] as f64 - 32767.0 / 32768.0).abs() < 1e-9);
        assert_eq!(w.samples[4], -1.0);
    }

    #[test]
    fn format_errors_name_the_property() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("s.wav");
        write_raw(&stereo, WavSpec { channels: 2, ..mono16(16000) }, &[0, 0]);
        let err = load_waveform(&stereo, None).unwrap_err();
        assert!(matches!(err, Error::Format { property: "channel count", .. }), "{err}");

        let rate = dir.path().join("r.wav");
        write_raw(&rate, mono16(8000), &[0; 8]);
        let err = load_waveform(&rate, Some(16000)).unwrap_err();
        assert!(matches!(err, Error::Format { property: "sample rate", .. }), "{err}");

        let wide = dir.path().join("w.wav");
        write_raw(&wide, WavSpec { bits_per_sample: 24, ..mono16(16000) }, &[0; 8]);
        let err = load_waveform(&wide, None).unwrap_err();
        assert!(matches!(err, Error::Format { property: "encoding", .. }), "{err}");
    }

    #[test]
    fn write_then_read_is_exact_for_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.wav");
        let samples: Vec<f32> = (-50..50).map(|i| i as f32 * 300.0 / 32768.0).collect();
        write_wav(&p, &Waveform::new(samples.clone(), 16000)).unwrap();
        assert_eq!(load_waveform(&p, Some(16000)).unwrap().samples, samples);
    }
}
