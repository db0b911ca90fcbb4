//! Synthetic benchmark corpus in the Speech Commands v0.02 directory layout.
//!
//! Each keyword gets a deterministic "voice print": a short sequence of
//! harmonic segments with keyword-specific base frequencies and slides.
//! Utterances vary by speaker pitch, onset, level, vibrato, and noise, so
//! classes are learnable but single examples are not trivially separable.
//! Useful for end-to-end runs and tests when the real corpus is absent.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::audio::{write_wav, SAMPLE_RATE};
use crate::dataset::{DatasetError, ALL_KEYWORDS, BACKGROUND_DIR};
use crate::seeds::{derive_rng, derive_seed};

#[derive(Clone, Debug)]
pub struct SynthCorpusConfig {
    pub seed: u64,
    pub files_per_keyword: usize,
    pub noise_files: usize,
    pub noise_seconds: usize,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            files_per_keyword: 40,
            noise_files: 2,
            noise_seconds: 30,
        }
    }
}

struct Segment {
    freq_start: f64,
    freq_end: f64,
    /// Relative duration weight within the utterance.
    weight: f64,
    /// Harmonic amplitude rolloff.
    rolloff: f64,
}

struct VoicePrint {
    segments: Vec<Segment>,
}

impl VoicePrint {
    fn for_keyword(seed: u64, keyword: &str) -> Self {
        let mut rng = derive_rng(seed, "synth-voice", &[derive_seed(0, keyword, &[])]);
        let n_segments = rng.gen_range(2..=3);
        let segments = (0..n_segments)
            .map(|_| {
                let base = (rng.gen_range(250f64.ln()..2600f64.ln())).exp();
                let slide = rng.gen_range(0.75..1.3);
                Segment {
                    freq_start: base,
                    freq_end: base * slide,
                    weight: rng.gen_range(0.6..1.4),
                    rolloff: rng.gen_range(0.35..0.65),
                }
            })
            .collect();
        Self { segments }
    }
}

/// Renders one utterance of a voice print into a 1-second clip.
fn render_utterance(print: &VoicePrint, rng: &mut ChaCha20Rng) -> Vec<f32> {
    let sr = f64::from(SAMPLE_RATE);
    let n = SAMPLE_RATE as usize;
    let mut clip = vec![0.0f64; n];

    let pitch = rng.gen_range(0.85..1.2);
    let voiced = rng.gen_range(0.45..0.75);
    let onset = rng.gen_range(0.0..(1.0 - voiced));
    let vibrato_hz = rng.gen_range(4.0..7.0);
    let vibrato_depth = rng.gen_range(0.0..0.02);
    let vibrato_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let total_weight: f64 = print.segments.iter().map(|s| s.weight).sum();
    let mut seg_start = onset;
    for seg in &print.segments {
        let seg_dur = voiced * seg.weight / total_weight;
        let i0 = (seg_start * sr) as usize;
        let i1 = (((seg_start + seg_dur) * sr) as usize).min(n);
        let len = i1.saturating_sub(i0).max(1);
        let mut phase = [0.0f64; 3];
        for (j, slot) in clip[i0..i1].iter_mut().enumerate() {
            let u = j as f64 / len as f64;
            // Raised-cosine fade over 15% of the segment at each end.
            let env = (u / 0.15).min((1.0 - u) / 0.15).min(1.0).max(0.0);
            let vib = 1.0
                + vibrato_depth
                    * (std::f64::consts::TAU * vibrato_hz * (seg_start + u * seg_dur)
                        + vibrato_phase)
                        .sin();
            let f0 = pitch * vib * (seg.freq_start + (seg.freq_end - seg.freq_start) * u);
            let mut v = 0.0;
            for (h, ph) in phase.iter_mut().enumerate() {
                let amp = seg.rolloff.powi(h as i32);
                *ph += std::f64::consts::TAU * f0 * (h + 1) as f64 / sr;
                v += amp * ph.sin();
            }
            *slot += env * v;
        }
        seg_start += seg_dur;
    }

    // Normalize the voiced part and add noise at a random SNR.
    let peak = clip.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    let level = rng.gen_range(0.3..0.8);
    let snr_db = rng.gen_range(14.0..30.0);
    let noise_amp = level * 10f64.powf(-snr_db / 20.0);
    clip.iter()
        .map(|&v| {
            let noise = noise_amp * rng.gen_range(-1.0..1.0);
            ((v / peak) * level + noise).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Low-passed noise with slow level modulation, for the background dir.
fn render_noise(seconds: usize, rng: &mut ChaCha20Rng) -> Vec<f32> {
    let n = seconds * SAMPLE_RATE as usize;
    let mut out = Vec::with_capacity(n);
    let mut state = 0.0f64;
    let pole = rng.gen_range(0.9..0.98);
    let mod_hz = rng.gen_range(0.1..0.4);
    for i in 0..n {
        let white: f64 = rng.gen_range(-1.0..1.0);
        state = pole * state + (1.0 - pole) * white;
        let level = 0.25 * (1.0 + 0.5 * (std::f64::consts::TAU * mod_hz * i as f64 / 16000.0).sin());
        out.push((state * level * 8.0).clamp(-1.0, 1.0) as f32);
    }
    out
}

/// Writes the full 35-keyword tree plus background noise under `root`.
/// Fully deterministic in `cfg.seed`.
pub fn generate_corpus(root: &Path, cfg: &SynthCorpusConfig) -> Result<(), DatasetError> {
    use rayon::prelude::*;
    ALL_KEYWORDS
        .par_iter()
        .map(|kw| -> Result<(), DatasetError> {
            let print = VoicePrint::for_keyword(cfg.seed, kw);
            let kw_tag = derive_seed(0, kw, &[]);
            for j in 0..cfg.files_per_keyword {
                let mut rng = derive_rng(cfg.seed, "synth-utterance", &[kw_tag, j as u64]);
                let samples = render_utterance(&print, &mut rng);
                write_wav(&root.join(kw).join(format!("u{j:04}.wav")), &samples)?;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>, DatasetError>>()?;
    for f in 0..cfg.noise_files {
        let mut rng = derive_rng(cfg.seed, "synth-noise", &[f as u64]);
        let samples = render_noise(cfg.noise_seconds, &mut rng);
        write_wav(
            &root.join(BACKGROUND_DIR).join(format!("noise{f}.wav")),
            &samples,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::scan_corpus;

    #[test]
    fn generated_tree_scans_as_a_full_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthCorpusConfig {
            seed: 1,
            files_per_keyword: 2,
            noise_files: 1,
            noise_seconds: 2,
        };
        generate_corpus(dir.path(), &cfg).unwrap();
        let index = scan_corpus(dir.path()).unwrap();
        assert_eq!(index.keywords().len(), 35);
        assert!(index.keywords().values().all(|v| v.len() == 2));
        assert_eq!(index.silence_sources().len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = SynthCorpusConfig {
            seed: 7,
            files_per_keyword: 1,
            noise_files: 1,
            noise_seconds: 1,
        };
        generate_corpus(d1.path(), &cfg).unwrap();
        generate_corpus(d2.path(), &cfg).unwrap();
        let a = std::fs::read(d1.path().join("zero").join("u0000.wav")).unwrap();
        let b = std::fs::read(d2.path().join("zero").join("u0000.wav")).unwrap();
        assert_eq!(a, b);
    }
}
