//! Deterministic synthetic captioned corpus: pentatonic melodies rendered
//! with a neutral content timbre or with one of several named style
//! timbres, some of which are held out from pretraining.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tvstyle_core::{DspConfig, MelSpectrogram, Waveform};

use crate::dsp::{wav, MelAnalyzer};
use crate::error::{Error, Result};

pub const CLIP_SECONDS: f64 = 5.0;
pub const DEFAULT_CONTENT_CLIPS: usize = 179;
pub const DEFAULT_STYLE_CLIPS: usize = 74;

const BPM: f64 = 120.0;
const GRID_SLOTS: usize = 20;
const PENTATONIC: [i32; 10] = [0, 2, 4, 7, 9, 12, 14, 16, 19, 21];
const BASE_HZ: f64 = 220.0;
const PEAK: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// `[n_partials, inharmonicity, rolloff, odd_only, attack_s, decay_per_s]`
    HarmonicStack,
    /// `[bandwidth_octaves, attack_s, decay_per_s, grain_rate_hz, center_ratio]`
    FilteredNoise,
    /// `[sweep_octaves, sweep_time_s, mod_ratio, mod_index, attack_s, decay_per_s]`
    FmChirp,
}

impl SynthKind {
    fn ranges(self) -> &'static [(f64, f64)] {
        match self {
            SynthKind::HarmonicStack => &[
                (1.0, 16.0),
                (0.0, 0.5),
                (0.0, 4.0),
                (0.0, 1.0),
                (0.0005, 0.5),
                (0.0, 30.0),
            ],
            SynthKind::FilteredNoise => &[(0.05, 4.0), (0.0005, 0.5), (0.0, 30.0), (0.0, 400.0), (0.25, 8.0)],
            SynthKind::FmChirp => &[
                (-3.0, 3.0),
                (0.002, 1.0),
                (0.0, 8.0),
                (0.0, 10.0),
                (0.0005, 0.5),
                (0.0, 30.0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub name: String,
    pub synth_kind: SynthKind,
    pub params: Vec<f64>,
    pub held_out: bool,
}

impl StyleSpec {
    pub fn new(name: &str, kind: SynthKind, params: &[f64], held_out: bool) -> Self {
        Self {
            name: name.to_string(),
            synth_kind: kind,
            params: params.to_vec(),
            held_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(char::is_whitespace) || self.name == "*" {
            return Err(Error::Config(format!(
                "style name {:?} must be a single vocabulary token",
                self.name
            )));
        }
        let ranges = self.synth_kind.ranges();
        if self.params.len() != ranges.len() {
            return Err(Error::Config(format!(
                "style {} expects {} parameters, got {}",
                self.name,
                ranges.len(),
                self.params.len()
            )));
        }
        for (i, (&p, &(lo, hi))) in self.params.iter().zip(ranges).enumerate() {
            if !(lo..=hi).contains(&p) {
                return Err(Error::Config(format!(
                    "style {} parameter {i} = {p} outside [{lo}, {hi}]",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Neutral timbre used for content melodies.
pub fn content_timbre() -> StyleSpec {
    StyleSpec::new(
        "tone",
        SynthKind::HarmonicStack,
        &[3.0, 0.0, 2.0, 0.0, 0.01, 2.0],
        false,
    )
}

/// Five pretraining styles plus two held-out ones (an inharmonic
/// instrument-like stack and a granular nature-like noise texture).
pub fn default_styles() -> Vec<StyleSpec> {
    use SynthKind::*;
    vec![
        StyleSpec::new("bell", HarmonicStack, &[8.0, 0.05, 0.7, 0.0, 0.002, 3.0], false),
        StyleSpec::new("pluck", HarmonicStack, &[12.0, 0.0, 1.2, 0.0, 0.002, 9.0], false),
        StyleSpec::new("organ", HarmonicStack, &[6.0, 0.0, 0.5, 1.0, 0.05, 0.0], false),
        StyleSpec::new("chirp", FmChirp, &[1.5, 0.08, 0.0, 0.0, 0.005, 4.0], false),
        StyleSpec::new("noiseburst", FilteredNoise, &[2.0, 0.001, 12.0, 0.0, 1.0], false),
        StyleSpec::new("glass", HarmonicStack, &[4.0, 0.12, 0.3, 0.0, 0.001, 1.5], true),
        StyleSpec::new("rain", FilteredNoise, &[3.0, 0.001, 1.0, 60.0, 4.0], true),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Content,
    Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub role: Role,
    /// Style name, or `"none"` for content clips.
    pub style_name: String,
    pub caption: String,
    pub seed: u64,
    pub wav_path: String,
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub content: usize,
    pub style: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_seed: u64,
    pub dsp_config: DspConfigRecord,
    pub styles: Vec<StyleSpec>,
    pub counts: RoleCounts,
    pub records: Vec<ClipRecord>,
}

/// Serializable mirror of [`DspConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfigRecord {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub ref_power: f64,
    pub gl_iters: usize,
    pub gl_seed: u64,
}

impl From<&DspConfig> for DspConfigRecord {
    fn from(c: &DspConfig) -> Self {
        Self {
            sample_rate: c.sample_rate,
            n_fft: c.n_fft,
            hop: c.hop,
            n_mels: c.n_mels,
            fmin: c.fmin,
            fmax: c.fmax,
            log_floor: c.log_floor,
            ref_power: c.ref_power,
            gl_iters: c.gl_iters,
            gl_seed: c.gl_seed,
        }
    }
}

impl From<&DspConfigRecord> for DspConfig {
    fn from(c: &DspConfigRecord) -> Self {
        Self {
            sample_rate: c.sample_rate,
            n_fft: c.n_fft,
            hop: c.hop,
            n_mels: c.n_mels,
            fmin: c.fmin,
            fmax: c.fmax,
            log_floor: c.log_floor,
            ref_power: c.ref_power,
            gl_iters: c.gl_iters,
            gl_seed: c.gl_seed,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ManifestLine {
    Header {
        corpus_seed: u64,
        dsp_config: DspConfigRecord,
        styles: Vec<StyleSpec>,
        counts: RoleCounts,
    },
    Clip(ClipRecord),
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl CorpusManifest {
    pub fn dsp(&self) -> DspConfig {
        (&self.dsp_config).into()
    }

    pub fn held_out_styles(&self) -> BTreeSet<&str> {
        self.styles
            .iter()
            .filter(|s| s.held_out)
            .map(|s| s.name.as_str())
            .collect()
    }

    pub fn style(&self, name: &str) -> Option<&StyleSpec> {
        self.styles.iter().find(|s| s.name == name)
    }

    /// Records whose captions may be used to pretrain the backbone.
    pub fn pretraining_records(&self) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| !r.held_out).collect()
    }

    pub fn record(&self, id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = ManifestLine::Header {
            corpus_seed: self.corpus_seed,
            dsp_config: self.dsp_config.clone(),
            styles: self.styles.clone(),
            counts: self.counts.clone(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&ManifestLine::Clip(r.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<ManifestLine>(line)? {
                ManifestLine::Header {
                    corpus_seed,
                    dsp_config,
                    styles,
                    counts,
                } => header = Some((corpus_seed, dsp_config, styles, counts)),
                ManifestLine::Clip(r) => records.push(r),
            }
        }
        let (corpus_seed, dsp_config, styles, counts) =
            header.ok_or_else(|| Error::Format("manifest has no header line".into()))?;
        Ok(Self {
            corpus_seed,
            dsp_config,
            styles,
            counts,
            records,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = std::fs::File::open(dir.join(MANIFEST_FILE))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(f).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Note {
    pub onset_s: f64,
    pub duration_s: f64,
    pub freq_hz: f64,
}

/// 8-16 pentatonic notes on an eighth-note grid at 120 BPM; the first note
/// always starts at time zero.
pub fn melody_notes(seed: u64) -> Vec<Note> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=16usize);
    let slot = 60.0 / BPM / 2.0;
    let mut slots: Vec<usize> = (1..GRID_SLOTS).collect();
    // Partial Fisher-Yates to pick n - 1 distinct onsets after slot 0.
    for i in 0..n - 1 {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let mut onsets: Vec<usize> = std::iter::once(0).chain(slots[..n - 1].iter().copied()).collect();
    onsets.sort_unstable();
    onsets
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let next = onsets.get(i + 1).copied().unwrap_or(GRID_SLOTS);
            let len = (next - s).min(4);
            let degree = PENTATONIC[rng.random_range(0..PENTATONIC.len())];
            Note {
                onset_s: s as f64 * slot,
                duration_s: len as f64 * slot,
                freq_hz: BASE_HZ * 2f64.powf(degree as f64 / 12.0),
            }
        })
        .collect()
}

fn envelope(t: f64, dur: f64, attack: f64, decay: f64) -> f64 {
    let a = if t < attack {
        t / attack
    } else {
        (-(t - attack) * decay).exp()
    };
    let release = 0.01;
    let tail = if t > dur - release {
        ((dur - t) / release).max(0.0)
    } else {
        1.0
    };
    a * tail
}

/// Band-pass biquad with 0 dB peak gain (RBJ cookbook).
struct Bandpass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Bandpass {
    fn new(center: f64, octaves: f64, sr: f64) -> Self {
        let w0 = TAU * center.min(0.45 * sr) / sr;
        let alpha = w0.sin() * ((2f64.ln() / 2.0) * octaves * w0 / w0.sin()).sinh();
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn render_note(out: &mut [f64], note: &Note, style: &StyleSpec, sr: f64, rng: &mut ChaCha8Rng) {
    let p = &style.params;
    let start = (note.onset_s * sr) as usize;
    let len = ((note.duration_s * sr) as usize).min(out.len().saturating_sub(start));
    let f0 = note.freq_hz;
    let nyquist = sr / 2.0;
    match style.synth_kind {
        SynthKind::HarmonicStack => {
            let (n_partials, inharm, rolloff, odd_only) = (p[0] as usize, p[1], p[2], p[3] >= 0.5);
            let (attack, decay) = (p[4], p[5]);
            let partials: Vec<(f64, f64)> = (1..=n_partials.max(1) * if odd_only { 2 } else { 1 })
                .filter(|k| !odd_only || k % 2 == 1)
                .map(|k| {
                    let kf = k as f64;
                    (f0 * kf * (1.0 + inharm * kf * kf).sqrt(), kf.powf(-rolloff))
                })
                .filter(|(f, _)| *f < 0.95 * nyquist)
                .collect();
            for i in 0..len {
                let t = i as f64 / sr;
                let env = envelope(t, note.duration_s, attack, decay);
                let s: f64 = partials.iter().map(|(f, a)| a * (TAU * f * t).sin()).sum();
                out[start + i] += env * s;
            }
        }
        SynthKind::FilteredNoise => {
            let (bw, attack, decay, grain_rate, center_ratio) = (p[0], p[1], p[2], p[3], p[4]);
            let mut bp = Bandpass::new(f0 * center_ratio, bw, sr);
            let grain_decay = 0.015;
            let mut grain = if grain_rate > 0.0 { 0.0 } else { 1.0 };
            for i in 0..len {
                let t = i as f64 / sr;
                if grain_rate > 0.0 {
                    grain *= (-1.0 / (grain_decay * sr)).exp();
                    if rng.random::<f64>() < grain_rate / sr {
                        grain = 1.0;
                    }
                }
                let white: f64 = rng.random_range(-1.0..1.0);
                let env = envelope(t, note.duration_s, attack, decay);
                out[start + i] += 3.0 * env * grain * bp.process(white);
            }
        }
        SynthKind::FmChirp => {
            let (sweep, sweep_t, mod_ratio, mod_index) = (p[0], p[1], p[2], p[3]);
            let (attack, decay) = (p[4], p[5]);
            let mut phase = 0.0;
            for i in 0..len {
                let t = i as f64 / sr;
                let f = (f0 * 2f64.powf(sweep * (-t / sweep_t).exp())).min(0.45 * sr);
                phase += TAU * f / sr;
                let m = mod_index * (TAU * mod_ratio * f0 * t).sin();
                let env = envelope(t, note.duration_s, attack, decay);
                out[start + i] += env * (phase + m).sin();
            }
        }
    }
}

/// Renders a 5-second melody with the given timbre. The note sequence
/// depends only on `seed`; the timbre's noise sources are seeded from it too.
pub fn synth_melody(seed: u64, timbre: &StyleSpec, cfg: &DspConfig) -> Result<Waveform> {
    timbre.validate()?;
    cfg.validate()?;
    let sr = cfg.sample_rate as f64;
    let n = (CLIP_SECONDS * sr).round() as usize;
    let mut buf = vec![0.0f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6e6f_6973_65));
    for note in melody_notes(seed) {
        render_note(&mut buf, &note, timbre, sr, &mut rng);
    }
    let peak = buf.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let gain = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    Ok(Waveform::new(
        buf.iter().map(|&s| (s * gain) as f32).collect(),
        cfg.sample_rate,
    )?)
}

pub fn style_caption(style: &str) -> String {
    format!("a {style} melody")
}

pub const CONTENT_CAPTION: &str = "a melody";

/// Plans the corpus (records only, nothing rendered).
pub fn plan_corpus(
    seed: u64,
    n_content: usize,
    n_style: usize,
    styles: &[StyleSpec],
    cfg: &DspConfig,
) -> Result<CorpusManifest> {
    if n_content == 0 || n_style == 0 {
        return Err(Error::Config(
            "corpus needs at least one content and one style clip".into(),
        ));
    }
    if !styles.iter().any(|s| s.held_out) {
        return Err(Error::Config("corpus needs at least one held-out style".into()));
    }
    let mut names = BTreeSet::new();
    for s in styles {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::Config(format!("duplicate style name {}", s.name)));
        }
    }
    cfg.validate()?;
    // Held-out styles first so that even tiny corpora contain one.
    let mut order: Vec<&StyleSpec> = styles.iter().filter(|s| s.held_out).collect();
    order.extend(styles.iter().filter(|s| !s.held_out));

    let mut records = Vec::with_capacity(n_content + n_style);
    for i in 0..n_style {
        let style = order[i % order.len()];
        let id = format!("style-{i:03}");
        records.push(ClipRecord {
            wav_path: format!("wav/{id}.wav"),
            id,
            role: Role::Style,
            style_name: style.name.clone(),
            caption: style_caption(&style.name),
            seed: derive_seed(seed, 1_000_000 + i as u64),
            held_out: style.held_out,
        });
    }
    for i in 0..n_content {
        let id = format!("content-{i:03}");
        records.push(ClipRecord {
            wav_path: format!("wav/{id}.wav"),
            id,
            role: Role::Content,
            style_name: "none".into(),
            caption: CONTENT_CAPTION.into(),
            seed: derive_seed(seed, i as u64),
            held_out: false,
        });
    }
    Ok(CorpusManifest {
        corpus_seed: seed,
        dsp_config: cfg.into(),
        styles: styles.to_vec(),
        counts: RoleCounts {
            content: n_content,
            style: n_style,
        },
        records,
    })
}

/// Renders the audio for one record of a planned corpus.
pub fn render_record(manifest: &CorpusManifest, record: &ClipRecord) -> Result<Waveform> {
    let cfg = manifest.dsp();
    let timbre = match record.role {
        Role::Content => content_timbre(),
        Role::Style => manifest
            .style(&record.style_name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown style {}", record.style_name)))?,
    };
    synth_melody(record.seed, &timbre, &cfg)
}

/// Plans, renders and writes the corpus (WAVs under `wav/` plus the
/// manifest) into `out_dir`.
pub fn build_corpus(
    seed: u64,
    n_content: usize,
    n_style: usize,
    styles: &[StyleSpec],
    cfg: &DspConfig,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    let manifest = plan_corpus(seed, n_content, n_style, styles, cfg)?;
    std::fs::create_dir_all(out_dir.join("wav"))?;
    for r in &manifest.records {
        let w = render_record(&manifest, r)?;
        wav::write_wav(&out_dir.join(&r.wav_path), &w)?;
    }
    let mut f = std::fs::File::create(out_dir.join(MANIFEST_FILE))?;
    f.write_all(manifest.to_jsonl()?.as_bytes())?;
    Ok(manifest)
}

/// A clip's record together with its full-length spectrogram.
#[derive(Debug, Clone)]
pub struct CorpusClip {
    pub record: ClipRecord,
    pub mel: MelSpectrogram,
}

/// Loads every clip's WAV from a written corpus and analyzes it.
pub fn load_clips(dir: &Path, manifest: &CorpusManifest) -> Result<Vec<CorpusClip>> {
    let an = MelAnalyzer::new(&manifest.dsp())?;
    manifest
        .records
        .iter()
        .map(|r| {
            let path: PathBuf = dir.join(&r.wav_path);
            let w = wav::read_wav(&path)?;
            Ok(CorpusClip {
                record: r.clone(),
                mel: an.mel_spectrogram(&w)?,
            })
        })
        .collect()
}

/// Renders clips in memory, quantized to 16-bit exactly as they would be
/// written, without touching the filesystem.
pub fn render_clips(manifest: &CorpusManifest) -> Result<Vec<CorpusClip>> {
    let an = MelAnalyzer::new(&manifest.dsp())?;
    manifest
        .records
        .iter()
        .map(|r| {
            let mut w = render_record(manifest, r)?;
            for s in w.samples.iter_mut() {
                *s = wav::quantize(*s) as f32 / i16::MAX as f32;
            }
            Ok(CorpusClip {
                record: r.clone(),
                mel: an.mel_spectrogram(&w)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms_envelope(w: &Waveform, block: usize) -> Vec<f64> {
        w.samples
            .chunks(block)
            .map(|c| (c.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
            .collect()
    }

    #[test]
    fn melody_is_deterministic_and_bounded() {
        let cfg = DspConfig::default();
        for style in default_styles() {
            let a = synth_melody(3, &style, &cfg).unwrap();
            let b = synth_melody(3, &style, &cfg).unwrap();
            assert_eq!(a, b, "{}", style.name);
            assert!(a.peak() <= 0.99);
            assert_eq!(a.samples.len(), 110_250);
        }
    }

    #[test]
    fn different_seeds_give_different_onset_envelopes() {
        let cfg = DspConfig::default();
        let t = content_timbre();
        let a = rms_envelope(&synth_melody(0, &t, &cfg).unwrap(), 2756);
        let b = rms_envelope(&synth_melody(1, &t, &cfg).unwrap(), 2756);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(diff > 0.01, "mean envelope difference {diff}");
        assert_ne!(melody_notes(0), melody_notes(1));
    }

    #[test]
    fn notes_follow_the_grid() {
        for seed in 0..50 {
            let notes = melody_notes(seed);
            assert!((8..=16).contains(&notes.len()));
            assert_eq!(notes[0].onset_s, 0.0);
            for n in &notes {
                let slot = n.onset_s / 0.25;
                assert!((slot - slot.round()).abs() < 1e-12);
                assert!(n.freq_hz >= 220.0 && n.freq_hz < 800.0);
            }
        }
    }

    #[test]
    fn invalid_style_parameters_are_rejected() {
        let mut s = default_styles()[0].clone();
        s.params[0] = 100.0;
        assert!(s.validate().is_err());
        s.params.pop();
        assert!(s.validate().is_err());
        let bad_name = StyleSpec::new("two words", SynthKind::FmChirp, &[1.0, 0.1, 0.0, 0.0, 0.01, 1.0], false);
        assert!(bad_name.validate().is_err());
    }

    #[test]
    fn default_counts_match_the_target_scale() {
        let m = plan_corpus(
            7,
            DEFAULT_CONTENT_CLIPS,
            DEFAULT_STYLE_CLIPS,
            &default_styles(),
            &DspConfig::default(),
        )
        .unwrap();
        assert_eq!(m.records.len(), 253);
        assert_eq!(m.records.iter().filter(|r| r.role == Role::Style).count(), 74);
        assert_eq!(m.records.iter().filter(|r| r.role == Role::Content).count(), 179);
        let ids: BTreeSet<_> = m.records.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), 253);
    }

    #[test]
    fn held_out_tokens_never_reach_pretraining_captions() {
        let m = plan_corpus(7, 40, 30, &default_styles(), &DspConfig::default()).unwrap();
        let held = m.held_out_styles();
        assert!(!held.is_empty());
        for r in m.pretraining_records() {
            for tok in r.caption.split_whitespace() {
                assert!(!held.contains(tok), "{} leaks {tok}", r.id);
            }
        }
        // Held-out clips exist and carry the templated caption.
        let held_clip = m.records.iter().find(|r| r.held_out).unwrap();
        assert_eq!(held_clip.caption, style_caption(&held_clip.style_name));
    }

    #[test]
    fn minimal_corpus_and_validation() {
        let m = plan_corpus(1, 1, 1, &default_styles(), &DspConfig::default()).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_ne!(m.records[0].role, m.records[1].role);
        assert!(plan_corpus(1, 0, 1, &default_styles(), &DspConfig::default()).is_err());
        let no_held: Vec<_> = default_styles().into_iter().filter(|s| !s.held_out).collect();
        assert!(plan_corpus(1, 1, 1, &no_held, &DspConfig::default()).is_err());
    }

    #[test]
    fn build_writes_identical_manifests_for_equal_seeds() {
        let cfg = DspConfig::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_corpus(5, 2, 2, &default_styles(), &cfg, a.path()).unwrap();
        build_corpus(5, 2, 2, &default_styles(), &cfg, b.path()).unwrap();
        let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        let loaded = CorpusManifest::load(a.path()).unwrap();
        assert_eq!(loaded.records.len(), 4);
        let clips = load_clips(a.path(), &loaded).unwrap();
        let hop = cfg.hop;
        for c in &clips {
            let w = wav::read_wav(&a.path().join(&c.record.wav_path)).unwrap();
            assert!((w.samples.len() as i64 - 110_250).abs() <= hop as i64);
        }
        // In-memory rendering matches what is read back from disk.
        let mem = render_clips(&loaded).unwrap();
        for (x, y) in clips.iter().zip(&mem) {
            assert!(x.mel.max_abs_diff(&y.mel) < 1e-4);
        }
    }
}
