use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tvstyle_core::{MelSpectrogram, Waveform};

use super::config::RunConfig;
use crate::corpus::{build_corpus, load_clips, CorpusClip, CorpusManifest, Role};
use crate::diffusion::{corpus_hash, into_checkpoint, new_trainer, training_clips, Checkpoint, Trainer};
use crate::dsp::render::write_spectrogram_png;
use crate::dsp::{melfile, wav, MelAnalyzer};
use crate::error::{Error, Result};
use crate::inversion::{
    embedding_trajectory, invert_style, InversionArtifact, InversionConfig, InversionMode, StyleClip,
};
use crate::metrics::{liveliest_window, run_benchmark, ArtifactSet, BenchPair, BenchmarkConfig, MetricReport};
use crate::stylize::{stylize, StylizationRequest, StylizationResult};

pub fn cmd_corpus(cfg: &RunConfig) -> Result<CorpusManifest> {
    let dir = cfg.corpus_dir();
    let t0 = Instant::now();
    let m = build_corpus(
        cfg.corpus.seed,
        cfg.corpus.n_content,
        cfg.corpus.n_style,
        &cfg.corpus.styles,
        &cfg.dsp(),
        &dir,
    )?;
    cfg.write_resolved(&dir)?;
    log::info!(
        "wrote {} clips to {} in {:.1}s",
        m.records.len(),
        dir.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(m)
}

/// Loads the corpus written by [`cmd_corpus`].
pub fn open_corpus(cfg: &RunConfig) -> Result<(CorpusManifest, Vec<CorpusClip>)> {
    let dir = cfg.corpus_dir();
    let m = CorpusManifest::load(&dir).map_err(|e| {
        Error::Input(format!(
            "no corpus at {} ({e}); run `tvstyle corpus` first",
            dir.display()
        ))
    })?;
    if m.dsp() != cfg.dsp() {
        return Err(Error::Config(format!(
            "corpus at {} was analyzed with different dsp settings",
            dir.display()
        )));
    }
    let clips = load_clips(&dir, &m)?;
    Ok((m, clips))
}

fn append_loss(path: &Path, step: u64, loss: f64) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,loss")?;
    }
    writeln!(f, "{step},{loss:.6}")?;
    Ok(())
}

/// Trains (or resumes) the diffusion model, checkpointing periodically.
pub fn cmd_pretrain(cfg: &RunConfig, resume: bool) -> Result<Checkpoint> {
    let (manifest, clips) = open_corpus(cfg)?;
    let path = cfg.checkpoint_path();
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&path, DType::F32, false)?;
        if ckpt.meta.corpus_hash != corpus_hash(&manifest)? {
            return Err(Error::Config(format!(
                "{} was trained on a different corpus",
                path.display()
            )));
        }
        if ckpt.meta.model != cfg.model {
            return Err(Error::Config(
                "model section differs from the checkpoint being resumed".into(),
            ));
        }
        let train = crate::diffusion::TrainConfig {
            epochs: cfg.train.epochs,
            ..ckpt.meta.train.clone()
        };
        if train != cfg.train {
            log::warn!("resuming with the checkpoint's training settings; only train.epochs is taken from the config");
        }
        let data = training_clips(&ckpt.model, &clips)?;
        let mut t = Trainer::new(ckpt.model, data, train)?;
        t.resume(ckpt.meta.progress, &ckpt.optimizer)?;
        log::info!("resuming at step {} of {}", t.progress.step, t.total_steps());
        t
    } else {
        new_trainer(&manifest, &clips, &cfg.model, &cfg.train)?
    };
    if let Some(dir) = path.parent() {
        cfg.write_resolved(dir)?;
    }
    let loss_csv = path.with_extension("loss.csv");
    if !resume && loss_csv.exists() {
        std::fs::remove_file(&loss_csv)?;
    }
    let t0 = Instant::now();
    let total = trainer.total_steps();
    while !trainer.finished() {
        let next = (trainer.progress.step / cfg.run.save_every + 1) * cfg.run.save_every;
        let mut io_err = None;
        trainer.run(Some(next), |p| {
            if let Err(e) = append_loss(&loss_csv, p.step, *p.losses.last().unwrap_or(&f64::NAN)) {
                io_err.get_or_insert(e);
            }
            if p.step % cfg.run.log_every == 0 {
                log::info!(
                    "step {}/{total} loss {:.4} ({:.0}s)",
                    p.step,
                    p.recent_loss(cfg.run.log_every as usize).unwrap_or(f64::NAN),
                    t0.elapsed().as_secs_f64()
                );
            }
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }
        let (meta, optimizer) = crate::diffusion::snapshot(&trainer, &manifest)?;
        Checkpoint::save_parts(&trainer.model, &meta, &optimizer, &path)?;
    }
    into_checkpoint(trainer, &manifest)
}

pub fn load_frozen(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path();
    Checkpoint::load(&path, DType::F32, true).map_err(|e| {
        Error::Input(format!(
            "cannot load checkpoint {} ({e}); run `tvstyle pretrain` first",
            path.display()
        ))
    })
}

/// The first `n` corpus clips of a style.
pub fn style_clips<'a>(clips: &'a [CorpusClip], style: &str, n: usize) -> Result<Vec<&'a CorpusClip>> {
    let picked: Vec<&CorpusClip> = clips
        .iter()
        .filter(|c| c.record.role == Role::Style && c.record.style_name == style)
        .take(n)
        .collect();
    if picked.is_empty() {
        return Err(Error::Config(format!("the corpus has no clips of style {style:?}")));
    }
    Ok(picked)
}

pub fn artifact_path(cfg: &RunConfig, style: &str, mode: InversionMode) -> PathBuf {
    let tag = match mode {
        InversionMode::Tve => "tve",
        InversionMode::Fixed => "fixed",
    };
    cfg.inversions_dir().join(format!("{style}-{tag}.tvck"))
}

/// Learns the pseudo-word for `style` and saves it with its loss curve.
pub fn cmd_invert(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    clips: &[CorpusClip],
    style: &str,
    inv: &InversionConfig,
) -> Result<InversionArtifact> {
    let refs = style_clips(clips, style, cfg.run.style_clips)?;
    let sc: Vec<StyleClip> = refs
        .iter()
        .map(|c| StyleClip {
            id: &c.record.id,
            mel: &c.mel,
        })
        .collect();
    let t0 = Instant::now();
    let art = invert_style(ckpt, style, &sc, inv, |step, _| {
        if (step + 1) % 500 == 0 {
            log::info!("{style}: step {} ({:.0}s)", step + 1, t0.elapsed().as_secs_f64());
        }
    })?;
    let path = artifact_path(cfg, style, inv.mode);
    std::fs::create_dir_all(cfg.inversions_dir())?;
    art.save(&path)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in art.meta.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.6}\n"));
    }
    std::fs::write(path.with_extension("loss.csv"), csv)?;
    cfg.write_resolved(&cfg.inversions_dir())?;
    log::info!("saved {} (final loss {:.4})", path.display(), art.meta.final_loss);
    Ok(art)
}

/// Reads content from a WAV, a `.mel` file or a corpus clip id.
pub fn read_content(cfg: &RunConfig, content: &str) -> Result<MelSpectrogram> {
    let path = Path::new(content);
    let dsp = cfg.dsp();
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => {
            let w = wav::read_wav(path)?;
            let w = wav::resample_integer(&w, dsp.sample_rate)?;
            MelAnalyzer::new(&dsp)?.mel_spectrogram(&w)
        }
        Some("mel") => melfile::read(path),
        _ => {
            let m = CorpusManifest::load(&cfg.corpus_dir())?;
            let r = m
                .record(content)
                .ok_or_else(|| Error::Input(format!("{content:?} is neither a .wav/.mel file nor a corpus clip id")))?;
            let w = wav::read_wav(&cfg.corpus_dir().join(&r.wav_path))?;
            MelAnalyzer::new(&dsp)?.mel_spectrogram(&w)
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Serialize)]
struct ResultJson<'a> {
    #[serde(flatten)]
    request: &'a StylizationRequest,
    style: &'a str,
    t_p: usize,
    n_frames: usize,
    duration_s: f64,
    wav_sha256: String,
}

/// Writes `output.wav`, `output.mel`, `output.png`, `result.json` and,
/// when kept, per-window intermediates.
pub fn write_stylization(dir: &Path, res: &StylizationResult, style: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let wav_path = dir.join("output.wav");
    wav::write_wav(&wav_path, &res.waveform)?;
    melfile::write(&dir.join("output.mel"), &res.mel)?;
    write_spectrogram_png(&dir.join("output.png"), &res.mel)?;
    if let Some(inter) = &res.intermediates {
        let idir = dir.join("intermediates");
        std::fs::create_dir_all(&idir)?;
        for w in inter {
            let tag = format!("w{:04}", w.start_frame);
            write_spectrogram_png(&idir.join(format!("{tag}_m_cn.png")), &w.m_cn)?;
            melfile::write(&idir.join(format!("{tag}_m_cn.mel")), &w.m_cn)?;
            if let Some(m) = &w.m_hat_cn {
                write_spectrogram_png(&idir.join(format!("{tag}_m_hat_cn.png")), m)?;
                melfile::write(&idir.join(format!("{tag}_m_hat_cn.mel")), m)?;
            }
            if let Some(m) = &w.z_hat {
                write_spectrogram_png(&idir.join(format!("{tag}_z_hat.png")), m)?;
            }
        }
    }
    let json = ResultJson {
        request: &res.request,
        style,
        t_p: res.t_p,
        n_frames: res.mel.n_frames(),
        duration_s: res.waveform.duration(),
        wav_sha256: sha256_file(&wav_path)?,
    };
    std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

pub fn cmd_stylize(
    cfg: &RunConfig,
    content: &str,
    artifact: &Path,
    out: &Path,
    keep_intermediates: bool,
) -> Result<StylizationResult> {
    let ckpt = load_frozen(cfg)?;
    let art = InversionArtifact::load(artifact)?;
    let mel = read_content(cfg, content)?;
    let req = StylizationRequest {
        content: content.to_string(),
        artifact: artifact.display().to_string(),
        params: cfg.stylize.clone(),
    };
    let t0 = Instant::now();
    let res = stylize(&mel, req, &art, &ckpt, keep_intermediates)?;
    write_stylization(out, &res, &art.meta.style)?;
    cfg.write_resolved(out)?;
    log::info!(
        "stylized {} frames in {:.1}s into {}",
        mel.n_frames(),
        t0.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(res)
}

/// Content excerpts (one model window each) crossed with every held-out
/// style, scored against that style's reference clips.
pub fn benchmark_pairs(
    manifest: &CorpusManifest,
    clips: &[CorpusClip],
    n_content: usize,
    frames: usize,
    style_refs: &BTreeMap<String, Vec<MelSpectrogram>>,
) -> Result<Vec<BenchPair>> {
    let contents: Vec<&CorpusClip> = clips
        .iter()
        .filter(|c| c.record.role == Role::Content)
        .take(n_content)
        .collect();
    if contents.len() < n_content {
        return Err(Error::Config(format!(
            "eval wants {n_content} content clips but the corpus has {}",
            contents.len()
        )));
    }
    let mut pairs = Vec::new();
    for style in manifest.held_out_styles() {
        let refs = style_refs
            .get(style)
            .ok_or_else(|| Error::Config(format!("no reference clips for style {style}")))?;
        for c in &contents {
            let start = liveliest_window(&c.mel, frames);
            pairs.push(BenchPair {
                pair_id: format!("{}@{start}:{style}", c.record.id),
                content: c.mel.crop(start, frames),
                style: style.to_string(),
                style_refs: refs.clone(),
            });
        }
    }
    Ok(pairs)
}

/// Loads (or learns and saves) both inversion modes for every held-out style.
pub fn ensure_artifacts(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    manifest: &CorpusManifest,
    clips: &[CorpusClip],
) -> Result<ArtifactSet> {
    let mut set = ArtifactSet::default();
    for style in manifest.held_out_styles() {
        for mode in [InversionMode::Tve, InversionMode::Fixed] {
            let path = artifact_path(cfg, style, mode);
            let inv = InversionConfig {
                mode,
                ..cfg.invert.clone()
            };
            let art = match InversionArtifact::load(&path) {
                Ok(a) if a.meta.config == inv && a.check_compatible(ckpt).is_ok() => a,
                _ => {
                    log::info!("inverting {style} ({mode:?})");
                    cmd_invert(cfg, ckpt, clips, style, &inv)?
                }
            };
            set.insert(art);
        }
    }
    Ok(set)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<MetricReport> {
    let (manifest, clips) = open_corpus(cfg)?;
    let ckpt = load_frozen(cfg)?;
    let arts = ensure_artifacts(cfg, &ckpt, &manifest, &clips)?;
    let mut refs = BTreeMap::new();
    for style in manifest.held_out_styles() {
        let r: Vec<MelSpectrogram> = style_clips(&clips, style, cfg.run.style_clips)?
            .iter()
            .map(|c| c.mel.clone())
            .collect();
        refs.insert(style.to_string(), r);
    }
    let pairs = benchmark_pairs(&manifest, &clips, cfg.eval.n_content, ckpt.model.config.frames, &refs)?;
    let bench = BenchmarkConfig {
        seeds: (0..cfg.eval.n_seeds as u64)
            .map(|i| crate::corpus::derive_seed(cfg.eval.seed, i))
            .collect(),
        arms: cfg.eval.arms.clone(),
        params: cfg.stylize.clone(),
        bootstrap_resamples: cfg.eval.bootstrap_resamples,
        bootstrap_seed: crate::corpus::derive_seed(cfg.eval.seed, u64::MAX),
    };
    let t0 = Instant::now();
    let n = pairs.len();
    let report = run_benchmark(&ckpt, &pairs, &arts, &bench, |arm, i| {
        if (i + 1) % 10 == 0 || i + 1 == n {
            log::info!(
                "{}: {}/{n} pairs ({:.0}s)",
                arm.label(),
                i + 1,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    report.write(out)?;
    cfg.write_resolved(out)?;
    print!("{}", report.table());
    Ok(report)
}

pub fn cmd_trace(cfg: &RunConfig, artifact: &Path, out: &Path) -> Result<()> {
    let art = InversionArtifact::load(artifact)?;
    let tr = embedding_trajectory(&art, cfg.run.trace_points)?;
    tr.write(out)?;
    cfg.write_resolved(out)?;
    let half = cfg.run.trace_points / 2;
    println!(
        "{}: lag-1 similarity {:.4}, lag-{half} similarity {:.4}",
        art.meta.style,
        tr.lag_mean(1),
        tr.lag_mean(half)
    );
    Ok(())
}

/// Griffin-Lim render of a mel, for comparing against stylization output.
pub fn render(cfg: &RunConfig, m: &MelSpectrogram) -> Result<Waveform> {
    MelAnalyzer::new(&cfg.dsp())?.griffin_lim(m)
}
