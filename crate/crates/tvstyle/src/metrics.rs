//! Ablation benchmark: every arm stylizes every (content, style) pair
//! under every seed and is scored for content preservation and style fit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tvstyle_core::metrics::{bootstrap_mean_ci, mean};
use tvstyle_core::{DspConfig, MelSpectrogram};

pub use tvstyle_core::metrics::{content_preservation, cosine, pearson, style_fit};

use crate::container::json_hash;
use crate::corpus::derive_seed;
use crate::diffusion::Checkpoint;
use crate::error::{Error, Result};
use crate::inversion::{InversionArtifact, InversionMode};
use crate::stylize::{stylize_batch, StylizeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoTve,
    NoBrs,
    BaselineTi,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoTve, Arm::NoBrs, Arm::BaselineTi];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoTve => "no_tve",
            Arm::NoBrs => "no_brs",
            Arm::BaselineTi => "baseline_ti",
        }
    }

    pub fn mode(self) -> InversionMode {
        match self {
            Arm::Full | Arm::NoBrs => InversionMode::Tve,
            Arm::NoTve | Arm::BaselineTi => InversionMode::Fixed,
        }
    }

    pub fn bias_reduced(self) -> bool {
        matches!(self, Arm::Full | Arm::NoTve)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.label() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown arm {s:?} (expected full, no_tve, no_brs or baseline_ti)"
            ))
        })
    }
}

/// One content excerpt paired with a style.
#[derive(Debug, Clone)]
pub struct BenchPair {
    pub pair_id: String,
    pub content: MelSpectrogram,
    pub style: String,
    /// Style reference clips for scoring.
    pub style_refs: Vec<MelSpectrogram>,
}

/// Start frame of the `len`-frame window (on a half-window grid) with the
/// most frame-energy variance, so excerpts are not silent or static.
pub fn liveliest_window(m: &MelSpectrogram, len: usize) -> usize {
    if m.n_frames() <= len {
        return 0;
    }
    let energy: Vec<f64> = (0..m.n_frames())
        .map(|f| (0..m.n_mels()).map(|b| m.get(b, f) as f64).sum::<f64>())
        .collect();
    let hop = (len / 2).max(1);
    let mut best = (0, f64::NEG_INFINITY);
    let mut start = 0;
    while start + len <= m.n_frames() {
        let w = &energy[start..start + len];
        let mu = mean(w);
        let var = w.iter().map(|e| (e - mu).powi(2)).sum::<f64>();
        if var > best.1 {
            best = (start, var);
        }
        start += hop;
    }
    best.0
}

/// Where an arm's pseudo-words come from: one artifact per (style, mode).
#[derive(Default)]
pub struct ArtifactSet {
    map: BTreeMap<(String, InversionMode), InversionArtifact>,
}

impl ArtifactSet {
    pub fn insert(&mut self, art: InversionArtifact) {
        self.map.insert((art.meta.style.clone(), art.meta.mode), art);
    }

    pub fn get(&self, style: &str, mode: InversionMode) -> Result<&InversionArtifact> {
        self.map
            .get(&(style.to_string(), mode))
            .ok_or_else(|| Error::Config(format!("no {mode:?} inversion artifact for style {style:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub params: StylizeParams,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3],
            arms: Arm::ALL.to_vec(),
            params: StylizeParams::default(),
            bootstrap_resamples: 2000,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub arm: Arm,
    pub pair_id: String,
    pub seed: u64,
    pub cp: f64,
    pub sf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub n: usize,
    pub cp_mean: f64,
    pub cp_ci: (f64, f64),
    pub sf_mean: f64,
    pub sf_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub seeds: Vec<u64>,
    pub pair_ids: Vec<String>,
    pub rows: Vec<ScoreRow>,
    pub summary: Vec<ArmSummary>,
}

/// Scores one stylized output against its pair.
pub fn score(out: &MelSpectrogram, pair: &BenchPair, dsp: &DspConfig) -> Result<(f64, f64)> {
    let cp = content_preservation(out, &pair.content, &dsp.scale())?;
    let sfs = pair
        .style_refs
        .iter()
        .map(|r| Ok(style_fit(out, r)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok((cp, mean(&sfs)))
}

/// Runs every arm over every pair and seed. Within a (pair, seed) the
/// partial-diffusion noise is shared by all arms.
pub fn run_benchmark(
    ckpt: &Checkpoint,
    pairs: &[BenchPair],
    artifacts: &ArtifactSet,
    cfg: &BenchmarkConfig,
    mut on_pair: impl FnMut(Arm, usize),
) -> Result<MetricReport> {
    if pairs.is_empty() || cfg.seeds.is_empty() || cfg.arms.is_empty() {
        return Err(Error::Config("benchmark needs at least one pair, seed and arm".into()));
    }
    let model = &ckpt.model;
    let frames = model.config.frames;
    for p in pairs {
        if p.content.n_frames() != frames {
            return Err(Error::Input(format!(
                "pair {} content has {} frames, the model takes {frames}",
                p.pair_id,
                p.content.n_frames()
            )));
        }
        if p.style_refs.is_empty() {
            return Err(Error::Input(format!("pair {} has no style reference", p.pair_id)));
        }
        for arm in &cfg.arms {
            artifacts.get(&p.style, arm.mode())?.check_compatible(ckpt)?;
        }
    }
    let dsp = ckpt.dsp();
    let mut rows = Vec::with_capacity(cfg.arms.len() * pairs.len() * cfg.seeds.len());
    for &arm in &cfg.arms {
        let params = StylizeParams {
            bias_reduced: arm.bias_reduced(),
            ..cfg.params.clone()
        };
        for (i, pair) in pairs.iter().enumerate() {
            let art = artifacts.get(&pair.style, arm.mode())?;
            let mels = vec![&pair.content; cfg.seeds.len()];
            let noise: Vec<u64> = cfg.seeds.iter().map(|&s| derive_seed(s, i as u64)).collect();
            let outs = stylize_batch(model, &art.pseudo, &mels, &noise, &params)?;
            for (out, &seed) in outs.iter().zip(&cfg.seeds) {
                let (cp, sf) = score(out, pair, &dsp)?;
                rows.push(ScoreRow {
                    arm,
                    pair_id: pair.pair_id.clone(),
                    seed,
                    cp,
                    sf,
                });
            }
            on_pair(arm, i);
        }
    }
    let summary = summarize(&rows, &cfg.arms, cfg.bootstrap_resamples, cfg.bootstrap_seed);
    Ok(MetricReport {
        config_hash: json_hash(cfg)?,
        checkpoint_hash: ckpt.params_hash()?,
        seeds: cfg.seeds.clone(),
        pair_ids: pairs.iter().map(|p| p.pair_id.clone()).collect(),
        rows,
        summary,
    })
}

/// Per-arm means with 95% bootstrap intervals.
pub fn summarize(rows: &[ScoreRow], arms: &[Arm], resamples: usize, seed: u64) -> Vec<ArmSummary> {
    arms.iter()
        .enumerate()
        .map(|(k, &arm)| {
            let cp: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.cp).collect();
            let sf: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.sf).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            ArmSummary {
                arm,
                n: cp.len(),
                cp_mean: mean(&cp),
                cp_ci: bootstrap_mean_ci(&cp, resamples, 0.95, &mut rng),
                sf_mean: mean(&sf),
                sf_ci: bootstrap_mean_ci(&sf, resamples, 0.95, &mut rng),
            }
        })
        .collect()
}

impl MetricReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,pair_id,seed,cp,sf\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.arm.label(), r.pair_id, r.seed, r.cp, r.sf);
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>5} {:>8} {:>19} {:>8} {:>19}\n",
            "arm", "n", "CP", "CP 95% CI", "SF", "SF 95% CI"
        );
        for a in &self.summary {
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>8.4} [{:>8.4}, {:>7.4}] {:>8.4} [{:>8.4}, {:>7.4}]",
                a.arm.label(),
                a.n,
                a.cp_mean,
                a.cp_ci.0,
                a.cp_ci.1,
                a.sf_mean,
                a.sf_ci.0,
                a.sf_ci.1
            );
        }
        s
    }

    /// Writes `scores.csv`, `summary.txt` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scores.csv"), self.to_csv())?;
        std::fs::write(dir.join("summary.txt"), self.table())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: Arm, cp: f64, sf: f64) -> ScoreRow {
        ScoreRow {
            arm,
            pair_id: "p".into(),
            seed: 0,
            cp,
            sf,
        }
    }

    #[test]
    fn arms_map_to_modes_and_paths() {
        assert_eq!(Arm::Full.mode(), InversionMode::Tve);
        assert!(Arm::Full.bias_reduced());
        assert_eq!(Arm::NoTve.mode(), InversionMode::Fixed);
        assert!(Arm::NoTve.bias_reduced());
        assert!(!Arm::NoBrs.bias_reduced());
        assert_eq!(Arm::BaselineTi.mode(), InversionMode::Fixed);
        assert!(!Arm::BaselineTi.bias_reduced());
        for a in Arm::ALL {
            assert_eq!(Arm::parse(a.label()).unwrap(), a);
        }
        assert!(Arm::parse("ours").is_err());
    }

    #[test]
    fn summary_means_and_intervals() {
        let rows = vec![
            row(Arm::Full, 0.2, 0.5),
            row(Arm::Full, 0.4, 0.7),
            row(Arm::NoBrs, 0.1, 0.1),
        ];
        let s = summarize(&rows, &[Arm::Full, Arm::NoBrs], 500, 3);
        assert_eq!(s[0].n, 2);
        assert!((s[0].cp_mean - 0.3).abs() < 1e-12);
        assert!((s[0].sf_mean - 0.6).abs() < 1e-12);
        assert!(s[0].cp_ci.0 >= 0.2 && s[0].cp_ci.1 <= 0.4);
        assert_eq!(s[1].cp_ci, (0.1, 0.1));
        assert_eq!(s, summarize(&rows, &[Arm::Full, Arm::NoBrs], 500, 3));
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let rows = vec![row(Arm::Full, 0.25, 0.5)];
        let report = MetricReport {
            config_hash: String::new(),
            checkpoint_hash: String::new(),
            seeds: vec![0],
            pair_ids: vec!["p".into()],
            summary: summarize(&rows, &[Arm::Full], 10, 0),
            rows,
        };
        assert_eq!(report.to_csv(), "arm,pair_id,seed,cp,sf\nfull,p,0,0.250000,0.500000\n");
        assert_eq!(report.table().lines().count(), 2);
    }

    #[test]
    fn liveliest_window_prefers_activity() {
        let mut v = vec![-1.0f32; 4 * 16];
        for b in 0..4 {
            for f in 8..16 {
                v[b * 16 + f] = if f % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let m = MelSpectrogram::new(4, 16, v).unwrap();
        assert_eq!(liveliest_window(&m, 8), 8);
        assert_eq!(liveliest_window(&m, 32), 0);
    }
}
