//! Run configuration: built-in defaults, then a TOML file, then `--set`
//! overrides and command flags, each layer replacing the keys it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};
use tvstyle_core::DspConfig;

use crate::corpus::{
    default_styles, derive_seed, DspConfigRecord, StyleSpec, DEFAULT_CONTENT_CLIPS, DEFAULT_STYLE_CLIPS,
};
use crate::diffusion::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use crate::metrics::Arm;
use crate::stylize::StylizeParams;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Seed of a named component stream. Kept below 2^63 so it survives TOML.
pub fn sub_seed(master: u64, stream: &str) -> u64 {
    let h = Sha256::digest(stream.as_bytes());
    let tag = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
    derive_seed(master, tag) & (i64::MAX as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Root for every output; relative paths below resolve against it.
    pub dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub inversions_dir: PathBuf,
    /// Checkpoint is rewritten every this many training steps.
    pub save_every: u64,
    pub log_every: u64,
    /// Style clips handed to inversion.
    pub style_clips: usize,
    pub trace_points: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            corpus_dir: PathBuf::from("corpus"),
            checkpoint: PathBuf::from("checkpoint.tvck"),
            inversions_dir: PathBuf::from("inversions"),
            save_every: 200,
            log_every: 25,
            style_clips: 5,
            trace_points: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub n_content: usize,
    pub n_style: usize,
    pub styles: Vec<StyleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub n_content: usize,
    pub n_seeds: usize,
    pub arms: Vec<Arm>,
    pub bootstrap_resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run: RunSection,
    pub dsp: DspConfigRecord,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub invert: InversionConfig,
    pub stylize: StylizeParams,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Defaults with every component seed drawn from `master`.
    pub fn defaults(master: u64) -> Self {
        Self {
            seed: master,
            run: RunSection::default(),
            dsp: (&DspConfig::default()).into(),
            corpus: CorpusSection {
                seed: sub_seed(master, "corpus"),
                n_content: DEFAULT_CONTENT_CLIPS,
                n_style: DEFAULT_STYLE_CLIPS,
                styles: default_styles(),
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                seed: sub_seed(master, "pretrain"),
                ..TrainConfig::default()
            },
            invert: InversionConfig {
                seed: sub_seed(master, "invert"),
                ..InversionConfig::default()
            },
            stylize: StylizeParams {
                seed: sub_seed(master, "stylize"),
                ..StylizeParams::default()
            },
            eval: EvalSection {
                seed: sub_seed(master, "eval"),
                n_content: 20,
                n_seeds: 4,
                arms: Arm::ALL.to_vec(),
                bootstrap_resamples: 2000,
            },
        }
    }

    /// Layers a TOML document and `key=value` overrides over the defaults.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user = Table::new();
        if let Some(text) = file {
            let t: Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
            merge(&mut user, t);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut user, key.trim(), parse_value(raw.trim()))?;
        }
        let master = match user.get("seed") {
            None => 0,
            Some(Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(v) => return Err(Error::Config(format!("seed must be a non-negative integer, got {v}"))),
        };
        let mut table = Table::try_from(Self::defaults(master)).map_err(|e| Error::Config(e.to_string()))?;
        check_keys(&table, &user, "")?;
        merge(&mut table, user);
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display()))))
            .transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp().validate()?;
        self.model.validate(self.dsp.n_mels)?;
        self.train.validate()?;
        self.invert.validate()?;
        self.stylize.validate(self.model.schedule.steps)?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in 63 bits".into()));
        }
        if self.run.style_clips == 0 || self.run.style_clips > 5 {
            return Err(Error::Config(format!(
                "run.style_clips must be 1 to 5, got {}",
                self.run.style_clips
            )));
        }
        if self.run.trace_points < 2 {
            return Err(Error::Config("run.trace_points must be at least 2".into()));
        }
        if self.run.save_every == 0 || self.run.log_every == 0 {
            return Err(Error::Config(
                "run.save_every and run.log_every must be positive".into(),
            ));
        }
        if self.eval.n_content == 0 || self.eval.n_seeds == 0 || self.eval.arms.is_empty() {
            return Err(Error::Config("eval needs content clips, seeds and arms".into()));
        }
        Ok(())
    }

    /// Hash of the sections that determine the corpus and checkpoint.
    pub fn pretrain_fingerprint(&self) -> Result<String> {
        crate::container::json_hash(&(&self.dsp, &self.corpus, &self.model, &self.train))
    }

    pub fn dsp(&self) -> DspConfig {
        (&self.dsp).into()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    fn under_run(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run.dir.join(p)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.under_run(&self.run.corpus_dir)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.under_run(&self.run.checkpoint)
    }

    pub fn inversions_dir(&self) -> PathBuf {
        self.under_run(&self.run.inversions_dir)
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(t: &mut Table, key: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(inner) => inner,
            _ => return Err(Error::Config(format!("key {key:?}: {p} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

/// Recursively replaces keys of `base` with those of `top`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Rejects keys the defaults do not know, naming the full dotted path.
fn check_keys(defaults: &Table, user: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (defaults.get(k), v) {
            (None, _) => return Err(Error::Config(format!("unknown configuration key `{path}`"))),
            (Some(Value::Table(d)), Value::Table(u)) => check_keys(d, u, &path)?,
            (Some(Value::Table(_)), other) => {
                return Err(Error::Config(format!(
                    "`{path}` must be a table, got {}",
                    other.type_str()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::defaults(0));
        let again = RunConfig::resolve(Some(&cfg.to_toml().unwrap()), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn layers_apply_in_order() {
        let file = "[train]\nepochs = 3\nlr = 0.5\n[stylize]\nscale = 3.0\n";
        let cfg = RunConfig::resolve(
            Some(file),
            &["train.lr=0.01".into(), "stylize.bias_reduced=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.stylize.scale, 3.0);
        assert!(!cfg.stylize.bias_reduced);
        assert_eq!(cfg.stylize.strength, 0.65);
    }

    #[test]
    fn dotted_keys_in_file_work() {
        let cfg = RunConfig::resolve(Some("train.epochs = 2\nrun.dir = \"/tmp/x\""), &[]).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.run.dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("/tmp/x/checkpoint.tvck"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::resolve(Some("[train]\nepoch = 3\n"), &[]).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("train.epoch"), "{e}");
        let e = RunConfig::resolve(None, &["model.unet.chanels=[1,2,3]".into()]).unwrap_err();
        assert!(e.to_string().contains("model.unet.chanels"), "{e}");
        assert!(RunConfig::resolve(None, &["nonsense".into()]).unwrap_err().is_config());
        assert!(RunConfig::resolve(Some("train = 3"), &[]).unwrap_err().is_config());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in [
            "stylize.strength=1.5",
            "train.batch_size=0",
            "train.lr=\"fast\"",
            "seed=-1",
        ] {
            let e = RunConfig::resolve(None, &[o.to_string()]).unwrap_err();
            assert!(e.is_config(), "{o}: {e}");
        }
    }

    #[test]
    fn component_seeds_follow_the_master_seed() {
        let a = RunConfig::resolve(None, &["seed=5".into()]).unwrap();
        let b = RunConfig::resolve(None, &["seed=6".into()]).unwrap();
        assert_eq!(a.train.seed, sub_seed(5, "pretrain"));
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.corpus.seed, a.train.seed);
        let c = RunConfig::resolve(None, &["seed=5".into(), "invert.seed=9".into()]).unwrap();
        assert_eq!(c.invert.seed, 9);
        assert_eq!(c.train.seed, a.train.seed);
    }
}
