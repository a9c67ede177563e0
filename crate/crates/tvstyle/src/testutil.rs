//! Small models and data shared by unit tests.

use candle_core::DType;
use tvstyle_core::{DspConfig, MelSpectrogram};

use crate::corpus::{default_styles, derive_seed, DspConfigRecord};
use crate::diffusion::{
    gaussian, Checkpoint, CheckpointMeta, DiffusionModel, ModelConfig, TrainClip, TrainConfig, TrainProgress,
    UNetConfig, CHECKPOINT_KIND,
};
use crate::inversion::InversionConfig;
use crate::textcond::{TextEncoderConfig, TveConfig, Vocabulary};

pub const N_MELS: usize = 16;
pub const FRAMES: usize = 16;

pub fn model_config() -> ModelConfig {
    ModelConfig {
        frames: FRAMES,
        unet: UNetConfig {
            in_channels: 1,
            channels: [4, 8, 8],
            groups: 2,
            t_dim: 8,
            temb_dim: 8,
            cond_dim: 16,
            attn_heads: 2,
        },
        text: TextEncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 8,
            mlp_hidden: 32,
        },
        ..ModelConfig::default()
    }
}

pub fn vocab() -> Vocabulary {
    Vocabulary::for_styles(&default_styles()).unwrap()
}

pub fn model(seed: u64) -> DiffusionModel {
    DiffusionModel::new(&model_config(), N_MELS, vocab(), DType::F32, seed).unwrap()
}

pub fn dsp() -> DspConfig {
    DspConfig {
        n_mels: N_MELS,
        gl_iters: 4,
        ..DspConfig::default()
    }
}

/// Fresh model whose zero-initialized output layer has been randomized, so
/// predictions and gradients are non-trivial.
pub fn live_model(seed: u64) -> DiffusionModel {
    let m = model(seed);
    let w = m.store.var("unet.conv_out.w").unwrap();
    let g = gaussian(w.dims(), derive_seed(seed, 77), DType::F32, &candle_core::Device::Cpu).unwrap();
    w.set(&(g * 0.3).unwrap()).unwrap();
    m
}

/// Frozen checkpoint around [`live_model`].
pub fn checkpoint(seed: u64) -> Checkpoint {
    let m = live_model(seed);
    let blocks = m.store.to_blocks().unwrap();
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.to_string(),
        model: m.config.clone(),
        dsp: DspConfigRecord::from(&dsp()),
        vocab: m.vocab.tokens().to_vec(),
        train: TrainConfig::default(),
        progress: TrainProgress::default(),
        corpus_hash: "test".into(),
    };
    let model = DiffusionModel::from_blocks(&meta.model, N_MELS, vocab(), &blocks, DType::F32, true).unwrap();
    Checkpoint {
        model,
        meta,
        optimizer: Vec::new(),
    }
}

/// Smooth random mels in the unit range.
pub fn mel(frames: usize, seed: u64) -> MelSpectrogram {
    let g = gaussian(&[N_MELS * frames], seed, DType::F64, &candle_core::Device::Cpu)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let v = g.iter().map(|x| (0.5 + 0.2 * x).clamp(-1.0, 1.0) as f32).collect();
    MelSpectrogram::clipped(N_MELS, frames, v).unwrap()
}

pub fn train_clips(n: usize, frames: usize, seed: u64) -> Vec<TrainClip> {
    let m = model(0);
    (0..n)
        .map(|i| TrainClip {
            mel: mel(frames, derive_seed(seed, i as u64)),
            ids: m
                .caption_ids(if i % 2 == 0 { "a bell melody" } else { "a melody" })
                .unwrap(),
        })
        .collect()
}

pub fn inversion_config(max_steps: usize) -> InversionConfig {
    InversionConfig {
        max_steps,
        eval_every: 5,
        tve: TveConfig {
            groups: 4,
            t_dim: 16,
            hidden: 16,
            n_pairs: 1,
        },
        ..InversionConfig::default()
    }
}
