//! Toy autoregressive speech-token language model: a small causal
//! transformer over the flat id space with a projected speaker-vector
//! prefix slot. Everything runs in f64; gradients are exact and checked
//! against central finite differences in the test suite.

mod layout;
mod net;
mod train;

pub use layout::{ParamLayout, Slice};
pub use net::{forward_logits, loss, loss_and_grad, ModelInput};
pub use train::{generate, train_stage, GenerationResult, SamplingConfig, TrainLogEntry, TrainReport};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::TokenIdMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum sequence length including the speaker slot.
    pub max_len: usize,
    pub speaker_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: TokenIdMap::new(32, 64).vocab_size(),
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 256,
            speaker_dim: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 16 {
            return Err(Error::config("vocab too small to cover the id ranges"));
        }
        if self.max_len < 4 || self.speaker_dim == 0 {
            return Err(Error::config("max_len/speaker_dim too small"));
        }
        Ok(())
    }
}

/// Per-stage optimizer settings. The learning rates are desk-scale
/// analogues of the production schedule: stages 1 and 2 share a rate
/// and stage 3 runs at one tenth of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Cosine decay floor: the step rate anneals from `lr` down to
    /// `lr * final_lr_ratio` over the stage.
    pub final_lr_ratio: f64,
    /// Held-out evaluation cadence for the training log.
    pub eval_every: usize,
}

pub const STAGE12_LR: f64 = 1e-3;
pub const STAGE3_LR: f64 = STAGE12_LR / 10.0;

impl TrainConfig {
    pub fn for_stage(stage: u8) -> Self {
        let (lr, steps) = match stage {
            1 => (STAGE12_LR, 3600),
            2 => (STAGE12_LR, 1500),
            _ => (STAGE3_LR, 50),
        };
        TrainConfig {
            stage,
            lr,
            batch_size: 16,
            steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            final_lr_ratio: 0.05,
            eval_every: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::config(format!("stage {} outside 1..=3", self.stage)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::config("final_lr_ratio outside [0, 1]"));
        }
        Ok(())
    }
}

/// Model parameters plus optimizer state, stage tag and RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Last completed training stage; 0 right after init.
    pub stage: u8,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl ModelCheckpoint {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub(crate) fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub(crate) fn store_rng(&mut self, rng: &ChaCha20Rng) {
        self.rng_word_pos = rng.get_word_pos();
    }
}

/// Deterministic initialization: layer-norm gains 1, biases 0,
/// embedding tables uniform in ±0.05, weight matrices uniform in
/// ±1/sqrt(fan_in).
pub fn init_model(cfg: &ModelConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut params = vec![0.0f64; layout.total];
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    for s in &layout.slices {
        let out = &mut params[s.offset..s.offset + s.len];
        let is_gain = s.name.ends_with("_g");
        let is_bias = s.shape.1 == 1 && !is_gain;
        let is_embedding = s.name == "tok_emb" || s.name == "pos_emb";
        if is_gain {
            out.fill(1.0);
        } else if is_bias {
            // keep rng stream position independent of content
        } else {
            let bound = if is_embedding {
                0.05
            } else {
                1.0 / (s.shape.1 as f64).sqrt()
            };
            for x in out.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
    }
    Ok(ModelCheckpoint {
        config: cfg.clone(),
        params,
        adam_m: vec![0.0; layout.total],
        adam_v: vec![0.0; layout.total],
        stage: 0,
        step: 0,
        rng_seed: cfg.seed,
        rng_word_pos: ChaCha20Rng::seed_from_u64(cfg.seed).get_word_pos(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stage: u8,
    step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    slices: Vec<(String, usize, usize)>,
}

const MAGIC: &[u8; 8] = b"BKCK0001";

/// Binary checkpoint layout: 8-byte magic, u32 LE header length, JSON
/// header (config, stage, step, RNG state, named slice table), then the
/// parameter, first-moment and second-moment vectors, each as a u64 LE
/// length followed by f64 LE values.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let layout = ckpt.layout();
    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        stage: ckpt.stage,
        step: ckpt.step,
        rng_seed: ckpt.rng_seed,
        rng_word_pos: ckpt.rng_word_pos,
        slices: layout
            .slices
            .iter()
            .map(|s| (s.name.clone(), s.offset, s.len))
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::runtime(format!("serialize checkpoint header: {e}")))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for vec in [&ckpt.params, &ckpt.adam_m, &ckpt.adam_v] {
        w.write_all(&(vec.len() as u64).to_le_bytes()).map_err(io)?;
        for x in vec {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::parse(path, 0, "bad checkpoint magic"));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(io)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut header_bytes).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::parse(path, 0, format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let expected = ParamLayout::new(&header.config).total;
    let read_vec = |r: &mut BufReader<File>| -> Result<Vec<f64>> {
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
        let n = u64::from_le_bytes(len8) as usize;
        if n != expected {
            return Err(Error::parse(
                path,
                0,
                format!("parameter vector length {n}, expected {expected}"),
            ));
        }
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    };
    let params = read_vec(&mut r)?;
    let adam_m = read_vec(&mut r)?;
    let adam_v = read_vec(&mut r)?;
    Ok(ModelCheckpoint {
        config: header.config,
        params,
        adam_m,
        adam_v,
        stage: header.stage,
        step: header.step,
        rng_seed: header.rng_seed,
        rng_word_pos: header.rng_word_pos,
    })
}
