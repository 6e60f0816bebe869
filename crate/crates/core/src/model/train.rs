//! AdamW training loop with staged curriculum, plus autoregressive
//! decoding restricted to the speech range.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;

use super::net::{forward_logits, loss, loss_and_grad, ModelInput};
use super::{ModelCheckpoint, TrainConfig};
use crate::corpus::SpeechToken;
use crate::error::{Error, Result};
use crate::sequence::{DatasetRecord, TokenIdMap, TokenSequence, ID_E};
use crate::util::par_map;

/// Decoding strategy. Temperature 0 in `TopK` degenerates to greedy.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingConfig {
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub speech: Vec<SpeechToken>,
    /// Whether the model emitted the end marker before the cap.
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: u64,
    pub train_loss: f64,
    pub held_out_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: u8,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: Vec<TrainLogEntry>,
}

fn mean_loss(ckpt: &ModelCheckpoint, records: &[DatasetRecord]) -> Result<f64> {
    let losses = par_map(records, |r| loss(ckpt, &ModelInput::from_record(r)));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / records.len() as f64)
}

/// Runs one curriculum stage. Stages must be entered in order: a
/// checkpoint that has completed stage `s` only accepts stage `s + 1`.
pub fn train_stage(
    ckpt: &mut ModelCheckpoint,
    data: &[DatasetRecord],
    held_out: &[DatasetRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != ckpt.stage + 1 {
        return Err(Error::validation(format!(
            "cannot run stage {} on a checkpoint at stage {}",
            cfg.stage, ckpt.stage
        )));
    }
    if data.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let layout = ckpt.layout();
    // decoupled weight decay applies to matrices only, not vectors
    let mut decay = vec![false; layout.total];
    for s in &layout.slices {
        if s.shape.1 > 1 {
            decay[s.offset..s.offset + s.len].fill(true);
        }
    }
    let probe: &[DatasetRecord] = if held_out.is_empty() {
        &data[..data.len().min(64)]
    } else {
        held_out
    };
    let initial_loss = mean_loss(ckpt, probe)?;
    let mut rng = ckpt.rng();
    let mut log = Vec::new();
    for local_step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let results = par_map(&batch, |&i| {
            let mut g = vec![0.0; layout.total];
            loss_and_grad(ckpt, &ModelInput::from_record(&data[i]), &mut g).map(|l| (l, g))
        });
        let mut grad = vec![0.0; layout.total];
        let mut batch_loss = 0.0;
        for r in results {
            let (l, g) = r?;
            batch_loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        batch_loss /= cfg.batch_size as f64;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for g in grad.iter_mut() {
            *g *= inv_b;
        }

        // cosine anneal within the stage, from lr down to lr * final_lr_ratio
        let frac = local_step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr
            * (cfg.final_lr_ratio
                + (1.0 - cfg.final_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));

        ckpt.step += 1;
        let t = ckpt.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..layout.total {
            let g = grad[i];
            ckpt.adam_m[i] = cfg.beta1 * ckpt.adam_m[i] + (1.0 - cfg.beta1) * g;
            ckpt.adam_v[i] = cfg.beta2 * ckpt.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = ckpt.adam_m[i] / bc1;
            let v_hat = ckpt.adam_v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + cfg.eps);
            if decay[i] {
                update += cfg.weight_decay * ckpt.params[i];
            }
            ckpt.params[i] -= lr * update;
        }

        let last = local_step + 1 == cfg.steps;
        if last || (local_step + 1) % cfg.eval_every == 0 {
            let held = if last { Some(mean_loss(ckpt, probe)?) } else { None };
            log.push(TrainLogEntry {
                step: ckpt.step,
                train_loss: batch_loss,
                held_out_loss: held,
                lr,
            });
        }
    }
    ckpt.store_rng(&rng);
    ckpt.stage = cfg.stage;
    let final_loss = mean_loss(ckpt, probe)?;
    Ok(TrainReport {
        stage: cfg.stage,
        steps: cfg.steps,
        initial_loss,
        final_loss,
        log,
    })
}

/// Decodes speech tokens from a prefix that ends at the text/speech
/// switch. Output ids are restricted to the speech range plus the end
/// marker; decoding stops at the end marker or after `max_new` tokens.
pub fn generate(
    ckpt: &ModelCheckpoint,
    prefix: &TokenSequence,
    map: &TokenIdMap,
    max_new: usize,
    sampling: &SamplingConfig,
) -> Result<GenerationResult> {
    if !prefix.ends_at_switch() {
        return Err(Error::validation(
            "generation prefix must end at the text/speech switch",
        ));
    }
    if map.vocab_size() != ckpt.config.vocab_size {
        return Err(Error::validation(format!(
            "id map vocab {} differs from model vocab {}",
            map.vocab_size(),
            ckpt.config.vocab_size
        )));
    }
    let mut rng = match sampling {
        SamplingConfig::Greedy => None,
        SamplingConfig::TopK { k, temperature, seed } => {
            if *k == 0 {
                return Err(Error::validation("top-k sampling needs k >= 1"));
            }
            if *temperature < 0.0 {
                return Err(Error::validation("temperature must be non-negative"));
            }
            use rand::SeedableRng;
            Some((rand_chacha::ChaCha20Rng::seed_from_u64(*seed), *k, *temperature))
        }
    };
    let mut ids = prefix.ids.clone();
    let mut speech = Vec::new();
    let mut terminated = false;
    let mut allowed: Vec<u32> = (map.speech_offset()..map.vocab_size()).collect();
    allowed.push(ID_E);
    for _ in 0..max_new {
        let input = ModelInput {
            speaker: prefix.speaker.values.clone(),
            ids: ids.clone(),
            mask: vec![false; ids.len()],
        };
        let logits = forward_logits(ckpt, &input)?;
        let row = logits.row(logits.nrows() - 1);
        let mut scored: Vec<(u32, f64)> =
            allowed.iter().map(|&id| (id, row[id as usize])).collect();
        // descending by logit, ascending id as the deterministic tiebreak
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let next = match &mut rng {
            None => scored[0].0,
            Some((_, _, t)) if *t == 0.0 => scored[0].0,
            Some((rng, k, t)) => {
                scored.truncate(*k);
                let top = scored[0].1;
                let weights: Vec<f64> =
                    scored.iter().map(|(_, l)| ((l - top) / *t).exp()).collect();
                let dist = WeightedIndex::new(&weights)
                    .map_err(|e| Error::runtime(format!("sampling weights: {e}")))?;
                scored[dist.sample(rng)].0
            }
        };
        if next == ID_E {
            terminated = true;
            break;
        }
        speech.push(map.as_speech(next).expect("restricted to speech range"));
        ids.push(next);
        if ids.len() + 1 >= ckpt.config.max_len {
            break;
        }
    }
    Ok(GenerationResult { speech, terminated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SpeakerEmbedding, SpeechToken, TextToken};
    use crate::model::{init_model, ModelConfig};
    use crate::sequence::{build_training_sequence, DatasetRecord};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 48,
            speaker_dim: 4,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn emb(v: f64) -> SpeakerEmbedding {
        SpeakerEmbedding {
            values: vec![v, 1.0 - v, 0.25, -0.25],
            speaker_hint: Some(0),
        }
    }

    /// Two fixed text -> speech pairs the model can memorize.
    fn toy_data(map: &TokenIdMap) -> Vec<DatasetRecord> {
        let pairs = [
            (vec![TextToken(1), TextToken(2)], vec![SpeechToken(5), SpeechToken(9)]),
            (vec![TextToken(3), TextToken(4)], vec![SpeechToken(11), SpeechToken(2)]),
        ];
        pairs
            .iter()
            .map(|(t, s)| {
                DatasetRecord::from_sequence(
                    &build_training_sequence(emb(0.5), None, None, t, s, map).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn training_memorizes_tiny_dataset() {
        let cfg = tiny_config();
        let map = TokenIdMap::new(32, 64);
        let mut ckpt = init_model(&cfg).unwrap();
        let data = toy_data(&map);
        let tc = TrainConfig {
            steps: 300,
            batch_size: 4,
            eval_every: 100,
            ..TrainConfig::for_stage(1)
        };
        let report = train_stage(&mut ckpt, &data, &[], &tc).unwrap();
        assert!(report.final_loss < report.initial_loss * 0.2,
            "loss {} -> {}", report.initial_loss, report.final_loss);
        assert_eq!(ckpt.stage, 1);
        assert_eq!(ckpt.step, 300);

        // greedy decoding reproduces the memorized mapping
        let prefix = crate::sequence::build_inference_prefix(
            crate::sequence::InferenceMode::Plain,
            emb(0.5),
            None,
            None,
            &[TextToken(1), TextToken(2)],
            &map,
        )
        .unwrap();
        let out = generate(&ckpt, &prefix, &map, 8, &SamplingConfig::Greedy).unwrap();
        assert!(out.terminated);
        assert_eq!(out.speech, vec![SpeechToken(5), SpeechToken(9)]);
    }

    #[test]
    fn stage_order_enforced() {
        let cfg = tiny_config();
        let map = TokenIdMap::new(32, 64);
        let mut ckpt = init_model(&cfg).unwrap();
        let data = toy_data(&map);
        let stage2 = TrainConfig { steps: 1, ..TrainConfig::for_stage(2) };
        assert!(train_stage(&mut ckpt, &data, &[], &stage2).is_err());
        let stage1 = TrainConfig { steps: 1, ..TrainConfig::for_stage(1) };
        train_stage(&mut ckpt, &data, &[], &stage1).unwrap();
        // re-running a completed stage is also rejected
        assert!(train_stage(&mut ckpt, &data, &[], &stage1).is_err());
        train_stage(&mut ckpt, &data, &[], &stage2).unwrap();
        assert_eq!(ckpt.stage, 2);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let map = TokenIdMap::new(32, 64);
        let data = toy_data(&map);
        let tc = TrainConfig { steps: 20, ..TrainConfig::for_stage(1) };
        let mut a = init_model(&cfg).unwrap();
        let mut b = init_model(&cfg).unwrap();
        let ra = train_stage(&mut a, &data, &[], &tc).unwrap();
        let rb = train_stage(&mut b, &data, &[], &tc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
    }

    #[test]
    fn sampling_variants() {
        let cfg = tiny_config();
        let map = TokenIdMap::new(32, 64);
        let ckpt = init_model(&cfg).unwrap();
        let prefix = crate::sequence::build_inference_prefix(
            crate::sequence::InferenceMode::Plain,
            emb(0.5),
            None,
            None,
            &[TextToken(7)],
            &map,
        )
        .unwrap();
        let greedy = generate(&ckpt, &prefix, &map, 4, &SamplingConfig::Greedy).unwrap();
        let zero_temp = generate(
            &ckpt,
            &prefix,
            &map,
            4,
            &SamplingConfig::TopK { k: 5, temperature: 0.0, seed: 1 },
        )
        .unwrap();
        assert_eq!(greedy, zero_temp);
        // every sampled id stays in the speech range
        let sampled = generate(
            &ckpt,
            &prefix,
            &map,
            4,
            &SamplingConfig::TopK { k: 8, temperature: 1.5, seed: 2 },
        )
        .unwrap();
        assert!(sampled.speech.iter().all(|s| s.0 < map.v_speech));
        // same seed, same draw
        let again = generate(
            &ckpt,
            &prefix,
            &map,
            4,
            &SamplingConfig::TopK { k: 8, temperature: 1.5, seed: 2 },
        )
        .unwrap();
        assert_eq!(sampled, again);
    }

    #[test]
    fn generate_requires_switch_prefix() {
        let cfg = tiny_config();
        let map = TokenIdMap::new(32, 64);
        let ckpt = init_model(&cfg).unwrap();
        let full = build_training_sequence(
            emb(0.5),
            None,
            None,
            &[TextToken(0)],
            &[SpeechToken(0)],
            &map,
        )
        .unwrap();
        assert!(generate(&ckpt, &full, &map, 4, &SamplingConfig::Greedy).is_err());
    }
}
