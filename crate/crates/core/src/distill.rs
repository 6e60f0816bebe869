//! Self-distillation: synthesize intensity-varied candidates from a
//! stage-2 checkpoint, filter them on the objective proxies, and
//! rebalance the (emotion, intensity) histogram for stage-3 training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cast::similarity;
use crate::corpus::{
    Chapter, Corpus, EmotionLabel, InstructionAttributes, Intensity, SpeechToken, Utterance,
};
use crate::error::{Error, Result};
use crate::instruction::render_attribute_tokens;
use crate::model::{generate, ModelCheckpoint, SamplingConfig};
use crate::oracle::{proxy_per, proxy_pitch, speaker_base_embedding};
use crate::sequence::{
    build_inference_prefix, build_training_sequence, ContextTexts, DatasetRecord, InferenceMode,
    TokenIdMap,
};
use crate::util::{fnv64, par_map};

/// One (emotion, intensity) cell of the synthesis grid.
pub type Cell = (EmotionLabel, Intensity);

pub fn cell_name(cell: &Cell) -> String {
    format!("{}/{}", cell.0, cell.1)
}

/// Every (non-neutral emotion, intensity) synthesis cell.
pub fn full_grid() -> Vec<Cell> {
    let mut out = Vec::new();
    for e in EmotionLabel::NON_NEUTRAL {
        for i in Intensity::ALL {
            out.push((e, i));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSpec {
    /// Source utterance ids to re-render.
    pub source_ids: Vec<u64>,
    pub grid: Vec<Cell>,
    pub samples_per_cell: usize,
    pub seed: u64,
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_ids.is_empty() {
            return Err(Error::validation("distillation needs source utterances"));
        }
        if self.grid.is_empty() {
            return Err(Error::validation("empty attribute grid"));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::validation("samples_per_cell must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub per_max: f64,
    pub ss_min: f64,
    /// Allowed pitch deviation, in multiples of the per-cell sigma.
    pub pitch_band: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            per_max: 0.05,
            ss_min: 0.8,
            pitch_band: 2.0,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_max) {
            return Err(Error::validation("per_max outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ss_min) {
            return Err(Error::validation("ss_min outside [0, 1]"));
        }
        if self.pitch_band <= 0.0 {
            return Err(Error::validation("pitch_band must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Per,
    Ss,
    Pitch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledSample {
    pub source_id: u64,
    pub speaker_id: u64,
    pub attrs: InstructionAttributes,
    pub speech: Vec<SpeechToken>,
    pub per: f64,
    pub ss: f64,
    /// NaN when the model emitted no tokens (such samples always fail
    /// the PER filter first).
    pub pitch: f64,
    pub kept: bool,
    pub reject_reason: Option<RejectReason>,
    pub provenance_seed: u64,
}

fn source_context(corpus: &Corpus, u: &Utterance) -> (Option<ContextTexts>, bool) {
    let chapter: &Chapter = corpus
        .chapters
        .iter()
        .find(|c| c.id == u.chapter_id)
        .expect("utterance belongs to a chapter");
    let i = u.index_in_chapter as usize;
    let carry = chapter.pre_context_has_laugh(
        i,
        crate::corpus::TextToken(corpus.meta.laugh_marker),
    );
    let pre: Vec<_> = (i.checked_sub(1).map(|j| chapter.utterances[j].text.clone()))
        .into_iter()
        .collect();
    let post: Vec<_> = chapter
        .utterances
        .get(i + 1)
        .map(|v| v.text.clone())
        .into_iter()
        .collect();
    let ctx = if pre.is_empty() && post.is_empty() {
        None
    } else {
        Some(ContextTexts { pre, post })
    };
    (ctx, carry)
}

/// Renders every (source, cell, k) combination with the checkpoint and
/// scores it with the objective proxies. Deterministic given the spec
/// seed; candidates use top-k sampling so repeated draws differ.
pub fn synthesize_candidates(
    ckpt: &ModelCheckpoint,
    corpus: &Corpus,
    spec: &DistillSpec,
) -> Result<Vec<DistilledSample>> {
    spec.validate()?;
    if ckpt.stage < 2 {
        return Err(Error::validation(format!(
            "distillation needs a stage >= 2 checkpoint, got stage {}",
            ckpt.stage
        )));
    }
    let map = TokenIdMap::new(corpus.meta.t_text, corpus.meta.v_speech);
    let mut jobs = Vec::new();
    for &id in &spec.source_ids {
        let u = corpus
            .utterance(id)
            .ok_or_else(|| Error::validation(format!("unknown source utterance {id}")))?;
        for (ci, cell) in spec.grid.iter().enumerate() {
            for k in 0..spec.samples_per_cell {
                let mut bytes = Vec::new();
                bytes.extend_from_slice(&spec.seed.to_le_bytes());
                bytes.extend_from_slice(&id.to_le_bytes());
                bytes.extend_from_slice(&(ci as u64).to_le_bytes());
                bytes.extend_from_slice(&(k as u64).to_le_bytes());
                jobs.push((u, *cell, fnv64(&bytes)));
            }
        }
    }
    let results = par_map(&jobs, |(u, cell, seed)| -> Result<DistilledSample> {
        let attrs = InstructionAttributes::single(cell.0, cell.1);
        let payload = render_attribute_tokens(&attrs, &map);
        let (ctx, carry) = source_context(corpus, u);
        let mode = if ctx.is_some() {
            InferenceMode::CtxInst
        } else {
            InferenceMode::Inst
        };
        let prefix = build_inference_prefix(
            mode,
            u.embedding.clone(),
            ctx.as_ref(),
            Some(&payload),
            &u.text,
            &map,
        )?;
        let max_new = u.text.len() * corpus.meta.ratio as usize + 2;
        let out = generate(
            ckpt,
            &prefix,
            &map,
            max_new,
            &SamplingConfig::TopK {
                k: 4,
                temperature: 0.5,
                seed: *seed,
            },
        )?;
        let per = proxy_per(&out.speech, &u.text, u.speaker_id, &attrs, carry, &corpus.meta);
        let ss = similarity(&u.embedding, &speaker_base_embedding(u.speaker_id, &corpus.meta))?;
        let pitch = proxy_pitch(&out.speech).unwrap_or(f64::NAN);
        Ok(DistilledSample {
            source_id: u.id,
            speaker_id: u.speaker_id,
            attrs,
            speech: out.speech,
            per,
            ss,
            pitch,
            kept: false,
            reject_reason: None,
            provenance_seed: *seed,
        })
    });
    results.into_iter().collect()
}

fn sample_cell(s: &DistilledSample) -> Cell {
    (s.attrs.primary_label(), s.attrs.intensity)
}

/// Marks each sample kept or rejected (with the first failed criterion,
/// checked in PER, SS, pitch order), preserving input order. The pitch
/// band is centered on the per-(speaker, emotion) mean of the samples
/// that already pass PER and SS; cells with fewer than 5 such samples
/// fall back to the oracle's own rendering as the center with a
/// one-token sigma.
pub fn filter_candidates(
    samples: &[DistilledSample],
    thresholds: &FilterThresholds,
    corpus: &Corpus,
) -> Result<Vec<DistilledSample>> {
    thresholds.validate()?;
    // pitch statistics over the provisionally-passing pool
    let mut pools: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for s in samples {
        if s.per <= thresholds.per_max && s.ss >= thresholds.ss_min && s.pitch.is_finite() {
            pools
                .entry((s.speaker_id, s.attrs.primary_label().index()))
                .or_default()
                .push(s.pitch);
        }
    }
    let stats: BTreeMap<(u64, u64), (f64, f64)> = pools
        .into_iter()
        .filter(|(_, v)| v.len() >= 5)
        .map(|(k, v)| {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / v.len() as f64;
            (k, (mu, var.sqrt()))
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut s = s.clone();
        let reason = if s.per > thresholds.per_max {
            Some(RejectReason::Per)
        } else if s.ss < thresholds.ss_min {
            Some(RejectReason::Ss)
        } else {
            let (mu, sigma) = match stats.get(&(s.speaker_id, s.attrs.primary_label().index())) {
                Some(&(mu, sigma)) => (mu, sigma),
                None => {
                    let u = corpus.utterance(s.source_id).ok_or_else(|| {
                        Error::validation(format!("unknown source utterance {}", s.source_id))
                    })?;
                    let (_, carry) = source_context(corpus, u);
                    let oracle = crate::oracle::oracle_speech_tokens(
                        &u.text,
                        s.speaker_id,
                        &s.attrs,
                        carry,
                        &corpus.meta,
                    );
                    (proxy_pitch(&oracle)?, 1.0)
                }
            };
            if s.pitch.is_finite() && (s.pitch - mu).abs() <= thresholds.pitch_band * sigma {
                None
            } else {
                Some(RejectReason::Pitch)
            }
        };
        s.kept = reason.is_none();
        s.reject_reason = reason;
        out.push(s);
    }
    Ok(out)
}

/// Duplicates or subsamples kept samples so each requested cell hits
/// its target count exactly. Duplicates get fresh provenance seeds;
/// subsampling is a seeded deterministic draw.
pub fn balance_intensity(
    kept: &[DistilledSample],
    target: &[(Cell, usize)],
    seed: u64,
) -> Result<Vec<DistilledSample>> {
    let mut by_cell: BTreeMap<String, Vec<&DistilledSample>> = BTreeMap::new();
    for s in kept {
        if !s.kept {
            return Err(Error::validation(
                "balance_intensity expects only kept samples",
            ));
        }
        by_cell.entry(cell_name(&sample_cell(s))).or_default().push(s);
    }
    let mut out = Vec::new();
    for &(cell, want) in target {
        let name = cell_name(&cell);
        let have = by_cell.remove(&name).unwrap_or_default();
        if want == 0 {
            continue;
        }
        if have.is_empty() {
            return Err(Error::validation(format!(
                "no kept samples for requested cell {name}"
            )));
        }
        if have.len() >= want {
            let mut rng =
                ChaCha20Rng::seed_from_u64(fnv64(&[seed.to_le_bytes(), fnv64(name.as_bytes()).to_le_bytes()].concat()));
            let mut idx: Vec<usize> = (0..have.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(want);
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|i| have[i].clone()));
        } else {
            for k in 0..want {
                let mut dup = have[k % have.len()].clone();
                if k >= have.len() {
                    dup.provenance_seed = fnv64(
                        &[dup.provenance_seed.to_le_bytes(), (k as u64).to_le_bytes()].concat(),
                    );
                }
                out.push(dup);
            }
        }
    }
    Ok(out)
}

/// Per-cell and per-reason bookkeeping for the audit report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillAudit {
    pub synthesized: usize,
    pub kept: usize,
    pub kept_per_cell: BTreeMap<String, usize>,
    pub rejected_per_reason: BTreeMap<String, usize>,
    pub balanced_per_cell: BTreeMap<String, usize>,
}

/// The full pipeline: synthesize, filter, balance, and convert to
/// instruction-supervised training records.
pub fn run_distillation(
    ckpt: &ModelCheckpoint,
    corpus: &Corpus,
    spec: &DistillSpec,
    thresholds: &FilterThresholds,
    target: &[(Cell, usize)],
) -> Result<(Vec<DatasetRecord>, Vec<DistilledSample>, DistillAudit)> {
    let candidates = synthesize_candidates(ckpt, corpus, spec)?;
    let filtered = filter_candidates(&candidates, thresholds, corpus)?;
    let kept: Vec<DistilledSample> = filtered.iter().filter(|s| s.kept).cloned().collect();
    let balanced = balance_intensity(&kept, target, spec.seed)?;

    let map = TokenIdMap::new(corpus.meta.t_text, corpus.meta.v_speech);
    let mut records = Vec::with_capacity(balanced.len());
    for s in &balanced {
        let u = corpus
            .utterance(s.source_id)
            .ok_or_else(|| Error::validation(format!("unknown source utterance {}", s.source_id)))?;
        let payload = render_attribute_tokens(&s.attrs, &map);
        let seq = build_training_sequence(
            u.embedding.clone(),
            None,
            Some(&payload),
            &u.text,
            &s.speech,
            &map,
        )?;
        records.push(DatasetRecord::from_sequence(&seq));
    }

    let mut audit = DistillAudit {
        synthesized: filtered.len(),
        kept: kept.len(),
        kept_per_cell: BTreeMap::new(),
        rejected_per_reason: BTreeMap::new(),
        balanced_per_cell: BTreeMap::new(),
    };
    for s in &filtered {
        if s.kept {
            *audit.kept_per_cell.entry(cell_name(&sample_cell(s))).or_default() += 1;
        } else {
            let reason = match s.reject_reason.expect("rejected samples carry a reason") {
                RejectReason::Per => "per",
                RejectReason::Ss => "ss",
                RejectReason::Pitch => "pitch",
            };
            *audit.rejected_per_reason.entry(reason.to_string()).or_default() += 1;
        }
    }
    for s in &balanced {
        *audit.balanced_per_cell.entry(cell_name(&sample_cell(s))).or_default() += 1;
    }
    Ok((records, balanced, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_corpus, oracle_speech_tokens, CorpusSpec, WorldConfig};

    fn sample(cell: Cell, per: f64, ss: f64, pitch: f64, id: u64) -> DistilledSample {
        DistilledSample {
            source_id: id,
            speaker_id: 1,
            attrs: InstructionAttributes::single(cell.0, cell.1),
            speech: vec![SpeechToken(1)],
            per,
            ss,
            pitch,
            kept: true,
            reject_reason: None,
            provenance_seed: id,
        }
    }

    fn small_corpus() -> Corpus {
        make_corpus(&CorpusSpec::new(2, 6, 2), &WorldConfig::with_seed(9)).unwrap()
    }

    #[test]
    fn filter_first_failed_reason_and_order() {
        let corpus = small_corpus();
        let th = FilterThresholds::default();
        // enough passing samples that the pitch pool is self-estimated
        let mut samples: Vec<DistilledSample> =
            (0..6).map(|i| sample((EmotionLabel::Angry, Intensity::Low), 0.0, 0.9, 10.0, i)).collect();
        samples.push(sample((EmotionLabel::Angry, Intensity::Low), 0.5, 0.1, 10.0, 90));
        samples.push(sample((EmotionLabel::Angry, Intensity::Low), 0.0, 0.1, 10.0, 91));
        samples.push(sample((EmotionLabel::Angry, Intensity::Low), 0.0, 0.9, 55.0, 92));
        let out = filter_candidates(&samples, &th, &corpus).unwrap();
        assert_eq!(out.len(), samples.len());
        assert!(out[..6].iter().all(|s| s.kept));
        assert_eq!(out[6].reject_reason, Some(RejectReason::Per));
        assert_eq!(out[7].reject_reason, Some(RejectReason::Ss));
        assert_eq!(out[8].reject_reason, Some(RejectReason::Pitch));
        // order preserved
        let ids: Vec<u64> = out.iter().map(|s| s.source_id).collect();
        let expect: Vec<u64> = samples.iter().map(|s| s.source_id).collect();
        assert_eq!(ids, expect);
    }

    #[test]
    fn filter_monotone_in_per_threshold() {
        let corpus = small_corpus();
        let samples: Vec<DistilledSample> = (0..20)
            .map(|i| {
                sample(
                    (EmotionLabel::Happy, Intensity::High),
                    i as f64 / 20.0,
                    0.95,
                    10.0,
                    i,
                )
            })
            .collect();
        let mut prev: Option<Vec<u64>> = None;
        for per_max in [0.8, 0.4, 0.1] {
            let th = FilterThresholds {
                per_max,
                ..FilterThresholds::default()
            };
            let kept: Vec<u64> = filter_candidates(&samples, &th, &corpus)
                .unwrap()
                .into_iter()
                .filter(|s| s.kept)
                .map(|s| s.source_id)
                .collect();
            if let Some(p) = &prev {
                assert!(kept.iter().all(|id| p.contains(id)), "kept set not shrinking");
                assert!(kept.len() <= p.len());
            }
            prev = Some(kept);
        }
    }

    #[test]
    fn vacuous_thresholds_reject_nothing() {
        let corpus = small_corpus();
        let th = FilterThresholds {
            per_max: 1.0,
            ss_min: 0.0,
            pitch_band: f64::INFINITY,
        };
        th.validate().unwrap();
        let samples: Vec<DistilledSample> =
            (0..10).map(|i| sample((EmotionLabel::Sad, Intensity::Low), 1.0, 0.0, i as f64 * 7.0, i)).collect();
        let out = filter_candidates(&samples, &th, &corpus).unwrap();
        assert!(out.iter().all(|s| s.kept));
    }

    #[test]
    fn balance_up_and_down() {
        let mut kept = Vec::new();
        for i in 0..10 {
            kept.push(sample((EmotionLabel::Angry, Intensity::High), 0.0, 0.9, 10.0, i));
        }
        for i in 10..12 {
            kept.push(sample((EmotionLabel::Angry, Intensity::Low), 0.0, 0.9, 10.0, i));
        }
        let target = vec![
            ((EmotionLabel::Angry, Intensity::High), 6),
            ((EmotionLabel::Angry, Intensity::Low), 6),
        ];
        let out = balance_intensity(&kept, &target, 5).unwrap();
        let high = out.iter().filter(|s| s.attrs.intensity == Intensity::High).count();
        let low = out.iter().filter(|s| s.attrs.intensity == Intensity::Low).count();
        assert_eq!((high, low), (6, 6));
        // provenance traces back to a kept input id
        assert!(out.iter().all(|s| (0..12).contains(&s.source_id)));
        // deterministic
        assert_eq!(out, balance_intensity(&kept, &target, 5).unwrap());
    }

    #[test]
    fn balance_already_balanced_is_fixed_point() {
        let kept: Vec<DistilledSample> =
            (0..4).map(|i| sample((EmotionLabel::Sad, Intensity::High), 0.0, 0.9, 3.0, i)).collect();
        let target = vec![((EmotionLabel::Sad, Intensity::High), 4)];
        let out = balance_intensity(&kept, &target, 0).unwrap();
        assert_eq!(out.len(), 4);
        let mut ids: Vec<u64> = out.iter().map(|s| s.source_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn balance_empty_cell_errors_with_name() {
        let kept = vec![sample((EmotionLabel::Angry, Intensity::High), 0.0, 0.9, 1.0, 0)];
        let target = vec![((EmotionLabel::Happy, Intensity::Low), 3)];
        let err = balance_intensity(&kept, &target, 0).unwrap_err();
        assert!(err.to_string().contains("happy/low"), "{err}");
    }

    /// A checkpoint below stage 2 is rejected before any synthesis.
    #[test]
    fn synthesis_requires_stage_two() {
        let corpus = small_corpus();
        let ckpt = crate::model::init_model(&crate::model::ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ..Default::default()
        })
        .unwrap();
        let spec = DistillSpec {
            source_ids: vec![corpus.utterances().next().unwrap().id],
            grid: vec![(EmotionLabel::Angry, Intensity::Low)],
            samples_per_cell: 1,
            seed: 0,
        };
        let err = synthesize_candidates(&ckpt, &corpus, &spec).unwrap_err();
        assert!(err.to_string().contains("stage"), "{err}");
    }

    #[test]
    fn synthesis_grid_enumeration_and_determinism() {
        let corpus = small_corpus();
        let mut ckpt = crate::model::init_model(&crate::model::ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 64,
            ..Default::default()
        })
        .unwrap();
        ckpt.stage = 2; // untrained but structurally valid
        let u0 = corpus.utterances().next().unwrap().id;
        let spec = DistillSpec {
            source_ids: vec![u0],
            grid: vec![
                (EmotionLabel::Angry, Intensity::Low),
                (EmotionLabel::Angry, Intensity::High),
            ],
            samples_per_cell: 1,
            seed: 7,
        };
        let a = synthesize_candidates(&ckpt, &corpus, &spec).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].attrs.primary_label(), EmotionLabel::Angry);
        assert_eq!(a[1].attrs.primary_label(), EmotionLabel::Angry);
        assert_ne!(a[0].attrs.intensity, a[1].attrs.intensity);
        let b = synthesize_candidates(&ckpt, &corpus, &spec).unwrap();
        assert_eq!(a, b);
        // empty spec errors
        let empty = DistillSpec { grid: vec![], ..spec };
        assert!(synthesize_candidates(&ckpt, &corpus, &empty).is_err());
    }

    /// With the oracle wired in as a perfect generator stand-in, every
    /// candidate scores per = 0.
    #[test]
    fn perfect_generator_scores_zero_per() {
        let corpus = small_corpus();
        let cfg = &corpus.meta;
        for ch in &corpus.chapters {
            for (i, u) in ch.utterances.iter().enumerate() {
                let carry =
                    ch.pre_context_has_laugh(i, crate::corpus::TextToken(cfg.laugh_marker));
                for cell in [
                    (EmotionLabel::Angry, Intensity::Low),
                    (EmotionLabel::Sad, Intensity::High),
                ] {
                    let attrs = InstructionAttributes::single(cell.0, cell.1);
                    let speech =
                        oracle_speech_tokens(&u.text, u.speaker_id, &attrs, carry, cfg);
                    assert_eq!(
                        proxy_per(&speech, &u.text, u.speaker_id, &attrs, carry, cfg),
                        0.0
                    );
                }
            }
        }
    }
}
