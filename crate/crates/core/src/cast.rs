//! Voice casting: voiceprint similarity, threshold clustering, and the
//! decoupled multi-constraint prompt selection mechanism.
//!
//! Under the decoupled policy a prompt is chosen from the same chapter
//! with its voiceprint similarity to the target at least the policy
//! threshold. Among qualifying candidates the *least* similar one is
//! taken: the threshold guarantees voice stability, and staying close
//! to it maximizes prosodic diversity, which is what makes measured
//! speaker similarity track the threshold. When nothing qualifies the
//! most similar candidate is used and the assignment is flagged as a
//! fallback.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SpeakerEmbedding, Utterance, NORM_TOLERANCE};
use crate::error::{Error, Result};
use crate::util;

/// Cosine similarity of two unit-norm voiceprints.
pub fn similarity(e1: &SpeakerEmbedding, e2: &SpeakerEmbedding) -> Result<f64> {
    if e1.values.len() != e2.values.len() {
        return Err(Error::validation(format!(
            "embedding dims differ: {} vs {}",
            e1.values.len(),
            e2.values.len()
        )));
    }
    for (who, e) in [("first", e1), ("second", e2)] {
        if (e.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::validation(format!(
                "{who} embedding is not unit-norm (norm {})",
                e.norm()
            )));
        }
    }
    Ok(e1.values.iter().zip(&e2.values).map(|(a, b)| a * b).sum())
}

/// Greedy single-link agglomeration in utterance order: each utterance
/// joins the first existing cluster whose (renormalized running mean)
/// centroid is at least `threshold` similar, else opens a new cluster.
pub fn cluster_voices(utterances: &[&Utterance], threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut assignment = Vec::with_capacity(utterances.len());
    for u in utterances {
        let mut chosen = None;
        for (ci, sum) in sums.iter().enumerate() {
            let centroid = normalize(sum.clone());
            let sim = similarity(&u.embedding, &centroid)?;
            if sim >= threshold {
                chosen = Some(ci);
                break;
            }
        }
        match chosen {
            Some(ci) => {
                for (s, v) in sums[ci].iter_mut().zip(&u.embedding.values) {
                    *s += v;
                }
                counts[ci] += 1;
                assignment.push(ci);
            }
            None => {
                sums.push(u.embedding.values.clone());
                counts.push(1);
                assignment.push(sums.len() - 1);
            }
        }
    }
    Ok(assignment)
}

fn normalize(mut v: Vec<f64>) -> SpeakerEmbedding {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    SpeakerEmbedding {
        values: v,
        speaker_hint: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    NonDecoupled,
    Decoupled,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_decoupled" => Ok(PromptMode::NonDecoupled),
            "decoupled" => Ok(PromptMode::Decoupled),
            other => Err(Error::Usage(format!("unknown prompt mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPolicy {
    pub mode: PromptMode,
    pub similarity_threshold: f64,
    pub same_chapter_only: bool,
    pub include_emotional_bank: bool,
}

impl PromptPolicy {
    pub fn non_decoupled() -> Self {
        PromptPolicy {
            mode: PromptMode::NonDecoupled,
            similarity_threshold: 1.0,
            same_chapter_only: true,
            include_emotional_bank: false,
        }
    }

    /// The named presets of the threshold ablation are `decoupled(0.68)`
    /// and `decoupled(0.8)`.
    pub fn decoupled(threshold: f64) -> Self {
        PromptPolicy {
            mode: PromptMode::Decoupled,
            similarity_threshold: threshold,
            same_chapter_only: true,
            include_emotional_bank: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::config(format!(
                "similarity_threshold {} outside [0, 1]",
                self.similarity_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptAssignment {
    pub target_utterance_id: u64,
    pub prompt_utterance_id: u64,
    pub similarity: f64,
    pub fallback: bool,
}

/// Selects a prompt for `target`. `pool` is the candidate pool (already
/// chapter-scoped by the caller when the policy demands it); bank
/// entries join the candidates when their voiceprint is itself
/// threshold-compatible with the target.
pub fn select_prompt(
    target: &Utterance,
    pool: &[&Utterance],
    policy: &PromptPolicy,
    emotional_bank: &[Utterance],
) -> Result<PromptAssignment> {
    policy.validate()?;
    if policy.mode == PromptMode::NonDecoupled {
        return Ok(PromptAssignment {
            target_utterance_id: target.id,
            prompt_utterance_id: target.id,
            similarity: 1.0,
            fallback: false,
        });
    }

    let mut candidates: Vec<(u64, f64)> = Vec::new();
    for u in pool {
        if u.id == target.id {
            continue;
        }
        if policy.same_chapter_only && u.chapter_id != target.chapter_id {
            continue;
        }
        candidates.push((u.id, similarity(&u.embedding, &target.embedding)?));
    }
    if policy.include_emotional_bank {
        for u in emotional_bank {
            if u.id == target.id {
                continue;
            }
            let sim = similarity(&u.embedding, &target.embedding)?;
            if sim >= policy.similarity_threshold {
                candidates.push((u.id, sim));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::validation(format!(
            "no prompt candidates for utterance {}",
            target.id
        )));
    }

    let qualified = candidates
        .iter()
        .filter(|(_, s)| *s >= policy.similarity_threshold)
        // least similar qualifying candidate; ties to the smaller id
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    match qualified {
        Some(&(id, sim)) => Ok(PromptAssignment {
            target_utterance_id: target.id,
            prompt_utterance_id: id,
            similarity: sim,
            fallback: false,
        }),
        None => {
            let &(id, sim) = candidates
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty candidates");
            Ok(PromptAssignment {
                target_utterance_id: target.id,
                prompt_utterance_id: id,
                similarity: sim,
                fallback: true,
            })
        }
    }
}

/// One assignment per utterance, chapters processed independently.
pub fn build_prompt_table(
    corpus: &Corpus,
    policy: &PromptPolicy,
    emotional_bank: &[Utterance],
) -> Result<Vec<PromptAssignment>> {
    policy.validate()?;
    let results: Vec<Result<Vec<PromptAssignment>>> = util::par_map(&corpus.chapters, |ch| {
        let pool: Vec<&Utterance> = if policy.same_chapter_only {
            ch.utterances.iter().collect()
        } else {
            corpus.utterances().collect()
        };
        ch.utterances
            .iter()
            .map(|u| select_prompt(u, &pool, policy, emotional_bank))
            .collect()
    });
    let mut out = Vec::with_capacity(corpus.n_utterances());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean assignment similarity, optionally excluding fallbacks. `None`
/// when nothing remains to average.
pub fn mean_similarity(table: &[PromptAssignment], exclude_fallbacks: bool) -> Option<f64> {
    let sims: Vec<f64> = table
        .iter()
        .filter(|a| !(exclude_fallbacks && a.fallback))
        .map(|a| a.similarity)
        .collect();
    if sims.is_empty() {
        return None;
    }
    Some(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Dialogue utterances with non-neutral style, re-embedded with the
/// jitter-free speaker voiceprint; the high-quality labeled pool that
/// backs prompt selection for emotional targets.
pub fn emotional_bank_from(corpus: &Corpus) -> Vec<Utterance> {
    use crate::corpus::EmotionLabel;
    use crate::oracle::speaker_base_embedding;
    corpus
        .utterances()
        .filter(|u| u.attributes.primary_label() != EmotionLabel::Neutral)
        .map(|u| {
            let mut u = u.clone();
            u.embedding = speaker_base_embedding(u.speaker_id, &corpus.meta);
            u
        })
        .collect()
}

pub fn save_prompt_table(table: &[PromptAssignment], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in table {
        let line = serde_json::to_string(a)
            .map_err(|e| Error::runtime(format!("serialize assignment: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_prompt_table(path: &Path) -> Result<Vec<PromptAssignment>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?,
        );
    }
    Ok(out)
}
