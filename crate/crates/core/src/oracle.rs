//! Deterministic synthetic ground-truth world.
//!
//! Stands in for the real audio chain (tokenizers, vocoder, voiceprint
//! network). Speech tokens follow an affine rule modulo the speech
//! vocabulary:
//!
//! ```text
//! U_j = (a*W_j + b*speaker + c*e*i + d*carry) mod V_speech
//! ```
//!
//! where `e` is the weight-rounded emotion index, `i` the intensity
//! index and `carry` is 1 when the preceding utterance contains the
//! laugh marker. The rule is invertible in the text coordinate
//! (gcd(a, V) = 1), linearly sensitive to every conditioning factor and
//! context-dependent through the carry term, which is what makes the
//! proxy metrics below well-defined.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Chapter, Corpus, EmotionLabel, EmotionWeight, InstructionAttributes, Intensity, Persona,
    SpeakerEmbedding, Speed, SpeechToken, TextToken, Utterance, UtteranceKind, Volume,
};
use crate::error::{Error, Result};
use crate::util::{self, mod_inverse, normalized_edit_distance};

/// Configuration of the synthetic world. Serialized as the corpus
/// header record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    /// Text vocabulary size.
    pub t_text: u32,
    /// Speech vocabulary size.
    pub v_speech: u32,
    /// Speaker embedding dimension.
    pub embed_dim: usize,
    /// Speech tokens per text token.
    pub ratio: u32,
    pub coeff_a: u64,
    pub coeff_b: u64,
    pub coeff_c: u64,
    pub coeff_d: u64,
    /// Text token that triggers the carry in the following utterance.
    pub laugh_marker: u32,
    pub intensity_low_index: u64,
    pub intensity_high_index: u64,
    /// Per-speaker deviation from the shared voiceprint mean; controls
    /// how similar different speakers sound (cross-speaker similarity
    /// ~ 1/(1+spread^2)).
    pub speaker_spread: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            t_text: 32,
            v_speech: 64,
            embed_dim: 16,
            ratio: 1,
            coeff_a: 3,
            coeff_b: 5,
            coeff_c: 7,
            coeff_d: 11,
            laugh_marker: 31,
            intensity_low_index: 1,
            intensity_high_index: 4,
            speaker_spread: 0.6,
        }
    }
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        WorldConfig {
            seed,
            ..WorldConfig::default()
        }
    }

    pub fn intensity_index(&self, i: Intensity) -> u64 {
        match i {
            Intensity::Low => self.intensity_low_index,
            Intensity::High => self.intensity_high_index,
        }
    }

    /// The additive emotion term of the rule for the given attributes.
    pub fn emotion_term(&self, attrs: &InstructionAttributes) -> u64 {
        self.coeff_c * attrs.rounded_emotion_index() * self.intensity_index(attrs.intensity)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.v_speech as u64;
        if self.t_text == 0 || self.v_speech == 0 || self.embed_dim == 0 || self.ratio == 0 {
            return Err(Error::config("world sizes must be positive"));
        }
        if mod_inverse(self.coeff_a, v).is_none() {
            return Err(Error::config(format!(
                "gcd(coeff_a={}, v_speech={}) must be 1",
                self.coeff_a, self.v_speech
            )));
        }
        for (name, c) in [
            ("coeff_a", self.coeff_a),
            ("coeff_b", self.coeff_b),
            ("coeff_c", self.coeff_c),
            ("coeff_d", self.coeff_d),
        ] {
            if c >= v {
                return Err(Error::config(format!("{name}={c} must be < v_speech={v}")));
            }
        }
        if self.laugh_marker >= self.t_text {
            return Err(Error::config("laugh_marker outside the text vocabulary"));
        }
        if self.intensity_low_index == self.intensity_high_index {
            return Err(Error::config("intensity indices must differ"));
        }
        Ok(())
    }

    pub(crate) fn derived_seed(&self, tag: &str, id: u64) -> u64 {
        let mut bytes = Vec::with_capacity(tag.len() + 16);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(tag.as_bytes());
        bytes.extend_from_slice(&id.to_le_bytes());
        util::fnv64(&bytes)
    }
}

/// Ground-truth speech tokens for one utterance.
pub fn oracle_speech_tokens(
    text: &[TextToken],
    speaker_id: u64,
    attrs: &InstructionAttributes,
    pre_context_has_laugh: bool,
    cfg: &WorldConfig,
) -> Vec<SpeechToken> {
    let v = cfg.v_speech as u64;
    let offset = cfg.coeff_b * speaker_id
        + cfg.emotion_term(attrs)
        + cfg.coeff_d * u64::from(pre_context_has_laugh);
    let mut out = Vec::with_capacity(text.len() * cfg.ratio as usize);
    for w in text {
        let u = (cfg.coeff_a * w.0 as u64 + offset) % v;
        for _ in 0..cfg.ratio {
            out.push(SpeechToken(u as u32));
        }
    }
    out
}

fn unit_gaussian(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

/// Jitter-free voiceprint of a speaker: the shared world direction plus
/// a per-speaker deviation, renormalized.
pub fn speaker_base_embedding(speaker_id: u64, cfg: &WorldConfig) -> SpeakerEmbedding {
    let mut world_rng = ChaCha20Rng::seed_from_u64(cfg.derived_seed("world-mean", 0));
    let world = unit_gaussian(&mut world_rng, cfg.embed_dim);
    let mut spk_rng = ChaCha20Rng::seed_from_u64(cfg.derived_seed("speaker", speaker_id));
    let own = unit_gaussian(&mut spk_rng, cfg.embed_dim);
    let values = normalize(
        world
            .iter()
            .zip(&own)
            .map(|(w, o)| w + cfg.speaker_spread * o)
            .collect(),
    );
    SpeakerEmbedding {
        values,
        speaker_hint: Some(speaker_id),
    }
}

/// Per-utterance voiceprint: the speaker base plus `jitter` times a
/// unit noise direction derived from `utterance_seed`, renormalized.
/// `jitter = 0` returns exactly the base vector.
pub fn oracle_speaker_embedding(
    speaker_id: u64,
    utterance_seed: u64,
    jitter: f64,
    cfg: &WorldConfig,
) -> SpeakerEmbedding {
    let base = speaker_base_embedding(speaker_id, cfg);
    if jitter == 0.0 {
        return base;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.derived_seed("utt-noise", utterance_seed));
    let noise = unit_gaussian(&mut rng, cfg.embed_dim);
    let values = normalize(
        base.values
            .iter()
            .zip(&noise)
            .map(|(b, n)| b + jitter * n)
            .collect(),
    );
    SpeakerEmbedding {
        values,
        speaker_hint: Some(speaker_id),
    }
}

/// Decodes one generated speech token back to a text token under the
/// stated conditioning hypothesis; `None` when the decode falls outside
/// the text vocabulary.
pub fn invert_speech_token(
    token: SpeechToken,
    speaker_id: u64,
    attrs: &InstructionAttributes,
    pre_context_has_laugh: bool,
    cfg: &WorldConfig,
) -> Option<TextToken> {
    let v = cfg.v_speech as u64;
    let a_inv = mod_inverse(cfg.coeff_a, v).expect("validated world config");
    let offset = (cfg.coeff_b * speaker_id
        + cfg.emotion_term(attrs)
        + cfg.coeff_d * u64::from(pre_context_has_laugh))
        % v;
    let w = (a_inv * ((token.0 as u64 + v - offset) % v)) % v;
    (w < cfg.t_text as u64).then(|| TextToken(w as u32))
}

/// Token error rate proxy: decode `generated` under the hypothesis and
/// return the normalized edit distance to the reference text.
/// Out-of-vocabulary decodes never match any reference token.
pub fn proxy_per(
    generated: &[SpeechToken],
    reference_text: &[TextToken],
    speaker_id: u64,
    attrs: &InstructionAttributes,
    pre_context_has_laugh: bool,
    cfg: &WorldConfig,
) -> f64 {
    // one decode per group of `ratio` speech tokens
    let recovered: Vec<i64> = generated
        .chunks(cfg.ratio as usize)
        .map(|chunk| {
            invert_speech_token(chunk[0], speaker_id, attrs, pre_context_has_laugh, cfg)
                .map(|t| t.0 as i64)
                .unwrap_or(-1)
        })
        .collect();
    let reference: Vec<i64> = reference_text.iter().map(|t| t.0 as i64).collect();
    normalized_edit_distance(&recovered, &reference)
}

/// Mean token id, a monotone stand-in for pitch.
pub fn proxy_pitch(generated: &[SpeechToken]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::validation("proxy_pitch on empty token list"));
    }
    Ok(generated.iter().map(|t| t.0 as f64).sum::<f64>() / generated.len() as f64)
}

/// Classifies the emotion of generated tokens by exhaustively scoring
/// every (emotion, intensity) hypothesis with [`proxy_per`] and taking
/// the argmin. Ties break toward the smaller emotion index, then low
/// intensity (neutral renderings therefore report low intensity).
pub fn proxy_emotion_classify(
    generated: &[SpeechToken],
    text: &[TextToken],
    speaker_id: u64,
    pre_context_has_laugh: bool,
    cfg: &WorldConfig,
) -> (EmotionLabel, Intensity) {
    let mut best = (EmotionLabel::Neutral, Intensity::Low);
    let mut best_per = f64::INFINITY;
    for label in EmotionLabel::ALL {
        for intensity in Intensity::ALL {
            let hyp = InstructionAttributes::single(label, intensity);
            let per = proxy_per(generated, text, speaker_id, &hyp, pre_context_has_laugh, cfg);
            if per < best_per {
                best_per = per;
                best = (label, intensity);
            }
        }
    }
    best
}

/// Parameters for [`make_corpus`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_chapters: u64,
    pub utterances_per_chapter: u64,
    pub n_speakers: u64,
    pub dialogue_fraction: f64,
    pub laugh_fraction: f64,
    /// Fixed token count per utterance (the toy tokenizer canonicalizes
    /// every sentence to this length).
    pub text_len: usize,
    pub jitter: f64,
    /// Probability that a dialogue utterance carries a mixed emotion pair.
    pub mixed_fraction: f64,
    /// Probability of high intensity on dialogue; deliberately small so
    /// high-intensity samples are scarce before distillation.
    pub high_intensity_fraction: f64,
}

impl CorpusSpec {
    pub fn new(n_chapters: u64, utterances_per_chapter: u64, n_speakers: u64) -> Self {
        CorpusSpec {
            n_chapters,
            utterances_per_chapter,
            n_speakers,
            dialogue_fraction: 0.5,
            laugh_fraction: 0.25,
            text_len: 6,
            jitter: 0.1,
            mixed_fraction: 0.2,
            high_intensity_fraction: 0.15,
        }
    }
}

fn random_attrs(rng: &mut ChaCha20Rng, spec: &CorpusSpec) -> InstructionAttributes {
    sample_attributes(rng, spec.mixed_fraction, spec.high_intensity_fraction)
}

/// Draws dialogue attributes from the corpus distribution. Shared by
/// corpus generation and by the instruction-supervised data builder,
/// which re-renders utterances under fresh attribute draws.
pub fn sample_attributes(
    rng: &mut ChaCha20Rng,
    mixed_fraction: f64,
    high_intensity_fraction: f64,
) -> InstructionAttributes {
    let intensity = if rng.gen::<f64>() < high_intensity_fraction {
        Intensity::High
    } else {
        Intensity::Low
    };
    let volume = [Volume::Low, Volume::Medium, Volume::High][rng.gen_range(0..3)];
    let speed = [Speed::Slow, Speed::Medium, Speed::Fast][rng.gen_range(0..3)];
    let emotions = if rng.gen::<f64>() < mixed_fraction {
        let i = rng.gen_range(0..3);
        let j = (i + 1 + rng.gen_range(0..2)) % 3;
        let w = [0.25, 0.5, 0.75][rng.gen_range(0..3)];
        vec![
            EmotionWeight {
                label: EmotionLabel::NON_NEUTRAL[i],
                weight: w,
            },
            EmotionWeight {
                label: EmotionLabel::NON_NEUTRAL[j],
                weight: 1.0 - w,
            },
        ]
    } else {
        vec![EmotionWeight {
            label: EmotionLabel::NON_NEUTRAL[rng.gen_range(0..3)],
            weight: 1.0,
        }]
    };
    InstructionAttributes {
        emotions,
        intensity,
        volume,
        speed,
    }
}

/// Generates a reproducible corpus whose speech fields are the oracle's
/// own renderings. Narration is spoken by the narrator persona
/// (speaker 0) in neutral style; dialogue speakers and non-neutral
/// attributes are drawn per the `CorpusSpec` distribution. Chapters are
/// generated independently from per-chapter derived seeds.
pub fn make_corpus(spec: &CorpusSpec, cfg: &WorldConfig) -> Result<Corpus> {
    cfg.validate()?;
    if spec.n_chapters == 0 || spec.utterances_per_chapter == 0 || spec.n_speakers == 0 {
        return Err(Error::config("corpus counts must be >= 1"));
    }
    for (name, f) in [
        ("dialogue_fraction", spec.dialogue_fraction),
        ("laugh_fraction", spec.laugh_fraction),
        ("mixed_fraction", spec.mixed_fraction),
        ("high_intensity_fraction", spec.high_intensity_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config(format!("{name}={f} outside [0, 1]")));
        }
    }
    if spec.text_len == 0 {
        return Err(Error::config("text_len must be >= 1"));
    }

    let mut personas = vec![Persona::named(0, "Narrator")];
    for s in 1..=spec.n_speakers {
        personas.push(Persona::named(s, format!("Speaker{s}")));
    }

    let chapter_ids: Vec<u64> = (0..spec.n_chapters).collect();
    let chapters: Vec<Chapter> = util::par_map(&chapter_ids, |&chapter_id| {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.derived_seed("chapter", chapter_id));
        let mut utterances: Vec<Utterance> = Vec::with_capacity(spec.utterances_per_chapter as usize);
        for idx in 0..spec.utterances_per_chapter {
            let id = chapter_id * spec.utterances_per_chapter + idx;
            let dialogue = rng.gen::<f64>() < spec.dialogue_fraction;
            let (kind, speaker_id, attrs) = if dialogue {
                (
                    UtteranceKind::Dialogue,
                    rng.gen_range(1..=spec.n_speakers),
                    random_attrs(&mut rng, spec),
                )
            } else {
                (UtteranceKind::Narration, 0, InstructionAttributes::neutral())
            };
            let mut text: Vec<TextToken> = (0..spec.text_len)
                .map(|_| TextToken(rng.gen_range(0..cfg.t_text.saturating_sub(1).max(1))))
                .collect();
            if !dialogue && rng.gen::<f64>() < spec.laugh_fraction {
                // anywhere in the sentence, so nothing downstream can
                // key on a fixed marker position
                let pos = rng.gen_range(0..text.len());
                text[pos] = TextToken(cfg.laugh_marker);
            }
            let carry = idx > 0
                && utterances[idx as usize - 1]
                    .text
                    .iter()
                    .any(|t| t.0 == cfg.laugh_marker);
            let speech = oracle_speech_tokens(&text, speaker_id, &attrs, carry, cfg);
            let embedding = oracle_speaker_embedding(speaker_id, id, spec.jitter, cfg);
            utterances.push(Utterance {
                id,
                chapter_id,
                index_in_chapter: idx as u32,
                kind,
                speaker_id,
                text,
                attributes: attrs,
                speech,
                embedding,
            });
        }
        Chapter {
            id: chapter_id,
            utterances,
        }
    });

    Ok(Corpus {
        meta: cfg.clone(),
        personas,
        chapters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cast::similarity;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn rule_zero_case() {
        let out = oracle_speech_tokens(
            &[TextToken(0)],
            0,
            &InstructionAttributes::neutral(),
            false,
            &cfg(),
        );
        assert_eq!(out, vec![SpeechToken(0)]);
    }

    #[test]
    fn rule_hand_evaluated() {
        let attrs = InstructionAttributes::neutral();
        let text = [TextToken(1), TextToken(2)];
        let out = oracle_speech_tokens(&text, 1, &attrs, false, &cfg());
        assert_eq!(out, vec![SpeechToken(8), SpeechToken(11)]);
        let with_laugh = oracle_speech_tokens(&text, 1, &attrs, true, &cfg());
        assert_eq!(with_laugh, vec![SpeechToken(19), SpeechToken(22)]);
    }

    #[test]
    fn carry_flip_shifts_every_token_by_d() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..200 {
            let text: Vec<TextToken> =
                (0..rng.gen_range(1..10)).map(|_| TextToken(rng.gen_range(0..c.t_text))).collect();
            let attrs = InstructionAttributes::single(
                EmotionLabel::NON_NEUTRAL[rng.gen_range(0..3)],
                if rng.gen() { Intensity::High } else { Intensity::Low },
            );
            let s = rng.gen_range(0..8);
            let plain = oracle_speech_tokens(&text, s, &attrs, false, &c);
            let carried = oracle_speech_tokens(&text, s, &attrs, true, &c);
            for (p, q) in plain.iter().zip(&carried) {
                assert_eq!((p.0 as u64 + c.coeff_d) % c.v_speech as u64, q.0 as u64);
            }
        }
    }

    #[test]
    fn per_of_oracle_output_is_zero() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..500 {
            let text: Vec<TextToken> =
                (0..rng.gen_range(1..12)).map(|_| TextToken(rng.gen_range(0..c.t_text))).collect();
            let attrs = InstructionAttributes::single(
                EmotionLabel::ALL[rng.gen_range(0..4)],
                if rng.gen() { Intensity::High } else { Intensity::Low },
            );
            let s = rng.gen_range(0..6);
            let laugh = rng.gen();
            let gen = oracle_speech_tokens(&text, s, &attrs, laugh, &c);
            assert_eq!(proxy_per(&gen, &text, s, &attrs, laugh, &c), 0.0);
        }
    }

    #[test]
    fn per_single_corruption_out_of_ten() {
        let c = cfg();
        let text: Vec<TextToken> = (0..10).map(TextToken).collect();
        let attrs = InstructionAttributes::neutral();
        let mut gen = oracle_speech_tokens(&text, 2, &attrs, false, &c);
        gen[4] = SpeechToken((gen[4].0 + 3) % c.v_speech);
        let per = proxy_per(&gen, &text, 2, &attrs, false, &c);
        assert!((per - 0.1).abs() < 1e-12, "per={per}");
    }

    #[test]
    fn per_all_out_of_range_is_one() {
        let c = cfg();
        let text: Vec<TextToken> = (0..5).map(TextToken).collect();
        let attrs = InstructionAttributes::neutral();
        // speaker 0, neutral, no carry: U = 3W, decode of u is u/3 mod 64.
        // pick tokens whose decode lands outside [0, 32)
        let gen: Vec<SpeechToken> = (0..5)
            .map(|i| SpeechToken((3 * (40 + i)) % c.v_speech))
            .collect();
        assert_eq!(proxy_per(&gen, &text, 0, &attrs, false, &c), 1.0);
    }

    #[test]
    fn pitch_mean_and_empty() {
        let toks = [SpeechToken(10), SpeechToken(20), SpeechToken(30)];
        assert_eq!(proxy_pitch(&toks).unwrap(), 20.0);
        assert!(proxy_pitch(&[]).is_err());
    }

    #[test]
    fn pitch_shift_matches_intensity_delta() {
        let c = cfg();
        // small tokens so nothing wraps mod 64
        let text: Vec<TextToken> = vec![TextToken(1), TextToken(2), TextToken(3)];
        let low = InstructionAttributes::single(EmotionLabel::Angry, Intensity::Low);
        let high = InstructionAttributes::single(EmotionLabel::Angry, Intensity::High);
        let p_low = proxy_pitch(&oracle_speech_tokens(&text, 0, &low, false, &c)).unwrap();
        let p_high = proxy_pitch(&oracle_speech_tokens(&text, 0, &high, false, &c)).unwrap();
        let expected = c.coeff_c as f64
            * EmotionLabel::Angry.index() as f64
            * (c.intensity_high_index - c.intensity_low_index) as f64;
        assert_eq!(p_high - p_low, expected);
    }

    #[test]
    fn classify_recovers_all_non_neutral_pairs() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for label in EmotionLabel::NON_NEUTRAL {
            for intensity in Intensity::ALL {
                for _ in 0..100 {
                    let text: Vec<TextToken> = (0..rng.gen_range(3..10))
                        .map(|_| TextToken(rng.gen_range(0..c.t_text)))
                        .collect();
                    let s = rng.gen_range(0..6);
                    let laugh = rng.gen();
                    let attrs = InstructionAttributes::single(label, intensity);
                    let gen = oracle_speech_tokens(&text, s, &attrs, laugh, &c);
                    assert_eq!(
                        proxy_emotion_classify(&gen, &text, s, laugh, &c),
                        (label, intensity),
                        "label={label} intensity={intensity}"
                    );
                }
            }
        }
    }

    #[test]
    fn classify_neutral_ties_to_low() {
        let c = cfg();
        let text: Vec<TextToken> = (0..6).map(TextToken).collect();
        let gen =
            oracle_speech_tokens(&text, 1, &InstructionAttributes::neutral(), false, &c);
        assert_eq!(
            proxy_emotion_classify(&gen, &text, 1, false, &c),
            (EmotionLabel::Neutral, Intensity::Low)
        );
    }

    #[test]
    fn classify_is_argmin_even_when_corrupted() {
        let c = cfg();
        let text: Vec<TextToken> = (0..8).map(TextToken).collect();
        let attrs = InstructionAttributes::single(EmotionLabel::Sad, Intensity::High);
        let mut gen = oracle_speech_tokens(&text, 1, &attrs, false, &c);
        for i in 0..4 {
            gen[i] = SpeechToken((gen[i].0 + 1) % c.v_speech);
        }
        let (label, intensity) = proxy_emotion_classify(&gen, &text, 1, false, &c);
        let winner = proxy_per(
            &gen,
            &text,
            1,
            &InstructionAttributes::single(label, intensity),
            false,
            &c,
        );
        for l in EmotionLabel::ALL {
            for i in Intensity::ALL {
                let per = proxy_per(
                    &gen,
                    &text,
                    1,
                    &InstructionAttributes::single(l, i),
                    false,
                    &c,
                );
                assert!(winner <= per);
            }
        }
    }

    #[test]
    fn embedding_zero_jitter_is_base() {
        let c = cfg();
        let base = speaker_base_embedding(3, &c);
        for seed in [0u64, 17, 91] {
            let e = oracle_speaker_embedding(3, seed, 0.0, &c);
            assert_eq!(similarity(&e, &base).unwrap(), 1.0);
        }
    }

    #[test]
    fn cross_speaker_similarity_below_point_nine() {
        // Monte-Carlo over 10^4 speaker pairs drawn from distinct world
        // seeds; the spread is tuned so cross-speaker voiceprints stay
        // below 0.9 with probability >= 0.99.
        let mut below = 0usize;
        let n = 10_000;
        for k in 0..n {
            let c = WorldConfig::with_seed(k as u64);
            let a = speaker_base_embedding(2 * k as u64 + 1, &c);
            let b = speaker_base_embedding(2 * k as u64 + 2, &c);
            if similarity(&a, &b).unwrap() < 0.9 {
                below += 1;
            }
        }
        assert!(below as f64 / n as f64 >= 0.99, "only {below}/{n} below 0.9");
    }

    #[test]
    fn similarity_decreases_with_jitter() {
        let c = cfg();
        let base = speaker_base_embedding(1, &c);
        let mean_sim = |jitter: f64| {
            (0..1000)
                .map(|seed| {
                    similarity(&oracle_speaker_embedding(1, seed, jitter, &c), &base).unwrap()
                })
                .sum::<f64>()
                / 1000.0
        };
        assert!(mean_sim(0.1) > mean_sim(0.5));
    }

    #[test]
    fn make_corpus_all_narration_verifies_against_rule() {
        let c = cfg();
        let mut spec = CorpusSpec::new(1, 3, 1);
        spec.dialogue_fraction = 0.0;
        spec.laugh_fraction = 0.0;
        let corpus = make_corpus(&spec, &c).unwrap();
        let ch = &corpus.chapters[0];
        assert_eq!(ch.utterances.len(), 3);
        for (i, u) in ch.utterances.iter().enumerate() {
            assert_eq!(u.kind, UtteranceKind::Narration);
            assert_eq!(u.attributes, InstructionAttributes::neutral());
            let carry = ch.pre_context_has_laugh(i, TextToken(c.laugh_marker));
            assert!(!carry);
            assert_eq!(
                u.speech,
                oracle_speech_tokens(&u.text, u.speaker_id, &u.attributes, carry, &c)
            );
        }
    }

    #[test]
    fn make_corpus_is_deterministic() {
        let c = WorldConfig::with_seed(42);
        let spec = CorpusSpec::new(3, 10, 3);
        assert_eq!(make_corpus(&spec, &c).unwrap(), make_corpus(&spec, &c).unwrap());
    }

    #[test]
    fn make_corpus_dialogue_fraction_one() {
        let c = cfg();
        let mut spec = CorpusSpec::new(2, 8, 2);
        spec.dialogue_fraction = 1.0;
        let corpus = make_corpus(&spec, &c).unwrap();
        assert!(corpus
            .utterances()
            .all(|u| u.kind == UtteranceKind::Dialogue));
    }

    #[test]
    fn make_corpus_rejects_bad_counts() {
        assert!(make_corpus(&CorpusSpec::new(0, 3, 1), &cfg()).is_err());
        let mut spec = CorpusSpec::new(1, 1, 1);
        spec.dialogue_fraction = 1.5;
        assert!(make_corpus(&spec, &cfg()).is_err());
    }

    #[test]
    fn generated_corpus_speech_matches_carry_rule() {
        let c = WorldConfig::with_seed(5);
        let spec = CorpusSpec::new(2, 20, 2);
        let corpus = make_corpus(&spec, &c).unwrap();
        let mut saw_carry = false;
        for ch in &corpus.chapters {
            for (i, u) in ch.utterances.iter().enumerate() {
                let carry = ch.pre_context_has_laugh(i, TextToken(c.laugh_marker));
                saw_carry |= carry;
                assert_eq!(
                    u.speech,
                    oracle_speech_tokens(&u.text, u.speaker_id, &u.attributes, carry, &c)
                );
            }
        }
        assert!(saw_carry, "expected at least one carry-affected utterance");
    }
}
