//! Fiction-to-corpus front end: chapter segmentation, quote-based
//! narration/dialogue extraction, rule-cascade speaker attribution,
//! context windows, and a fixed-length hashing tokenizer that feeds the
//! rest of the pipeline.

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Chapter, Corpus, InstructionAttributes, Persona, TextToken, Utterance, UtteranceKind,
};
use crate::error::{Error, Result};
use crate::instruction::{decompose, InstructionLexicon};
use crate::oracle::{oracle_speaker_embedding, oracle_speech_tokens, WorldConfig};
use crate::util::fnv64;

pub const NARRATOR_NAME: &str = "NARRATOR";
pub const UNKNOWN_NAME: &str = "UNKNOWN";

static DEFAULT_CHAPTER_PATTERN: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^(Chapter\b|第.+章)").expect("valid default pattern"));

/// A raw fiction document plus its chapter-heading rule.
#[derive(Debug, Clone)]
pub struct RawDocument {
    pub text: String,
    pub chapter_pattern: Regex,
}

impl RawDocument {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::validation("empty document"));
        }
        Ok(RawDocument {
            text,
            chapter_pattern: DEFAULT_CHAPTER_PATTERN.clone(),
        })
    }

    pub fn with_pattern(text: impl Into<String>, pattern: &str) -> Result<Self> {
        let mut doc = RawDocument::new(text)?;
        doc.chapter_pattern = Regex::new(pattern)
            .map_err(|e| Error::config(format!("chapter pattern: {e}")))?;
        Ok(doc)
    }
}

/// One chapter's text span, with its heading line when present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChapterSpan {
    pub heading: Option<String>,
    pub text: String,
}

/// Splits the document at heading lines. A document with no heading
/// yields one span covering the whole text; text before the first
/// heading becomes a heading-less leading span.
pub fn segment_chapters(doc: &RawDocument) -> Vec<ChapterSpan> {
    let mut spans = Vec::new();
    let mut current = ChapterSpan {
        heading: None,
        text: String::new(),
    };
    for line in doc.text.lines() {
        if doc.chapter_pattern.is_match(line) {
            if current.heading.is_some() || !current.text.trim().is_empty() {
                spans.push(current);
            }
            current = ChapterSpan {
                heading: Some(line.to_string()),
                text: String::new(),
            };
        } else {
            current.text.push_str(line);
            current.text.push('\n');
        }
    }
    if current.heading.is_some() || !current.text.trim().is_empty() || spans.is_empty() {
        spans.push(current);
    }
    spans
}

/// Quote and sentence conventions for extraction.
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    /// Open/close pairs; an identical pair toggles like straight quotes.
    pub quote_pairs: Vec<(char, char)>,
    pub terminators: Vec<char>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            quote_pairs: vec![('"', '"'), ('\u{201c}', '\u{201d}'), ('「', '」')],
            terminators: vec!['.', '!', '?', '。', '！', '？'],
        }
    }
}

/// One extracted sentence before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawUtterance {
    pub kind: UtteranceKind,
    pub text: String,
    /// Filled by [`attribute_speakers`].
    pub speaker_name: Option<String>,
}

fn split_sentences(text: &str, opts: &ExtractOptions) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        cur.push(c);
        if opts.terminators.contains(&c) {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

/// Splits a chapter into narration and dialogue sentences. Quoted spans
/// become dialogue; everything else is sentence-split narration. An
/// unclosed quote produces a warning and the remainder is kept as
/// narration, opening mark included.
pub fn extract_utterances(
    chapter_text: &str,
    opts: &ExtractOptions,
) -> (Vec<RawUtterance>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let chars: Vec<char> = chapter_text.chars().collect();
    let mut narration = String::new();
    let flush = |buf: &mut String, out: &mut Vec<RawUtterance>, kind: UtteranceKind| {
        for s in split_sentences(buf, opts) {
            out.push(RawUtterance {
                kind,
                text: s,
                speaker_name: None,
            });
        }
        buf.clear();
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if let Some(&(_, close)) = opts.quote_pairs.iter().find(|&&(open, _)| open == c) {
            match chars[i + 1..].iter().position(|&d| d == close) {
                Some(rel) => {
                    flush(&mut narration, &mut out, UtteranceKind::Narration);
                    let quoted: String = chars[i + 1..i + 1 + rel].iter().collect();
                    let mut q = quoted.clone();
                    flush(&mut q, &mut out, UtteranceKind::Dialogue);
                    i += rel + 2;
                    continue;
                }
                None => {
                    warnings.push(format!(
                        "unclosed quote starting at character {i}; kept as narration"
                    ));
                    narration.extend(&chars[i..]);
                    i = chars.len();
                    continue;
                }
            }
        }
        narration.push(c);
        i += 1;
    }
    flush(&mut narration, &mut out, UtteranceKind::Narration);
    (out, warnings)
}

fn contains_name(text: &str, name: &str) -> bool {
    let lname = name.to_lowercase();
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w == lname)
}

/// Assigns a speaker name to every utterance in place. Narration is
/// always the narrator. Dialogue goes through the cascade: a persona
/// named in the quote itself or the immediately preceding narration
/// wins; otherwise two-party alternation continues; otherwise UNKNOWN.
pub fn attribute_speakers(utterances: &mut [RawUtterance], personas: &[Persona]) {
    let mut dialogue_history: Vec<String> = Vec::new();
    for i in 0..utterances.len() {
        if utterances[i].kind == UtteranceKind::Narration {
            utterances[i].speaker_name = Some(NARRATOR_NAME.to_string());
            continue;
        }
        let preceding_narration = match i.checked_sub(1) {
            Some(j) if utterances[j].kind == UtteranceKind::Narration => {
                utterances[j].text.as_str()
            }
            _ => "",
        };
        let named = personas.iter().find(|p| {
            p.name != NARRATOR_NAME
                && (contains_name(&utterances[i].text, &p.name)
                    || contains_name(preceding_narration, &p.name))
        });
        let name = match named {
            Some(p) => p.name.clone(),
            None => {
                let n = dialogue_history.len();
                if n >= 2 && dialogue_history[n - 1] != dialogue_history[n - 2] {
                    dialogue_history[n - 2].clone()
                } else {
                    UNKNOWN_NAME.to_string()
                }
            }
        };
        dialogue_history.push(name.clone());
        utterances[i].speaker_name = Some(name);
    }
}

/// Neighboring-utterance ids for one target, nearest first on the pre
/// side, chapter-bounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub utterance_id: u64,
    pub pre: Vec<u64>,
    pub post: Vec<u64>,
}

pub fn build_context_windows(chapter: &Chapter, k_pre: usize, k_post: usize) -> Vec<ContextWindow> {
    chapter
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| ContextWindow {
            utterance_id: u.id,
            pre: (0..i)
                .rev()
                .take(k_pre)
                .map(|j| chapter.utterances[j].id)
                .collect(),
            post: chapter.utterances[i + 1..]
                .iter()
                .take(k_post)
                .map(|v| v.id)
                .collect(),
        })
        .collect()
}

const LAUGH_WORDS: [&str; 6] = ["haha", "hahaha", "laugh", "laughed", "laughs", "laughing"];

fn hash_token(word: &str, cfg: &WorldConfig) -> TextToken {
    // hash into the vocabulary minus the laugh marker, which only
    // explicit laugh words may produce
    let h = (fnv64(word.as_bytes()) % (cfg.t_text as u64 - 1)) as u32;
    TextToken(if h >= cfg.laugh_marker { h + 1 } else { h })
}

/// Canonicalizes a sentence to exactly `text_len` tokens: words hash
/// into the text vocabulary, laugh words map to the laugh marker, and
/// short sentences are padded with tokens derived from the sentence
/// hash so padding stays deterministic but sentence-specific.
pub fn hash_tokenize(sentence: &str, text_len: usize, cfg: &WorldConfig) -> Vec<TextToken> {
    let mut toks: Vec<TextToken> = sentence
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            if LAUGH_WORDS.contains(&w) {
                TextToken(cfg.laugh_marker)
            } else {
                hash_token(w, cfg)
            }
        })
        .collect();
    let has_laugh = toks.iter().any(|t| t.0 == cfg.laugh_marker);
    toks.truncate(text_len);
    if has_laugh && !toks.iter().any(|t| t.0 == cfg.laugh_marker) {
        // keep the carry-relevant marker visible after truncation
        let last = toks.len() - 1;
        toks[last] = TextToken(cfg.laugh_marker);
    }
    let mut pad = 0u64;
    while toks.len() < text_len {
        toks.push(hash_token(&format!("{sentence}\u{0}{pad}"), cfg));
        pad += 1;
    }
    toks
}

/// Full front end: fiction text to a validated corpus. Personas must
/// cover the cast; a narrator and an UNKNOWN reserve persona are added
/// when missing. Dialogue attributes come from the instruction lexicon
/// applied to the attributing narration sentence, so cues like
/// "shouted angrily" carry through to the oracle rendering.
pub fn corpus_from_fiction(
    doc: &RawDocument,
    personas: &[Persona],
    lexicon: &InstructionLexicon,
    cfg: &WorldConfig,
    text_len: usize,
    jitter: f64,
) -> Result<(Corpus, Vec<String>)> {
    cfg.validate()?;
    let opts = ExtractOptions::default();
    let mut roster: Vec<Persona> = Vec::new();
    if !personas.iter().any(|p| p.name == NARRATOR_NAME) {
        roster.push(Persona::named(0, NARRATOR_NAME));
    }
    roster.extend(personas.iter().cloned());
    if !roster.iter().any(|p| p.name == UNKNOWN_NAME) {
        let reserve_id = roster.iter().map(|p| p.speaker_id).max().unwrap_or(0) + 1;
        roster.push(Persona::named(reserve_id, UNKNOWN_NAME));
    }
    let by_name = |name: &str| -> &Persona {
        roster
            .iter()
            .find(|p| p.name == name)
            .expect("attribution only produces roster names")
    };

    let mut warnings = Vec::new();
    let mut chapters = Vec::new();
    let mut next_id = 0u64;
    for (chapter_id, span) in segment_chapters(doc).into_iter().enumerate() {
        let (mut raw, mut w) = extract_utterances(&span.text, &opts);
        warnings.append(&mut w);
        attribute_speakers(&mut raw, &roster);
        let mut utterances: Vec<Utterance> = Vec::with_capacity(raw.len());
        let mut last_narration = String::new();
        for (idx, r) in raw.iter().enumerate() {
            let persona = by_name(r.speaker_name.as_deref().expect("attributed"));
            let attrs = if r.kind == UtteranceKind::Narration {
                last_narration = r.text.clone();
                InstructionAttributes::neutral()
            } else {
                decompose(&last_narration, persona, lexicon)?
            };
            let text = hash_tokenize(&r.text, text_len, cfg);
            let carry = idx > 0
                && utterances[idx - 1]
                    .text
                    .iter()
                    .any(|t| t.0 == cfg.laugh_marker);
            let speech = oracle_speech_tokens(&text, persona.speaker_id, &attrs, carry, cfg);
            let embedding = oracle_speaker_embedding(persona.speaker_id, next_id, jitter, cfg);
            utterances.push(Utterance {
                id: next_id,
                chapter_id: chapter_id as u64,
                index_in_chapter: idx as u32,
                kind: r.kind,
                speaker_id: persona.speaker_id,
                text,
                attributes: attrs,
                speech,
                embedding,
            });
            next_id += 1;
        }
        chapters.push(Chapter {
            id: chapter_id as u64,
            utterances,
        });
    }
    let corpus = Corpus {
        meta: cfg.clone(),
        personas: roster,
        chapters,
    };
    let violations = crate::corpus::validate_corpus(&corpus);
    if let Some(v) = violations.first() {
        return Err(Error::validation(v.to_string()));
    }
    Ok((corpus, warnings))
}

/// Generates a small deterministic multi-chapter novel whose cast and
/// emotional cues stay inside the trained world: useful as pipeline
/// input and for partition-property tests.
pub fn mini_novel(seed: u64, n_chapters: usize, sentences_per_chapter: usize) -> String {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cast = ["Tom", "Mary", "Ann"];
    let nouns = ["river", "lantern", "door", "garden", "letter", "storm"];
    let verbs = ["opened", "watched", "crossed", "remembered", "followed"];
    let lines = [
        "You came back",
        "The road is long",
        "I never doubted it",
        "Stay close to me",
        "That light again",
        "We leave at dawn",
    ];
    let cues = ["said", "said angrily", "whispered sadly", "shouted", "said happily"];
    let mut out = String::new();
    for ch in 1..=n_chapters {
        out.push_str(&format!("Chapter {ch}\n"));
        for _ in 0..sentences_per_chapter {
            if rng.gen::<f64>() < 0.45 {
                let who = cast[rng.gen_range(0..cast.len())];
                let cue = cues[rng.gen_range(0..cues.len())];
                let line = lines[rng.gen_range(0..lines.len())];
                out.push_str(&format!("{who} {cue}, \"{line}.\" "));
            } else if rng.gen::<f64>() < 0.2 {
                let who = cast[rng.gen_range(0..cast.len())];
                out.push_str(&format!("{who} laughed at the {}. ", nouns[rng.gen_range(0..nouns.len())]));
            } else {
                out.push_str(&format!(
                    "The {} {} the {}. ",
                    nouns[rng.gen_range(0..nouns.len())],
                    verbs[rng.gen_range(0..verbs.len())],
                    nouns[rng.gen_range(0..nouns.len())]
                ));
            }
        }
        out.push('\n');
    }
    out
}
