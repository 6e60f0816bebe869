//! Flat conditional token sequences.
//!
//! A full training sequence is laid out as
//!
//! ```text
//! [speaker][ctx?] S [inst?] W... T U... E
//! ```
//!
//! where the speaker embedding occupies a non-token prefix slot, the
//! optional context block is `preS {pre} preE poS {post} poE`, and the
//! optional instruction block is `EM {payload} /EM`. All ids live in a
//! single flat space: nine reserved special ids, a control range at
//! offset 16, the text range after it and the speech range last. When a
//! conditioning block is unused it is omitted entirely (markers
//! included); passing empty context/payload explicitly still emits the
//! marker skeleton, which is the ablation variant.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SpeakerEmbedding, SpeechToken, TextToken};
use crate::error::{Error, Result};

pub const ID_S: u32 = 0;
pub const ID_T: u32 = 1;
pub const ID_E: u32 = 2;
pub const ID_PRE_S: u32 = 3;
pub const ID_PRE_E: u32 = 4;
pub const ID_PO_S: u32 = 5;
pub const ID_PO_E: u32 = 6;
pub const ID_EM: u32 = 7;
pub const ID_EM_END: u32 = 8;

/// Size of the reserved control-token range.
pub const CONTROL_SIZE: u32 = 16;
pub const CONTROL_OFFSET: u32 = 16;

/// Mapping between domain tokens and the flat id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIdMap {
    pub t_text: u32,
    pub v_speech: u32,
}

/// Classification of a flat id (or, in a built sequence, the block a
/// position belongs to: context text is distinguished from target text
/// by position, not by range).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Special,
    ContextText,
    Control,
    Text,
    Speech,
}

impl TokenIdMap {
    pub fn new(t_text: u32, v_speech: u32) -> Self {
        TokenIdMap { t_text, v_speech }
    }

    pub fn control_offset(&self) -> u32 {
        CONTROL_OFFSET
    }

    pub fn text_offset(&self) -> u32 {
        CONTROL_OFFSET + CONTROL_SIZE
    }

    pub fn speech_offset(&self) -> u32 {
        self.text_offset() + self.t_text
    }

    pub fn vocab_size(&self) -> u32 {
        self.speech_offset() + self.v_speech
    }

    pub fn text_id(&self, t: TextToken) -> u32 {
        debug_assert!(t.0 < self.t_text);
        self.text_offset() + t.0
    }

    pub fn speech_id(&self, s: SpeechToken) -> u32 {
        debug_assert!(s.0 < self.v_speech);
        self.speech_offset() + s.0
    }

    pub fn control_id(&self, local: u32) -> u32 {
        debug_assert!(local < CONTROL_SIZE);
        CONTROL_OFFSET + local
    }

    pub fn is_control(&self, id: u32) -> bool {
        (CONTROL_OFFSET..self.text_offset()).contains(&id)
    }

    pub fn is_text(&self, id: u32) -> bool {
        (self.text_offset()..self.speech_offset()).contains(&id)
    }

    pub fn is_speech(&self, id: u32) -> bool {
        (self.speech_offset()..self.vocab_size()).contains(&id)
    }

    pub fn as_text(&self, id: u32) -> Option<TextToken> {
        self.is_text(id).then(|| TextToken(id - self.text_offset()))
    }

    pub fn as_speech(&self, id: u32) -> Option<SpeechToken> {
        self.is_speech(id).then(|| SpeechToken(id - self.speech_offset()))
    }

    pub fn as_control_local(&self, id: u32) -> Option<u32> {
        self.is_control(id).then(|| id - CONTROL_OFFSET)
    }

    /// Range classification of a raw id; every valid id falls into
    /// exactly one class.
    pub fn classify(&self, id: u32) -> Option<Role> {
        if id <= ID_EM_END {
            Some(Role::Special)
        } else if self.is_control(id) {
            Some(Role::Control)
        } else if self.is_text(id) {
            Some(Role::Text)
        } else if self.is_speech(id) {
            Some(Role::Speech)
        } else {
            None
        }
    }
}

/// Half-open span of positions within a sequence.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceBlocks {
    pub context: Option<Span>,
    pub instruction: Option<Span>,
    pub text: Span,
    pub speech: Span,
}

/// A built conditional sequence: speaker prefix slot plus aligned id
/// and role lists with block boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub speaker: SpeakerEmbedding,
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
    pub blocks: SequenceBlocks,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True at positions that are prediction targets: speech tokens and
    /// the terminal E that follows speech.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                self.roles[i] == Role::Speech
                    || (id == ID_E && i > 0 && self.roles[i - 1] == Role::Speech)
            })
            .collect()
    }

    /// Whether the sequence is a generation prefix (ends at the
    /// text/speech switch, with no speech tokens yet).
    pub fn ends_at_switch(&self) -> bool {
        self.ids.last() == Some(&ID_T)
    }
}

/// Builds the context block: `preS {pre} preE poS {post} poE`. Empty
/// contexts still emit all four markers.
pub fn build_context_block(
    pre_texts: &[Vec<TextToken>],
    post_texts: &[Vec<TextToken>],
    map: &TokenIdMap,
) -> Vec<u32> {
    let mut out = vec![ID_PRE_S];
    for sent in pre_texts {
        out.extend(sent.iter().map(|&t| map.text_id(t)));
    }
    out.push(ID_PRE_E);
    out.push(ID_PO_S);
    for sent in post_texts {
        out.extend(sent.iter().map(|&t| map.text_id(t)));
    }
    out.push(ID_PO_E);
    out
}

/// Builds the instruction block: `EM {payload} /EM`. Payload ids must
/// already be in the control range.
pub fn build_instruction_block(payload: &[u32], map: &TokenIdMap) -> Result<Vec<u32>> {
    for &id in payload {
        if !map.is_control(id) {
            return Err(Error::validation(format!(
                "instruction payload id {id} outside the control range"
            )));
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 2);
    out.push(ID_EM);
    out.extend_from_slice(payload);
    out.push(ID_EM_END);
    Ok(out)
}

/// Context input for sequence construction: token lists of the
/// neighboring sentences, nearest first on the pre side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextTexts {
    pub pre: Vec<Vec<TextToken>>,
    pub post: Vec<Vec<TextToken>>,
}

fn assemble(
    speaker: SpeakerEmbedding,
    context: Option<&ContextTexts>,
    payload: Option<&[u32]>,
    text: &[TextToken],
    speech: Option<&[SpeechToken]>,
    map: &TokenIdMap,
) -> Result<TokenSequence> {
    if text.is_empty() {
        return Err(Error::validation("sequence needs at least one text token"));
    }
    let mut ids = Vec::new();
    let mut roles = Vec::new();

    let ctx_span = context.map(|ctx| {
        let start = ids.len();
        let block = build_context_block(&ctx.pre, &ctx.post, map);
        for &id in &block {
            roles.push(if id <= ID_EM_END {
                Role::Special
            } else {
                Role::ContextText
            });
        }
        ids.extend(block);
        (start, ids.len())
    });

    ids.push(ID_S);
    roles.push(Role::Special);

    let inst_span = match payload {
        Some(p) => {
            let start = ids.len();
            let block = build_instruction_block(p, map)?;
            for &id in &block {
                roles.push(if id <= ID_EM_END {
                    Role::Special
                } else {
                    Role::Control
                });
            }
            ids.extend(block);
            Some((start, ids.len()))
        }
        None => None,
    };

    let text_start = ids.len();
    for &t in text {
        if t.0 >= map.t_text {
            return Err(Error::validation(format!(
                "text token {} outside [0, {})",
                t.0, map.t_text
            )));
        }
        ids.push(map.text_id(t));
        roles.push(Role::Text);
    }
    let text_span = (text_start, ids.len());

    ids.push(ID_T);
    roles.push(Role::Special);

    let speech_start = ids.len();
    if let Some(sp) = speech {
        for &s in sp {
            if s.0 >= map.v_speech {
                return Err(Error::validation(format!(
                    "speech token {} outside [0, {})",
                    s.0, map.v_speech
                )));
            }
            ids.push(map.speech_id(s));
            roles.push(Role::Speech);
        }
        ids.push(ID_E);
        roles.push(Role::Special);
    }
    let speech_span = (speech_start, speech_start + speech.map_or(0, |s| s.len()));

    Ok(TokenSequence {
        speaker,
        ids,
        roles,
        blocks: SequenceBlocks {
            context: ctx_span,
            instruction: inst_span,
            text: text_span,
            speech: speech_span,
        },
    })
}

/// Builds a full teacher-forcing sequence. `context`/`payload` absent
/// means the corresponding block is omitted entirely. The speaker slot
/// carries the prompt utterance's embedding under decoupled training,
/// or the target's own otherwise; that choice is the caller's.
pub fn build_training_sequence(
    speaker: SpeakerEmbedding,
    context: Option<&ContextTexts>,
    payload: Option<&[u32]>,
    text: &[TextToken],
    speech: &[SpeechToken],
    map: &TokenIdMap,
) -> Result<TokenSequence> {
    assemble(speaker, context, payload, text, Some(speech), map)
}

/// The four inference configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Plain,
    Ctx,
    Inst,
    CtxInst,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 4] = [
        InferenceMode::Plain,
        InferenceMode::Ctx,
        InferenceMode::Inst,
        InferenceMode::CtxInst,
    ];

    pub fn uses_context(self) -> bool {
        matches!(self, InferenceMode::Ctx | InferenceMode::CtxInst)
    }

    pub fn uses_instruction(self) -> bool {
        matches!(self, InferenceMode::Inst | InferenceMode::CtxInst)
    }

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Plain => "plain",
            InferenceMode::Ctx => "ctx",
            InferenceMode::Inst => "inst",
            InferenceMode::CtxInst => "ctx_inst",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(InferenceMode::Plain),
            "ctx" => Ok(InferenceMode::Ctx),
            "inst" => Ok(InferenceMode::Inst),
            "ctx_inst" | "ctx&inst" => Ok(InferenceMode::CtxInst),
            other => Err(Error::Usage(format!("unknown inference mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Builds the generation prefix for a mode: identical to the training
/// sequence truncated right after the text/speech switch.
pub fn build_inference_prefix(
    mode: InferenceMode,
    speaker: SpeakerEmbedding,
    context: Option<&ContextTexts>,
    payload: Option<&[u32]>,
    text: &[TextToken],
    map: &TokenIdMap,
) -> Result<TokenSequence> {
    let ctx = if mode.uses_context() {
        Some(context.ok_or_else(|| {
            Error::validation(format!("mode {mode} requires a context window"))
        })?)
    } else {
        None
    };
    let inst = if mode.uses_instruction() {
        Some(payload.ok_or_else(|| {
            Error::validation(format!("mode {mode} requires instruction attributes"))
        })?)
    } else {
        None
    };
    assemble(speaker, ctx, inst, text, None, map)
}

/// Block decomposition recovered by [`parse_sequence`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSequence {
    pub context_pre: Vec<TextToken>,
    pub context_post: Vec<TextToken>,
    pub has_context: bool,
    pub payload: Option<Vec<u32>>,
    pub text: Vec<TextToken>,
    pub speech: Vec<SpeechToken>,
    /// Whether the sequence carries the terminal E marker.
    pub terminated: bool,
}

fn parse_err(i: usize, msg: &str) -> Error {
    Error::validation(format!("malformed sequence at index {i}: {msg}"))
}

/// Recovers the block structure of a flat id list, or reports the first
/// malformed position. Inverse of the builders on valid input.
pub fn parse_sequence(ids: &[u32], map: &TokenIdMap) -> Result<ParsedSequence> {
    if ids.is_empty() {
        return Err(parse_err(0, "empty sequence"));
    }
    let mut i = 0;
    let mut out = ParsedSequence {
        context_pre: Vec::new(),
        context_post: Vec::new(),
        has_context: false,
        payload: None,
        text: Vec::new(),
        speech: Vec::new(),
        terminated: false,
    };

    if ids[i] == ID_PRE_S {
        out.has_context = true;
        i += 1;
        while i < ids.len() && ids[i] != ID_PRE_E {
            match map.as_text(ids[i]) {
                Some(t) => out.context_pre.push(t),
                None => return Err(parse_err(i, "expected text token or preE")),
            }
            i += 1;
        }
        if i >= ids.len() {
            return Err(parse_err(i, "unterminated pre-context"));
        }
        i += 1;
        if i >= ids.len() || ids[i] != ID_PO_S {
            return Err(parse_err(i, "expected poS after preE"));
        }
        i += 1;
        while i < ids.len() && ids[i] != ID_PO_E {
            match map.as_text(ids[i]) {
                Some(t) => out.context_post.push(t),
                None => return Err(parse_err(i, "expected text token or poE")),
            }
            i += 1;
        }
        if i >= ids.len() {
            return Err(parse_err(i, "unterminated post-context"));
        }
        i += 1;
    }

    if i >= ids.len() || ids[i] != ID_S {
        return Err(parse_err(i, "expected S"));
    }
    i += 1;

    if i < ids.len() && ids[i] == ID_EM {
        i += 1;
        let mut payload = Vec::new();
        while i < ids.len() && ids[i] != ID_EM_END {
            match map.as_control_local(ids[i]) {
                Some(local) => payload.push(CONTROL_OFFSET + local),
                None => return Err(parse_err(i, "expected control token or /EM")),
            }
            i += 1;
        }
        if i >= ids.len() {
            return Err(parse_err(i, "unterminated instruction block"));
        }
        i += 1;
        out.payload = Some(payload);
    }

    while i < ids.len() && ids[i] != ID_T {
        match map.as_text(ids[i]) {
            Some(t) => out.text.push(t),
            None => return Err(parse_err(i, "expected text token or T")),
        }
        i += 1;
    }
    if out.text.is_empty() {
        return Err(parse_err(i, "empty text block"));
    }
    if i >= ids.len() {
        return Err(parse_err(i, "missing T switch"));
    }
    i += 1;

    while i < ids.len() && ids[i] != ID_E {
        match map.as_speech(ids[i]) {
            Some(s) => out.speech.push(s),
            None => return Err(parse_err(i, "expected speech token or E")),
        }
        i += 1;
    }
    if i < ids.len() {
        out.terminated = true;
        i += 1;
    }
    if i != ids.len() {
        return Err(parse_err(i, "trailing tokens after E"));
    }
    Ok(out)
}

/// One line of a dataset file consumed by the model trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub speaker: Vec<f64>,
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
    pub mask: Vec<bool>,
}

impl DatasetRecord {
    pub fn from_sequence(seq: &TokenSequence) -> Self {
        DatasetRecord {
            speaker: seq.speaker.values.clone(),
            ids: seq.ids.clone(),
            roles: seq.roles.clone(),
            mask: seq.loss_mask(),
        }
    }
}

pub fn save_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::runtime(format!("serialize dataset record: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn map() -> TokenIdMap {
        TokenIdMap::new(32, 64)
    }

    fn emb() -> SpeakerEmbedding {
        SpeakerEmbedding {
            values: vec![1.0, 0.0],
            speaker_hint: Some(0),
        }
    }

    #[test]
    fn empty_context_block_is_marker_skeleton() {
        assert_eq!(build_context_block(&[], &[], &map()), vec![3, 4, 5, 6]);
    }

    #[test]
    fn context_block_with_neighbors() {
        let m = map();
        let pre = vec![vec![TextToken(5)]];
        let post = vec![vec![TextToken(9)]];
        assert_eq!(
            build_context_block(&pre, &post, &m),
            vec![3, m.text_id(TextToken(5)), 4, 5, m.text_id(TextToken(9)), 6]
        );
    }

    #[test]
    fn context_block_orders_two_pre_sentences() {
        let m = map();
        let pre = vec![vec![TextToken(1)], vec![TextToken(2)]];
        let block = build_context_block(&pre, &[], &m);
        assert_eq!(
            block,
            vec![3, m.text_id(TextToken(1)), m.text_id(TextToken(2)), 4, 5, 6]
        );
    }

    #[test]
    fn instruction_block_boundaries() {
        let m = map();
        assert_eq!(build_instruction_block(&[], &m).unwrap(), vec![7, 8]);
        let payload = [m.control_id(0), m.control_id(7), m.control_id(8), m.control_id(10)];
        assert_eq!(build_instruction_block(&payload, &m).unwrap().len(), 6);
        // text-range id in payload is rejected
        assert!(build_instruction_block(&[m.text_id(TextToken(0))], &m).is_err());
    }

    #[test]
    fn minimal_training_sequence_layout() {
        let m = map();
        let seq = build_training_sequence(
            emb(),
            None,
            None,
            &[TextToken(1), TextToken(2)],
            &[SpeechToken(8), SpeechToken(11)],
            &m,
        )
        .unwrap();
        assert_eq!(
            seq.ids,
            vec![
                ID_S,
                m.text_id(TextToken(1)),
                m.text_id(TextToken(2)),
                ID_T,
                m.speech_id(SpeechToken(8)),
                m.speech_id(SpeechToken(11)),
                ID_E
            ]
        );
        assert_eq!(
            seq.loss_mask(),
            vec![false, false, false, false, true, true, true]
        );
    }

    #[test]
    fn empty_context_skeleton_precedes_s() {
        let ctx = ContextTexts::default();
        let seq = build_training_sequence(
            emb(),
            Some(&ctx),
            None,
            &[TextToken(0)],
            &[SpeechToken(0)],
            &map(),
        )
        .unwrap();
        assert_eq!(&seq.ids[..5], &[3, 4, 5, 6, ID_S]);
        assert_eq!(seq.blocks.context, Some((0, 4)));
    }

    #[test]
    fn omitting_blocks_keeps_other_ids_stable() {
        let m = map();
        let text = [TextToken(3), TextToken(4)];
        let speech = [SpeechToken(1), SpeechToken(2)];
        let ctx = ContextTexts {
            pre: vec![vec![TextToken(7)]],
            post: vec![],
        };
        let payload = [m.control_id(1), m.control_id(7)];
        let with_all =
            build_training_sequence(emb(), Some(&ctx), Some(&payload), &text, &speech, &m).unwrap();
        let plain = build_training_sequence(emb(), None, None, &text, &speech, &m).unwrap();
        let (ts, te) = with_all.blocks.text;
        let (ps, pe) = plain.blocks.text;
        assert_eq!(&with_all.ids[ts..te], &plain.ids[ps..pe]);
        let (ss, se) = with_all.blocks.speech;
        let (qs, qe) = plain.blocks.speech;
        assert_eq!(&with_all.ids[ss..se], &plain.ids[qs..qe]);
    }

    #[test]
    fn prefix_modes() {
        let m = map();
        let text = [TextToken(1)];
        let plain =
            build_inference_prefix(InferenceMode::Plain, emb(), None, None, &text, &m).unwrap();
        assert_eq!(plain.ids, vec![ID_S, m.text_id(TextToken(1)), ID_T]);
        assert!(plain.ends_at_switch());

        let ctx = ContextTexts {
            pre: vec![vec![TextToken(2)]],
            post: vec![vec![TextToken(3)]],
        };
        let payload = [m.control_id(0), m.control_id(7), m.control_id(9), m.control_id(13)];
        let full = build_inference_prefix(
            InferenceMode::CtxInst,
            emb(),
            Some(&ctx),
            Some(&payload),
            &text,
            &m,
        )
        .unwrap();
        assert!(full.ends_at_switch());
        assert!(full.blocks.context.is_some());
        assert!(full.blocks.instruction.is_some());
        assert_eq!(full.ids[0], ID_PRE_S);

        // inst mode without attrs is an error
        assert!(
            build_inference_prefix(InferenceMode::Inst, emb(), None, None, &text, &m).is_err()
        );
    }

    fn random_sequence(rng: &mut ChaCha20Rng, m: &TokenIdMap) -> TokenSequence {
        let text: Vec<TextToken> =
            (0..rng.gen_range(1..8)).map(|_| TextToken(rng.gen_range(0..m.t_text))).collect();
        let speech: Vec<SpeechToken> =
            (0..rng.gen_range(0..8)).map(|_| SpeechToken(rng.gen_range(0..m.v_speech))).collect();
        let ctx = if rng.gen() {
            Some(ContextTexts {
                pre: (0..rng.gen_range(0..3))
                    .map(|_| {
                        (0..rng.gen_range(1..5))
                            .map(|_| TextToken(rng.gen_range(0..m.t_text)))
                            .collect()
                    })
                    .collect(),
                post: (0..rng.gen_range(0..3))
                    .map(|_| {
                        (0..rng.gen_range(1..5))
                            .map(|_| TextToken(rng.gen_range(0..m.t_text)))
                            .collect()
                    })
                    .collect(),
            })
        } else {
            None
        };
        let payload: Option<Vec<u32>> = if rng.gen() {
            Some((0..rng.gen_range(0..6)).map(|_| m.control_id(rng.gen_range(0..CONTROL_SIZE))).collect())
        } else {
            None
        };
        build_training_sequence(
            emb(),
            ctx.as_ref(),
            payload.as_deref(),
            &text,
            &speech,
            m,
        )
        .unwrap()
    }

    #[test]
    fn parse_build_roundtrip_randomized() {
        let m = map();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let seq = random_sequence(&mut rng, &m);
            let parsed = parse_sequence(&seq.ids, &m).unwrap();
            assert!(parsed.terminated);
            let (ts, te) = seq.blocks.text;
            let text: Vec<TextToken> =
                seq.ids[ts..te].iter().map(|&i| m.as_text(i).unwrap()).collect();
            assert_eq!(parsed.text, text);
            let (ss, se) = seq.blocks.speech;
            let speech: Vec<SpeechToken> =
                seq.ids[ss..se].iter().map(|&i| m.as_speech(i).unwrap()).collect();
            assert_eq!(parsed.speech, speech);
            assert_eq!(parsed.has_context, seq.blocks.context.is_some());
            assert_eq!(parsed.payload.is_some(), seq.blocks.instruction.is_some());
            // range discipline: roles match range classes except context text
            for (i, &id) in seq.ids.iter().enumerate() {
                let expect = match seq.roles[i] {
                    Role::ContextText => Role::Text,
                    r => r,
                };
                assert_eq!(m.classify(id).unwrap(), expect);
            }
        }
    }

    #[test]
    fn parse_rejects_malformed() {
        let m = map();
        assert!(parse_sequence(&[], &m).is_err());
        // E before T
        let bad = [ID_S, m.text_id(TextToken(0)), ID_E];
        let err = parse_sequence(&bad, &m).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
        // marker out of order
        assert!(parse_sequence(&[ID_PRE_S, ID_PO_S], &m).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let m = map();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let records: Vec<DatasetRecord> = (0..20)
            .map(|_| DatasetRecord::from_sequence(&random_sequence(&mut rng, &m)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.jsonl");
        save_dataset(&records, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), records);
    }
}
