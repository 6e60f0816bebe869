//! Style-instruction compilation.
//!
//! Free-text instructions ("shouting angrily") are decomposed, under a
//! keyword lexicon conditioned on the speaker's persona, into the
//! discrete attribute tuple, and rendered as the control-token payload
//! of the instruction block. The lexicon is deliberately rule-based and
//! pluggable; an external analyzer can produce the same
//! [`InstructionAttributes`] and feed the rest of the pipeline.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::{
    EmotionLabel, EmotionWeight, InstructionAttributes, Intensity, Persona, PersonaTrait, Speed,
    Volume,
};
use crate::error::{Error, Result};
use crate::sequence::TokenIdMap;

/// Weight buckets used by the token encoding of mixed emotions.
pub const WEIGHT_BUCKETS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// A single attribute assignment produced by a lexicon rule. Persona
/// modifiers are restricted to the delivery fields (everything except
/// the emotion label).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttrPatch {
    Emotion(EmotionLabel),
    Intensity(Intensity),
    Volume(Volume),
    Speed(Speed),
}

/// Keyword and persona-trait rule tables.
#[derive(Debug, Clone)]
pub struct InstructionLexicon {
    /// Applied in definition order over the set of keywords present.
    pub keywords: Vec<(String, Vec<AttrPatch>)>,
    /// Applied after keywords, in definition order, for each trait the
    /// persona has. May not touch the emotion label.
    pub modifiers: Vec<(PersonaTrait, Vec<AttrPatch>)>,
}

impl Default for InstructionLexicon {
    fn default() -> Self {
        use AttrPatch::*;
        let kw = |w: &str, p: Vec<AttrPatch>| (w.to_string(), p);
        InstructionLexicon {
            keywords: vec![
                kw("angry", vec![Emotion(EmotionLabel::Angry)]),
                kw("angrily", vec![Emotion(EmotionLabel::Angry)]),
                kw("furious", vec![Emotion(EmotionLabel::Angry), Intensity(self::Intensity::High)]),
                kw("happy", vec![Emotion(EmotionLabel::Happy)]),
                kw("happily", vec![Emotion(EmotionLabel::Happy)]),
                kw("laughing", vec![Emotion(EmotionLabel::Happy)]),
                kw("laughed", vec![Emotion(EmotionLabel::Happy)]),
                kw("sad", vec![Emotion(EmotionLabel::Sad)]),
                kw("sadly", vec![Emotion(EmotionLabel::Sad)]),
                kw("crying", vec![Emotion(EmotionLabel::Sad), Volume(self::Volume::Low)]),
                kw(
                    "shouting",
                    vec![
                        Volume(self::Volume::High),
                        Speed(self::Speed::Fast),
                        Intensity(self::Intensity::High),
                    ],
                ),
                kw(
                    "shouted",
                    vec![
                        Volume(self::Volume::High),
                        Speed(self::Speed::Fast),
                        Intensity(self::Intensity::High),
                    ],
                ),
                kw("whisper", vec![Volume(self::Volume::Low)]),
                kw("whispering", vec![Volume(self::Volume::Low)]),
                kw("whispered", vec![Volume(self::Volume::Low)]),
                kw("softly", vec![Volume(self::Volume::Low)]),
                kw("loudly", vec![Volume(self::Volume::High)]),
                kw("very", vec![Intensity(self::Intensity::High)]),
                kw("calmly", vec![Intensity(self::Intensity::Low)]),
                kw("quickly", vec![Speed(self::Speed::Fast)]),
                kw("slowly", vec![Speed(self::Speed::Slow)]),
            ],
            modifiers: vec![
                (
                    PersonaTrait::Ill,
                    vec![Volume(self::Volume::Low), Speed(self::Speed::Slow)],
                ),
                (
                    PersonaTrait::Elderly,
                    vec![Volume(self::Volume::Low), Speed(self::Speed::Slow)],
                ),
                (PersonaTrait::Child, vec![Speed(self::Speed::Fast)]),
            ],
        }
    }
}

impl InstructionLexicon {
    pub fn validate(&self) -> Result<()> {
        for (kw, patches) in &self.keywords {
            if patches.is_empty() {
                return Err(Error::config(format!("keyword '{kw}' maps to nothing")));
            }
        }
        for (t, patches) in &self.modifiers {
            if patches.iter().any(|p| matches!(p, AttrPatch::Emotion(_))) {
                return Err(Error::config(format!(
                    "persona modifier for trait '{}' may not set the emotion label",
                    t.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Parses a line-delimited lexicon file. Keyword lines look like
    /// `shouting -> volume:high, speed:fast`; modifier lines use a
    /// `trait:` prefix, e.g. `trait:ill -> volume:low, speed:slow`.
    /// Blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lex = InstructionLexicon {
            keywords: Vec::new(),
            modifiers: Vec::new(),
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, rhs) = line
                .split_once("->")
                .ok_or_else(|| Error::parse(path, lineno, "missing '->'"))?;
            let patches: Vec<AttrPatch> = rhs
                .split(',')
                .map(|p| parse_patch(p.trim()).map_err(|e| Error::parse(path, lineno, e)))
                .collect::<Result<_>>()?;
            let lhs = lhs.trim();
            if let Some(trait_name) = lhs.strip_prefix("trait:") {
                lex.modifiers
                    .push((PersonaTrait::from(trait_name.to_string()), patches));
            } else {
                lex.keywords.push((lhs.to_string(), patches));
            }
        }
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let fmt = |patches: &[AttrPatch]| {
            patches
                .iter()
                .map(patch_str)
                .collect::<Vec<_>>()
                .join(", ")
        };
        for (kw, patches) in &self.keywords {
            writeln!(w, "{kw} -> {}", fmt(patches)).map_err(|e| Error::io(path, e))?;
        }
        for (t, patches) in &self.modifiers {
            writeln!(w, "trait:{} -> {}", t.as_str(), fmt(patches))
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn parse_patch(s: &str) -> std::result::Result<AttrPatch, String> {
    let (field, value) = s
        .split_once(':')
        .ok_or_else(|| format!("bad patch '{s}', expected field:value"))?;
    match (field.trim(), value.trim()) {
        ("emotion", "neutral") => Ok(AttrPatch::Emotion(EmotionLabel::Neutral)),
        ("emotion", "angry") => Ok(AttrPatch::Emotion(EmotionLabel::Angry)),
        ("emotion", "happy") => Ok(AttrPatch::Emotion(EmotionLabel::Happy)),
        ("emotion", "sad") => Ok(AttrPatch::Emotion(EmotionLabel::Sad)),
        ("intensity", "low") => Ok(AttrPatch::Intensity(Intensity::Low)),
        ("intensity", "high") => Ok(AttrPatch::Intensity(Intensity::High)),
        ("volume", "low") => Ok(AttrPatch::Volume(Volume::Low)),
        ("volume", "medium") => Ok(AttrPatch::Volume(Volume::Medium)),
        ("volume", "high") => Ok(AttrPatch::Volume(Volume::High)),
        ("speed", "slow") => Ok(AttrPatch::Speed(Speed::Slow)),
        ("speed", "medium") => Ok(AttrPatch::Speed(Speed::Medium)),
        ("speed", "fast") => Ok(AttrPatch::Speed(Speed::Fast)),
        _ => Err(format!("unknown patch '{s}'")),
    }
}

fn patch_str(p: &AttrPatch) -> String {
    match p {
        AttrPatch::Emotion(e) => format!("emotion:{e}"),
        AttrPatch::Intensity(i) => format!("intensity:{i}"),
        AttrPatch::Volume(Volume::Low) => "volume:low".into(),
        AttrPatch::Volume(Volume::Medium) => "volume:medium".into(),
        AttrPatch::Volume(Volume::High) => "volume:high".into(),
        AttrPatch::Speed(Speed::Slow) => "speed:slow".into(),
        AttrPatch::Speed(Speed::Medium) => "speed:medium".into(),
        AttrPatch::Speed(Speed::Fast) => "speed:fast".into(),
    }
}

/// Decomposes a free-text instruction into discrete attributes:
/// keyword rules first (in lexicon order, so word order in the
/// instruction is irrelevant), then persona modifiers, then defaults
/// for anything still unset. Unknown words are ignored; an empty
/// instruction yields all defaults.
pub fn decompose(
    instruction: &str,
    persona: &Persona,
    lexicon: &InstructionLexicon,
) -> Result<InstructionAttributes> {
    lexicon.validate()?;
    let words: Vec<String> = instruction
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();

    let mut emotions: Vec<EmotionLabel> = Vec::new();
    let mut intensity: Option<Intensity> = None;
    let mut volume: Option<Volume> = None;
    let mut speed: Option<Speed> = None;

    let mut apply = |patches: &[AttrPatch],
                     emotions: &mut Vec<EmotionLabel>,
                     allow_emotion: bool| {
        for p in patches {
            match *p {
                AttrPatch::Emotion(e) => {
                    if allow_emotion && !emotions.contains(&e) && emotions.len() < 2 {
                        emotions.push(e);
                    }
                }
                AttrPatch::Intensity(i) => intensity = Some(i),
                AttrPatch::Volume(v) => volume = Some(v),
                AttrPatch::Speed(s) => speed = Some(s),
            }
        }
    };

    for (kw, patches) in &lexicon.keywords {
        if words.iter().any(|w| w == kw) {
            apply(patches, &mut emotions, true);
        }
    }
    for (t, patches) in &lexicon.modifiers {
        if persona.has_trait(t) {
            apply(patches, &mut emotions, false);
        }
    }

    let emotions = match emotions.len() {
        0 => vec![EmotionWeight {
            label: EmotionLabel::Neutral,
            weight: 1.0,
        }],
        1 => vec![EmotionWeight {
            label: emotions[0],
            weight: 1.0,
        }],
        _ => vec![
            EmotionWeight {
                label: emotions[0],
                weight: 0.5,
            },
            EmotionWeight {
                label: emotions[1],
                weight: 0.5,
            },
        ],
    };

    Ok(InstructionAttributes {
        emotions,
        intensity: intensity.unwrap_or(Intensity::Low),
        volume: volume.unwrap_or(Volume::Medium),
        speed: speed.unwrap_or(Speed::Medium),
    })
}

// local control ids within the reserved range
const EMOTION_BASE: u32 = 0; // 0..4
const WEIGHT_BASE: u32 = 4; // 4..8
const INTENSITY_BASE: u32 = 8; // 8..10
const VOLUME_BASE: u32 = 10; // 10..13
const SPEED_BASE: u32 = 13; // 13..16

fn weight_bucket(w: f64) -> u32 {
    let mut best = 0;
    let mut err = f64::INFINITY;
    for (i, b) in WEIGHT_BUCKETS.iter().enumerate() {
        if (w - b).abs() < err {
            err = (w - b).abs();
            best = i;
        }
    }
    best as u32
}

/// Fixed-order token encoding of an attribute tuple:
/// `[emotion1, (weight1, emotion2)?, intensity, volume, speed]`, all
/// mapped into the control range. A single emotion always has weight 1
/// and a mixed pair's second weight is the complement of the first, so
/// neither is encoded: singles take 4 tokens, mixed pairs 6. Injective
/// over the valid attribute space (weights bucketed to quarters).
pub fn render_attribute_tokens(attrs: &InstructionAttributes, map: &TokenIdMap) -> Vec<u32> {
    let mut out = Vec::with_capacity(2 * attrs.emotions.len() + 3);
    out.push(map.control_id(EMOTION_BASE + attrs.primary_label().index() as u32));
    if attrs.emotions.len() == 2 {
        out.push(map.control_id(WEIGHT_BASE + weight_bucket(attrs.emotions[0].weight)));
        out.push(map.control_id(EMOTION_BASE + attrs.emotions[1].label.index() as u32));
    }
    out.push(map.control_id(
        INTENSITY_BASE
            + match attrs.intensity {
                Intensity::Low => 0,
                Intensity::High => 1,
            },
    ));
    out.push(map.control_id(
        VOLUME_BASE
            + match attrs.volume {
                Volume::Low => 0,
                Volume::Medium => 1,
                Volume::High => 2,
            },
    ));
    out.push(map.control_id(
        SPEED_BASE
            + match attrs.speed {
                Speed::Slow => 0,
                Speed::Medium => 1,
                Speed::Fast => 2,
            },
    ));
    out
}

/// Left inverse of [`render_attribute_tokens`].
pub fn parse_attribute_tokens(tokens: &[u32], map: &TokenIdMap) -> Result<InstructionAttributes> {
    let local: Vec<u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            map.as_control_local(id).ok_or_else(|| {
                Error::validation(format!(
                    "payload position {i}: id {id} outside the control range"
                ))
            })
        })
        .collect::<Result<_>>()?;
    if local.len() != 4 && local.len() != 6 {
        return Err(Error::validation(format!(
            "payload length {} (expected 4 or 6 control tokens)",
            local.len()
        )));
    }
    let take_emotion = |pos: usize| -> Result<EmotionLabel> {
        let id = local[pos];
        if !(EMOTION_BASE..EMOTION_BASE + 4).contains(&id) {
            return Err(Error::validation(format!(
                "payload position {pos}: expected emotion token, got {id}"
            )));
        }
        Ok(EmotionLabel::ALL[(id - EMOTION_BASE) as usize])
    };
    let emotions = if local.len() == 4 {
        vec![EmotionWeight {
            label: take_emotion(0)?,
            weight: 1.0,
        }]
    } else {
        let weight_id = local[1];
        if !(WEIGHT_BASE..WEIGHT_BASE + 4).contains(&weight_id) {
            return Err(Error::validation(format!(
                "payload position 1: expected weight token, got {weight_id}"
            )));
        }
        let w1 = WEIGHT_BUCKETS[(weight_id - WEIGHT_BASE) as usize];
        vec![
            EmotionWeight {
                label: take_emotion(0)?,
                weight: w1,
            },
            EmotionWeight {
                label: take_emotion(2)?,
                weight: 1.0 - w1,
            },
        ]
    };
    let tail = &local[local.len() - 3..];
    let tail_pos = local.len() - 3;
    let intensity = match tail[0].checked_sub(INTENSITY_BASE) {
        Some(0) => Intensity::Low,
        Some(1) => Intensity::High,
        _ => {
            return Err(Error::validation(format!(
                "payload position {tail_pos}: expected intensity token"
            )))
        }
    };
    let volume = match tail[1].checked_sub(VOLUME_BASE) {
        Some(0) => Volume::Low,
        Some(1) => Volume::Medium,
        Some(2) => Volume::High,
        _ => {
            return Err(Error::validation(format!(
                "payload position {}: expected volume token",
                tail_pos + 1
            )))
        }
    };
    let speed = match tail[2].checked_sub(SPEED_BASE) {
        Some(0) => Speed::Slow,
        Some(1) => Speed::Medium,
        Some(2) => Speed::Fast,
        _ => {
            return Err(Error::validation(format!(
                "payload position {}: expected speed token",
                tail_pos + 2
            )))
        }
    };
    Ok(InstructionAttributes {
        emotions,
        intensity,
        volume,
        speed,
    })
}

/// Every valid attribute tuple under the bucketed-weight encoding:
/// 72 singles and 324 mixed pairs.
pub fn enumerate_valid_attrs() -> Vec<InstructionAttributes> {
    let mut out = Vec::new();
    let volumes = [Volume::Low, Volume::Medium, Volume::High];
    let speeds = [Speed::Slow, Speed::Medium, Speed::Fast];
    for &intensity in &Intensity::ALL {
        for &volume in &volumes {
            for &speed in &speeds {
                for &label in &EmotionLabel::ALL {
                    out.push(InstructionAttributes {
                        emotions: vec![EmotionWeight { label, weight: 1.0 }],
                        intensity,
                        volume,
                        speed,
                    });
                }
                for &l1 in &EmotionLabel::NON_NEUTRAL {
                    for &l2 in &EmotionLabel::NON_NEUTRAL {
                        if l1 == l2 {
                            continue;
                        }
                        for w in [0.25, 0.5, 0.75] {
                            out.push(InstructionAttributes {
                                emotions: vec![
                                    EmotionWeight {
                                        label: l1,
                                        weight: w,
                                    },
                                    EmotionWeight {
                                        label: l2,
                                        weight: 1.0 - w,
                                    },
                                ],
                                intensity,
                                volume,
                                speed,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> TokenIdMap {
        TokenIdMap::new(32, 64)
    }

    fn healthy() -> Persona {
        Persona::named(1, "Tom")
    }

    fn ill_elderly() -> Persona {
        let mut p = Persona::named(2, "Grandfather");
        p.traits = vec![PersonaTrait::Ill, PersonaTrait::Elderly];
        p
    }

    #[test]
    fn shouting_angrily_healthy() {
        let attrs = decompose("shouting angrily", &healthy(), &InstructionLexicon::default())
            .unwrap();
        assert_eq!(attrs.primary_label(), EmotionLabel::Angry);
        assert_eq!(attrs.intensity, Intensity::High);
        assert_eq!(attrs.volume, Volume::High);
        assert_eq!(attrs.speed, Speed::Fast);
    }

    #[test]
    fn shouting_angrily_ill_elderly() {
        let attrs =
            decompose("shouting angrily", &ill_elderly(), &InstructionLexicon::default())
                .unwrap();
        assert_eq!(attrs.primary_label(), EmotionLabel::Angry);
        assert_eq!(attrs.intensity, Intensity::High);
        assert_eq!(attrs.volume, Volume::Low);
        assert_eq!(attrs.speed, Speed::Slow);
    }

    #[test]
    fn empty_instruction_is_all_defaults() {
        let attrs = decompose("", &healthy(), &InstructionLexicon::default()).unwrap();
        assert_eq!(attrs, InstructionAttributes::neutral());
    }

    #[test]
    fn decompose_is_word_order_insensitive() {
        let lex = InstructionLexicon::default();
        let p = healthy();
        assert_eq!(
            decompose("shouting angrily", &p, &lex).unwrap(),
            decompose("angrily shouting", &p, &lex).unwrap()
        );
        assert_eq!(
            decompose("sadly whispering slowly", &p, &lex).unwrap(),
            decompose("slowly, whispering... sadly", &p, &lex).unwrap()
        );
    }

    #[test]
    fn modifiers_never_touch_emotion_label() {
        let lex = InstructionLexicon::default();
        let phrases = ["", "angrily", "happily shouting", "sadly whispering very"];
        for phrase in phrases {
            let base = decompose(phrase, &healthy(), &lex).unwrap();
            for t in [PersonaTrait::Ill, PersonaTrait::Elderly, PersonaTrait::Child] {
                let mut p = healthy();
                p.traits = vec![t];
                let modified = decompose(phrase, &p, &lex).unwrap();
                assert_eq!(base.emotions, modified.emotions, "phrase={phrase}");
            }
        }
        // a lexicon whose modifier sets an emotion is invalid
        let mut bad = lex.clone();
        bad.modifiers
            .push((PersonaTrait::Ill, vec![AttrPatch::Emotion(EmotionLabel::Sad)]));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn neutral_payload_has_four_attribute_tokens() {
        let m = map();
        let payload = render_attribute_tokens(&InstructionAttributes::neutral(), &m);
        assert_eq!(payload.len(), 4);
    }

    #[test]
    fn mixed_payload_roundtrip() {
        let m = map();
        let attrs = InstructionAttributes::mixed(
            (EmotionLabel::Angry, 0.5),
            (EmotionLabel::Sad, 0.5),
            Intensity::High,
        );
        let mut attrs = attrs;
        attrs.volume = Volume::High;
        attrs.speed = Speed::Fast;
        let payload = render_attribute_tokens(&attrs, &m);
        assert_eq!(payload.len(), 6);
        assert_eq!(parse_attribute_tokens(&payload, &m).unwrap(), attrs);
    }

    #[test]
    fn exhaustive_roundtrip_and_injectivity() {
        let m = map();
        let all = enumerate_valid_attrs();
        assert_eq!(all.len(), 72 + 324);
        let mut seen = std::collections::HashSet::new();
        for attrs in &all {
            let payload = render_attribute_tokens(attrs, &m);
            assert_eq!(&parse_attribute_tokens(&payload, &m).unwrap(), attrs);
            assert!(seen.insert(payload), "duplicate payload for {attrs:?}");
        }
    }

    #[test]
    fn parse_rejects_malformed_payloads() {
        let m = map();
        assert!(parse_attribute_tokens(&[], &m).is_err());
        assert!(parse_attribute_tokens(&[m.text_id(crate::corpus::TextToken(0))], &m).is_err());
        // wrong token class in the emotion slot
        let good = render_attribute_tokens(&InstructionAttributes::neutral(), &m);
        let mut bad = good.clone();
        bad[0] = m.control_id(SPEED_BASE);
        assert!(parse_attribute_tokens(&bad, &m).is_err());
    }

    #[test]
    fn lexicon_file_roundtrip() {
        let lex = InstructionLexicon::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lexicon.txt");
        lex.save(&p).unwrap();
        let loaded = InstructionLexicon::load(&p).unwrap();
        assert_eq!(lex.keywords, loaded.keywords);
        assert_eq!(lex.modifiers, loaded.modifiers);
        // decompose behaves identically through the roundtrip
        assert_eq!(
            decompose("shouting angrily", &healthy(), &lex).unwrap(),
            decompose("shouting angrily", &healthy(), &loaded).unwrap()
        );
    }
}
