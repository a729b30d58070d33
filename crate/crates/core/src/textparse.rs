//! Instruction tokenization and object/action phrase extraction.
//!
//! The tagger is lexicon driven: a word is an action if its lemma is a
//! known action verb, part of an object phrase if its lemma is a known object
//! noun, and ignored otherwise. Adjacent object lemmas merge into one
//! multi-word phrase ("trash" + "can" → "trash can").

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Annotatable object categories. Each owns one channel of the raw
/// descriptors produced by the simulator, so the order is significant.
pub const OBJECT_CATEGORIES: [&str; 12] = [
    "bed",
    "chair",
    "sofa",
    "coffee table",
    "lamp",
    "sink",
    "toilet",
    "trash can",
    "plant",
    "mirror",
    "picture",
    "towel",
];

pub const ROOM_TYPES: [&str; 8] =
    ["kitchen", "bedroom", "bathroom", "living room", "dining room", "spa room", "office", "hallway"];

const ACTION_WORDS: &[&str] = &[
    "walk", "turn", "stop", "go", "find", "enter", "exit", "head", "locate", "look", "search", "pass", "continue",
    "move", "climb", "wait", "proceed", "reach",
];

const EXTRA_OBJECT_WORDS: &[&str] = &["door", "stair", "window", "rug", "hall"];

const STOP_WORDS: &[&str] = &[
    "the", "a", "an", "to", "and", "then", "at", "in", "into", "toward", "towards", "past", "for", "of", "on", "by",
    "near", "until", "you", "your", "ahead", "forward", "left", "right", "there", "it", "with", "from", "up", "down",
    "around", "through", "when", "once",
];

const SUFFIX_RULES: &[(&str, &str)] = &[("ing", ""), ("ing", "e"), ("es", ""), ("s", ""), ("ed", ""), ("ed", "e")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    #[serde(rename = "actions")]
    pub action_words: BTreeSet<String>,
    #[serde(rename = "objects")]
    pub object_words: BTreeSet<String>,
    #[serde(rename = "stopwords")]
    pub stop_words: BTreeSet<String>,
    /// Tried in order; a rule applies only if it yields a known lemma.
    pub suffix_rules: Vec<(String, String)>,
}

impl Default for Lexicon {
    /// The navigation lexicon shared with the simulator's instruction templates.
    fn default() -> Self {
        let set = |words: &mut dyn Iterator<Item = &str>| words.map(str::to_string).collect::<BTreeSet<_>>();
        let object_words = set(&mut OBJECT_CATEGORIES
            .iter()
            .chain(ROOM_TYPES.iter())
            .flat_map(|p| p.split(' '))
            .chain(EXTRA_OBJECT_WORDS.iter().copied()));
        Self {
            action_words: set(&mut ACTION_WORDS.iter().copied()),
            object_words,
            stop_words: set(&mut STOP_WORDS.iter().copied()),
            suffix_rules: SUFFIX_RULES.iter().map(|(s, r)| (s.to_string(), r.to_string())).collect(),
        }
    }
}

impl Lexicon {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.action_words.intersection(&self.object_words).next() {
            return Err(Error::InvalidArgument(format!("'{w}' is both an action and an object word")));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let lex: Lexicon = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn is_known(&self, word: &str) -> bool {
        self.action_words.contains(word) || self.object_words.contains(word) || self.stop_words.contains(word)
    }

    /// Normalized form of `word`: the word itself when known, otherwise the
    /// first suffix rewrite that lands on an action or object lemma.
    pub fn lemmatize<'a>(&self, word: &'a str) -> std::borrow::Cow<'a, str> {
        if self.is_known(word) {
            return word.into();
        }
        for (suffix, replacement) in &self.suffix_rules {
            if let Some(stem) = word.strip_suffix(suffix.as_str()) {
                if stem.len() < 2 {
                    continue;
                }
                let candidate = format!("{stem}{replacement}");
                if self.action_words.contains(&candidate) || self.object_words.contains(&candidate) {
                    return candidate.into();
                }
            }
        }
        word.into()
    }

    /// Every word the embedding vocabulary must cover.
    pub fn all_words(&self) -> impl Iterator<Item = &str> {
        self.action_words.iter().chain(&self.object_words).chain(&self.stop_words).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub tokens: Vec<String>,
    pub object_phrases: Vec<String>,
    pub action_phrases: Vec<String>,
}

impl ParsedInstruction {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercases, splits on anything that is not a letter, and drops the
/// separators. Digits are separators too, so numbers disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

pub fn parse_oap(tokens: &[String], lex: &Lexicon) -> ParsedInstruction {
    let mut object_phrases: Vec<String> = Vec::new();
    let mut action_phrases = Vec::new();
    let mut previous_was_object = false;
    for token in tokens {
        let lemma = lex.lemmatize(token);
        if lex.object_words.contains(lemma.as_ref()) {
            match object_phrases.last_mut() {
                Some(phrase) if previous_was_object => {
                    phrase.push(' ');
                    phrase.push_str(&lemma);
                }
                _ => object_phrases.push(lemma.into_owned()),
            }
            previous_was_object = true;
        } else {
            if lex.action_words.contains(lemma.as_ref()) {
                action_phrases.push(lemma.into_owned());
            }
            previous_was_object = false;
        }
    }
    ParsedInstruction { tokens: tokens.to_vec(), object_phrases, action_phrases }
}

/// `tokenize` followed by `parse_oap`.
pub fn parse_instruction(text: &str, lex: &Lexicon) -> ParsedInstruction {
    parse_oap(&tokenize(text), lex)
}
