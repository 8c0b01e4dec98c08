//! Fixed vocabulary of the referral grammar.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAMMAR_VERSION: u32 = 1;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;

/// Object category with its canonical box size `(width, depth, height)` in
/// meters. Heights are spread apart so that categories are separable from
/// geometry alone.
#[derive(Clone, Copy, Debug)]
pub struct ObjectClass {
    pub nouns: &'static [&'static str],
    pub size: [f64; 3],
}

pub const CLASSES: [ObjectClass; 7] = [
    ObjectClass { nouns: &["bed", "cot"], size: [1.0, 0.8, 0.45] },
    ObjectClass { nouns: &["table", "desk"], size: [0.8, 0.6, 0.70] },
    ObjectClass { nouns: &["chair", "seat", "stool"], size: [0.45, 0.45, 0.95] },
    ObjectClass { nouns: &["cabinet", "cupboard", "dresser"], size: [0.6, 0.5, 1.20] },
    ObjectClass { nouns: &["lamp", "light"], size: [0.3, 0.3, 1.55] },
    ObjectClass { nouns: &["shelf", "bookcase"], size: [0.8, 0.3, 1.85] },
    ObjectClass { nouns: &["door", "doorway"], size: [0.8, 0.1, 2.10] },
];

#[derive(Clone, Copy, Debug)]
pub struct Color {
    pub words: &'static [&'static str],
    pub rgb: [f64; 3],
}

pub const COLORS: [Color; 6] = [
    Color { words: &["red", "crimson"], rgb: [0.85, 0.15, 0.15] },
    Color { words: &["green", "emerald"], rgb: [0.20, 0.70, 0.25] },
    Color { words: &["blue", "navy"], rgb: [0.15, 0.30, 0.85] },
    Color { words: &["yellow", "golden"], rgb: [0.90, 0.85, 0.20] },
    Color { words: &["white", "ivory"], rgb: [0.92, 0.92, 0.92] },
    Color { words: &["black", "dark"], rgb: [0.10, 0.10, 0.10] },
];

const RELATION_WORDS: &[&str] = &["near", "beside", "by"];
const FACING_WORDS: &[&str] = &["facing", "viewing"];
const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "to", "on", "when", "you", "are", "left", "right", "side", "one", "that", "is",
    "closest", "next", "of",
];

/// Token table with synonym groups. Ids are dense and fixed by the grammar
/// version.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    pub version: u32,
    pub tokens: Vec<String>,
    pub synonym_groups: Vec<Vec<u32>>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
    #[serde(skip)]
    group_of: Vec<Option<usize>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = vec!["[PAD]".into(), "[MASK]".into()];
        let mut groups: Vec<Vec<u32>> = Vec::new();
        let mut add_group = |tokens: &mut Vec<String>, words: &[&str]| {
            let ids: Vec<u32> = words
                .iter()
                .map(|w| {
                    tokens.push((*w).to_string());
                    (tokens.len() - 1) as u32
                })
                .collect();
            if ids.len() > 1 {
                groups.push(ids);
            }
        };
        for class in &CLASSES {
            add_group(&mut tokens, class.nouns);
        }
        for color in &COLORS {
            add_group(&mut tokens, color.words);
        }
        add_group(&mut tokens, RELATION_WORDS);
        add_group(&mut tokens, FACING_WORDS);
        for w in FUNCTION_WORDS {
            add_group(&mut tokens, &[w]);
        }
        let mut vocab = Vocabulary {
            version: GRAMMAR_VERSION,
            tokens,
            synonym_groups: groups,
            lookup: HashMap::new(),
            group_of: Vec::new(),
        };
        vocab.reindex();
        vocab
    }

    fn reindex(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self.group_of = vec![None; self.tokens.len()];
        for (g, ids) in self.synonym_groups.iter().enumerate() {
            for &id in ids {
                self.group_of[id as usize] = Some(g);
            }
        }
    }

    /// Restores lookup tables after deserialization; rejects a table that
    /// differs from this grammar version.
    pub fn validated(mut self) -> Result<Self> {
        self.reindex();
        if self != Vocabulary::new() {
            return Err(Error::Invalid(format!(
                "vocabulary does not match grammar version {GRAMMAR_VERSION}"
            )));
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        *self
            .lookup
            .get(word)
            .unwrap_or_else(|| panic!("word {word:?} is not in the grammar"))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownToken(id))
    }

    pub fn check(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.tokens.len()) {
            Some(&bad) => Err(Error::UnknownToken(bad)),
            None => Ok(()),
        }
    }

    /// Other members of the synonym group of `id`, if any.
    pub fn synonyms(&self, id: u32) -> &[u32] {
        match self.group_of.get(id as usize).copied().flatten() {
            Some(g) => &self.synonym_groups[g],
            None => &[],
        }
    }

    pub fn class_noun(&self, class: usize) -> u32 {
        self.id(CLASSES[class].nouns[0])
    }

    pub fn color_word(&self, color: usize) -> u32 {
        self.id(COLORS[color].words[0])
    }

    /// True for any noun (or synonym) naming an object class.
    pub fn is_class_noun(&self, id: u32) -> bool {
        self.word(id)
            .is_ok_and(|w| CLASSES.iter().any(|c| c.nouns.contains(&w)))
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_reserved() {
        let v = Vocabulary::new();
        assert_eq!(v.word(PAD).unwrap(), "[PAD]");
        assert_eq!(v.word(MASK).unwrap(), "[MASK]");
        assert!(v.len() >= 50 && v.len() <= 70, "{}", v.len());
        for (i, t) in v.tokens.iter().enumerate() {
            assert_eq!(v.id(t), i as u32);
        }
        assert!(matches!(v.word(999), Err(Error::UnknownToken(999))));
    }

    #[test]
    fn synonym_groups() {
        let v = Vocabulary::new();
        let chair = v.id("chair");
        assert_eq!(v.synonyms(chair).len(), 3);
        assert!(v.synonyms(v.id("the")).is_empty());
        assert!(v.is_class_noun(v.id("stool")));
        assert!(!v.is_class_noun(v.id("red")));
    }

    #[test]
    fn json_round_trip_validates() {
        let v = Vocabulary::new();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back.validated().unwrap(), v);
    }
}
