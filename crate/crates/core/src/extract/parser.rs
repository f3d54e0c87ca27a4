//! Recursive-descent parser for spatial referring expressions.
//!
//! Attachment rules:
//! * a relation phrase directly after a noun phrase takes that noun phrase
//!   as its subject ("the pillow on the couch below the shelf": couch–shelf);
//! * after `and` or a comma the subject is that of the previous relation
//!   ("the chair left of the lamp and closest to the box": chair–box);
//! * `that is` / `which is` re-attach to the most recent noun phrase.
//!
//! Pronouns ("it", "them") never produce pairs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::canon::{canonicalize_entity, DEFAULT_THRESHOLD};
use super::{ExtractionResult, ExtractionSource};
use crate::scene::{CategoryPair, SoftRelationalLabel, Vocabulary};

/// Relation phrases recognised by the default grammar, longest first at
/// match time.
pub const DEFAULT_RELATIONS: &[&str] = &[
    "to the left of",
    "to the right of",
    "at the nearest corner of",
    "on top of",
    "in front of",
    "closest to",
    "farthest from",
    "next to",
    "close to",
    "far from",
    "away from",
    "across from",
    "on the side of",
    "between",
    "below",
    "above",
    "under",
    "underneath",
    "beneath",
    "beside",
    "behind",
    "near",
    "against",
    "facing",
    "with",
    "on",
    "in",
    "at",
    "by",
];

const DETERMINERS: &[&str] = &["the", "a", "an", "one", "two", "three", "some", "this", "another", "other"];
const PRONOUNS: &[&str] = &["it", "them", "they", "one"];
const COPULAS: &[&str] = &["is", "are", "'s"];

#[derive(Clone, Debug)]
pub struct Grammar {
    relations: Vec<Vec<String>>,
    pub vocab: Vocabulary,
    pub threshold: f64,
}

impl Grammar {
    pub fn new(vocab: Vocabulary) -> Self {
        Self::with_relations(vocab, DEFAULT_RELATIONS)
    }

    pub fn with_relations(vocab: Vocabulary, relations: &[&str]) -> Self {
        let mut relations: Vec<Vec<String>> =
            relations.iter().map(|r| r.split_whitespace().map(str::to_string).collect()).collect();
        relations.sort_by_key(|r| std::cmp::Reverse(r.len()));
        Self { relations, vocab, threshold: DEFAULT_THRESHOLD }
    }

    fn relation_at(&self, tokens: &[String], pos: usize) -> Option<usize> {
        self.relations
            .iter()
            .find(|r| tokens.len() >= pos + r.len() && tokens[pos..pos + r.len()] == r[..])
            .map(Vec::len)
    }
}

/// A noun phrase head and its canonical category, if any.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub raw: String,
    pub category: Option<String>,
}

/// One relation phrase with its resolved subject and objects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub subject: Entity,
    pub relation: String,
    pub objects: Vec<Entity>,
}

/// Lowercased word tokens; commas and periods become their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if matches!(ch, ',' | '.' | ';') {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

enum NounPhrase {
    Entity(Entity),
    Unresolved(String),
    Pronoun,
    Empty,
}

struct Parser<'g> {
    grammar: &'g Grammar,
    tokens: Vec<String>,
    pos: usize,
    mentions: Vec<Mention>,
    unresolved: Vec<String>,
}

impl<'g> Parser<'g> {
    fn at_boundary(&self, pos: usize) -> bool {
        match self.tokens.get(pos) {
            None => true,
            Some(t) => {
                matches!(t.as_str(), "and" | "," | "." | ";" | "that" | "which" | "who")
                    || COPULAS.contains(&t.as_str())
                    || self.grammar.relation_at(&self.tokens, pos).is_some()
            }
        }
    }

    fn resolve(&self, words: &[String]) -> NounPhrase {
        let Some(head) = words.last() else { return NounPhrase::Empty };
        if words.len() == 1 && PRONOUNS.contains(&head.as_str()) {
            return NounPhrase::Pronoun;
        }
        let mut tries = Vec::new();
        if words.len() >= 2 {
            tries.push(format!("{} {}", words[words.len() - 2], head));
        }
        tries.push(head.clone());
        for t in &tries {
            if let Some(cat) = canonicalize_entity(t, &self.grammar.vocab, self.grammar.threshold).category() {
                return NounPhrase::Entity(Entity { raw: t.clone(), category: Some(cat.to_string()) });
            }
        }
        NounPhrase::Unresolved(head.clone())
    }

    /// Noun phrase: optional determiner, then words up to the next boundary.
    fn noun_phrase(&mut self) -> NounPhrase {
        while self.pos < self.tokens.len() && DETERMINERS.contains(&self.tokens[self.pos].as_str()) {
            // a bare "one" is a pronoun, not a determiner
            if self.tokens[self.pos] == "one" && self.at_boundary(self.pos + 1) {
                break;
            }
            self.pos += 1;
        }
        let start = self.pos;
        while !self.at_boundary(self.pos) {
            self.pos += 1;
        }
        let words = self.tokens[start..self.pos].to_vec();
        let np = self.resolve(&words);
        if let NounPhrase::Unresolved(raw) = &np {
            self.unresolved.push(raw.clone());
        }
        np
    }

    fn run(mut self) -> (Vec<Mention>, Vec<String>) {
        let mut last_np: Option<Entity> = None;
        let mut prev_subject: Option<Entity> = None;
        let mut after_conj = false;
        while self.pos < self.tokens.len() {
            let tok = self.tokens[self.pos].clone();
            if let Some(len) = self.grammar.relation_at(&self.tokens, self.pos) {
                let relation = self.tokens[self.pos..self.pos + len].join(" ");
                self.pos += len;
                let subject = if after_conj { prev_subject.clone().or(last_np.clone()) } else { last_np.clone() };
                let mut objects = Vec::new();
                let mut nps = vec![self.noun_phrase()];
                if relation == "between" && self.tokens.get(self.pos).map(String::as_str) == Some("and") {
                    self.pos += 1;
                    nps.push(self.noun_phrase());
                }
                for np in nps {
                    if let NounPhrase::Entity(e) = np {
                        objects.push(e);
                    }
                }
                if let Some(subject) = &subject {
                    self.mentions.push(Mention { subject: subject.clone(), relation, objects: objects.clone() });
                }
                prev_subject = subject;
                if let Some(last) = objects.pop() {
                    last_np = Some(last);
                }
                after_conj = false;
                continue;
            }
            match tok.as_str() {
                "and" | "," | ";" => {
                    after_conj = true;
                    self.pos += 1;
                }
                "that" | "which" | "who" | "." => {
                    after_conj = false;
                    self.pos += 1;
                }
                t if COPULAS.contains(&t) => self.pos += 1,
                _ => {
                    let before = self.pos;
                    if let NounPhrase::Entity(e) = self.noun_phrase() {
                        if last_np.is_none() || !after_conj {
                            last_np = Some(e);
                        }
                    }
                    if self.pos == before {
                        self.pos += 1;
                    }
                }
            }
        }
        (self.mentions, self.unresolved)
    }
}

/// Every relation mention in `text`, in reading order.
pub fn parse_mentions(text: &str, grammar: &Grammar) -> (Vec<Mention>, Vec<String>) {
    Parser { grammar, tokens: tokenize(text), pos: 0, mentions: Vec::new(), unresolved: Vec::new() }.run()
}

/// Category pairs named by `text` under `grammar`.
pub fn parse_relations(text: &str, grammar: &Grammar) -> ExtractionResult {
    let (mentions, unresolved) = parse_mentions(text, grammar);
    let mut pairs = BTreeSet::new();
    for m in &mentions {
        let Some(sc) = &m.subject.category else { continue };
        for o in &m.objects {
            if let Some(oc) = &o.category {
                pairs.insert(CategoryPair::new(sc.clone(), oc.clone()));
            }
        }
    }
    ExtractionResult { pairs: SoftRelationalLabel { pairs }, unresolved, source: ExtractionSource::Parser }
}
