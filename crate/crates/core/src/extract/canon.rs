//! Mapping free-form entity names onto the category vocabulary.

use crate::scene::Vocabulary;

/// Maximum normalized edit distance accepted as a match.
pub const DEFAULT_THRESHOLD: f64 = 0.34;

#[derive(Clone, Debug, PartialEq)]
pub enum Canonical {
    Accepted { category: String, distance: f64 },
    Rejected { nearest: Option<String>, distance: f64 },
}

impl Canonical {
    pub fn category(&self) -> Option<&str> {
        match self {
            Canonical::Accepted { category, .. } => Some(category),
            Canonical::Rejected { .. } => None,
        }
    }

    pub fn distance(&self) -> f64 {
        match self {
            Canonical::Accepted { distance, .. } | Canonical::Rejected { distance, .. } => *distance,
        }
    }
}

/// Rule-based English singular form of the last word.
pub fn singularize(word: &str) -> String {
    let w = word;
    if w.len() <= 3 || w.ends_with("ss") || w.ends_with("us") || w.ends_with("is") {
        return w.to_string();
    }
    if let Some(stem) = w.strip_suffix("ves") {
        return format!("{stem}f");
    }
    if let Some(stem) = w.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suffix in ["ches", "shes", "xes", "sses", "zes"] {
        if w.ends_with(suffix) {
            return w[..w.len() - 2].to_string();
        }
    }
    match w.strip_suffix('s') {
        Some(stem) => stem.to_string(),
        None => w.to_string(),
    }
}

/// Levenshtein distance divided by the longer length (in chars).
pub fn normalized_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(a, b) as f64 / longest as f64
}

fn normalize(name: &str) -> String {
    let lowered = name.trim().to_lowercase();
    let mut words: Vec<String> = lowered.split_whitespace().map(str::to_string).collect();
    if let Some(last) = words.last_mut() {
        *last = singularize(last);
    }
    words.join(" ")
}

/// Lowercases and singularizes `name`, then picks the nearest vocabulary
/// entry; accepted iff its normalized distance is at most `threshold`.
/// Ties go to the earlier vocabulary entry.
pub fn canonicalize_entity(name: &str, vocab: &Vocabulary, threshold: f64) -> Canonical {
    let lowered = name.trim().to_lowercase();
    if vocab.contains(&lowered) {
        return Canonical::Accepted { category: lowered, distance: 0.0 };
    }
    let normalized = normalize(name);
    let squashed = normalized.replace(' ', "");
    let mut best: Option<(&str, f64)> = None;
    for entry in vocab.names() {
        let d = normalized_distance(&normalized, entry).min(normalized_distance(&squashed, entry));
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((entry, d));
        }
    }
    match best {
        Some((entry, d)) if d <= threshold => Canonical::Accepted { category: entry.to_string(), distance: d },
        Some((entry, d)) => Canonical::Rejected { nearest: Some(entry.to_string()), distance: d },
        None => Canonical::Rejected { nearest: None, distance: f64::INFINITY },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook recursive definition, used as an independent oracle.
    fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
        fn go(a: &[char], b: &[char], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            if let Some(&v) = memo.get(&(a.len(), b.len())) {
                return v;
            }
            let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
            let del = go(&a[1..], b, memo) + 1;
            let ins = go(a, &b[1..], memo) + 1;
            let v = sub.min(del).min(ins);
            memo.insert((a.len(), b.len()), v);
            v
        }
        go(a, b, &mut Default::default())
    }

    #[test]
    fn shelves_maps_to_shelf() {
        let vocab = Vocabulary::full();
        assert_eq!(canonicalize_entity("shelves", &vocab, DEFAULT_THRESHOLD).category(), Some("shelf"));
        assert_eq!(canonicalize_entity("Pillows", &vocab, DEFAULT_THRESHOLD).category(), Some("pillow"));
        assert_eq!(canonicalize_entity("boxes", &vocab, DEFAULT_THRESHOLD).category(), Some("box"));
        assert_eq!(canonicalize_entity("white board", &vocab, DEFAULT_THRESHOLD).category(), Some("whiteboard"));
    }

    #[test]
    fn identity_on_vocabulary_members() {
        let vocab = Vocabulary::full();
        for name in vocab.names() {
            let c = canonicalize_entity(name, &vocab, DEFAULT_THRESHOLD);
            assert_eq!(c, Canonical::Accepted { category: name.clone(), distance: 0.0 });
            // idempotent
            let again = canonicalize_entity(c.category().unwrap(), &vocab, DEFAULT_THRESHOLD);
            assert_eq!(again, c);
        }
    }

    #[test]
    fn blackboard_is_rejected_against_whiteboard() {
        let a: Vec<char> = "blackboard".chars().collect();
        let b: Vec<char> = "whiteboard".chars().collect();
        let oracle = levenshtein_oracle(&a, &b);
        assert_eq!(oracle, 5);
        let expected = oracle as f64 / 10.0;
        assert_eq!(expected, 0.5);
        let vocab = Vocabulary::full();
        let c = canonicalize_entity("blackboard", &vocab, DEFAULT_THRESHOLD);
        assert_eq!(c, Canonical::Rejected { nearest: Some("whiteboard".into()), distance: 0.5 });
    }

    #[test]
    fn normalized_distance_matches_oracle() {
        let words = ["chair", "chairs", "table", "tabel", "desk", "disk", "", "couch", "coach", "shelf"];
        for a in words {
            for b in words {
                let ac: Vec<char> = a.chars().collect();
                let bc: Vec<char> = b.chars().collect();
                let longest = ac.len().max(bc.len());
                let expected = if longest == 0 { 0.0 } else { levenshtein_oracle(&ac, &bc) as f64 / longest as f64 };
                assert_eq!(normalized_distance(a, b), expected, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn singular_forms() {
        assert_eq!(singularize("shelves"), "shelf");
        assert_eq!(singularize("boxes"), "box");
        assert_eq!(singularize("benches"), "bench");
        assert_eq!(singularize("bookcases"), "bookcase");
        assert_eq!(singularize("glass"), "glass");
        assert_eq!(singularize("bus"), "bus");
    }
}
