//! Soft relational labels: category pairs extracted from descriptions.

mod canon;
mod llm;
mod parser;

use serde::{Deserialize, Serialize};

pub use canon::{canonicalize_entity, normalized_distance, singularize, Canonical, DEFAULT_THRESHOLD};
pub use llm::{build_prompt, llm_extract_relations, parse_llm_reply, CompletionEndpoint, HttpCompletionClient, PROMPT_PREFIX};
pub use parser::{parse_mentions, parse_relations, tokenize, Entity, Grammar, Mention, DEFAULT_RELATIONS};

use crate::scene::{Scene, SoftRelationalLabel};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionSource {
    Parser,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub pairs: SoftRelationalLabel,
    /// Raw entity names that failed canonicalization.
    pub unresolved: Vec<String>,
    pub source: ExtractionSource,
}

/// `r[i][j] = 1` iff `i ≠ j` and the categories of objects `i` and `j`
/// form one of the unordered `pairs`.
pub fn pairs_to_binary_labels(pairs: &SoftRelationalLabel, scene: &Scene) -> Matrix {
    let n = scene.len();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (a, b) = (&scene.objects[i].category, &scene.objects[j].category);
                if pairs.iter().any(|p| p.matches(a, b)) {
                    r.set(i, j, 1.0);
                }
            }
        }
    }
    r
}
