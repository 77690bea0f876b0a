//! Transcript → tumor prompt.
//!
//! A transcript is tokenized, vocabulary surface forms are matched and
//! normalized to a canonical class, negation is resolved (report-wide cues
//! first, otherwise per-entity trigger scopes) and the earliest affirmed
//! mention decides the class. With no affirmed mention the case is healthy.

mod negation;
mod rules;
mod tokenize;

pub use negation::{apply_entity_negation, detect_global_negation};
pub use rules::{
    load_pack_dir, NearMissConfig, NegationRules, VocabularyMap, CANONICAL_CLASSES, NEGATION_FILE, VOCABULARY_FILE,
};
pub use tokenize::{find_phrase, normalize_text, phrase_tokens, Token};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Evidence string when no vocabulary term occurs at all.
pub const NO_MATCH_EVIDENCE: &str = "no target tumor term found";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid rule pack: {0}")]
    InvalidPack(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub case_id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EntityMention {
    /// Normalized (lowercase, single-spaced) matched form.
    pub surface: String,
    pub canonical: String,
    /// Byte offsets into the original text.
    pub start: usize,
    pub end: usize,
    pub negated: bool,
    pub negation_trigger: Option<String>,
    #[serde(skip)]
    pub token_range: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptExtraction {
    pub case_id: String,
    #[serde(rename = "class")]
    pub class_label: String,
    pub negated: bool,
    pub evidence: String,
    pub prompt: String,
    pub mentions: Vec<EntityMention>,
}

/// Longest-match-first vocabulary scan. Overlapping candidates resolve to
/// the longer match, then the earlier one; results are in text order.
pub fn find_mentions(tokens: &[Token], vocab: &VocabularyMap) -> Vec<EntityMention> {
    let forms: Vec<(Vec<String>, &str, &str)> = vocab
        .synonyms
        .iter()
        .map(|(surface, class)| (phrase_tokens(surface), surface.as_str(), class.as_str()))
        .collect();

    let mut candidates: Vec<(usize, usize, &str, &str)> = Vec::new();
    for (phrase, surface, class) in &forms {
        for start in find_phrase(tokens, phrase) {
            candidates.push((start, phrase.len(), *surface, *class));
        }
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut taken = vec![false; tokens.len()];
    let mut mentions = Vec::new();
    for (start, len, surface, class) in candidates {
        if taken[start..start + len].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].fill(true);
        mentions.push(EntityMention {
            surface: surface.to_string(),
            canonical: class.to_string(),
            start: tokens[start].start,
            end: tokens[start + len - 1].end,
            negated: false,
            negation_trigger: None,
            token_range: (start, start + len),
        });
    }
    mentions.sort_by_key(|m| m.token_range.0);
    mentions
}

/// First out-of-vocabulary token within the configured edit ratio of a
/// review form.
fn near_miss<'t>(tokens: &'t [Token], vocab: &VocabularyMap) -> Option<&'t str> {
    let cfg = vocab.near_miss.as_ref()?;
    tokens
        .iter()
        .filter(|t| t.text.chars().count() >= cfg.min_length && t.text.chars().all(char::is_alphabetic))
        .filter(|t| !vocab.synonyms.contains_key(&t.text))
        .find(|t| {
            cfg.forms.iter().any(|form| {
                let d = strsim::levenshtein(&t.text, form);
                let longest = t.text.chars().count().max(form.chars().count());
                d > 0 && (d as f64) / (longest as f64) <= cfg.max_edit_ratio
            })
        })
        .map(|t| t.text.as_str())
}

/// Tumor classes render as the bare class word; healthy renders as the
/// healthy sentinel, which downstream detection suppresses.
pub fn render_prompt(class_label: &str, _negated: bool) -> String {
    class_label.to_string()
}

pub fn extract(transcript: &Transcript, vocab: &VocabularyMap, rules: &NegationRules) -> PromptExtraction {
    let tokens = normalize_text(&transcript.text);
    let mut mentions = find_mentions(&tokens, vocab);
    let global = detect_global_negation(&transcript.text, rules);
    match global {
        Some(cue) => {
            for m in &mut mentions {
                m.negated = true;
                m.negation_trigger = Some(cue.to_string());
            }
        }
        None => apply_entity_negation(&tokens, &mut mentions, rules),
    }

    let healthy = vocab.healthy_label.as_str();
    let (class_label, negated, evidence) = match mentions.iter().find(|m| !m.negated) {
        Some(m) => (m.canonical.as_str(), false, m.surface.clone()),
        None => match mentions.first() {
            Some(first) => {
                let why = global
                    .map(str::to_string)
                    .or_else(|| first.negation_trigger.clone())
                    .unwrap_or_default();
                (healthy, true, why)
            }
            None => {
                let why = near_miss(&tokens, vocab).unwrap_or(NO_MATCH_EVIDENCE);
                (healthy, false, why.to_string())
            }
        },
    };

    PromptExtraction {
        case_id: transcript.case_id.clone(),
        class_label: class_label.to_string(),
        negated,
        evidence,
        prompt: render_prompt(class_label, negated),
        mentions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str) -> PromptExtraction {
        extract(
            &Transcript {
                case_id: "t".into(),
                text: text.into(),
            },
            &VocabularyMap::builtin(),
            &NegationRules::builtin(),
        )
    }

    #[test]
    fn mention_lookup() {
        let vocab = VocabularyMap::builtin();
        let m = find_mentions(&normalize_text("glioblastoma"), &vocab);
        assert_eq!(
            (m[0].surface.as_str(), m[0].canonical.as_str()),
            ("glioblastoma", "glioma")
        );
        let m = find_mentions(&normalize_text("macroadenoma"), &vocab);
        assert_eq!(m[0].canonical, "pituitary");
        assert!(find_mentions(&normalize_text("glioplaston"), &vocab).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let vocab = VocabularyMap::builtin();
        let text = "Known Pituitary Adenoma, stable.";
        let m = find_mentions(&normalize_text(text), &vocab);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].surface, "pituitary adenoma");
        assert_eq!(&text[m[0].start..m[0].end], "Pituitary Adenoma");
    }

    #[test]
    fn extraction_examples() {
        let r = run("Large ring-enhancing glioblastoma in the left frontal lobe.");
        assert_eq!(
            (r.class_label.as_str(), r.evidence.as_str()),
            ("glioma", "glioblastoma")
        );
        assert_eq!(r.prompt, "glioma");

        let r = run("no evidence of meningioma, but pituitary macroadenoma is present");
        assert_eq!(r.class_label, "pituitary");
        assert!(r.mentions[0].negated && !r.mentions[1].negated);

        let r = run("Ventricles are symmetric.");
        assert_eq!(
            (r.class_label.as_str(), r.evidence.as_str()),
            ("healthy", NO_MATCH_EVIDENCE)
        );
        assert!(!r.negated);
        assert_eq!(r.prompt, "healthy");

        let r = run("");
        assert_eq!(r.class_label, "healthy");
    }

    #[test]
    fn global_cue_overrides_mentions() {
        let r = run("Normal MRI. Prior glioma resection cavity.");
        assert_eq!(r.class_label, "healthy");
        assert!(r.negated);
        assert_eq!(r.evidence, "normal mri");
        assert!(r.mentions.iter().all(|m| m.negated));
    }

    #[test]
    fn all_negated_reports_trigger() {
        let r = run("Negative for meningioma.");
        assert_eq!(
            (r.class_label.as_str(), r.evidence.as_str()),
            ("healthy", "negative for")
        );
    }

    #[test]
    fn earliest_affirmed_mention_decides() {
        let r = run("Meningioma along the falx; incidental pituitary microadenoma.");
        assert_eq!(r.class_label, "meningioma");
        // "pituitary microadenoma" is not itself a listed form
        assert_eq!(r.mentions.len(), 3);
    }

    #[test]
    fn near_miss_is_reported_not_matched() {
        let r = run("Findings consistent with glioplaston.");
        assert_eq!(
            (r.class_label.as_str(), r.evidence.as_str()),
            ("healthy", "glioplaston")
        );
        assert!(r.mentions.is_empty());
    }

    #[test]
    fn prompt_rendering() {
        assert_eq!(render_prompt("glioma", false), "glioma");
        assert_eq!(render_prompt("healthy", true), "healthy");
        assert_eq!(render_prompt("pituitary", false), "pituitary");
    }
}
