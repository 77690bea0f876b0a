//! Vocabulary and negation rule packs, loaded from JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::tokenize::phrase_tokens;
use super::PromptError;

pub const CANONICAL_CLASSES: [&str; 4] = ["glioma", "meningioma", "pituitary", "healthy"];
pub const VOCABULARY_FILE: &str = "vocabulary.json";
pub const NEGATION_FILE: &str = "negation.json";

const DEFAULT_VOCABULARY: &str = include_str!("../../packs/vocabulary.json");
const DEFAULT_NEGATION: &str = include_str!("../../packs/negation.json");

/// Out-of-vocabulary tokens this close to a listed form are reported as
/// evidence for review. They never produce a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NearMissConfig {
    pub forms: Vec<String>,
    /// Levenshtein distance over the longer length.
    pub max_edit_ratio: f64,
    pub min_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyMap {
    #[serde(default)]
    pub version: String,
    pub classes: Vec<String>,
    pub healthy_label: String,
    /// Surface form → canonical class.
    #[serde(deserialize_with = "unique_keys")]
    pub synonyms: BTreeMap<String, String>,
    #[serde(default)]
    pub near_miss: Option<NearMissConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegationRules {
    #[serde(default)]
    pub version: String,
    pub global_cues: Vec<String>,
    pub pre_triggers: Vec<String>,
    pub post_triggers: Vec<String>,
    pub terminators: Vec<String>,
    pub scope_window: usize,
}

fn unique_keys<'de, D>(d: D) -> Result<BTreeMap<String, String>, D::Error>
where
    D: Deserializer<'de>,
{
    struct UniqueMap;
    impl<'de> Visitor<'de> for UniqueMap {
        type Value = BTreeMap<String, String>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an object mapping surface forms to classes")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = access.next_entry::<String, String>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("surface form `{k}` listed twice")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }
    d.deserialize_map(UniqueMap)
}

fn check_lowercase(kind: &str, items: &[String]) -> Result<(), PromptError> {
    if items.is_empty() {
        return Err(PromptError::InvalidPack(format!("{kind} must not be empty")));
    }
    for s in items {
        if s.trim().is_empty() || *s != s.to_lowercase() {
            return Err(PromptError::InvalidPack(format!(
                "{kind} entry `{s}` must be non-empty lowercase"
            )));
        }
    }
    Ok(())
}

impl VocabularyMap {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_VOCABULARY).expect("built-in vocabulary pack parses")
    }

    pub fn from_json(json: &str) -> Result<Self, PromptError> {
        let v: Self = serde_json::from_str(json).map_err(|e| PromptError::InvalidPack(e.to_string()))?;
        v.validate()?;
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| PromptError::InvalidPack(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let got: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
        let want: BTreeSet<&str> = CANONICAL_CLASSES.into_iter().collect();
        if got != want || self.classes.len() != CANONICAL_CLASSES.len() {
            return Err(PromptError::InvalidPack(format!(
                "classes must be exactly {CANONICAL_CLASSES:?}, got {:?}",
                self.classes
            )));
        }
        if !got.contains(self.healthy_label.as_str()) {
            return Err(PromptError::InvalidPack(format!(
                "healthy label `{}` is not a class",
                self.healthy_label
            )));
        }
        let surfaces: Vec<String> = self.synonyms.keys().cloned().collect();
        check_lowercase("synonyms", &surfaces)?;
        for (surface, class) in &self.synonyms {
            if *class == self.healthy_label || !got.contains(class.as_str()) {
                return Err(PromptError::InvalidPack(format!(
                    "synonym `{surface}` maps to `{class}`, which is not a tumor class"
                )));
            }
            if phrase_tokens(surface).join(" ") != *surface {
                return Err(PromptError::InvalidPack(format!(
                    "synonym `{surface}` is not in normalized token form"
                )));
            }
        }
        if let Some(nm) = &self.near_miss {
            check_lowercase("near_miss.forms", &nm.forms)?;
            if !(0.0..1.0).contains(&nm.max_edit_ratio) {
                return Err(PromptError::InvalidPack(
                    "near_miss.max_edit_ratio must lie in [0, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn tumor_classes(&self) -> impl Iterator<Item = &str> {
        self.classes
            .iter()
            .map(String::as_str)
            .filter(move |c| *c != self.healthy_label)
    }

    pub fn is_class(&self, label: &str) -> bool {
        self.classes.iter().any(|c| c == label)
    }
}

impl NegationRules {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_NEGATION).expect("built-in negation pack parses")
    }

    pub fn from_json(json: &str) -> Result<Self, PromptError> {
        let r: Self = serde_json::from_str(json).map_err(|e| PromptError::InvalidPack(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| PromptError::InvalidPack(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.scope_window < 1 {
            return Err(PromptError::InvalidPack("scope_window must be at least 1".into()));
        }
        check_lowercase("global_cues", &self.global_cues)?;
        check_lowercase("pre_triggers", &self.pre_triggers)?;
        check_lowercase("post_triggers", &self.post_triggers)?;
        check_lowercase("terminators", &self.terminators)?;
        Ok(())
    }
}

/// Loads `vocabulary.json` and `negation.json` from `dir`.
pub fn load_pack_dir(dir: &Path) -> Result<(VocabularyMap, NegationRules), PromptError> {
    Ok((
        VocabularyMap::load(&dir.join(VOCABULARY_FILE))?,
        NegationRules::load(&dir.join(NEGATION_FILE))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_packs_are_valid() {
        VocabularyMap::builtin().validate().unwrap();
        NegationRules::builtin().validate().unwrap();
        let v = VocabularyMap::builtin();
        assert_eq!(v.synonyms["macroadenoma"], "pituitary");
        assert_eq!(v.synonyms["glioblastoma"], "glioma");
        assert_eq!(
            v.tumor_classes().collect::<Vec<_>>(),
            ["glioma", "meningioma", "pituitary"]
        );
        assert_eq!(NegationRules::builtin().scope_window, 5);
    }

    fn vocab_json(synonyms: &str) -> String {
        format!(
            r#"{{"classes":["glioma","meningioma","pituitary","healthy"],"healthy_label":"healthy","synonyms":{synonyms}}}"#
        )
    }

    #[test]
    fn rejects_bad_vocabularies() {
        assert!(VocabularyMap::from_json(&vocab_json(r#"{"gbm":"glioma"}"#)).is_ok());
        for bad in [
            r#"{"GBM":"glioma"}"#,
            r#"{"gbm":"healthy"}"#,
            r#"{"gbm":"lymphoma"}"#,
            r#"{"gbm":"glioma","gbm":"meningioma"}"#,
            r#"{"gbm, grade iv":"glioma"}"#,
        ] {
            assert!(VocabularyMap::from_json(&vocab_json(bad)).is_err(), "{bad}");
        }
        let wrong_classes = r#"{"classes":["glioma","healthy"],"healthy_label":"healthy","synonyms":{}}"#;
        assert!(VocabularyMap::from_json(wrong_classes).is_err());
    }

    #[test]
    fn rejects_bad_negation_rules() {
        let mut r = NegationRules::builtin();
        r.scope_window = 0;
        assert!(r.validate().is_err());
        let mut r = NegationRules::builtin();
        r.pre_triggers.push("Without".into());
        assert!(r.validate().is_err());
        let mut r = NegationRules::builtin();
        r.terminators.clear();
        assert!(r.validate().is_err());
    }
}
