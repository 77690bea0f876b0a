//! Two-stage negation: report-wide cues first, then NegEx-style triggers
//! with a token scope window.

use super::rules::NegationRules;
use super::tokenize::{find_phrase, normalize_text, phrase_tokens, Token};
use super::EntityMention;

/// Earliest global cue occurring as a whole-token phrase in `text`; on a
/// tie in position the longer cue wins.
pub fn detect_global_negation<'r>(text: &str, rules: &'r NegationRules) -> Option<&'r str> {
    let tokens = normalize_text(text);
    rules
        .global_cues
        .iter()
        .filter_map(|cue| {
            let phrase = phrase_tokens(cue);
            find_phrase(&tokens, &phrase)
                .first()
                .map(|&pos| (pos, std::cmp::Reverse(phrase.len()), cue.as_str()))
        })
        .min()
        .map(|(_, _, cue)| cue)
}

struct Occurrence<'r> {
    start: usize,
    end: usize,
    phrase: &'r str,
}

fn occurrences<'r>(tokens: &[Token], phrases: &'r [String]) -> Vec<Occurrence<'r>> {
    let mut out = Vec::new();
    for phrase in phrases {
        let toks = phrase_tokens(phrase);
        for start in find_phrase(tokens, &toks) {
            out.push(Occurrence {
                start,
                end: start + toks.len(),
                phrase,
            });
        }
    }
    out
}

/// Marks a mention negated when a pre-trigger ends fewer than
/// `scope_window` tokens before it, or a post-trigger starts fewer than
/// `scope_window` tokens after it, with no terminator token in between.
/// The nearest qualifying trigger is recorded; on equal distance the longer
/// phrase wins.
pub fn apply_entity_negation(tokens: &[Token], mentions: &mut [EntityMention], rules: &NegationRules) {
    let pre = occurrences(tokens, &rules.pre_triggers);
    let post = occurrences(tokens, &rules.post_triggers);
    let mut terminator = vec![false; tokens.len()];
    for t in occurrences(tokens, &rules.terminators) {
        terminator[t.start..t.end].fill(true);
    }
    let clear = |from: usize, to: usize| !terminator[from..to].iter().any(|&t| t);
    let window = rules.scope_window;

    for m in mentions.iter_mut() {
        let (ms, me) = m.token_range;
        let before = pre
            .iter()
            .filter(|t| t.end <= ms && ms - t.end < window && clear(t.end, ms))
            .min_by_key(|t| (ms - t.end, std::cmp::Reverse(t.end - t.start)));
        let after = post
            .iter()
            .filter(|t| t.start >= me && t.start - me < window && clear(me, t.start))
            .min_by_key(|t| (t.start - me, std::cmp::Reverse(t.end - t.start)));
        let trigger = match (before, after) {
            (Some(b), Some(a)) if a.start - me < ms - b.end => Some(a),
            (Some(b), _) => Some(b),
            (None, a) => a,
        };
        if let Some(t) = trigger {
            m.negated = true;
            m.negation_trigger = Some(t.phrase.to_string());
        }
    }
}
