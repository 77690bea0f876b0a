use serde::Serialize;

/// A lowercased token and the byte range it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace and punctuation. Runs of alphanumeric characters
/// become word tokens; every other non-space character is a token of its
/// own, so sentence punctuation survives as a scope terminator.
pub fn normalize_text(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |tokens: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            tokens.push(Token {
                text: text[s..end].to_lowercase(),
                start: s,
                end,
            });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        flush(&mut tokens, &mut word_start, i);
        if !c.is_whitespace() {
            tokens.push(Token {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + c.len_utf8(),
            });
        }
    }
    flush(&mut tokens, &mut word_start, text.len());
    tokens
}

/// Token texts of a phrase, for matching against a token stream.
pub fn phrase_tokens(phrase: &str) -> Vec<String> {
    normalize_text(phrase).into_iter().map(|t| t.text).collect()
}

/// Start indices where `phrase` occurs as a contiguous token run.
pub fn find_phrase(tokens: &[Token], phrase: &[String]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - phrase.len())
        .filter(|&i| {
            tokens[i..i + phrase.len()]
                .iter()
                .zip(phrase)
                .all(|(t, p)| t.text == *p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        normalize_text(s).into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn splits_and_folds_case() {
        assert_eq!(texts("No evidence of Tumor."), ["no", "evidence", "of", "tumor", "."]);
        assert!(normalize_text("").is_empty());
        assert!(normalize_text("  \n\t ").is_empty());
    }

    #[test]
    fn spans_reslice_the_source() {
        let src = "glioblastoma,";
        let toks = normalize_text(src);
        assert_eq!(texts(src), ["glioblastoma", ","]);
        assert_eq!(&src[toks[0].start..toks[0].end], "glioblastoma");
        assert_eq!(&src[toks[1].start..toks[1].end], ",");

        let src = "Große  Läsion; T1-gewichtet";
        for t in normalize_text(src) {
            assert_eq!(src[t.start..t.end].to_lowercase(), t.text);
        }
    }

    #[test]
    fn phrase_search() {
        let toks = normalize_text("no tumor, no tumor.");
        assert_eq!(find_phrase(&toks, &phrase_tokens("no tumor")), vec![0, 3]);
        assert!(find_phrase(&toks, &phrase_tokens("tumor no tumor no")).is_empty());
    }
}
