//! Tokenization and phrase matching shared by every text stage.

use std::collections::HashSet;

/// Lowercases `text` and splits it on anything that is not alphanumeric.
///
/// Re-tokenizing `tokens.join(" ")` reproduces the same tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    lowered
        .split(|c: char| !is_token_char(c))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn is_token_char(c: char) -> bool {
    // A handful of code points have no lowercase mapping; they act as separators.
    c.is_alphanumeric() && !c.is_uppercase()
}

/// True if `phrase` occurs as a contiguous run inside `tokens`.
pub fn contains_phrase<S: AsRef<str>, P: AsRef<str>>(tokens: &[S], phrase: &[P]) -> bool {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return false;
    }
    tokens.windows(phrase.len()).any(|w| {
        w.iter()
            .zip(phrase)
            .all(|(t, p)| t.as_ref() == p.as_ref())
    })
}

const DEFAULT_STOPWORDS: &str = include_str!("../lexicons/stopwords.txt");

/// Parses a lexicon-style file body: one entry per line, `#` starts a comment.
pub fn parse_lines(body: &str) -> Vec<String> {
    body.lines()
        .map(|l| match l.find('#') {
            Some(i) => &l[..i],
            None => l,
        })
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The built-in English stop-word list used for topic modeling and term lists.
pub fn default_stopwords() -> HashSet<String> {
    parse_lines(DEFAULT_STOPWORDS).into_iter().collect()
}
