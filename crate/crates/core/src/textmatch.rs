//! Normalized text containment used by validators.
//!
//! Normalization lowercases and collapses every run of non-alphanumeric
//! characters into one space, so "Oshawa GO!" and "oshawa go" compare equal.

/// Lowercased alphanumeric tokens of `text`.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// `text` reduced to space-separated lowercase tokens.
pub fn normalize(text: &str) -> String {
    tokens(text).collect::<Vec<_>>().join(" ")
}

/// Whether the token sequence of `needle` occurs in `haystack` on token
/// boundaries. An empty needle never matches.
pub fn contains_phrase(haystack: &str, needle: &str) -> bool {
    let needle = normalize(needle);
    if needle.is_empty() {
        return false;
    }
    let haystack = format!(" {} ", normalize(haystack));
    haystack.contains(&format!(" {needle} "))
}

/// Single-word variant of [`contains_phrase`].
pub fn contains_word(haystack: &str, word: &str) -> bool {
    contains_phrase(haystack, word)
}
