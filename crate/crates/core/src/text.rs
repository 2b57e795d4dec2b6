//! Word-level text helpers shared by segmentation, context assembly and scoring.
//!
//! A token is a whitespace-delimited word everywhere in this crate.

/// Number of whitespace-delimited words in `text`.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Collapse every run of whitespace to a single space and trim the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Split whitespace-normalized text into sentences.
///
/// A sentence ends at a word whose last non-closing character is `.`, `!` or
/// `?`. Trailing words without a terminator form a final sentence. Joining the
/// returned sentences with a single space reproduces `normalize_whitespace(text)`.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in text.split_whitespace() {
        current.push(word);
        if ends_sentence(word) {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

fn ends_sentence(word: &str) -> bool {
    let core = word.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}']);
    core.ends_with(['.', '!', '?'])
}

/// Lowercased alphanumeric runs, the tokenization used by the mock embedder.
pub fn alnum_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_words() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("  a  b\tc\n"), 3);
    }

    #[test]
    fn sentences_rejoin_to_normalized_text() {
        let text = "First one.  Second (really)! Third?\"  tail words";
        let sentences = split_sentences(text);
        assert_eq!(sentences.len(), 4);
        assert_eq!(sentences.join(" "), normalize_whitespace(text));
    }

    #[test]
    fn alnum_tokens_lowercase_and_split() {
        let toks: Vec<_> = alnum_tokens("Alpha-beta, GAMMA_1").collect();
        assert_eq!(toks, vec!["alpha", "beta", "gamma", "1"]);
    }
}
