use super::Vocabulary;

/// Lowercased word pieces: runs of alphanumerics, and every other
/// non-whitespace character on its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Maps text to ids; words outside the vocabulary become UNK. Raw text
/// can never yield a sentinel id, since sentinels are not words.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    split_words(text)
        .iter()
        .map(|w| vocab.id_or_unk(w))
        .collect()
}

pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end of
/// the text. Sentences are trimmed and never empty.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut start = 0;
    for (i, &(pos, ch)) in chars.iter().enumerate() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let at_boundary = chars
            .get(i + 1)
            .is_none_or(|&(_, next)| next.is_whitespace());
        if at_boundary {
            let end = pos + ch.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{FIRST_WORD_ID, UNK};
    use proptest::prelude::*;

    fn fixture() -> Vocabulary {
        Vocabulary::from_tokens(["hello", ",", "world", "."])
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("", &fixture()).is_empty());
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn hello_world() {
        let v = fixture();
        assert_eq!(
            tokenize("Hello, world", &v),
            vec![
                v.id("hello").unwrap(),
                v.id(",").unwrap(),
                v.id("world").unwrap()
            ]
        );
        assert_eq!(tokenize("HELLO there", &v), vec![FIRST_WORD_ID, UNK]);
    }

    #[test]
    fn sentinel_strings_do_not_tokenize_to_sentinels() {
        let v = fixture();
        let ids = tokenize("<sentinel_0> hello", &v);
        assert!(ids.iter().all(|&id| !crate::text::is_sentinel(id)));
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("A. B? C!"), vec!["A.", "B?", "C!"]);
        assert_eq!(split_sentences("No terminator"), vec!["No terminator"]);
        assert_eq!(
            split_sentences("3.14 is pi. Yes"),
            vec!["3.14 is pi.", "Yes"]
        );
    }

    #[test]
    fn abbreviation_golden() {
        // Pinned behavior: an inner period without following whitespace
        // does not split, a period before a space does.
        assert_eq!(split_sentences("e.g. test."), vec!["e.g.", "test."]);
        assert_eq!(
            split_sentences("Dr. Who left..."),
            vec!["Dr.", "Who left..."]
        );
    }

    proptest! {
        #[test]
        fn detokenize_roundtrip(picks in proptest::collection::vec(0usize..4, 0..20)) {
            let v = fixture();
            let ids: Vec<u32> = picks.iter().map(|&i| FIRST_WORD_ID + i as u32).collect();
            prop_assert_eq!(tokenize(&detokenize(&ids, &v), &v), ids);
        }

        #[test]
        fn sentences_rejoin_to_input(words in proptest::collection::vec("[a-z]{1,5}[.!?]?", 1..15)) {
            let text = words.join(" ");
            let sents = split_sentences(&text);
            prop_assert!(sents.iter().all(|s| !s.is_empty()));
            prop_assert_eq!(sents.join(" "), text);
        }
    }
}
