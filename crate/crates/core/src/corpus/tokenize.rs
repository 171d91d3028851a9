/// Replacement for every `@user` mention.
pub const MENTION_TOKEN: &str = "<mention>";

/// Lowercases and splits on whitespace and punctuation.
///
/// Runs of alphanumerics (and `_`) form tokens. A leading `#` is kept so a
/// hashtag stays one token; a leading `@` marks a mention, which is replaced
/// by [`MENTION_TOKEN`].
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let prefix = match c {
            '#' | '@' if chars.peek().is_some_and(|n| is_word_char(*n)) => Some(c),
            _ if is_word_char(c) => None,
            _ => continue,
        };
        let mut word = String::new();
        if prefix.is_none() {
            word.extend(c.to_lowercase());
        }
        while let Some(&n) = chars.peek() {
            if !is_word_char(n) {
                break;
            }
            word.extend(n.to_lowercase());
            chars.next();
        }
        match prefix {
            Some('@') => tokens.push(MENTION_TOKEN.to_string()),
            Some(p) => tokens.push(format!("{p}{word}")),
            None => tokens.push(word),
        }
    }
    tokens
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mention_hashtag_and_case() {
        assert_eq!(
            tokenize("@user I love #COVID19"),
            ["<mention>", "i", "love", "#covid19"]
        );
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(tokenize("Hello, world!! it's-fine"), ["hello", "world", "it", "s", "fine"]);
        assert_eq!(tokenize("# @ ... "), Vec::<String>::new());
        assert_eq!(tokenize("a#b"), ["a", "#b"]);
    }

    #[test]
    fn unicode_whitespace_and_letters() {
        assert_eq!(tokenize("Ünïcode\u{2003}TEXT"), ["ünïcode", "text"]);
    }
}
