//! Sentence splitting and word tokenization shared by the splitter and the
//! metrics.

/// Splits on `.`, `!`, `?` followed by whitespace or end of text, and on `;`
/// and newlines. A period between digits ("2.5") is not a boundary. Pieces
/// are trimmed and empty ones dropped; terminal punctuation stays attached.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        let next = chars.get(i + 1).map(|&(_, n)| n);
        let boundary = match c {
            '\n' | ';' => true,
            '.' | '!' | '?' => next.is_none_or(char::is_whitespace),
            _ => false,
        };
        if boundary {
            let end = if c == '\n' || c == ';' { pos } else { pos + c.len_utf8() };
            push_trimmed(&mut out, &text[start..end]);
            start = pos + c.len_utf8();
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed<'a>(out: &mut Vec<&'a str>, s: &'a str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s);
    }
}

/// Lowercased maximal alphanumeric runs: whitespace and punctuation both
/// separate tokens, and punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_boundaries() {
        assert_eq!(
            sentences("A 2.5 cm mass. No effusion!\nHeart normal; lungs clear"),
            vec!["A 2.5 cm mass.", "No effusion!", "Heart normal", "lungs clear"]
        );
        assert!(sentences("  \n ").is_empty());
    }

    #[test]
    fn tokens() {
        assert_eq!(tokenize("Effusion-thickening, 2.5cm!"), vec!["effusion", "thickening", "2", "5cm"]);
    }
}
