//! Surface-form normalization and word tokenization shared by the lexicon,
//! the retrieval scorer and the encoder vocabulary.

/// Case-folds, maps underscores to spaces and collapses whitespace.
pub fn normalize_surface(s: &str) -> String {
    tokenize(&s.replace('_', " ")).join(" ")
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Candidate singular forms of a token, most specific first. The token
/// itself is always the first candidate.
pub fn singular_forms(token: &str) -> Vec<String> {
    let mut forms = vec![token.to_string()];
    if token.len() > 3 && token.ends_with("ies") {
        forms.push(format!("{}y", &token[..token.len() - 3]));
    }
    if token.len() > 3 && (token.ends_with("ses") || token.ends_with("xes") || token.ends_with("ches") || token.ends_with("shes")) {
        forms.push(token[..token.len() - 2].to_string());
    }
    if token.len() > 2 && token.ends_with('s') && !token.ends_with("ss") {
        forms.push(token[..token.len() - 1].to_string());
    }
    forms
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_underscores() {
        assert_eq!(normalize_surface("Ice_Cream"), "ice cream");
        assert_eq!(normalize_surface("  New   York "), "new york");
    }

    #[test]
    fn tokenizes_punctuation_away() {
        assert_eq!(tokenize("What do cats drink?"), vec!["what", "do", "cats", "drink"]);
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn singular_candidates() {
        assert_eq!(singular_forms("cats"), vec!["cats", "cat"]);
        assert_eq!(singular_forms("berries"), vec!["berries", "berry", "berrie"]);
        assert_eq!(singular_forms("boxes"), vec!["boxes", "box", "boxe"]);
        assert_eq!(singular_forms("glass"), vec!["glass"]);
    }
}
