//! Versioned prompt assets for the external chat backends.

pub const PROMPT_VERSION: &str = "v1";

pub const ANNOTATE_SYSTEM: &str =
    "You are a strict fact-checking annotator. You answer only with the JSON object requested.";
pub const ANNOTATE_TEMPLATE: &str = include_str!("../assets/annotate_prompt_v1.txt");

pub const DECOMPOSE_SYSTEM: &str =
    "You split answers into atomic factual claims. You answer only with a JSON array of strings.";
pub const DECOMPOSE_TEMPLATE: &str = include_str!("../assets/decompose_prompt_v1.txt");

pub const MERGE_SYSTEM: &str = "You merge lists of claims into a coherent response.";
pub const MERGE_TEMPLATE: &str = include_str!("../assets/merge_prompt_v1.txt");

/// Substitutes `{name}` placeholders in one pass, so substituted values are
/// never rescanned. Unknown `{...}` sequences are left as written.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = vars.iter().find_map(|(name, value)| {
            let key_len = name.len() + 2;
            (tail.len() >= key_len
                && tail.as_bytes()[key_len - 1] == b'}'
                && &tail[1..key_len - 1] == *name)
                .then_some((key_len, *value))
        });
        match hit {
            Some((len, value)) => {
                out.push_str(value);
                rest = &tail[len..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fills_each_placeholder_once() {
        let got = fill("q={query} c={claim} {other}", &[("query", "{claim}"), ("claim", "x")]);
        assert_eq!(got, "q={claim} c=x {other}");
    }

    #[test]
    fn templates_carry_their_placeholders() {
        for p in ["{query}", "{ground_truth}", "{documents}", "{claim}"] {
            assert!(ANNOTATE_TEMPLATE.contains(p), "{p}");
        }
        assert!(DECOMPOSE_TEMPLATE.contains("{answer}"));
        assert!(MERGE_TEMPLATE.contains("{claims}"));
    }

    #[test]
    fn json_braces_survive() {
        let got = fill(r#"reply {"factual": true} for {claim}"#, &[("claim", "c")]);
        assert_eq!(got, r#"reply {"factual": true} for c"#);
    }
}
