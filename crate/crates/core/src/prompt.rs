//! Placeholder templates.
//!
//! Templates use `{name}`-style placeholders. Rendering is a single pass over
//! the template, so substituted values are never re-scanned for placeholders.

use std::fs;
use std::io;
use std::path::Path;

const IDEA: &str = include_str!("../assets/prompts/idea.txt");
const RATE: &str = include_str!("../assets/prompts/rate.txt");
const HUMAN_SIDE: &str = include_str!("../assets/prompts/human_side.txt");
const ASSISTANT_SIDE: &str = include_str!("../assets/prompts/assistant_side.txt");

/// Substitutes each `{key}` found in `vars`. Unknown placeholders and stray
/// braces are copied through unchanged.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, value)| (value, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn has_placeholder(template: &str, key: &str) -> bool {
    template.contains(&format!("{{{key}}}"))
}

/// The role-play prompt set. Defaults are compiled in; any of
/// `idea.txt`, `rate.txt`, `human_side.txt`, `assistant_side.txt` found in an
/// override directory replaces the matching default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub idea: String,
    pub rate: String,
    pub human_side: String,
    pub assistant_side: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            idea: IDEA.to_owned(),
            rate: RATE.to_owned(),
            human_side: HUMAN_SIDE.to_owned(),
            assistant_side: ASSISTANT_SIDE.to_owned(),
        }
    }
}

impl PromptTemplates {
    pub fn load_overrides(dir: &Path) -> io::Result<Self> {
        let mut templates = Self::default();
        for (file, slot) in [
            ("idea.txt", &mut templates.idea),
            ("rate.txt", &mut templates.rate),
            ("human_side.txt", &mut templates.human_side),
            ("assistant_side.txt", &mut templates.assistant_side),
        ] {
            let path = dir.join(file);
            if path.exists() {
                let text = fs::read_to_string(&path)?;
                *slot = strip_final_newline(&text).to_owned();
            }
        }
        Ok(templates)
    }
}

fn strip_final_newline(text: &str) -> &str {
    text.strip_suffix("\r\n")
        .or_else(|| text.strip_suffix('\n'))
        .unwrap_or(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_substitution() {
        let out = render("{a} and {b}", &[("a", "{b}"), ("b", "x")]);
        assert_eq!(out, "{b} and x");
    }

    #[test]
    fn unknown_and_unbalanced_braces_survive() {
        assert_eq!(render("{zzz} {a", &[("a", "1")]), "{zzz} {a");
        assert_eq!(render("}{a}{", &[("a", "1")]), "}1{");
        assert_eq!(render("{{a}}", &[("a", "1")]), "{1}");
    }

    #[test]
    fn default_idea_template_is_the_chat_room_prompt() {
        let t = PromptTemplates::default();
        let out = render(
            &t.idea,
            &[("name", "Nurse"), ("role_prompt", "RP."), ("query", "flu"), ("roles", "Nurse, Doctor")],
        );
        assert_eq!(
            out,
            "You are Nurse. RP. You come to a chat room because you want to discuss the topic about flu. \
             The following people are in this chat room: Nurse, Doctor. What is your main point? Be brief, \
             and use at most 20 words and answer from your perspective."
        );
    }

    #[test]
    fn default_rate_template() {
        let t = PromptTemplates::default();
        let out = render(&t.rate, &[("name", "N"), ("idea", "I"), ("query", "Q"), ("memory", "M")]);
        assert_eq!(
            out,
            "You are N. Your ideas are: I. You are currently in a chat room and you are talk about Q. \
             You observe the following: M. Give a rating, between 1 and 5, to how much you care about this. "
        );
    }

    #[test]
    fn overrides_replace_only_present_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("human_side.txt"), "Ask about {query}\n").unwrap();
        let t = PromptTemplates::load_overrides(dir.path()).unwrap();
        assert_eq!(t.human_side, "Ask about {query}");
        assert_eq!(t.idea, PromptTemplates::default().idea);
    }
}
