//! Point-of-view rewriting: pronouns become explicit speaker or entity names.
//!
//! Substitution tables (matched case-insensitively on a word with its
//! surrounding punctuation stripped):
//!
//! | person | forms                                   | replacement        |
//! |--------|-----------------------------------------|--------------------|
//! | first  | i, me, myself                           | speaker            |
//! | first  | my, mine                                | speaker + `'s`     |
//! | first  | i'll, i'm, i've, i'd (any `i'` clitic)  | speaker + clitic   |
//! | second | you, yourself, yourselves               | addressee          |
//! | second | your, yours                             | addressee + `'s`   |
//! | second | you'll, you're, you've, you'd           | addressee + clitic |
//! | third  | he, him, she, her, it, they, them, ...  | cluster canon      |
//! | third  | his, hers, its, their, theirs           | canon + `'s`       |
//!
//! Third-person forms are rewritten only inside a coreference mention span.
//! `we`/`us` are left alone. Clitics are kept as written: "I'll" becomes
//! "Amanda'll".

use std::ops::Range;

use crate::corpus::{Conversation, CorefCluster};

const FIRST_SUBJECT: &[&str] = &["i", "me", "myself"];
const FIRST_POSSESSIVE: &[&str] = &["my", "mine"];
const SECOND_SUBJECT: &[&str] = &["you", "yourself", "yourselves", "ya"];
const SECOND_POSSESSIVE: &[&str] = &["your", "yours"];
const THIRD_SUBJECT: &[&str] = &[
    "he",
    "him",
    "himself",
    "she",
    "her",
    "herself",
    "it",
    "itself",
    "they",
    "them",
    "themselves",
];
const THIRD_POSSESSIVE: &[&str] = &["his", "hers", "its", "their", "theirs"];

/// Splits `word` into leading punctuation, core and trailing punctuation.
fn split_punct(word: &str) -> (&str, &str, &str) {
    let start = word
        .char_indices()
        .find(|(_, c)| c.is_alphanumeric())
        .map_or(word.len(), |(i, _)| i);
    let end = word
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_alphanumeric())
        .map_or(start, |(i, c)| i + c.len_utf8());
    (&word[..start], &word[start..end], &word[end..])
}

/// Splits a contraction like `I'll` into (`I`, `'ll`). Curly apostrophes count.
fn split_clitic(core: &str) -> Option<(&str, &str)> {
    let pos = core.find(['\'', '\u{2019}'])?;
    let (head, tail) = core.split_at(pos);
    (!head.is_empty() && tail.chars().count() > 1).then_some((head, tail))
}

fn possessive(name: &str) -> String {
    format!("{name}'s")
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Person {
    First,
    Second,
    Third,
}

/// Replacement for `core` given the name it should refer to, if `core` is a
/// pronoun of person `p`.
fn substitute(core: &str, p: Person, name: &str) -> Option<String> {
    let (subject, poss) = match p {
        Person::First => (FIRST_SUBJECT, FIRST_POSSESSIVE),
        Person::Second => (SECOND_SUBJECT, SECOND_POSSESSIVE),
        Person::Third => (THIRD_SUBJECT, THIRD_POSSESSIVE),
    };
    let lower = core.to_lowercase();
    if subject.contains(&lower.as_str()) {
        return Some(name.to_string());
    }
    if poss.contains(&lower.as_str()) {
        return Some(possessive(name));
    }
    let (head, clitic) = split_clitic(core)?;
    let head = head.to_lowercase();
    subject.contains(&head.as_str()).then(|| format!("{name}{clitic}"))
}

/// Speaker of the nearest earlier turn by someone else, else the nearest
/// later one.
pub fn addressee(conv: &Conversation, turn: usize) -> Option<&str> {
    let me = &conv.utterances[turn].speaker;
    let other = |u: &&crate::corpus::Utterance| &u.speaker != me;
    conv.utterances[..turn]
        .iter()
        .rev()
        .find(other)
        .or_else(|| conv.utterances[turn + 1..].iter().find(other))
        .map(|u| u.speaker.as_str())
}

/// Whitespace-separated words of `text` with their byte ranges.
fn words(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

/// Rewrites every utterance of `conv`; whitespace and non-pronoun words are
/// kept byte for byte.
pub fn transform_pov(conv: &Conversation, coref: &[CorefCluster]) -> Vec<String> {
    conv.utterances
        .iter()
        .enumerate()
        .map(|(t, utt)| {
            let addressee = addressee(conv, t);
            let spans = words(&utt.text);
            // canonical name for each word covered by a mention in this turn
            let mut canon: Vec<Option<&str>> = vec![None; spans.len()];
            for m in coref.iter().flatten().filter(|m| m.turn == t) {
                for slot in canon.iter_mut().take(m.end).skip(m.start) {
                    *slot = Some(m.canonical.as_str());
                }
            }
            let mut out = String::with_capacity(utt.text.len());
            let mut last = 0;
            let mut warned = false;
            for (w, range) in spans.iter().enumerate() {
                out.push_str(&utt.text[last..range.start]);
                last = range.end;
                let word = &utt.text[range.clone()];
                let (pre, core, post) = split_punct(word);
                let mut replaced = substitute(core, Person::First, &utt.speaker);
                if replaced.is_none() {
                    match addressee {
                        Some(a) => replaced = substitute(core, Person::Second, a),
                        None if !warned && substitute(core, Person::Second, "").is_some() => {
                            log::warn!(
                                "conversation `{}` turn {t}: no addressee, second-person pronoun kept",
                                conv.id
                            );
                            warned = true;
                        }
                        None => {}
                    }
                }
                if replaced.is_none() {
                    if let Some(name) = canon[w] {
                        replaced = substitute(core, Person::Third, name);
                    }
                }
                match replaced {
                    Some(r) => {
                        out.push_str(pre);
                        out.push_str(&r);
                        out.push_str(post);
                    }
                    None => out.push_str(word),
                }
            }
            out.push_str(&utt.text[last..]);
            out
        })
        .collect()
}
