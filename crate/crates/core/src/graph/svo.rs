//! Rule-based who-doing-what extraction, a stand-in for a real open
//! information extraction system.
//!
//! Each sentence (split at `.`, `!`, `?`) is scanned for the first run of
//! capitalized words that are neither function words nor verbs (who), the
//! next run of verb-lexicon words after it (doing), and the words after that
//! up to the next clause punctuation (what). Clitics are detached and
//! expanded, so "Amanda'll bring" reads as "Amanda" + "will bring".

use std::collections::HashSet;
use std::sync::LazyLock;

use crate::corpus::{ActionTriple, TripleSource};

/// Capitalized words that never start a subject.
const NOT_SUBJECT: &[&str] = &[
    "i", "you", "we", "they", "he", "she", "it", "ok", "okay", "yes", "yeah", "no", "nope", "hi", "hey", "hello",
    "thanks", "thank", "sure", "well", "so", "but", "and", "or", "oh", "the", "a", "an", "this", "that", "these",
    "those", "what", "when", "where", "why", "how", "who", "which", "if", "then", "maybe", "please", "great", "cool",
    "fine", "good", "lol", "haha", "sorry", "bye", "see", "just", "also", "now", "there", "here", "let", "let's",
];

const AUXILIARIES: &[&str] = &[
    "will", "would", "can", "could", "shall", "should", "may", "might", "must", "do", "does", "did", "is", "are",
    "was", "were", "am", "be", "been", "being", "have", "has", "had", "gonna", "wanna", "gotta", "not", "never",
    "also", "already", "still", "just", "to",
];

const REGULAR: &[&str] = &[
    "ask", "answer", "arrive", "book", "borrow", "bring", "buy", "call", "cancel", "check", "clean", "cook", "come",
    "deliver", "discuss", "drive", "eat", "email", "fetch", "find", "finish", "fix", "forget", "get", "give", "go",
    "help", "invite", "join", "keep", "know", "leave", "lend", "like", "love", "make", "meet", "miss", "move", "need",
    "order", "pay", "pick", "plan", "play", "prepare", "remind", "rent", "return", "see", "sell", "send", "share",
    "show", "sing", "start", "stay", "take", "talk", "tell", "text", "think", "try", "visit", "wait", "want", "watch",
    "work", "write", "agree", "bake", "organize", "read", "reserve", "print", "repair", "paint", "walk", "use",
    "phone", "feed", "wash",
];

const IRREGULAR: &[&str] = &[
    "bought",
    "brought",
    "came",
    "drove",
    "ate",
    "found",
    "forgot",
    "forgotten",
    "got",
    "gotten",
    "gave",
    "given",
    "went",
    "gone",
    "kept",
    "knew",
    "known",
    "left",
    "lent",
    "made",
    "met",
    "paid",
    "saw",
    "seen",
    "sold",
    "sent",
    "showed",
    "shown",
    "sang",
    "sung",
    "took",
    "taken",
    "told",
    "thought",
    "wrote",
    "written",
    "read",
    "fed",
    "stopped",
    "planned",
    "shopped",
    "stop",
    "shop",
];

fn inflections(base: &str) -> Vec<String> {
    let stem_e = base.strip_suffix('e').filter(|s| !s.ends_with('e'));
    let consonant_y = base
        .strip_suffix('y')
        .filter(|s| !s.ends_with(['a', 'e', 'i', 'o', 'u']));
    let third = if let Some(s) = consonant_y {
        format!("{s}ies")
    } else if base.ends_with(['s', 'x', 'o']) || base.ends_with("sh") || base.ends_with("ch") {
        format!("{base}es")
    } else {
        format!("{base}s")
    };
    let past = match (stem_e, consonant_y) {
        (_, Some(s)) => format!("{s}ied"),
        (Some(_), _) => format!("{base}d"),
        _ => format!("{base}ed"),
    };
    let ing = match stem_e {
        Some(s) => format!("{s}ing"),
        None => format!("{base}ing"),
    };
    vec![base.to_string(), third, past, ing]
}

static VERBS: LazyLock<HashSet<String>> = LazyLock::new(|| {
    REGULAR
        .iter()
        .flat_map(|b| inflections(b))
        .chain(AUXILIARIES.iter().chain(IRREGULAR).map(|s| s.to_string()))
        .collect()
});

pub fn is_verb(word: &str) -> bool {
    VERBS.contains(&word.to_lowercase())
}

fn expand_clitic(clitic: &str) -> Option<&'static str> {
    Some(match clitic.to_lowercase().as_str() {
        "ll" => "will",
        "re" => "are",
        "ve" => "have",
        "m" => "am",
        "d" => "would",
        _ => return None,
    })
}

#[derive(Debug)]
struct Word {
    text: String,
    /// Clause punctuation followed this word.
    ends_clause: bool,
}

fn sentence_words(sentence: &str) -> Vec<Word> {
    let mut out = Vec::new();
    for raw in sentence.split_whitespace() {
        let core = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        let core = core.trim_matches('\'');
        let ends_clause = raw.ends_with([',', ';', ':']);
        if core.is_empty() {
            if let Some(last) = out.last_mut() {
                let last: &mut Word = last;
                last.ends_clause |= ends_clause;
            }
            continue;
        }
        let split = core
            .find('\'')
            .and_then(|p| expand_clitic(&core[p + 1..]).map(|e| (&core[..p], e)));
        match split {
            Some((head, expanded)) => {
                out.push(Word {
                    text: head.to_string(),
                    ends_clause: false,
                });
                out.push(Word {
                    text: expanded.to_string(),
                    ends_clause,
                });
            }
            None => out.push(Word {
                text: core.to_string(),
                ends_clause,
            }),
        }
    }
    out
}

fn is_subject(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase)
        && !NOT_SUBJECT.contains(&word.to_lowercase().as_str())
        && !is_verb(word)
}

fn extract_sentence(sentence: &str, utterance: usize) -> Option<ActionTriple> {
    let words = sentence_words(sentence);
    let start = words.iter().position(|w| is_subject(&w.text))?;
    let mut end = start + 1;
    while end < words.len() && !words[end - 1].ends_clause && is_subject(&words[end].text) {
        end += 1;
    }
    let v_start = end + words[end..].iter().position(|w| is_verb(&w.text))?;
    let mut v_end = v_start + 1;
    while v_end < words.len() && !words[v_end - 1].ends_clause && is_verb(&words[v_end].text) {
        v_end += 1;
    }
    let mut what = Vec::new();
    if !words[v_end - 1].ends_clause {
        for w in &words[v_end..] {
            what.push(w.text.as_str());
            if w.ends_clause {
                break;
            }
        }
    }
    let join = |ws: &[Word]| ws.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
    Some(ActionTriple {
        who: join(&words[start..end]),
        doing: join(&words[v_start..v_end]),
        what: what.join(" "),
        utterance,
        source: TripleSource::Heuristic,
    })
}

/// At most one triple per sentence; triples are marked
/// [`TripleSource::Heuristic`].
pub fn naive_svo_extract(rewritten: &[String]) -> Vec<ActionTriple> {
    rewritten
        .iter()
        .enumerate()
        .flat_map(|(u, text)| text.split(['.', '!', '?']).filter_map(move |s| extract_sentence(s, u)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(s: &str) -> Vec<(String, String, String)> {
        naive_svo_extract(&[s.to_string()])
            .into_iter()
            .map(|t| (t.who, t.doing, t.what))
            .collect()
    }

    fn t(a: &str, b: &str, c: &str) -> (String, String, String) {
        (a.into(), b.into(), c.into())
    }

    #[test]
    fn traced_examples() {
        assert_eq!(one("Simon will fetch tissues"), [t("Simon", "will fetch", "tissues")]);
        assert!(one("ok").is_empty());
        assert_eq!(one("Helen calls"), [t("Helen", "calls", "")]);
    }

    #[test]
    fn clitic_and_clause_boundary() {
        assert_eq!(
            one("Amanda'll bring cakes to Jerry tomorrow, ok?"),
            [t("Amanda", "will bring", "cakes to Jerry tomorrow")]
        );
        assert_eq!(one("Ok. Tom paid. Yes"), [t("Tom", "paid", "")]);
    }

    #[test]
    fn inflection_rules() {
        for w in ["fixes", "baked", "baking", "invites", "watches", "tries", "tried"] {
            assert!(is_verb(w), "{w}");
        }
        assert!(!is_verb("tissues"));
        let triples = naive_svo_extract(&["Tom fixed it".into(), "hm".into(), "Ann texts Bob".into()]);
        assert_eq!(triples.len(), 2);
        assert_eq!(triples[1].utterance, 2);
        assert!(triples.iter().all(|t| t.source == TripleSource::Heuristic));
    }
}
