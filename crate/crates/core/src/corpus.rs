//! Conversation data model, annotation ingestion, tokenizer and vocabulary.
//!
//! Corpora are line-delimited JSON:
//!
//! ```text
//! conversations: {"id": str, "turns": [{"speaker": str, "text": str}], "summary": str?}
//! annotations:   {"id": str,
//!                 "discourse_edges": [{"src": int, "dst": int, "rel": str}],
//!                 "coref": [[{"turn": int, "start": int, "end": int, "canon": str}]],
//!                 "triples": [{"who": str, "doing": str, "what": str, "turn": int}]}
//! ```
//!
//! Coreference spans index the whitespace-separated words of a turn's raw
//! text, `start` inclusive and `end` exclusive.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DiscourseRelation;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: annotation for unknown conversation id `{id}`")]
    UnknownConversation { line: usize, id: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("conversation `{id}`: {what}")]
    OutOfRange { id: String, what: String },
    #[error("line {line}: {source}")]
    Relation {
        line: usize,
        #[source]
        source: crate::graph::UnknownRelation,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("min_freq must be at least 1")]
    InvalidMinFreq,
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    /// Token ids, starting with [`Vocabulary::UTT_START`] once tokenized.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub reference_summary: Option<String>,
}

impl Conversation {
    /// Builds a conversation from `(speaker, text)` turns.
    pub fn new<S: Into<String>>(
        id: impl Into<String>,
        turns: impl IntoIterator<Item = (S, S)>,
        summary: Option<&str>,
    ) -> Self {
        let utterances = turns
            .into_iter()
            .enumerate()
            .map(|(index, (speaker, text))| Utterance {
                index,
                speaker: speaker.into(),
                text: text.into(),
                tokens: Vec::new(),
            })
            .collect();
        Self {
            id: id.into(),
            utterances,
            reference_summary: summary.map(str::to_string),
        }
    }

    pub fn speakers(&self) -> HashSet<&str> {
        self.utterances.iter().map(|u| u.speaker.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscourseAnnotation {
    pub src: usize,
    pub dst: usize,
    pub relation: DiscourseRelation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorefMention {
    pub turn: usize,
    pub start: usize,
    pub end: usize,
    pub canonical: String,
}

/// Mentions that refer to one entity.
pub type CorefCluster = Vec<CorefMention>;

/// Whether a triple came from an annotation file or the rule-based fallback.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TripleSource {
    #[default]
    Annotated,
    Heuristic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionTriple {
    pub who: String,
    pub doing: String,
    /// Empty for a subject-predicate pair.
    pub what: String,
    pub utterance: usize,
    pub source: TripleSource,
}

impl ActionTriple {
    pub fn new(who: &str, doing: &str, what: &str, utterance: usize) -> Self {
        Self {
            who: who.to_string(),
            doing: doing.to_string(),
            what: what.to_string(),
            utterance,
            source: TripleSource::Annotated,
        }
    }
}

/// Outputs of the external annotators for one conversation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotationBundle {
    pub discourse_edges: Vec<DiscourseAnnotation>,
    pub coref_clusters: Vec<CorefCluster>,
    pub action_triples: Vec<ActionTriple>,
}

// ----- wire records -----

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    speaker: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversationRecord {
    id: String,
    turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    summary: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    src: usize,
    dst: usize,
    rel: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MentionRecord {
    turn: usize,
    start: usize,
    end: usize,
    canon: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripleRecord {
    who: String,
    doing: String,
    #[serde(default)]
    what: String,
    turn: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    #[serde(default)]
    discourse_edges: Vec<EdgeRecord>,
    #[serde(default)]
    coref: Vec<Vec<MentionRecord>>,
    #[serde(default)]
    triples: Vec<TripleRecord>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-blank lines with their 1-based line numbers.
fn records<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(e) => Some(Err(CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })),
    })
}

fn parse<T: for<'de> Deserialize<'de>>(line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
        line,
        message: e.to_string(),
    })
}

/// Reads a conversation file.
pub fn read_conversations<R: BufRead>(reader: R) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in records(reader) {
        let (line, text) = rec?;
        let rec: ConversationRecord = parse(line, &text)?;
        if rec.turns.is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "field `turns` must hold at least one turn".into(),
            });
        }
        if let Some(t) = rec.turns.iter().position(|t| t.speaker.trim().is_empty()) {
            return Err(CorpusError::Malformed {
                line,
                message: format!("turn {t} has an empty `speaker`"),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: rec.id });
        }
        out.push(Conversation::new(
            rec.id,
            rec.turns.into_iter().map(|t| (t.speaker, t.text)),
            rec.summary.as_deref(),
        ));
    }
    Ok(out)
}

/// Reads an annotation file into `(line, conversation id, bundle)` entries.
pub fn read_annotations<R: BufRead>(reader: R) -> Result<Vec<(usize, String, AnnotationBundle)>> {
    let mut out = Vec::new();
    for rec in records(reader) {
        let (line, text) = rec?;
        let rec: AnnotationRecord = parse(line, &text)?;
        let discourse_edges = rec
            .discourse_edges
            .into_iter()
            .map(|e| {
                let relation = e.rel.parse().map_err(|source| CorpusError::Relation { line, source })?;
                Ok(DiscourseAnnotation {
                    src: e.src,
                    dst: e.dst,
                    relation,
                })
            })
            .collect::<Result<_>>()?;
        let coref_clusters = rec
            .coref
            .into_iter()
            .map(|c| {
                c.into_iter()
                    .map(|m| CorefMention {
                        turn: m.turn,
                        start: m.start,
                        end: m.end,
                        canonical: m.canon,
                    })
                    .collect()
            })
            .collect();
        let action_triples = rec
            .triples
            .into_iter()
            .map(|t| ActionTriple::new(&t.who, &t.doing, &t.what, t.turn))
            .collect();
        out.push((
            line,
            rec.id,
            AnnotationBundle {
                discourse_edges,
                coref_clusters,
                action_triples,
            },
        ));
    }
    Ok(out)
}

/// Checks that every index in `bundle` is in range for `conv`.
pub fn validate_annotations(conv: &Conversation, bundle: &AnnotationBundle) -> Result<()> {
    let n = conv.utterances.len();
    let bad = |what: String| CorpusError::OutOfRange {
        id: conv.id.clone(),
        what,
    };
    for e in &bundle.discourse_edges {
        if e.src >= n || e.dst >= n {
            return Err(bad(format!(
                "discourse edge {}->{} out of range for {n} utterances",
                e.src, e.dst
            )));
        }
    }
    for (c, cluster) in bundle.coref_clusters.iter().enumerate() {
        if cluster.is_empty() {
            return Err(bad(format!("coreference cluster {c} is empty")));
        }
        for m in cluster {
            let words = conv
                .utterances
                .get(m.turn)
                .map(|u| u.text.split_whitespace().count())
                .ok_or_else(|| bad(format!("mention turn {} out of range", m.turn)))?;
            if m.start >= m.end || m.end > words {
                return Err(bad(format!(
                    "mention span {}..{} invalid for turn {} with {words} words",
                    m.start, m.end, m.turn
                )));
            }
            if m.canonical.trim().is_empty() {
                return Err(bad(format!("cluster {c} has an empty canonical name")));
            }
        }
    }
    for t in &bundle.action_triples {
        if t.utterance >= n {
            return Err(bad(format!("triple turn {} out of range", t.utterance)));
        }
    }
    Ok(())
}

/// Loads a conversation file and, optionally, its annotation sidecar joined
/// by conversation id.
pub fn load_corpus(
    path: &Path,
    annotations_path: Option<&Path>,
) -> Result<Vec<(Conversation, Option<AnnotationBundle>)>> {
    let conversations = read_conversations(open(path)?)?;
    let mut bundles: HashMap<String, AnnotationBundle> = HashMap::new();
    if let Some(ap) = annotations_path {
        let known: HashSet<&str> = conversations.iter().map(|c| c.id.as_str()).collect();
        for (line, id, bundle) in read_annotations(open(ap)?)? {
            if !known.contains(id.as_str()) {
                return Err(CorpusError::UnknownConversation { line, id });
            }
            if bundles.contains_key(&id) {
                return Err(CorpusError::DuplicateId { line, id });
            }
            bundles.insert(id, bundle);
        }
    }
    conversations
        .into_iter()
        .map(|c| {
            let bundle = bundles.remove(&c.id);
            if let Some(b) = &bundle {
                validate_annotations(&c, b)?;
            }
            Ok((c, bundle))
        })
        .collect()
}

pub fn write_conversations<W: Write>(mut w: W, corpus: &[Conversation]) -> std::io::Result<()> {
    for c in corpus {
        let rec = ConversationRecord {
            id: c.id.clone(),
            turns: c
                .utterances
                .iter()
                .map(|u| TurnRecord {
                    speaker: u.speaker.clone(),
                    text: u.text.clone(),
                })
                .collect(),
            summary: c.reference_summary.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn write_annotations<W: Write>(mut w: W, bundles: &[(String, AnnotationBundle)]) -> std::io::Result<()> {
    for (id, b) in bundles {
        let rec = AnnotationRecord {
            id: id.clone(),
            discourse_edges: b
                .discourse_edges
                .iter()
                .map(|e| EdgeRecord {
                    src: e.src,
                    dst: e.dst,
                    rel: e.relation.name().to_string(),
                })
                .collect(),
            coref: b
                .coref_clusters
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|m| MentionRecord {
                            turn: m.turn,
                            start: m.start,
                            end: m.end,
                            canon: m.canonical.clone(),
                        })
                        .collect()
                })
                .collect(),
            triples: b
                .action_triples
                .iter()
                .map(|t| TripleRecord {
                    who: t.who.clone(),
                    doing: t.doing.clone(),
                    what: t.what.clone(),
                    turn: t.utterance,
                })
                .collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

// ----- tokenizer and vocabulary -----

/// Lowercases, splits on whitespace and detaches every non-alphanumeric
/// character as its own token. Total: any string yields a (possibly empty)
/// token list.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// The normalized text that detokenization reproduces.
pub fn normalize_text(text: &str) -> String {
    split_tokens(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const UTT_START: usize = 2;
    pub const SUM_START: usize = 3;
    pub const EOS: usize = 4;
    pub const SEP: usize = 5;
    pub const SPECIALS: [&'static str; 6] = ["<pad>", "<unk>", "<s>", "<sum>", "</s>", "<sep>"];

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::SPECIALS.len() || tokens.iter().zip(Self::SPECIALS).any(|(a, b)| a != b) {
            return Err(CorpusError::InvalidVocabulary(
                "special tokens must occupy the first six ids".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(CorpusError::InvalidVocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Id of `token`, or [`Vocabulary::UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < Self::SPECIALS.len()
    }

    /// Content ids of `text` (no utterance-start marker).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds a vocabulary over utterances and reference summaries. Ids follow
/// first occurrence in corpus order after the six special tokens.
pub fn build_vocabulary(corpus: &[Conversation], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    if min_freq == 0 {
        return Err(CorpusError::InvalidMinFreq);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let texts = corpus.iter().flat_map(|c| {
        c.utterances
            .iter()
            .map(|u| u.text.as_str())
            .chain(c.reference_summary.as_deref())
    });
    for text in texts {
        for tok in split_tokens(text) {
            let n = counts.entry(tok.clone()).or_insert(0);
            if *n == 0 {
                order.push(tok);
            }
            *n += 1;
        }
    }
    let mut tokens: Vec<String> = Vocabulary::SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(order.into_iter().filter(|t| counts[t] >= min_freq));
    Vocabulary::from_tokens(tokens)
}

/// Fills every utterance's token ids: utterance-start marker then content.
pub fn tokenize(conv: &Conversation, vocab: &Vocabulary) -> Conversation {
    let mut out = conv.clone();
    for u in &mut out.utterances {
        u.tokens = std::iter::once(Vocabulary::UTT_START)
            .chain(vocab.encode(&u.text))
            .collect();
    }
    out
}
