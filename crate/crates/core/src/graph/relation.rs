use std::fmt;
use std::str::FromStr;

/// Discourse relation between two utterances, plus the reserved self-loop
/// label that graph construction attaches to every node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiscourseRelation {
    Comment,
    ClarificationQuestion,
    Elaboration,
    Acknowledgement,
    Continuation,
    Explanation,
    Conditional,
    QuestionAnswerPair,
    Alternation,
    QElab,
    Result,
    Background,
    Narration,
    Correction,
    Parallel,
    Contrast,
    SelfLoop,
}

impl DiscourseRelation {
    /// The sixteen relation types an annotation may carry.
    pub const ANNOTATED: [DiscourseRelation; 16] = [
        Self::Comment,
        Self::ClarificationQuestion,
        Self::Elaboration,
        Self::Acknowledgement,
        Self::Continuation,
        Self::Explanation,
        Self::Conditional,
        Self::QuestionAnswerPair,
        Self::Alternation,
        Self::QElab,
        Self::Result,
        Self::Background,
        Self::Narration,
        Self::Correction,
        Self::Parallel,
        Self::Contrast,
    ];

    /// Number of distinct labels including [`DiscourseRelation::SelfLoop`].
    pub const COUNT: usize = 17;

    /// Dense id in `0..17`; `SelfLoop` is 16.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            16 => Some(Self::SelfLoop),
            _ => Self::ANNOTATED.get(i).copied(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Comment => "Comment",
            Self::ClarificationQuestion => "ClarificationQuestion",
            Self::Elaboration => "Elaboration",
            Self::Acknowledgement => "Acknowledgement",
            Self::Continuation => "Continuation",
            Self::Explanation => "Explanation",
            Self::Conditional => "Conditional",
            Self::QuestionAnswerPair => "QuestionAnswerPair",
            Self::Alternation => "Alternation",
            Self::QElab => "QElab",
            Self::Result => "Result",
            Self::Background => "Background",
            Self::Narration => "Narration",
            Self::Correction => "Correction",
            Self::Parallel => "Parallel",
            Self::Contrast => "Contrast",
            Self::SelfLoop => "SelfLoop",
        }
    }
}

impl fmt::Display for DiscourseRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnknownRelation(pub String);

impl fmt::Display for UnknownRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown discourse relation `{}`", self.0)
    }
}

impl std::error::Error for UnknownRelation {}

/// Case-insensitive over the sixteen annotated names. `SelfLoop` is not
/// accepted: it never appears in input annotations.
impl FromStr for DiscourseRelation {
    type Err = UnknownRelation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ANNOTATED
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownRelation(s.to_string()))
    }
}
