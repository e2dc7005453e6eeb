use crate::corpus::Vocabulary;
use crate::model::{Encoded, Example, Model};
use crate::tensor::Tape;
use crate::{Error, Result};

/// Generated summary. `log_probs` has one entry per decoding step, so it
/// is one longer than `tokens` when decoding stopped at end-of-sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryHypothesis {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

/// Next-token logits given the tokens generated so far (starting with the
/// summary-start id).
pub trait NextTokenScorer {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Argmax decoding; ties go to the lowest id.
pub fn greedy_decode_with<S: NextTokenScorer>(scorer: &mut S, max_len: usize) -> Result<SummaryHypothesis> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let mut prefix = vec![Vocabulary::SUM_START];
    let mut log_probs = Vec::new();
    while prefix.len() <= max_len {
        let logits = scorer.next_logits(&prefix)?;
        let (best, &top) = logits
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, v)| match acc {
                Some((_, b)) if *v <= *b => acc,
                _ => Some((i, v)),
            })
            .ok_or_else(|| Error::Invalid("empty logits".into()))?;
        let lse = top + logits.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        log_probs.push(top - lse);
        if best == Vocabulary::EOS {
            break;
        }
        prefix.push(best);
    }
    Ok(SummaryHypothesis {
        tokens: prefix[1..].to_vec(),
        log_probs,
    })
}

/// Scores with a model; the encoder runs once.
pub struct ModelScorer<'a> {
    model: &'a Model,
    tape: Tape,
    encoded: Encoded,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, example: &Example) -> Result<Self> {
        let mut tape = Tape::new();
        let encoded = model.encode(&mut tape, example)?;
        Ok(Self { model, tape, encoded })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let out = self.model.decode_forward(&mut self.tape, &self.encoded, prefix)?;
        let logits = self.tape.value(out.logits);
        Ok(logits.row(prefix.len() - 1).to_vec())
    }
}

pub fn greedy_decode(model: &Model, example: &Example, max_len: usize) -> Result<SummaryHypothesis> {
    let mut scorer = ModelScorer::new(model, example)?;
    greedy_decode_with(&mut scorer, max_len)
}
