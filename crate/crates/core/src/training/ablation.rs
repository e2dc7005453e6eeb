use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{greedy_decode, train};
use crate::config::{Config, FusionStrategy};
use crate::graph::random_graph;
use crate::model::{Example, Model};
use crate::rouge::{rouge_all, RougeTriple};
use crate::tensor::Tape;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// The base configuration unchanged.
    Baseline,
    /// Discourse edges and relations redrawn at random, edge counts kept.
    RandomGraph,
    Fusion(FusionStrategy),
    RezeroInit(f64),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Self::Baseline => "baseline".into(),
            Self::RandomGraph => "random-graph".into(),
            Self::Fusion(s) => s.name().into(),
            Self::RezeroInit(a) => format!("rezero-{a}"),
        }
    }

    pub fn apply(&self, base: &Config) -> Config {
        let mut c = base.clone();
        match self {
            Self::Fusion(s) => c.decoder.fusion_strategy = *s,
            Self::RezeroInit(a) => c.decoder.rezero_init = *a,
            Self::Baseline | Self::RandomGraph => {}
        }
        c
    }

    /// Comma-separated variant names.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        s.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "random-graph" | "random-discourse-graph" => Ok(Self::RandomGraph),
            "rezero-0" => Ok(Self::RezeroInit(0.0)),
            "rezero-1" => Ok(Self::RezeroInit(1.0)),
            _ => s
                .parse::<FusionStrategy>()
                .map(Self::Fusion)
                .map_err(|_| Error::Invalid(format!("unknown ablation variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// Held-out corpus means.
    pub rouge: RougeTriple,
    pub final_loss: f64,
    pub final_alphas: Vec<f64>,
    /// `(step, per-layer gates)` from the train report, step 0 first.
    pub alpha_trace: Vec<(usize, Vec<f64>)>,
    /// `(conversation id, annotated edges before, after)` over train and
    /// held-out examples.
    pub edge_counts: Vec<(String, usize, usize)>,
    /// Teacher-forced logits of the first held-out example, flattened.
    pub probe_logits: Vec<f64>,
}

fn randomize(examples: &[Example], seed: u64) -> Vec<Example> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut ex = ex.clone();
            ex.discourse = random_graph(&ex.discourse, seed.wrapping_add(i as u64));
            ex
        })
        .collect()
}

fn probe(model: &Model, ex: &Example) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, ex)?;
    let t = &ex.target;
    let prefix = if t.len() > 1 { &t[..t.len() - 1] } else { &t[..] };
    let out = model.decode_forward(&mut tape, &enc, prefix)?;
    Ok(tape.value(out.logits).data().to_vec())
}

/// Trains every variant from the same seed and schedule and scores greedy
/// summaries of `heldout`.
pub fn run_ablation(
    train_set: &[Example],
    heldout: &[Example],
    base: &Config,
    variants: &[Variant],
    vocab_size: usize,
) -> Result<Vec<AblationRow>> {
    if heldout.is_empty() && !variants.is_empty() {
        return Err(Error::Invalid("ablation needs at least one held-out example".into()));
    }
    variants
        .iter()
        .map(|variant| {
            let config = variant.apply(base);
            let (tr, ho) = match variant {
                Variant::RandomGraph => (
                    randomize(train_set, config.train.seed),
                    randomize(heldout, config.train.seed.wrapping_add(train_set.len() as u64)),
                ),
                _ => (train_set.to_vec(), heldout.to_vec()),
            };
            let edge_counts = train_set
                .iter()
                .chain(heldout)
                .zip(tr.iter().chain(&ho))
                .map(|(a, b)| {
                    (
                        a.id.clone(),
                        a.discourse.annotated_edge_count(),
                        b.discourse.annotated_edge_count(),
                    )
                })
                .collect();
            let mut model = Model::init(&config, vocab_size, config.train.seed)?;
            log::info!("ablation `{variant}`: training {} steps", config.train.max_steps);
            let report = train(&mut model, &tr)?;
            let scores = ho
                .iter()
                .map(|ex| {
                    let hyp = greedy_decode(&model, ex, config.max_decode_len)?;
                    Ok(rouge_all(&hyp.tokens, ex.reference_tokens())?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow {
                variant: *variant,
                rouge: RougeTriple::mean(&scores),
                final_loss: report.final_loss,
                final_alphas: model.alphas(),
                alpha_trace: report.records.iter().map(|r| (r.step, r.alphas.clone())).collect(),
                edge_counts,
                probe_logits: probe(&model, &ho[0])?,
            })
        })
        .collect()
}

/// Tab-separated table, one row per variant. Gate columns list the final
/// per-layer values.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s =
        String::from("variant\tloss\tr1_f\tr1_p\tr1_r\tr2_f\tr2_p\tr2_r\trl_f\trl_p\trl_r\talpha_init\talpha_final\n");
    let fmt_alphas = |a: &[f64]| {
        if a.is_empty() {
            "-".to_string()
        } else {
            a.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
        }
    };
    for r in rows {
        let _ = write!(s, "{}\t{:.4}", r.variant, r.final_loss);
        for m in [r.rouge.r1, r.rouge.r2, r.rouge.rl] {
            let _ = write!(s, "\t{:.4}\t{:.4}\t{:.4}", m.f, m.p, m.r);
        }
        let init = r.alpha_trace.first().map(|(_, a)| a.as_slice()).unwrap_or(&[]);
        let _ = writeln!(s, "\t{}\t{}", fmt_alphas(init), fmt_alphas(&r.final_alphas));
    }
    s
}
