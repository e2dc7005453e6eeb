//! Finite-difference checks of every differentiable tensor op and of the
//! full model loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{ActionTriple, AnnotationBundle, Conversation, DiscourseAnnotation, Vocabulary};
use crate::graph::DiscourseRelation;
use crate::model::{prepare_example, Example, Model, TripleSourceMode};
use crate::tensor::{grad_check, grad_check_on, grad_check_params, GradCheckReport, Mask, Tape, Tensor, Var};
use crate::Result;

/// Step for the per-op checks.
pub const OP_EPS: f64 = 1e-5;
/// Step for the whole-model check.
pub const MODEL_EPS: f64 = 1e-4;

type Check = fn(&mut ChaCha8Rng) -> crate::tensor::Result<GradCheckReport>;

/// `sum(y * w)` with fixed random `w`, so that no gradient is trivially
/// constant across coordinates.
fn wsum(t: &mut Tape, y: Var, w: &Tensor) -> crate::tensor::Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(2..5), rng.random_range(2..5))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Unary elementwise op on `[n, m]`. Inputs stay clear of kinks, and are
/// made positive for ops defined only there.
fn unary(
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape, Var) -> crate::tensor::Result<Var>,
    positive: bool,
) -> crate::tensor::Result<GradCheckReport> {
    let (n, m) = dims(rng);
    let mut x = randn(&[n, m], rng);
    for v in x.data_mut() {
        if positive {
            *v = v.abs() + 0.5;
        } else if v.abs() < 1e-2 {
            *v += 0.1;
        }
    }
    let w = randn(&[n, m], rng);
    grad_check(
        |t, x| {
            let y = f(t, x)?;
            wsum(t, y, &w)
        },
        &x,
        OP_EPS,
    )
}

/// Binary op, checked in each argument with the other held constant.
fn binary(
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape, Var, Var) -> crate::tensor::Result<Var>,
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    b_away_from_zero: bool,
) -> crate::tensor::Result<GradCheckReport> {
    let a = randn(a_shape, rng);
    let mut b = randn(b_shape, rng);
    if b_away_from_zero {
        for v in b.data_mut() {
            *v = v.signum() * (v.abs() + 0.5);
        }
    }
    let w = randn(out_shape, rng);
    let mut r = grad_check(
        |t, x| {
            let bv = t.constant(b.clone());
            let y = f(t, x, bv)?;
            wsum(t, y, &w)
        },
        &a,
        OP_EPS,
    )?;
    r.merge(&grad_check(
        |t, x| {
            let av = t.constant(a.clone());
            let y = f(t, av, x)?;
            wsum(t, y, &w)
        },
        &b,
        OP_EPS,
    )?);
    Ok(r)
}

fn elementwise_binary(
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape, Var, Var) -> crate::tensor::Result<Var>,
    away: bool,
) -> crate::tensor::Result<GradCheckReport> {
    let (n, m) = dims(rng);
    // the second operand broadcasts along rows
    binary(rng, f, &[n, m], &[1, m], &[n, m], away)
}

const OPS: &[(&str, Check)] = &[
    ("add", |r| elementwise_binary(r, |t, a, b| t.add(a, b), false)),
    ("sub", |r| elementwise_binary(r, |t, a, b| t.sub(a, b), false)),
    ("mul", |r| elementwise_binary(r, |t, a, b| t.mul(a, b), false)),
    ("div", |r| elementwise_binary(r, |t, a, b| t.div(a, b), true)),
    ("neg", |r| unary(r, |t, x| Ok(t.neg(x)), false)),
    ("scale", |r| unary(r, |t, x| Ok(t.scale(x, -1.7)), false)),
    ("exp", |r| unary(r, |t, x| Ok(t.exp(x)), false)),
    ("log", |r| unary(r, |t, x| Ok(t.log(x)), true)),
    ("tanh", |r| unary(r, |t, x| Ok(t.tanh(x)), false)),
    ("gelu", |r| unary(r, |t, x| Ok(t.gelu(x)), false)),
    ("elu", |r| unary(r, |t, x| Ok(t.elu(x)), false)),
    ("leaky_relu", |r| unary(r, |t, x| Ok(t.leaky_relu(x, 0.2)), false)),
    ("dropout", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m], rng);
        let w = randn(&[n, m], rng);
        grad_check_on(
            || Tape::training(5),
            |t, x| {
                let y = t.dropout(x, 0.3)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("matmul", |rng| {
        let (n, k) = dims(rng);
        let m = rng.random_range(2..5);
        binary(rng, |t, a, b| t.matmul(a, b), &[n, k], &[k, m], &[n, m], false)
    }),
    ("matmul_batched", |rng| {
        let (n, k) = dims(rng);
        binary(rng, |t, a, b| t.matmul(a, b), &[2, n, k], &[k, 3], &[2, n, 3], false)
    }),
    ("softmax", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m], rng);
        let w = randn(&[n, m], rng);
        let mut r = grad_check(
            |t, x| {
                let y = t.softmax(x, 1, None)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )?;
        r.merge(&grad_check(
            |t, x| {
                let y = t.softmax(x, 0, None)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )?);
        let x = randn(&[n, n], rng);
        let w = randn(&[n, n], rng);
        let mask = Mask::causal(n);
        r.merge(&grad_check(
            |t, x| {
                let y = t.softmax(x, 1, Some(&mask))?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )?);
        Ok(r)
    }),
    ("layer_norm", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m + 1], rng);
        let g = randn(&[m + 1], rng);
        let b = randn(&[m + 1], rng);
        let w = randn(&[n, m + 1], rng);
        let mut r = grad_check(
            |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let y = t.layer_norm(x, g, b, 1e-5)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )?;
        r.merge(&grad_check(
            |t, g| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = t.layer_norm(x, g, b, 1e-5)?;
                wsum(t, y, &w)
            },
            &g,
            OP_EPS,
        )?);
        r.merge(&grad_check(
            |t, b| {
                let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
                let y = t.layer_norm(x, g, b, 1e-5)?;
                wsum(t, y, &w)
            },
            &b,
            OP_EPS,
        )?);
        Ok(r)
    }),
    ("sum", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m], rng);
        grad_check(
            |t, x| {
                let s = t.sum(x);
                t.mul(s, s)
            },
            &x,
            OP_EPS,
        )
    }),
    ("sum_axis", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m, 2], rng);
        let w = randn(&[n, 2], rng);
        grad_check(
            |t, x| {
                let y = t.sum_axis(x, 1)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("mean_axis", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m], rng);
        let w = randn(&[m], rng);
        grad_check(
            |t, x| {
                let y = t.mean_axis(x, 0)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("reshape", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m], rng);
        let w = randn(&[n * m], rng);
        grad_check(
            |t, x| {
                let y = t.reshape(x, vec![n * m])?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("permute", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m, 3], rng);
        let w = randn(&[3, n, m], rng);
        grad_check(
            |t, x| {
                let y = t.permute(x, &[2, 0, 1])?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("transpose", |rng| {
        let (n, m) = dims(rng);
        let x = randn(&[n, m], rng);
        let w = randn(&[m, n], rng);
        grad_check(
            |t, x| {
                let y = t.transpose(x)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("concat", |rng| {
        let (n, m) = dims(rng);
        let other = randn(&[n, 2], rng);
        let w = randn(&[n, m + 2], rng);
        let w0 = randn(&[2 * n, m], rng);
        let x = randn(&[n, m], rng);
        let mut r = grad_check(
            |t, x| {
                let o = t.constant(other.clone());
                let y = t.concat(&[x, o], 1)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )?;
        r.merge(&grad_check(
            |t, x| {
                let y = t.concat(&[x, x], 0)?;
                wsum(t, y, &w0)
            },
            &x,
            OP_EPS,
        )?);
        Ok(r)
    }),
    ("index_select", |rng| {
        let (n, m) = dims(rng);
        let index: Vec<usize> = (0..n + 3).map(|_| rng.random_range(0..n)).collect();
        let x = randn(&[n, m], rng);
        let w = randn(&[index.len(), m], rng);
        grad_check(
            |t, x| {
                let y = t.index_select(x, &index)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("scatter_add", |rng| {
        let (n, m) = dims(rng);
        let index: Vec<usize> = (0..n + 3).map(|_| rng.random_range(0..n)).collect();
        let x = randn(&[index.len(), m], rng);
        let w = randn(&[n, m], rng);
        grad_check(
            |t, x| {
                let y = t.scatter_add(x, &index, n)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("segment_softmax", |rng| {
        let (n, h) = dims(rng);
        let segments: Vec<usize> = (0..n + 4).map(|_| rng.random_range(0..n)).collect();
        let x = randn(&[segments.len(), h], rng);
        let w = randn(&[segments.len(), h], rng);
        grad_check(
            |t, x| {
                let y = t.segment_softmax(x, &segments)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
    ("cross_entropy_sum", |rng| {
        let (n, v) = dims(rng);
        let targets: Vec<usize> = (0..n)
            .map(|i| if i == 0 { v } else { rng.random_range(0..v) })
            .collect();
        let x = randn(&[n, v], rng);
        grad_check(|t, x| t.cross_entropy_sum(x, &targets, Some(v)), &x, OP_EPS)
    }),
    ("composite", |rng| {
        // three stacked layers: matmul, layer norm, tanh, softmax; width
        // 2 would pin the normalized values at +-1
        let (n, m) = dims(rng);
        let m = m + 2;
        let ws: Vec<Tensor> = (0..3).map(|_| randn(&[m, m], rng)).collect();
        let x = randn(&[n, m], rng);
        let w = randn(&[n, m], rng);
        grad_check(
            |t, x| {
                let mut h = x;
                for wl in &ws {
                    let wv = t.constant(wl.clone());
                    let g = t.constant(Tensor::ones(vec![m]));
                    let b = t.constant(Tensor::zeros(vec![m]));
                    h = t.matmul(h, wv)?;
                    h = t.layer_norm(h, g, b, 1e-5)?;
                    h = t.tanh(h);
                }
                let y = t.softmax(h, 1, None)?;
                wsum(t, y, &w)
            },
            &x,
            OP_EPS,
        )
    }),
];

/// Names of the ops covered by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

/// Checks each op `trials` times on random small shapes.
pub fn op_suite(seed: u64, trials: usize) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|(name, check)| {
            let mut report = GradCheckReport::default();
            for _ in 0..trials {
                report.merge(&check(&mut rng)?);
            }
            Ok((*name, report))
        })
        .collect()
}

/// Micro model dimensions for the whole-model check.
pub fn model_check_config() -> Config {
    let mut c = Config::micro();
    c.encoder.model_dim = 16;
    c.decoder.model_dim = 16;
    c.encoder.ffn_dim = 32;
    c.decoder.ffn_dim = 32;
    c
}

pub const MODEL_CHECK_VOCAB: usize = 50;

/// A 50-entry vocabulary and a four-turn conversation with both graphs.
pub fn model_check_example() -> Result<(Vocabulary, Example)> {
    let conv = Conversation::new(
        "gradcheck",
        [
            ("Ann", "can you bring the cake tomorrow ?"),
            ("Bob", "yes , i will bring it at noon ."),
            ("Ann", "great ! tom will come too ."),
            ("Bob", "ok see you then"),
        ],
        Some("bob will bring the cake at noon ."),
    );
    let mut tokens: Vec<String> = Vocabulary::SPECIALS.iter().map(|s| s.to_string()).collect();
    for u in &conv.utterances {
        for tok in crate::corpus::split_tokens(&u.text)
            .into_iter()
            .chain(crate::corpus::split_tokens(&u.speaker))
        {
            if !tokens.contains(&tok) {
                tokens.push(tok);
            }
        }
    }
    for tok in crate::corpus::split_tokens(conv.reference_summary.as_deref().unwrap_or("")) {
        if !tokens.contains(&tok) {
            tokens.push(tok);
        }
    }
    let mut filler = 0;
    while tokens.len() < MODEL_CHECK_VOCAB {
        tokens.push(format!("w{filler}"));
        filler += 1;
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let bundle = AnnotationBundle {
        discourse_edges: vec![
            DiscourseAnnotation {
                src: 0,
                dst: 1,
                relation: DiscourseRelation::QuestionAnswerPair,
            },
            DiscourseAnnotation {
                src: 1,
                dst: 2,
                relation: DiscourseRelation::Acknowledgement,
            },
            DiscourseAnnotation {
                src: 2,
                dst: 3,
                relation: DiscourseRelation::Continuation,
            },
        ],
        coref_clusters: Vec::new(),
        action_triples: vec![
            ActionTriple::new("ann", "ask", "bob", 0),
            ActionTriple::new("bob", "will bring", "cake", 1),
            ActionTriple::new("tom", "will come", "", 2),
        ],
    };
    let ex = prepare_example(&conv, Some(&bundle), &vocab, TripleSourceMode::Annotated)?;
    Ok((vocab, ex))
}

/// Checks the per-token teacher-forced NLL of `example` with respect to every
/// trainable parameter, splitting parameters over `threads` workers.
pub fn model_check(model: &Model, example: &Example, eps: f64, threads: usize) -> Result<GradCheckReport> {
    let threads = threads.max(1);
    let loss = |t: &mut Tape, p: &crate::tensor::ParamStore| -> crate::tensor::Result<Var> {
        model
            .example_nll(t, p, example)
            .map(|(v, n)| t.scale(v, 1.0 / n as f64))
            .map_err(|e| crate::tensor::TensorError::InvalidArgument {
                op: "model_check",
                reason: e.to_string(),
            })
    };
    let reports: Vec<crate::tensor::Result<GradCheckReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let mut store = model.params.clone();
                let loss = &loss;
                s.spawn(move || grad_check_params(&mut store, loss, eps, |id, _| id.index() % threads == k))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradcheck worker panicked"))
            .collect()
    });
    let mut total = GradCheckReport::default();
    for r in reports {
        total.merge(&r?);
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub ops: Vec<(&'static str, GradCheckReport)>,
    pub model: GradCheckReport,
}

impl SuiteReport {
    pub fn op_max(&self) -> f64 {
        self.ops.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// The op suite plus the whole-model check on a freshly initialized micro
/// model.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let ops = op_suite(seed, 3)?;
    let (_, ex) = model_check_example()?;
    let model = Model::init(&model_check_config(), MODEL_CHECK_VOCAB, seed)?;
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = model_check(&model, &ex, MODEL_EPS, threads)?;
    Ok(SuiteReport { ops, model })
}
