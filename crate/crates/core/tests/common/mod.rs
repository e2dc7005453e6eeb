//! Plain-loop reference math and random instances shared by the
//! integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structsum::corpus::{ActionTriple, AnnotationBundle, Conversation, DiscourseAnnotation, Vocabulary};
use structsum::encoder::GatLayer;
use structsum::graph::EdgeList;
use structsum::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use structsum::tensor::{ParamStore, Tensor};
use structsum::{prepare_example, DiscourseRelation, Example, TripleSourceMode};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let m = b[0].len();
    a.iter()
        .map(|row| {
            (0..m)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn vector(store: &ParamStore, id: structsum::tensor::ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let y = matmul(x, &to_mat(store.value(l.w)));
    match l.b {
        Some(b) => add_row(&y, &vector(store, b)),
        None => y,
    }
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let (g, b) = (vector(store, ln.gain), vector(store, ln.bias));
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

pub fn ffn(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    let h: Mat = linear(store, &f.fc1, x)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(store, &f.fc2, &h)
}

/// Materializes every `[n, m]` score matrix; `allowed(i, j)` gates keys.
pub fn dense_mha(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    query: &Mat,
    memory: &Mat,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let q = linear(store, &mha.q, query);
    let k = linear(store, &mha.k, memory);
    let v = linear(store, &mha.v, memory);
    let d = q[0].len();
    let dh = d / mha.heads;
    let mut ctx = vec![vec![0.0; d]; query.len()];
    for h in 0..mha.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..query.len() {
            let scores: Vec<Option<f64>> = (0..memory.len())
                .map(|j| {
                    allowed(i, j).then(|| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let w = (s - max).exp() / z;
                    for c in cols.clone() {
                        ctx[i][c] += w * v[j][c];
                    }
                }
            }
        }
    }
    linear(store, &mha.o, &ctx)
}

pub fn positions(n: usize, d: usize) -> Mat {
    (0..n)
        .map(|p| {
            (0..d)
                .map(|i| {
                    let angle = p as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    if i % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn embed(store: &ParamStore, table: structsum::tensor::ParamId, ids: &[usize]) -> Mat {
    let t = to_mat(store.value(table));
    let rows: Mat = ids.iter().map(|&i| t[i].clone()).collect();
    add(&rows, &positions(ids.len(), t[0].len()))
}

pub const WORDS: usize = 40;

/// Specials plus `w0..w39`.
pub fn vocab() -> Vocabulary {
    let mut toks: Vec<String> = Vocabulary::SPECIALS.iter().map(|s| s.to_string()).collect();
    toks.extend((0..WORDS).map(|i| format!("w{i}")));
    Vocabulary::from_tokens(toks).unwrap()
}

fn phrase(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| format!("w{}", rng.random_range(0..WORDS)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random conversation with random discourse links and action triples.
pub fn random_instance(seed: u64, max_turns: usize) -> (Vocabulary, Example) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = vocab();
    let turns = rng.random_range(2..=max_turns);
    let speakers = ["w0", "w1", "w2"];
    let lines: Vec<(String, String)> = (0..turns)
        .map(|_| (speakers[rng.random_range(0..3)].to_string(), phrase(&mut rng, 1, 6)))
        .collect();
    let conv = Conversation::new(format!("r{seed}"), lines, Some(&phrase(&mut rng, 2, 6)));
    let edges = (0..rng.random_range(1..=turns + 2))
        .map(|_| DiscourseAnnotation {
            src: rng.random_range(0..turns),
            dst: rng.random_range(0..turns),
            relation: DiscourseRelation::ANNOTATED[rng.random_range(0..16)],
        })
        .collect();
    let triples = (0..rng.random_range(1..=4))
        .map(|_| {
            let what = if rng.random::<bool>() {
                phrase(&mut rng, 1, 2)
            } else {
                String::new()
            };
            ActionTriple::new(
                &phrase(&mut rng, 1, 1),
                &phrase(&mut rng, 1, 2),
                &what,
                rng.random_range(0..turns),
            )
        })
        .collect();
    let bundle = AnnotationBundle {
        discourse_edges: edges,
        coref_clusters: Vec::new(),
        action_triples: triples,
    };
    let ex = prepare_example(&conv, Some(&bundle), &vocab, TripleSourceMode::Annotated).unwrap();
    (vocab, ex)
}

/// Random graph with at most one relation per ordered pair and a self-loop
/// on every node.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, relations: usize) -> EdgeList {
    let mut e = EdgeList::new(n, relations);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                e.push(i, i, relations - 1);
            } else if rng.random_bool(0.3) {
                e.push(i, j, rng.random_range(0..relations - 1));
            }
        }
    }
    e
}

/// Relation-aware graph attention with the full `[n, n]` score matrix per
/// head. Returns node outputs and per-edge coefficients.
pub fn dense_gat(store: &ParamStore, layer: &GatLayer, x: &Mat, edges: &EdgeList) -> (Mat, Vec<Vec<f64>>) {
    let n = x.len();
    let (h, d, r) = (layer.heads, layer.d_out, layer.relation_dim);
    let wv = matmul(x, &to_mat(store.value(layer.w)));
    let a = to_mat(store.value(layer.a));
    let table = to_mat(store.value(layer.relations));
    // rel[i][j] = relation of edge i <- j
    let mut rel = vec![vec![None; n]; n];
    for e in 0..edges.len() {
        rel[edges.targets[e]][edges.sources[e]] = Some(edges.relations[e]);
    }
    let mut out = vec![vec![0.0; if layer.average { d } else { h * d }]; n];
    let mut alpha = vec![vec![vec![0.0; h]; n]; n];
    for k in 0..h {
        for i in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    rel[i][j].map(|rr| {
                        let mut s = 0.0;
                        for c in 0..d {
                            s += a[k][c] * wv[i][k * d + c] + a[k][d + c] * wv[j][k * d + c];
                        }
                        for c in 0..r {
                            s += a[k][2 * d + c] * table[rr][k * r + c];
                        }
                        if s > 0.0 {
                            s
                        } else {
                            0.2 * s
                        }
                    })
                })
                .collect();
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            let mut agg = vec![0.0; d];
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let w = (s - max).exp() / z;
                    alpha[i][j][k] = w;
                    for c in 0..d {
                        agg[c] += w * wv[j][k * d + c];
                    }
                }
            }
            for c in 0..d {
                let v = if agg[c] > 0.0 { agg[c] } else { agg[c].exp_m1() };
                if layer.average {
                    out[i][c] += v / h as f64;
                } else {
                    out[i][k * d + c] = v;
                }
            }
        }
    }
    let per_edge = (0..edges.len())
        .map(|e| alpha[edges.targets[e]][edges.sources[e]].clone())
        .collect();
    (out, per_edge)
}
