//! File formats printed by `--help`.

pub const CONVERSATIONS: &str = r#"Conversation file (one JSON object per line, blank lines skipped):
  {"id": str, "turns": [{"speaker": str, "text": str}], "summary": str?}"#;

pub const ANNOTATIONS: &str = r#"Annotation file (one JSON object per line, joined to conversations by id;
every field but "id" may be omitted):
  {"id": str,
   "discourse_edges": [{"src": int, "dst": int, "rel": str}],
   "coref": [[{"turn": int, "start": int, "end": int, "canon": str}]],
   "triples": [{"who": str, "doing": str, "what": str, "turn": int}]}
  "start".."end" is a half-open span of whitespace-separated words in turn "turn".
  "what" may be empty. "rel" is one of (case-insensitive):
    Comment ClarificationQuestion Elaboration Acknowledgement Continuation
    Explanation Conditional QuestionAnswerPair Alternation QElab Result
    Background Narration Correction Parallel Contrast"#;

pub const GRAPHS: &str = r#"Graph dump (two lines per conversation):
  {"id": str, "kind": "discourse", "nodes": [int], "edges": [[src, dst, rel]]}
  {"id": str, "kind": "action", "nodes": [{"surface": str, "roles": [str]}],
   "edges": [[a, b, "Adjacent"]], "approximate": bool}
  Discourse edges include one SelfLoop per node. "approximate" is true when
  triples came from the rule-based extractor."#;

pub const CONFIG: &str = r#"Config file: `key = value` lines, `#` starts a comment. An optional first
line `preset = micro|desk|paper-scale` picks the base; other keys override it.
Keys: model_dim ffn_dim dropout encoder_layers encoder_heads gat_layers
  gat_heads relation_embed_dim max_positions reverse_discourse_edges
  decoder_layers decoder_heads graph_attn_heads fusion_strategy rezero_init
  base_lr new_module_lr base_warmup_steps new_warmup_steps max_steps
  batch_size seed grad_clip_norm eval_every min_freq max_decode_len
fusion_strategy: parallel sequential-discourse-first sequential-action-first
  discourse-only action-only none"#;

pub const TRAIN_OUTPUT: &str = r#"Training output in --out DIR:
  report.jsonl   {"step": int, "loss": float, "alphas": [float]} per eval point,
                 step 0 first (loss over the corpus, initial gates)
  model.ckpt     final parameters with config and vocabulary embedded
  summary.json   {"steps": int, "final_loss": float, "params_hash": str,
                  "checkpoint_hash": str}"#;

pub const HYPOTHESES: &str = r#"Hypothesis file (one JSON object per line):
  {"id": str, "summary": str}"#;

pub const EVALUATION: &str = r#"Evaluation output (one JSON object per line), scores as [f, p, r]:
  {"id": str, "r1": [f,p,r], "r2": [f,p,r], "rl": [f,p,r]}   per hypothesis
  {"id": "__mean__", ...}                                  corpus mean
With --compare:
  {"id": "__compare_mean__", ...}                          mean of the other system
  {"id": "__pvalue__", "r1": p, "r2": p, "rl": p, "iterations": int, "seed": int}
  p-values come from a paired sign-flip permutation test on per-example F.
References are read from any file with "id" and "summary" fields, such as a
conversation file."#;

pub const ABLATION: &str = r#"Ablation variants (comma-separated):
  baseline, random-graph, rezero-0, rezero-1, or a fusion strategy name
  (parallel, sequential-discourse-first, sequential-action-first,
  discourse-only, action-only, none).
Output: a tab-separated table on stdout; with --out, one JSON object per
variant with its gate trace and per-conversation edge counts."#;
