mod common;

use structsum::gradsuite::{model_check_example, MODEL_CHECK_VOCAB};
use structsum::tensor::{Checkpoint, Tape};
use structsum::training::{
    ablation_table, evaluate_loss, greedy_decode, make_checkpoint, restore_checkpoint, run_ablation, train, train_step,
    Optimizer, Variant,
};
use structsum::{Config, Example, FusionStrategy, Model};

fn micro(steps: usize) -> Config {
    let mut c = Config::micro();
    c.train.max_steps = steps;
    c.train.batch_size = 1;
    c.train.eval_every = 10;
    c
}

fn logits(model: &Model, ex: &Example) -> Vec<f64> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, ex).unwrap();
    let out = model
        .decode_forward(&mut tape, &enc, &ex.target[..ex.target.len() - 1])
        .unwrap();
    tape.value(out.logits).data().to_vec()
}

#[test]
fn single_example_loss_falls_within_200_steps() {
    let (_, ex) = model_check_example().unwrap();
    let mut model = Model::init(&micro(200), MODEL_CHECK_VOCAB, 1).unwrap();
    let initial = evaluate_loss(&model, std::slice::from_ref(&ex)).unwrap();
    let report = train(&mut model, std::slice::from_ref(&ex)).unwrap();
    assert_eq!(report.losses.len(), 200);
    assert_eq!(report.records[0].loss, initial);
    assert!(report.final_loss < initial, "{} !< {initial}", report.final_loss);
    assert!(report.final_loss < 0.5 * initial);
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let (_, ex) = model_check_example().unwrap();
    let mut cfg = micro(3);
    cfg.train.base_warmup_steps = 10;
    cfg.train.new_warmup_steps = 10;
    let mut model = Model::init(&cfg, MODEL_CHECK_VOCAB, 2).unwrap();
    let before = model.params.content_hash();
    let loss = evaluate_loss(&model, std::slice::from_ref(&ex)).unwrap();
    let mut opt = Optimizer::new(&model);
    // warmup makes the rate exactly zero at step 0
    train_step(&mut model, &[&ex], &mut opt, 0).unwrap();
    assert_eq!(model.params.content_hash(), before);
    assert_eq!(evaluate_loss(&model, std::slice::from_ref(&ex)).unwrap(), loss);
}

#[test]
fn training_is_reproducible_and_reports_finite_gates() {
    let examples: Vec<Example> = (0..3).map(|s| common::random_instance(s, 4).1).collect();
    let vocab = common::vocab().len();
    let mut cfg = micro(20);
    cfg.train.batch_size = 2;
    cfg.decoder.rezero_init = 0.0;
    let mut a = Model::init(&cfg, vocab, 5).unwrap();
    let mut b = Model::init(&cfg, vocab, 5).unwrap();
    let ra = train(&mut a, &examples).unwrap();
    let rb = train(&mut b, &examples).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.params_hash, rb.params_hash);
    let v = common::vocab();
    assert_eq!(make_checkpoint(&a, &v, 20).hash(), make_checkpoint(&b, &v, 20).hash());

    assert_eq!(ra.records[0].step, 0);
    assert!(ra.records[0].alphas.iter().all(|&x| x == 0.0));
    assert_eq!(ra.records[0].alphas.len(), cfg.decoder.decoder_layers);
    assert!(ra.records.windows(2).all(|w| w[0].step < w[1].step));
    assert!(ra.records.iter().flat_map(|r| &r.alphas).all(|x| x.is_finite()));
    // the gates move away from zero once trained
    assert!(ra.records.last().unwrap().alphas.iter().any(|&x| x != 0.0));
}

#[test]
fn teacher_forcing_scores_every_target_position_once() {
    let (_, ex) = model_check_example().unwrap();
    let model = Model::init(&micro(1), MODEL_CHECK_VOCAB, 3).unwrap();
    let mut tape = Tape::new();
    let (_, n) = model.example_nll(&mut tape, &model.params, &ex).unwrap();
    assert_eq!(n, ex.target.len() - 1);
}

#[test]
fn checkpoint_restores_identical_logits() {
    let (vocab, ex) = model_check_example().unwrap();
    let mut model = Model::init(&micro(5), vocab.len(), 4).unwrap();
    train(&mut model, std::slice::from_ref(&ex)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    make_checkpoint(&model, &vocab, 5).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let (restored, v2) = restore_checkpoint(&ck).unwrap();
    assert_eq!(v2, vocab);
    assert_eq!(restored.config, model.config);
    assert_eq!(restored.params.content_hash(), model.params.content_hash());
    assert_eq!(logits(&restored, &ex), logits(&model, &ex));
    assert_eq!(
        greedy_decode(&restored, &ex, 10).unwrap(),
        greedy_decode(&model, &ex, 10).unwrap()
    );
}

#[test]
fn checkpoint_for_another_shape_is_rejected() {
    let (vocab, _) = model_check_example().unwrap();
    let model = Model::init(&micro(1), vocab.len(), 4).unwrap();
    let ck = make_checkpoint(&model, &vocab, 0);
    let mut other = micro(1);
    other.decoder.fusion_strategy = FusionStrategy::None;
    let mut target = Model::init(&other, vocab.len(), 4).unwrap();
    assert!(ck.restore_into(&mut target.params).is_err());
    let mut other = micro(1);
    other.set_shared_dims(16, 32, 0.0);
    let mut target = Model::init(&other, vocab.len(), 4).unwrap();
    assert!(ck.restore_into(&mut target.params).is_err());
}

#[test]
fn greedy_decoding_is_deterministic_and_bounded() {
    let (_, ex) = model_check_example().unwrap();
    let model = Model::init(&micro(1), MODEL_CHECK_VOCAB, 6).unwrap();
    let a = greedy_decode(&model, &ex, 7).unwrap();
    assert_eq!(a, greedy_decode(&model, &ex, 7).unwrap());
    assert!(a.tokens.len() <= 7);
    assert!(a.log_probs.len() == a.tokens.len() || a.log_probs.len() == a.tokens.len() + 1);
    assert!(a.log_probs.iter().all(|&p| p <= 0.0 && p.is_finite()));
    assert!(greedy_decode(&model, &ex, 0).is_err());
}

#[test]
fn ablation_rows_follow_the_variant_list() {
    let examples: Vec<Example> = (10..14).map(|s| common::random_instance(s, 4).1).collect();
    let vocab = common::vocab().len();
    let cfg = micro(4);
    let empty = run_ablation(&examples[..3], &examples[3..], &cfg, &[], vocab).unwrap();
    assert_eq!(ablation_table(&empty).lines().count(), 1);
    let variants = Variant::parse_list("baseline,random-graph,rezero-0").unwrap();
    let rows = run_ablation(&examples[..3], &examples[3..], &cfg, &variants, vocab).unwrap();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        for (_, before, after) in &row.edge_counts {
            assert_eq!(before, after);
        }
    }
    assert_eq!(rows[2].alpha_trace[0].1, vec![0.0; cfg.decoder.decoder_layers]);
    assert_eq!(ablation_table(&rows).lines().count(), 4);
    assert!(Variant::parse_list("baseline,bogus").is_err());
    assert!(run_ablation(&examples, &[], &cfg, &variants, vocab).is_err());
}
