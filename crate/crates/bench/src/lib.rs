//! Benchmarks live in `benches/`: `engine` times tensor ops and ROUGE,
//! `model` times a training step and greedy decoding on the micro model.
