//! Corpus evaluation.

use crate::data::Utterance;
use crate::error::Result;
use crate::metrics::{score, ErrorReport};
use crate::model::{Mode, ModelState};
use crate::par::{self, Parallelism};
use crate::rng::RngStream;
use crate::vocab::Vocab;

/// Transcribes every utterance. Variational models average `k` sampled
/// passes, drawing from a stream derived from `(seed, utterance id)`;
/// other models decode one deterministic pass and ignore `k`.
pub fn transcribe(
    state: &ModelState,
    utterances: &[&Utterance],
    k: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<Vec<Vec<usize>>> {
    let root = RngStream::new(seed, 3);
    par::map(mode, utterances, |_, u| match state.mode {
        Mode::Vilora => state.predict_marginalized(&u.features, k, &mut root.derive_label(&u.id)),
        _ => state.predict(&u.features),
    })
    .into_iter()
    .collect()
}

pub fn evaluate(
    state: &ModelState,
    utterances: &[&Utterance],
    vocab: &Vocab,
    k: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<ErrorReport> {
    let hyps = transcribe(state, utterances, k, seed, mode)?;
    let refs: Vec<Vec<usize>> = utterances.iter().map(|u| u.reference.clone()).collect();
    score(&refs, &hyps, vocab)
}
