use super::{pad_sequences, Batch, Corpus, Grammar, TaskKind, CLS, SEP};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct NspPair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub is_next: bool,
}

/// `CLS a SEP b SEP` with segment 0 through the first SEP and 1 after it.
pub fn pack_pair(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::with_capacity(a.len() + b.len() + 3);
    tokens.push(CLS);
    tokens.extend_from_slice(a);
    tokens.push(SEP);
    let first = tokens.len();
    tokens.extend_from_slice(b);
    tokens.push(SEP);
    let mut segments = vec![0; first];
    segments.resize(tokens.len(), 1);
    (tokens, segments)
}

/// A sentence and either its true successor (probability 0.5) or a random sentence.
pub fn make_nsp_pair(corpus: &Corpus, rng: &mut Stream) -> NspPair {
    let is_next = rng.bernoulli(0.5);
    nsp_pair_with_label(corpus, is_next, rng)
}

/// Negatives come from a different document whenever the corpus has more than one.
pub fn nsp_pair_with_label(corpus: &Corpus, is_next: bool, rng: &mut Stream) -> NspPair {
    let n_docs = corpus.documents.len();
    let d = rng.below(n_docs);
    let doc = &corpus.documents[d];
    let i = rng.below(doc.len() - 1);
    let a = doc[i].clone();
    let b = if is_next {
        doc[i + 1].clone()
    } else {
        let mut other = rng.below(n_docs);
        while n_docs > 1 && other == d {
            other = rng.below(n_docs);
        }
        let od = &corpus.documents[other];
        od[rng.below(od.len())].clone()
    };
    NspPair { a, b, is_next }
}

/// One packed pair-matching example whose label says whether both sides share a topic.
pub fn pair_example(task: TaskKind, grammar: &Grammar, same_topic: bool, rng: &mut Stream) -> (Vec<usize>, Vec<usize>) {
    let n_topics = grammar.n_topics();
    let ta = rng.below(n_topics);
    let tb = if same_topic || n_topics == 1 {
        ta
    } else {
        (ta + 1 + rng.below(n_topics - 1)) % n_topics
    };
    let a = grammar.sentence(ta, rng);
    let b = match task {
        // Answers are topical text without the chain's local structure.
        TaskKind::QaMatch => {
            let len = grammar.sentence_len(rng);
            grammar.continue_text(tb, len, &mut None, 0.0, rng)
        }
        _ => grammar.sentence(tb, rng),
    };
    pack_pair(&a, &b)
}

/// A balanced batch of synthetic question-answer or question-question pairs.
pub fn make_pair_task_batch(task: TaskKind, grammar: &Grammar, batch_size: usize, rng: &mut Stream) -> Batch {
    assert!(
        matches!(task, TaskKind::QaMatch | TaskKind::QqMatch),
        "{task} is not a pair-matching task"
    );
    let (seqs, labels): (Vec<_>, Vec<_>) = (0..batch_size)
        .map(|_| {
            let label = rng.bernoulli(0.5);
            (pair_example(task, grammar, label, rng), label)
        })
        .unzip();
    Batch {
        task,
        input: pad_sequences(&seqs),
        mask_positions: Vec::new(),
        mask_targets: Vec::new(),
        labels,
    }
}
