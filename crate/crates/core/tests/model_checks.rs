use sopa_morph::data::{build_task, chars, encode_batch, sample_splits, Example, Pair, SplitSizes, Task, Vocabulary, SOS};
use sopa_morph::gradcheck::check_params;
use sopa_morph::params::{seeded_rng, uniform, ParamStore};
use sopa_morph::seq2seq::{init_lstm, EncoderType, LstmCell, ModelConfig, ModelError, Seq2Seq};
use sopa_morph::sopa::{EpsilonMode, PatternSpec};
use sopa_morph::tensor::{Matrix, Tape, Var};
use sopa_morph::trainer::{evaluate_exact_match, GreedyPredictor};

fn small(encoder: EncoderType, share: bool, vocab: usize, target: usize) -> ModelConfig {
    ModelConfig {
        encoder,
        char_embed_dim: 5,
        tag_embed_dim: 3,
        hidden: 6,
        layers: 1,
        patterns: PatternSpec::new(vec![3, 4], 2).unwrap(),
        epsilon_mode: EpsilonMode::Chained,
        share_embeddings: share,
        source_vocab_size: vocab,
        target_vocab_size: target,
    }
}

#[test]
fn lstm_cell_eight_dim_gradient() {
    let mut rng = seeded_rng(11);
    let mut store = ParamStore::new();
    init_lstm(&mut store, "cell", 8, 8, &mut rng).unwrap();
    store.insert("x", uniform(&mut rng, 1, 8, 1.0)).unwrap();
    store.insert("h", uniform(&mut rng, 1, 8, 1.0)).unwrap();
    store.insert("c", uniform(&mut rng, 1, 8, 1.0)).unwrap();
    let w = uniform(&mut rng, 1, 8, 1.0);
    let report = check_params(&store, 1e-5, None, |tape, b| -> Result<Var<'_>, ModelError> {
        let cell = LstmCell::bind(b, "cell")?;
        let (h, c) = cell.step(b.get("x")?, b.get("h")?, b.get("c")?)?;
        Ok(h.mul(tape.constant(w.clone()))?.sum().add(c.tanh().sum())?)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn two_steps_compose() {
    let mut rng = seeded_rng(12);
    let mut store = ParamStore::new();
    init_lstm(&mut store, "cell", 3, 4, &mut rng).unwrap();
    let xs = [uniform(&mut rng, 2, 3, 1.0), uniform(&mut rng, 2, 3, 1.0)];
    let run = |steps: &[Matrix]| {
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let cell = LstmCell::bind(&b, "cell").unwrap();
        let mut h = tape.constant(Matrix::zeros((2, 4)));
        let mut c = h;
        for x in steps {
            (h, c) = cell.step(tape.constant(x.clone()), h, c).unwrap();
        }
        ((*h.value()).clone(), (*c.value()).clone())
    };
    let both = run(&xs);
    let first = run(&xs[..1]);
    let tape = Tape::new();
    let b = store.bind(&tape, false);
    let cell = LstmCell::bind(&b, "cell").unwrap();
    let (h, c) = cell
        .step(tape.constant(xs[1].clone()), tape.constant(first.0), tape.constant(first.1))
        .unwrap();
    assert_eq!(*h.value(), both.0);
    assert_eq!(*c.value(), both.1);
}

fn vocab() -> Vocabulary {
    Vocabulary::from_symbols(["^", "$", "a", "b", "c", "d"])
}

fn copy_batch(words: &[&str]) -> sopa_morph::data::Batch {
    let pairs: Vec<Pair> = words.iter().map(|w| Pair { source: chars(w), target: chars(w) }).collect();
    let refs: Vec<&Pair> = pairs.iter().collect();
    encode_batch(&refs, &vocab(), &vocab()).unwrap()
}

#[test]
fn decode_step_gradient_both_encoders() {
    for encoder in [EncoderType::Sopa, EncoderType::Bilstm] {
        let model = Seq2Seq::new(small(encoder, true, 10, 10), 21).unwrap();
        let batch = copy_batch(&["abd", "ca"]);
        let probe = uniform(&mut seeded_rng(5), 2, 10, 1.0);
        let report = check_params(&model.params, 1e-5, None, |tape, b| -> Result<Var<'_>, ModelError> {
            let enc = model.encode(b, &batch.source, &batch.source_lens)?;
            let out = model.decode_step(b, &[SOS, SOS], model.init_state(&enc), &enc)?;
            let w = out.attention.value().mapv(|_| 0.3);
            Ok(out
                .logits
                .mul(tape.constant(probe.clone()))?
                .sum()
                .add(out.attention.mul(tape.constant(w))?.sum())?)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{encoder}: {report:?}");
    }
}

#[test]
fn loss_closed_forms() {
    let mut model = Seq2Seq::new(small(EncoderType::Bilstm, true, 10, 10), 3).unwrap();
    model.params.get_mut("out.w").unwrap().value.fill(0.0);
    model.params.get_mut("out.b").unwrap().value.fill(0.0);
    let tape = Tape::new();
    let loss = model.loss(&model.params.bind(&tape, false), &copy_batch(&["ab", "dcab"])).unwrap();
    assert!((loss.item() - (10f64).ln()).abs() < 1e-12);

    let tape = Tape::new();
    let targets = [3usize, 0, 4];
    let logits = Matrix::from_shape_fn((3, 5), |(r, c)| if c == targets[r] { 1e6 } else { 0.0 });
    let ce = tape.constant(logits).cross_entropy(&targets, &[1.0 / 3.0; 3]).unwrap();
    assert!(ce.item().abs() < 1e-9);
}

#[test]
fn untrained_copy_accuracy_is_near_zero() {
    let parsed = sopa_morph::data::parse_unimorph(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/eng_sample.tsv")).unwrap();
    let splits = sample_splits(&parsed.examples, SplitSizes { train: 50, dev: 5, test: 5 }, 3).unwrap();
    let ds = build_task(&splits, Task::Copy);
    let cfg = ModelConfig::for_task(EncoderType::Sopa, Task::Copy, ds.source_vocab.len(), ds.source_vocab.len());
    let model = Seq2Seq::new(cfg, 4).unwrap();
    let predictor = GreedyPredictor {
        model: &model,
        source_vocab: &ds.source_vocab,
        target_vocab: ds.target_vocab(),
        batch_size: 16,
    };
    let acc = evaluate_exact_match(&predictor, &ds.train).unwrap();
    assert!(acc <= 0.02, "untrained accuracy {acc}");
}

#[test]
fn analysis_embeddings_are_independent() {
    let ex = Example {
        lemma: "dog".into(),
        form: "dogs".into(),
        tags: vec!["N".into(), "PL".into()],
    };
    let pair = Pair::render(&ex, Task::Analysis);
    let sv = Vocabulary::from_symbols(["^", "$", "d", "o", "g", "s"]);
    let tv = Vocabulary::from_symbols(["N", "PL"]);
    let batch = encode_batch(&[&pair], &sv, &tv).unwrap();
    let mut model = Seq2Seq::new(small(EncoderType::Sopa, false, sv.len(), tv.len()), 8).unwrap();
    let encode = |m: &Seq2Seq| {
        let tape = Tape::new();
        let enc = m.encode(&m.params.bind(&tape, false), &batch.source, &batch.source_lens).unwrap();
        (*enc.init_h.value()).clone()
    };
    let before = encode(&model);
    model.params.get_mut("embed.target").unwrap().value.fill(5.0);
    assert_eq!(encode(&model), before);
    assert_eq!(model.params.get("embed.target").unwrap().value.ncols(), 3);
}
