use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};
use crate::model::tests::{random_utterance, tiny_config};
use crate::model::ModelConfig;

fn toy_corpus(n: usize, accents: usize) -> Corpus {
    let spec = SyntheticSpec {
        num_accents: accents,
        vocab_size: 4,
        feature_dim: 3,
        tokens_per_utterance: (1, 3),
        ..SyntheticSpec::default()
    };
    generate_synthetic_corpus(&spec, n).unwrap()
}

fn toy_bundle(corpus: &Corpus) -> ModelBundle {
    let inv = TokenInventory::new(corpus.transcript_units()).unwrap();
    ModelBundle::new(ModelConfig {
        num_accents: corpus.num_accents(),
        inventory: inv,
        ..tiny_config()
    })
    .unwrap()
}

fn reference_hyps(c: &Corpus) -> Vec<HypRecord> {
    c.utterances
        .iter()
        .map(|u| HypRecord {
            id: u.id.clone(),
            tokens: u.transcript.clone().unwrap(),
            score: 0.0,
            status: HypStatus::Complete,
        })
        .collect()
}

/// Emits a fixed id sequence followed by `<eos>` with probability 1.
struct Fixed {
    seq: Vec<usize>,
    vocab: usize,
}

impl StepScorer for Fixed {
    type State = usize;
    fn initial_state(&self) -> usize {
        0
    }
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn sos(&self) -> usize {
        self.vocab - 2
    }
    fn eos(&self) -> usize {
        self.vocab - 1
    }
    fn step(&self, _: &[usize], states: &[&usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        let rows = states
            .iter()
            .map(|&&s| {
                let mut lp = vec![f64::NEG_INFINITY; self.vocab];
                lp[*self.seq.get(s).unwrap_or(&self.eos())] = 0.0;
                lp
            })
            .collect();
        (rows, states.iter().map(|&&s| s + 1).collect())
    }
}

#[test]
fn perfect_decoder_scores_zero_error() {
    let c = toy_corpus(5, 2);
    let inv = TokenInventory::new(c.transcript_units()).unwrap();
    let hyps: Vec<HypRecord> = c
        .utterances
        .iter()
        .map(|u| {
            let ids = inv.encode(u.transcript.as_ref().unwrap()).unwrap();
            let r = beam_search(&Fixed { seq: ids, vocab: inv.size() }, &BeamConfig::default()).unwrap();
            HypRecord {
                id: u.id.clone(),
                tokens: inv.decode(r.best().labels()),
                score: r.best().score,
                status: HypStatus::Complete,
            }
        })
        .collect();
    let rep = score_hyps(&c, &hyps, &[0], "perfect").unwrap();
    assert_eq!(rep.overall.errors(), 0);
    assert_eq!(rep.overall.rate(), 0.0);
}

#[test]
fn aggregates_are_sums_of_accent_counts() {
    let c = toy_corpus(40, 3);
    let mut hyps = reference_hyps(&c);
    for (i, h) in hyps.iter_mut().enumerate() {
        if i % 3 == 0 {
            h.tokens.pop();
        }
        if i % 4 == 0 {
            h.tokens.push("w0".into());
        }
    }
    let rep = score_hyps(&c, &hyps, &[0], "sys").unwrap();
    let mut sum = EditCounts::default();
    rep.accents.iter().for_each(|a| sum.add(&a.counts));
    assert_eq!(sum, rep.overall);
    let mut groups = rep.labeled.unwrap();
    groups.add(&rep.rest.unwrap());
    assert_eq!(groups, rep.overall);
    assert_eq!(rep.labeled.unwrap(), rep.accents[0].counts);
    let refs: usize = c.utterances.iter().map(|u| u.transcript.as_ref().unwrap().len()).sum();
    assert_eq!(rep.overall.ref_len, refs);

    // Record order does not matter.
    let mut shuffled = c.clone();
    shuffled.utterances.reverse();
    hyps.reverse();
    assert_eq!(score_hyps(&shuffled, &hyps, &[0], "sys").unwrap(), rep);
}

#[test]
fn single_accent_average_equals_that_accent() {
    let c = toy_corpus(10, 1);
    let mut hyps = reference_hyps(&c);
    hyps[0].tokens.clear();
    let rep = score_hyps(&c, &hyps, &[0], "sys").unwrap();
    assert_eq!(rep.accents.len(), 1);
    assert_eq!(rep.overall, rep.accents[0].counts);
    assert!(rep.rest.is_none());
}

#[test]
fn empty_accent_group_is_omitted_with_warning() {
    let mut c = toy_corpus(20, 3);
    c.utterances.retain(|u| u.accent != 1);
    let rep = score_hyps(&c, &reference_hyps(&c), &[0], "sys").unwrap();
    assert!(rep.accents.iter().all(|a| a.accent != 1));
    assert_eq!(rep.warnings.len(), 1);
}

#[test]
fn missing_reference_or_hypothesis_is_an_error() {
    let mut c = toy_corpus(3, 1);
    let hyps = reference_hyps(&c);
    assert!(score_hyps(&c, &hyps[..2], &[0], "s").is_err());
    c.utterances[0].transcript = None;
    assert!(score_hyps(&c, &hyps, &[0], "s").is_err());
}

#[test]
fn hypothesis_file_round_trip_and_errors() {
    let hyps = vec![
        HypRecord {
            id: "a".into(),
            tokens: vec!["w1".into(), "w2".into()],
            score: -1.25,
            status: HypStatus::Complete,
        },
        HypRecord {
            id: "b".into(),
            tokens: vec![],
            score: -0.1 / 3.0,
            status: HypStatus::Partial,
        },
    ];
    assert_eq!(parse_hyps(&render_hyps(&hyps), "t").unwrap(), hyps);
    for bad in ["a\t1\tcomplete", "a\tx\tcomplete\t", "a\t1\tdone\t", "\t1\tcomplete\t", "a\t1\tcomplete\t\na\t2\tcomplete\t"] {
        assert!(parse_hyps(bad, "t").is_err(), "{bad:?}");
    }
}

#[test]
fn accent_units_are_appended_to_targets_and_stripped_from_output() {
    let c = toy_corpus(4, 3);
    let inv = TokenInventory::new(c.transcript_units())
        .unwrap()
        .with_accent_units(&c.accent_names)
        .unwrap();
    for u in &c.utterances {
        let ids = target_ids(&inv, u).unwrap().unwrap();
        assert_eq!(*ids.last().unwrap(), inv.accent_id(u.accent).unwrap());
        assert_eq!(&inv.decode(&ids), u.transcript.as_ref().unwrap());
    }
}

#[test]
fn validation_accuracy_matches_hand_count() {
    let c = toy_corpus(2, 2);
    let bundle = toy_bundle(&c);
    let acc = validation_accuracy(&bundle, &c).unwrap();
    let inv = bundle.inventory();
    let (mut correct, mut total) = (0, 0);
    for u in &c.utterances {
        let mut ids = target_ids(inv, u).unwrap().unwrap();
        ids.push(inv.eos());
        let mem = bundle.encode_for_decoding(&u.features, u.accent).unwrap();
        let mut state = bundle.las_dec.initial_snapshot();
        let mut prev = inv.sos();
        for &y in &ids {
            let (lp, next) = bundle.las_dec.beam_step(&bundle.store, &mem, &[prev], &[&state]);
            total += 1;
            if argmax(lp.row(0)) == y {
                correct += 1;
            }
            state = next.into_iter().next().unwrap();
            prev = y;
        }
    }
    assert_eq!((acc.correct, acc.total), (correct, total));
}

#[test]
fn constant_output_models_give_expected_accuracy() {
    let mut c = toy_corpus(6, 2);
    let mut bundle = toy_bundle(&c);
    let out = bundle.las_dec.out.clone();
    bundle.store.get_mut(out.weight).data_mut().fill(0.0);
    let eos = bundle.inventory().eos();
    bundle.store.get_mut(out.bias).data_mut().fill(0.0);
    // Uniform posteriors: the first-max rule predicts id 0 everywhere.
    let acc = validation_accuracy(&bundle, &c).unwrap();
    let zeros: usize = c
        .utterances
        .iter()
        .map(|u| bundle.inventory().encode(u.transcript.as_ref().unwrap()).unwrap().iter().filter(|&&y| y == 0).count())
        .sum();
    assert_eq!(acc.correct, zeros);
    // A model that always predicts <eos> is perfect on empty transcripts.
    bundle.store.get_mut(out.bias).data_mut()[eos] = 5.0;
    c.utterances.iter_mut().for_each(|u| u.transcript = Some(vec![]));
    assert_eq!(validation_accuracy(&bundle, &c).unwrap().fraction(), 1.0);
}

#[test]
fn pooled_embeddings_are_frame_means() {
    let c = toy_corpus(7, 2);
    let bundle = toy_bundle(&c);
    let pooled = pooled_embeddings(&bundle, &c, Embedding::Specific).unwrap();
    assert_eq!(pooled.rows(), 7);
    for (i, u) in c.utterances.iter().enumerate() {
        let batch = Batch::single(&u.features, u.accent);
        let mut g = Graph::inference();
        let x = bundle.input(&mut g, &batch).unwrap();
        let h = bundle.g_as_forward(&mut g, x, &batch, &ForwardCtx::eval());
        let hv = g.value(h);
        for k in 0..hv.cols() {
            let mut s = 0.0;
            for t in 0..hv.rows() {
                s += hv.get(t, k);
            }
            assert!((pooled.get(i, k) - s / hv.rows() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_export_is_reproducible() {
    let c = toy_corpus(5, 2);
    let bundle = toy_bundle(&c);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("emb.aipf");
    let labels = export_embeddings(&bundle, &c, Embedding::Invariant, &p).unwrap();
    let first = (fs::read(&p).unwrap(), fs::read(&labels).unwrap());
    export_embeddings(&bundle, &c, Embedding::Invariant, &p).unwrap();
    assert_eq!(first, (fs::read(&p).unwrap(), fs::read(&labels).unwrap()));
    let m = features::read(&p).unwrap();
    assert_eq!((m.len(), m.dim()), (5, bundle.config.g_ai_hidden));
    assert_eq!(String::from_utf8(first.1).unwrap().lines().count(), 5);
}

#[test]
fn decoding_a_random_model_is_deterministic() {
    let c = toy_corpus(3, 2);
    let bundle = toy_bundle(&c);
    let cfg = BeamConfig {
        beam_size: 4,
        max_len: 6,
        length_norm: false,
    };
    let a = decode_corpus(&bundle, &c, &cfg).unwrap();
    let b = decode_corpus(&bundle, &c, &cfg).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = random_utterance(&mut rng, 9, 2, 3, 2);
    assert!(decode_utterance(&bundle, &u, &cfg).is_ok());
}
