use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::*;
use crate::corpus::{FeatureSequence, Utterance};

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        num_accents: 2,
        g_ai_hidden: 4,
        g_ai_layers: 2,
        g_as_hidden: 3,
        g_as_layers: 1,
        disc_hidden: 3,
        recon_hidden: 4,
        recon_layers: 1,
        las_enc_hidden: 4,
        las_enc_layers: 1,
        las_dec_hidden: 4,
        las_dec_layers: 1,
        token_embed: 3,
        accent_embed: 0,
        frame_stack: 1,
        dropout: 0.0,
        init_seed: 3,
        inventory: TokenInventory::with_size(2),
    }
}

pub(crate) fn random_utterance(rng: &mut ChaCha8Rng, id: usize, frames: usize, dim: usize, accents: usize) -> Utterance {
    Utterance {
        id: format!("u{id}"),
        features: FeatureSequence::new(Tensor::from_vec(
            frames,
            dim,
            (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )),
        accent: rng.gen_range(0..accents),
        transcript: None,
        pseudo: false,
        alignment: None,
    }
}

/// A padded two-utterance batch with labels of different lengths.
pub(crate) fn tiny_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_utterance(&mut rng, 0, 4, cfg.feature_dim, cfg.num_accents);
    let b = random_utterance(&mut rng, 1, 2, cfg.feature_dim, cfg.num_accents);
    let labels = vec![vec![0, 1], vec![1]];
    Batch::new(&[&a, &b], Some(&labels), &cfg.inventory).unwrap()
}

/// Compares backprop parameter gradients of `loss` with central differences
/// on `samples` randomly chosen entries of each listed parameter.
pub(crate) fn param_gradcheck<F>(bundle: &ModelBundle, ids: &[ParamId], samples: usize, seed: u64, loss: F) -> Result<(), String>
where
    F: Fn(&ModelBundle, &mut Graph) -> Var,
{
    let mask = {
        let mut m = vec![false; bundle.store.len()];
        for id in ids {
            m[id.0] = true;
        }
        m
    };
    let mut g = Graph::with_trainable(mask);
    let l = loss(bundle, &mut g);
    let grads = g.backward(l).for_params(&g);
    let eval = |b: &ModelBundle| {
        let mut g = Graph::inference();
        let v = loss(b, &mut g);
        g.value(v).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    for &id in ids {
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(bundle.store.get(id).rows(), bundle.store.get(id).cols()));
        let n = bundle.store.get(id).len();
        for _ in 0..samples.min(n) {
            let k = rng.gen_range(0..n);
            let mut plus = bundle.clone();
            plus.store.get_mut(id).data_mut()[k] += h;
            let mut minus = bundle.clone();
            minus.store.get_mut(id).data_mut()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs();
            if err > 1e-6 && err > 1e-4 * a.abs().max(numeric.abs()) {
                return Err(format!(
                    "{}[{k}]: analytic {a:e} vs numeric {numeric:e}",
                    bundle.store.name(id)
                ));
            }
        }
    }
    Ok(())
}

#[test]
fn parameter_count_matches_formula() {
    let inv = TokenInventory::with_size(20);
    let mut configs = vec![tiny_config(), ModelConfig::desk(16, 3, inv.clone())];
    configs.push(ModelConfig {
        accent_embed: 5,
        frame_stack: 3,
        ..ModelConfig::desk(16, 3, inv)
    });
    for cfg in configs {
        let b = ModelBundle::new(cfg.clone()).unwrap();
        assert_eq!(b.store.numel(), cfg.expected_param_count());
        let by_component: usize = Component::ALL
            .iter()
            .flat_map(|&c| b.params_of(c).iter())
            .map(|&id| b.store.get(id).len())
            .sum();
        assert_eq!(by_component, b.store.numel());
    }
}

#[test]
fn full_size_architecture_is_expressible() {
    let cfg = ModelConfig::full_scale(9);
    cfg.validate().unwrap();
    assert_eq!(cfg.inventory.size(), 202);
    assert_eq!((cfg.g_ai_hidden, cfg.g_as_hidden, cfg.recon_hidden), (768, 256, 1024));
    assert_eq!((cfg.las_enc_layers, cfg.las_enc_hidden), (4, 1024));
    assert!(cfg.expected_param_count() > 30_000_000);
}

#[test]
fn components_initialize_independently() {
    let a = ModelBundle::new(tiny_config()).unwrap();
    let b = ModelBundle::new(ModelConfig {
        recon_hidden: 7,
        ..tiny_config()
    })
    .unwrap();
    assert_eq!(a.component_values(Component::GAi), b.component_values(Component::GAi));
    assert_eq!(a.component_values(Component::LasDecoder), b.component_values(Component::LasDecoder));
}

#[test]
fn single_frame_input_gives_single_frame_outputs() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = random_utterance(&mut rng, 0, 1, cfg.feature_dim, 2);
    let batch = Batch::new(&[&u], None, &cfg.inventory).unwrap();
    let mut g = Graph::inference();
    let (h_ai, h_as) = bundle.forward_generators(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    assert_eq!(g.value(h_ai).shape(), (1, cfg.g_ai_hidden));
    assert_eq!(g.value(h_as).shape(), (1, cfg.g_as_hidden));
    let x = bundle.reconstruct(&mut g, h_ai, h_as, &batch, &ForwardCtx::eval()).unwrap();
    assert_eq!(g.value(x).shape(), (1, cfg.feature_dim));
}

#[test]
fn zero_weights_and_input_give_zero_output() {
    let cfg = tiny_config();
    let mut bundle = ModelBundle::new(cfg.clone()).unwrap();
    for &id in bundle.params_of(Component::GAi).to_vec().iter() {
        bundle.store.get_mut(id).data_mut().fill(0.0);
    }
    let u = Utterance {
        id: "z".into(),
        features: FeatureSequence::new(Tensor::zeros(5, cfg.feature_dim)),
        accent: 0,
        transcript: None,
        pseudo: false,
        alignment: None,
    };
    let batch = Batch::new(&[&u], None, &cfg.inventory).unwrap();
    let mut g = Graph::inference();
    let (h_ai, _) = bundle.forward_generators(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    assert!(g.value(h_ai).data().iter().all(|&v| v == 0.0));
}

#[test]
fn discriminator_rows_are_distributions() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let batch = tiny_batch(&cfg, 2);
    let mut g = Graph::inference();
    let (h_ai, h_as) = bundle.forward_generators(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    for (branch, h) in [(Branch::Invariant, h_ai), (Branch::Specific, h_as)] {
        let p = bundle.discriminate(&mut g, branch, h, &batch, &ForwardCtx::eval()).unwrap();
        let p = g.value(p);
        assert_eq!(p.shape(), (batch.steps * batch.batch, cfg.num_accents));
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(bundle.discriminate(&mut g, Branch::Specific, h_ai, &batch, &ForwardCtx::eval()).is_err());
}

#[test]
fn equal_logits_give_uniform_discriminator_output() {
    let cfg = tiny_config();
    let mut bundle = ModelBundle::new(cfg.clone()).unwrap();
    let out = bundle.d_ai.out.clone();
    bundle.store.get_mut(out.weight).data_mut().fill(0.0);
    bundle.store.get_mut(out.bias).data_mut().fill(0.3);
    let batch = tiny_batch(&cfg, 5);
    let mut g = Graph::inference();
    let (h_ai, _) = bundle.forward_generators(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    let p = bundle.discriminate(&mut g, Branch::Invariant, h_ai, &batch, &ForwardCtx::eval()).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

/// `sum_t w_t . f(t)` with fixed random weights, to turn any output into a scalar.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let m = g.mul(v, w);
    g.weighted_sum(m, vec![1.0; r])
}

#[test]
fn generator_and_reconstruction_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let batch = tiny_batch(&cfg, 11);
    let mut ids = bundle.params_of(Component::GAi).to_vec();
    ids.extend(bundle.params_of(Component::GAs));
    ids.extend(bundle.params_of(Component::Recon));
    ids.extend(bundle.params_of(Component::DAs));
    param_gradcheck(&bundle, &ids, 6, 1, |b, g| {
        let ctx = ForwardCtx::eval();
        let (h_ai, h_as) = b.forward_generators(g, &batch, &ctx).unwrap();
        let x = b.reconstruct(g, h_ai, h_as, &batch, &ctx).unwrap();
        let p = b.discriminate(g, Branch::Specific, h_as, &batch, &ctx).unwrap();
        let a = project(g, x, 2);
        let c = project(g, p, 3);
        g.add(a, c)
    })
    .unwrap();
}

#[test]
fn recognizer_gradients_match_finite_differences() {
    for (stack, emb) in [(1, 0), (2, 2)] {
        let cfg = ModelConfig {
            frame_stack: stack,
            accent_embed: emb,
            ..tiny_config()
        };
        let bundle = ModelBundle::new(cfg.clone()).unwrap();
        let batch = tiny_batch(&cfg, 12);
        let mut ids = bundle.params_of(Component::GAi).to_vec();
        ids.extend(bundle.params_of(Component::LasEncoder));
        ids.extend(bundle.params_of(Component::LasDecoder));
        ids.extend(bundle.params_of(Component::AccentEmbedding));
        param_gradcheck(&bundle, &ids, 5, 4, |b, g| {
            let (_, out) = b.asr_forward(g, &batch, &ForwardCtx::eval()).unwrap();
            project(g, out.probs, 9)
        })
        .unwrap();
    }
}

#[test]
fn attention_rows_sum_to_one_and_skip_padding() {
    let cfg = ModelConfig {
        frame_stack: 2,
        ..tiny_config()
    };
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let batch = tiny_batch(&cfg, 3);
    let mut g = Graph::inference();
    let (_, out) = bundle.asr_forward(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    assert_eq!(out.attention.len(), batch.targets.as_ref().unwrap().steps);
    for &a in &out.attention {
        let a = g.value(a);
        assert_eq!(a.shape(), (2, 2));
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // The second utterance has 2 frames, i.e. one stacked frame.
        assert_eq!(a.get(1, 1), 0.0);
    }
}

#[test]
fn eos_only_target_gives_one_posterior_row() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = random_utterance(&mut rng, 0, 3, cfg.feature_dim, 2);
    let batch = Batch::new(&[&u], Some(&[vec![]]), &cfg.inventory).unwrap();
    let t = batch.targets.as_ref().unwrap();
    assert_eq!((t.steps, t.outputs.clone()), (1, vec![cfg.inventory.eos()]));
    let mut g = Graph::inference();
    let (_, out) = bundle.asr_forward(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    assert_eq!(g.value(out.probs).rows(), 1);
}

/// Probability of `seq` under teacher forcing, by direct decoder stepping.
fn sequence_prob(bundle: &ModelBundle, memory: &Tensor, seq: &[usize]) -> f64 {
    let dec = &bundle.las_dec;
    let mut state = dec.initial_snapshot();
    let mut prev = bundle.inventory().sos();
    let mut lp = 0.0;
    for &y in seq {
        let (l, next) = dec.beam_step(&bundle.store, memory, &[prev], &[&state]);
        lp += l.get(0, y);
        state = next.into_iter().next().unwrap();
        prev = y;
    }
    lp.exp()
}

#[test]
fn sequence_probabilities_sum_to_one() {
    // One base unit plus the two specials: a 3-symbol output space.
    let cfg = ModelConfig {
        inventory: TokenInventory::with_size(1),
        ..tiny_config()
    };
    let v = cfg.inventory.size();
    assert_eq!(v, 3);
    let eos = cfg.inventory.eos();
    for seed in 0..5 {
        let bundle = ModelBundle::new(ModelConfig {
            init_seed: seed,
            ..cfg.clone()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_utterance(&mut rng, 0, 3, cfg.feature_dim, 2);
        let mem = bundle.encode_for_decoding(&u.features, 0).unwrap();
        let max_len = 2;
        // Complete sequences ending in <eos> within max_len, plus the
        // unterminated prefixes of length max_len.
        let mut total = 0.0;
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for depth in 1..=max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for y in 0..v {
                    let mut s = p.clone();
                    s.push(y);
                    if y == eos {
                        total += sequence_prob(&bundle, &mem, &s);
                    } else if depth == max_len {
                        total += sequence_prob(&bundle, &mem, &s);
                    } else {
                        next.push(s);
                    }
                }
            }
            frontier = next;
        }
        assert!((total - 1.0).abs() < 1e-5, "total {total}");
    }
}

#[test]
fn teacher_forcing_agrees_with_stepwise_decoding() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = random_utterance(&mut rng, 0, 4, cfg.feature_dim, 2);
    let labels = vec![vec![1, 0, 1]];
    let batch = Batch::new(&[&u], Some(&labels), &cfg.inventory).unwrap();
    let mut g = Graph::inference();
    let (_, out) = bundle.asr_forward(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    let probs = g.value(out.probs);
    let mem = bundle.encode_for_decoding(&u.features, u.accent).unwrap();
    let seq = [1, 0, 1, cfg.inventory.eos()];
    let tf: f64 = seq.iter().enumerate().map(|(j, &y)| probs.get(j, y).ln()).sum();
    assert!((tf - sequence_prob(&bundle, &mem, &seq).ln()).abs() < 1e-9);
}

#[test]
fn batching_matches_single_utterance_outputs() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let batch = tiny_batch(&cfg, 21);
    let mut g = Graph::inference();
    let (h_ai, _) = bundle.forward_generators(&mut g, &batch, &ForwardCtx::eval()).unwrap();
    let joint = g.value(h_ai).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let _a = random_utterance(&mut rng, 0, 4, cfg.feature_dim, 2);
    let b = random_utterance(&mut rng, 1, 2, cfg.feature_dim, 2);
    let single = Batch::new(&[&b], None, &cfg.inventory).unwrap();
    let mut g2 = Graph::inference();
    let (h2, _) = bundle.forward_generators(&mut g2, &single, &ForwardCtx::eval()).unwrap();
    for t in 0..2 {
        for (x, y) in joint.row(t * 2 + 1).iter().zip(g2.value(h2).row(t)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn accent_embedding_selects_a_row_and_routes_gradient_to_it() {
    let cfg = ModelConfig {
        accent_embed: 3,
        num_accents: 4,
        ..tiny_config()
    };
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let table = bundle.accent_table.unwrap();
    let mut g = Graph::with_trainable(bundle.trainable(&[Component::AccentEmbedding]));
    let e = bundle.accent_embed(&mut g, 2).unwrap();
    assert_eq!(g.value(e).data(), bundle.store.get(table).row(2));
    let w = g.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
    let m = g.mul(e, w);
    let s = g.weighted_sum(m, vec![1.0]);
    let grads = g.backward(s).for_params(&g);
    let gt = &grads[0].1;
    for r in 0..4 {
        let expect: &[f64] = if r == 2 { &[1.0, 2.0, 3.0] } else { &[0.0, 0.0, 0.0] };
        assert_eq!(gt.row(r), expect);
    }
    assert!(bundle.accent_embed(&mut g, 4).is_err());
    let plain = ModelBundle::new(tiny_config()).unwrap();
    assert!(plain.accent_embed(&mut Graph::inference(), 0).is_err());
}

#[test]
fn reversal_on_a_linear_probe_flips_the_gradient() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let batch = tiny_batch(&cfg, 4);
    let mask = bundle.trainable(&[Component::GAi]);
    let grads_for = |scale: Option<f64>| {
        let mut g = Graph::with_trainable(mask.clone());
        let x = bundle.input(&mut g, &batch).unwrap();
        let mut h = bundle.g_ai_forward(&mut g, x, &batch, &ForwardCtx::eval());
        if let Some(s) = scale {
            h = g.grad_reverse(h, s);
        }
        let l = project(&mut g, h, 17);
        g.backward(l).for_params(&g)
    };
    let plain = grads_for(None);
    let flipped = grads_for(Some(1.0));
    for ((_, a), (_, b)) in plain.iter().zip(&flipped) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, -*y);
        }
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let cfg = tiny_config();
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u = random_utterance(&mut rng, 0, 3, cfg.feature_dim + 1, 2);
    let batch = Batch::new(&[&u], None, &cfg.inventory).unwrap();
    let err = bundle.forward_generators(&mut Graph::inference(), &batch, &ForwardCtx::eval()).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(ModelBundle::new(ModelConfig {
        g_ai_hidden: 0,
        ..cfg
    })
    .is_err());
}

#[test]
fn dropout_is_keyed_and_inverted() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::filled(50, 40, 1.0));
    let a = Dropout::new(0.1, 1, 2, 3).apply(&mut g, x);
    let b = Dropout::new(0.1, 1, 2, 3).apply(&mut g, x);
    let c = Dropout::new(0.1, 1, 3, 3).apply(&mut g, x);
    assert_eq!(g.value(a), g.value(b));
    assert_ne!(g.value(a), g.value(c));
    let mean = g.value(a).sum() / 2000.0;
    assert!((mean - 1.0).abs() < 0.05);
    assert!(g.value(a).data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
}

#[test]
fn checkpoint_round_trip_restores_parameters() {
    let cfg = ModelConfig {
        accent_embed: 2,
        ..tiny_config()
    };
    let bundle = ModelBundle::new(cfg.clone()).unwrap();
    let mut meta = KvConfig::new();
    meta.set("mode", "pretrain");
    let ck = Checkpoint::from_bundle(&bundle, &meta, 42, 3);
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes, "mem").unwrap();
    assert_eq!(back, ck);
    assert_eq!((back.step, back.epoch), (42, 3));
    assert_eq!(back.meta.raw("mode"), Some("pretrain"));
    let restored = back.to_bundle().unwrap();
    assert_eq!(restored.store, bundle.store);
    assert_eq!(restored.config, cfg);
}

#[test]
fn checkpoint_rejects_other_architectures_and_corruption() {
    let bundle = ModelBundle::new(tiny_config()).unwrap();
    let ck = Checkpoint::from_bundle(&bundle, &KvConfig::new(), 0, 0);
    let mut other = ModelBundle::new(ModelConfig {
        las_dec_hidden: 5,
        ..tiny_config()
    })
    .unwrap();
    assert!(matches!(ck.load_into(&mut other), Err(Error::Format { .. })));
    let mut same = ModelBundle::new(ModelConfig {
        init_seed: 99,
        ..tiny_config()
    })
    .unwrap();
    ck.load_into(&mut same).unwrap();
    assert_eq!(same.store, bundle.store);

    let bytes = ck.encode();
    for cut in [0, 3, 8, 20, bytes.len() - 1] {
        assert!(Checkpoint::decode(&bytes[..cut], "t").is_err());
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::decode(&bad, "t").is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::decode(&extra, "t").is_err());
}
