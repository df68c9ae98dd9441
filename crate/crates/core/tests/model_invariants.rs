//! Whole-model invariants: gradients, summary bypass, routing isolation,
//! decoder causality and decoding regimes.

mod common;

use common::{micro_model, perturb, utterances};
use csvmasr_core::encoder::{conformer_layer, conv_module, relative_bias_indices, AdapterContext};
use csvmasr_core::losses::LossConfig;
use csvmasr_core::numerics::{compare_gradients, finite_diff_grad, value_and_grad, Graph, Tensor};
use csvmasr_core::routing::{LidMask, RoutingVariant};
use csvmasr_core::seq2seq::{beam_search, decoder_forward, greedy_decode, log_normalize};
use csvmasr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let utt = &utterances(2, 1, 3)[1];
    assert_eq!(utt.features.rows(), 6);
    for variant in RoutingVariant::ALL {
        let (model, store) = micro_model(variant, 21);
        let mask = LidMask::from_bitstring("110").unwrap();
        let program = |g: &mut Graph| {
            let l = model.losses(g, &utt.features, &utt.transcript, utt.language_id, &mask, &LossConfig::default())?;
            Ok::<_, Error>(l.total)
        };
        let (_, analytic) = value_and_grad(&store, program).unwrap();
        let numeric = finite_diff_grad(&store, 1e-4, program).unwrap();
        let cmp = compare_gradients(&analytic, &numeric, 1e-3);
        assert_eq!(cmp.compared, store.num_scalars());
        assert!(cmp.max_rel_error < 1e-4, "{variant}: {cmp:?}");
        let sv = analytic.by_name("encoder.theta_sv").unwrap();
        assert!(sv.data().iter().any(|v| v.abs() > 1e-8), "{variant}: summary vector receives no gradient");
    }
}

#[test]
fn convolution_is_identity_at_summary_row() {
    let (model, store) = micro_model(RoutingVariant::SummaryVector, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for layer in &model.encoder.layers {
        for t in [1, 4, 9] {
            let x = random_tensor(&mut rng, t + 1, 8);
            let run = |store: &csvmasr_core::numerics::ParamStore| {
                let mut g = Graph::with_params(store, false);
                let xv = g.constant(x.clone());
                let y = conv_module(&mut g, &layer.conv, xv);
                g.value(y).clone()
            };
            let base = run(&store);
            assert_eq!(base.row(t), x.row(t));
            let mut changed = store.clone();
            for id in [layer.conv.depthwise, layer.conv.pointwise_out.weight, layer.conv.pointwise_in.weight] {
                for v in changed.get_mut(id).data_mut() {
                    *v += rng.random_range(-1.0..1.0);
                }
            }
            let moved = run(&changed);
            assert_eq!(moved.row(t), x.row(t));
            assert!((0..t).any(|r| moved.row(r) != base.row(r)));
        }
    }
}

#[test]
fn layers_preserve_rows_and_attention_is_stochastic() {
    let (model, store) = micro_model(RoutingVariant::Framewise, 6);
    let utt = &utterances(4, 1, 1)[0];
    let mut g = Graph::with_params(&store, false);
    let enc = model.encode(&mut g, &utt.features, &LidMask::all_hot(3)).unwrap();
    assert_eq!(g.shape(enc.frames), (13, 8));
    for layer in &enc.attention {
        for &p in layer {
            let probs = g.value(p);
            assert_eq!(probs.shape(), (13, 13));
            for row in probs.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_adapters_reduce_to_plain_layer() {
    let (model, mut store) = micro_model(RoutingVariant::SummaryVector, 7);
    let layer = &model.encoder.layers[1];
    let adapters = layer.adapters.as_ref().unwrap();
    for e in &adapters.experts {
        for id in [e.up.weight, e.up.bias] {
            let shape = store.get(id).shape();
            store.set(id, Tensor::zeros(shape.0, shape.1)).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, 7, 8);
    let idx = relative_bias_indices(7, model.config.encoder.rel_pos_clip);
    let mask = LidMask::from_bitstring("011").unwrap();
    let mut g = Graph::with_params(&store, false);
    let xv = g.constant(x);
    let ctx = AdapterContext { mask: &mask, variant: RoutingVariant::SummaryVector };
    let with = conformer_layer(&mut g, layer, &model.config.encoder, xv, &idx, Some(ctx)).unwrap();
    let without = conformer_layer(&mut g, layer, &model.config.encoder, xv, &idx, None).unwrap();
    assert!(with.routing.is_some() && without.routing.is_none());
    assert_eq!(g.value(with.output), g.value(without.output));
}

#[test]
fn one_hot_prompt_isolates_other_languages() {
    for variant in [RoutingVariant::SummaryVector, RoutingVariant::Framewise, RoutingVariant::Uniform] {
        let (model, store) = micro_model(variant, 9);
        let utts = utterances(3, 4, 2);
        for utt in &utts {
            let k = utt.language_id;
            let mask = LidMask::one_hot(k, 3);
            let mut scrambled = store.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64 + 100);
            let adapters = model.encoder.layers[1].adapters.as_ref().unwrap();
            for (j, e) in adapters.experts.iter().enumerate().filter(|(j, _)| *j != k) {
                for id in [e.down.weight, e.down.bias, e.up.weight, e.up.bias] {
                    for v in scrambled.get_mut(id).data_mut() {
                        *v = rng.random_range(-5.0..5.0);
                    }
                }
                if let Some(c) = &adapters.classifier {
                    let w = scrambled.get_mut(c.weight);
                    for r in 0..w.rows() {
                        w.set(r, j, rng.random_range(-5.0..5.0));
                    }
                    scrambled.get_mut(c.bias).set(0, j, rng.random_range(-5.0..5.0));
                }
            }
            let a = model.analyze(&store, &utt.features, &mask).unwrap();
            let b = model.analyze(&scrambled, &utt.features, &mask).unwrap();
            assert_eq!(a.frames, b.frames, "{variant}");
            assert_eq!(a.ctc_log_probs, b.ctc_log_probs);
            let beam = model.beam_config(3);
            assert_eq!(
                model.decode_ar(&store, &utt.features, &mask, &beam).unwrap(),
                model.decode_ar(&scrambled, &utt.features, &mask, &beam).unwrap()
            );
        }
    }
}

#[test]
fn decoder_is_causal_and_cross_attention_is_stochastic() {
    let (model, store) = micro_model(RoutingVariant::SummaryVector, 10);
    let utt = &utterances(3, 1, 4)[0];
    let sos = model.config.vocabulary.sos();
    let mut g = Graph::with_params(&store, false);
    let enc = model.encode(&mut g, &utt.features, &LidMask::all_hot(3)).unwrap();
    let short = decoder_forward(&mut g, &model.decoder, &model.config.decoder, enc.frames, &[sos, 4, 7], sos).unwrap();
    let long =
        decoder_forward(&mut g, &model.decoder, &model.config.decoder, enc.frames, &[sos, 4, 7, 2, 9], sos).unwrap();
    assert_eq!(g.shape(short.logits), (3, 33));
    assert_eq!(g.shape(long.logits), (5, 33));
    for r in 0..3 {
        assert_eq!(g.value(short.logits).row(r), g.value(long.logits).row(r));
    }
    for head in &long.cross_attention[0] {
        let p = g.value(*head);
        assert_eq!(p.cols(), 10);
        for row in p.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(
        decoder_forward(&mut g, &model.decoder, &model.config.decoder, enc.frames, &[4], sos).err(),
        Some(Error::MissingSos)
    );
    let too_long = vec![sos; model.config.decoder.max_decode_len + 1];
    assert!(matches!(
        decoder_forward(&mut g, &model.decoder, &model.config.decoder, enc.frames, &too_long, sos),
        Err(Error::PrefixTooLong { .. })
    ));
}

#[test]
fn beam_width_one_is_greedy_and_exhaustive_beam_dominates() {
    let utts = utterances(2, 2, 6);
    for seed in 0..8 {
        let (model, store) = micro_model(RoutingVariant::SummaryVector, 100 + seed);
        for utt in &utts {
            let mask = LidMask::all_hot(3);
            let mut g = Graph::with_params(&store, false);
            let enc = model.encode(&mut g, &utt.features, &mask).unwrap();
            let mark = g.len();
            let sos = model.config.vocabulary.sos();
            let mut scorer = |prefix: &[usize]| {
                let t = decoder_forward(&mut g, &model.decoder, &model.config.decoder, enc.frames, prefix, sos)?;
                let l = g.value(t.logits);
                let row = log_normalize(l.row(l.rows() - 1));
                g.truncate(mark);
                Ok(row)
            };
            let mut cfg = model.beam_config(1);
            cfg.max_len = 6;
            cfg.length_normalize = false;
            let greedy = greedy_decode(&mut scorer, &cfg).unwrap();
            let one = beam_search(&mut scorer, &cfg).unwrap();
            assert_eq!(one.transcript, greedy.transcript);
            assert_eq!(one.unterminated, greedy.unterminated);
            assert!((one.log_prob - greedy.log_prob).abs() < 1e-12);

            // every sequence of at most two tokens survives a 31²-wide beam
            cfg.max_len = 2;
            cfg.width = 31 * 31;
            let exhaustive = beam_search(&mut scorer, &cfg).unwrap();
            for width in 1..=5 {
                cfg.width = width;
                let r = beam_search(&mut scorer, &cfg).unwrap();
                if r.unterminated == exhaustive.unterminated {
                    assert!(r.log_prob <= exhaustive.log_prob + 1e-12, "seed {seed} width {width}");
                } else {
                    assert!(!exhaustive.unterminated);
                }
            }
        }
    }
}

#[test]
fn lidconcat_projection_consumes_mask_columns() {
    let (model, store) = micro_model(RoutingVariant::LidConcat, 12);
    assert_eq!(store.get(model.encoder.input.weight).rows(), 19);
    let utt = &utterances(4, 1, 1)[0];
    let a = model.analyze(&store, &utt.features, &LidMask::one_hot(0, 3)).unwrap();
    let b = model.analyze(&store, &utt.features, &LidMask::one_hot(1, 3)).unwrap();
    assert_eq!(a.frames.rows(), 13);
    assert_ne!(a.frames, b.frames);
    assert!(a.language_logits.is_empty());
}

#[test]
fn forward_passes_are_bitwise_deterministic() {
    let (model, mut store) = micro_model(RoutingVariant::SummaryVector, 13);
    perturb(&mut store, 1, 0.1);
    let utt = &utterances(4, 1, 1)[0];
    let mask = LidMask::from_bitstring("101").unwrap();
    assert_eq!(
        model.analyze(&store, &utt.features, &mask).unwrap(),
        model.analyze(&store, &utt.features, &mask).unwrap()
    );
}
