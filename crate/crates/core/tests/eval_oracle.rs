//! Error-rate oracle and prompt-sweep mechanics.

mod common;

use common::{micro_model, utterances};
use csvmasr_core::eval::{
    layer_classification_accuracy, prompt_sweep, wer, wer_report, DecodeMode, DecodeOptions, Prompt,
};
use csvmasr_core::exec::Sequential;
use csvmasr_core::numerics::Tensor;
use csvmasr_core::routing::RoutingVariant;
use csvmasr_core::Error;

/// Plain recursive Levenshtein distance; matching heads are consumed
/// together, which never increases the optimum.
fn brute(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                brute(ra, rb)
            } else {
                1 + brute(ra, rb).min(brute(ra, b)).min(brute(a, rb))
            }
        }
    }
}

fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn wer_matches_recursive_edit_distance_on_all_short_pairs() {
    let seqs = all_sequences(6);
    assert_eq!(seqs.len(), 1093);
    for r in seqs.iter().filter(|s| !s.is_empty()) {
        for h in &seqs {
            let expected = 100.0 * brute(r, h) as f64 / r.len() as f64;
            assert_eq!(wer(std::slice::from_ref(r), std::slice::from_ref(h)).unwrap(), expected, "{r:?} {h:?}");
        }
    }
    assert_eq!(wer::<u8>(&[vec![]], &[vec![1]]).unwrap_err(), Error::EmptyReference);
}

fn zero_routing(variant: RoutingVariant) -> (csvmasr_core::model::Model, csvmasr_core::numerics::ParamStore) {
    let (model, mut store) = micro_model(variant, 31);
    for layer in &model.encoder.layers {
        let Some(ad) = &layer.adapters else { continue };
        let mut ids = Vec::new();
        for e in &ad.experts {
            ids.extend([e.down.weight, e.down.bias, e.up.weight, e.up.bias]);
        }
        if let Some(c) = &ad.classifier {
            ids.extend([c.weight, c.bias]);
        }
        for id in ids {
            let (r, c) = store.get(id).shape();
            store.set(id, Tensor::zeros(r, c)).unwrap();
        }
    }
    (model, store)
}

#[test]
fn sweep_with_silent_routing_is_flat() {
    for mode in DecodeMode::ALL {
        let (model, store) = zero_routing(RoutingVariant::SummaryVector);
        let utts: Vec<_> = utterances(3, 3, 5).into_iter().filter(|u| u.language_id == 1).collect();
        let opts = DecodeOptions { mode, beam_width: 2 };
        let sweep = prompt_sweep(&model, &store, &utts, 1, opts, &Sequential).unwrap();
        assert_eq!(sweep.rows.iter().map(|r| r.num_masks).collect::<Vec<_>>(), [1, 2, 1]);
        let first = sweep.rows[0].per_mask[0].1;
        for row in &sweep.rows {
            assert!(row.per_mask.iter().all(|m| m.1 == first), "{mode:?}: {row:?}");
            assert_eq!(row.ci95, 0.0);
        }
    }
}

#[test]
fn sweep_k0_equals_one_hot_wer() {
    let (model, store) = micro_model(RoutingVariant::Framewise, 32);
    let utts: Vec<_> = utterances(3, 3, 6).into_iter().filter(|u| u.language_id == 2).collect();
    let opts = DecodeOptions { mode: DecodeMode::Nar, beam_width: 1 };
    let sweep = prompt_sweep(&model, &store, &utts, 2, opts, &Sequential).unwrap();
    let one_hot = wer_report(&model, &store, &utts, &Prompt::OneHot, opts, &Sequential).unwrap();
    assert_eq!(sweep.rows[0].mean_wer, one_hot.aggregate);
    assert_eq!(sweep.rows[0].per_mask[0].0, "001");
    assert!(prompt_sweep(&model, &store, &utts, 0, opts, &Sequential).is_err());
}

#[test]
fn one_hot_wer_ignores_other_languages_adapters() {
    let (model, store) = micro_model(RoutingVariant::SummaryVector, 33);
    let utts: Vec<_> = utterances(3, 2, 7).into_iter().filter(|u| u.language_id == 0).collect();
    let mut scrambled = store.clone();
    for layer in &model.encoder.layers {
        let Some(ad) = &layer.adapters else { continue };
        for e in &ad.experts[1..] {
            for id in [e.down.weight, e.up.weight, e.up.bias] {
                scrambled.get_mut(id).data_mut().iter_mut().for_each(|v| *v = -*v * 7.0 + 1.0);
            }
        }
    }
    for mode in DecodeMode::ALL {
        let opts = DecodeOptions { mode, beam_width: 3 };
        let a = wer_report(&model, &store, &utts, &Prompt::OneHot, opts, &Sequential).unwrap();
        let b = wer_report(&model, &scrambled, &utts, &Prompt::OneHot, opts, &Sequential).unwrap();
        assert_eq!(a, b);
        let c = wer_report(&model, &scrambled, &utts, &Prompt::AllHot, opts, &Sequential).unwrap();
        assert_eq!(c.prompt, Prompt::AllHot);
    }
}

#[test]
fn layer_accuracy_counts_and_rejects_fixed_routing() {
    let (model, mut store) = zero_routing(RoutingVariant::SummaryVector);
    let classifier = model.encoder.layers[1].adapters.as_ref().unwrap().classifier.clone().unwrap();
    store.set(classifier.bias, Tensor::row_vector(&[0.0, 0.0, 4.0])).unwrap();
    let all = utterances(3, 2, 8);
    let picked: Vec<_> = [2usize, 2, 0]
        .iter()
        .enumerate()
        .map(|(i, &lang)| all.iter().filter(|u| u.language_id == lang).nth(i % 2).unwrap().clone())
        .collect();
    let acc = layer_classification_accuracy(&model, &store, &picked, &Prompt::AllHot, &Sequential).unwrap();
    assert_eq!(acc.len(), 1);
    assert_eq!(acc[0].layer, 2);
    assert!((acc[0].overall - 66.666_666_666).abs() < 1e-6);
    assert_eq!(acc[0].per_language, vec![(0, 0.0), (2, 100.0)]);

    let (uniform, ustore) = micro_model(RoutingVariant::Uniform, 1);
    assert_eq!(
        layer_classification_accuracy(&uniform, &ustore, &picked, &Prompt::AllHot, &Sequential).unwrap_err(),
        Error::NoClassifier("uniform")
    );
}
