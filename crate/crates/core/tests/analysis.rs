use brst::analysis::{
    dump_activations, horizontal_similarity, linearity_flags, vertical_similarity, ADM_SUFFIX,
};
use brst::corpus::{generate_toy_utterances, ToyCorpusSpec};
use brst::features::apply_cmvn;
use brst::model::{Model, ModelConfig, Vocabulary};
use brst::presets::{Architecture, ExperimentPreset};
use brst::train::Example;

fn examples(n: usize) -> Vec<Example> {
    let spec = ToyCorpusSpec { num_utterances: n, max_len: 3, ..Default::default() };
    generate_toy_utterances(&spec)
        .unwrap()
        .into_iter()
        .map(|u| Example { utt_id: u.utt_id, features: apply_cmvn(&u.features), target: u.tokens })
        .collect()
}

fn twelve_deep(arch: Architecture) -> ModelConfig {
    ModelConfig { enc_repeats: 12, ..ExperimentPreset::toy(arch).model_config() }
}

fn model(cfg: &ModelConfig, seed: u64) -> Model {
    Model::build(cfg, Vocabulary::synthetic(cfg.vocab_size).unwrap(), seed).unwrap()
}

#[test]
fn dump_sites_follow_repetitions_and_adapters() {
    let eval = examples(3);
    let br = dump_activations(&model(&twelve_deep(Architecture::Br), 1), "br", &eval, 10_000, 0).unwrap();
    assert_eq!(br.encoder.len(), 12);
    assert_eq!(br.encoder[11].0, "enc-12");

    let bra = dump_activations(&model(&twelve_deep(Architecture::BraE), 1), "bra", &eval, 10_000, 0).unwrap();
    assert_eq!(bra.encoder.len(), 24);
    assert_eq!(bra.encoder[1].0, format!("enc-1{ADM_SUFFIX}"));
    assert_eq!(bra.decoder.len(), 2);

    let rows = br.encoder_input.rows();
    assert!(bra.labels().all(|l| bra.site(l).unwrap().rows() > 0));
    assert!(br.encoder.iter().all(|(_, t)| t.rows() == rows));

    let report = horizontal_similarity(&br, &bra).unwrap();
    assert_eq!(report.push_away.len(), 12);
    assert_eq!(report.entries.len(), 12 + 12 + 2);
    assert!(report.push_away.iter().all(|(_, p)| (0.0..=1.0).contains(p)));
}

#[test]
fn max_rows_boundary() {
    let eval = examples(3);
    let m = model(&ExperimentPreset::toy(Architecture::BraE).model_config(), 2);
    let full = dump_activations(&m, "a", &eval, usize::MAX, 0).unwrap();
    let total = full.encoder_input.rows();

    let exact = dump_activations(&m, "a", &eval, total, 0).unwrap();
    assert_eq!(exact, full);

    let fewer = dump_activations(&m, "a", &eval, total - 1, 0).unwrap();
    assert_eq!(fewer.encoder_input.rows(), total - 1);
    assert!(fewer.encoder.iter().all(|(_, t)| t.rows() == total - 1));
    // kept rows are rows of the full dump, in order
    let mut j = 0;
    for i in 0..fewer.encoder_input.rows() {
        while full.encoder_input.row(j) != fewer.encoder_input.row(i) {
            j += 1;
        }
        j += 1;
    }
    assert!(j <= total);
}

#[test]
fn distinct_seeds_are_not_identical() {
    let eval = examples(4);
    let cfg = ExperimentPreset::toy(Architecture::Br).model_config();
    let a = dump_activations(&model(&cfg, 3), "a", &eval, 10_000, 0).unwrap();
    let b = dump_activations(&model(&cfg, 4), "b", &eval, 10_000, 0).unwrap();
    let cross = horizontal_similarity(&a, &b).unwrap();
    assert!(cross.entries.iter().all(|e| e.cka < 1.0 - 1e-6), "{:?}", cross.entries);
    let same = horizontal_similarity(&a, &a).unwrap();
    assert!(same.entries.iter().all(|e| (e.cka - 1.0).abs() <= 1e-12));
}

#[test]
fn utterance_order_does_not_change_cka() {
    let eval = examples(4);
    let mut reversed = eval.clone();
    reversed.reverse();
    let m = model(&ExperimentPreset::toy(Architecture::BraE).model_config(), 5);
    let fwd = vertical_similarity(&dump_activations(&m, "f", &eval, 10_000, 0).unwrap()).unwrap();
    let rev = vertical_similarity(&dump_activations(&m, "r", &reversed, 10_000, 0).unwrap()).unwrap();
    assert_eq!(fwd.entries.len(), rev.entries.len());
    for (x, y) in fwd.entries.iter().zip(&rev.entries) {
        assert_eq!(x.site_b, y.site_b);
        assert!((x.cka - y.cka).abs() <= 1e-10, "{} {} {}", x.site_b, x.cka, y.cka);
    }
    let flags = linearity_flags(&fwd, 1.0).unwrap();
    assert_eq!(flags.len(), fwd.entries.len());
}
