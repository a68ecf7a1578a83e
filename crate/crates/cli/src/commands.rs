use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use brst::analysis::{
    dump_activations, horizontal_similarity, linearity_flags, render_svg, vertical_similarity,
    write_report_csv,
};
use brst::corpus::{self, load_examples, load_features, read_manifest, ToyCorpusSpec};
use brst::decode::{
    compute_cer, corpus_cer, decode_features, write_cer_csv, write_hypothesis_line, CerStats,
    DecodeOptions,
};
use brst::model::{load_partial_checkpoint, Checkpoint, Model, ParamReport, Vocabulary};
use brst::presets::{Architecture, ExperimentPreset};
use brst::train::{
    read_config_file, render_config, run_training, OptimizerState, RunOptions,
};

use crate::{AnalyzeArgs, AnalyzeMode, CountArgs, DecodeArgs, EvaluateArgs, GenCorpusArgs, TrainArgs, WarmStartArgs};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn read_vocab_file(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tokens: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    Ok(Vocabulary::from_tokens(tokens)?)
}

/// The synthetic vocabulary when it covers every transcript token, else
/// the sorted set of transcript tokens.
fn infer_vocab(entries: &[corpus::ManifestEntry], size: usize) -> Result<Vocabulary> {
    let used: BTreeSet<&str> = entries
        .iter()
        .filter_map(|e| e.transcript.as_deref())
        .flat_map(str::split_whitespace)
        .collect();
    if let Ok(v) = Vocabulary::synthetic(size) {
        if used.iter().all(|t| v.id(t).is_some()) {
            return Ok(v);
        }
    }
    Ok(Vocabulary::with_specials(&used.into_iter().collect::<Vec<_>>())?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut model_cfg = a.preset.model_config();
    let mut train_cfg = a.preset.train_config();
    if let Some(path) = &a.config {
        read_config_file(path, &mut model_cfg, &mut train_cfg)?;
    }
    if let Some(v) = a.lambda {
        train_cfg.lambda = v;
    }
    if let Some(v) = a.grad_clip {
        train_cfg.grad_clip = v;
    }
    if let Some(v) = a.seed {
        train_cfg.seed = v;
        train_cfg.model_seed = v;
    }
    if let Some(v) = a.max_steps {
        train_cfg.max_steps = v;
    }
    train_cfg.validate()?;

    // everything that can fail on inputs happens before the output directory exists
    let entries = read_manifest(&a.manifest)?;
    let (model, resume) = if let Some(path) = &a.resume {
        let model = Model::load(path)?;
        let opt_path = path.with_extension("opt.brst");
        let opt = OptimizerState::from_checkpoint(&Checkpoint::read(&opt_path)?, model.params())?;
        (model, Some(opt))
    } else if let Some(path) = &a.init {
        (Model::load(path)?, None)
    } else {
        let vocab = match &a.vocab {
            Some(p) => read_vocab_file(p)?,
            None => infer_vocab(&entries, model_cfg.vocab_size)?,
        };
        if vocab.len() != model_cfg.vocab_size {
            log::info!("vocab_size set to {} from the transcripts", vocab.len());
            model_cfg.vocab_size = vocab.len();
        }
        (Model::build(&model_cfg, vocab, train_cfg.model_seed)?, None)
    };
    let examples = load_examples(&entries, model.vocab())?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.txt"), render_config(model.config(), &train_cfg))?;
    let report = model.count_params();
    log::info!(
        "training {} ({} parameters, {} encoder block sets) on {} utterances",
        a.preset,
        report.total(),
        report.encoder_block_sets,
        examples.len()
    );
    let outcome = run_training(
        model,
        &examples,
        &train_cfg,
        RunOptions {
            out_dir: Some(a.out.clone()),
            resume,
        },
    )?;
    if let Some(last) = outcome.metrics.last() {
        log::info!("finished at step {} with loss {:.4}", last.step, last.loss);
    }
    log::info!("smoothed loss non-increasing: {}", outcome.loss_trend_non_increasing);
    Ok(())
}

fn cer_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".cer.csv");
    PathBuf::from(s)
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let entries = read_manifest(&a.manifest)?;
    let opts = DecodeOptions {
        beam_size: a.beam,
        ctc_nbest: a.nbest,
        rescore_weight: a.rescore_weight,
        max_len: a.max_len,
        length_bonus: a.length_bonus,
    };
    if !(0.0..=1.0).contains(&opts.rescore_weight) {
        bail!("--rescore-weight must lie in [0, 1]");
    }
    if entries.is_empty() {
        log::warn!("manifest {} is empty", a.manifest.display());
    }
    let results: Vec<_> = entries
        .par_iter()
        .map(|e| -> Result<_> {
            let feats = load_features(e)?;
            let hyp = decode_features(&model, &feats, a.method, &opts)
                .map_err(|err| err.for_utterance(&e.utt_id))?;
            Ok(hyp)
        })
        .collect::<Result<_>>()?;

    create_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for (e, h) in entries.iter().zip(&results) {
        write_hypothesis_line(&mut w, &e.utt_id, &model.vocab().decode(&h.tokens), h.score)?;
    }
    w.flush()?;

    if !entries.is_empty() && entries.iter().all(|e| e.transcript.is_some()) {
        let mut rows = Vec::with_capacity(entries.len());
        for (e, h) in entries.iter().zip(&results) {
            let reference = model.vocab().encode(e.transcript.as_deref().unwrap_or(""))?;
            rows.push((e.utt_id.clone(), compute_cer(&reference, &h.tokens)));
        }
        write_cer(&cer_path(&a.out), &rows)?;
    }
    Ok(())
}

fn write_cer(path: &Path, rows: &[(String, CerStats)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_cer_csv(&mut w, rows)?;
    w.flush()?;
    let stats: Vec<CerStats> = rows.iter().map(|(_, s)| *s).collect();
    println!("CER {:.4} over {} utterances", corpus_cer(&stats), rows.len());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let entries = read_manifest(&a.manifest)?;
    let text = fs::read_to_string(&a.hyps).with_context(|| format!("reading {}", a.hyps.display()))?;
    let mut hyps = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            bail!("{} line {}: expected utt_id, hypothesis, score", a.hyps.display(), n + 1);
        }
        hyps.insert(fields[0].to_string(), fields[1].to_string());
    }
    // symbols compare as strings unless a checkpoint vocabulary is given
    let vocab = a.checkpoint.as_deref().map(Model::load).transpose()?.map(|m| m.vocab().clone());
    let mut rows = Vec::new();
    for e in &entries {
        let Some(reference) = e.transcript.as_deref() else {
            bail!("utterance {} has no reference transcript", e.utt_id);
        };
        let Some(hyp) = hyps.get(&e.utt_id) else {
            bail!("utterance {} has no hypothesis", e.utt_id);
        };
        let stats = match &vocab {
            Some(v) => compute_cer(&v.encode(reference)?, &v.encode(hyp)?),
            None => {
                let r: Vec<&str> = reference.split_whitespace().collect();
                let h: Vec<&str> = hyp.split_whitespace().collect();
                compute_cer(&r, &h)
            }
        };
        rows.push((e.utt_id.clone(), stats));
    }
    create_parent(&a.out)?;
    write_cer(&a.out, &rows)
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let model_a = Model::load(&a.checkpoint)?;
    let model_b = match (a.mode, &a.checkpoint_b) {
        (AnalyzeMode::Horizontal, Some(p)) => Some(Model::load(p)?),
        (AnalyzeMode::Horizontal, None) => bail!("horizontal mode needs --checkpoint-b"),
        (AnalyzeMode::Vertical, _) => None,
    };
    let entries = read_manifest(&a.manifest)?;
    let examples = load_examples(&entries, model_a.vocab())?;
    let dump_a = dump_activations(&model_a, "a", &examples, a.max_rows, a.seed)?;
    let (report, title) = match &model_b {
        Some(b) => {
            let dump_b = dump_activations(b, "b", &examples, a.max_rows, a.seed)?;
            (horizontal_similarity(&dump_a, &dump_b)?, "horizontal similarity")
        }
        None => (vertical_similarity(&dump_a)?, "vertical similarity"),
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(File::create(a.out.join("cka.csv"))?);
    write_report_csv(&mut w, &report)?;
    w.flush()?;
    fs::write(a.out.join("cka.svg"), render_svg(&report, title))?;
    match a.mode {
        AnalyzeMode::Horizontal => {
            let mut w = BufWriter::new(File::create(a.out.join("push_away.csv"))?);
            writeln!(w, "site,push_away")?;
            for (site, p) in &report.push_away {
                writeln!(w, "{site},{p}")?;
            }
            w.flush()?;
        }
        AnalyzeMode::Vertical => {
            let flags = linearity_flags(&report, a.threshold)?;
            let mut w = BufWriter::new(File::create(a.out.join("linearity.csv"))?);
            writeln!(w, "site,cka,linear")?;
            for (e, (_, f)) in report.entries.iter().zip(&flags) {
                writeln!(w, "{},{},{}", e.site_b, e.cka, f)?;
            }
            w.flush()?;
            let n = flags.iter().filter(|(_, f)| *f).count();
            println!("{n} of {} sites at or above CKA {}", flags.len(), a.threshold);
        }
    }
    Ok(())
}

pub fn count_params(a: CountArgs) -> Result<()> {
    let (cfg, baseline) = match (&a.preset, &a.checkpoint) {
        (Some(p), _) => (
            p.model_config(),
            ExperimentPreset { arch: Architecture::Baseline, scale: p.scale }.model_config(),
        ),
        (None, Some(path)) => {
            let cfg = Checkpoint::read(path)?
                .config
                .context("checkpoint has no model config")?;
            let baseline = brst::model::ModelConfig {
                enc_blocks: cfg.encoder_depth(),
                dec_blocks: cfg.decoder_depth(),
                enc_repeats: 1,
                dec_repeats: 1,
                enc_adapters: false,
                dec_adapters: false,
                ..cfg.clone()
            };
            (cfg, baseline)
        }
        (None, None) => bail!("give --preset or --checkpoint"),
    };
    let report = ParamReport::from_config(&cfg);
    let base = ParamReport::from_config(&baseline);
    let mut csv = String::from("component,params,baseline_params,ratio_vs_baseline\n");
    println!("{:<18} {:>12} {:>12} {:>8}", "component", "params", "baseline", "ratio");
    let rows = report
        .counts
        .iter()
        .map(|(c, n)| (c.label().to_string(), *n, base.get(*c)))
        .chain(std::iter::once(("total".to_string(), report.total(), base.total())));
    for (label, n, b) in rows {
        // components absent from the baseline get an empty ratio
        let (shown, field) = if b == 0 {
            ("-".to_string(), String::new())
        } else {
            let r = n as f64 / b as f64;
            (format!("{r:.4}"), r.to_string())
        };
        println!("{label:<18} {n:>12} {b:>12} {shown:>8}");
        csv.push_str(&format!("{label},{n},{b},{field}\n"));
    }
    println!(
        "distinct block sets: encoder {}, decoder {}",
        report.encoder_block_sets, report.decoder_block_sets
    );
    if let Some(out) = &a.out {
        create_parent(out)?;
        fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let spec = ToyCorpusSpec {
        num_utterances: a.num_utterances,
        vocab_size: a.vocab_size,
        seed: a.seed,
        noise_sigma: a.noise,
        ..ToyCorpusSpec::default()
    };
    let entries = corpus::generate_toy_corpus(&spec, &a.out)?;
    println!("wrote {} utterances to {}", entries.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

pub fn warm_start(a: WarmStartArgs) -> Result<()> {
    let source = Checkpoint::read(&a.checkpoint)?;
    let vocab = source.vocab.clone().context("source checkpoint has no vocabulary")?;
    let mut cfg = a.preset.model_config();
    cfg.vocab_size = vocab.len();
    let fresh = Model::build(&cfg, vocab, a.seed)?;
    let (model, report) = load_partial_checkpoint(&fresh, &source)?;
    create_parent(&a.out)?;
    model.save(&a.out)?;
    let provenance = serde_json::json!({
        "source": a.checkpoint.display().to_string(),
        "target_preset": a.preset.to_string(),
        "copied": report.copied,
        "fresh": report.fresh,
        "unused": report.unused,
        "fresh_adapters": report.fresh_adapters(),
    });
    let mut prov_path = a.out.as_os_str().to_owned();
    prov_path.push(".provenance.json");
    fs::write(&prov_path, serde_json::to_string_pretty(&provenance)?)?;
    println!(
        "copied {} arrays, {} fresh ({} adapters)",
        report.copied.len(),
        report.fresh.len(),
        report.fresh_adapters()
    );
    Ok(())
}
