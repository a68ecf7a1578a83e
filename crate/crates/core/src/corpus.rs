//! Manifests, utterance loading and the synthetic toy corpus.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{apply_cmvn, compute_fbank, FeatureMatrix, Waveform, NUM_MEL_BINS};
use crate::model::{subsampled_len, Vocabulary};
use crate::tensor::Tensor;
use crate::train::Example;

/// Where an utterance's input lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Audio(PathBuf),
    Features(PathBuf),
}

impl Source {
    /// `.wav` files are audio; anything else is read as FBNK features.
    pub fn from_path(path: PathBuf) -> Self {
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav {
            Source::Audio(path)
        } else {
            Source::Features(path)
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            Source::Audio(p) | Source::Features(p) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub source: Source,
    /// Whitespace-separated tokens; absent for unlabelled audio.
    pub transcript: Option<String>,
}

/// Parses tab-separated `utt_id, path[, transcript]` lines. Relative paths
/// are taken relative to `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Input(format!(
                "manifest line {}: expected 2 or 3 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        }
        let utt_id = fields[0].trim().to_string();
        if utt_id.is_empty() {
            return Err(Error::Input(format!("manifest line {}: empty utt_id", n + 1)));
        }
        if !seen.insert(utt_id.clone()) {
            return Err(Error::Input(format!("manifest line {}: duplicate utt_id {utt_id}", n + 1)));
        }
        let raw = Path::new(fields[1].trim());
        let path = if raw.is_absolute() { raw.to_path_buf() } else { base.join(raw) };
        out.push(ManifestEntry {
            utt_id,
            source: Source::from_path(path),
            transcript: fields.get(2).map(|t| t.trim().to_string()),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Renders entries with paths relative to `base` where possible.
pub fn render_manifest(entries: &[ManifestEntry], base: &Path) -> String {
    let mut out = String::new();
    for e in entries {
        let p = e.source.path();
        let shown = p.strip_prefix(base).unwrap_or(p);
        out.push_str(&format!("{}\t{}", e.utt_id, shown.display()));
        if let Some(t) = &e.transcript {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
    }
    out
}

/// Normalized features of one manifest entry.
pub fn load_features(entry: &ManifestEntry) -> Result<FeatureMatrix> {
    let raw = match &entry.source {
        Source::Audio(p) => Waveform::read_wav(p).and_then(|w| compute_fbank(&w)),
        Source::Features(p) => FeatureMatrix::read_fbnk(p),
    };
    raw.map(|f| apply_cmvn(&f)).map_err(|e| e.for_utterance(&entry.utt_id))
}

/// Features plus the encoded transcript, which must be present.
pub fn load_example(entry: &ManifestEntry, vocab: &Vocabulary) -> Result<Example> {
    let text = entry.transcript.as_deref().ok_or_else(|| {
        Error::Input("no transcript".into()).for_utterance(&entry.utt_id)
    })?;
    let target = vocab.encode(text).map_err(|e| e.for_utterance(&entry.utt_id))?;
    Ok(Example {
        utt_id: entry.utt_id.clone(),
        features: load_features(entry)?,
        target,
    })
}

pub fn load_examples(entries: &[ManifestEntry], vocab: &Vocabulary) -> Result<Vec<Example>> {
    entries.iter().map(|e| load_example(e, vocab)).collect()
}

/// Every token writes a fixed random `template_frames × 80` pattern plus
/// Gaussian noise; utterances are padded with near-silent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub num_utterances: usize,
    /// Includes blank, sos and eos.
    pub vocab_size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub template_frames: usize,
    pub pad_frames: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            num_utterances: 100,
            vocab_size: 30,
            seed: 0,
            noise_sigma: 0.1,
            min_len: 2,
            max_len: 6,
            template_frames: 8,
            pad_frames: 4,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} leaves no tokens", self.vocab_size));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.template_frames < 8 {
            return fail("templates need at least 8 frames to survive x4 subsampling".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn frames_for(&self, len: usize) -> usize {
        self.template_frames * len + 2 * self.pad_frames
    }
}

/// A generated utterance before it is written out.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub utt_id: String,
    pub tokens: Vec<usize>,
    pub features: FeatureMatrix,
}

pub fn toy_vocabulary(spec: &ToyCorpusSpec) -> Result<Vocabulary> {
    Vocabulary::synthetic(spec.vocab_size)
}

pub fn generate_toy_utterances(spec: &ToyCorpusSpec) -> Result<Vec<ToyUtterance>> {
    spec.validate()?;
    let first = Vocabulary::EOS_ID + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Vec<f64>> = (first..spec.vocab_size)
        .map(|_| {
            (0..spec.template_frames * NUM_MEL_BINS)
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.num_utterances);
    for i in 0..spec.num_utterances {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(first..spec.vocab_size)).collect();
        let frames = spec.frames_for(len);
        let mut data = vec![0.0; frames * NUM_MEL_BINS];
        for (k, &tok) in tokens.iter().enumerate() {
            let start = (spec.pad_frames + k * spec.template_frames) * NUM_MEL_BINS;
            let t = &templates[tok - first];
            data[start..start + t.len()].copy_from_slice(t);
        }
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
        let features = FeatureMatrix::new(Tensor::new(vec![frames, NUM_MEL_BINS], data)?)?;
        debug_assert!(subsampled_len(frames) >= 2 * len + 1);
        out.push(ToyUtterance {
            utt_id: format!("toy{i:04}"),
            tokens,
            features,
        });
    }
    Ok(out)
}

/// Writes `manifest.tsv` and one `.fbnk` file per utterance into `out_dir`.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let vocab = toy_vocabulary(spec)?;
    let utts = generate_toy_utterances(spec)?;
    let feat_dir = out_dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let path = feat_dir.join(format!("{}.fbnk", u.utt_id));
        u.features.write_fbnk(&path)?;
        entries.push(ManifestEntry {
            utt_id: u.utt_id.clone(),
            source: Source::Features(path),
            transcript: Some(vocab.decode(&u.tokens)),
        });
    }
    let manifest = out_dir.join("manifest.tsv");
    fs::write(&manifest, render_manifest(&entries, out_dir)).map_err(|e| Error::io(&manifest, e))?;
    Ok(entries)
}
