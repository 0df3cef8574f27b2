//! Synthetic accented-speech corpora and their on-disk text format.
//!
//! Split file layout (UTF-8, `\n` line endings, fields separated by `\t`):
//!
//! ```text
//! advmtl-dataset v1 <TAB> split=<name> <TAB> feat_dim=<F> <TAB> vocab=<hash> <TAB> seed=<s> <TAB> count=<n>
//! <id> <TAB> <accent> <TAB> <space-joined words> <TAB> <T>
//! <F space-separated decimals>      (T lines)
//! ...
//! ```
//!
//! Decimals use the shortest representation that parses back to the same
//! `f64`, so load followed by save reproduces the file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{AccentLabel, RenderConfig, Renderer, N_ACCENTS};
use super::vocab::{Transcript, Vocab};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "advmtl-dataset v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub accent: AccentLabel,
    pub transcript: Transcript,
    /// `T × F` feature matrix.
    pub features: Tensor,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

impl LenRange {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min == 0 || min > max {
            return Err(Error::InvalidConfig(format!("bad length range {min}..={max}")));
        }
        Ok(LenRange { min, max })
    }

    pub fn width(&self) -> usize {
        self.max - self.min + 1
    }
}

/// Generation settings for `gen-data`, also persisted next to the splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub len_range: LenRange,
    pub n_targets: usize,
    pub target_len_range: LenRange,
    pub render: RenderConfig,
    pub vocab: Vocab,
    /// Draw train and valid transcripts over content and lorem words, so the
    /// lorem attack targets are speakable. Test transcripts stay content-only.
    pub train_lorem_words: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            len_range: LenRange { min: 2, max: 6 },
            n_targets: 20,
            target_len_range: LenRange { min: 2, max: 6 },
            render: RenderConfig::default(),
            vocab: Vocab::default(),
            train_lorem_words: true,
        }
    }
}

/// Vocabulary plus renderer: everything needed to synthesise data.
#[derive(Clone, Debug)]
pub struct SpeechWorld {
    pub vocab: Vocab,
    pub renderer: Renderer,
}

impl SpeechWorld {
    pub fn new(vocab: Vocab, render: RenderConfig) -> Result<Self> {
        let renderer = Renderer::new(render, &vocab)?;
        Ok(SpeechWorld { vocab, renderer })
    }

    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        Self::new(cfg.vocab.clone(), cfg.render.clone())
    }

    pub fn feat_dim(&self) -> usize {
        self.renderer.config().feat_dim
    }

    /// Uniform words and lengths, balanced accents. Train and valid draw over all
    /// words, test over content words only.
    pub fn gen_dataset(
        &self,
        seed: u64,
        n_train: usize,
        n_valid: usize,
        n_test: usize,
        len_range: LenRange,
    ) -> Result<DatasetSplit> {
        self.gen_dataset_with(seed, n_train, n_valid, n_test, len_range, true)
    }

    /// As [`gen_dataset`](Self::gen_dataset); `train_lorem_words = false` keeps
    /// every split content-only.
    pub fn gen_dataset_with(
        &self,
        seed: u64,
        n_train: usize,
        n_valid: usize,
        n_test: usize,
        len_range: LenRange,
        train_lorem_words: bool,
    ) -> Result<DatasetSplit> {
        if n_train == 0 || n_valid == 0 || n_test == 0 {
            return Err(Error::InvalidConfig("split sizes must be >= 1".into()));
        }
        let content = self.vocab.content_len();
        let train_words = if train_lorem_words {
            self.vocab.n_words()
        } else {
            content
        };
        Ok(DatasetSplit {
            seed,
            train: self.gen_split("train", 0, seed, n_train, len_range, train_words)?,
            valid: self.gen_split("valid", 1, seed, n_valid, len_range, train_words)?,
            test: self.gen_split("test", 2, seed, n_test, len_range, content)?,
        })
    }

    fn gen_split(
        &self,
        name: &str,
        stream: u64,
        seed: u64,
        n: usize,
        len_range: LenRange,
        n_words: usize,
    ) -> Result<Vec<Utterance>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n)
            .map(|i| {
                let accent = i % N_ACCENTS;
                let len = rng.random_range(len_range.min..=len_range.max);
                let transcript = Transcript((0..len).map(|_| rng.random_range(0..n_words)).collect());
                let features = self.renderer.render_utterance(&transcript, accent, &mut rng)?;
                Ok(Utterance {
                    id: format!("{name}-{i:05}"),
                    accent,
                    transcript,
                    features,
                })
            })
            .collect()
    }

    pub fn gen_from_config(&self, cfg: &DataConfig) -> Result<DatasetSplit> {
        self.gen_dataset_with(
            cfg.seed,
            cfg.n_train,
            cfg.n_valid,
            cfg.n_test,
            cfg.len_range,
            cfg.train_lorem_words,
        )
    }
}

pub fn write_split(name: &str, seed: u64, utts: &[Utterance], feat_dim: usize, vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MAGIC}\tsplit={name}\tfeat_dim={feat_dim}\tvocab={}\tseed={seed}\tcount={}",
        vocab.hash(),
        utts.len()
    );
    for u in utts {
        if u.features.cols() != feat_dim {
            return Err(Error::shape(
                "write_split",
                format!("utterance {} has {} columns", u.id, u.features.cols()),
            ));
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            u.id,
            u.accent,
            vocab.render(&u.transcript),
            u.frames()
        );
        for t in 0..u.frames() {
            let row: Vec<String> = u.features.row(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parsed split file: (name, seed, utterances).
pub fn read_split(text: &str, vocab: &Vocab) -> Result<(String, u64, Vec<Utterance>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.first() != Some(&MAGIC) || fields.len() != 6 {
        return Err(Error::parse(1, "bad header"));
    }
    let field = |i: usize, key: &str| -> Result<&str> {
        fields[i]
            .strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .ok_or_else(|| Error::parse(1, format!("expected {key}=")))
    };
    let name = field(1, "split")?.to_string();
    let feat_dim: usize = field(2, "feat_dim")?.parse().map_err(|_| Error::parse(1, "feat_dim"))?;
    if field(3, "vocab")? != vocab.hash() {
        return Err(Error::parse(1, "vocabulary hash mismatch"));
    }
    let seed: u64 = field(4, "seed")?.parse().map_err(|_| Error::parse(1, "seed"))?;
    let count: usize = field(5, "count")?.parse().map_err(|_| Error::parse(1, "count"))?;

    let mut utts = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, head) = lines.next().ok_or_else(|| Error::parse(0, "unexpected end of file"))?;
        let parts: Vec<&str> = head.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::parse(ln, "utterance header needs 4 fields"));
        }
        let accent: usize = parts[1].parse().map_err(|_| Error::parse(ln, "accent"))?;
        if accent >= N_ACCENTS {
            return Err(Error::parse(ln, "accent out of range"));
        }
        let transcript = vocab.parse(parts[2]).map_err(|e| Error::parse(ln, e.to_string()))?;
        let frames: usize = parts[3].parse().map_err(|_| Error::parse(ln, "frame count"))?;
        let mut data = Vec::with_capacity(frames * feat_dim);
        for _ in 0..frames {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| Error::parse(ln, "truncated feature block"))?;
            let before = data.len();
            for tok in row.split(' ') {
                data.push(tok.parse::<f64>().map_err(|_| Error::parse(ln, "bad decimal"))?);
            }
            if data.len() - before != feat_dim {
                return Err(Error::parse(ln, "wrong number of features"));
            }
        }
        utts.push(Utterance {
            id: parts[0].to_string(),
            accent,
            transcript,
            features: Tensor::matrix(frames, feat_dim, data)?,
        });
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(ln, "trailing content"));
    }
    Ok((name, seed, utts))
}

impl DatasetSplit {
    pub fn splits(&self) -> [(&'static str, &[Utterance]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    pub fn save(&self, dir: &Path, feat_dim: usize, vocab: &Vocab) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, utts) in self.splits() {
            let text = write_split(name, self.seed, utts, feat_dim, vocab)?;
            fs::write(dir.join(format!("{name}.txt")), text)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, vocab: &Vocab) -> Result<Self> {
        let read = |name: &str| -> Result<(u64, Vec<Utterance>)> {
            let text = fs::read_to_string(dir.join(format!("{name}.txt")))?;
            let (got, seed, utts) = read_split(&text, vocab)?;
            if got != name {
                return Err(Error::parse(1, format!("expected split {name}, found {got}")));
            }
            Ok((seed, utts))
        };
        let (seed, train) = read("train")?;
        let (_, valid) = read("valid")?;
        let (_, test) = read("test")?;
        Ok(DatasetSplit {
            seed,
            train,
            valid,
            test,
        })
    }
}
