//! Named parameter store and checkpoint text format.
//!
//! Checkpoint layout:
//!
//! ```text
//! advmtl-checkpoint v1 <TAB> count=<n>
//! config <TAB> <ModelConfig as one-line JSON>
//! <name> <TAB> <d0>x<d1>... <TAB> <16-hex-digit IEEE-754 bits> ...   (n lines)
//! ```
//!
//! Values are stored as raw bit patterns so a reload is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderDirection, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "advmtl-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// `(name, shape, fan_in)` of every parameter, in a fixed order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize| out.push((name, shape, fan_in));
    let d = cfg.enc_hidden;
    let dirs: &[&str] = match cfg.direction {
        EncoderDirection::Unidirectional => &["fwd"],
        EncoderDirection::Bidirectional => &["fwd", "bwd"],
    };
    for l in 0..cfg.enc_layers {
        let input = if l == 0 { cfg.feat_dim } else { d };
        for dir in dirs {
            push(format!("enc.{l}.{dir}.w_in"), vec![input, d], input + d);
            push(format!("enc.{l}.{dir}.w_rec"), vec![d, d], input + d);
            push(format!("enc.{l}.{dir}.b"), vec![d], input + d);
        }
    }
    let v = cfg.head_size();
    push("ctc.w".into(), vec![d, v], d);
    push("ctc.b".into(), vec![v], d);

    let (hd, a) = (cfg.dec_hidden, cfg.attn_dim);
    push("dec.embed".into(), vec![v, hd], 1);
    push("dec.w_in".into(), vec![hd, hd], 2 * hd + d);
    push("dec.w_rec".into(), vec![hd, hd], 2 * hd + d);
    push("dec.w_ctx".into(), vec![d, hd], 2 * hd + d);
    push("dec.b".into(), vec![hd], 2 * hd + d);
    push("dec.att_enc".into(), vec![d, a], d + hd);
    push("dec.att_dec".into(), vec![hd, a], d + hd);
    push("dec.att_b".into(), vec![a], d + hd);
    push("dec.att_v".into(), vec![a, 1], a);
    push("dec.out_state".into(), vec![hd, v], hd + d);
    push("dec.out_ctx".into(), vec![d, v], hd + d);
    push("dec.out_b".into(), vec![v], hd + d);

    let mut width = d;
    for i in 0..cfg.disc_layers {
        let next = if i + 1 == cfg.disc_layers {
            cfg.n_accents
        } else {
            cfg.disc_hidden
        };
        push(format!("disc.{i}.w"), vec![width, next], width);
        push(format!("disc.{i}.b"), vec![next], width);
        width = next;
    }
    out
}

impl ModelParams {
    /// Uniform in `±1/√fan_in`, drawn in layout order from a seeded stream.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in layout(config) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}\tcount={}", self.tensors.len());
        let cfg = serde_json::to_string(&self.config).expect("config serialises");
        let _ = writeln!(out, "config\t{cfg}");
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let vals: Vec<String> = t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            let _ = writeln!(out, "{name}\t{}\t{}", shape.join("x"), vals.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let count: usize = lines
            .next()
            .and_then(|h| h.strip_prefix(MAGIC))
            .and_then(|h| h.strip_prefix("\tcount="))
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::parse(1, "bad checkpoint header"))?;
        let config: ModelConfig = lines
            .next()
            .and_then(|l| l.strip_prefix("config\t"))
            .ok_or_else(|| Error::parse(2, "missing config line"))
            .and_then(|j| serde_json::from_str(j).map_err(|e| Error::parse(2, e.to_string())))?;
        config.validate()?;

        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let ln = i + 3;
            let line = lines.next().ok_or_else(|| Error::parse(ln, "truncated checkpoint"))?;
            let mut parts = line.split('\t');
            let (Some(name), Some(shape), Some(vals), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(ln, "expected name, shape and values"));
            };
            let shape: Vec<usize> = if shape.is_empty() {
                vec![]
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::parse(ln, "bad shape")))
                    .collect::<Result<_>>()?
            };
            let data: Vec<f64> = vals
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|h| {
                    if h.len() != 16 {
                        return Err(Error::parse(ln, "bad value encoding"));
                    }
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| Error::parse(ln, "bad value encoding"))
                })
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::parse(ln, e.to_string()))?;
            if !t.is_finite() {
                return Err(Error::parse(ln, "non-finite parameter"));
            }
            tensors.insert(name.to_string(), t);
        }
        if lines.next().is_some() {
            return Err(Error::parse(count + 3, "trailing content"));
        }
        let expected = layout(&config);
        if expected.len() != tensors.len()
            || expected
                .iter()
                .any(|(n, s, _)| tensors.get(n).map(Tensor::shape) != Some(s.as_slice()))
        {
            return Err(Error::parse(0, "parameter set does not match config"));
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Per-parameter gradient accumulator mirroring a [`ModelParams`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Whether every entry of every parameter whose name starts with `prefix` is zero.
    pub fn all_zero(&self, prefix: &str) -> bool {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .all(|(_, t)| t.data().iter().all(|&x| x == 0.0))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_finite() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, ModelParams::init(&cfg).unwrap());
        assert!(a.is_finite());
        let other = ModelParams::init(&ModelConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn discriminator_has_five_layers() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        assert_eq!(
            p.names()
                .filter(|n| n.starts_with("disc.") && n.ends_with(".w"))
                .count(),
            5
        );
        assert_eq!(p.get("disc.4.w").unwrap().shape(), &[32, 2]);
        assert_eq!(p.get("ctc.w").unwrap().shape(), &[32, 41]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            direction: EncoderDirection::Unidirectional,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg).unwrap();
        let text = p.to_text();
        let back = ModelParams::from_text(&text).unwrap();
        for ((na, a), (nb, b)) in p.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let text = ModelParams::init(&ModelConfig::default()).unwrap().to_text();
        for cut in [text.len() / 3, text.len() - 40, 10] {
            assert!(ModelParams::from_text(&text[..cut]).is_err());
        }
        let missing_line: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(ModelParams::from_text(&missing_line).is_err());
    }
}
