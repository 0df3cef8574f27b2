use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vocab::{Transcript, Vocab};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type AccentLabel = usize;

pub const N_ACCENTS: usize = 2;

/// Constants of the synthetic speech world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub feat_dim: usize,
    pub noise_sigma: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Weight of the direction every prototype shares (before normalisation).
    pub shared_component: f64,
    /// Scale of the random part of each accent map `I + s·G/√F`.
    pub accent_strength: f64,
    /// Seeds prototypes and accent maps; independent of the sampling seed.
    pub world_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            feat_dim: 16,
            noise_sigma: 0.05,
            min_frames: 3,
            max_frames: 6,
            shared_component: 0.6,
            accent_strength: 0.5,
            world_seed: 1234,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::InvalidConfig(
                "feat_dim >= 1 and 1 <= min_frames <= max_frames required".into(),
            ));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || !(0.0..1.0).contains(&self.shared_component) {
            return Err(Error::InvalidConfig(
                "noise_sigma >= 0 and shared_component in [0, 1) required".into(),
            ));
        }
        Ok(())
    }
}

/// Turns word sequences into `T × F` feature matrices.
#[derive(Clone, Debug)]
pub struct Renderer {
    config: RenderConfig,
    /// One unit-norm row per word id.
    prototypes: Vec<Vec<f64>>,
    /// Row-major `F × F` map per accent.
    accent_maps: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

impl Renderer {
    pub fn new(config: RenderConfig, vocab: &Vocab) -> Result<Self> {
        config.validate()?;
        let f = config.feat_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed);
        let mut shared = gaussian_vec(&mut rng, f);
        normalize(&mut shared);
        let own = (1.0 - config.shared_component.powi(2)).sqrt();
        let prototypes = (0..vocab.n_words())
            .map(|_| {
                let mut r = gaussian_vec(&mut rng, f);
                normalize(&mut r);
                let mut p: Vec<f64> = shared
                    .iter()
                    .zip(&r)
                    .map(|(s, r)| config.shared_component * s + own * r)
                    .collect();
                normalize(&mut p);
                p
            })
            .collect();
        let scale = config.accent_strength / (f as f64).sqrt();
        let accent_maps = (0..N_ACCENTS)
            .map(|_| {
                let mut m: Vec<f64> = gaussian_vec(&mut rng, f * f).into_iter().map(|g| scale * g).collect();
                for i in 0..f {
                    m[i * f + i] += 1.0;
                }
                m
            })
            .collect();
        Ok(Renderer {
            config,
            prototypes,
            accent_maps,
        })
    }

    pub fn config(&self) -> &RenderConfig {
        &self.config
    }

    pub fn prototype(&self, word: usize) -> Option<&[f64]> {
        self.prototypes.get(word).map(Vec::as_slice)
    }

    /// The accent's transform applied to a word prototype, before noise.
    pub fn clean_frame(&self, word: usize, accent: AccentLabel) -> Result<Vec<f64>> {
        let p = self.prototype(word).ok_or(Error::UnknownToken(word))?;
        let a = self.accent_maps.get(accent).ok_or(Error::LabelOutOfRange {
            label: accent,
            classes: N_ACCENTS,
        })?;
        let f = self.config.feat_dim;
        Ok((0..f).map(|i| (0..f).map(|j| a[i * f + j] * p[j]).sum()).collect())
    }

    /// Each word emits 3..=6 (configurable) frames of its accented prototype plus
    /// i.i.d. Gaussian noise.
    pub fn render_utterance(&self, tokens: &Transcript, accent: AccentLabel, rng: &mut impl Rng) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Empty("transcript"));
        }
        let f = self.config.feat_dim;
        let mut data = Vec::new();
        let mut frames = 0;
        for &w in tokens.iter() {
            let clean = self.clean_frame(w, accent)?;
            let len = rng.random_range(self.config.min_frames..=self.config.max_frames);
            for _ in 0..len {
                for c in &clean {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(c + self.config.noise_sigma * noise);
                }
            }
            frames += len;
        }
        Tensor::matrix(frames, f, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn renderer(sigma: f64) -> Renderer {
        let cfg = RenderConfig {
            noise_sigma: sigma,
            ..Default::default()
        };
        Renderer::new(cfg, &Vocab::default()).unwrap()
    }

    #[test]
    fn same_seed_renders_identically() {
        let r = renderer(0.05);
        let t = Transcript(vec![1, 5, 7]);
        let a = r.render_utterance(&t, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = r.render_utterance(&t, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accents_differ_without_noise() {
        let r = renderer(0.0);
        let t = Transcript(vec![2, 3]);
        let a = r.render_utterance(&t, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = r.render_utterance(&t, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a, b);
    }

    #[test]
    fn frame_counts_follow_word_lengths() {
        let r = renderer(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 1..6 {
            let t = Transcript((0..n).collect());
            let x = r.render_utterance(&t, 0, &mut rng).unwrap();
            assert!(x.rows() >= 3 * n && x.rows() <= 6 * n);
            assert!(x.rows() > 2 * n);
            assert_eq!(x.cols(), 16);
        }
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let r = renderer(0.05);
        for w in 0..40 {
            let n: f64 = r.prototype(w).unwrap().iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let r = renderer(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(r.render_utterance(&Transcript(vec![30]), 0, &mut rng).is_ok());
        assert!(matches!(
            r.render_utterance(&Transcript(vec![40]), 0, &mut rng),
            Err(Error::UnknownToken(40))
        ));
        assert!(r.render_utterance(&Transcript(vec![]), 0, &mut rng).is_err());
    }
}
