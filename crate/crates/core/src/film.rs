//! Prompt-conditioned feature-wise linear modulation of patch tokens.
//!
//! A two-layer generator maps the prompt embedding `z` to `[gamma || beta]`
//! (first `d` outputs are `gamma`, last `d` are `beta`). Tokens are modulated as
//! `h * (1 + s * tanh(gamma)) + s * beta`, shared across every token of every sample.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{debug_check_finite, Init, Mlp2, Parameter, Real, Tensor};

/// Non-negative modulation strength `s`; `0` turns FiLM off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilmStrength(f64);

impl FilmStrength {
    pub fn new(s: f64) -> Result<Self> {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::config(format!("film strength must be >= 0, got {s}")));
        }
        Ok(Self(s))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for FilmStrength {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Tolerance on `|‖z‖ - 1|` before the prompt is re-normalized.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Returns `z / ‖z‖`, warning when the input was not already unit length.
pub fn normalize_prompt<T: Real>(z: &[T]) -> Result<Vec<T>> {
    let norm = z.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Data(format!("prompt embedding has norm {norm}")));
    }
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        warn!("prompt embedding has norm {norm:.6}, normalizing");
        Ok(z.iter().map(|&v| T::of(v.f64() / norm)).collect())
    } else {
        Ok(z.to_vec())
    }
}

/// The generator `g: R^{d_t} -> R^{2d}`.
#[derive(Clone, Debug)]
pub struct FilmGenerator<T> {
    pub mlp: Mlp2<T>,
    channels: usize,
}

impl<T: Real> FilmGenerator<T> {
    /// Hidden layer is Kaiming-uniform; the output layer starts at zero so the
    /// untrained generator yields identity modulation.
    pub fn new(prompt_dim: usize, hidden: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp2::new(
                "film",
                [prompt_dim, hidden, 2 * channels],
                [Init::KaimingUniform, Init::Zeros],
                rng,
            ),
            channels,
        }
    }

    pub fn from_mlp(mlp: Mlp2<T>) -> Result<Self> {
        let out = mlp.second.fan_out();
        if !out.is_multiple_of(2) {
            return Err(Error::config(format!("film generator output {out} is odd")));
        }
        Ok(Self {
            channels: out / 2,
            mlp,
        })
    }

    pub fn prompt_dim(&self) -> usize {
        self.mlp.first.fan_in()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn split(&self, out: Tensor<T>) -> (Vec<T>, Vec<T>) {
        let mut gamma = out.into_data();
        let beta = gamma.split_off(self.channels);
        (gamma, beta)
    }

    fn as_row(&self, z: &[T]) -> Result<Tensor<T>> {
        if z.len() != self.prompt_dim() {
            return Err(Error::config(format!(
                "prompt width {} does not match generator input {}",
                z.len(),
                self.prompt_dim()
            )));
        }
        Tensor::from_vec(&[1, z.len()], normalize_prompt(z)?)
    }

    /// `(gamma, beta)` for prompt `z`, without caching.
    pub fn generate(&self, z: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let out = self.mlp.apply(&self.as_row(z)?)?;
        Ok(self.split(out))
    }

    pub fn forward(&mut self, z: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let row = self.as_row(z)?;
        let out = self.mlp.forward(&row)?;
        Ok(self.split(out))
    }

    /// Returns the gradient with respect to the (normalized) prompt.
    pub fn backward(&mut self, grad_gamma: &[T], grad_beta: &[T]) -> Result<Vec<T>> {
        let mut g = grad_gamma.to_vec();
        g.extend_from_slice(grad_beta);
        let g = Tensor::from_vec(&[1, 2 * self.channels], g)?;
        Ok(self.mlp.backward(&g)?.into_data())
    }
}

/// `tokens * (1 + s * tanh(gamma)) + s * beta` over a `B x P x d` tensor.
pub fn modulate<T: Real>(tokens: &Tensor<T>, gamma: &[T], beta: &[T], s: FilmStrength) -> Result<Tensor<T>> {
    let (_, _, d) = tokens.dims3()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::config(format!(
            "film widths ({}, {}) do not match token channels {d}",
            gamma.len(),
            beta.len()
        )));
    }
    if s.get() == 0.0 {
        return Ok(tokens.clone());
    }
    let st = T::of(s.get());
    let scale: Vec<T> = gamma.iter().map(|&g| T::one() + st * g.tanh()).collect();
    let shift: Vec<T> = beta.iter().map(|&b| st * b).collect();
    let mut out = tokens.clone();
    for token in out.data_mut().chunks_exact_mut(d) {
        for ((h, &a), &b) in token.iter_mut().zip(&scale).zip(&shift) {
            *h = *h * a + b;
        }
    }
    debug_check_finite(&out, "film modulate");
    Ok(out)
}

#[derive(Clone, Debug)]
struct FilmCache<T> {
    tokens: Tensor<T>,
    tanh_gamma: Vec<T>,
}

/// Generator plus modulation, with gradients through both.
#[derive(Clone, Debug)]
pub struct Film<T> {
    pub generator: FilmGenerator<T>,
    pub strength: FilmStrength,
    cache: Option<FilmCache<T>>,
}

impl<T: Real> Film<T> {
    pub fn new(generator: FilmGenerator<T>, strength: FilmStrength) -> Self {
        Self {
            generator,
            strength,
            cache: None,
        }
    }

    pub fn apply(&self, tokens: &Tensor<T>, prompt: &[T]) -> Result<Tensor<T>> {
        if self.strength.get() == 0.0 {
            // still validate dims so s=0 fails the same way s>0 would
            let (_, _, d) = tokens.dims3()?;
            if d != self.generator.channels() || prompt.len() != self.generator.prompt_dim() {
                return Err(Error::config("film: token or prompt width mismatch"));
            }
            return Ok(tokens.clone());
        }
        let (gamma, beta) = self.generator.generate(prompt)?;
        modulate(tokens, &gamma, &beta, self.strength)
    }

    pub fn forward(&mut self, tokens: &Tensor<T>, prompt: &[T]) -> Result<Tensor<T>> {
        let (gamma, beta) = self.generator.forward(prompt)?;
        let out = modulate(tokens, &gamma, &beta, self.strength)?;
        self.cache = Some(FilmCache {
            tokens: tokens.clone(),
            tanh_gamma: gamma.iter().map(|g| g.tanh()).collect(),
        });
        Ok(out)
    }

    /// Accumulates generator gradients and returns `(d tokens, d prompt)`.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let FilmCache { tokens, tanh_gamma } = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("film: backward called before forward".into()))?;
        if grad_out.shape() != tokens.shape() {
            return Err(Error::config("film: gradient shape mismatch"));
        }
        let d = tanh_gamma.len();
        let s = T::of(self.strength.get());
        let scale: Vec<T> = tanh_gamma.iter().map(|&t| T::one() + s * t).collect();
        let mut grad_tokens = grad_out.clone();
        let mut grad_gamma = vec![T::zero(); d];
        let mut grad_beta = vec![T::zero(); d];
        for (gt, h) in grad_tokens
            .data_mut()
            .chunks_exact_mut(d)
            .zip(tokens.data().chunks_exact(d))
        {
            for c in 0..d {
                let g = gt[c];
                grad_gamma[c] = grad_gamma[c] + g * h[c];
                grad_beta[c] = grad_beta[c] + g;
                gt[c] = g * scale[c];
            }
        }
        for c in 0..d {
            let t = tanh_gamma[c];
            grad_gamma[c] = grad_gamma[c] * s * (T::one() - t * t);
            grad_beta[c] = grad_beta[c] * s;
        }
        let grad_prompt = self.generator.backward(&grad_gamma, &grad_beta)?;
        Ok((grad_tokens, grad_prompt))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.generator.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.generator.mlp.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{seeded_rng, Linear};
    use rand_distr::{Distribution, StandardNormal};

    fn random_tokens(rng: &mut impl Rng, shape: [usize; 3]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_vec(&shape, data).unwrap()
    }

    fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        normalize_prompt(&v).unwrap()
    }

    #[test]
    fn zero_init_generator_gives_zero_film() {
        let mut rng = seeded_rng(1);
        let g = FilmGenerator::<f64>::new(6, 6, 4, &mut rng);
        let (gamma, beta) = g.generate(&unit(&mut rng, 6)).unwrap();
        assert!(gamma.iter().chain(&beta).all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_prompts_give_distinct_film() {
        let mut rng = seeded_rng(2);
        let mut g = FilmGenerator::<f64>::new(6, 8, 4, &mut rng);
        g.mlp.second = Linear::new("film.1", 8, 8, Init::Uniform(0.5), &mut rng);
        let (g1, b1) = g.generate(&unit(&mut rng, 6)).unwrap();
        let (g2, b2) = g.generate(&unit(&mut rng, 6)).unwrap();
        let linf = g1
            .iter()
            .chain(&b1)
            .zip(g2.iter().chain(&b2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn hand_set_generator_matches_hand_mlp() {
        // 4 -> 4 -> 6, d = 3
        let w1: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let w2: Vec<f64> = (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let mlp = Mlp2 {
            first: Linear::from_parts(
                "f0",
                Tensor::from_vec(&[4, 4], w1).unwrap(),
                Tensor::from_vec(&[4], vec![0.0, 0.5, 0.0, -0.5]).unwrap(),
            )
            .unwrap(),
            act: Default::default(),
            second: Linear::from_parts(
                "f1",
                Tensor::from_vec(&[4, 6], w2.clone()).unwrap(),
                Tensor::full(&[6], 0.25),
            )
            .unwrap(),
        };
        let g = FilmGenerator::from_mlp(mlp).unwrap();
        let z = [0.5, 0.5, 0.5, 0.5];
        let (gamma, beta) = g.generate(&z).unwrap();
        // hidden pre-activation: identity of z plus bias
        let pre = [0.5, 1.0, 0.5, 0.0];
        let phi = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let hidden: Vec<f64> = pre.iter().map(|&x| phi(x)).collect();
        let mut out = [0.25; 6];
        for (k, hk) in hidden.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += hk * w2[k * 6 + j];
            }
        }
        for j in 0..3 {
            assert!((gamma[j] - out[j]).abs() < 1e-12);
            assert!((beta[j] - out[j + 3]).abs() < 1e-12);
        }
    }

    #[test]
    fn unnormalized_prompt_is_normalized() {
        let v = normalize_prompt(&[2.0_f64, 0.0, 0.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
        assert!(normalize_prompt(&[0.0_f64; 3]).is_err());
    }

    #[test]
    fn zero_strength_is_bitwise_identity() {
        let mut rng = seeded_rng(3);
        let h = random_tokens(&mut rng, [2, 5, 3]);
        let out = modulate(&h, &[3.0, -1.0, 0.2], &[1.0, 2.0, -4.0], FilmStrength::new(0.0).unwrap())
            .unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn zero_film_is_identity() {
        let mut rng = seeded_rng(4);
        let h = random_tokens(&mut rng, [2, 5, 3]);
        let out = modulate(&h, &[0.0; 3], &[0.0; 3], FilmStrength::default()).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn saturated_gamma_doubles_tokens() {
        let h = Tensor::full(&[1, 3, 2], 1.0_f64);
        let out = modulate(&h, &[50.0, 50.0], &[0.0, 0.0], FilmStrength::default()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let h = Tensor::full(&[1, 3, 2], 1.0_f64);
        let err = modulate(&h, &[0.0; 3], &[0.0; 3], FilmStrength::default());
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(FilmStrength::new(-0.1).is_err());
    }

    #[test]
    fn scale_stays_within_strength_bounds() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let s: f64 = rng.random_range(0.0..2.0);
            let gamma: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
            let h = Tensor::full(&[1, 1, 4], 1.0);
            let out = modulate(&h, &gamma, &[0.0; 4], FilmStrength::new(s).unwrap()).unwrap();
            for &v in out.data() {
                assert!(v >= 1.0 - s - 1e-12 && v <= 1.0 + s + 1e-12);
            }
        }
    }

    #[test]
    fn modulate_is_affine_in_tokens() {
        let mut rng = seeded_rng(6);
        let h1 = random_tokens(&mut rng, [1, 4, 3]);
        let h2 = random_tokens(&mut rng, [1, 4, 3]);
        let gamma = [0.3, -1.2, 2.0];
        let beta = [0.5, -0.25, 1.5];
        let s = FilmStrength::new(0.8).unwrap();
        let (a, b) = (1.7, -0.6);
        let mix = h1.data().iter().zip(h2.data()).map(|(x, y)| a * x + b * y).collect();
        let lhs = modulate(&Tensor::from_vec(&[1, 4, 3], mix).unwrap(), &gamma, &beta, s).unwrap();
        let m1 = modulate(&h1, &gamma, &beta, s).unwrap();
        let m2 = modulate(&h2, &gamma, &beta, s).unwrap();
        for (i, &l) in lhs.data().iter().enumerate() {
            let c = i % 3;
            let rhs = a * m1.data()[i] + b * m2.data()[i] - (a + b - 1.0) * 0.8 * beta[c];
            assert!((l - rhs).abs() < 1e-12);
        }
    }
}
