//! The full quality head: FiLM -> pooling -> branch heads -> fusion -> `(0, 4)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::film::{Film, FilmGenerator, FilmStrength};
use crate::heads::{BranchHeads, FusionHead};
use crate::numeric::{seeded_rng, Init, Parameter, Real, Tensor};
use crate::pooling::{pool_all, pool_all_backward, PoolCache};

/// Architecture of the head. Everything needed to rebuild it from named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token channel width `d`.
    pub channels: usize,
    /// Prompt embedding width `d_t`.
    pub prompt_dim: usize,
    pub film_hidden: usize,
    pub head_hidden: usize,
    pub fusion_hidden: usize,
    pub tau_out: f64,
    pub film_strength: f64,
}

impl ModelConfig {
    /// Defaults: generator hidden width `d_t`, branch hidden 64, fusion hidden 16.
    pub fn new(channels: usize, prompt_dim: usize) -> Self {
        Self {
            channels,
            prompt_dim,
            film_hidden: prompt_dim,
            head_hidden: 64,
            fusion_hidden: 16,
            tau_out: 2.0,
            film_strength: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.channels,
            self.prompt_dim,
            self.film_hidden,
            self.head_hidden,
            self.fusion_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::config(format!("model widths must be positive: {self:?}")));
        }
        if !(self.tau_out.is_finite() && self.tau_out > 0.0) {
            return Err(Error::config(format!("tau_out must be > 0, got {}", self.tau_out)));
        }
        FilmStrength::new(self.film_strength)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct QualityModel<T> {
    pub config: ModelConfig,
    pub film: Film<T>,
    pub branches: BranchHeads<T>,
    pub fusion: FusionHead<T>,
    pool_cache: Option<PoolCache>,
}

impl<T: Real> QualityModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let generator =
            FilmGenerator::new(config.prompt_dim, config.film_hidden, config.channels, &mut rng);
        let branches =
            BranchHeads::new(config.channels, config.head_hidden, Init::KaimingUniform, &mut rng);
        let fusion = FusionHead::new(config.fusion_hidden, config.tau_out, &mut rng)?;
        Ok(Self {
            film: Film::new(generator, FilmStrength::new(config.film_strength)?),
            branches,
            fusion,
            config,
            pool_cache: None,
        })
    }

    /// Rebuilds a model from named tensors, e.g. a loaded checkpoint.
    pub fn from_named<U: Real>(config: ModelConfig, tensors: &HashMap<String, Tensor<U>>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.params().len();
        if tensors.len() != expected {
            return Err(Error::Data(format!(
                "expected {expected} named tensors, found {}",
                tensors.len()
            )));
        }
        for p in model.params_mut() {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(model)
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> QualityModel<U> {
        let named: HashMap<String, Tensor<T>> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        QualityModel::from_named(self.config.clone(), &named).expect("same architecture")
    }

    fn check_tokens(&self, tokens: &Tensor<T>) -> Result<()> {
        let (_, _, d) = tokens.dims3()?;
        if d != self.config.channels {
            return Err(Error::config(format!(
                "tokens have {d} channels, model expects {}",
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Sub-scores `(y_g, y_l, y_tex)` per sample, without caching.
    pub fn sub_scores(&self, tokens: &Tensor<T>, prompt: &[T]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        let modulated = self.film.apply(tokens, prompt)?;
        let (pooled, _) = pool_all(&modulated)?;
        self.branches.apply(&pooled)
    }

    /// Predictions in `(0, 4)` for a `B x P x d` batch; read-only.
    pub fn predict(&self, tokens: &Tensor<T>, prompt: &[T]) -> Result<Vec<T>> {
        let scores = self.sub_scores(tokens, prompt)?;
        self.fusion.apply(&scores)
    }

    /// Training forward pass; caches activations for [`QualityModel::backward`].
    pub fn forward(&mut self, tokens: &Tensor<T>, prompt: &[T]) -> Result<Vec<T>> {
        self.check_tokens(tokens)?;
        let modulated = self.film.forward(tokens, prompt)?;
        let (pooled, cache) = pool_all(&modulated)?;
        self.pool_cache = Some(cache);
        let scores = self.branches.forward(&pooled)?;
        self.fusion.forward(&scores)
    }

    /// Accumulates parameter gradients from `d loss / d prediction` and returns
    /// the gradient with respect to the input tokens.
    pub fn backward(&mut self, grad_pred: &[T]) -> Result<Tensor<T>> {
        let grad_scores = self.fusion.backward(grad_pred)?;
        let grad_pooled = self.branches.backward(&grad_scores)?;
        let cache = self
            .pool_cache
            .as_ref()
            .ok_or_else(|| Error::Usage("model: backward called before forward".into()))?;
        let grad_modulated = pool_all_backward(&grad_pooled, cache)?;
        let (grad_tokens, _) = self.film.backward(&grad_modulated)?;
        Ok(grad_tokens)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.film.params();
        v.extend(self.branches.params());
        v.extend(self.fusion.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.film.params_mut();
        v.extend(self.branches.params_mut());
        v.extend(self.fusion.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::film::normalize_prompt;

    fn prompt(n: usize, phase: f64) -> Vec<f32> {
        let v: Vec<f32> = (0..n).map(|i| ((i as f64 + phase) * 1.3).sin() as f32).collect();
        normalize_prompt(&v).unwrap()
    }

    fn tokens(b: usize, p: usize, d: usize) -> Tensor<f32> {
        let data = (0..b * p * d).map(|i| ((i as f32) * 0.37).sin()).collect();
        Tensor::from_vec(&[b, p, d], data).unwrap()
    }

    #[test]
    fn untrained_model_predicts_midpoint() {
        let m = QualityModel::<f32>::new(ModelConfig::new(4, 6), 3).unwrap();
        let y = m.predict(&tokens(5, 8, 4), &prompt(6, 0.0)).unwrap();
        assert_eq!(y, vec![2.0; 5]);
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = QualityModel::<f32>::new(ModelConfig::new(4, 6), 3).unwrap();
        let mut names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(n, 20);
    }

    #[test]
    fn forward_matches_predict() {
        let mut m = QualityModel::<f64>::new(ModelConfig::new(3, 5), 8).unwrap();
        // perturb zero-initialized layers so the check is non-trivial
        for p in m.params_mut() {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i as f64) * 0.9).cos();
            }
        }
        let t = tokens(3, 8, 3).cast::<f64>();
        let z: Vec<f64> = prompt(5, 1.0).iter().map(|&v| v as f64).collect();
        let a = m.predict(&t, &z).unwrap();
        let b = m.forward(&t, &z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_channel_count_is_config_error() {
        let m = QualityModel::<f32>::new(ModelConfig::new(4, 6), 3).unwrap();
        assert!(matches!(
            m.predict(&tokens(1, 8, 5), &prompt(6, 0.0)),
            Err(Error::Config(_))
        ));
        assert!(m.predict(&tokens(1, 3, 4), &prompt(6, 0.0)).is_err());
    }

    #[test]
    fn cast_round_trip_preserves_predictions() {
        let m = QualityModel::<f32>::new(ModelConfig::new(4, 6), 4).unwrap();
        let back: QualityModel<f32> = m.cast::<f64>().cast();
        let t = tokens(2, 8, 4);
        let z = prompt(6, 0.5);
        assert_eq!(m.predict(&t, &z).unwrap(), back.predict(&t, &z).unwrap());
    }
}
