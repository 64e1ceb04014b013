//! Branch regression heads, the fusion MLP and the bounded output map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, Init, Mlp2, Parameter, Real, Tensor};
use crate::pooling::{PooledFeatures, LOCAL_BINS, TEXTURE_BINS};

/// Upper end of the MOS scale; predictions live in `(0, SCORE_MAX)`.
pub const SCORE_MAX: f64 = 4.0;

/// `4 * sigmoid(logit / tau)`.
pub fn squash<T: Real>(logit: T, tau_out: T) -> T {
    T::of(SCORE_MAX) * sigmoid(logit / tau_out)
}

/// `d squash / d logit`.
pub fn squash_grad<T: Real>(logit: T, tau_out: T) -> T {
    let s = sigmoid(logit / tau_out);
    T::of(SCORE_MAX) * s * (T::one() - s) / tau_out
}

/// Per-branch sub-score heads `psi_g`, `psi_l`, `psi_tex`.
#[derive(Clone, Debug)]
pub struct BranchHeads<T> {
    pub global: Mlp2<T>,
    pub local: Mlp2<T>,
    pub texture: Mlp2<T>,
}

impl<T: Real> BranchHeads<T> {
    pub fn new(channels: usize, hidden: usize, output_init: Init, rng: &mut impl Rng) -> Self {
        let init = [Init::KaimingUniform, output_init];
        Self {
            global: Mlp2::new("head_global", [channels, hidden, 1], init, rng),
            local: Mlp2::new("head_local", [LOCAL_BINS * channels, hidden, 1], init, rng),
            texture: Mlp2::new("head_texture", [TEXTURE_BINS * channels, hidden, 1], init, rng),
        }
    }

    fn join(g: Tensor<T>, l: Tensor<T>, t: Tensor<T>) -> Result<Tensor<T>> {
        let rows = g.shape()[0];
        let mut out = Vec::with_capacity(rows * 3);
        for ((a, b), c) in g.data().iter().zip(l.data()).zip(t.data()) {
            out.extend_from_slice(&[*a, *b, *c]);
        }
        Tensor::from_vec(&[rows, 3], out)
    }

    /// Sub-scores as a `B x 3` tensor with columns `(global, local, texture)`.
    pub fn apply(&self, pf: &PooledFeatures<T>) -> Result<Tensor<T>> {
        Self::join(
            self.global.apply(&pf.global)?,
            self.local.apply(&pf.local)?,
            self.texture.apply(&pf.texture)?,
        )
    }

    pub fn forward(&mut self, pf: &PooledFeatures<T>) -> Result<Tensor<T>> {
        Self::join(
            self.global.forward(&pf.global)?,
            self.local.forward(&pf.local)?,
            self.texture.forward(&pf.texture)?,
        )
    }

    pub fn backward(&mut self, grad_scores: &Tensor<T>) -> Result<PooledFeatures<T>> {
        let (rows, cols) = grad_scores.dims2()?;
        if cols != 3 {
            return Err(Error::config("branch heads expect a B x 3 gradient"));
        }
        let column = |j: usize| {
            let data = (0..rows).map(|r| grad_scores.data()[r * 3 + j]).collect();
            Tensor::from_vec(&[rows, 1], data)
        };
        Ok(PooledFeatures {
            global: self.global.backward(&column(0)?)?,
            local: self.local.backward(&column(1)?)?,
            texture: self.texture.backward(&column(2)?)?,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.global.params();
        v.extend(self.local.params());
        v.extend(self.texture.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.global.params_mut();
        v.extend(self.local.params_mut());
        v.extend(self.texture.params_mut());
        v
    }
}

/// Fusion MLP `phi: R^3 -> R` followed by the temperature-scaled sigmoid.
#[derive(Clone, Debug)]
pub struct FusionHead<T> {
    pub mlp: Mlp2<T>,
    tau_out: f64,
    logits: Option<Vec<T>>,
}

impl<T: Real> FusionHead<T> {
    /// The output layer starts at zero, so an untrained head predicts exactly 2.0.
    pub fn new(hidden: usize, tau_out: f64, rng: &mut impl Rng) -> Result<Self> {
        let mlp = Mlp2::new("fusion", [3, hidden, 1], [Init::KaimingUniform, Init::Zeros], rng);
        Self::from_mlp(mlp, tau_out)
    }

    pub fn from_mlp(mlp: Mlp2<T>, tau_out: f64) -> Result<Self> {
        if !(tau_out.is_finite() && tau_out > 0.0) {
            return Err(Error::config(format!("tau_out must be > 0, got {tau_out}")));
        }
        if mlp.first.fan_in() != 3 || mlp.second.fan_out() != 1 {
            return Err(Error::config("fusion head must map 3 -> 1"));
        }
        Ok(Self {
            mlp,
            tau_out,
            logits: None,
        })
    }

    pub fn tau_out(&self) -> f64 {
        self.tau_out
    }

    pub fn logits(&self, scores: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.mlp.apply(scores)?.into_data())
    }

    pub fn apply(&self, scores: &Tensor<T>) -> Result<Vec<T>> {
        let tau = T::of(self.tau_out);
        Ok(self.logits(scores)?.into_iter().map(|l| squash(l, tau)).collect())
    }

    pub fn forward(&mut self, scores: &Tensor<T>) -> Result<Vec<T>> {
        let logits = self.mlp.forward(scores)?.into_data();
        let tau = T::of(self.tau_out);
        let out = logits.iter().map(|&l| squash(l, tau)).collect();
        self.logits = Some(logits);
        Ok(out)
    }

    /// Takes `d loss / d prediction` per sample, returns `d loss / d sub-scores`.
    pub fn backward(&mut self, grad_pred: &[T]) -> Result<Tensor<T>> {
        let logits = self
            .logits
            .as_ref()
            .ok_or_else(|| Error::Usage("fusion: backward called before forward".into()))?;
        if grad_pred.len() != logits.len() {
            return Err(Error::config("fusion: gradient length mismatch"));
        }
        let tau = T::of(self.tau_out);
        let g: Vec<T> = grad_pred
            .iter()
            .zip(logits)
            .map(|(&g, &l)| g * squash_grad(l, tau))
            .collect();
        let g = Tensor::from_vec(&[g.len(), 1], g)?;
        self.mlp.backward(&g)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.mlp.params_mut()
    }
}
