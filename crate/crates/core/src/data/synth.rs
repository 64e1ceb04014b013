//! Synthetic token datasets with a known quality signal.
//!
//! Each sample draws a latent `u ~ U(0, 1)`. Its tokens are standard normal
//! noise shifted by `gain * (u - 0.5) * w` for a hidden unit direction `w`,
//! so the mean token carries the signal. The clean quality is `4u` and the
//! recorded MOS adds `N(0, noise)` before clipping to `[0, 4]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{write_prompt_file, write_token_file};
use super::manifest::{Manifest, ManifestRecord, MOS_MAX, MOS_MIN};
use crate::error::{Error, Result};
use crate::numeric::{seeded_rng, Tensor};

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const PROMPT_NAME: &str = "prompt.temb";
pub const ALT_PROMPT_NAME: &str = "prompt_alt.temb";
pub const RECIPE_NAME: &str = "synth_recipe.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub samples: usize,
    pub tokens: usize,
    pub channels: usize,
    pub prompt_dim: usize,
    pub noise: f64,
    pub gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            tokens: 16,
            channels: 8,
            prompt_dim: 8,
            noise: 0.1,
            gain: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.tokens == 0 || self.channels == 0 || self.prompt_dim == 0 {
            return Err(Error::config("synth needs n >= 2 and positive p, d, dt"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0 && self.gain.is_finite()) {
            return Err(Error::config("noise must be >= 0 and gain finite"));
        }
        Ok(())
    }
}

/// Everything needed to audit a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecipe {
    pub config: SynthConfig,
    pub direction: Vec<f64>,
    pub latent: Vec<f64>,
    pub clean_quality: Vec<f64>,
}

impl SynthRecipe {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Projection of the mean token onto the hidden direction; rescaled it
    /// estimates the latent `u`.
    pub fn latent_estimate(&self, tokens: &Tensor<f32>) -> Result<f64> {
        let (p, d) = tokens.dims2()?;
        if d != self.direction.len() {
            return Err(Error::config(format!("expected d={}, got {d}", self.direction.len())));
        }
        let mut proj = 0.0;
        for t in 0..p {
            for (x, w) in tokens.row(t).iter().zip(&self.direction) {
                proj += f64::from(*x) * w;
            }
        }
        Ok(proj / p as f64 / self.config.gain + 0.5)
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub prompt_path: PathBuf,
    pub alt_prompt_path: PathBuf,
    pub recipe: SynthRecipe,
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Writes `tokens/*.ptok`, `manifest.csv`, two prompt files and the recipe into `dir`.
pub fn generate_synthetic(dir: &Path, cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let token_dir = dir.join("tokens");
    fs::create_dir_all(&token_dir).map_err(|e| Error::io(&token_dir, e))?;
    let mut rng = seeded_rng(cfg.seed);
    let direction = random_unit(cfg.channels, &mut rng);
    let prompt: Vec<f32> = random_unit(cfg.prompt_dim, &mut rng).iter().map(|&x| x as f32).collect();
    let alt: Vec<f32> = random_unit(cfg.prompt_dim, &mut rng).iter().map(|&x| x as f32).collect();
    let label_noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::config(e.to_string()))?;

    let width = cfg.samples.saturating_sub(1).to_string().len().max(4);
    let mut records = Vec::with_capacity(cfg.samples);
    let mut latent = Vec::with_capacity(cfg.samples);
    let mut clean_quality = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let u: f64 = rng.random();
        let shift = cfg.gain * (u - 0.5);
        let mut data = Vec::with_capacity(cfg.tokens * cfg.channels);
        for _ in 0..cfg.tokens {
            for w in &direction {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((z + shift * w) as f32);
            }
        }
        let tokens = Tensor::from_vec(&[cfg.tokens, cfg.channels], data)?;
        let id = format!("s{i:0width$}");
        let rel = format!("tokens/{id}.ptok");
        write_token_file(&dir.join(&rel), &tokens)?;
        let q = MOS_MAX * u;
        let mos = (q + label_noise.sample(&mut rng)).clamp(MOS_MIN, MOS_MAX);
        records.push(ManifestRecord { id, mos, path: rel });
        latent.push(u);
        clean_quality.push(q);
    }

    let manifest = Manifest {
        path: dir.join(MANIFEST_NAME),
        records,
    };
    manifest.save()?;
    let prompt_path = dir.join(PROMPT_NAME);
    let alt_prompt_path = dir.join(ALT_PROMPT_NAME);
    write_prompt_file(&prompt_path, &prompt)?;
    write_prompt_file(&alt_prompt_path, &alt)?;
    let recipe = SynthRecipe {
        config: cfg.clone(),
        direction,
        latent,
        clean_quality,
    };
    let recipe_path = dir.join(RECIPE_NAME);
    fs::write(&recipe_path, serde_json::to_string_pretty(&recipe)?)
        .map_err(|e| Error::io(&recipe_path, e))?;
    Ok(SynthOutput {
        manifest_path: manifest.path,
        prompt_path,
        alt_prompt_path,
        recipe,
    })
}
