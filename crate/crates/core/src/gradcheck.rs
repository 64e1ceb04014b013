//! Central finite-difference checks of every hand-written backward pass, in `f64`.
//!
//! Each case reduces its op to a scalar `L = sum(r * out)` with fixed random
//! weights `r`, then compares the analytic gradient over all inputs and
//! parameters with `(L(x + h) - L(x - h)) / 2h`. The error reported is
//! `||analytic - numeric|| / max(||analytic||, ||numeric||)`.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::film::{Film, FilmGenerator, FilmStrength};
use crate::heads::{squash, squash_grad, BranchHeads, FusionHead};
use crate::losses::{mse_loss, pairwise_rank_loss};
use crate::model::{ModelConfig, QualityModel};
use crate::numeric::{gelu, gelu_grad, seeded_rng, Init, Linear, Mlp2, Parameter, SeededRng, Tensor};
use crate::pooling::{avg_pool_bins, avg_pool_bins_backward, max_pool_bins, max_pool_bins_backward, PooledFeatures};

pub const STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_SEEDS: u64 = 10;

pub const OPS: &[&str] = &[
    "linear",
    "gelu",
    "film_generate",
    "film_modulate",
    "avg_pool",
    "max_pool",
    "branch_heads",
    "fusion",
    "sigmoid_map",
    "rank_loss",
    "mse",
    "model",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub op: String,
    pub seeds: u64,
    pub coords: usize,
    /// Worst error over seeds.
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<14} seeds={} coords={} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.op,
            self.seeds,
            self.coords,
            self.max_rel_error,
            self.tolerance
        )
    }
}

/// A differentiable op with all its inputs and parameters exposed as flat coordinates.
trait Case {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>>;
    fn value(&self) -> Result<f64>;
    /// Analytic gradient in the same coordinate order as [`Case::tensors`].
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

fn coord_count(case: &mut dyn Case) -> usize {
    case.tensors().iter().map(|t| t.len()).sum()
}

fn coord(case: &mut dyn Case, mut i: usize) -> &mut f64 {
    for t in case.tensors() {
        if i < t.len() {
            return &mut t.data_mut()[i];
        }
        i -= t.len();
    }
    panic!("coordinate out of range")
}

fn numeric_gradient(case: &mut dyn Case) -> Result<Vec<f64>> {
    let n = coord_count(case);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = *coord(case, i);
        *coord(case, i) = x + STEP;
        let plus = case.value()?;
        *coord(case, i) = x - STEP;
        let minus = case.value()?;
        *coord(case, i) = x;
        out.push((plus - minus) / (2.0 * STEP));
    }
    Ok(out)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn check_case(case: &mut dyn Case) -> Result<(usize, f64)> {
    let analytic = case.gradient()?;
    let numeric = numeric_gradient(case)?;
    if analytic.len() != numeric.len() {
        return Err(Error::Usage(format!(
            "gradcheck: {} analytic vs {} numeric coordinates",
            analytic.len(),
            numeric.len()
        )));
    }
    if numeric.iter().all(|&g| g == 0.0) {
        return Err(Error::Usage("gradcheck: case has an identically zero gradient".into()));
    }
    Ok((analytic.len(), relative_error(&analytic, &numeric)))
}

fn normal_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

fn weighted(r: &Tensor<f64>, out: &Tensor<f64>) -> f64 {
    r.data().iter().zip(out.data()).map(|(a, b)| a * b).sum()
}

fn param_grads<'a>(params: impl IntoIterator<Item = &'a Parameter<f64>>) -> Vec<f64> {
    params.into_iter().flat_map(|p| p.grad.data().to_vec()).collect()
}

fn param_values<'a>(params: impl IntoIterator<Item = &'a mut Parameter<f64>>) -> Vec<&'a mut Tensor<f64>> {
    params.into_iter().map(|p| &mut p.value).collect()
}

/// Random nonzero weights everywhere, so no gradient path is trivially dead.
fn randomize<'a>(params: impl IntoIterator<Item = &'a mut Parameter<f64>>, rng: &mut SeededRng) {
    for p in params {
        for v in p.value.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = 0.5 * z;
        }
    }
}

/// Unit-norm prompt. Perturbations of size `STEP` stay inside the renormalization
/// tolerance, so differences are taken with respect to the normalized prompt.
fn unit_prompt(dim: usize, rng: &mut SeededRng) -> Tensor<f64> {
    let v = normal_tensor(&[dim], rng);
    let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / norm)
}

struct LinearCase {
    layer: Linear<f64>,
    x: Tensor<f64>,
    r: Tensor<f64>,
}

impl Case for LinearCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = vec![&mut self.x];
        v.extend(param_values(self.layer.params_mut()));
        v
    }
    fn value(&self) -> Result<f64> {
        Ok(weighted(&self.r, &self.layer.apply(&self.x)?))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.layer.forward(&self.x)?;
        let mut g = self.layer.backward(&self.r)?.into_data();
        g.extend(param_grads(self.layer.params()));
        Ok(g)
    }
}

struct GeluCase {
    x: Tensor<f64>,
    r: Tensor<f64>,
}

impl Case for GeluCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.x]
    }
    fn value(&self) -> Result<f64> {
        Ok(weighted(&self.r, &self.x.map(gelu)))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok(self.x.data().iter().zip(self.r.data()).map(|(&x, &r)| r * gelu_grad(x)).collect())
    }
}

struct GenerateCase {
    generator: FilmGenerator<f64>,
    z: Tensor<f64>,
    r_gamma: Vec<f64>,
    r_beta: Vec<f64>,
}

impl Case for GenerateCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = vec![&mut self.z];
        v.extend(param_values(self.generator.mlp.params_mut()));
        v
    }
    fn value(&self) -> Result<f64> {
        let (g, b) = self.generator.generate(self.z.data())?;
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        Ok(dot(&g, &self.r_gamma) + dot(&b, &self.r_beta))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.generator.forward(self.z.data())?;
        let mut g = self.generator.backward(&self.r_gamma, &self.r_beta)?;
        g.extend(param_grads(self.generator.mlp.params()));
        Ok(g)
    }
}

struct ModulateCase {
    film: Film<f64>,
    tokens: Tensor<f64>,
    z: Tensor<f64>,
    r: Tensor<f64>,
}

impl Case for ModulateCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = vec![&mut self.tokens, &mut self.z];
        v.extend(param_values(self.film.params_mut()));
        v
    }
    fn value(&self) -> Result<f64> {
        Ok(weighted(&self.r, &self.film.apply(&self.tokens, self.z.data())?))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.film.forward(&self.tokens, self.z.data())?;
        let (gt, gz) = self.film.backward(&self.r)?;
        let mut g = gt.into_data();
        g.extend(gz);
        g.extend(param_grads(self.film.params()));
        Ok(g)
    }
}

struct AvgPoolCase {
    tokens: Tensor<f64>,
    bins: usize,
    r: Tensor<f64>,
}

impl Case for AvgPoolCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.tokens]
    }
    fn value(&self) -> Result<f64> {
        Ok(weighted(&self.r, &avg_pool_bins(&self.tokens, self.bins)?))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok(avg_pool_bins_backward(&self.r, self.tokens.shape(), self.bins)?.into_data())
    }
}

struct MaxPoolCase {
    tokens: Tensor<f64>,
    bins: usize,
    r: Tensor<f64>,
}

impl Case for MaxPoolCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.tokens]
    }
    fn value(&self) -> Result<f64> {
        Ok(weighted(&self.r, &max_pool_bins(&self.tokens, self.bins)?.values))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        let pooled = max_pool_bins(&self.tokens, self.bins)?;
        Ok(max_pool_bins_backward(&self.r, &pooled.argmax, self.tokens.shape(), self.bins)?.into_data())
    }
}

/// Tokens whose values are a shuffled grid with spacing 0.1 plus jitter below 0.02,
/// so every max-pool winner leads by far more than `STEP`.
fn separated_tokens(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.1 + rng.random_range(0.0..0.02))
        .collect();
    values.shuffle(rng);
    Tensor::from_vec(shape, values).expect("shape")
}

struct HeadsCase {
    heads: BranchHeads<f64>,
    pooled: PooledFeatures<f64>,
    r: Tensor<f64>,
}

impl Case for HeadsCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = vec![&mut self.pooled.global, &mut self.pooled.local, &mut self.pooled.texture];
        v.extend(param_values(self.heads.params_mut()));
        v
    }
    fn value(&self) -> Result<f64> {
        Ok(weighted(&self.r, &self.heads.apply(&self.pooled)?))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.heads.forward(&self.pooled)?;
        let g = self.heads.backward(&self.r)?;
        let mut out = g.global.into_data();
        out.extend(g.local.into_data());
        out.extend(g.texture.into_data());
        out.extend(param_grads(self.heads.params()));
        Ok(out)
    }
}

struct FusionCase {
    fusion: FusionHead<f64>,
    scores: Tensor<f64>,
    r: Vec<f64>,
}

impl Case for FusionCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = vec![&mut self.scores];
        v.extend(param_values(self.fusion.params_mut()));
        v
    }
    fn value(&self) -> Result<f64> {
        let p = self.fusion.apply(&self.scores)?;
        Ok(p.iter().zip(&self.r).map(|(a, b)| a * b).sum())
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.fusion.forward(&self.scores)?;
        let mut g = self.fusion.backward(&self.r)?.into_data();
        g.extend(param_grads(self.fusion.params()));
        Ok(g)
    }
}

struct SquashCase {
    logits: Tensor<f64>,
    tau: f64,
    r: Tensor<f64>,
}

impl Case for SquashCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.logits]
    }
    fn value(&self) -> Result<f64> {
        Ok(weighted(&self.r, &self.logits.map(|l| squash(l, self.tau))))
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok(self
            .logits
            .data()
            .iter()
            .zip(self.r.data())
            .map(|(&l, &r)| r * squash_grad(l, self.tau))
            .collect())
    }
}

enum LossKind {
    Rank(f64),
    Mse,
}

struct LossCase {
    kind: LossKind,
    pred: Tensor<f64>,
    target: Vec<f64>,
}

impl LossCase {
    fn eval(&self) -> Result<crate::losses::LossOutput> {
        match self.kind {
            LossKind::Rank(tau) => pairwise_rank_loss(self.pred.data(), &self.target, tau),
            LossKind::Mse => mse_loss(self.pred.data(), &self.target),
        }
    }
}

impl Case for LossCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.pred]
    }
    fn value(&self) -> Result<f64> {
        Ok(self.eval()?.value)
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok(self.eval()?.grad)
    }
}

struct ModelCase {
    model: QualityModel<f64>,
    tokens: Tensor<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
}

impl Case for ModelCase {
    fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = vec![&mut self.tokens];
        v.extend(param_values(self.model.params_mut()));
        v
    }
    fn value(&self) -> Result<f64> {
        let p = self.model.predict(&self.tokens, &self.z)?;
        Ok(p.iter().zip(&self.r).map(|(a, b)| a * b).sum())
    }
    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.model.zero_grad();
        self.model.forward(&self.tokens, &self.z)?;
        let mut g = self.model.backward(&self.r)?.into_data();
        g.extend(param_grads(self.model.params()));
        Ok(g)
    }
}

fn build_case(op: &str, seed: u64) -> Result<Box<dyn Case>> {
    let mut rng = seeded_rng(seed);
    let batch = rng.random_range(2..5);
    let case: Box<dyn Case> = match op {
        "linear" => {
            let (i, o) = (rng.random_range(1..6), rng.random_range(1..6));
            let layer = Linear::new("lin", i, o, Init::Uniform(1.0), &mut rng);
            let mut layer = layer;
            randomize(layer.params_mut(), &mut rng);
            Box::new(LinearCase {
                layer,
                x: normal_tensor(&[batch, i], &mut rng),
                r: normal_tensor(&[batch, o], &mut rng),
            })
        }
        "gelu" => Box::new(GeluCase {
            x: normal_tensor(&[batch, 7], &mut rng).map(|v| 2.0 * v),
            r: normal_tensor(&[batch, 7], &mut rng),
        }),
        "film_generate" => {
            let (dt, d) = (rng.random_range(2..6), rng.random_range(1..5));
            let mut generator = FilmGenerator::new(dt, dt, d, &mut rng);
            randomize(generator.mlp.params_mut(), &mut rng);
            Box::new(GenerateCase {
                generator,
                z: unit_prompt(dt, &mut rng),
                r_gamma: normal_tensor(&[d], &mut rng).into_data(),
                r_beta: normal_tensor(&[d], &mut rng).into_data(),
            })
        }
        "film_modulate" => {
            let (dt, d, p) = (rng.random_range(2..6), rng.random_range(1..5), rng.random_range(1..6));
            let mut generator = FilmGenerator::new(dt, dt, d, &mut rng);
            randomize(generator.mlp.params_mut(), &mut rng);
            let s = rng.random_range(0.25..1.5);
            Box::new(ModulateCase {
                film: Film::new(generator, FilmStrength::new(s)?),
                tokens: normal_tensor(&[batch, p, d], &mut rng),
                z: unit_prompt(dt, &mut rng),
                r: normal_tensor(&[batch, p, d], &mut rng),
            })
        }
        "avg_pool" | "max_pool" => {
            let bins = [1, 2, 4][rng.random_range(0..3)];
            let p = rng.random_range(bins..bins + 9);
            let d = rng.random_range(1..4);
            let r = normal_tensor(&[batch, d * bins], &mut rng);
            if op == "avg_pool" {
                Box::new(AvgPoolCase {
                    tokens: normal_tensor(&[batch, p, d], &mut rng),
                    bins,
                    r,
                })
            } else {
                Box::new(MaxPoolCase {
                    tokens: separated_tokens(&[batch, p, d], &mut rng),
                    bins,
                    r,
                })
            }
        }
        "branch_heads" => {
            let (d, hidden) = (rng.random_range(1..4), rng.random_range(2..6));
            let mut heads = BranchHeads::new(d, hidden, Init::KaimingUniform, &mut rng);
            randomize(heads.params_mut(), &mut rng);
            Box::new(HeadsCase {
                heads,
                pooled: PooledFeatures {
                    global: normal_tensor(&[batch, d], &mut rng),
                    local: normal_tensor(&[batch, 4 * d], &mut rng),
                    texture: normal_tensor(&[batch, 2 * d], &mut rng),
                },
                r: normal_tensor(&[batch, 3], &mut rng),
            })
        }
        "fusion" => {
            let hidden = rng.random_range(2..8);
            let tau = rng.random_range(0.5..3.0);
            let mut mlp = Mlp2::new("fusion", [3, hidden, 1], [Init::KaimingUniform; 2], &mut rng);
            randomize(mlp.params_mut(), &mut rng);
            Box::new(FusionCase {
                fusion: FusionHead::from_mlp(mlp, tau)?,
                scores: normal_tensor(&[batch, 3], &mut rng),
                r: normal_tensor(&[batch], &mut rng).into_data(),
            })
        }
        "sigmoid_map" => Box::new(SquashCase {
            logits: normal_tensor(&[batch, 5], &mut rng).map(|v| 3.0 * v),
            tau: rng.random_range(0.5..3.0),
            r: normal_tensor(&[batch, 5], &mut rng),
        }),
        "rank_loss" | "mse" => {
            let n = rng.random_range(3..9);
            // integer targets so ties (masked pairs) appear regularly
            let mut target: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u8..4))).collect();
            target[0] = 0.0;
            target[1] = 3.0;
            let kind = if op == "mse" {
                LossKind::Mse
            } else {
                LossKind::Rank(rng.random_range(0.25..1.0))
            };
            Box::new(LossCase {
                kind,
                pred: normal_tensor(&[n], &mut rng).map(|v| 2.0 + v),
                target,
            })
        }
        "model" => {
            let (d, dt) = (rng.random_range(1..4), rng.random_range(2..5));
            let cfg = ModelConfig {
                head_hidden: 4,
                fusion_hidden: 3,
                film_strength: rng.random_range(0.5..1.0),
                ..ModelConfig::new(d, dt)
            };
            let mut model = QualityModel::new(cfg, seed)?;
            randomize(model.params_mut(), &mut rng);
            let p = rng.random_range(4..9);
            Box::new(ModelCase {
                model,
                tokens: separated_tokens(&[batch, p, d], &mut rng),
                z: unit_prompt(dt, &mut rng).into_data(),
                r: normal_tensor(&[batch], &mut rng).into_data(),
            })
        }
        other => return Err(Error::config(format!("unknown gradcheck op {other:?}"))),
    };
    Ok(case)
}

/// Runs `op` for seeds `0..seeds` and returns the worst error.
pub fn check_op(op: &str, seeds: u64, tolerance: f64) -> Result<GradCheckResult> {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in 0..seeds {
        let mut case = build_case(op, seed)?;
        let (n, err) = check_case(case.as_mut())?;
        coords += n;
        worst = worst.max(err);
    }
    Ok(GradCheckResult {
        op: op.to_string(),
        seeds,
        coords,
        max_rel_error: worst,
        tolerance,
    })
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub results: Vec<GradCheckResult>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(GradCheckResult::passed)
    }
}

pub fn run_suite(ops: &[&str], seeds: u64, tolerance: f64) -> Result<GradCheckReport> {
    let start = Instant::now();
    let results = ops
        .iter()
        .map(|op| check_op(op, seeds, tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong(Tensor<f64>);
        impl Case for Wrong {
            fn tensors(&mut self) -> Vec<&mut Tensor<f64>> {
                vec![&mut self.0]
            }
            fn value(&self) -> Result<f64> {
                Ok(self.0.data().iter().map(|x| x * x).sum())
            }
            fn gradient(&mut self) -> Result<Vec<f64>> {
                Ok(self.0.data().iter().map(|x| 2.1 * x).collect())
            }
        }
        let mut c = Wrong(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let (_, err) = check_case(&mut c).unwrap();
        assert!(err > 1e-3);
    }

    #[test]
    fn every_op_passes_one_seed() {
        for op in OPS {
            let r = check_op(op, 1, DEFAULT_TOLERANCE).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn unknown_op_is_config_error() {
        assert!(matches!(check_op("conv", 1, 1e-6), Err(Error::Config(_))));
    }
}
