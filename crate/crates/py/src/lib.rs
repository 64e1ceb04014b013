//! Python bindings: model, metrics, losses, file formats, synthetic data, training and gradcheck.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use filmiqa::checkpoint::{Checkpoint, CheckpointMeta};
use filmiqa::data::synth::{generate_synthetic, SynthConfig};
use filmiqa::data::{self, make_folds as core_make_folds};
use filmiqa::losses::{self, LossConfig, LossOutput};
use filmiqa::metrics;
use filmiqa::model::{ModelConfig, QualityModel};
use filmiqa::numeric::Tensor;
use filmiqa::train::{run_training, TrainConfig};
use filmiqa::{gradcheck, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for filmiqa::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn tokens_from_nested(tokens: Vec<Vec<Vec<f32>>>) -> PyResult<Tensor<f32>> {
    let b = tokens.len();
    let p = tokens.first().map_or(0, Vec::len);
    let d = tokens.first().and_then(|t| t.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(b * p * d);
    for sample in tokens {
        if sample.len() != p {
            return Err(PyValueError::new_err("ragged token batch"));
        }
        for tok in sample {
            if tok.len() != d {
                return Err(PyValueError::new_err("ragged token batch"));
            }
            flat.extend(tok);
        }
    }
    Tensor::from_vec(&[b, p, d], flat).py()
}

fn nested_rows(t: &Tensor<f32>) -> PyResult<Vec<Vec<f32>>> {
    let (rows, _) = t.dims2().py()?;
    Ok((0..rows).map(|r| t.row(r).to_vec()).collect())
}

/// The FiLM quality head (single precision).
#[pyclass(name = "Model")]
struct PyModel {
    inner: QualityModel<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (channels, prompt_dim, seed=0, film_strength=1.0, tau_out=2.0))]
    fn new(channels: usize, prompt_dim: usize, seed: u64, film_strength: f64, tau_out: f64) -> PyResult<Self> {
        let cfg = ModelConfig {
            film_strength,
            tau_out,
            ..ModelConfig::new(channels, prompt_dim)
        };
        Ok(Self {
            inner: QualityModel::new(cfg, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).py()?;
        Ok(Self {
            inner: ck.to_model().py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = CheckpointMeta {
            model: self.inner.config.clone(),
            fold: 0,
            epoch: 0,
            val_loss: None,
            val_mae: None,
            seed: 0,
        };
        Checkpoint::from_model(&self.inner, meta).save(&path).py()
    }

    /// Scores for a `B x P x d` nested list and a prompt embedding.
    fn predict(&self, tokens: Vec<Vec<Vec<f32>>>, prompt: Vec<f32>) -> PyResult<Vec<f32>> {
        self.inner.predict(&tokens_from_nested(tokens)?, &prompt).py()
    }

    /// `B x 3` branch sub-scores (global, local, texture).
    fn sub_scores(&self, tokens: Vec<Vec<Vec<f32>>>, prompt: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        nested_rows(&self.inner.sub_scores(&tokens_from_nested(tokens)?, &prompt).py()?)
    }

    #[getter]
    fn film_strength(&self) -> f64 {
        self.inner.config.film_strength
    }

    #[setter]
    fn set_film_strength(&mut self, s: f64) -> PyResult<()> {
        self.inner.film.strength = filmiqa::film::FilmStrength::new(s).py()?;
        self.inner.config.film_strength = s;
        Ok(())
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|p| p.name.clone()).collect()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(channels={}, prompt_dim={}, film_strength={}, tau_out={}, params={})",
            c.channels,
            c.prompt_dim,
            c.film_strength,
            c.tau_out,
            self.inner.parameter_count()
        )
    }
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&x, &y).py()
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&x, &y).py()
}

#[pyfunction]
fn kendall(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::kendall(&x, &y).py()
}

/// `{plcc, srocc, krocc, overall, mae, n}`.
#[pyfunction]
fn evaluate(prediction: Vec<f64>, target: Vec<f64>) -> PyResult<HashMap<&'static str, f64>> {
    let r = metrics::evaluate_slices(&prediction, &target).py()?;
    Ok(HashMap::from([
        ("plcc", r.plcc),
        ("srocc", r.srocc),
        ("krocc", r.krocc),
        ("overall", r.overall),
        ("mae", r.mae),
        ("n", r.n as f64),
    ]))
}

fn loss_tuple(out: LossOutput) -> (f64, Vec<f64>) {
    (out.value, out.grad)
}

/// `(value, d value / d prediction)`.
#[pyfunction]
#[pyo3(signature = (prediction, target, tau_rank=0.5))]
fn rank_loss(prediction: Vec<f64>, target: Vec<f64>, tau_rank: f64) -> PyResult<(f64, Vec<f64>)> {
    losses::pairwise_rank_loss(&prediction, &target, tau_rank).py().map(loss_tuple)
}

#[pyfunction]
fn mse_loss(prediction: Vec<f64>, target: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    losses::mse_loss(&prediction, &target).py().map(loss_tuple)
}

#[pyfunction]
#[pyo3(signature = (prediction, target, tau_rank=0.5, lambda_rank=1.0, lambda_mse=0.0))]
fn total_loss(
    prediction: Vec<f64>,
    target: Vec<f64>,
    tau_rank: f64,
    lambda_rank: f64,
    lambda_mse: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let cfg = LossConfig {
        tau_rank,
        lambda_rank,
        lambda_mse,
    };
    losses::total_loss(&prediction, &target, &cfg).py().map(loss_tuple)
}

/// `P x d` nested list.
#[pyfunction]
fn read_token_file(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    nested_rows(&data::read_token_file(&path).py()?)
}

#[pyfunction]
fn write_token_file(path: PathBuf, tokens: Vec<Vec<f32>>) -> PyResult<()> {
    let t = Tensor::from_rows(&tokens).py()?;
    data::write_token_file(&path, &t).py()
}

/// L2-normalized prompt embedding.
#[pyfunction]
fn read_prompt_file(path: PathBuf) -> PyResult<Vec<f32>> {
    data::read_prompt_file(&path).py()
}

#[pyfunction]
fn write_prompt_file(path: PathBuf, prompt: Vec<f32>) -> PyResult<()> {
    data::write_prompt_file(&path, &prompt).py()
}

/// Returns `(train_ids, val_ids)` per fold.
#[pyfunction]
#[pyo3(signature = (ids, k=5, seed=0))]
fn make_folds(ids: Vec<String>, k: usize, seed: u64) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
    Ok(core_make_folds(&ids, k, seed)
        .py()?
        .into_iter()
        .map(|f| (f.train_ids, f.val_ids))
        .collect())
}

/// Writes a synthetic dataset; returns `{manifest, prompt, alt_prompt}` paths.
#[pyfunction]
#[pyo3(signature = (out, n=200, p=16, d=8, dt=8, noise=0.1, seed=0))]
fn synth(out: PathBuf, n: usize, p: usize, d: usize, dt: usize, noise: f64, seed: u64) -> PyResult<HashMap<&'static str, PathBuf>> {
    let cfg = SynthConfig {
        samples: n,
        tokens: p,
        channels: d,
        prompt_dim: dt,
        noise,
        seed,
        ..Default::default()
    };
    let r = generate_synthetic(&out, &cfg).py()?;
    Ok(HashMap::from([
        ("manifest", r.manifest_path),
        ("prompt", r.prompt_path),
        ("alt_prompt", r.alt_prompt_path),
    ]))
}

/// K-fold training. Returns one dict per fold plus the selected fold index.
#[pyfunction]
#[pyo3(signature = (manifest, prompt, out, lr=1e-5, epochs=22, folds=5, batch=4, accum=2, film_strength=1.0, lambda_mse=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    manifest: PathBuf,
    prompt: PathBuf,
    out: PathBuf,
    lr: f64,
    epochs: usize,
    folds: usize,
    batch: usize,
    accum: usize,
    film_strength: f64,
    lambda_mse: f64,
    seed: u64,
) -> PyResult<(Vec<HashMap<&'static str, f64>>, usize)> {
    let cfg = TrainConfig {
        lr,
        epochs,
        folds,
        batch_size: batch,
        accum_steps: accum,
        film_strength,
        seed,
        loss: LossConfig {
            lambda_mse,
            ..Default::default()
        },
        ..Default::default()
    };
    let (cv, _) = run_training(&cfg, &manifest, &prompt, &out).py()?;
    let rows = cv
        .folds
        .iter()
        .map(|f| {
            HashMap::from([
                ("fold", f.split.fold_index as f64),
                ("best_epoch", f.best_epoch() as f64),
                ("val_loss", f.best_val_loss()),
                ("plcc", f.report.plcc),
                ("srocc", f.report.srocc),
                ("krocc", f.report.krocc),
                ("mae", f.report.mae),
            ])
        })
        .collect();
    Ok((rows, cv.selected))
}

/// `[(op, max_rel_error, passed)]`.
#[pyfunction]
#[pyo3(signature = (seeds=10, tol=1e-6))]
fn gradcheck_suite(seeds: u64, tol: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let report = gradcheck::run_suite(gradcheck::OPS, seeds, tol).py()?;
    Ok(report
        .results
        .into_iter()
        .map(|r| {
            let ok = r.passed();
            (r.op, r.max_rel_error, ok)
        })
        .collect())
}

#[pymodule]
fn filmiqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(kendall, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rank_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(read_token_file, m)?)?;
    m.add_function(wrap_pyfunction!(write_token_file, m)?)?;
    m.add_function(wrap_pyfunction!(read_prompt_file, m)?)?;
    m.add_function(wrap_pyfunction!(write_prompt_file, m)?)?;
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_suite, m)?)?;
    Ok(())
}
