//! Python bindings: dataset generation, training, evaluation and the
//! self-check suites. Heavy calls release the GIL.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ifsl::asnet::{build_asnet, AsnetConfig};
use ifsl::harness::{generate_dataset, Dataset, MetricReport, ShapeWorldSpec};
use ifsl::ifsl::InferenceConfig;
use ifsl::train::{evaluate, train, EvalConfig, LossMode, Model, ModelConfig, TrainConfig};
use ifsl::verify;

fn to_py(e: ifsl::Error) -> PyErr {
    match e {
        ifsl::Error::Invalid(_) | ifsl::Error::Shape { .. } | ifsl::Error::InsufficientData(_) => {
            PyValueError::new_err(e.to_string())
        }
        ifsl::Error::Io(_) | ifsl::Error::Dataset(_) | ifsl::Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Renders a shape-world dataset into `dir`; returns the image count.
pub fn generate_to(dir: &Path, spec: &ShapeWorldSpec) -> ifsl::Result<usize> {
    spec.validate()?;
    let data = generate_dataset(spec)?;
    data.save(dir)?;
    Ok(data.len())
}

/// Trains a default-configuration model on every class of the dataset in
/// `data_dir` and saves it; returns the per-step losses.
pub fn train_to(data_dir: &Path, checkpoint: &Path, cfg: &TrainConfig) -> ifsl::Result<Vec<f64>> {
    let data = Dataset::load(data_dir)?;
    let mut model = Model::<f32>::new(&ModelConfig::default())?;
    let log = train(&mut model, &data, &data.all_classes(), cfg, |_, _| {})?;
    model.save(checkpoint)?;
    Ok(log.losses)
}

pub fn evaluate_from(data_dir: &Path, checkpoint: &Path, cfg: &EvalConfig) -> ifsl::Result<MetricReport> {
    let data = Dataset::load(data_dir)?;
    let model = Model::<f32>::load(&ModelConfig::default(), checkpoint)?;
    Ok(evaluate(&model, &data, &data.all_classes(), cfg)?.0)
}

pub fn plan_param_count(plan: Vec<usize>) -> ifsl::Result<usize> {
    let cfg = AsnetConfig {
        level_channels: plan,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(build_asnet::<f32>(&cfg)?.param_count())
}

#[pyfunction]
#[pyo3(signature = (dir, classes=8, image_size=64, images_per_class=20, seed=0))]
fn generate(py: Python<'_>, dir: PathBuf, classes: usize, image_size: usize, images_per_class: usize, seed: u64) -> PyResult<usize> {
    let spec = ShapeWorldSpec {
        num_classes: classes,
        image_size,
        images_per_class,
        seed,
        ..Default::default()
    };
    py.detach(|| generate_to(&dir, &spec)).map_err(to_py)
}

#[pyfunction]
#[pyo3(name = "train", signature = (data_dir, checkpoint, loss="segmentation", steps=2000, batch_size=1, lr=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_py(
    py: Python<'_>,
    data_dir: PathBuf,
    checkpoint: PathBuf,
    loss: &str,
    steps: usize,
    batch_size: usize,
    lr: Option<f64>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let mode: LossMode = loss.parse().map_err(to_py)?;
    let base = TrainConfig::for_loss(mode);
    let cfg = TrainConfig {
        steps,
        batch_size,
        seed,
        lr: lr.unwrap_or(base.lr),
        ..base
    };
    py.detach(|| train_to(&data_dir, &checkpoint, &cfg)).map_err(to_py)
}

/// Metric report as a dict: episodes, exact_ratio, class_accuracy, miou, fbiou.
#[pyfunction]
#[pyo3(name = "evaluate", signature = (data_dir, checkpoint, n_way=1, k_shot=1, episodes=200, seed=1, delta=0.5, support_masks=true))]
#[allow(clippy::too_many_arguments)]
fn evaluate_py(
    py: Python<'_>,
    data_dir: PathBuf,
    checkpoint: PathBuf,
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    seed: u64,
    delta: f64,
    support_masks: bool,
) -> PyResult<HashMap<String, f64>> {
    let cfg = EvalConfig {
        n_way,
        k_shot,
        episodes,
        seed,
        inference: InferenceConfig { delta },
        support_masks,
        ..Default::default()
    };
    let r = py.detach(|| evaluate_from(&data_dir, &checkpoint, &cfg)).map_err(to_py)?;
    Ok(HashMap::from([
        ("episodes".to_string(), r.episodes as f64),
        ("exact_ratio".to_string(), r.exact_ratio),
        ("class_accuracy".to_string(), r.class_accuracy),
        ("miou".to_string(), r.miou),
        ("fbiou".to_string(), r.fbiou),
    ]))
}

/// Learnable parameters of the network for a correlation channel plan.
#[pyfunction]
fn param_count(plan: Vec<usize>) -> PyResult<usize> {
    plan_param_count(plan).map_err(to_py)
}

/// Runs every self-check suite; returns `(suite, check, passed, detail)` rows.
#[pyfunction]
#[pyo3(name = "verify", signature = (points=100))]
fn verify_py(py: Python<'_>, points: usize) -> Vec<(String, String, bool, String)> {
    py.detach(|| {
        verify::run_all(points)
            .into_iter()
            .flat_map(|s| {
                let suite = s.name.to_string();
                s.checks.into_iter().map(move |c| (suite.clone(), c.name, c.passed, c.detail))
            })
            .collect()
    })
}

#[pymodule]
fn ifsl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_py, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_py, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(verify_py, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
