//! Python bindings: datasets, configs, training, evaluation and
//! checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nmn_core::checkpoint::Checkpoint;
use nmn_core::datatools::{
    kg_stats, make_synthetic_pair, sparsify, Dataset, EdgePerturbation, NoiseHubs, SynthSpec,
};
use nmn_core::model::ModelParams;
use nmn_core::pipeline;
use nmn_core::training::TrainConfig;
use nmn_core::NmnError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: NmnError) -> PyErr {
    match e {
        NmnError::Io { .. } => PyIOError::new_err(e.to_string()),
        NmnError::Config(_) | NmnError::InvalidInput(_) | NmnError::Parse { .. } | NmnError::Lookup(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Two knowledge graphs, their gold alignment and word vectors.
#[pyclass(name = "Dataset", module = "nmn", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Reads a dataset directory; `vectors` overrides `vectors.txt`.
    #[staticmethod]
    #[pyo3(signature = (path, vectors=None))]
    fn load(path: PathBuf, vectors: Option<PathBuf>) -> PyResult<Self> {
        let inner = Dataset::load(&path, vectors.as_deref()).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Random graph pair related by a relabelling, optionally perturbed.
    #[staticmethod]
    #[pyo3(signature = (n, avg_degree=6.0, seed=0, noise=0.0, dim=300, drop_edges=None, hubs=0, hub_fraction=0.3))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        n: usize,
        avg_degree: f64,
        seed: u64,
        noise: f64,
        dim: usize,
        drop_edges: Option<f64>,
        hubs: usize,
        hub_fraction: f64,
    ) -> PyResult<Self> {
        let mut spec = SynthSpec::new(n, avg_degree, seed);
        spec.feature_noise = noise;
        spec.feature_dim = dim;
        spec.edges = drop_edges.map_or(EdgePerturbation::None, EdgePerturbation::DropEdges);
        if hubs > 0 {
            spec.hubs = Some(NoiseHubs {
                count: hubs,
                fraction: hub_fraction,
            });
        }
        let pair = make_synthetic_pair(&spec).map_err(py_err)?;
        Ok(PyDataset {
            inner: pair.into_dataset(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Entity, relation and triple counts per side.
    fn stats(&self) -> BTreeMap<String, BTreeMap<&'static str, usize>> {
        let mut out = BTreeMap::new();
        for (name, kg) in [("g1", &self.inner.g1), ("g2", &self.inner.g2)] {
            let s = kg_stats(kg);
            let m = BTreeMap::from([
                ("num_entities", s.num_entities),
                ("num_relations", s.num_relations),
                ("num_triples", s.num_triples),
            ]);
            out.insert(name.to_string(), m);
        }
        out
    }

    #[getter]
    fn gold(&self) -> Vec<(u32, u32)> {
        self.inner.gold.clone()
    }

    /// Copy with one side keeping `floor(keep * |T|)` of its triples.
    #[pyo3(signature = (keep, side=1, seed=0))]
    fn sparsify(&self, keep: f64, side: u8, seed: u64) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        match side {
            1 => inner.g1 = sparsify(&inner.g1, keep, seed).map_err(py_err)?,
            2 => inner.g2 = sparsify(&inner.g2, keep, seed).map_err(py_err)?,
            _ => return Err(PyValueError::new_err("side must be 1 or 2")),
        }
        Ok(PyDataset { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.gold.len()
    }
}

/// Training hyperparameters; keyword arguments use the config-file keys.
#[pyclass(name = "TrainConfig", module = "nmn", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None, **kwargs))]
    fn new(text: Option<&str>, kwargs: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut inner = match text {
            Some(t) => TrainConfig::parse(t).map_err(py_err)?,
            None => TrainConfig::default(),
        };
        for (k, v) in kwargs.unwrap_or_default() {
            inner.set(&k, &v.str()?.to_string()).map_err(py_err)?;
        }
        inner.validate().map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, &value.str()?.to_string()).map_err(py_err)?;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({:?})", self.inner.to_text())
    }
}

/// Trained parameters with the config they were trained under.
#[pyclass(name = "Model", module = "nmn")]
struct PyModel {
    params: ModelParams,
    config: TrainConfig,
    #[pyo3(get)]
    log: Vec<String>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = Checkpoint::load(&path).and_then(|c| c.into_model()).map_err(py_err)?;
        Ok(PyModel {
            params,
            config,
            log: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.params, &self.config).save(&path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    /// Hits@k on the test split, keyed by k.
    #[pyo3(signature = (dataset, ks=vec![1, 10]))]
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, ks: Vec<usize>) -> PyResult<BTreeMap<usize, f64>> {
        if ks.contains(&0) {
            return Err(PyValueError::new_err("k values must be at least 1"));
        }
        let ds = &dataset.inner;
        let (params, config) = (&self.params, &self.config);
        let report = py
            .detach(|| {
                let prepared = pipeline::prepare(ds, config)?;
                pipeline::evaluate(ds, &prepared, params, config, &ks, &[0]).map(|r| r.0)
            })
            .map_err(py_err)?;
        Ok(report
            .hits
            .into_iter()
            .map(|(k, v)| (k.parse().expect("numeric key"), v))
            .collect())
    }

    /// `(left name, right name, weight)` attention rows for a G1/G2 pair.
    fn attention(&self, dataset: &PyDataset, left: u32, right: u32) -> PyResult<Vec<(String, String, f64)>> {
        let ds = &dataset.inner;
        let merged = ds.merged().map_err(py_err)?;
        pipeline::attention_rows(ds, &merged, &self.params, &self.config, (left, right)).map_err(py_err)
    }
}

/// Splits `dataset`, trains under `config` and returns the model; the
/// log holds one JSON line per epoch.
#[pyfunction]
fn train(py: Python<'_>, dataset: &PyDataset, config: &PyConfig) -> PyResult<PyModel> {
    let ds = &dataset.inner;
    let cfg = &config.inner;
    let outcome = py
        .detach(|| {
            let prepared = pipeline::prepare(ds, cfg)?;
            pipeline::train(&prepared, cfg)
        })
        .map_err(py_err)?;
    let log = nmn_core::training::log_to_jsonl(&outcome.log)
        .lines()
        .map(str::to_string)
        .collect();
    Ok(PyModel {
        params: outcome.params,
        config: cfg.clone(),
        log,
    })
}

#[pymodule]
fn nmn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
