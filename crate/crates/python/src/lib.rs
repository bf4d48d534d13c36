//! Python bindings for `syngrid-core`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use syngrid_core::dataset::{self, SplitConfig, SplitName};
use syngrid_core::eval::{exact_match as em, Predictor};
use syngrid_core::grammar::parse_command as parse_text;
use syngrid_core::gridworld::{encode_world, step, Action, World as CoreWorld};
use syngrid_core::model::{Model as CoreModel, ModelConfig};
use syngrid_core::oracle::oracle;
use syngrid_core::syntax::{mask_from_constituency, mask_from_dependency, parse_constituency, parse_dependency, AttentionMask};
use syngrid_core::Episode as CoreEpisode;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Mask rows as integer lists; `Vec<u8>` would surface as `bytes`.
fn mask_rows(mask: &AttentionMask) -> Vec<Vec<u32>> {
    mask.to_rows().into_iter().map(|r| r.into_iter().map(u32::from).collect()).collect()
}

fn action_names(actions: &[Action]) -> Vec<&'static str> {
    actions.iter().map(|a| a.as_str()).collect()
}

fn parse_action(name: &str) -> PyResult<Action> {
    Action::ALL
        .into_iter()
        .find(|a| a.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown action {name:?}")))
}

/// A 6x6 grid world.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct World {
    inner: CoreWorld,
}

#[pymethods]
impl World {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: serde_json::from_str(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    /// The 6x6x17 cell encoding as nested lists.
    fn encode(&self) -> Vec<Vec<Vec<f64>>> {
        encode_world(&self.inner).iter().map(|row| row.iter().map(|c| c.to_vec()).collect()).collect()
    }

    /// Agent `(row, col, orientation)`.
    fn agent(&self) -> (usize, usize, String) {
        let a = self.inner.agent();
        (a.row, a.col, format!("{:?}", a.orientation).to_lowercase())
    }

    fn num_objects(&self) -> usize {
        self.inner.num_objects()
    }

    /// The world after applying the named actions.
    fn run(&self, actions: Vec<String>) -> PyResult<Self> {
        let mut w = self.inner.clone();
        for a in &actions {
            w = step(&w, parse_action(a)?);
        }
        Ok(Self { inner: w })
    }

    /// Gold action sequence for a command in this world.
    fn oracle(&self, command: &str) -> PyResult<Vec<&'static str>> {
        let (ast, _) = parse_text(command).map_err(err)?;
        let plan = oracle(&self.inner, &ast).map_err(err)?;
        Ok(action_names(&plan.actions))
    }
}

/// One generated (world, command, plan) example.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Episode {
    inner: CoreEpisode,
}

#[pymethods]
impl Episode {
    #[getter]
    fn command(&self) -> String {
        self.inner.command()
    }

    #[getter]
    fn actions(&self) -> Vec<&'static str> {
        action_names(&self.inner.actions.actions)
    }

    #[getter]
    fn world(&self) -> World {
        World { inner: self.inner.world.clone() }
    }

    #[getter]
    fn referent(&self) -> (usize, usize) {
        (self.inner.referent.row, self.inner.referent.col)
    }

    #[getter]
    fn dep_heads(&self) -> Vec<i64> {
        self.inner.dep_tree.heads_as_i64()
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<u32>> {
        mask_rows(&self.inner.mask)
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split_tag.clone()
    }

    fn __repr__(&self) -> String {
        format!("Episode({:?})", self.inner.command())
    }
}

fn wrap(eps: Vec<CoreEpisode>) -> Vec<Episode> {
    eps.into_iter().map(|inner| Episode { inner }).collect()
}

/// Dependency parse of a command: `{"tokens", "heads", "labels"}` with ROOT as -1.
#[pyfunction]
fn parse_command(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    let (ast, tokens) = parse_text(text).map_err(err)?;
    let tree = parse_dependency(&ast, &tokens).map_err(err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("tokens", tokens.tokens().to_vec())?;
    dict.set_item("heads", tree.heads_as_i64())?;
    let labels: Vec<String> = tree.labels().iter().map(|l| serde_json::to_value(l).map(|v| v.as_str().unwrap_or_default().to_string())).collect::<Result<_, _>>().map_err(err)?;
    dict.set_item("labels", labels)?;
    Ok(dict.into_any().unbind())
}

/// Attention mask of a command as 0/1 rows.
#[pyfunction]
#[pyo3(signature = (text, constituency = false))]
fn attention_mask(text: &str, constituency: bool) -> PyResult<Vec<Vec<u32>>> {
    let (ast, tokens) = parse_text(text).map_err(err)?;
    let mask = if constituency {
        mask_from_constituency(&parse_constituency(&ast, &tokens).map_err(err)?)
    } else {
        mask_from_dependency(&parse_dependency(&ast, &tokens).map_err(err)?)
    };
    Ok(mask_rows(&mask))
}

/// Bracketed constituency tree of a command.
#[pyfunction]
fn constituency_tree(text: &str) -> PyResult<String> {
    let (ast, tokens) = parse_text(text).map_err(err)?;
    Ok(parse_constituency(&ast, &tokens).map_err(err)?.to_string())
}

#[pyfunction]
#[pyo3(signature = (seed, size, max_relations = 2))]
fn generate_corpus(seed: u64, size: usize, max_relations: usize) -> PyResult<Vec<Episode>> {
    Ok(wrap(dataset::generate_corpus(seed, size, max_relations).map_err(err)?))
}

/// Train, test and validation episodes of a split (`random`, `a1`, `b2` or `c1`).
#[pyfunction]
#[pyo3(signature = (split, seed, train_size, test_size, val_size = 0, max_relations = 2))]
fn build_split(
    split: &str,
    seed: u64,
    train_size: usize,
    test_size: usize,
    val_size: usize,
    max_relations: usize,
) -> PyResult<(Vec<Episode>, Vec<Episode>, Vec<Episode>)> {
    let split = SplitName::from_short(split).ok_or_else(|| PyValueError::new_err(format!("unknown split {split:?}")))?;
    let cfg = SplitConfig { seed, split, train_size, test_size, val_size, max_relations };
    let c = dataset::build_split(&cfg).map_err(err)?;
    Ok((wrap(c.train), wrap(c.test), wrap(c.val)))
}

#[pyfunction]
fn exact_match(pred: Vec<String>, gold: Vec<String>) -> PyResult<bool> {
    let p = pred.iter().map(|a| parse_action(a)).collect::<PyResult<Vec<_>>>()?;
    let g = gold.iter().map(|a| parse_action(a)).collect::<PyResult<Vec<_>>>()?;
    Ok(em(&p, &g))
}

/// The transformer in 32-bit precision.
#[pyclass(frozen)]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    /// A freshly initialized model; `config_json` may override any config field.
    #[new]
    #[pyo3(signature = (config_json = "{}", seed = 0))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(err)?;
        Ok(Self { inner: CoreModel::new(cfg, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreModel::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(err)
    }

    #[pyo3(signature = (trainable_only = true))]
    fn count_params(&self, trainable_only: bool) -> usize {
        self.inner.count_params(trainable_only)
    }

    /// Greedy-decoded actions for an episode.
    fn predict(&self, episode: &Episode) -> PyResult<Vec<&'static str>> {
        Ok(action_names(&self.inner.predict(&episode.inner).map_err(err)?))
    }
}

#[pymodule]
fn syngrid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<World>()?;
    m.add_class::<Episode>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parse_command, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(constituency_tree, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(build_split, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    Ok(())
}
