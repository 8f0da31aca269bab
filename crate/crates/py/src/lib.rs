//! Python bindings: the CLI pipeline plus direct access to trained
//! world-model and policy checkpoints.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::Path;

use logo_core::config::ExperimentConfig;
use logo_core::tensor::Array;
use logo_core::{cli, dataset, policy, world};

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Runs one CLI subcommand (`collect`, `train-wm`, `rollout`,
/// `train-policy`, `evaluate`, `ablate`, `verify`, `report`) and returns
/// its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let mut argv = vec!["logo".to_string()];
    argv.extend(args);
    cli::run_command(argv)
}

/// Every config key with its default value, as the flat text format the
/// CLI and `resolved.cfg` files use.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_text()
}

fn row(name: &str, v: Vec<f64>, dim: usize) -> PyResult<Array> {
    if v.len() != dim {
        return Err(PyValueError::new_err(format!("{name} needs {dim} values, got {}", v.len())));
    }
    Ok(Array::from_rows(&[v]))
}

/// One-step world-model inference on a single transition. Returns
/// `(next_state, reward, u)` where `u` is the dual-path uncertainty.
#[pyfunction]
fn predict(
    wm_path: &str,
    state: Vec<f64>,
    obs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
) -> PyResult<(Vec<f64>, f64, f64)> {
    let bundle = world::load(Path::new(wm_path)).map_err(runtime_err)?;
    let spec = &bundle.spec;
    if obs.len() != spec.n_agents || actions.len() != spec.n_agents {
        return Err(PyValueError::new_err(format!(
            "need {} per-agent observations and actions, got {} and {}",
            spec.n_agents,
            obs.len(),
            actions.len()
        )));
    }
    let state = row("state", state, spec.state_dim)?;
    let obs: Vec<Array> = obs
        .into_iter()
        .enumerate()
        .map(|(i, o)| row(&format!("obs[{i}]"), o, spec.obs_dim))
        .collect::<PyResult<_>>()?;
    let actions: Vec<Array> = actions
        .into_iter()
        .enumerate()
        .map(|(i, a)| row(&format!("actions[{i}]"), a, spec.action_dim))
        .collect::<PyResult<_>>()?;
    let out = bundle.predict_batch(&obs, &actions, &state);
    Ok((out.next_state.data().to_vec(), out.reward[0], out.u[0]))
}

/// Per-agent action means of a trained policy for one set of local
/// observations.
#[pyfunction]
fn act(policy_path: &str, obs: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let bundle = policy::load(Path::new(policy_path)).map_err(runtime_err)?;
    if obs.len() != bundle.spec.n_agents {
        return Err(PyValueError::new_err(format!(
            "need {} per-agent observations, got {}",
            bundle.spec.n_agents,
            obs.len()
        )));
    }
    for (i, o) in obs.iter().enumerate() {
        if o.len() != bundle.spec.obs_dim {
            return Err(PyValueError::new_err(format!(
                "obs[{i}] needs {} values, got {}",
                bundle.spec.obs_dim,
                o.len()
            )));
        }
    }
    Ok(bundle.act(&obs))
}

/// Rolls a trained policy in the live environment; returns the per-episode
/// returns.
#[pyfunction]
fn evaluate_policy(policy_path: &str, episodes: usize, seed: u64) -> PyResult<Vec<f64>> {
    let bundle = policy::load(Path::new(policy_path)).map_err(runtime_err)?;
    let spec = bundle.spec.clone();
    Ok(policy::evaluate(&bundle, &spec, episodes, seed).returns)
}

/// Dual-path uncertainty of every transition in a dataset under a trained
/// world model.
#[pyfunction]
fn uncertainties(wm_path: &str, dataset_path: &str) -> PyResult<Vec<f64>> {
    let bundle = world::load(Path::new(wm_path)).map_err(runtime_err)?;
    let ds = dataset::load_for(Path::new(dataset_path), &bundle.spec).map_err(runtime_err)?;
    Ok(world::uncertainties(&bundle, &ds))
}

/// (transition count, provenance, agent count) of a stored dataset.
#[pyfunction]
fn dataset_info(path: &str) -> PyResult<(usize, String, usize)> {
    let ds = dataset::load(Path::new(path)).map_err(runtime_err)?;
    Ok((ds.len(), ds.provenance.name().to_string(), ds.spec.n_agents))
}

#[pymodule]
fn logo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(act, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_policy, m)?)?;
    m.add_function(wrap_pyfunction!(uncertainties, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    Ok(())
}
