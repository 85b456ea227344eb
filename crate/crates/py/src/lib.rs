//! Python bindings: thin wrappers over the core search engine. Structured
//! values cross the boundary as JSON strings or plain lists/dicts so the
//! module needs no Python-side classes.
//!
//! Build with `cargo build -p pcdarts-py --release`, then import the cdylib
//! (renamed to `pcdarts_py.so`); `python/smoke_test.py` automates that.

use std::collections::HashMap;
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pcdarts_core::config::Config;
use pcdarts_core::genotype::{self, Genotype};
use pcdarts_core::search::run_search;
use pcdarts_core::space::{edge_list, ArchParams};
use pcdarts_core::tensor::{checkpoint, cosine_lr, shuffle_groups, shuffle_order};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Runs a full search from a TOML configuration string and returns a dict
/// with the derived genotype (JSON), final accuracies, and step counts.
/// `arch_out`, when given, receives the architecture checkpoint
/// (`derive_checkpoint` reads it back).
#[pyfunction]
#[pyo3(signature = (toml_text, arch_out = None))]
fn search_toml(py: Python<'_>, toml_text: &str, arch_out: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg = Config::from_toml(toml_text).map_err(value_err)?;
    let dataset = cfg.load_dataset().map_err(value_err)?;
    let outcome = run_search::<f32>(&cfg, &dataset)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if let Some(path) = arch_out {
        let arch = outcome.net.arch_params();
        let named: Vec<(&str, _)> = arch.iter().map(|(n, t)| (n.as_str(), t)).collect();
        checkpoint::save(Path::new(path), &named)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    }
    let last = outcome.log.records.last();
    let mut d = HashMap::new();
    d.insert("genotype_json", outcome.genotype.to_json().into_pyobject(py)?.unbind().into_any());
    d.insert("epochs", outcome.log.records.len().into_pyobject(py)?.unbind().into_any());
    d.insert(
        "final_train_acc",
        last.map(|r| r.w_acc).unwrap_or(0.0).into_pyobject(py)?.unbind().into_any(),
    );
    d.insert(
        "final_held_out_acc",
        last.map(|r| r.a_acc).unwrap_or(0.0).into_pyobject(py)?.unbind().into_any(),
    );
    d.insert("sgd_steps", outcome.sgd_steps.into_pyobject(py)?.unbind().into_any());
    d.insert("adam_steps", outcome.adam_steps.into_pyobject(py)?.unbind().into_any());
    d.insert(
        "aborted",
        match outcome.aborted {
            Some(msg) => msg.into_pyobject(py)?.unbind().into_any(),
            None => py.None(),
        },
    );
    Ok(d.into_pyobject(py)?.unbind().into_any())
}

/// Derives a discrete genotype (as JSON) from an `arch.pcnt` checkpoint.
#[pyfunction]
#[pyo3(signature = (path, nodes, keep_zero = false))]
fn derive_checkpoint(path: &str, nodes: usize, keep_zero: bool) -> PyResult<String> {
    let tensors = checkpoint::load::<f64>(Path::new(path)).map_err(value_err)?;
    let arch = ArchParams::from_named(&tensors).map_err(value_err)?;
    if arch.n_nodes != nodes {
        return Err(value_err(format!(
            "checkpoint encodes a {}-node cell, expected {nodes}",
            arch.n_nodes
        )));
    }
    let g = genotype::derive_with(&arch, true, keep_zero, genotype::EdgeScore::MaxOp)
        .map_err(value_err)?;
    Ok(g.to_json())
}

/// Returns the list of constraint violations for a genotype JSON string
/// (empty list ⇒ valid).
#[pyfunction]
fn validate_genotype(json: &str, nodes: usize) -> PyResult<Vec<String>> {
    let g = Genotype::from_json(json).map_err(value_err)?;
    Ok(genotype::validate(&g, nodes))
}

/// Renders a genotype JSON string as Graphviz DOT.
#[pyfunction]
fn genotype_to_dot(json: &str) -> PyResult<String> {
    let g = Genotype::from_json(json).map_err(value_err)?;
    Ok(genotype::to_dot(&g))
}

/// Costs a genotype at evaluation scale; returns a dict with parameter and
/// multiply-add counts.
#[pyfunction]
fn cost(
    py: Python<'_>,
    json: &str,
    channels: usize,
    cells: usize,
    classes: usize,
    resolution: usize,
) -> PyResult<Py<PyAny>> {
    let g = Genotype::from_json(json).map_err(value_err)?;
    let r = genotype::count_costs(&g, channels, cells, classes, resolution).map_err(value_err)?;
    let mut d = HashMap::new();
    d.insert("params", r.params.into_pyobject(py)?.unbind().into_any());
    d.insert("multiply_adds", r.multiply_adds.into_pyobject(py)?.unbind().into_any());
    d.insert("resolution", r.resolution.into_pyobject(py)?.unbind().into_any());
    d.insert(
        "mobile_multiply_adds",
        r.mobile_multiply_adds.into_pyobject(py)?.unbind().into_any(),
    );
    d.insert("mobile_ok", r.mobile_ok.into_pyobject(py)?.to_owned().unbind().into_any());
    Ok(d.into_pyobject(py)?.unbind().into_any())
}

/// Cosine-annealed learning rate at step `t` of `total`.
#[pyfunction(name = "cosine_lr")]
fn cosine_lr_py(t: u64, total: u64, lr0: f64) -> PyResult<f64> {
    cosine_lr(t, total, lr0).map_err(value_err)
}

/// Post-mixture channel interleaving order for `channels` channels under
/// sampling divisor `k`.
#[pyfunction]
fn channel_shuffle_order(channels: usize, k: usize) -> PyResult<Vec<usize>> {
    if channels == 0 || k == 0 {
        return Err(value_err("channels and k must be ≥ 1"));
    }
    Ok(shuffle_order(channels, shuffle_groups(channels, k)))
}

/// Cell edges (predecessor, node) in evaluation order.
#[pyfunction]
fn cell_edges(nodes: usize) -> PyResult<Vec<(usize, usize)>> {
    if nodes < 3 {
        return Err(value_err("a cell needs at least 3 nodes"));
    }
    Ok(edge_list(nodes))
}

#[pymodule]
fn pcdarts_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(search_toml, m)?)?;
    m.add_function(wrap_pyfunction!(derive_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(validate_genotype, m)?)?;
    m.add_function(wrap_pyfunction!(genotype_to_dot, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr_py, m)?)?;
    m.add_function(wrap_pyfunction!(channel_shuffle_order, m)?)?;
    m.add_function(wrap_pyfunction!(cell_edges, m)?)?;
    Ok(())
}
