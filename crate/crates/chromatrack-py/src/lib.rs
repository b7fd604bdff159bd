//! Python bindings: the pipeline entry points plus a few of the numeric
//! primitives, thin wrappers over the chromatrack crate.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::Path;

fn to_py(e: chromatrack::Error) -> PyErr {
    match e.exit_code() {
        2 => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Generate a synthetic clip dataset (presets: "plain", "hard").
#[pyfunction]
#[pyo3(signature = (out, preset = "plain", n = 10, seed = 7, frames = None))]
fn synth_dataset(out: &str, preset: &str, n: usize, seed: u64, frames: Option<usize>) -> PyResult<()> {
    let preset = chromatrack::synth::Preset::parse(preset).map_err(to_py)?;
    let mut specs = chromatrack::synth::dataset_specs(n, preset, seed);
    if let Some(f) = frames {
        for s in &mut specs {
            s.num_frames = f;
        }
    }
    chromatrack::synth::write_dataset(Path::new(out), &specs).map_err(to_py)
}

/// Fit the k-means color palette on a dataset sample and save it.
#[pyfunction]
#[pyo3(signature = (data, out, k = 16, samples = 100_000, seed = 7))]
fn fit_palette(data: &str, out: &str, k: usize, samples: usize, seed: u64) -> PyResult<f64> {
    let cfg = chromatrack::embednet::NetworkConfig::default();
    let ds = chromatrack::trainer::Dataset::load(Path::new(data), &cfg).map_err(to_py)?;
    let ab = ds.sample_ab(samples, seed);
    let palette = chromatrack::chroma::fit_palette(&ab, k, seed, 100).map_err(to_py)?;
    chromatrack::io::config::save_palette(Path::new(out), &palette).map_err(to_py)?;
    Ok(palette.final_objective)
}

/// Train the embedding network; returns the final loss. `config_json` can
/// carry any subset of the run configuration sections.
#[pyfunction]
#[pyo3(signature = (data, palette, out, config_json = None))]
fn train(data: &str, palette: &str, out: &str, config_json: Option<&str>) -> PyResult<f32> {
    let cfg = match config_json {
        Some(j) => chromatrack::io::config::RunConfig::parse(j).map_err(to_py)?,
        None => chromatrack::io::config::RunConfig::default(),
    };
    let ds = chromatrack::trainer::Dataset::load(Path::new(data), &cfg.network).map_err(to_py)?;
    let palette = chromatrack::io::config::load_palette(Path::new(palette)).map_err(to_py)?;
    let outcome = chromatrack::trainer::train(
        &ds,
        &palette,
        &cfg.network,
        &cfg.train,
        Path::new(out),
        None,
    )
    .map_err(to_py)?;
    Ok(outcome.final_loss)
}

/// Run any CLI subcommand in-process; returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let mut argv = vec!["chromatrack".to_string()];
    argv.extend(args);
    chromatrack::cli::run(argv)
}

/// Row-wise softmax of a 2D list.
#[pyfunction]
fn softmax_rows(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(PyValueError::new_err("expected a non-empty rectangular matrix"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let t = chromatrack::numcore::Tensor::new(&[r, c], flat).map_err(to_py)?;
    let out = chromatrack::numcore::softmax_rows(&t).map_err(to_py)?;
    Ok(out.data().chunks_exact(c).map(|x| x.to_vec()).collect())
}

/// sRGB (0..255) to CIELAB.
#[pyfunction]
fn rgb_to_lab(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let lab = chromatrack::chroma::rgb_to_lab_pixel([r, g, b]);
    (lab[0], lab[1], lab[2])
}

/// CIELAB to sRGB (clamped to gamut).
#[pyfunction]
fn lab_to_rgb(l: f64, a: f64, b: f64) -> (u8, u8, u8) {
    let rgb = chromatrack::chroma::lab_to_rgb_pixel([l, a, b]);
    (rgb[0], rgb[1], rgb[2])
}

/// Region overlap J between two mask files for one instance category.
#[pyfunction]
fn region_j_files(pred: &str, gt: &str, category: u8) -> PyResult<f64> {
    let p = chromatrack::io::read_pgm(pred).map_err(to_py)?;
    let g = chromatrack::io::read_pgm(gt).map_err(to_py)?;
    chromatrack::metrics::region_j(&p, &g, category).map_err(to_py)
}

#[pymodule]
fn chromatrack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit_palette, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(rgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(lab_to_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(region_j_files, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
