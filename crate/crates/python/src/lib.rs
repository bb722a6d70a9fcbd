//! Python bindings: benchmarks, prompts, assignment, HOTA and the tracker.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use reftrack::bbox::BBox;
use reftrack::dataset::{compute_stats, read_benchmark, write_benchmark, Benchmark as CoreBenchmark};
use reftrack::generate::{generate_benchmark, BenchmarkConfig};
use reftrack::nn::{primitive_suite, PRIMITIVE_TOL};
use reftrack::refeval::{evaluate_benchmark, hota as core_hota, EvalInput, FrameBoxes, Summary};
use reftrack::tracker::{
    composite_suite, load_checkpoint, predict_benchmark, prepare, save_checkpoint, tolerance, track_prompt,
    train as core_train, Model, TrackerConfig, TrainConfig,
};
use reftrack::{assign, promptlang, Error};

fn to_py(e: Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

type PyBox = (f64, f64, f64, f64);

fn summary_dict(s: &Summary) -> HashMap<String, f64> {
    Summary::NAMES.iter().map(|n| n.to_string()).zip(s.values()).collect()
}

/// A set of videos with ground truth, prompts and referrals.
#[pyclass(module = "pyreftrack", skip_from_py_object)]
#[derive(Clone)]
pub struct Benchmark {
    inner: CoreBenchmark,
}

#[pymethods]
impl Benchmark {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_benchmark(&path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_benchmark(&path, &self.inner).map_err(to_py)
    }

    fn video_names(&self) -> Vec<String> {
        self.inner.videos.iter().map(|v| v.name.clone()).collect()
    }

    fn num_frames(&self, video: &str) -> PyResult<usize> {
        Ok(self.video(video)?.num_frames())
    }

    /// `(id, text)` pairs of one video.
    fn prompts(&self, video: &str) -> PyResult<Vec<(String, String)>> {
        Ok(self
            .video(video)?
            .prompts
            .iter()
            .map(|p| (p.id.clone(), p.text.clone()))
            .collect())
    }

    fn prompt_count(&self) -> usize {
        self.inner.prompt_count()
    }

    /// Per frame, the `(id, (x, y, w, h))` pairs the prompt refers to.
    fn referred(&self, video: &str, prompt_id: &str) -> PyResult<Vec<Vec<(u32, PyBox)>>> {
        let v = self.video(video)?;
        let (_, r) = v
            .prompt(prompt_id)
            .ok_or_else(|| PyValueError::new_err(format!("no prompt {prompt_id} in {video}")))?;
        Ok(reftrack::refeval::referral_boxes(&v.gt, r)
            .into_iter()
            .map(|f| f.into_iter().map(|(id, b)| (id, (b.x, b.y, b.w, b.h))).collect())
            .collect())
    }

    fn stats_table(&self) -> String {
        compute_stats(&self.inner).table()
    }

    fn __len__(&self) -> usize {
        self.inner.videos.len()
    }
}

impl Benchmark {
    fn video(&self, name: &str) -> PyResult<&reftrack::dataset::Video> {
        self.inner
            .video(name)
            .ok_or_else(|| PyValueError::new_err(format!("no video {name}")))
    }
}

/// Generate `(train, test)` from a benchmark TOML string.
#[pyfunction]
#[pyo3(signature = (config_toml, seed))]
fn generate(config_toml: &str, seed: u64) -> PyResult<(Benchmark, Benchmark)> {
    let mut cfg = BenchmarkConfig::from_toml_str(config_toml).map_err(to_py)?;
    cfg.world.seed = seed;
    let s = generate_benchmark(&cfg).map_err(to_py)?;
    Ok((Benchmark { inner: s.train }, Benchmark { inner: s.test }))
}

/// Canonical form of a prompt; raises on text outside the grammar.
#[pyfunction]
fn canonical_prompt(text: &str) -> PyResult<String> {
    Ok(promptlang::render(&promptlang::parse(text).map_err(to_py)?))
}

/// Minimum-cost assignment; `result[row]` is the column or `None`.
#[pyfunction]
fn linear_assignment(cost: Vec<Vec<f64>>) -> PyResult<Vec<Option<usize>>> {
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("cost rows differ in length"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(PyValueError::new_err("costs must be finite"));
    }
    Ok(assign::solve(&cost))
}

#[pyfunction]
fn iou(a: PyBox, b: PyBox) -> f64 {
    BBox::new(a.0, a.1, a.2, a.3).iou(&BBox::new(b.0, b.1, b.2, b.3))
}

#[pyfunction]
fn giou(a: PyBox, b: PyBox) -> f64 {
    BBox::new(a.0, a.1, a.2, a.3).giou(&BBox::new(b.0, b.1, b.2, b.3))
}

fn frames(v: Vec<Vec<(u32, PyBox)>>) -> FrameBoxes {
    v.into_iter()
        .map(|f| f.into_iter().map(|(id, b)| (id, BBox::new(b.0, b.1, b.2, b.3))).collect())
        .collect()
}

/// α-averaged HOTA of per-frame `(id, (x, y, w, h))` lists.
#[pyfunction]
fn hota(gt: Vec<Vec<(u32, PyBox)>>, pred: Vec<Vec<(u32, PyBox)>>) -> PyResult<HashMap<String, f64>> {
    if gt.len() != pred.len() {
        return Err(PyValueError::new_err("gt and pred differ in frame count"));
    }
    Ok(summary_dict(&core_hota(&EvalInput::new(frames(gt), frames(pred))).summary))
}

/// Mean metrics of prediction files under `pred_root`.
#[pyfunction]
fn evaluate(bench: &Benchmark, pred_root: PathBuf) -> PyResult<HashMap<String, f64>> {
    let r = evaluate_benchmark(&bench.inner, &pred_root).map_err(to_py)?;
    Ok(summary_dict(&r.mean))
}

/// `(name, max relative error, tolerance)` for every gradient check.
#[pyfunction]
#[pyo3(signature = (seed=0, points=10))]
fn gradcheck(seed: u64, points: usize) -> PyResult<Vec<(String, f64, f64)>> {
    let mut out: Vec<(String, f64, f64)> = primitive_suite(seed, points)
        .map_err(to_py)?
        .into_iter()
        .map(|e| (e.name.to_string(), e.report.max_rel_err, PRIMITIVE_TOL))
        .collect();
    for e in composite_suite(seed).map_err(to_py)? {
        out.push((e.name.to_string(), e.report.max_rel_err, tolerance(e.name)));
    }
    Ok(out)
}

/// The referring tracker.
#[pyclass(module = "pyreftrack")]
pub struct Tracker {
    model: Model,
}

#[pymethods]
impl Tracker {
    /// Build a fresh model from a tracker TOML string (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_toml=None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = match config_toml {
            Some(s) => TrackerConfig::from_toml_str(s).map_err(to_py)?,
            None => TrackerConfig::default(),
        };
        Ok(Self {
            model: Model::new(cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            model: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.model, &path).map_err(to_py)
    }

    fn config_toml(&self) -> String {
        self.model.config.to_toml()
    }

    fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    /// Train on every video of `bench`; returns the per-step losses.
    #[pyo3(signature = (bench, train_toml="", seed=0))]
    fn train(&mut self, py: Python<'_>, bench: &Benchmark, train_toml: &str, seed: u64) -> PyResult<Vec<f64>> {
        let mut tc = TrainConfig::from_toml_str(train_toml).map_err(to_py)?;
        tc.seed = seed;
        let videos = bench
            .inner
            .videos
            .iter()
            .map(|v| prepare(v, &self.model.config))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        let model = &mut self.model;
        let report = py.detach(|| core_train(model, &videos, &tc)).map_err(to_py)?;
        Ok(report.losses)
    }

    /// Track one prompt over one video. Each frame is a list of
    /// `(id, (x, y, w, h), class_prob, refer_prob, refer_score)` in pixels.
    #[allow(clippy::type_complexity)]
    fn track(&self, bench: &Benchmark, video: &str, prompt: &str) -> PyResult<Vec<Vec<(u32, PyBox, f64, f64, f64)>>> {
        let v = bench.video(video)?;
        let pv = prepare(v, &self.model.config).map_err(to_py)?;
        let preds = track_prompt(&self.model, &pv, prompt).map_err(to_py)?;
        Ok(preds
            .iter()
            .map(|f| {
                f.objects
                    .iter()
                    .map(|o| {
                        let b = o.bbox.to_pixels(pv.image.0, pv.image.1);
                        (o.id, (b.x, b.y, b.w, b.h), o.class_prob, o.refer_prob, o.refer_score)
                    })
                    .collect()
            })
            .collect())
    }

    /// Write referred predictions for every prompt; returns the file count.
    fn predict(&self, py: Python<'_>, bench: &Benchmark, out_root: PathBuf) -> PyResult<usize> {
        let model = &self.model;
        py.detach(|| predict_benchmark(model, &bench.inner, &out_root)).map_err(to_py)
    }
}

#[pymodule]
fn pyreftrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Benchmark>()?;
    m.add_class::<Tracker>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(linear_assignment, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(hota, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
