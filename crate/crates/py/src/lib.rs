//! Python bindings: a frozen backbone, the decoding heads, generation in all
//! four modes, and the soft/hard nucleus operators.
//!
//! Core errors surface as `UsageError`, `DataError` or `NumericalError`,
//! matching the CLI's exit-code classes.

use std::path::PathBuf;

use autodeco_core::backbone::synth::{generate_synth_dataset, Command, Grammar, SynthTaskSpec};
use autodeco_core::backbone::traces::build_traces;
use autodeco_core::backbone::{pretrain_backbone, FrozenBackbone, PretrainConfig};
use autodeco_core::decoding::{
    export_trace, import_trace, step_distribution, DecodeMode, GenerationTrace, Generator,
};
use autodeco_core::heads::{init_heads, HeadParams, Squash};
use autodeco_core::numerics::Tensor;
use autodeco_core::rng::CounterRng;
use autodeco_core::soft_topp::{self, SoftMaskConfig};
use autodeco_core::training::{train_heads, TrainConfig};
use autodeco_core::{evalkit, Error, ErrorKind};
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

create_exception!(autodeco, UsageError, PyValueError);
create_exception!(autodeco, DataError, PyValueError);
create_exception!(autodeco, NumericalError, PyArithmeticError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Usage => UsageError::new_err(msg),
        ErrorKind::Data => DataError::new_err(msg),
        ErrorKind::Numerical => NumericalError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for autodeco_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Builds a decode mode from its name and, for `static`, both values.
pub fn parse_mode(
    mode: &str,
    temperature: Option<f32>,
    top_p: Option<f32>,
) -> autodeco_core::Result<DecodeMode> {
    let m = match mode {
        "greedy" => DecodeMode::Greedy,
        "default" => DecodeMode::Default,
        "autodeco" => DecodeMode::AutoDeco,
        "static" => match (temperature, top_p) {
            (Some(temperature), Some(top_p)) => DecodeMode::Static { temperature, top_p },
            _ => return Err(Error::usage("static mode needs both temperature and top_p")),
        },
        other => {
            return Err(Error::usage(format!(
                "unknown mode `{other}` (expected greedy, default, static or autodeco)"
            )))
        }
    };
    if mode != "static" && (temperature.is_some() || top_p.is_some()) {
        return Err(Error::usage(format!(
            "temperature/top_p only apply to static mode, not {mode}"
        )));
    }
    m.validate()?;
    Ok(m)
}

/// Per-token decoding heads.
#[pyclass(module = "autodeco", name = "Heads")]
struct PyHeads {
    inner: HeadParams,
}

#[pymethods]
impl PyHeads {
    /// Freshly initialized heads; a zero hidden state predicts T≈1, P≈1.
    #[new]
    #[pyo3(signature = (d_model, d_head = 64, seed = 0))]
    fn new(d_model: usize, d_head: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: init_heads(d_model, d_head, Squash::default(), seed).py_err()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: HeadParams::load(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    /// `(T̂, P̂)` for one hidden state.
    fn predict(&self, hidden: Vec<f32>) -> PyResult<(f64, f64)> {
        self.inner.predict(&hidden).py_err()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Trains a copy of these heads on `n_sequences` synthetic sequences run
    /// through `backbone`; returns the trained heads and the loss curve.
    #[pyo3(signature = (backbone, n_sequences = 64, steps = 400, seed = 0, data_seed = 5))]
    fn train(
        &self,
        py: Python<'_>,
        backbone: &PyBackbone,
        n_sequences: usize,
        steps: usize,
        seed: u64,
        data_seed: u64,
    ) -> PyResult<(PyHeads, Vec<f64>)> {
        let bb = backbone.inner.params();
        let spec = backbone.spec.with_rng_seed(data_seed);
        let cfg = TrainConfig {
            steps,
            seed,
            ..TrainConfig::default()
        };
        let report = py
            .detach(|| {
                let seqs = generate_synth_dataset(&spec, n_sequences)?;
                let records = build_traces(bb, &seqs, 0)?;
                train_heads(&records, &self.inner, &cfg)
            })
            .py_err()?;
        let curve = report.curve.iter().map(|c| c.loss).collect();
        Ok((
            PyHeads {
                inner: report.heads,
            },
            curve,
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "Heads(d_model={}, d_head={}, params={})",
            self.inner.d_model(),
            self.inner.d_head(),
            self.inner.param_count()
        )
    }
}

/// A frozen transformer backbone paired with the synthetic task it was
/// trained on.
#[pyclass(module = "autodeco", name = "Backbone")]
struct PyBackbone {
    inner: FrozenBackbone,
    spec: SynthTaskSpec,
}

#[pymethods]
impl PyBackbone {
    /// Pretrains the default backbone on the default synthetic task.
    #[staticmethod]
    #[pyo3(signature = (steps = 300, seed = 0))]
    fn pretrain(py: Python<'_>, steps: usize, seed: u64) -> PyResult<Self> {
        let spec = SynthTaskSpec::default();
        let cfg = PretrainConfig {
            steps,
            seed,
            ..PretrainConfig::default()
        };
        let report = py.detach(|| pretrain_backbone(&spec, &cfg)).py_err()?;
        Ok(Self {
            inner: report.backbone,
            spec,
        })
    }

    /// Loads weights trained on the default synthetic task.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: FrozenBackbone::load(&path).py_err()?,
            spec: SynthTaskSpec::default(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    #[getter]
    fn checksum(&self) -> String {
        self.inner.checksum().to_string()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config().d_model
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.config().vocab
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.config().max_len
    }

    /// A prompt of `length` tokens sampled from the task grammar under
    /// `command` ("none", "high" or "low").
    #[pyo3(signature = (length, command = "none", seed = 0))]
    fn sample_prompt(&self, length: usize, command: &str, seed: u64) -> PyResult<Vec<u32>> {
        let cmd = match command {
            "none" => Command::None,
            "high" => Command::High,
            "low" => Command::Low,
            other => return Err(UsageError::new_err(format!("unknown command `{other}`"))),
        };
        let g = Grammar::new(&self.spec).py_err()?;
        Ok(g.sample(cmd, length, &mut CounterRng::new(seed)))
    }

    #[pyo3(signature = (prompt, mode = "default", heads = None, max_len = 16, seed = 0, temperature = None, top_p = None, stop_token = None))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        py: Python<'_>,
        prompt: Vec<u32>,
        mode: &str,
        heads: Option<&PyHeads>,
        max_len: usize,
        seed: u64,
        temperature: Option<f32>,
        top_p: Option<f32>,
        stop_token: Option<u32>,
    ) -> PyResult<PyTrace> {
        let gen = Generator {
            backbone: self.inner.params(),
            heads: heads.map(|h| &h.inner),
            mode: parse_mode(mode, temperature, top_p).py_err()?,
            max_len,
            stop_token,
        };
        let inner = py.detach(|| gen.generate(&prompt, seed)).py_err()?;
        Ok(PyTrace { inner })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Backbone(vocab={}, d_model={}, layers={}, checksum={})",
            c.vocab,
            c.d_model,
            c.n_layers,
            &self.inner.checksum()[..12]
        )
    }
}

/// The record of one generation.
#[pyclass(module = "autodeco", name = "Trace")]
struct PyTrace {
    inner: GenerationTrace,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: import_trace(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        export_trace(&self.inner, &path).py_err()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn prompt(&self) -> Vec<u32> {
        self.inner.prompt.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn temperatures(&self) -> Vec<f32> {
        self.inner.params.iter().map(|p| p.t_hat).collect()
    }

    #[getter]
    fn top_ps(&self) -> Vec<f32> {
        self.inner.params.iter().map(|p| p.p_hat).collect()
    }

    #[getter]
    fn log_probs(&self) -> Vec<f32> {
        self.inner.log_probs.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.tokens.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(mode={}, tokens={}, mean_T={:.3}, mean_P={:.3})",
            self.inner.mode.name(),
            self.inner.tokens.len(),
            self.inner.mean_t(),
            self.inner.mean_p()
        )
    }
}

/// Differentiable nucleus: temperature softmax, soft top-p mask,
/// renormalization.
#[pyfunction]
#[pyo3(signature = (logits, temperature, top_p, alpha = soft_topp::DEFAULT_ALPHA, epsilon = soft_topp::DEFAULT_EPSILON))]
fn soft_pipeline(
    logits: Vec<f32>,
    temperature: f64,
    top_p: f64,
    alpha: f64,
    epsilon: f64,
) -> PyResult<Vec<f32>> {
    let cfg = SoftMaskConfig::new(alpha, epsilon).py_err()?;
    let out =
        soft_topp::soft_pipeline(&Tensor::from_vec(logits), temperature, top_p, &cfg).py_err()?;
    Ok(out.data().to_vec())
}

/// Standard nucleus truncation of a probability vector, renormalized.
#[pyfunction]
fn hard_topp(probs: Vec<f32>, top_p: f64) -> PyResult<Vec<f32>> {
    Ok(soft_topp::hard_topp(&Tensor::from_vec(probs), top_p)
        .py_err()?
        .data()
        .to_vec())
}

/// The distribution one decoding step samples from, and the `(T, P)` used.
#[pyfunction]
#[pyo3(signature = (logits, mode = "default", hidden = None, heads = None, temperature = None, top_p = None))]
fn step_probs(
    logits: Vec<f32>,
    mode: &str,
    hidden: Option<Vec<f32>>,
    heads: Option<&PyHeads>,
    temperature: Option<f32>,
    top_p: Option<f32>,
) -> PyResult<(Vec<f32>, f32, f32)> {
    let m = parse_mode(mode, temperature, top_p).py_err()?;
    let h = hidden.unwrap_or_default();
    let (probs, p) = step_distribution(&h, &logits, heads.map(|h| &h.inner), &m).py_err()?;
    Ok((probs, p.t_hat, p.p_hat))
}

/// Unbiased pass@k from `n` samples with `c` correct.
#[pyfunction]
fn pass_at_k(n: u64, c: u64, k: u64) -> PyResult<f64> {
    evalkit::pass_at_k(n, c, k).py_err()
}

#[pymodule]
fn autodeco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("UsageError", py.get_type::<UsageError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyHeads>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(soft_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(hard_topp, m)?)?;
    m.add_function(wrap_pyfunction!(step_probs, m)?)?;
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    Ok(())
}
