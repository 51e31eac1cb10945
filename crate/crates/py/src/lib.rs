//! Python bindings: policies, gradient estimators, window audit and training.

use adwin_core::audit::{audit_candidates, cosine as core_cosine, snr as core_snr, MetricSpec};
use adwin_core::config::TrainConfig;
use adwin_core::opd::{opd_gradient_discounted, opd_gradient_gamma0, score_rollout, ScoredRollout};
use adwin_core::policy::{teacher_freeze, Context, Family, GradientVector, PolicyParams, TokenSequence, Vocabulary};
use adwin_core::sampling::sample_rollout;
use adwin_core::window::{decide as core_decide, Fallback, WindowConfig};
use adwin_core::{harness, trainer, Error};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(adwin, AdwinError, PyException);
create_exception!(adwin, ConfigError, AdwinError);
create_exception!(adwin, NumericalAbort, AdwinError);

fn py_err(e: Error) -> PyErr {
    match harness::exit_code(&e) {
        2 => ConfigError::new_err(e.to_string()),
        3 => NumericalAbort::new_err(e.to_string()),
        _ => AdwinError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for adwin_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Softmax policy over a small vocabulary.
#[pyclass(name = "Policy", module = "adwin", skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (vocab, family = "ngram", order = 1, buckets = 4, eos_id = 0, values = None, scale = 1.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab: usize,
        family: &str,
        order: usize,
        buckets: usize,
        eos_id: u32,
        values: Option<Vec<f64>>,
        scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let fam = match family {
            "ngram" => Family::NgramSoftmax { order },
            "linear" => Family::LinearSoftmax { buckets },
            other => return Err(ConfigError::new_err(format!("unknown family `{other}`"))),
        };
        let v = Vocabulary::new(vocab, eos_id).py()?;
        let values = match values {
            Some(vals) => vals,
            None => {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dim = fam.dimension(&v).py()?;
                (0..dim).map(|_| rng.random_range(-scale..=scale)).collect()
            }
        };
        Ok(Self {
            inner: PolicyParams::new(fam, v, values).py()?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab().size()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    /// Log-probabilities of the next token after `context`.
    fn log_probs(&self, context: Vec<u32>) -> PyResult<Vec<f64>> {
        for &t in &context {
            self.inner.vocab().check(t).py()?;
        }
        let d = self.inner.distribution(Context::flat(&context));
        Ok((0..d.len() as u32).map(|t| d.log_prob(t)).collect())
    }

    /// Returns `(response, terminated)`.
    fn sample(&self, prompt: Vec<u32>, horizon: usize, seed: u64) -> PyResult<(Vec<u32>, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_rollout(&self.inner, &prompt, horizon, &mut rng).py()?;
        Ok((s.sequence.response, s.sequence.terminated))
    }

    /// Step adds `-lr * grad` in place.
    fn apply(&mut self, grad: Vec<f64>, lr: f64) -> PyResult<()> {
        let g = GradientVector::from_values(grad);
        self.inner.check_gradient(&g).py()?;
        for (v, d) in self.inner.values.iter_mut().zip(&g.values) {
            *v -= lr * d;
        }
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Policy(family={}, vocab={}, dim={})",
            self.inner.family().name(),
            self.inner.vocab().size(),
            self.inner.dim()
        )
    }
}

type Rollout = (Vec<u32>, Vec<u32>, bool);

fn scored(student: &PyPolicy, teacher: &PyPolicy, rollouts: Vec<Rollout>) -> PyResult<Vec<ScoredRollout>> {
    let frozen = teacher_freeze(&teacher.inner);
    rollouts
        .into_iter()
        .map(|(prompt, response, terminated)| {
            let seq = TokenSequence { prompt, response, terminated };
            score_rollout(&student.inner, &frozen, &seq).py()
        })
        .collect()
}

/// Per-step costs `student_logp - teacher_logp` along one rollout.
#[pyfunction]
#[pyo3(signature = (student, teacher, prompt, response, terminated = false))]
fn step_costs(
    student: &PyPolicy,
    teacher: &PyPolicy,
    prompt: Vec<u32>,
    response: Vec<u32>,
    terminated: bool,
) -> PyResult<Vec<f64>> {
    let r = scored(student, teacher, vec![(prompt, response, terminated)])?;
    Ok(r.into_iter().next().map(|r| r.cost).unwrap_or_default())
}

/// Distillation gradient over `(prompt, response, terminated)` rollouts.
/// `gamma = 0` is the token-local estimator and honours `window`.
#[pyfunction]
#[pyo3(signature = (student, teacher, rollouts, window = None, gamma = 0.0))]
fn opd_gradient(
    student: &PyPolicy,
    teacher: &PyPolicy,
    rollouts: Vec<Rollout>,
    window: Option<usize>,
    gamma: f64,
) -> PyResult<Vec<f64>> {
    let batch = scored(student, teacher, rollouts)?;
    let g = if gamma == 0.0 {
        opd_gradient_gamma0(&student.inner, &batch, window).py()?
    } else {
        if window.is_some() {
            return Err(ConfigError::new_err("window requires gamma = 0"));
        }
        opd_gradient_discounted(&student.inner, &batch, gamma).py()?
    };
    Ok(g.values)
}

/// Cosine under the identity metric; `None` when either side is zero.
#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<Option<f64>> {
    core_cosine(
        &GradientVector::from_values(u),
        &GradientVector::from_values(v),
        &MetricSpec::Identity,
    )
    .py()
}

#[pyfunction]
fn snr(rho: f64) -> PyResult<f64> {
    core_snr(rho).py()
}

/// Per-candidate alignment of the prefix gradient with the full one.
#[pyfunction]
#[pyo3(signature = (student, teacher, rollouts, candidates, rho_star = std::f64::consts::FRAC_1_SQRT_2))]
fn audit<'py>(
    py: Python<'py>,
    student: &PyPolicy,
    teacher: &PyPolicy,
    rollouts: Vec<Rollout>,
    candidates: Vec<usize>,
    rho_star: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let batch = scored(student, teacher, rollouts)?;
    let reports = audit_candidates(&student.inner, &batch, &candidates, &MetricSpec::Identity, rho_star).py()?;
    reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("candidate", r.candidate_length)?;
            d.set_item("micro", r.micro_cos)?;
            d.set_item("macro", r.macro_cos)?;
            d.set_item("snr", r.snr)?;
            d.set_item("admissible", r.admissible)?;
            Ok(d)
        })
        .collect()
}

/// Smallest candidate whose alignment reaches `rho_star`, else the fallback.
#[pyfunction]
#[pyo3(signature = (candidates, rhos, l_max, rho_star = std::f64::consts::FRAC_1_SQRT_2, fallback = "use-l-max", current = None))]
fn decide(
    candidates: Vec<usize>,
    rhos: Vec<Option<f64>>,
    l_max: usize,
    rho_star: f64,
    fallback: &str,
    current: Option<usize>,
) -> PyResult<usize> {
    let fallback = Fallback::parse(fallback)
        .ok_or_else(|| ConfigError::new_err(format!("unknown fallback `{fallback}`")))?;
    let cfg = WindowConfig {
        candidates: candidates.clone(),
        l_max,
        rho_star,
        fallback,
        initial: None,
    };
    cfg.validate().py()?;
    let reports: Vec<_> = candidates
        .iter()
        .zip(&rhos)
        .map(|(&l, &r)| adwin_core::audit::AlignmentReport::new(l, r, None, rho_star))
        .collect();
    let current = current.unwrap_or_else(|| cfg.initial_window());
    Ok(core_decide(&cfg, &reports, current, 0, 0).py()?.chosen)
}

/// Runs training. `config` is config-file text; `overrides` are `key=value`.
/// Returns a summary dict; metrics lines go to `metrics_path` if given.
#[pyfunction]
#[pyo3(signature = (config = "", overrides = Vec::new(), metrics_path = None))]
fn train<'py>(
    py: Python<'py>,
    config: &str,
    overrides: Vec<String>,
    metrics_path: Option<std::path::PathBuf>,
) -> PyResult<(PyPolicy, Bound<'py, PyDict>)> {
    let cfg = TrainConfig::parse(config, &overrides).py()?;
    let out = py.detach(|| -> adwin_core::Result<_> {
        match &metrics_path {
            Some(p) => {
                let f = std::io::BufWriter::new(std::fs::File::create(p)?);
                Ok(trainer::run(&cfg, f)?.0)
            }
            None => Ok(trainer::run(&cfg, std::io::sink())?.0),
        }
    });
    let out = out.py()?;
    let d = PyDict::new(py);
    d.set_item("steps", out.steps.len())?;
    d.set_item("windows", out.steps.iter().map(|s| s.window_used).collect::<Vec<_>>())?;
    d.set_item("initial_token_cost", out.initial_eval.mean_token_cost)?;
    d.set_item("final_token_cost", out.final_eval.mean_token_cost)?;
    d.set_item("sync_cost", out.totals.sync)?;
    d.set_item("probe_cost", out.totals.probe)?;
    d.set_item("audit_cost", out.totals.audit)?;
    d.set_item("total_cost", out.totals.grand)?;
    Ok((PyPolicy { inner: out.student }, d))
}

#[pymodule]
fn adwin(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(step_costs, m)?)?;
    m.add_function(wrap_pyfunction!(opd_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(snr, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("AdwinError", m.py().get_type::<AdwinError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("NumericalAbort", m.py().get_type::<NumericalAbort>())?;
    Ok(())
}
