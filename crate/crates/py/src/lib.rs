//! Python bindings for scoring, direction fitting, probing and toy steering.

use std::collections::HashMap;
use std::path::PathBuf;

use persona_probe::activations::read_shard;
use persona_probe::chat::{ChatMessage, Decoding, Role};
use persona_probe::directions::{self, fit_all, FitOptions};
use persona_probe::oracle::{ToyBackend as CoreToy, ToyConfig};
use persona_probe::persona;
use persona_probe::probes;
use persona_probe::psychometrics::{item, score_trait, ItemResponse, LikertValue};
use persona_probe::steering::{self, ForcedChoiceTask, SteeringEntry, SteeringSpec};
use persona_probe::{ActivationBackend, Method, Position, Solver, TokenPolicy, Trait};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(persona_probe, PersonaProbeError, PyException, "Raised with `CODE: message`.");

fn err(e: persona_probe::Error) -> PyErr {
    PersonaProbeError::new_err(format!("{}: {e}", e.code()))
}

fn parse<T: std::str::FromStr<Err = persona_probe::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn messages(prompt: MessagesArg) -> PyResult<Vec<ChatMessage>> {
    match prompt {
        MessagesArg::Text(t) => Ok(vec![ChatMessage::user(t)]),
        MessagesArg::Turns(turns) => turns
            .into_iter()
            .map(|(role, content)| {
                let role = match role.as_str() {
                    "system" => Role::System,
                    "user" => Role::User,
                    "assistant" => Role::Assistant,
                    other => return Err(PersonaProbeError::new_err(format!("INVALID_ARGUMENT: unknown role `{other}`"))),
                };
                Ok(ChatMessage { role, content })
            })
            .collect(),
    }
}

/// A user prompt string or a list of `(role, content)` pairs.
#[derive(FromPyObject)]
enum MessagesArg {
    Text(String),
    Turns(Vec<(String, String)>),
}

/// Scores a `{item_id: level}` mapping. Returns `{trait_code: (total, mean)}`
/// for every trait with at least one response; such traits must be complete.
#[pyfunction]
fn score(py: Python<'_>, responses: HashMap<String, u8>) -> PyResult<Py<PyDict>> {
    let mut rs = Vec::with_capacity(responses.len());
    for (id, level) in responses {
        if item(&id).is_none() {
            return Err(PersonaProbeError::new_err(format!("INVALID_ARGUMENT: unknown item `{id}`")));
        }
        rs.push(ItemResponse {
            item_id: id,
            likert: LikertValue::new(level).map_err(err)?,
            explanation: String::new(),
        });
    }
    let out = PyDict::new(py);
    for t in Trait::ALL {
        if rs.iter().any(|r| item(&r.item_id).is_some_and(|i| i.trait_ == t)) {
            let s = score_trait(&rs, t).map_err(err)?;
            out.set_item(t.code(), (s.total, s.mean))?;
        }
    }
    Ok(out.unbind())
}

/// Parses one questionnaire answer into `(level, label, explanation)`.
#[pyfunction]
fn parse_item_response(text: &str) -> PyResult<(u8, &'static str, String)> {
    let (v, explanation) = persona::parse_item_response(text).map_err(err)?;
    Ok((v.level(), v.label(), explanation))
}

/// Least squares with an unpenalized intercept. Returns `(w, b)`.
#[pyfunction]
#[pyo3(signature = (rows, y, solver = "gavish-donoho"))]
fn least_squares(rows: Vec<Vec<f64>>, y: Vec<f64>, solver: &str) -> PyResult<(Vec<f64>, f64)> {
    directions::linalg::least_squares(&rows, &y, parse::<Solver>(solver)?).map_err(err)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    directions::cosine(&a, &b).map_err(err)
}

/// Area under the ROC curve, ties counted as one half.
#[pyfunction]
fn auc(positive: Vec<f64>, negative: Vec<f64>) -> PyResult<f64> {
    Ok(probes::auc(&positive, &negative).map_err(err)?.auc)
}

/// Parses a response to the extraversion forced-choice task.
#[pyfunction]
fn parse_forced_choice(py: Python<'_>, text: &str) -> PyResult<Py<PyDict>> {
    let o = steering::parse_forced_choice(text, &ForcedChoiceTask::extraversion());
    let d = PyDict::new(py);
    d.set_item("selections", o.selections)?;
    d.set_item("fraction_positive", o.fraction_positive)?;
    d.set_item("fraction_negative", o.fraction_negative)?;
    d.set_item("fraction_invalid", o.fraction_invalid)?;
    Ok(d.unbind())
}

/// The forced-choice prompt as `(role, content)` pairs.
#[pyfunction]
#[pyo3(signature = (persona = None))]
fn forced_choice_prompt(persona: Option<String>) -> Vec<(&'static str, String)> {
    let mut task = ForcedChoiceTask::extraversion();
    if let Some(p) = persona {
        task = task.with_persona(p);
    }
    steering::build_forced_choice_prompt(&task)
        .into_iter()
        .map(|m| (m.role.as_str(), m.content))
        .collect()
}

/// Fitted trait directions keyed by (trait, layer, position, method).
#[pyclass(module = "persona_probe")]
struct DirectionSet {
    inner: directions::DirectionSet,
}

#[pymethods]
impl DirectionSet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(DirectionSet {
            inner: directions::DirectionSet::load(&path).map_err(err)?,
        })
    }

    /// Fits regression directions for every trait, layer and position in a shard.
    #[staticmethod]
    #[pyo3(signature = (path, solver = "gavish-donoho"))]
    fn fit_shard(py: Python<'_>, path: PathBuf, solver: &str) -> PyResult<Self> {
        let solver = parse::<Solver>(solver)?;
        let inner = py
            .detach(|| {
                let shard = read_shard(&path)?;
                let opts = FitOptions {
                    solver,
                    ..FitOptions::default()
                };
                fit_all(&shard.records, &shard.manifest.model_id, &opts)
            })
            .map_err(err)?;
        Ok(DirectionSet { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn model_id(&self) -> &str {
        &self.inner.model_id
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }

    /// `(w, b)` or `None`.
    #[pyo3(signature = (trait_code, layer, position = "mean_input", method = "regression"))]
    fn get(&self, trait_code: &str, layer: u32, position: &str, method: &str) -> PyResult<Option<(Vec<f64>, f64)>> {
        let d = self.inner.get(parse::<Trait>(trait_code)?, layer, parse::<Position>(position)?, parse::<Method>(method)?);
        Ok(d.map(|d| (d.w.clone(), d.b)))
    }
}

/// Deterministic toy transformer with linear trait features.
#[pyclass(module = "persona_probe")]
struct ToyBackend {
    inner: CoreToy,
}

impl ToyBackend {
    fn spec(&self, steering: HashMap<String, f64>, every_token: bool, alpha_max: f64) -> PyResult<SteeringSpec> {
        let mut entries = Vec::with_capacity(steering.len());
        for (code, alpha) in steering {
            entries.push(SteeringEntry {
                trait_: parse(&code)?,
                alpha,
                layers: None,
            });
        }
        entries.sort_by_key(|e| e.trait_.index());
        Ok(SteeringSpec {
            entries,
            token_policy: if every_token {
                TokenPolicy::EveryGeneratedToken
            } else {
                TokenPolicy::LastInputOnly
            },
            alpha_max,
            ..SteeringSpec::default()
        })
    }
}

#[pymethods]
impl ToyBackend {
    #[new]
    #[pyo3(signature = (d = 64, layers = 8, sigma = 0.0, seed = 0, persona_gain = 1.0))]
    fn new(d: usize, layers: usize, sigma: f64, seed: u64, persona_gain: f64) -> PyResult<Self> {
        let cfg = ToyConfig {
            d,
            layers,
            sigma,
            seed,
            persona_gain,
            ..ToyConfig::default()
        };
        Ok(ToyBackend {
            inner: CoreToy::new(cfg).map_err(err)?,
        })
    }

    #[getter]
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.inner.layer_count()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    fn trait_direction(&self, trait_code: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.trait_direction(parse(trait_code)?).to_vec())
    }

    #[pyo3(signature = (prompt, max_tokens = 64))]
    fn generate(&self, prompt: MessagesArg, max_tokens: usize) -> PyResult<String> {
        let m = messages(prompt)?;
        let dec = Decoding {
            max_tokens,
            ..Decoding::default()
        };
        self.inner.generate(&m, &dec).map_err(err)
    }

    /// Generates with `{trait_code: alpha}` added along fitted directions at every layer.
    #[pyo3(signature = (prompt, directions, steering, max_tokens = 64, every_token = false, alpha_max = 0.4))]
    fn steer(&self, prompt: MessagesArg, directions: &DirectionSet, steering: HashMap<String, f64>, max_tokens: usize, every_token: bool, alpha_max: f64) -> PyResult<String> {
        let m = messages(prompt)?;
        let spec = self.spec(steering, every_token, alpha_max)?;
        let dec = Decoding {
            max_tokens,
            ..Decoding::default()
        };
        steering::steer_generate(&self.inner, &m, &spec, &directions.inner, &dec).map_err(err)
    }

    /// Extraversion forced-choice sweep. Returns fraction_positive per alpha.
    #[pyo3(signature = (directions, grid, repeats = 1, persona = None))]
    fn sweep(&self, py: Python<'_>, directions: &DirectionSet, grid: Vec<f64>, repeats: usize, persona: Option<String>) -> PyResult<Vec<f64>> {
        let mut task = ForcedChoiceTask::extraversion();
        if let Some(p) = persona {
            task = task.with_persona(p);
        }
        let template = SteeringSpec::single(Trait::Extraversion, 0.0);
        let res = py
            .detach(|| steering::alpha_sweep(&self.inner, &task, &directions.inner, &template, &grid, repeats, &Decoding::default()))
            .map_err(err)?;
        Ok(res.outcomes.iter().map(|o| o.fraction_positive).collect())
    }
}

#[pymodule]
#[pyo3(name = "persona_probe")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PersonaProbeError", m.py().get_type::<PersonaProbeError>())?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(parse_item_response, m)?)?;
    m.add_function(wrap_pyfunction!(least_squares, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(parse_forced_choice, m)?)?;
    m.add_function(wrap_pyfunction!(forced_choice_prompt, m)?)?;
    m.add_class::<DirectionSet>()?;
    m.add_class::<ToyBackend>()?;
    Ok(())
}
