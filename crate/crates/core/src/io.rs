//! JSON and CSV formats.
//!
//! States are referred to by label everywhere. Models:
//!
//! ```json
//! {"type": "sparse", "states": ["a", "b"], "rates": [["a", "b", 1.0], ["b", "a", 2.0]]}
//! {"type": "birth_death", "b": [1.0, 1.0], "d": [1.0, 2.0], "truncation": 2}
//! ```
//!
//! Flows are `{"edges": [["a", "b", 0.5], ...]}`, measures
//! `{"weights": [["a", 0.25], ...]}`, decompositions
//! `{"cycles": [{"vertices": ["a", "b"], "weight": 0.5}, ...]}`.
//! Output documents may be wrapped as `{"provenance": ..., "result": ...}`;
//! every loader accepts both forms.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decomposition::{Cycle, CycleDecomposition};
use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::markov::{Flow, Measure, RateKernel, StateSpace};
use crate::models::{birth_death_kernel, BirthDeathSpec};
use crate::rate_function::RateReport;
use crate::simulate::Trajectory;

/// A state label written either as a string or as an integer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Label {
    Text(String),
    Int(i64),
}

impl Label {
    fn text(self) -> String {
        match self {
            Label::Text(s) => s,
            Label::Int(i) => i.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ModelFile {
    Sparse { states: Vec<Label>, rates: Vec<(Label, Label, f64)> },
    BirthDeath { b: Vec<f64>, d: Vec<f64>, truncation: usize },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kernel: RateKernel,
    pub birth_death: Option<BirthDeathSpec>,
}

impl Model {
    pub fn states(&self) -> &StateSpace {
        self.kernel.states()
    }

    pub fn to_json(&self) -> Value {
        match &self.birth_death {
            Some(s) => json!({"type": "birth_death", "b": s.b, "d": s.d, "truncation": s.truncation}),
            None => {
                let st = self.kernel.states();
                let rates: Vec<Value> =
                    self.kernel.edges().map(|((y, z), r)| json!([st.label(y), st.label(z), r])).collect();
                json!({"type": "sparse", "states": st.labels(), "rates": rates})
            }
        }
    }
}

/// Strips a provenance wrapper.
pub fn payload(v: &Value) -> &Value {
    match v.get("result") {
        Some(r) if v.get("provenance").is_some() => r,
        _ => v,
    }
}

pub fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

fn shape<T: for<'de> Deserialize<'de>>(v: &Value, what: &str) -> Result<T> {
    T::deserialize(payload(v)).map_err(|e| Error::Parse(format!("{what}: {e}")))
}

pub fn model_from_json(v: &Value) -> Result<Model> {
    match shape::<ModelFile>(v, "model")? {
        ModelFile::Sparse { states, rates } => {
            let states = StateSpace::new(states.into_iter().map(Label::text))?;
            let mut triples = Vec::with_capacity(rates.len());
            for (y, z, r) in rates {
                triples.push((states.index_of(&y.text())?, states.index_of(&z.text())?, r));
            }
            if triples.iter().any(|t| t.2 == 0.0) {
                return Err(Error::InvalidModel("rates listed in a model must be positive".into()));
            }
            Ok(Model { kernel: RateKernel::new(states, triples)?, birth_death: None })
        }
        ModelFile::BirthDeath { b, d, truncation } => {
            let spec = BirthDeathSpec::new(b, d, truncation)?;
            Ok(Model { kernel: birth_death_kernel(&spec)?, birth_death: Some(spec) })
        }
    }
}

pub fn load_model(text: &str) -> Result<Model> {
    model_from_json(&parse_json(text)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowFile {
    edges: Vec<(Label, Label, f64)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasureFile {
    weights: Vec<(Label, f64)>,
}

pub fn flow_to_json(q: &Flow, states: &StateSpace) -> Value {
    let edges: Vec<Value> = q.iter().map(|((y, z), w)| json!([states.label(y), states.label(z), w])).collect();
    json!({ "edges": edges })
}

pub fn flow_from_json(v: &Value, states: &StateSpace) -> Result<Flow> {
    let f: FlowFile = shape(v, "flow")?;
    let mut entries = Vec::with_capacity(f.edges.len());
    for (y, z, w) in f.edges {
        entries.push(((states.index_of(&y.text())?, states.index_of(&z.text())?), w));
    }
    Flow::new(entries)
}

/// Every state is listed, zeros included.
pub fn measure_to_json(mu: &Measure, states: &StateSpace) -> Value {
    let w: Vec<Value> = mu.weights().iter().enumerate().map(|(i, w)| json!([states.label(i), w])).collect();
    json!({ "weights": w })
}

/// Unlisted states get weight zero.
pub fn measure_from_json(v: &Value, states: &StateSpace) -> Result<Measure> {
    let m: MeasureFile = shape(v, "measure")?;
    let mut w = vec![0.0; states.len()];
    for (y, x) in m.weights {
        w[states.index_of(&y.text())?] += x;
    }
    Measure::new(w)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CycleEntry {
    vertices: Vec<Label>,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecompositionFile {
    cycles: Vec<CycleEntry>,
}

pub fn decomposition_to_json(d: &CycleDecomposition, states: &StateSpace) -> Value {
    let cycles: Vec<Value> = d
        .terms
        .iter()
        .map(|(c, w)| {
            let v: Vec<&str> = c.vertices().iter().map(|&x| states.label(x)).collect();
            json!({"vertices": v, "weight": w})
        })
        .collect();
    json!({ "cycles": cycles })
}

pub fn decomposition_from_json(v: &Value, states: &StateSpace) -> Result<CycleDecomposition> {
    let f: DecompositionFile = shape(v, "decomposition")?;
    let mut terms = Vec::with_capacity(f.cycles.len());
    for c in f.cycles {
        let vs = c.vertices.into_iter().map(|l| states.index_of(&l.text())).collect::<Result<Vec<_>>>()?;
        terms.push((Cycle::new(vs)?, c.weight));
    }
    Ok(CycleDecomposition { terms })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFile {
    initial: Label,
    horizon: f64,
    jumps: Vec<(f64, Label)>,
}

pub fn trajectory_to_json(t: &Trajectory, states: &StateSpace) -> Value {
    let jumps: Vec<Value> = t.jumps.iter().map(|&(s, x)| json!([s, states.label(x)])).collect();
    json!({"initial": states.label(t.initial), "horizon": t.horizon, "jumps": jumps})
}

pub fn trajectory_from_json(v: &Value, states: &StateSpace) -> Result<Trajectory> {
    let f: TrajectoryFile = shape(v, "trajectory")?;
    let jumps = f.jumps.into_iter().map(|(s, l)| Ok((s, states.index_of(&l.text())?))).collect::<Result<Vec<_>>>()?;
    Trajectory::new(states.index_of(&f.initial.text())?, jumps, f.horizon)
}

/// Full-precision float for CSV: 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

/// `time,state` rows: the initial state at time 0, then one row per jump.
pub fn trajectory_csv(t: &Trajectory, states: &StateSpace) -> String {
    let mut out = String::from("time,state\n");
    out.push_str(&format!("{},{}\n", fmt_float(0.0), states.label(t.initial)));
    for &(s, x) in &t.jumps {
        out.push_str(&format!("{},{}\n", fmt_float(s), states.label(x)));
    }
    out
}

pub fn ext_to_json(x: ExtReal) -> Value {
    serde_json::to_value(x).expect("ExtReal serialises")
}

pub fn rate_report_to_json(r: &RateReport, states: &StateSpace, top: usize) -> Value {
    let terms = |ts: &[crate::rate_function::EdgeTerm]| -> Vec<Value> {
        ts.iter().map(|t| json!([states.label(t.from), states.label(t.to), ext_to_json(t.term)])).collect()
    };
    json!({
        "value": ext_to_json(r.value),
        "reason": r.reason,
        "max_abs_divergence": r.max_abs_divergence,
        "per_edge_terms": terms(&r.per_edge_terms),
        "top_terms": terms(&r.top_terms(top)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: Value,
}

impl Provenance {
    pub fn new(config: Value) -> Self {
        Self { tool: "empflow", version: crate::VERSION, config }
    }

    pub fn wrap(&self, result: Value) -> Value {
        json!({"provenance": self, "result": result})
    }

    /// `# `-prefixed header lines for CSV output.
    pub fn csv_header(&self) -> String {
        format!(
            "# {} {}\n# config: {}\n",
            self.tool,
            self.version,
            serde_json::to_string(&self.config).expect("config serialises")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::decompose;
    use crate::markov::{invariant_measure, stationary_flow};
    use crate::simulate::sample_indexed;

    const SPARSE: &str = r#"{"type":"sparse","states":["a","b",3],"rates":[["a","b",1.5],["b",3,2],[3,"a",0.25]]}"#;

    #[test]
    fn sparse_model_round_trip() {
        let m = load_model(SPARSE).unwrap();
        assert_eq!(m.kernel.num_states(), 3);
        assert_eq!(m.kernel.rate(1, 2), 2.0);
        assert_eq!(m.states().label(2), "3");
        let again = model_from_json(&m.to_json()).unwrap();
        assert_eq!(again.kernel.edges().collect::<Vec<_>>(), m.kernel.edges().collect::<Vec<_>>());
    }

    #[test]
    fn birth_death_model() {
        let m = load_model(r#"{"type":"birth_death","b":[1,1,1],"d":[1,2,3],"truncation":3}"#).unwrap();
        assert_eq!(m.kernel.num_states(), 4);
        assert_eq!(m.kernel.rate(3, 2), 3.0);
        let again = model_from_json(&m.to_json()).unwrap();
        assert_eq!(again.birth_death, m.birth_death);
    }

    #[test]
    fn model_errors() {
        assert!(matches!(load_model("{"), Err(Error::Parse(_))));
        assert!(matches!(load_model(r#"{"type":"dense"}"#), Err(Error::Parse(_))));
        assert!(matches!(
            load_model(r#"{"type":"sparse","states":["a"],"rates":[["a","a",1]]}"#),
            Err(Error::InvalidModel(_))
        ));
        assert!(matches!(
            load_model(r#"{"type":"sparse","states":["a","b"],"rates":[["a","c",1]]}"#),
            Err(Error::UnknownState(_))
        ));
        assert!(load_model(r#"{"type":"birth_death","b":[1],"d":[1],"truncation":1}"#).is_err());
    }

    #[test]
    fn flow_measure_round_trip_exact() {
        let m = load_model(SPARSE).unwrap();
        let pi = invariant_measure(&m.kernel).unwrap();
        let q = stationary_flow(&pi, &m.kernel);
        let st = m.states();
        let text = serde_json::to_string(&flow_to_json(&q, st)).unwrap();
        assert_eq!(flow_from_json(&parse_json(&text).unwrap(), st).unwrap(), q);
        let text = serde_json::to_string(&measure_to_json(&pi, st)).unwrap();
        assert_eq!(measure_from_json(&parse_json(&text).unwrap(), st).unwrap().weights(), pi.weights());
    }

    #[test]
    fn decomposition_and_trajectory_round_trip() {
        let m = load_model(SPARSE).unwrap();
        let st = m.states();
        let q = Flow::new([((0, 1), 0.5), ((1, 2), 0.5), ((2, 0), 0.5)]).unwrap();
        let d = decompose(&q).unwrap();
        let v = Provenance::new(json!({"cmd": "decompose"})).wrap(decomposition_to_json(&d, st));
        assert_eq!(decomposition_from_json(&v, st).unwrap(), d);

        let tr = sample_indexed(&m.kernel, 0, 10.0, 1, 2).unwrap();
        let text = serde_json::to_string(&trajectory_to_json(&tr, st)).unwrap();
        assert_eq!(trajectory_from_json(&parse_json(&text).unwrap(), st).unwrap(), tr);
    }

    #[test]
    fn csv_formatting() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_float(f64::INFINITY), "inf");
        let tr = Trajectory::new(0, vec![(0.5, 1)], 1.0).unwrap();
        let csv = trajectory_csv(&tr, &StateSpace::range(2));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.ends_with("5.0000000000000000e-1,1\n"));
        let h = Provenance::new(json!({"seed": 1})).csv_header();
        assert!(h.starts_with("# empflow ") && h.contains("\"seed\":1"));
    }
}
