use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use empflow::decomposition::{decompose_traced, reconstruct};
use empflow::event::Event;
use empflow::io::{
    decomposition_to_json, flow_from_json, flow_to_json, fmt_float, load_model, measure_from_json, measure_to_json,
    parse_json, payload, rate_report_to_json, trajectory_csv, trajectory_to_json, Model, Provenance,
};
use empflow::markov::{divergence, invariant_measure, stationary_flow};
use empflow::models::{
    birth_death_diagnostics, bd_invariant, check_exponential_moments, check_log_sobolev_bd, check_lyapunov,
    default_sigma_grid, geometric_log_u, non_tightness_demo, strong_topology_counterexample, BirthDeathSpec,
};
use empflow::rate_function::rate;
use empflow::simulate::{sample_indexed, EmpiricalPair, Trajectory};
use empflow::tilting::{find_tilt, importance_estimate};
use empflow::{Error, ExtReal, Flow, Measure, Result, StateSpace};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::{CheckArgs, Cli, Command, Condition, CounterexampleArgs, DecomposeArgs, Format, Kind, Output, RateArgs, SimulateArgs, TiltArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let prov = Provenance::new(serde_json::to_value(&cli.command).map_err(|e| Error::Parse(e.to_string()))?);
    match &cli.command {
        Command::Simulate(a) => simulate(a, &prov),
        Command::Rate(a) => rate_cmd(a, &prov),
        Command::Decompose(a) => decompose_cmd(a, &prov),
        Command::TiltEstimate(a) => tilt_estimate(a, &prov),
        Command::Check(a) => check(a, &prov),
        Command::Counterexample(a) => counterexample(a, &prov),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<Value> {
    parse_json(&read(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> Result<Model> {
    load_model(&read(path)?)
}

fn emit(out: &Output, text: &str) -> Result<()> {
    match &out.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(Error::from),
    }
}

fn emit_json(out: &Output, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    emit(out, &s)
}

fn initial_state(model: &Model, x0: &Option<String>) -> Result<usize> {
    match x0 {
        Some(l) => model.states().index_of(l),
        None => Ok(0),
    }
}

fn ext(x: ExtReal) -> String {
    match x {
        ExtReal::Finite(v) => fmt_float(v),
        ExtReal::Infinite => "inf".into(),
    }
}

/// Keeps paths that end in an absorbing state; they are valid samples.
fn sample(model: &Model, x0: usize, horizon: f64, seed: u64, index: u64) -> Result<Trajectory> {
    match sample_indexed(&model.kernel, x0, horizon, seed, index) {
        Err(Error::AbsorbedBeforeHorizon { trajectory, .. }) => Ok(*trajectory),
        r => r,
    }
}

fn simulate(a: &SimulateArgs, prov: &Provenance) -> Result<()> {
    let model = read_model(&a.model)?;
    let x0 = initial_state(&model, &a.x0)?;
    let st = model.states();
    if a.paths == 0 {
        return Err(Error::InvalidArgument("--paths must be positive".into()));
    }
    if a.paths == 1 {
        let tr = sample(&model, x0, a.horizon, a.seed, 0)?;
        return match a.output.format(Format::Csv) {
            Format::Json => emit_json(&a.output, &prov.wrap(trajectory_to_json(&tr, st))),
            _ => emit(&a.output, &(prov.csv_header() + &trajectory_csv(&tr, st))),
        };
    }
    let n = st.len();
    let edges: Vec<_> = model.kernel.edges().map(|(e, _)| e).collect();
    let rows: Vec<Vec<f64>> = (0..a.paths as u64)
        .into_par_iter()
        .map(|i| {
            let tr = sample(&model, x0, a.horizon, a.seed, i)?;
            let p = EmpiricalPair::of(&tr, n);
            Ok((0..n).map(|y| p.measure.get(y)).chain(edges.iter().map(|&e| p.flow.get(e))).collect())
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = (0..n)
        .map(|y| format!("mu[{}]", st.label(y)))
        .chain(edges.iter().map(|&(y, z)| format!("Q[{},{}]", st.label(y), st.label(z))))
        .collect();
    let np = a.paths as f64;
    let stats: Vec<(f64, f64)> = (0..names.len())
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / np;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (np - 1.0);
            (mean, (var / np).sqrt())
        })
        .collect();
    match a.output.format(Format::Csv) {
        Format::Json => {
            let obs: Vec<Value> =
                names.iter().zip(&stats).map(|(o, (m, s))| json!({"observable": o, "mean": m, "std_error": s})).collect();
            emit_json(&a.output, &prov.wrap(json!({"seed": a.seed, "T": a.horizon, "paths": a.paths, "observables": obs})))
        }
        _ => {
            let mut s = prov.csv_header();
            s.push_str("seed,T,observable,value\n");
            for (o, (m, e)) in names.iter().zip(&stats) {
                let _ = writeln!(s, "{},{},mean({o}),{}", a.seed, fmt_float(a.horizon), fmt_float(*m));
                let _ = writeln!(s, "{},{},se({o}),{}", a.seed, fmt_float(a.horizon), fmt_float(*e));
            }
            emit(&a.output, &s)
        }
    }
}

fn rate_cmd(a: &RateArgs, prov: &Provenance) -> Result<()> {
    let model = read_model(&a.model)?;
    let st = model.states();
    let (mu, q): (Measure, Flow) = if a.stationary {
        let pi = invariant_measure(&model.kernel)?;
        let q = stationary_flow(&pi, &model.kernel);
        (pi.into_measure(), q)
    } else {
        let (m, f) = (a.measure.as_ref().unwrap(), a.flow.as_ref().unwrap());
        (measure_from_json(&read_json(m)?, st)?, flow_from_json(&read_json(f)?, st)?)
    };
    let report = rate(&mu, &q, &model.kernel);
    match a.output.format(Format::Text) {
        Format::Json => emit_json(&a.output, &prov.wrap(rate_report_to_json(&report, st, a.top))),
        Format::Csv => {
            let mut s = prov.csv_header();
            s.push_str("from,to,term\n");
            for t in &report.per_edge_terms {
                let _ = writeln!(s, "{},{},{}", st.label(t.from), st.label(t.to), ext(t.term));
            }
            emit(&a.output, &s)
        }
        Format::Text => {
            let mut s = String::new();
            let _ = writeln!(s, "value: {}", report.value);
            let _ = writeln!(s, "reason: {:?}", report.reason);
            let _ = writeln!(s, "max_abs_divergence: {}", report.max_abs_divergence);
            let _ = writeln!(s, "top terms:");
            for t in report.top_terms(a.top) {
                let _ = writeln!(s, "  {} -> {}: {}", st.label(t.from), st.label(t.to), t.term);
            }
            emit(&a.output, &s)
        }
    }
}

/// Labels in order of first appearance in a flow file.
fn labels_of_flow(v: &Value) -> Result<StateSpace> {
    let edges = payload(v)
        .get("edges")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("flow: missing `edges` array".into()))?;
    let mut labels: Vec<String> = Vec::new();
    for e in edges {
        for l in e.as_array().into_iter().flatten().take(2) {
            let s = match l {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                _ => return Err(Error::Parse("flow: state labels must be strings or integers".into())),
            };
            if !labels.contains(&s) {
                labels.push(s);
            }
        }
    }
    StateSpace::new(labels)
}

fn decompose_cmd(a: &DecomposeArgs, prov: &Provenance) -> Result<()> {
    let fv = read_json(&a.flow)?;
    let st = match &a.model {
        Some(m) => read_model(m)?.states().clone(),
        None => labels_of_flow(&fv)?,
    };
    let q = flow_from_json(&fv, &st)?;
    let (d, stats) = decompose_traced(&q)?;
    let err = reconstruct(&d).sup_distance(&q);
    let report = json!({
        "cycles": d.terms.len(),
        "steps": stats.steps,
        "support_size": stats.support_size,
        "dropped_mass": stats.dropped_mass,
        "reconstruction_max_abs_error": err,
        "relative_error": if q.norm() > 0.0 { err / q.norm() } else { 0.0 },
    });
    match a.output.format(Format::Json) {
        Format::Csv => {
            let mut s = prov.csv_header();
            let _ = writeln!(s, "# reconstruction_max_abs_error: {}", fmt_float(err));
            s.push_str("weight,vertices\n");
            for (c, w) in &d.terms {
                let v: Vec<&str> = c.vertices().iter().map(|&x| st.label(x)).collect();
                let _ = writeln!(s, "{},{}", fmt_float(*w), v.join(" "));
            }
            emit(&a.output, &s)
        }
        _ => {
            let mut doc = prov.wrap(decomposition_to_json(&d, &st));
            doc["report"] = report;
            emit_json(&a.output, &doc)
        }
    }
}

fn tilt_estimate(a: &TiltArgs, prov: &Provenance) -> Result<()> {
    let model = read_model(&a.model)?;
    let st = model.states();
    let x0 = initial_state(&model, &a.x0)?;
    let event = Event::parse(&a.event, st)?;
    let (mu, q) = if a.tilt == "auto" {
        let t = find_tilt(&model.kernel, &event, 200)?;
        (t.measure, t.flow)
    } else {
        let v = read_json(Path::new(&a.tilt))?;
        let v = payload(&v);
        let m = v.get("measure").ok_or_else(|| Error::Parse("tilt file: missing `measure`".into()))?;
        let f = v.get("flow").ok_or_else(|| Error::Parse("tilt file: missing `flow`".into()))?;
        (measure_from_json(m, st)?, flow_from_json(f, st)?)
    };
    let tilt_rate = rate(&mu, &q, &model.kernel).value;
    let mut estimates = Vec::with_capacity(a.t_list.len());
    for (i, &t) in a.t_list.iter().enumerate() {
        estimates.push(importance_estimate(&model.kernel, x0, &event, &mu, &q, t, a.paths, a.seed.wrapping_add(i as u64))?);
    }
    // least-squares slope of ln P against T
    let slope_rate = (estimates.len() >= 2).then(|| {
        let n = estimates.len() as f64;
        let tm = estimates.iter().map(|e| e.horizon).sum::<f64>() / n;
        let lm = estimates.iter().map(|e| e.log_estimate).sum::<f64>() / n;
        let sxy: f64 = estimates.iter().map(|e| (e.horizon - tm) * (e.log_estimate - lm)).sum();
        let sxx: f64 = estimates.iter().map(|e| (e.horizon - tm).powi(2)).sum();
        -sxy / sxx
    });
    match a.output.format(Format::Csv) {
        Format::Json => {
            let rows: Vec<Value> = estimates
                .iter()
                .map(|e| {
                    let mut v = serde_json::to_value(e).expect("estimate serialises");
                    v["implied_rate"] = json!(e.implied_rate());
                    v
                })
                .collect();
            let doc = json!({
                "tilt": {"measure": measure_to_json(&mu, st), "flow": flow_to_json(&q, st), "rate": tilt_rate},
                "estimates": rows,
                "regression_rate": slope_rate,
            });
            emit_json(&a.output, &prov.wrap(doc))
        }
        _ => {
            let mut s = prov.csv_header();
            let _ = writeln!(s, "# tilt_rate: {}", ext(tilt_rate));
            if let Some(r) = slope_rate {
                let _ = writeln!(s, "# regression_rate: {}", fmt_float(r));
            }
            s.push_str("T,estimate,stderr,implied_rate,hits,paths\n");
            for e in &estimates {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    fmt_float(e.horizon),
                    fmt_float(e.estimate),
                    fmt_float(e.std_error),
                    fmt_float(e.implied_rate()),
                    e.hits,
                    e.paths
                );
            }
            emit(&a.output, &s)
        }
    }
}

fn parse_u(spec: &str, model: &Model) -> Result<Vec<f64>> {
    let n = model.kernel.num_states();
    if spec == "const" {
        return Ok(vec![0.0; n]);
    }
    if let Some(a) = spec.strip_prefix("geometric:") {
        let a: f64 = a.parse().map_err(|_| Error::Parse(format!("bad base in --u {spec}")))?;
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidArgument("geometric base must be positive".into()));
        }
        return Ok(geometric_log_u(a, n));
    }
    let u = measure_from_json(&read_json(Path::new(spec))?, model.states())?;
    Ok(u.weights().iter().map(|w| w.ln()).collect())
}

fn bd_spec(model: &Model) -> Result<&BirthDeathSpec> {
    model
        .birth_death
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("this condition needs a birth_death model".into()))
}

fn check(a: &CheckArgs, prov: &Provenance) -> Result<()> {
    let model = read_model(&a.model)?;
    let report = match a.condition {
        Condition::Lyapunov => check_lyapunov(&model.kernel, &parse_u(&a.u, &model)?, &default_sigma_grid())?,
        Condition::Logsobolev => check_log_sobolev_bd(bd_spec(&model)?)?,
        Condition::Moments => check_exponential_moments(bd_spec(&model)?, &default_sigma_grid())?,
    };
    match a.output.format(Format::Json) {
        Format::Csv => {
            let mut s = prov.csv_header();
            let _ = writeln!(s, "# condition: {} verdict: {:?}", report.condition, report.verdict);
            s.push_str("witness,value\n");
            for (k, v) in &report.witnesses {
                let _ = writeln!(s, "{k},{}", fmt_float(*v));
            }
            emit(&a.output, &s)
        }
        _ => {
            let mut doc = json!({ "report": report });
            if let Some(spec) = &model.birth_death {
                doc["diagnostics"] = serde_json::to_value(birth_death_diagnostics(spec)?)?;
            }
            emit_json(&a.output, &prov.wrap(doc))
        }
    }
}

fn counterexample(a: &CounterexampleArgs, prov: &Provenance) -> Result<()> {
    match a.kind {
        Kind::StrongTopology => {
            if a.n_max < 2 {
                return Err(Error::InvalidArgument("--n-max must be at least 2".into()));
            }
            let mut rows = Vec::new();
            for n in 2..=a.n_max {
                let k = n + 1 + a.extra_states;
                let (mu, q, kernel) = strong_topology_counterexample(n, Some(k))?;
                let pi = bd_invariant(&BirthDeathSpec::half_birth(k)?)?;
                let qpi = stationary_flow(&pi, &kernel);
                rows.push((n, divergence(&q, kernel.num_states()).max_abs(), rate(&mu, &q, &kernel).value, q.l1_distance(&qpi)));
            }
            match a.output.format(Format::Csv) {
                Format::Json => {
                    let v: Vec<Value> = rows
                        .iter()
                        .map(|(n, d, r, l)| json!({"n": n, "max_abs_divergence": d, "rate": r, "l1_distance": l}))
                        .collect();
                    emit_json(&a.output, &prov.wrap(json!({ "sweep": v })))
                }
                _ => {
                    let mut s = prov.csv_header();
                    s.push_str("n,max_abs_divergence,rate,l1_distance\n");
                    for (n, d, r, l) in rows {
                        let _ = writeln!(s, "{n},{},{},{}", fmt_float(d), ext(r), fmt_float(l));
                    }
                    emit(&a.output, &s)
                }
            }
        }
        Kind::NonTightness => {
            let r = non_tightness_demo(a.beta, a.delta, a.horizon, a.paths, a.seed)?;
            match a.output.format(Format::Json) {
                Format::Csv => {
                    let mut s = prov.csv_header();
                    s.push_str("quantity,value\n");
                    for (k, v) in [
                        ("log_bound", r.log_bound),
                        ("bound", r.bound),
                        ("frequency", r.frequency),
                        ("frequency_upper", r.frequency_upper),
                        ("hits", r.hits as f64),
                        ("paths", r.paths as f64),
                    ] {
                        let _ = writeln!(s, "{k},{}", fmt_float(v));
                    }
                    emit(&a.output, &s)
                }
                _ => emit_json(&a.output, &prov.wrap(serde_json::to_value(&r)?)),
            }
        }
    }
}
