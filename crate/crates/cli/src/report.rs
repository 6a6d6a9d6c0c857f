//! JSON and CSV report builders for the command-line tool.
//!
//! Reports are `serde_json::Value` trees with sorted keys, so equal inputs
//! give byte-identical output. Values are given in the normalized frame; the
//! fields prefixed with `raw_` are converted back to the input frame.

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use sumspace::dyadic::geometry_audit;
use sumspace::extension::{top_extend, ExtensionResult, FunctionalKind};
use sumspace::jets::Jet;
use sumspace::measures::{normalize as normalize_atoms, Atom, AtomicMeasure};
use sumspace::norms::{k_curve, k_curve_csv, log_grid};
use sumspace::oracle::j_norm;
use sumspace::RunConfig;

/// Random points inspected by the ledger audit.
const LEDGER_SAMPLES: usize = 64;

/// Relative tolerance on `Mf` when an audit rebuilds a report.
const AUDIT_MF_TOL: f64 = 1e-9;

fn to_value<T: serde::Serialize>(x: &T) -> Result<Value> {
    Ok(serde_json::to_value(x)?)
}

fn measure(atoms: &[Atom], cfg: &RunConfig) -> Result<AtomicMeasure> {
    Ok(normalize_atoms(atoms.to_vec(), cfg.m, cfg.p)?)
}

/// Converts a normalized norm into the input frame.
fn raw_norm(mu: &AtomicMeasure, norm: f64, p: f64) -> f64 {
    norm / mu.frame.functional_factor().powf(1.0 / p)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0 && num.is_finite()).then(|| num / den)
}

/// `normalize`: the frame, the merge log and the normalized atoms.
pub fn normalize(atoms: &[Atom], cfg: &RunConfig) -> Result<Value> {
    let mu = measure(atoms, cfg)?;
    Ok(json!({
        "command": "normalize",
        "config": to_value(cfg)?,
        "frame": to_value(&mu.frame)?,
        "functional_factor": mu.frame.functional_factor(),
        "merges": to_value(&mu.merges)?,
        "atoms": to_value(&mu.atoms)?,
    }))
}

fn operator_section(ext: &ExtensionResult, f: &[f64], samples: usize) -> Result<Value> {
    let mu = &ext.measure;
    let (m, n, p) = (ext.config.m, mu.n, ext.config.p);
    let d = ext.xi.nrows();
    let u = ext.extended_inputs(f);
    let keystones: Vec<Value> = ext
        .keystones
        .iter()
        .enumerate()
        .map(|(k, km)| {
            let start = mu.len() + k * d;
            let jet = Jet::from_coeffs(m, n, u[start..start + d].to_vec())?;
            Ok(json!({
                "cube": km.cube,
                "center": km.center,
                "support": to_value(&km.support)?,
                "members": km.members,
                "method": to_value(&km.method)?,
                "jet": to_value(&jet)?,
            }))
        })
        .collect::<Result<_>>()?;
    let mut tu = f.to_vec();
    tu.extend(ext.anchor(f).coeffs());
    let residuals = ext.terms.residuals(&tu);
    let terms: Vec<Value> = ext
        .terms
        .kinds
        .iter()
        .zip(&ext.terms.weights)
        .zip(&residuals)
        .map(|((k, w), r)| Ok(json!({"kind": to_value(k)?, "weight": w, "residual": r})))
        .collect::<Result<_>>()?;
    let mv = ext.m_functional(f)?;
    let cost = ext.cost(f)?;
    let oracle = j_norm(mu, &ext.config)?;
    let oracle_norm = oracle.norm(p);
    let tf: Vec<Value> = ext
        .sample(f, samples)
        .into_iter()
        .map(|(y, v)| json!({"x": mu.frame.inverse(&y), "x_normalized": y, "value": v}))
        .collect();
    let audit = ext.constructibility_report(LEDGER_SAMPLES, ext.config.seed);
    Ok(json!({
        "kind": to_value(&ext.kind)?,
        "diagnostics": to_value(&ext.diagnostics)?,
        "trees": to_value(&ext.trees)?,
        "keystones": keystones,
        "ledger": to_value(&ext.ledger)?,
        "anchor": {"method": to_value(&ext.xi_method)?, "jet": to_value(&ext.anchor(f))?},
        "m_functional": {
            "value": mv.value,
            "raw_value": raw_norm(mu, mv.value, p),
            "zeta_pow": mv.zeta_pow,
            "psi_pow": mv.psi_pow,
            "terms": terms,
        },
        "cost": to_value(&cost)?,
        "raw_operator_norm": raw_norm(mu, cost.total_norm, p),
        "oracle": {
            "norm": oracle_norm,
            "raw_norm": raw_norm(mu, oracle_norm, p),
            "path": to_value(&oracle.path)?,
            "constraint_residual": oracle.constraint_residual,
            "iterations": oracle.history.len(),
        },
        "ratios": {
            "operator_over_oracle": ratio(cost.total_norm, oracle_norm),
            "m_over_operator": ratio(mv.value, cost.total_norm),
            "m_over_oracle": ratio(mv.value, oracle_norm),
        },
        "samples_per_axis": samples,
        "tf_samples": tf,
        "ledger_audit": to_value(&audit)?,
    }))
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

fn header(command: &str, atoms: &[Atom], mu: &AtomicMeasure, cfg: &RunConfig) -> Result<Value> {
    Ok(json!({
        "command": command,
        "config": to_value(cfg)?,
        "frame": to_value(&mu.frame)?,
        "merges": to_value(&mu.merges)?,
        "input": to_value(&atoms)?,
        "atoms": to_value(&mu.atoms)?,
    }))
}

fn build(atoms: &[Atom], cfg: &RunConfig) -> Result<(AtomicMeasure, ExtensionResult)> {
    let mu = measure(atoms, cfg)?;
    let ext = top_extend(&mu, cfg).context("building the extension operator")?;
    Ok((mu, ext))
}

fn extend_report(
    atoms: &[Atom],
    mu: &AtomicMeasure,
    ext: &ExtensionResult,
    samples: usize,
) -> Result<Value> {
    let f = mu.values();
    Ok(merge(
        header("extend", atoms, mu, &ext.config)?,
        operator_section(ext, &f, samples)?,
    ))
}

fn trace_report(
    atoms: &[Atom],
    mu: &AtomicMeasure,
    ext: &ExtensionResult,
    samples: usize,
) -> Result<Value> {
    let f = mu.values();
    let residuals: Vec<Value> = mu
        .atoms
        .iter()
        .map(|a| {
            let r = ext.value(&a.x, &f) - a.f;
            json!({"x": mu.frame.inverse(&a.x), "f": a.f, "residual": r})
        })
        .collect();
    let max_residual = mu
        .atoms
        .iter()
        .map(|a| (ext.value(&a.x, &f) - a.f).abs())
        .fold(0.0, f64::max);
    let points: Vec<Value> = ext
        .ledger
        .iter()
        .filter(|r| matches!(r.kind, FunctionalKind::PointEvaluation { .. }))
        .map(to_value)
        .collect::<Result<_>>()?;
    let base = merge(
        header("trace", atoms, mu, &ext.config)?,
        operator_section(ext, &f, samples)?,
    );
    Ok(merge(
        base,
        json!({
            "interpolation": {"residuals": residuals, "max_residual": max_residual},
            "point_evaluations": points,
        }),
    ))
}

/// `extend`: the operator, `M`, the ledger and all diagnostics.
pub fn extend(atoms: &[Atom], cfg: &RunConfig, samples: usize) -> Result<Value> {
    let (mu, ext) = build(atoms, cfg)?;
    extend_report(atoms, &mu, &ext, samples)
}

/// `trace`: as `extend`, for data with every weight infinite.
pub fn trace(atoms: &[Atom], cfg: &RunConfig, samples: usize) -> Result<Value> {
    if let Some(i) = atoms.iter().position(|a| !a.w.is_infinite()) {
        bail!("trace mode requires every weight to be inf; atom {i} has a finite weight");
    }
    let (mu, ext) = build(atoms, cfg)?;
    trace_report(atoms, &mu, &ext, samples)
}

/// `norm`: the oracle value of `‖f‖` in both frames.
pub fn norm(atoms: &[Atom], cfg: &RunConfig) -> Result<Value> {
    let mu = measure(atoms, cfg)?;
    let sol = j_norm(&mu, cfg)?;
    let value = sol.norm(cfg.p);
    Ok(json!({
        "command": "norm",
        "config": to_value(cfg)?,
        "frame": to_value(&mu.frame)?,
        "norm": value,
        "raw_norm": raw_norm(&mu, value, cfg.p),
        "path": to_value(&sol.path)?,
        "constraint_residual": sol.constraint_residual,
        "history": sol.history,
    }))
}

/// `kcurve`: CSV `t,K` on a logarithmic grid, in the input frame.
pub fn kcurve(
    atoms: &[Atom],
    cfg: &RunConfig,
    t_min: f64,
    t_max: f64,
    points: usize,
) -> Result<String> {
    if !(t_min > 0.0 && t_max >= t_min && t_max.is_finite()) {
        bail!("need 0 < t-min <= t-max < inf, got {t_min} and {t_max}");
    }
    if points == 0 {
        bail!("points must be positive");
    }
    let mu = measure(atoms, cfg)?;
    let mut curve = k_curve(&mu, &log_grid(t_min, t_max, points), cfg, false)?;
    for pt in &mut curve {
        pt.k = raw_norm(&mu, pt.k, cfg.p);
    }
    Ok(k_curve_csv(&curve))
}

/// `audit`: rebuilds a report from its echoed config and input, checks that
/// the rebuild is byte-identical, and reruns the geometry and ledger audits.
pub fn audit(text: &str) -> Result<Value> {
    let stored: Value = serde_json::from_str(text).context("the report is not valid JSON")?;
    let command = stored["command"].as_str().unwrap_or_default().to_string();
    if command != "extend" && command != "trace" {
        bail!("only extend and trace reports can be audited, got {command:?}");
    }
    let cfg: RunConfig =
        serde_json::from_value(stored["config"].clone()).context("reading the config echo")?;
    cfg.validate()?;
    let atoms: Vec<Atom> =
        serde_json::from_value(stored["input"].clone()).context("reading the input atoms")?;
    let samples = stored["samples_per_axis"]
        .as_u64()
        .context("reading samples_per_axis")? as usize;
    let (mu, ext) = build(&atoms, &cfg)?;
    let rebuilt = if command == "extend" {
        extend_report(&atoms, &mu, &ext, samples)?
    } else {
        trace_report(&atoms, &mu, &ext, samples)?
    };
    let mut rendered = serde_json::to_string_pretty(&rebuilt)?;
    rendered.push('\n');
    let reproduced = rendered == text;
    let stored_mf = stored["m_functional"]["value"].as_f64().unwrap_or(f64::NAN);
    let mf = ext.m_functional(&mu.values())?.value;
    let mf_error = (mf - stored_mf).abs() / mf.abs().max(1e-300);
    let mf_ok = mf == stored_mf || mf_error <= AUDIT_MF_TOL;
    let geometry: Vec<Value> = ext
        .trees
        .iter()
        .map(|t| {
            let g = geometry_audit(&t.tree);
            Ok(json!({"nest": t.nest, "root": to_value(&t.root)?, "passed": g.passed, "report": to_value(&g)?}))
        })
        .collect::<Result<_>>()?;
    let geometry_ok = geometry.iter().all(|g| g["passed"].as_bool() == Some(true));
    let ledger = ext.constructibility_report(LEDGER_SAMPLES, cfg.seed);
    let passed = reproduced && mf_ok && geometry_ok && ledger.passed;
    Ok(json!({
        "command": "audit",
        "audited": command,
        "config": to_value(&cfg)?,
        "reproduced": reproduced,
        "m_functional": {"stored": stored_mf, "recomputed": mf, "relative_error": mf_error, "passed": mf_ok},
        "geometry": geometry,
        "ledger": to_value(&ledger)?,
        "passed": passed,
    }))
}
