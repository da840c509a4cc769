//! Report bundle: scaling fits over a store, one plot-data CSV per figure
//! and a JSON summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use drivescale_core::closed_loop::{write_eta_csv, EtaRow};
use drivescale_core::eval::{crossover_frontier, ModelCurve, SweepRow};
use drivescale_core::fit::{
    self, band_runs, fit_power, fit_surface, fitted_loss_range, iso_loss_equivalence,
    optimal_scaling, optimal_scaling_by, propagate_band, Band, FitError, FitResult, OptimalScaling,
    RunRecord,
};
use drivescale_core::synth::AgentType;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, DataVariant, StudyConfig};
use crate::store::StoreRow;
use crate::CliError;

/// Evaluation points of every fitted curve, per decade of x.
const GRID_PER_DECADE: usize = 8;
const ISO_LOSS_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Section {
    pub available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub files: Vec<String>,
    pub values: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// File name to contents, summary included.
    pub files: BTreeMap<String, String>,
    pub sections: BTreeMap<String, Section>,
}

impl Report {
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in &self.files {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

struct Builder {
    files: BTreeMap<String, String>,
    sections: BTreeMap<String, Section>,
}

impl Builder {
    fn ok(&mut self, name: &str, files: Vec<(String, String)>, values: Value) {
        let names = files.iter().map(|f| f.0.clone()).collect();
        self.files.extend(files);
        self.sections.insert(
            name.to_string(),
            Section {
                available: true,
                reason: None,
                files: names,
                values,
            },
        );
    }

    fn unavailable(&mut self, name: &str, reason: impl ToString) {
        self.sections.insert(
            name.to_string(),
            Section {
                available: false,
                reason: Some(reason.to_string()),
                files: Vec::new(),
                values: Value::Null,
            },
        );
    }

    fn section(&mut self, name: &str, r: Result<(Vec<(String, String)>, Value), String>) {
        match r {
            Ok((files, values)) => self.ok(name, files, values),
            Err(reason) => self.unavailable(name, reason),
        }
    }
}

fn e(x: f64) -> String {
    format!("{x:.6e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(e).unwrap_or_default()
}

/// Log-spaced grid spanning `[lo, hi]`.
fn log_grid(lo: f64, hi: f64) -> Vec<f64> {
    if !(lo > 0.0 && hi >= lo) {
        return Vec::new();
    }
    let decades = (hi / lo).log10();
    let n = ((decades * GRID_PER_DECADE as f64).ceil() as usize).max(1);
    (0..=n)
        .map(|i| lo * (hi / lo).powf(i as f64 / n as f64))
        .collect()
}

fn fit_json(f: &FitResult) -> Value {
    json!({
        "form": f.form.name(),
        "params": f.params,
        "sigmas": (0..f.params.len()).map(|i| f.sigma(i)).collect::<Vec<_>>(),
        "covariance": f.covariance,
        "residual_variance": f.residual_variance,
        "samples": f.samples,
        "converged": f.converged,
    })
}

/// Curve rows `x,fit,lower,upper` with `±3 sigma` bands.
fn curve_rows(out: &mut String, prefix: &str, f: &FitResult, grid: &[f64]) -> Result<(), FitError> {
    let sig = propagate_band(f, grid)?;
    for (x, s) in grid.iter().zip(sig) {
        let y = f.eval(*x);
        writeln!(
            out,
            "{prefix}{},{},{},{}",
            e(*x),
            e(y),
            e(y - 3.0 * s),
            e(y + 3.0 * s)
        )
        .unwrap();
    }
    Ok(())
}

fn runs_csv(rows: &[(&str, Option<f64>, DataVariant, &RunRecord)]) -> String {
    let mut s = String::from(
        "job,variant,budget,seed,enc_layers,dec_layers,d_model,params,examples,flops,eval_loss,\
         loss_av,loss_vehicle,loss_pedestrian,loss_cyclist,min_ade,w_ade,miles\n",
    );
    for (job, budget, variant, r) in rows {
        let per = |t: AgentType| opt(r.per_type_losses.get(&t).copied());
        writeln!(
            s,
            "{job},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            serde_json::to_value(variant).unwrap().as_str().unwrap(),
            opt(*budget),
            r.seed,
            r.shape.enc_layers,
            r.shape.dec_layers,
            r.shape.d_model,
            r.params,
            r.examples,
            r.flops,
            e(r.eval_loss),
            per(AgentType::Av),
            per(AgentType::Vehicle),
            per(AgentType::Pedestrian),
            per(AgentType::Cyclist),
            opt(r.min_ade),
            opt(r.w_ade),
            e(r.miles),
        )
        .unwrap();
    }
    s
}

/// Per-band parabolas (loss against params and against examples) and the
/// extracted optima with their power-law fits.
fn isoflop_section(
    bands: &[Band],
    scaling: &OptimalScaling,
) -> Result<(Vec<(String, String)>, Value), FitError> {
    let mut parabolas = String::from("budget,axis,x,y,fit,lower,upper\n");
    for o in &scaling.optima {
        let band = bands
            .iter()
            .find(|b| b.budget == o.budget)
            .expect("optimum from a band");
        for (axis, f, get) in [
            (
                "params",
                &o.params_fit,
                (|r: &RunRecord| r.params as f64) as fn(&RunRecord) -> f64,
            ),
            ("examples", &o.examples_fit, |r: &RunRecord| {
                r.examples as f64
            }),
        ] {
            let mut pts: Vec<(f64, f64)> =
                band.records.iter().map(|r| (get(r), r.eval_loss)).collect();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (x, y) in &pts {
                writeln!(parabolas, "{},{axis},{},{},,,", e(o.budget), e(*x), e(*y)).unwrap();
            }
            let grid = log_grid(pts[0].0, pts[pts.len() - 1].0);
            curve_rows(
                &mut parabolas,
                &format!("{},{axis},", e(o.budget)),
                f,
                &grid,
            )
            .map(|_| ())?;
        }
    }
    // curve_rows emits x,fit,lower,upper; pad the y column for the curve rows
    let parabolas = pad_curve_rows(&parabolas, 2);

    let mut optima = String::from(
        "budget,params_opt,params_sigma,examples_opt,examples_sigma,loss_opt,loss_sigma\n",
    );
    for o in &scaling.optima {
        writeln!(
            optima,
            "{},{},{},{},{},{},{}",
            e(o.budget),
            e(o.params_opt),
            e(o.params_sigma),
            e(o.examples_opt),
            e(o.examples_sigma),
            e(o.loss_opt),
            e(o.loss_sigma)
        )
        .unwrap();
    }
    let budgets: Vec<f64> = scaling.optima.iter().map(|o| o.budget).collect();
    let grid = log_grid(budgets[0], budgets[budgets.len() - 1]);
    let mut fits = String::from("quantity,budget,fit,lower,upper\n");
    curve_rows(&mut fits, "params,", &scaling.params_fit, &grid)?;
    curve_rows(&mut fits, "examples,", &scaling.examples_fit, &grid)?;

    let mut loss = String::from("form,budget,fit,lower,upper\n");
    curve_rows(&mut loss, "power,", &scaling.loss_fit, &grid)?;
    if let Some(c) = &scaling.loss_const_fit {
        curve_rows(&mut loss, "power_const,", c, &grid)?;
    }
    let exps = json!({
        "params_exponent": scaling.params_fit.params[1],
        "params_exponent_sigma": scaling.params_fit.sigma(1),
        "examples_exponent": scaling.examples_fit.params[1],
        "examples_exponent_sigma": scaling.examples_fit.sigma(1),
        "params_fit": fit_json(&scaling.params_fit),
        "examples_fit": fit_json(&scaling.examples_fit),
        "loss_fit": fit_json(&scaling.loss_fit),
        "loss_const_fit": scaling.loss_const_fit.as_ref().map(fit_json),
        "bands_used": scaling.optima.len(),
        "excluded_bands": scaling.excluded,
    });
    Ok((
        vec![
            ("isoflop_parabolas.csv".into(), parabolas),
            ("optimal_scaling.csv".into(), optima + "\n" + &fits),
            ("loss_vs_compute.csv".into(), loss),
        ],
        exps,
    ))
}

/// Inserts an empty y column after the first `lead` columns of curve rows
/// (rows whose fit column is set).
fn pad_curve_rows(csv: &str, lead: usize) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if i > 0 && cols.len() == lead + 4 {
            let mut v: Vec<&str> = cols[..lead + 1].to_vec();
            v.push("");
            v.extend(&cols[lead + 1..]);
            out.push_str(&v.join(","));
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

fn per_type_section(bands: &[Band]) -> Result<(Vec<(String, String)>, Value), String> {
    let mut csv = String::from("agent_type,budget,loss_opt,loss_sigma\n");
    let mut values = BTreeMap::new();
    for t in AgentType::ALL {
        let has = bands
            .iter()
            .all(|b| b.records.iter().all(|r| r.per_type_losses.contains_key(&t)));
        if !has {
            continue;
        }
        match optimal_scaling_by(bands, |r| r.per_type_losses[&t]) {
            Ok(s) => {
                for o in &s.optima {
                    writeln!(
                        csv,
                        "{},{},{},{}",
                        t.name(),
                        e(o.budget),
                        e(o.loss_opt),
                        e(o.loss_sigma)
                    )
                    .unwrap();
                }
                values.insert(
                    t.name(),
                    json!({
                        "params_exponent": s.params_fit.params[1],
                        "params_exponent_sigma": s.params_fit.sigma(1),
                        "examples_exponent": s.examples_fit.params[1],
                        "examples_exponent_sigma": s.examples_fit.sigma(1),
                        "loss_fit": fit_json(&s.loss_fit),
                    }),
                );
            }
            Err(err) => {
                values.insert(t.name(), json!({ "unavailable": err.to_string() }));
            }
        }
    }
    if values.is_empty() {
        return Err("no per-type losses in every band".into());
    }
    Ok((
        vec![("per_type.csv".into(), csv)],
        serde_json::to_value(values).unwrap(),
    ))
}

fn metric_section(bands: &[Band]) -> Result<(Vec<(String, String)>, Value), String> {
    if !bands
        .iter()
        .all(|b| b.records.iter().all(|r| r.min_ade.is_some()))
    {
        return Err("runs carry no open-loop metrics".into());
    }
    let s = optimal_scaling_by(bands, |r| r.min_ade.unwrap()).map_err(|e| e.to_string())?;
    let pts: Vec<(f64, f64)> = s.optima.iter().map(|o| (o.budget, o.loss_opt)).collect();
    let mut csv = String::from("budget,min_ade_opt,min_ade_sigma\n");
    for o in &s.optima {
        writeln!(csv, "{},{},{}", e(o.budget), e(o.loss_opt), e(o.loss_sigma)).unwrap();
    }
    let grid = log_grid(pts[0].0, pts[pts.len() - 1].0);
    let mut fits = String::from("form,budget,fit,lower,upper\n");
    curve_rows(&mut fits, "power,", &s.loss_fit, &grid).map_err(|e| e.to_string())?;
    if let Some(c) = &s.loss_const_fit {
        curve_rows(&mut fits, "power_const,", c, &grid).map_err(|e| e.to_string())?;
    }
    Ok((
        vec![("min_ade_vs_compute.csv".into(), csv + "\n" + &fits)],
        json!({
            "power": fit_json(&s.loss_fit),
            "power_const": s.loss_const_fit.as_ref().map(fit_json),
        }),
    ))
}

fn surface_section(
    records: &[&RunRecord],
    budgets: &[f64],
) -> Result<(Vec<(String, String)>, Value), String> {
    let pts: Vec<(f64, f64, f64)> = records
        .iter()
        .map(|r| (r.params as f64, r.examples as f64, r.eval_loss))
        .collect();
    let f = fit_surface(&pts).map_err(|e| e.to_string())?;
    let mut csv = String::from("params,examples,loss,fit\n");
    let mut sorted = pts.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (n, d, l) in &sorted {
        writeln!(
            csv,
            "{},{},{},{}",
            e(*n),
            e(*d),
            e(*l),
            e(f.surface_eval(*n, *d))
        )
        .unwrap();
    }
    // allocation under the fitted surface with compute proportional to N D
    let ratio = records
        .iter()
        .map(|r| r.flops as f64 / (r.params as f64 * r.examples as f64))
        .sum::<f64>()
        / records.len() as f64;
    let n_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) / 100.0;
    let n_hi = pts.iter().map(|p| p.0).fold(0.0, f64::max) * 100.0;
    let alloc: Vec<Value> = budgets
        .iter()
        .filter_map(|&c| {
            fit::optimal_allocation(&f, c, |n| ratio * n, n_lo, n_hi)
                .ok()
                .map(|(n, d)| json!({"budget": c, "params_opt": n, "examples_opt": d}))
        })
        .collect();
    Ok((
        vec![("loss_surface.csv".into(), csv)],
        json!({ "fit": fit_json(&f), "flops_per_param_example": ratio, "allocation": alloc }),
    ))
}

fn closed_loop_section(rows: &[&EtaRow]) -> Result<(Vec<(String, String)>, Value), String> {
    if rows.is_empty() {
        return Err("no closed-loop rows".into());
    }
    let mut sorted: Vec<EtaRow> = rows.iter().map(|r| (*r).clone()).collect();
    sorted.sort_by(|a, b| {
        a.flops
            .partial_cmp(&b.flops)
            .unwrap()
            .then(a.model.cmp(&b.model))
    });
    let mut csv = Vec::new();
    write_eta_csv(&mut csv, &sorted).map_err(|e| e.to_string())?;
    let pts: Vec<(f64, f64)> = sorted
        .iter()
        .filter(|r| r.flops > 0.0 && r.eta > 0)
        .map(|r| (r.flops, r.eta as f64))
        .collect();
    let eta_fit = fit_power(&pts, false).ok().map(|f| fit_json(&f));
    Ok((
        vec![("closed_loop.csv".into(), String::from_utf8(csv).unwrap())],
        json!({ "rows": sorted, "eta_fit": eta_fit }),
    ))
}

fn inference_section(
    rows: &[(&str, u64, &[SweepRow])],
) -> Result<(Vec<(String, String)>, Value), String> {
    if rows.is_empty() {
        return Err("no inference sweeps".into());
    }
    let mut sorted: Vec<&(&str, u64, &[SweepRow])> = rows.iter().collect();
    sorted.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    let mut csv = String::from("model,params,samples,flops,min_ade,min_fde,miss_rate,map\n");
    let mut curves = Vec::new();
    for (model, params, rs) in &sorted {
        for r in rs.iter() {
            writeln!(
                csv,
                "{model},{params},{},{},{},{},{},{}",
                r.samples,
                r.flops,
                e(r.min_ade),
                e(r.min_fde),
                e(r.miss_rate),
                e(r.map)
            )
            .unwrap();
        }
        curves.push(ModelCurve {
            model: model.to_string(),
            points: rs.iter().map(|r| (r.flops as f64, r.min_ade)).collect(),
        });
    }
    let frontier = crossover_frontier(&curves).map_err(|e| e.to_string())?;
    let mut fcsv = String::from("from_flops,to_flops,model\n");
    for s in &frontier {
        writeln!(fcsv, "{},{},{}", e(s.from_flops), e(s.to_flops), s.model).unwrap();
    }
    Ok((
        vec![
            ("inference_scaling.csv".into(), csv),
            ("inference_frontier.csv".into(), fcsv),
        ],
        json!({ "frontier": frontier }),
    ))
}

fn iso_loss_section(
    runs: &[(&str, Option<f64>, DataVariant, &RunRecord)],
) -> Result<(Vec<(String, String)>, Value), String> {
    let points = |v: DataVariant| -> Vec<(f64, f64)> {
        runs.iter()
            .filter(|r| r.2 == v && r.3.miles > 0.0)
            .filter_map(|r| {
                r.3.per_type_losses
                    .get(&AgentType::Av)
                    .map(|l| (r.3.miles, *l))
            })
            .collect()
    };
    let (obs, demo) = (points(DataVariant::WithoutAv), points(DataVariant::Full));
    if obs.len() < 4 || demo.len() < 4 {
        return Err("need at least 4 AV-loss runs for each data variant".into());
    }
    let fo = fit_power(&obs, true).map_err(|e| format!("observed fit: {e}"))?;
    let fd = fit_power(&demo, true).map_err(|e| format!("demonstrated fit: {e}"))?;
    let ranges = fitted_loss_range(&fo, &obs).and_then(|o| Ok((o, fitted_loss_range(&fd, &demo)?)));
    let (ro, rd) = ranges.map_err(|e| e.to_string())?;
    let pts = iso_loss_equivalence(&fo, &fd, ro, rd, ISO_LOSS_STEPS).map_err(|e| e.to_string())?;
    let mut csv = String::from("loss,observed_miles,demonstrated_miles,ratio,ratio_sigma\n");
    for p in &pts {
        writeln!(
            csv,
            "{},{},{},{},{}",
            e(p.loss),
            e(p.observed_miles),
            e(p.demonstrated_miles),
            e(p.ratio),
            e(p.ratio_sigma)
        )
        .unwrap();
    }
    let mean_ratio = pts.iter().map(|p| p.ratio).sum::<f64>() / pts.len() as f64;
    Ok((
        vec![("iso_loss.csv".into(), csv)],
        json!({ "observed_fit": fit_json(&fo), "demonstrated_fit": fit_json(&fd), "mean_ratio": mean_ratio }),
    ))
}

/// Distinct iso-FLOP budgets recorded with the runs, ascending.
pub fn run_budgets(rows: &[StoreRow]) -> Vec<f64> {
    let mut b: Vec<f64> = rows
        .iter()
        .filter_map(|r| match r {
            StoreRow::Run {
                budget: Some(b), ..
            } => Some(*b),
            _ => None,
        })
        .collect();
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.dedup();
    b
}

/// Iso-FLOP bands of full-data runs.
pub fn isoflop_bands(rows: &[StoreRow], rel_tol: f64) -> Result<Vec<Band>, FitError> {
    let records: Vec<RunRecord> = rows
        .iter()
        .filter_map(|r| match r {
            StoreRow::Run {
                budget: Some(_),
                variant: DataVariant::Full,
                record,
                ..
            } => Some(record.clone()),
            _ => None,
        })
        .collect();
    let budgets = run_budgets(rows);
    Ok(band_runs(&records, &budgets, rel_tol)?
        .bands
        .into_iter()
        .filter(|b| !b.records.is_empty())
        .collect())
}

/// Exponent fits only, for the `fit` verb. Degenerate data is an error.
pub fn fit_summary(rows: &[StoreRow], cfg: &StudyConfig) -> Result<Value, CliError> {
    let bands = isoflop_bands(rows, cfg.band_tol).map_err(|e| CliError::Fit(e.to_string()))?;
    let scaling = optimal_scaling(&bands).map_err(|e| CliError::Fit(e.to_string()))?;
    let (_, values) =
        isoflop_section(&bands, &scaling).map_err(|e| CliError::Fit(e.to_string()))?;
    let tables: Vec<Value> = scaling
        .optima
        .iter()
        .map(|o| {
            json!({
                "budget": o.budget,
                "params_opt": o.params_opt,
                "params_sigma": o.params_sigma,
                "examples_opt": o.examples_opt,
                "examples_sigma": o.examples_sigma,
                "loss_opt": o.loss_opt,
                "loss_sigma": o.loss_sigma,
                "params_parabola": fit_json(&o.params_fit),
                "examples_parabola": fit_json(&o.examples_fit),
            })
        })
        .collect();
    Ok(json!({ "config_hash": cfg.hash(), "scaling": values, "bands": tables }))
}

/// Builds the full report from store rows.
pub fn build_report(
    rows: &[StoreRow],
    store_bytes: &[u8],
    cfg: &StudyConfig,
) -> Result<Report, CliError> {
    if rows.is_empty() {
        return Err(CliError::Store("the store is empty".into()));
    }
    let mut b = Builder {
        files: BTreeMap::new(),
        sections: BTreeMap::new(),
    };
    let runs: Vec<(&str, Option<f64>, DataVariant, &RunRecord)> = rows
        .iter()
        .filter_map(|r| match r {
            StoreRow::Run {
                job,
                budget,
                variant,
                record,
            } => Some((job.as_str(), *budget, *variant, record)),
            _ => None,
        })
        .collect();
    let failed: Vec<Value> = rows
        .iter()
        .filter_map(|r| match r {
            StoreRow::Failed { job, diagnostic } => {
                Some(json!({"job": job, "diagnostic": diagnostic}))
            }
            _ => None,
        })
        .collect();
    if runs.is_empty() {
        b.unavailable("runs", "no training runs");
    } else {
        b.ok(
            "runs",
            vec![("runs.csv".into(), runs_csv(&runs))],
            json!({ "count": runs.len(), "failed": failed }),
        );
    }

    let budgets = run_budgets(rows);
    match isoflop_bands(rows, cfg.band_tol) {
        Ok(bands) => {
            match optimal_scaling(&bands) {
                Ok(s) => b.section(
                    "isoflop",
                    isoflop_section(&bands, &s).map_err(|e| e.to_string()),
                ),
                Err(err) => b.unavailable("isoflop", err),
            }
            b.section("per_type", per_type_section(&bands));
            b.section("metrics", metric_section(&bands));
        }
        Err(err) => {
            for s in ["isoflop", "per_type", "metrics"] {
                b.unavailable(s, &err);
            }
        }
    }
    let full: Vec<&RunRecord> = runs
        .iter()
        .filter(|r| r.2 == DataVariant::Full)
        .map(|r| r.3)
        .collect();
    let surface_budgets = if budgets.is_empty() {
        let mut c: Vec<f64> = full.iter().map(|r| r.flops as f64).collect();
        c.sort_by(|x, y| x.partial_cmp(y).unwrap());
        c.dedup();
        c
    } else {
        budgets.clone()
    };
    b.section("surface", surface_section(&full, &surface_budgets));

    let eta: Vec<&EtaRow> = rows
        .iter()
        .filter_map(|r| match r {
            StoreRow::ClosedLoop { row, .. } => Some(row),
            _ => None,
        })
        .collect();
    b.section("closed_loop", closed_loop_section(&eta));
    let inf: Vec<(&str, u64, &[SweepRow])> = rows
        .iter()
        .filter_map(|r| match r {
            StoreRow::Inference {
                model,
                params,
                rows,
                ..
            } => Some((model.as_str(), *params, rows.as_slice())),
            _ => None,
        })
        .collect();
    b.section("inference", inference_section(&inf));
    b.section("iso_loss", iso_loss_section(&runs));

    let summary = json!({
        "config_hash": cfg.hash(),
        "store_sha256": hex(&Sha256::digest(store_bytes)),
        "reference": {
            "params_exponent": fit::reference::PARAMS_EXPONENT,
            "examples_exponent": fit::reference::EXAMPLES_EXPONENT,
            "observed_miles": fit::reference::OBSERVED_MILES,
            "demonstrated_miles": fit::reference::DEMONSTRATED_MILES,
        },
        "miss_thresholds": cfg.thresholds,
        "bucket_rules": cfg.buckets,
        "band_tol": cfg.band_tol,
        "sections": b.sections,
    });
    let mut text =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Store(e.to_string()))?;
    text.push('\n');
    b.files.insert("summary.json".into(), text);
    Ok(Report {
        files: b.files,
        sections: b.sections,
    })
}
