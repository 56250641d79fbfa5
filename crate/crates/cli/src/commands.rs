//! Subcommand bodies. Each validates its config, computes everything in
//! memory and returns the artifacts; nothing touches the disk until the whole
//! run has succeeded.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use pilotwave::cmb::{cosmic_variance_check, cosmic_variance_expected, AngularSpectrum};
use pilotwave::cosmofield::{deficit_scan, CosmoParams, InitialData};
use pilotwave::exec::Execution;
use pilotwave::io::{read_csv, write_csv, write_snapshot, SnapshotHeader};
use pilotwave::relaxation::{fit_decay, hcurve_observed, DensityGrid};
use pilotwave::typicality::{contrast, nesting_check, ContrastRow};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::*;
use crate::CliError;

/// Files to write, relative to `output_dir`, with a summary for `run.json`.
pub struct Outcome {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub config: Value,
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Value,
}

fn csv(header: &[&str], rows: &[Vec<f64>]) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(&mut out, header, rows).expect("writing to memory");
    out
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn relax(cfg: RelaxConfig) -> Result<Outcome, CliError> {
    let state = cfg.validate()?;
    let rho0 = |q| cfg.initial_density.eval(&state, q);
    let mut snapshots: Vec<DensityGrid> = Vec::new();
    let curve = hcurve_observed(&state, rho0, &cfg.times, &cfg.grids, &cfg.integrator, |d| {
        if cfg.snapshots {
            snapshots.push(d.clone());
        }
    })
    .map_err(numerical)?;

    let rows: Vec<Vec<f64>> = (0..curve.times.len()).map(|i| vec![curve.times[i], curve.hbar[i], curve.err[i]]).collect();
    let mut files = vec![("hcurve.csv".to_string(), csv(&["t", "hbar", "err"], &rows))];
    let detail: Vec<Vec<f64>> = (0..curve.times.len())
        .map(|i| vec![curve.times[i], curve.l1[i], curve.mass[i], curve.dropped[i] as f64])
        .collect();
    files.push(("convergence.csv".into(), csv(&["t", "l1", "mass", "dropped"], &detail)));
    if let Some(fit) = &curve.fit {
        files.push(("fit.json".into(), pretty(fit)));
    }
    for (i, d) in snapshots.iter().enumerate() {
        let n = d.spec.fine_cells;
        let h = d.spec.spacing();
        for (field, values, norm) in
            [("rho", &d.fine_rho, d.fine_mass()), ("psi2", &d.fine_psi2, d.fine_psi2_mass())]
        {
            let header = SnapshotHeader {
                field: field.into(),
                rows: n,
                cols: n,
                origin: [-d.spec.half_width + 0.5 * h, -d.spec.half_width + 0.5 * h],
                spacing: h,
                t: d.t,
                normalization: norm,
                spec: to_value(&d.spec),
            };
            let mut bytes = Vec::new();
            write_snapshot(&mut bytes, &header, values).map_err(numerical)?;
            files.push((format!("{field}_{i:03}.bin"), bytes));
        }
    }
    let summary = json!({
        "fit": curve.fit,
        "l1": curve.l1,
        "mass": curve.mass,
        "dropped": curve.dropped,
        "state": to_value(&state),
    });
    Ok(Outcome { output_dir: cfg.output_dir.clone(), seed: cfg.seed, config: to_value(&cfg), files, summary })
}

pub fn fit(cfg: FitConfig) -> Result<Outcome, CliError> {
    let file = fs::File::open(&cfg.input)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", cfg.input.display())))?;
    let (header, rows) = read_csv(std::io::BufReader::new(file))
        .map_err(|e| CliError::Config(format!("{}: {e}", cfg.input.display())))?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("{} has no `{name}` column", cfg.input.display())))
    };
    let (ct, ch) = (col("t")?, col("hbar")?);
    let times: Vec<f64> = rows.iter().map(|r| r[ct]).collect();
    let hbar: Vec<f64> = rows.iter().map(|r| r[ch]).collect();
    let fit = fit_decay(&times, &hbar).map_err(numerical)?;
    Ok(Outcome {
        output_dir: cfg.output_dir.clone(),
        seed: cfg.seed,
        config: to_value(&cfg),
        files: vec![("fit.json".into(), pretty(&fit))],
        summary: to_value(&fit),
    })
}

pub fn cosmo_scan(exec: Execution, cfg: CosmoScanConfig) -> Result<Outcome, CliError> {
    let init = InitialData::random(cfg.side, cfg.seed, cfg.initial_rho).map_err(config_error)?;
    let template = CosmoParams { a_i: cfg.a_i, t_i: cfg.t_i, t_f: cfg.t_f, k: 1.0, expansion: cfg.expansion };
    template.validate().map_err(config_error)?;
    cfg.evolve.validate().map_err(config_error)?;
    if cfg.ratios.is_empty() || cfg.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(CliError::Config("ratios must be a non-empty list of positive values".into()));
    }
    let curve = deficit_scan(exec, &template, &cfg.ratios, &init, &cfg.evolve).map_err(numerical)?;
    let rows: Vec<Vec<f64>> =
        (0..curve.ks.len()).map(|i| vec![curve.ks[i], curve.lambda_over_hubble[i], curve.xi[i]]).collect();
    let mut files = vec![("deficit.csv".to_string(), csv(&["k", "lambda_over_hubble_at_ti", "xi"], &rows))];
    if let Some(fit) = &curve.fit {
        files.push(("deficit_fit.json".into(), pretty(fit)));
    }
    let summary = json!({
        "converged": curve.converged,
        "smoothed": curve.smoothed(),
        "max_smoothed_residual": curve.max_smoothed_residual(),
        "fit": curve.fit,
    });
    Ok(Outcome { output_dir: cfg.output_dir.clone(), seed: cfg.seed, config: to_value(&cfg), files, summary })
}

fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn cmb(exec: Execution, cfg: CmbConfig) -> Result<Outcome, CliError> {
    cfg.spectrum.validate().map_err(config_error)?;
    cfg.transfer.validate().map_err(config_error)?;
    if cfg.l_min < 2 || cfg.l_min > cfg.l_max {
        return Err(CliError::Config(format!("need 2 <= l_min <= l_max, got [{}, {}]", cfg.l_min, cfg.l_max)));
    }
    let plain = AngularSpectrum::compute(exec, &cfg.spectrum.uncorrected(), &cfg.transfer, cfg.l_min, cfg.l_max)
        .map_err(numerical)?;
    let corrected = if cfg.spectrum.deficit.is_some() {
        AngularSpectrum::compute(exec, &cfg.spectrum, &cfg.transfer, cfg.l_min, cfg.l_max).map_err(numerical)?
    } else {
        plain.clone()
    };
    let rows: Vec<Vec<f64>> = (cfg.l_min..=cfg.l_max)
        .map(|l| {
            let (u, c) = (plain.get(l).unwrap(), corrected.get(l).unwrap());
            vec![l as f64, u, c, c / u]
        })
        .collect();
    let files = vec![("cl.csv".to_string(), csv(&["l", "Cl_uncorrected", "Cl_corrected", "ratio"], &rows))];
    Ok(Outcome {
        output_dir: cfg.output_dir.clone(),
        seed: cfg.seed,
        config: to_value(&cfg),
        files,
        summary: json!({ "multipoles": rows.len() }),
    })
}

pub fn cosmic_variance(exec: Execution, cfg: CosmicVarianceConfig) -> Result<Outcome, CliError> {
    if cfg.ls.is_empty() || cfg.ls.iter().any(|&l| l < 2) {
        return Err(CliError::Config("ls must be a non-empty list of multipoles >= 2".into()));
    }
    if cfg.realizations < 2 {
        return Err(CliError::Config("realizations must be at least 2".into()));
    }
    let mut rows = Vec::new();
    let mut z = Vec::new();
    for &l in &cfg.ls {
        let cv = cosmic_variance_check(exec, l, cfg.realizations, cfg.seed).map_err(numerical)?;
        debug_assert_eq!(cv.expected, cosmic_variance_expected(l));
        rows.push(vec![l as f64, cv.expected, cv.empirical, cv.stderr]);
        z.push(json!({ "l": l, "z": cv.z_score(), "mean_ratio": cv.mean_ratio }));
    }
    Ok(Outcome {
        output_dir: cfg.output_dir.clone(),
        seed: cfg.seed,
        config: to_value(&cfg),
        files: vec![("cv.csv".into(), csv(&["l", "expected", "empirical", "stderr"], &rows))],
        summary: json!({ "z_scores": z }),
    })
}

pub fn typicality(exec: Execution, cfg: TypicalityConfig) -> Result<Outcome, CliError> {
    if cfg.n < pilotwave::typicality::MIN_SAMPLES {
        return Err(CliError::Config(format!("n must be at least {}", pilotwave::typicality::MIN_SAMPLES)));
    }
    if cfg.exponents.is_empty() || cfg.exponents.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(CliError::Config("exponents must be a non-empty list of positive values".into()));
    }
    if let Some(n) = &cfg.nesting {
        if n.n < pilotwave::typicality::MIN_SAMPLES {
            return Err(CliError::Config(format!("nesting n must be at least {}", pilotwave::typicality::MIN_SAMPLES)));
        }
    }
    let rows = contrast(exec, &cfg.psi, cfg.n, &cfg.exponents, cfg.seed).map_err(numerical)?;
    let table: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.n as f64, r.p, r.q, r.kl]).collect();
    let mut files = vec![("typicality.csv".to_string(), csv(&["n", "p", "q", "kl"], &table))];
    let nesting = match &cfg.nesting {
        Some(nc) => Some(nesting_check(exec, &nc.first, &nc.second, nc.n, cfg.seed).map_err(numerical)?),
        None => None,
    };
    if let Some(r) = &nesting {
        files.push(("nesting.csv".into(), csv(&["component", "kl"], &[vec![1.0, r.first], vec![2.0, r.second]])));
    }
    files.push(("report.txt".into(), report(&rows, nesting.as_ref()).into_bytes()));
    Ok(Outcome {
        output_dir: cfg.output_dir.clone(),
        seed: cfg.seed,
        config: to_value(&cfg),
        files,
        summary: json!({ "contrast": rows, "nesting": nesting }),
    })
}

/// Sampling under each exponent scored against each exponent, side by side.
fn report(rows: &[ContrastRow], nesting: Option<&pilotwave::typicality::NestingReport>) -> String {
    let mut s = String::new();
    let n = rows.first().map_or(0, |r| r.n);
    writeln!(s, "sub-systems per universe: {n}").unwrap();
    writeln!(s, "KL divergence of the induced histogram from normalized |psi|^q").unwrap();
    let mut qs: Vec<f64> = rows.iter().map(|r| r.q).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    write!(s, "{:>10}", "measure").unwrap();
    for q in &qs {
        write!(s, "{:>14}", format!("q = {q}")).unwrap();
    }
    writeln!(s).unwrap();
    let mut ps: Vec<f64> = rows.iter().map(|r| r.p).collect();
    ps.dedup();
    for p in ps {
        write!(s, "{:>10}", format!("|Psi|^{p}")).unwrap();
        for q in &qs {
            let kl = rows.iter().find(|r| r.p == p && r.q == *q).map_or(f64::NAN, |r| r.kl);
            write!(s, "{kl:>14.6}").unwrap();
        }
        writeln!(s).unwrap();
    }
    writeln!(s, "Each measure yields its own power of |psi| for the sub-systems;").unwrap();
    writeln!(s, "the Born rule appears under p = 2 only because p = 2 was assumed.").unwrap();
    if let Some(r) = nesting {
        writeln!(s, "nesting: marginal KL {:.6} (first), {:.6} (second)", r.first, r.second).unwrap();
    }
    s
}
