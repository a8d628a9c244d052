//! Subcommand implementations.

use nalgebra::DMatrix;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use stgp::error::{Result, StgpError};
use stgp::hyper::{
    default_param_specs, median_squared_distance, FitProblem, Method, OptimizeOptions, ParamSpec,
};
use stgp::kalman::{filter_pass, predictor_pass, smoother_pass};
use stgp::kernels::{InputSignal, ParamTransform, TemporalKernelSpec};
use stgp::pipeline::{
    compute_fit, fill_missing, load_panel, write_field_csv, write_fill_diagnostics, write_panel,
    CoordinateScale, DataPanel, FillOptions, LoadConfig,
};
use stgp::synth::sample_panel;

use crate::{CoordsArg, KernelArgs, MethodArg, PanelArgs, SearchArgs, TemporalFamilyArg};

fn template_from_args(kernel: &KernelArgs) -> Result<TemporalKernelSpec> {
    let input = InputSignal::new(
        stgp::sysid::INPUT_DAMPING,
        stgp::sysid::INPUT_ANGULAR_FREQ,
    )?;
    match kernel.temporal_kernel {
        TemporalFamilyArg::Exp => TemporalKernelSpec::exponential(1.0, 10.0),
        TemporalFamilyArg::Matern32 => TemporalKernelSpec::matern32(1.0, 10.0),
        TemporalFamilyArg::Te2exp => {
            TemporalKernelSpec::te2_exp(1.0, 0.4, kernel.frequency, kernel.envelope)
        }
        TemporalFamilyArg::Te2expMatern => TemporalKernelSpec::te2_exp_matern(
            1.0,
            0.4,
            0.05,
            10.0,
            kernel.frequency,
            kernel.envelope,
        ),
        TemporalFamilyArg::Pd => {
            TemporalKernelSpec::periodic_decay(1.0, kernel.frequency, kernel.envelope)
        }
        TemporalFamilyArg::DcInput => TemporalKernelSpec::dc_input(1.0, 0.8, 0.5, input),
    }
}

fn load_config(panel: &PanelArgs) -> LoadConfig {
    LoadConfig {
        ts: panel.ts,
        n_train: panel.train,
        n_test: panel.test,
        coordinates: match panel.coords {
            CoordsArg::Raw => CoordinateScale::Raw,
            CoordsArg::Ecef10km => CoordinateScale::EcefMeters { unit_m: 1e4 },
        },
    }
}

/// Applies `name=lo:hi:count` overrides to the default parameter layout.
fn apply_grid_overrides(
    params: &mut [(stgp::hyper::ParamRole, ParamSpec)],
    overrides: &Option<String>,
) -> Result<()> {
    let Some(text) = overrides else {
        return Ok(());
    };
    for part in text.split(',').filter(|s| !s.trim().is_empty()) {
        let Some((name, rest)) = part.split_once('=') else {
            return Err(StgpError::Config(format!(
                "grid override `{part}` is not name=lo:hi:count"
            )));
        };
        let fields: Vec<&str> = rest.split(':').collect();
        if fields.len() != 3 {
            return Err(StgpError::Config(format!(
                "grid override `{part}` is not name=lo:hi:count"
            )));
        }
        let lo: f64 = fields[0]
            .parse()
            .map_err(|_| StgpError::Config(format!("bad lower bound in `{part}`")))?;
        let hi: f64 = fields[1]
            .parse()
            .map_err(|_| StgpError::Config(format!("bad upper bound in `{part}`")))?;
        let count: usize = fields[2]
            .parse()
            .map_err(|_| StgpError::Config(format!("bad grid count in `{part}`")))?;
        let name = name.trim();
        let Some((_, spec)) = params.iter_mut().find(|(_, s)| s.name == name) else {
            return Err(StgpError::Config(format!(
                "grid override names unknown parameter `{name}`"
            )));
        };
        *spec = match spec.transform {
            ParamTransform::Log => ParamSpec::log_spaced(name, lo, hi, count),
            ParamTransform::Identity => ParamSpec::lin_spaced(name, lo, hi, count),
        };
    }
    Ok(())
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| StgpError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    std::fs::File::create(path).map_err(|source| StgpError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_str(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|source| StgpError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_fit(
    panel_args: PanelArgs,
    kernel: KernelArgs,
    search: SearchArgs,
    method: MethodArg,
    sigma2: Option<f64>,
    sigma2_from: Option<PathBuf>,
    fill_first: bool,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let method = match method {
        MethodArg::Mlm => Method::Mlm,
        MethodArg::Gcv => Method::Gcv,
        MethodArg::Sure => Method::Sure,
    };
    let template = template_from_args(&kernel)?;
    let mut panel = load_panel(&panel_args.data, &panel_args.locations, &load_config(&panel_args))?;
    let mut fill_diags = Vec::new();
    if !panel.is_complete() {
        if !fill_first {
            return Err(StgpError::Input(
                "panel has missing data; pass --fill-first or run `stgp fill`".into(),
            ));
        }
        let (filled, diags) = fill_missing(&panel, &template, &FillOptions::default())?;
        panel = filled;
        fill_diags = diags;
    }

    let fixed_sigma2 = match (sigma2, &sigma2_from) {
        (Some(v), None) => Some(v),
        (None, Some(path)) => Some(read_sigma2_from_json(path)?),
        (Some(_), Some(_)) => {
            return Err(StgpError::Config(
                "pass either --sigma2 or --sigma2-from, not both".into(),
            ))
        }
        (None, None) => None,
    };
    if method != Method::Mlm && fixed_sigma2.is_none() {
        return Err(StgpError::Config(
            "GCV/SURE need a sigma2 source: --sigma2 <value> or --sigma2-from <hyperparams.json> \
             from a previous MLM run"
                .into(),
        ));
    }

    let y = panel.train_values();
    let data_var = {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    };
    let include_noise = fixed_sigma2.is_none();
    let mut params = default_param_specs(
        &template,
        data_var,
        Some(median_squared_distance(&panel.locations)),
        include_noise,
        search.grid_size,
    );
    apply_grid_overrides(&mut params, &search.grid)?;

    let problem = FitProblem {
        method,
        template: &template,
        locations: Some(&panel.locations),
        base_alpha: 1.0,
        fixed_sigma2,
        y: &y,
        ts: panel.ts,
        observed: None,
    };
    let opts = OptimizeOptions {
        n_starts: search.starts,
        record_trace: search.trace,
        ..OptimizeOptions::default()
    };
    let fit = problem.fit(&params, &opts)?;

    let model = problem.build_model(&fit.temporal, fit.alpha_se, fit.sigma2)?;
    let l = model.transform_outputs(&y)?;
    let filt = filter_pass(&model, &l, None)?;
    let smoothed = smoother_pass(&model, &filt)?;
    let pred = predictor_pass(&model, &smoothed, panel.n_test)?;

    // artifacts
    let hyper_json = serde_json::json!({
        "method": method.to_string(),
        "seed": seed,
        "cost": fit.report.value,
        "logdet": fit.report.logdet,
        "quad": fit.report.quad,
        "s": fit.report.s,
        "delta": fit.report.delta,
        "sigma2": fit.sigma2,
        "alpha_se": fit.alpha_se,
        "temporal": fit.temporal,
        "params": fit
            .param_names
            .iter()
            .zip(&fit.optimize.best_params)
            .map(|(n, v)| (n.clone(), *v))
            .collect::<std::collections::BTreeMap<_, _>>(),
        "n_terms": fit.report.n_terms,
        "floored": fit.report.floored,
        "grid_evaluations": fit.optimize.grid_costs.len(),
        "total_evaluations": fit.optimize.n_evals,
        "filled_locations": fill_diags.len(),
    });
    write_str(
        &out.join("hyperparams.json"),
        &serde_json::to_string_pretty(&hyper_json).expect("json"),
    )?;
    write_field_csv(
        &out.join("smoothed.csv"),
        &panel.location_ids,
        &smoothed.fhat,
        panel.ts,
        panel.ts,
    )?;
    if panel.n_test > 0 {
        write_field_csv(
            &out.join("predicted.csv"),
            &panel.location_ids,
            &pred.fhat,
            (panel.n_train + 1) as f64 * panel.ts,
            panel.ts,
        )?;
        let actual = panel.test_values();
        let report = compute_fit(&pred.fhat, &actual)?;
        let mut csv = String::from("time,fit\n");
        for (k, v) in report.per_time_fit.iter().enumerate() {
            csv.push_str(&format!(
                "{},{}\n",
                (panel.n_train + 1 + k) as f64 * panel.ts,
                v
            ));
        }
        csv.push_str(&format!("average,{}\n", report.avg_fit));
        write_str(&out.join("fit_report.csv"), &csv)?;
        println!(
            "fit: method={method} cost={:.6e} average fit={:.2}",
            fit.report.value, report.avg_fit
        );
    } else {
        println!("fit: method={method} cost={:.6e} (no test horizon)", fit.report.value);
    }
    if search.trace {
        let mut csv = String::from("start,iteration,cost,params\n");
        for t in &fit.optimize.trace {
            let params = t
                .params
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("|");
            csv.push_str(&format!("{},{},{},{}\n", t.start, t.iteration, t.cost, params));
        }
        write_str(&out.join("trace.csv"), &csv)?;
    }
    if !fill_diags.is_empty() {
        write_fill_diagnostics(&out.join("fill_diagnostics.jsonl"), &fill_diags)?;
    }
    Ok(())
}

fn read_sigma2_from_json(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|source| StgpError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| StgpError::Parse {
        file: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    value
        .get("sigma2")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| StgpError::Config(format!("{} has no sigma2 field", path.display())))
}

pub fn cmd_fill(
    panel_args: PanelArgs,
    kernel: KernelArgs,
    grid_size: usize,
    out: &Path,
) -> Result<()> {
    let template = template_from_args(&kernel)?;
    let panel = load_panel(&panel_args.data, &panel_args.locations, &load_config(&panel_args))?;
    let opts = FillOptions {
        grid_size,
        ..FillOptions::default()
    };
    let (filled, diags) = fill_missing(&panel, &template, &opts)?;
    write_panel(
        &filled,
        &out.join("filled_data.csv"),
        &out.join("filled_locations.csv"),
    )?;
    write_fill_diagnostics(&out.join("fill_diagnostics.jsonl"), &diags)?;
    let fallbacks = diags.iter().filter(|d| d.fallback).count();
    println!(
        "fill: {} locations had gaps, {} used the interpolation fallback",
        diags.len(),
        fallbacks
    );
    Ok(())
}

pub fn cmd_oracle_check(instances: usize, max_n: usize, max_m: usize, seed: u64) -> Result<()> {
    let report = stgp::oracle::equivalence_report(instances, max_n, max_m, seed)?;
    println!("oracle equivalence over {} instances:", report.instances);
    println!("  max rel err logdet          {:.3e}", report.max_rel_logdet);
    println!("  max rel err quad            {:.3e}", report.max_rel_quad);
    println!("  max rel err mlm cost        {:.3e}", report.max_rel_cost);
    println!("  max rel err delta           {:.3e}", report.max_rel_delta);
    println!("  max rel err S               {:.3e}", report.max_rel_s);
    println!("  max rel err smoothed mean   {:.3e}", report.max_rel_smoothed_mean);
    println!("  max rel err predicted mean  {:.3e}", report.max_rel_predicted_mean);
    println!("  max rel err marginal var    {:.3e}", report.max_rel_variance);
    if report.within_tolerances() {
        println!("PASS");
        Ok(())
    } else {
        Err(StgpError::ToleranceBreach(
            "structured/dense equivalence exceeded tolerance".into(),
        ))
    }
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| StgpError::Config(format!("bad {what} value `{s}`")))
        })
        .collect()
}

pub fn cmd_bench(n_list: &str, m_list: &str, naive: bool, reps: usize, out: &Path) -> Result<()> {
    let ns = parse_usize_list(n_list, "N")?;
    let ms = parse_usize_list(m_list, "M")?;
    let mut csv = String::from("n,m,r,filter_core_s,structured_total_s,naive_s\n");
    println!("{:>6} {:>6} {:>14} {:>16} {:>12}", "N", "M", "filter core", "structured", "naive");
    for &n in &ns {
        for &m in &ms {
            let row = stgp::naive::bench_case(n, m, naive, reps)?;
            let naive_str = row
                .naive_s
                .map(|t| format!("{t:.4}"))
                .unwrap_or_else(|| "-".into());
            println!(
                "{:>6} {:>6} {:>13.4}s {:>15.4}s {:>12}",
                n, m, row.filter_core_s, row.structured_total_s, naive_str
            );
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.n,
                row.m,
                row.r,
                row.filter_core_s,
                row.structured_total_s,
                row.naive_s.map(|t| t.to_string()).unwrap_or_default()
            ));
        }
    }
    write_str(&out.join("bench.csv"), &csv)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sysid_demo(
    m: usize,
    n: usize,
    nb: usize,
    snr: f64,
    seeds: u64,
    seed0: u64,
    grid_size: usize,
    starts: usize,
    out: &Path,
) -> Result<()> {
    let opts = OptimizeOptions {
        n_starts: starts,
        ..OptimizeOptions::default()
    };
    let mut csv = String::from("seed,approach,average_fit\n");
    let mut st_avg = Vec::new();
    let mut t_avg = Vec::new();
    for k in 0..seeds.max(1) {
        let seed = seed0 + k;
        let ensemble = stgp::sysid::generate_ensemble(seed, m, 0.05)?;
        let data = stgp::sysid::simulate_data(&ensemble, n, nb, snr, seed ^ 0x5a5a)?;
        if k == 0 {
            write_str(
                &out.join("ensemble.json"),
                &serde_json::to_string_pretty(&ensemble).expect("json"),
            )?;
            write_panel(
                &data.panel,
                &out.join("sysid_data.csv"),
                &out.join("sysid_locations.csv"),
            )?;
            let max_tail = data
                .truncation_tail
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            let sim = serde_json::json!({
                "sigma2": data.sigma2,
                "snr": snr,
                "fir_order": nb,
                "max_truncation_tail_energy": max_tail,
                "truncation_tail_energy": data.truncation_tail,
            });
            write_str(
                &out.join("simulation.json"),
                &serde_json::to_string_pretty(&sim).expect("json"),
            )?;
        }
        let joint = stgp::sysid::estimate_spatial_temporal(&data.panel, nb, grid_size, &opts)?;
        let baseline = stgp::sysid::estimate_temporal_baseline(&data.panel, nb, grid_size, &opts)?;
        let fit_joint = stgp::sysid::compute_fit_b(&joint.bhat, &data.true_firs)?;
        let fit_base = stgp::sysid::compute_fit_b(&baseline.bhat, &data.true_firs)?;
        println!(
            "seed {seed}: spatial-temporal fit {:.2}, temporal fit {:.2}",
            fit_joint.average, fit_base.average
        );
        csv.push_str(&format!("{seed},spatial-temporal,{}\n", fit_joint.average));
        csv.push_str(&format!("{seed},temporal,{}\n", fit_base.average));
        st_avg.push(fit_joint.average);
        t_avg.push(fit_base.average);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let st = mean(&st_avg);
    let t = mean(&t_avg);
    csv.push_str(&format!("mean,spatial-temporal,{st}\n"));
    csv.push_str(&format!("mean,temporal,{t}\n"));
    write_str(&out.join("sysid_fits.csv"), &csv)?;
    println!("mean over {} seed(s): spatial-temporal {st:.2} vs temporal {t:.2}", st_avg.len());
    Ok(())
}

pub fn cmd_gen_fixture(
    m: usize,
    train: usize,
    test: usize,
    missing: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let fixture = sample_panel(m, train, test, missing, seed)?;
    let panel = DataPanel {
        values: mask_values(&fixture.values, &fixture.missing),
        missing: fixture.missing.clone(),
        locations: fixture.locations.clone(),
        location_ids: fixture.location_ids.clone(),
        ts: fixture.ts,
        n_train: fixture.n_train,
        n_test: fixture.n_test,
    };
    write_panel(&panel, &out.join("data.csv"), &out.join("locations.csv"))?;
    println!(
        "fixture: {} locations x {} time instants ({} missing cells) -> {}",
        m,
        train + test,
        panel.missing.iter().filter(|&&x| x).count(),
        out.display()
    );
    Ok(())
}

fn mask_values(values: &DMatrix<f64>, missing: &DMatrix<bool>) -> DMatrix<f64> {
    let mut out = values.clone();
    for (v, &miss) in out.iter_mut().zip(missing.iter()) {
        if miss {
            *v = f64::NAN;
        }
    }
    out
}
