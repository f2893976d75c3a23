use std::fmt::Write as _;

use fdnopt::attenuation::design_curves;
use fdnopt::dsp::{add_noise_at_snr, band_edcs, EdcScale, OctaveFilterBank};
use fdnopt::fdn::{make_frequency_grid, render_ir, FdnParams};
use fdnopt::grad::{gradcheck_suite, GradcheckOptions};
use fdnopt::harness::{run_study, StudyConfig, TrialConfig};
use fdnopt::io::{ensure_dir, write_json, write_text, write_wav};
use fdnopt::landscape::{compute_profile, perturbation_table};
use fdnopt::linalg::random_orthogonal;
use fdnopt::seeds::derive_seed;

use crate::config::{RunConfig, Sweep};
use crate::CliError;

/// Bins of the filter-design curves.
const DESIGN_BINS: usize = 2049;

fn prepare(cfg: &RunConfig) -> Result<(), CliError> {
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("resolved.toml"), &cfg.to_toml()?)?;
    Ok(())
}

pub fn render(cfg: &RunConfig) -> Result<(), CliError> {
    prepare(cfg)?;
    let r = &cfg.render;
    let fs = cfg.preset.sample_rate();
    let n = r.delays.len();
    let alternating = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let fdn = FdnParams::new(
        r.delays.clone(),
        random_orthogonal(n, derive_seed(cfg.seed, 4))?,
        alternating,
        vec![1.0; n],
        fs,
    )?;
    r.attenuation.validate(fs)?;
    let mut ir = render_ir(&fdn, &r.attenuation, &make_frequency_grid(r.num_bins)?)?;
    if let Some(snr) = r.snr_db {
        ir = add_noise_at_snr(&ir, snr, derive_seed(cfg.seed, 7))?;
    }
    write_wav(&cfg.out.join("ir.wav"), &ir)?;

    let curves = design_curves(&r.attenuation, &r.delays, fs, &make_frequency_grid(DESIGN_BINS)?)?;
    let mut csv = String::from("frequency_hz");
    for m in &r.delays {
        write!(csv, ",magnitude_db_m{m}").unwrap();
    }
    for m in &r.delays {
        write!(csv, ",t60_m{m}").unwrap();
    }
    csv.push('\n');
    for (k, f) in curves.frequencies_hz.iter().enumerate() {
        write!(csv, "{f}").unwrap();
        for line in curves.magnitude_db.iter().chain(&curves.t60) {
            write!(csv, ",{}", line[k]).unwrap();
        }
        csv.push('\n');
    }
    write_text(&cfg.out.join("design.csv"), &csv)?;

    // One EDC row per millisecond.
    let bank = OctaveFilterBank::octaves(fs)?;
    let edc = band_edcs(&ir.samples, &bank, EdcScale::Db);
    let stride = (fs / 1000.0).round() as usize;
    let mut csv = String::from("time_s");
    for c in &edc.bands_hz {
        write!(csv, ",edc_db_{c}").unwrap();
    }
    csv.push('\n');
    for t in (0..ir.len()).step_by(stride) {
        write!(csv, "{}", t as f64 / fs).unwrap();
        for band in &edc.values {
            write!(csv, ",{}", band[t]).unwrap();
        }
        csv.push('\n');
    }
    write_text(&cfg.out.join("edc.csv"), &csv)?;

    #[derive(serde::Serialize)]
    struct Summary {
        samples: usize,
        sample_rate: f64,
        energy: f64,
        max_t60_spread: f64,
    }
    write_json(
        &cfg.out.join("render.json"),
        &Summary {
            samples: ir.len(),
            sample_rate: fs,
            energy: ir.energy(),
            max_t60_spread: curves.max_relative_spread(),
        },
    )?;
    Ok(())
}

pub fn landscape(cfg: &RunConfig) -> Result<(), CliError> {
    prepare(cfg)?;
    let l = &cfg.landscape;
    let scene = cfg.preset.landscape_scene(cfg.seed)?;
    let mut specs = Vec::new();
    if matches!(l.sweep, Sweep::T60 | Sweep::Both) {
        specs.push(("t60", cfg.preset.t60_sweep(l.steps, l.noise, l.t_mix, cfg.seed)));
    }
    if matches!(l.sweep, Sweep::Crossover | Sweep::Both) {
        specs.push((
            "crossover",
            cfg.preset.crossover_sweep_spec(l.steps, l.noise, l.t_mix, cfg.seed),
        ));
    }
    let mut summaries = std::collections::BTreeMap::new();
    for (name, spec) in specs {
        let profile = compute_profile(&scene, &spec, &l.losses)?;
        write_text(&cfg.out.join(format!("profile_{name}.csv")), &profile.to_csv())?;
        summaries.insert(name, profile.summary());
    }
    write_json(&cfg.out.join("argmin.json"), &summaries)?;
    Ok(())
}

pub fn perturb(cfg: &RunConfig) -> Result<(), CliError> {
    prepare(cfg)?;
    let p = &cfg.perturb;
    let scene = cfg.preset.landscape_scene(cfg.seed)?;
    let table = perturbation_table(
        &scene,
        &cfg.preset.t60_sweep(p.steps, p.noise, 0.0, cfg.seed),
        &cfg.preset.crossover_sweep_spec(p.steps, p.noise, 0.0, cfg.seed),
        &p.parameters,
        p.instances,
        derive_seed(cfg.seed, 8),
        &p.losses,
    )?;
    write_text(&cfg.out.join("table1.csv"), &table.to_csv())?;
    write_json(&cfg.out.join("table1.json"), &table)?;
    Ok(())
}

pub fn study_config(cfg: &RunConfig) -> StudyConfig {
    let s = &cfg.study;
    let mut study = cfg.preset.study(cfg.seed);
    study.base = TrialConfig {
        num_bins: s.num_bins,
        snr_db: s.snr_db,
        sparsity_weight: s.sparsity_weight,
        redraw_noise: s.redraw_noise,
        optimizer: s.optimizer,
        ..study.base
    };
    study.trials = s.trials;
    study.tests = s.tests.clone();
    study.losses = s.losses.clone();
    study
}

pub fn study(cfg: &RunConfig) -> Result<(), CliError> {
    prepare(cfg)?;
    let report = run_study(&study_config(cfg))?;
    write_text(&cfg.out.join("table2.csv"), &report.table_csv())?;
    write_text(&cfg.out.join("cells.csv"), &report.to_csv())?;
    write_text(&cfg.out.join("trajectories.csv"), &report.trajectories_csv())?;
    write_json(&cfg.out.join("study.json"), &report)?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    prepare(cfg)?;
    let g = &cfg.gradcheck;
    let opts = GradcheckOptions {
        rel_step: g.rel_step,
        tolerance: g.tolerance,
    };
    let reports = gradcheck_suite(&opts, cfg.seed, g.num_bins)?;
    write_json(&cfg.out.join("gradcheck.json"), &reports)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<24} max rel error {:.2e}  {}",
            r.label,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
        if !r.passed {
            failed.push(r.label.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
