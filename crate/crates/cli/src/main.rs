use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use stochwave::config::{Pipeline, RunConfig};
use stochwave::ensemble::{
    configure_threads, observed_limiting_shape, observed_limiting_speed, phase_diffusion_fit, run_ensemble,
    running_sup_stat, scaling_report, EnsembleStats,
};
use stochwave::expansion::{cubic_estimate, orbital_drift, PathOptions};
use stochwave::io::{read_table, write_manifest, write_table, Table};
use stochwave::noise::NoiseSampler;
use stochwave::simulator::{simulate, Simulator};
use stochwave::stats::Summary;
use stochwave::stochastic::expand_second_order;
use stochwave::Error;

#[derive(Parser)]
#[command(name = "stochwave", version, about = "Travelling waves under multiplicative noise")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `ensemble.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `ensemble.sigmas` and `simulation.sigma` (first value).
    #[arg(long)]
    sigma: Vec<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, env = "STOCHWAVE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Deterministic wave, adjoint eigenfunction and spectrum.
    Wave(Common),
    /// Instantaneous stochastic waves for each sigma.
    Stochwave(Common),
    /// Second-order corrections and the orbital drift.
    Expand(Common),
    /// One simulated path.
    Simulate(Common),
    /// Monte-Carlo ensembles for each sigma.
    Ensemble(Common),
    /// Summary of an output directory.
    Report {
        /// Directory written by the other subcommands.
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Input(Error),
    Solver(Error),
    Output(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Hypothesis(_)
            | Error::InvalidParameter(_)
            | Error::Config(_)
            | Error::NotPositiveSemidefinite { .. }
            | Error::SneOutOfRange(_)
            | Error::UnsupportedCorrection => Failure::Input(e),
            Error::Io(_) | Error::Csv(_) => Failure::Output(e.to_string()),
            _ => Failure::Solver(e),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Wave(c) => with_pipeline(&c, cmd_wave),
        Cmd::Stochwave(c) => with_pipeline(&c, cmd_stochwave),
        Cmd::Expand(c) => with_pipeline(&c, cmd_expand),
        Cmd::Simulate(c) => with_pipeline(&c, cmd_simulate),
        Cmd::Ensemble(c) => with_pipeline(&c, cmd_ensemble),
        Cmd::Report { dir, out } => cmd_report(&dir, out.as_deref().unwrap_or(&dir)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Output(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
    }
}

fn load_config(c: &Common) -> Res<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::Input(Error::Config(format!("{}: {io}", p.display()))),
            e => e.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.ensemble.seed = s;
    }
    if !c.sigma.is_empty() {
        cfg.ensemble.sigmas = c.sigma.clone();
        cfg.simulation.sigma = c.sigma[0];
    }
    Ok(cfg)
}

fn with_pipeline(c: &Common, run: fn(&Pipeline, &Path, &str) -> Res<()>) -> Res<()> {
    if let Some(n) = c.threads.filter(|n| *n > 0) {
        configure_threads(n)?;
    }
    let cfg = load_config(c)?;
    let hash = cfg.hash();
    let pipeline = Pipeline::new(cfg)?;
    fs::create_dir_all(&c.out).map_err(|e| Failure::Output(format!("{}: {e}", c.out.display())))?;
    write_config_copy(&c.out, &pipeline.config)?;
    run(&pipeline, &c.out, &hash)
}

fn write_config_copy(out: &Path, cfg: &RunConfig) -> Res<()> {
    let text = format!("# config_sha256 = {}\n{}", cfg.hash(), cfg.to_toml());
    fs::write(out.join("config.toml"), text).map_err(|e| Failure::Output(e.to_string()))
}

#[derive(Serialize)]
struct WaveManifest {
    c0: f64,
    lambda0: Option<f64>,
    beta: Option<f64>,
    eigenvalues_re: Vec<f64>,
    eigenvalues_im: Vec<f64>,
    pairing: f64,
}

fn cmd_wave(p: &Pipeline, out: &Path, hash: &str) -> Res<()> {
    let w = &p.wave;
    let t = Table::from_profiles(&[("phi", &w.phi), ("dphi", &w.dphi), ("psi", &w.psi)])?;
    write_table(&out.join("wave.csv"), hash, &t)?;
    let spec = w.spectrum.as_ref();
    let m = WaveManifest {
        c0: w.c,
        lambda0: spec.map(|s| s.lambda0),
        beta: w.beta(),
        eigenvalues_re: spec
            .map(|s| s.eigenvalues.iter().map(|e| e.0).collect())
            .unwrap_or_default(),
        eigenvalues_im: spec
            .map(|s| s.eigenvalues.iter().map(|e| e.1).collect())
            .unwrap_or_default(),
        pairing: w.dphi.dot(&w.psi),
    };
    write_manifest(&out.join("wave.toml"), hash, &m)?;
    println!("c0 = {}", w.c);
    if let Some(b) = w.beta() {
        println!("beta = {b}");
    }
    Ok(())
}

fn cmd_stochwave(p: &Pipeline, out: &Path, hash: &str) -> Res<()> {
    let mut sig = Vec::new();
    let mut cs = Vec::new();
    let mut steps = Vec::new();
    let mut res = Vec::new();
    let mut profiles = Table::new().column("x", p.wave.phi.grid().xs());
    for &s in &p.config.ensemble.sigmas {
        let sw = p.stochastic_wave(s)?;
        println!("sigma = {s}: c_sigma = {}", sw.c);
        sig.push(s);
        cs.push(sw.c);
        steps.push(sw.newton_steps as f64);
        res.push(sw.residual);
        for c in 0..sw.phi.ncomp() {
            profiles = profiles.column(&format!("phi_{s}_{c}"), sw.phi.component(c).to_vec());
        }
    }
    let t = Table::new()
        .column("sigma", sig)
        .column("c_sigma", cs)
        .column("newton_steps", steps)
        .column("residual", res);
    write_table(&out.join("stochwave.csv"), hash, &t)?;
    write_table(&out.join("stochwave_profiles.csv"), hash, &profiles)?;
    Ok(())
}

#[derive(Serialize)]
struct ExpandManifest {
    c0: f64,
    c02: f64,
    c_od: f64,
    c_od_horizon: f64,
    c_od_tail_bound: f64,
    fredholm_compatibility: f64,
    v1_norm_limit: f64,
    phase_variance_rate: f64,
    cubic: Option<CubicRow>,
}

#[derive(Serialize)]
struct CubicRow {
    sigma: f64,
    value: f64,
    stderr: f64,
    realisations: usize,
    underpowered: bool,
}

fn cmd_expand(p: &Pipeline, out: &Path, hash: &str) -> Res<()> {
    let so = expand_second_order(&p.model, &p.kernel, &p.wave)?;
    let ctx = p.expansion()?;
    let od = orbital_drift(&ctx)?;
    let c0 = p.wave.c;
    let mut sig = Vec::new();
    let (mut newton, mut quad, mut quad_od) = (Vec::new(), Vec::new(), Vec::new());
    for &s in &p.config.ensemble.sigmas {
        let sw = p.stochastic_wave(s)?;
        sig.push(s);
        newton.push(sw.c);
        quad.push(c0 + s * s * so.c02);
        quad_od.push(c0 + s * s * (so.c02 + od.c_od.value));
    }
    let cubic = match (p.config.solver.cubic_paths, p.config.ensemble.sigmas.first()) {
        (n, Some(&s)) if n > 0 && s > 0.0 => {
            let (cx, _) = p.expansion_at(s)?;
            let opts = PathOptions {
                dt: p.config.simulation.dt,
                t_end: p.config.simulation.t_end,
                record_every: p.config.simulation.record_every,
                k_up: p.config.simulation.k_up,
                ..Default::default()
            };
            let e = cubic_estimate(&cx, s, n, p.config.ensemble.seed, &opts)?;
            Some(CubicRow {
                sigma: s,
                value: e.value,
                stderr: e.stderr,
                realisations: e.realisations,
                underpowered: e.underpowered,
            })
        }
        _ => None,
    };
    let t = Table::new()
        .column("sigma", sig)
        .column("c_sigma_newton", newton)
        .column("c_quadratic", quad)
        .column("c_quadratic_with_drift", quad_od);
    write_table(&out.join("expand_speed.csv"), hash, &t)?;
    let prof = Table::from_profiles(&[("phi0", &p.wave.phi), ("phi02", &so.phi02), ("v_od", &od.shape)])?;
    write_table(&out.join("expand_profiles.csv"), hash, &prof)?;
    let m = ExpandManifest {
        c0,
        c02: so.c02,
        c_od: od.c_od.value,
        c_od_horizon: od.c_od.horizon,
        c_od_tail_bound: od.c_od.tail_bound,
        fredholm_compatibility: so.compatibility,
        v1_norm_limit: od.v1_norm_limit,
        phase_variance_rate: ctx.phase_variance_rate()?,
        cubic,
    };
    write_manifest(&out.join("expand.toml"), hash, &m)?;
    println!("c0 = {c0}\nc02 = {}\nc_od = {}", so.c02, od.c_od.value);
    Ok(())
}

fn cmd_simulate(p: &Pipeline, out: &Path, hash: &str) -> Res<()> {
    let s = p.config.simulation.sigma;
    let (ctx, _) = p.expansion_at(s)?;
    let sim = Simulator::new(
        ctx.phase_context(p.config.simulation.k_up),
        p.config.simulation.frame,
        p.config.simulation.dt,
    )?;
    let cfg = p.config.sim_config();
    let active: Vec<bool> = (0..p.model.n()).map(|a| p.model.kinetics.noisy(a)).collect();
    let mut sampler = NoiseSampler::new(p.kernel.clone(), p.config.ensemble.seed, 0, active);
    let init = sim.initial_state(None, cfg.initial_gamma)?;
    let (path, end) = simulate(&sim, &cfg, init, |dw| sampler.fill_increment(cfg.dt, dw))?;
    let t = Table::new()
        .column("t", path.times.clone())
        .column("gamma", path.gamma.clone())
        .column("v_l2sq", path.v_l2sq.clone())
        .column("a", path.a.clone())
        .column("b_hs_sq", path.b_hs_sq.clone());
    write_table(&out.join("simulate.csv"), hash, &t)?;
    let v = sim.v_of(&end)?;
    write_table(
        &out.join("simulate_final.csv"),
        hash,
        &Table::from_profiles(&[("v", &v)])?,
    )?;
    println!("gamma(T) = {} (c_sigma T = {})", end.gamma, ctx.base_c * end.t);
    if let Some(t) = path.tracking_failed_at {
        eprintln!("warning: tracking cutoff active from t = {t}");
    }
    Ok(())
}

fn summary_columns(mut t: Table, name: &str, s: &Summary) -> Table {
    t = t.column(&format!("{name}_mean"), s.mean.clone());
    t = t.column(&format!("{name}_var"), s.var.clone());
    t.column(&format!("{name}_stderr"), s.stderr.clone())
}

#[derive(Serialize)]
struct EnsembleRow {
    sigma: f64,
    c_sigma: f64,
    c_obs: f64,
    c_obs_stderr: f64,
    realizations: usize,
    effective: usize,
    failures: usize,
    tracking_failures: usize,
    invalid: bool,
    phase_diffusion_slope: Option<f64>,
    phase_diffusion_slope_stderr: Option<f64>,
    phase_variance_rate: f64,
    sup_log_r2: Option<f64>,
    sup_linear_r2: Option<f64>,
}

#[derive(Serialize)]
struct EnsembleManifest {
    runs: Vec<EnsembleRow>,
    scaling_v_l2sq: Option<f64>,
    scaling_vres_l2sq: Option<f64>,
    scaling_sup: Option<f64>,
}

fn cmd_ensemble(p: &Pipeline, out: &Path, hash: &str) -> Res<()> {
    let spec = p.config.ensemble_spec();
    let mut runs: Vec<EnsembleStats> = Vec::new();
    let mut rows = Vec::new();
    for (i, &s) in p.config.ensemble.sigmas.iter().enumerate() {
        let (ctx, _) = p.expansion_at(s)?;
        let st = run_ensemble(&ctx, &spec)?;
        let mut t = Table::new().column("t", st.times.clone());
        for (name, sm) in [
            ("gamma_dev", &st.gamma_dev),
            ("gamma_reduced", &st.gamma_reduced),
            ("v_l2sq", &st.v_l2sq),
            ("vres_l2sq", &st.vres_l2sq),
            ("sup_v_l2sq", &st.sup_v_l2sq),
            ("stability", &st.stability),
            ("stability_res", &st.stability_res),
            ("v1_l2sq", &st.v1_l2sq),
            ("v2_l2sq", &st.v2_l2sq),
        ] {
            t = summary_columns(t, name, sm);
        }
        write_table(&out.join(format!("ensemble_{i}.csv")), hash, &t)?;
        if let (Some(shape), Some((vm, se))) = (observed_limiting_shape(&st), &st.v_mean) {
            let prof = Table::from_profiles(&[
                ("phi_sigma", &st.phi_sigma),
                ("phi_obs", &shape),
                ("v_mean", vm),
                ("v_mean_stderr", se),
            ])?;
            write_table(&out.join(format!("ensemble_{i}_shape.csv")), hash, &prof)?;
        }
        let (c_obs, c_se) = observed_limiting_speed(&st);
        let fit = phase_diffusion_fit(&st, 0.25 * st.times.last().copied().unwrap_or(0.0));
        let t_end = st.times.last().copied().unwrap_or(0.0);
        let sup = running_sup_stat(&st, (0.05 * t_end).max(1.0), t_end);
        println!(
            "sigma = {s}: c_obs = {c_obs} +- {c_se} (R_eff = {}, failures = {}, tracking = {})",
            st.effective, st.failures, st.tracking_failures
        );
        if st.invalid {
            eprintln!("warning: ensemble at sigma = {s} is invalid (more than 10% excluded)");
        }
        rows.push(EnsembleRow {
            sigma: s,
            c_sigma: st.c_sigma,
            c_obs,
            c_obs_stderr: c_se,
            realizations: st.requested,
            effective: st.effective,
            failures: st.failures,
            tracking_failures: st.tracking_failures,
            invalid: st.invalid,
            phase_diffusion_slope: fit.map(|f| f.slope),
            phase_diffusion_slope_stderr: fit.map(|f| f.slope_stderr),
            phase_variance_rate: s * s * ctx.phase_variance_rate()?,
            sup_log_r2: sup.map(|f| f.log_fit.r2),
            sup_linear_r2: sup.map(|f| f.linear_fit.r2),
        });
        runs.push(st);
    }
    let refs: Vec<&EnsembleStats> = runs.iter().filter(|r| r.sigma > 0.0).collect();
    let t_end = p.config.simulation.t_end;
    let scaling = scaling_report(&refs, t_end).ok();
    let m = EnsembleManifest {
        runs: rows,
        scaling_v_l2sq: scaling.as_ref().and_then(|s| s.v_l2sq.map(|f| f.slope)),
        scaling_vres_l2sq: scaling.as_ref().and_then(|s| s.vres_l2sq.map(|f| f.slope)),
        scaling_sup: scaling.as_ref().and_then(|s| s.sup_v_l2sq.map(|f| f.slope)),
    };
    write_manifest(&out.join("ensemble.toml"), hash, &m)?;
    Ok(())
}

/// Reads the manifests and tables present in `dir` and writes `report.txt`
/// plus one CSV per figure that the data supports.
fn cmd_report(dir: &Path, out: &Path) -> Res<()> {
    let read = |name: &str| fs::read_to_string(dir.join(name)).ok();
    let manifests: Vec<(&str, String)> = ["wave.toml", "expand.toml", "ensemble.toml"]
        .into_iter()
        .filter_map(|n| read(n).map(|t| (n, t)))
        .collect();
    if manifests.is_empty() {
        return Err(Failure::Output(format!("{}: no run outputs found", dir.display())));
    }
    let mut report = String::new();
    let mut hash = String::new();
    for (name, text) in &manifests {
        let v: toml::Table = toml::from_str(text).map_err(|e| Failure::Output(format!("{name}: {e}")))?;
        if let Some(h) = v.get("config_sha256").and_then(|h| h.as_str()) {
            hash = h.to_string();
        }
        report.push_str(&format!("[{name}]\n"));
        for (k, val) in &v {
            if k != "config_sha256" && !val.is_array() {
                report.push_str(&format!("{k} = {val}\n"));
            }
        }
        if let Some(runs) = v.get("runs").and_then(|r| r.as_array()) {
            for r in runs {
                report.push_str(&format!("run = {r}\n"));
            }
        }
        report.push('\n');
    }
    fs::create_dir_all(out).map_err(|e| Failure::Output(e.to_string()))?;
    let mut i = 0;
    let mut phase = Table::new();
    let mut norms = Table::new();
    while let Ok((_, t)) = read_table(&dir.join(format!("ensemble_{i}.csv"))) {
        let col = |name: &str| t.headers.iter().position(|h| h == name).map(|j| t.columns[j].clone());
        if i == 0 {
            if let Some(tc) = col("t") {
                phase = phase.column("t", tc.clone());
                norms = norms.column("t", tc);
            }
        }
        for (is_phase, src, dst) in [
            (true, "gamma_dev_var", "var_gamma"),
            (true, "gamma_dev_mean", "mean_gamma_dev"),
            (false, "v_l2sq_mean", "v_l2sq"),
            (false, "vres_l2sq_mean", "vres_l2sq"),
            (false, "sup_v_l2sq_mean", "sup_v_l2sq"),
        ] {
            if let Some(c) = col(src) {
                let tab = if is_phase { &mut phase } else { &mut norms };
                *tab = std::mem::take(tab).column(&format!("{dst}_{i}"), c);
            }
        }
        i += 1;
    }
    if i > 0 {
        write_table(&out.join("fig_phase.csv"), &hash, &phase)?;
        write_table(&out.join("fig_norms.csv"), &hash, &norms)?;
    }
    fs::write(out.join("report.txt"), format!("config_sha256 = {hash}\n\n{report}"))
        .map_err(|e| Failure::Output(e.to_string()))?;
    print!("{report}");
    Ok(())
}
