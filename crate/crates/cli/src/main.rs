mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{ConsistencyName, ExperimentConfig};
use singlab_core::samplers::run_batch;
use singlab_core::verify::{
    bound_sweep, brightness_experiment, consistency_checks, lipschitz_probe, prop3_check, summary_json,
    write_stat_csv, ConsistencyKind, StatReport, SweepKind,
};
use singlab_core::{fit_init_model, Error, InitModel};

#[derive(Parser)]
#[command(name = "singlab", version, about = "Closed-form diffusion sampling and bound checks on finite training sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON; see `singlab schema`).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `SINGLAB_SEED` and the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run reverse-sampling chains.
    #[command(after_help = "Outputs:
  trajectories.csv  chain,step,t,x0..x{d-1}   recorded states per chain (t = 1 row holds x_1)
  terminal.csv      chain,nearest,distance,x0..x{d-1}   terminal state, nearest training point index, distance
  counts.csv        index,count,fraction      terminal states per nearest training point
  summary.json      {check: {pass, statistic, threshold}}; check terminal_hits = fraction within sampler.tolerance")]
    Sample(Common),
    /// Fit the t = 1 clean-data predictor.
    #[command(after_help = "Outputs:
  init_model.json   {classes: {\"unconditional\"|class: [coords]}, steps_run, final_loss}
  loss.csv          step,minibatch_loss   unconditional predictor's minibatch loss
  summary.json      checks <class>_mean_error = max |fitted - class mean| against train.tolerance")]
    TrainInit(Common),
    /// L1 gap sweep for the sigma_{s|t}, alpha_s and terminal-marginal bounds.
    #[command(after_help = "Outputs:
  bounds.csv   s,t,probe,gap,sigma_s_given_t,alpha_s,ratio_sqrt_sigma,ratio_sqrt_alpha,ratio_sigma_two_thirds,quad_error,flagged
  probes.csv   probe,ratio_band,gap_fall,monotone,max_ratio
  summary.json checks per probe: ratio_band (< max_ratio_band), gap_fall (>= min_gap_fall), monotone; unflagged_rows;
               terminal_marginal: last_row_below_neighbour_bound; plus fitted_c")]
    VerifyBounds(Common),
    /// Implied t = 1 estimate under the naive and one-step starts.
    #[command(after_help = "Outputs:
  prop3.csv     check,sample_size,statistic,threshold,pass,note
  summary.json  {check: {pass, statistic, threshold}}")]
    VerifyProp3(Common),
    /// Bayes identity, marginal KS, reverse-from-one and terminal-Gaussian checks.
    #[command(after_help = "Outputs:
  consistency.csv  check,sample_size,statistic,threshold,pass,note
  summary.json     {check: {pass, statistic, threshold}}")]
    VerifyConsistency(Common),
    /// Score-derivative growth as t -> 0.
    #[command(after_help = "Outputs:
  lipschitz.csv  t,max_fd,max_analytic,argmax,growth,fd_rel_error
  summary.json   checks growth (last over first max_fd, > min_growth) and fd_agreement (< fd_tolerance)")]
    Lipschitz(Common),
    /// Brightness of the 1 - eps ensembles per start mode and class.
    #[command(after_help = "Outputs:
  brightness.csv  init_mode,label,mean_brightness,expected_true,energy_vs_true,class_hit_rate
  summary.json    checks <mode>_<label>_brightness and energy_ratio_<label>")]
    Brightness(Common),
    /// Print the config JSON schema.
    Schema,
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

fn setup(c: &Common) -> anyhow::Result<Ctx> {
    let cfg = config::load(&c.config)?;
    let seed = match (c.seed, std::env::var("SINGLAB_SEED")) {
        (Some(s), _) => s,
        (None, Ok(v)) => v.trim().parse().with_context(|| format!("SINGLAB_SEED is not an integer: {v:?}"))?,
        (None, Err(_)) => cfg.seed,
    };
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Ctx { cfg, seed, out })
}

/// Writes via a temporary file in the same directory, then renames.
fn write_atomic(dir: &Path, name: &str, f: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    f(tmp.as_file_mut())?;
    tmp.as_file_mut().flush()?;
    tmp.persist(dir.join(name)).with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn write_summary(dir: &Path, reports: &[StatReport], extra: serde_json::Value) -> anyhow::Result<()> {
    let mut v = summary_json(reports);
    if let (Some(map), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        map.extend(more);
    }
    write_atomic(dir, "summary.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &v)?;
        writeln!(w)?;
        Ok(())
    })
}

fn print_checks(reports: &[StatReport]) {
    for r in reports {
        println!(
            "{} {} statistic={:e} threshold={:e} n={}",
            if r.pass { "PASS" } else { "FAIL" },
            r.check,
            r.statistic,
            r.threshold,
            r.sample_size
        );
    }
}

fn stat(check: impl Into<String>, n: usize, statistic: f64, threshold: f64, pass: bool) -> StatReport {
    StatReport { check: check.into(), sample_size: n, statistic, threshold, pass, note: None }
}

fn csv_writer(w: &mut dyn Write) -> csv::Writer<&mut dyn Write> {
    csv::Writer::from_writer(w)
}

fn coords(x: &[f64]) -> impl Iterator<Item = String> + '_ {
    x.iter().map(f64::to_string)
}

fn sample(ctx: &Ctx) -> anyhow::Result<Vec<StatReport>> {
    let cfg = &ctx.cfg;
    let m = cfg.model()?;
    let sc = cfg.sampler_config(ctx.seed)?;
    let init = match &cfg.sampler.init_model {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Some(InitModel::<f64>::from_json(&v)?)
        }
        None => None,
    };
    let trajs = run_batch(&m, &sc, cfg.sampler.label, init.as_ref())?;
    let d = m.dim();
    let header = |lead: &[&str]| -> Vec<String> {
        lead.iter().map(|s| s.to_string()).chain((0..d).map(|k| format!("x{k}"))).collect()
    };
    write_atomic(&ctx.out, "trajectories.csv", |w| {
        let mut wr = csv_writer(w);
        wr.write_record(header(&["chain", "step", "t"]))?;
        for tr in &trajs {
            for (k, (t, x)) in tr.times.iter().zip(&tr.states).enumerate() {
                wr.write_record([tr.chain.to_string(), k.to_string(), t.to_string()].into_iter().chain(coords(x)))?;
            }
        }
        wr.flush()?;
        Ok(())
    })?;
    let mut counts = vec![0usize; m.set().len()];
    let mut hits = 0usize;
    let mut rows = Vec::new();
    for tr in &trajs {
        let x = tr.terminal();
        let j = m.nearest_index(x, 0.0, None)?;
        let dist = x.iter().zip(m.set().point(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        counts[j] += 1;
        if dist <= cfg.sampler.tolerance {
            hits += 1;
        }
        rows.push((tr.chain, j, dist, x.to_vec()));
    }
    write_atomic(&ctx.out, "terminal.csv", |w| {
        let mut wr = csv_writer(w);
        wr.write_record(header(&["chain", "nearest", "distance"]))?;
        for (c, j, dist, x) in &rows {
            wr.write_record([c.to_string(), j.to_string(), dist.to_string()].into_iter().chain(coords(x)))?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let n = trajs.len();
    write_atomic(&ctx.out, "counts.csv", |w| {
        let mut wr = csv_writer(w);
        wr.write_record(["index", "count", "fraction"])?;
        for (i, c) in counts.iter().enumerate() {
            wr.write_record([i.to_string(), c.to_string(), (*c as f64 / n as f64).to_string()])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let frac = hits as f64 / n as f64;
    Ok(vec![stat("terminal_hits", n, frac, 1.0, frac >= 1.0)])
}

fn train_init(ctx: &Ctx) -> anyhow::Result<Vec<StatReport>> {
    let set = ctx.cfg.training_set.build()?;
    let tc = ctx.cfg.train_config(ctx.seed);
    let model = match fit_init_model(&set, &tc) {
        Ok(m) => m,
        Err(e @ Error::DivergenceDetected { .. }) => {
            return Ok(vec![StatReport {
                note: Some(e.to_string()),
                ..stat("divergence", tc.steps, f64::NAN, 0.0, false)
            }])
        }
        Err(e) => return Err(e.into()),
    };
    write_atomic(&ctx.out, "init_model.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &model.to_json())?;
        writeln!(w)?;
        Ok(())
    })?;
    write_atomic(&ctx.out, "loss.csv", |w| {
        let mut wr = csv_writer(w);
        wr.write_record(["step", "minibatch_loss"])?;
        for (k, l) in model.loss_history.iter().enumerate() {
            wr.write_record([k.to_string(), l.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let tol = ctx.cfg.train.tolerance;
    let labels: Vec<Option<u32>> = std::iter::once(None).chain(set.class_ids().map(Some)).collect();
    let mut out = Vec::new();
    for c in labels {
        let fit = model.predict(c)?;
        let exact = set.mean(c)?;
        let err = fit.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let name = c.map_or_else(|| "unconditional".to_string(), |c| format!("class_{c}"));
        out.push(stat(format!("{name}_mean_error"), set.select(c)?.len(), err, tol, err < tol));
    }
    Ok(out)
}

fn verify_bounds(ctx: &Ctx) -> anyhow::Result<(Vec<StatReport>, serde_json::Value)> {
    let m = ctx.cfg.model()?;
    let (kind, grid) = ctx.cfg.sweep(m.dim());
    let b = &ctx.cfg.verify.bounds;
    let start = std::time::Instant::now();
    let rep = bound_sweep(&m, kind, &grid, &ctx.cfg.quad_config(ctx.seed))?;
    println!("sweep of {} rows took {:.2} s; fitted C = {}", rep.rows.len(), start.elapsed().as_secs_f64(), rep.fitted_c);
    write_atomic(&ctx.out, "bounds.csv", |w| Ok(rep.write_csv(w)?))?;
    let probe_name = |p: &Option<Vec<f64>>| {
        p.as_ref().map_or("marginal".to_string(), |p| p.iter().map(f64::to_string).collect::<Vec<_>>().join(" "))
    };
    write_atomic(&ctx.out, "probes.csv", |w| {
        let mut wr = csv_writer(w);
        wr.write_record(["probe", "ratio_band", "gap_fall", "monotone", "max_ratio"])?;
        for p in &rep.probes {
            wr.write_record([
                probe_name(&p.probe),
                p.ratio_band.to_string(),
                p.gap_fall.to_string(),
                p.monotone.to_string(),
                p.max_ratio.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let mut out = Vec::new();
    let flagged = rep.rows.iter().filter(|r| r.flagged).count();
    out.push(stat("unflagged_rows", rep.rows.len(), flagged as f64, 0.0, flagged == 0));
    match kind {
        SweepKind::TerminalMarginal => {
            let rows = &rep.rows;
            if let Some((last, rest)) = rows.split_last() {
                let c = rest.iter().filter(|r| !r.flagged).map(|r| r.ratio_sqrt_alpha).fold(0.0, f64::max);
                let bound = c * last.alpha_s.sqrt();
                out.push(stat("last_row_below_neighbour_bound", rows.len(), last.gap, bound, last.gap < bound));
            }
            let p = &rep.probes[0];
            out.push(stat("marginal_monotone", rows.len(), p.gap_fall, 1.0, p.monotone));
        }
        _ => {
            for p in &rep.probes {
                let name = probe_name(&p.probe);
                let n = rep.rows.iter().filter(|r| r.probe == p.probe).count();
                out.push(stat(format!("probe_{name}_ratio_band"), n, p.ratio_band, b.max_ratio_band, p.ratio_band < b.max_ratio_band));
                out.push(stat(format!("probe_{name}_gap_fall"), n, p.gap_fall, b.min_gap_fall, p.gap_fall >= b.min_gap_fall));
                out.push(stat(format!("probe_{name}_monotone"), n, p.gap_fall, 1.0, p.monotone));
            }
        }
    }
    Ok((out, json!({ "fitted_c": rep.fitted_c })))
}

fn stat_command(ctx: &Ctx, file: &str, reports: Vec<StatReport>) -> anyhow::Result<Vec<StatReport>> {
    write_atomic(&ctx.out, file, |w| Ok(write_stat_csv(&reports, w)?))?;
    Ok(reports)
}

fn verify_prop3(ctx: &Ctx) -> anyhow::Result<Vec<StatReport>> {
    let m = ctx.cfg.model()?;
    let p = &ctx.cfg.verify.prop3;
    let reports = prop3_check(&m, p.epsilon, p.samples, ctx.seed, p.label)?;
    stat_command(ctx, "prop3.csv", reports)
}

fn verify_consistency(ctx: &Ctx) -> anyhow::Result<Vec<StatReport>> {
    let m = ctx.cfg.model()?;
    let mut reports = Vec::new();
    for &c in &ctx.cfg.verify.consistency.checks {
        let (kind, terminal) = match c {
            ConsistencyName::Bayes => (ConsistencyKind::Bayes, false),
            ConsistencyName::Marginal => (ConsistencyKind::Marginal, false),
            ConsistencyName::ReverseFromOne => (ConsistencyKind::ReverseFromOne, false),
            ConsistencyName::TerminalGaussian => (ConsistencyKind::TerminalGaussian, true),
        };
        reports.extend(consistency_checks(&m, kind, &ctx.cfg.consistency_spec(ctx.seed, terminal))?);
    }
    stat_command(ctx, "consistency.csv", reports)
}

fn lipschitz(ctx: &Ctx) -> anyhow::Result<Vec<StatReport>> {
    let m = ctx.cfg.model()?;
    let l = &ctx.cfg.verify.lipschitz;
    let d = m.dim();
    let grid = l.grid.clone().unwrap_or_else(|| (0..=80).map(|i| vec![-2.0 + 0.05 * i as f64; d]).collect());
    let rep = lipschitz_probe(&m, &l.t_list, &grid, l.h_rel)?;
    write_atomic(&ctx.out, "lipschitz.csv", |w| {
        let mut wr = csv_writer(w);
        wr.write_record(["t", "max_fd", "max_analytic", "argmax", "growth", "fd_rel_error"])?;
        for r in &rep.rows {
            wr.write_record([
                r.t.to_string(),
                r.max_fd.to_string(),
                r.max_analytic.to_string(),
                r.argmax.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
                r.growth.to_string(),
                r.fd_rel_error.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let mut out = Vec::new();
    if let (Some(first), Some(last)) = (rep.rows.first(), rep.rows.last()) {
        let g = last.max_fd / first.max_fd;
        out.push(stat("growth", grid.len(), g, l.min_growth, g > l.min_growth));
    }
    let fd = rep.rows.iter().map(|r| r.fd_rel_error).fold(0.0, f64::max);
    out.push(stat("fd_agreement", grid.len(), fd, l.fd_tolerance, fd < l.fd_tolerance));
    Ok(out)
}

fn brightness(ctx: &Ctx) -> anyhow::Result<Vec<StatReport>> {
    let m = ctx.cfg.model()?;
    let b = &ctx.cfg.verify.brightness;
    let rows = brightness_experiment(&m, &ctx.cfg.brightness_config(ctx.seed))?;
    write_atomic(&ctx.out, "brightness.csv", |w| {
        let mut wr = csv_writer(w);
        wr.write_record(["init_mode", "label", "mean_brightness", "expected_true", "energy_vs_true", "class_hit_rate"])?;
        for r in &rows {
            wr.write_record([
                r.init_mode.clone(),
                r.label.to_string(),
                r.mean_brightness.to_string(),
                r.expected_true.to_string(),
                r.energy_vs_true.to_string(),
                r.class_hit_rate.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let mut out = Vec::new();
    for r in &rows {
        let name = format!("{}_{}_brightness", r.init_mode, r.label);
        if r.init_mode == "naive_gaussian" {
            let v = r.mean_brightness.abs();
            out.push(stat(name, b.samples, v, b.naive_tolerance, v < b.naive_tolerance));
        } else {
            let rel = (r.mean_brightness - r.expected_true).abs() / r.expected_true.abs();
            out.push(stat(name, b.samples, rel, b.relative_tolerance, rel < b.relative_tolerance));
        }
    }
    let labels: std::collections::BTreeSet<u32> = rows.iter().map(|r| r.label).collect();
    for l in labels {
        let ed = |mode: &str| rows.iter().find(|r| r.label == l && r.init_mode == mode).map(|r| r.energy_vs_true);
        if let (Some(naive), Some(sing)) = (ed("naive_gaussian"), ed("sing_step")) {
            // a non-positive one-step distance is indistinguishable from 0
            let pass = naive > b.min_energy_ratio * sing;
            out.push(StatReport {
                note: Some(format!("naive {naive}, sing_step {sing}")),
                ..stat(format!("energy_ratio_{l}"), b.energy_samples, naive / sing, b.min_energy_ratio, pass)
            });
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (common, cmd) = match &cli.command {
        Command::Schema => {
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout(), "{}", config::schema_json());
            return Ok(true);
        }
        Command::Sample(c)
        | Command::TrainInit(c)
        | Command::VerifyBounds(c)
        | Command::VerifyProp3(c)
        | Command::VerifyConsistency(c)
        | Command::Lipschitz(c)
        | Command::Brightness(c) => (c, &cli.command),
    };
    let ctx = setup(common)?;
    let (reports, extra) = match cmd {
        Command::Sample(_) => (sample(&ctx)?, json!({})),
        Command::TrainInit(_) => (train_init(&ctx)?, json!({})),
        Command::VerifyBounds(_) => verify_bounds(&ctx)?,
        Command::VerifyProp3(_) => (verify_prop3(&ctx)?, json!({})),
        Command::VerifyConsistency(_) => (verify_consistency(&ctx)?, json!({})),
        Command::Lipschitz(_) => (lipschitz(&ctx)?, json!({})),
        Command::Brightness(_) => (brightness(&ctx)?, json!({})),
        Command::Schema => unreachable!(),
    };
    write_summary(&ctx.out, &reports, extra)?;
    print_checks(&reports);
    Ok(reports.iter().all(|r| r.pass))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
