use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use manipdiff::diffusion::{log_csv, train, GuidanceConfig, PolicyCheckpoint};
use manipdiff::gmm::{fit, gmr_condition, reproduction_report, EmFit, EmOptions};
use manipdiff::sim::{
    demos_to_dataset, demos_to_manifold_points, evaluate_suite, metrics_csv, read_demo, rollout,
    scripted_expert, write_demo, Demonstration, Policy, PostureProfile, RolloutReport, SuiteEntry,
};
use manipdiff::{Metric, Scenario, SpdGmmModel, SpdMatrix};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(CliError::io(path))
}

/// Creates the output directory and echoes the effective configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    write(&cfg.out, "config.json", &cfg.to_json())?;
    Ok(cfg.out.clone())
}

fn load_scenario(cfg: &RunConfig) -> Result<Scenario, CliError> {
    let path = cfg.input("scenario", &cfg.scenario)?;
    let mut scenario = Scenario::from_json(&read(&path)?)?;
    if let Some(a) = cfg.posture_attention {
        scenario.expert.posture_attention = a;
    }
    if let Some(l) = cfg.lambda {
        scenario.guidance.lambda = l;
    }
    scenario.validate()?;
    Ok(scenario)
}

fn load_model(cfg: &RunConfig) -> Result<SpdGmmModel, CliError> {
    let path = cfg.input("model", &cfg.model)?;
    Ok(SpdGmmModel::from_json(&read(&path)?)?)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<PolicyCheckpoint, CliError> {
    let path = cfg.input("checkpoint", &cfg.checkpoint)?;
    Ok(PolicyCheckpoint::from_json(&read(&path)?)?)
}

/// Every `*.jsonl` demonstration in the directory, in file-name order.
fn load_demos(cfg: &RunConfig) -> Result<Vec<Demonstration>, CliError> {
    let dir = cfg.input("demos", &cfg.demos)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(CliError::io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Validation(format!(
            "no demonstration files in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|p| read_demo(&read(p)?).map_err(|e| CliError::from(e).context(p)))
        .collect()
}

fn entries(m: &SpdMatrix) -> [f64; 3] {
    let a = m.as_matrix();
    [a[(0, 0)], a[(0, 1)], a[(1, 1)]]
}

/// Semi-axes (major, minor) and major-axis angle of a 2x2 ellipsoid.
pub fn ellipse(m: &SpdMatrix) -> Result<(f64, f64, f64), CliError> {
    if m.dim() != 2 {
        return Err(CliError::Validation(format!(
            "ellipse export needs 2x2 ellipsoids, found {}x{}",
            m.dim(),
            m.dim()
        )));
    }
    let [a, b, c] = entries(m);
    let ev = m.eigenvalues();
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    Ok((ev[1].sqrt(), ev[0].sqrt(), angle))
}

pub fn gen_demos(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.num_demos == 0 {
        return Err(CliError::Validation("num_demos must be positive".into()));
    }
    let scenario = load_scenario(cfg)?;
    let out = prepare_out(cfg)?;
    let profile = scenario.posture_profile();
    let mut summary =
        String::from("demo,seed,attentive,mean_g_b,final_g_b,mean_tracking,max_tracking\n");
    for i in 0..cfg.num_demos {
        let seed = cfg.seed() + i as u64;
        let demo = scripted_expert(&scenario, &profile, seed)?;
        let n = demo.steps.len() as f64;
        let mean_g_b = demo.steps.iter().map(|s| s.g_b).sum::<f64>() / n;
        let final_g_b = demo.steps.last().map_or(0.0, |s| s.g_b);
        let mean_tracking = demo.steps.iter().map(|s| s.tracking_error).sum::<f64>() / n;
        let max_tracking = demo
            .steps
            .iter()
            .map(|s| s.tracking_error)
            .fold(0.0, f64::max);
        println!(
            "demo {i:03} seed {seed}: G_B mean {mean_g_b:.4} final {final_g_b:.4}, tracking mean {mean_tracking:.2e} max {max_tracking:.2e}"
        );
        writeln!(
            summary,
            "{i},{seed},{},{mean_g_b:.9},{final_g_b:.9},{mean_tracking:.9e},{max_tracking:.9e}",
            demo.attentive
        )
        .unwrap();
        write(&out, &format!("demo_{i:03}.jsonl"), &write_demo(&demo))?;
    }
    write(&out, "summary.csv", &summary)
}

#[derive(Serialize)]
struct FitReport {
    requested_components: usize,
    components: usize,
    metric: Metric,
    demos: usize,
    points: usize,
    iterations: usize,
    converged: bool,
    reseeds: usize,
    final_log_likelihood: f64,
    mean_mra: f64,
    clamp_events: usize,
    baseline: Option<BaselineReport>,
}

#[derive(Serialize)]
struct BaselineReport {
    iterations: usize,
    converged: bool,
    mean_mra: f64,
    clamp_events: usize,
}

pub fn fit_gmm(cfg: &RunConfig) -> Result<(), CliError> {
    let demos = load_demos(cfg)?;
    let points = demos_to_manifold_points(&demos)?;
    let mut k = cfg.components;
    if demos.len() < k {
        eprintln!(
            "WARNING: {} demonstrations for {k} components; reducing to {}",
            demos.len(),
            demos.len()
        );
        k = demos.len();
    }
    let out = prepare_out(cfg)?;
    let run = |metric| -> Result<EmFit, CliError> {
        Ok(fit(
            &points,
            &EmOptions {
                components: k,
                seed: cfg.seed(),
                max_iter: cfg.em_max_iter,
                tol: cfg.em_tol,
                metric,
            },
        )?)
    };
    let main = run(cfg.metric)?;
    let main_rep = reproduction_report(&main.model, &points)?;
    write(&out, "model.json", &main.model.to_json())?;
    let base = if cfg.baseline {
        let b = run(Metric::Euclidean)?;
        let rep = reproduction_report(&b.model, &points)?;
        write(&out, "baseline_model.json", &b.model.to_json())?;
        Some((b, rep))
    } else {
        None
    };

    let metric_name = match cfg.metric {
        Metric::AffineInvariant => "affine_invariant",
        Metric::Euclidean => "euclidean",
    };
    let mut csv = format!("time,mra_{metric_name}");
    if base.is_some() {
        csv.push_str(",mra_euclidean");
    }
    csv.push('\n');
    for (i, (t, m)) in main_rep.per_time.iter().enumerate() {
        write!(csv, "{t:.9},{m:.9}").unwrap();
        if let Some((_, rep)) = &base {
            write!(csv, ",{:.9}", rep.per_time[i].1).unwrap();
        }
        csv.push('\n');
    }
    write(&out, "mra.csv", &csv)?;

    println!(
        "fitted {k} components ({metric_name}): mean MRA {:.4}",
        main_rep.mean_mra
    );
    if let Some((_, rep)) = &base {
        println!(
            "baseline (euclidean): mean MRA {:.4}, {} clamp events",
            rep.mean_mra, rep.clamp_events
        );
    }
    let report = FitReport {
        requested_components: cfg.components,
        components: k,
        metric: cfg.metric,
        demos: demos.len(),
        points: points.len(),
        iterations: main.iterations,
        converged: main.converged,
        reseeds: main.reseeds,
        final_log_likelihood: main.log_likelihood.last().copied().unwrap_or(f64::NAN),
        mean_mra: main_rep.mean_mra,
        clamp_events: main_rep.clamp_events,
        baseline: base.map(|(b, rep)| BaselineReport {
            iterations: b.iterations,
            converged: b.converged,
            mean_mra: rep.mean_mra,
            clamp_events: rep.clamp_events,
        }),
    };
    write(
        &out,
        "report.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )
}

pub fn train_policy(cfg: &RunConfig) -> Result<(), CliError> {
    let demos = load_demos(cfg)?;
    let dataset = demos_to_dataset(&demos, cfg.horizons)?;
    let out = prepare_out(cfg)?;
    let outcome = train(&dataset, &cfg.train, cfg.seed())?;
    println!(
        "trained on {} windows: loss {:.4} -> {:.4}",
        dataset.windows.len(),
        outcome.early_loss(),
        outcome.late_loss()
    );
    write(&out, "checkpoint.json", &outcome.checkpoint.to_json())?;
    write(&out, "train_log.csv", &log_csv(&outcome.log))
}

/// Guidance settings when enabled, steering towards the model's profile.
fn guidance_for<'a>(
    cfg: &RunConfig,
    scenario: &'a Scenario,
    model: &'a SpdGmmModel,
) -> Option<(&'a GuidanceConfig, &'a dyn PostureProfile)> {
    cfg.guidance
        .then_some((&scenario.guidance, model as &dyn PostureProfile))
}

fn trial_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.trials as u64).map(|i| cfg.seed() + i).collect()
}

#[derive(Serialize)]
struct TrajectoryStep<'a> {
    step: usize,
    q: &'a [f64],
    bme: [f64; 3],
    g_b: f64,
    tci: f64,
    tracking: f64,
}

fn trajectory_jsonl(report: &RolloutReport) -> String {
    let mut out = String::new();
    for (i, q) in report.joint_trace.iter().enumerate() {
        let row = TrajectoryStep {
            step: i,
            q,
            bme: entries(&report.bme_trace[i]),
            g_b: report.g_b_trace[i],
            tci: report.tci_trace[i],
            tracking: report.tracking_trace[i],
        };
        out.push_str(&serde_json::to_string(&row).expect("step serializes"));
        out.push('\n');
    }
    out
}

pub fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    let scenario = load_scenario(cfg)?;
    let model = load_model(cfg)?;
    let checkpoint = load_checkpoint(cfg)?;
    let out = prepare_out(cfg)?;
    let policy = Policy::Diffusion {
        checkpoint: &checkpoint,
        options: cfg.sample_options(checkpoint.schedule().steps()),
    };
    let guidance = guidance_for(cfg, &scenario, &model);
    for (i, seed) in trial_seeds(cfg).into_iter().enumerate() {
        let report = rollout(&policy, &scenario, guidance, &model, seed)?;
        println!(
            "trajectory {i:03} seed {seed}: success {}, mean G_B {:.4}, mean TCI {:.4}",
            report.success,
            report.mean_g_b(),
            report.mean_tci()
        );
        write(
            &out,
            &format!("trajectory_{i:03}.jsonl"),
            &trajectory_jsonl(&report),
        )?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let scenario = load_scenario(cfg)?;
    let model = load_model(cfg)?;
    let checkpoint = load_checkpoint(cfg)?;
    let out = prepare_out(cfg)?;
    let options = cfg.sample_options(checkpoint.schedule().steps());
    let mut suite = vec![SuiteEntry {
        variant: "unguided".into(),
        scenario: &scenario,
        policy: Policy::Diffusion {
            checkpoint: &checkpoint,
            options,
        },
        guidance: None,
        score: &model,
    }];
    if cfg.guidance {
        suite.push(SuiteEntry {
            variant: "guided".into(),
            scenario: &scenario,
            policy: Policy::Diffusion {
                checkpoint: &checkpoint,
                options,
            },
            guidance: guidance_for(cfg, &scenario, &model),
            score: &model,
        });
    }
    let rows = evaluate_suite(&suite, &trial_seeds(cfg))?;
    for r in &rows {
        println!(
            "{} on {}: MSR {:.3}, TCI {:.3} +- {:.3}, G_B {:.4}",
            r.variant, r.scenario, r.msr, r.tci_mean, r.tci_sd, r.gb_mean
        );
    }
    write(&out, "metrics.csv", &metrics_csv(&rows))
}

const ELLIPSE_COLUMNS: &str = "b00,b01,b11,center_x,center_y,axis_major,axis_minor,angle";

fn ellipse_row(time: f64, m: &SpdMatrix) -> Result<String, CliError> {
    let [a, b, c] = entries(m);
    let (major, minor, angle) = ellipse(m)?;
    Ok(format!(
        "{a:.9e},{b:.9e},{c:.9e},{time:.9},0,{major:.9e},{minor:.9e},{angle:.9}"
    ))
}

pub fn export_plots(cfg: &RunConfig) -> Result<(), CliError> {
    let demos = load_demos(cfg)?;
    let model = load_model(cfg)?;
    let out = prepare_out(cfg)?;

    let mut demo_csv = format!("demo,step,time,{ELLIPSE_COLUMNS}\n");
    let mut times: Vec<f64> = Vec::new();
    for (i, d) in demos.iter().enumerate() {
        for s in &d.steps {
            let t = s.bme.time;
            let row = ellipse_row(t, &s.bme.velocity_bme)?;
            writeln!(demo_csv, "{i},{},{t:.9},{row}", s.step).unwrap();
            if !times.contains(&t) {
                times.push(t);
            }
        }
    }
    times.sort_by(f64::total_cmp);

    let mut gmr_csv = format!("time,{ELLIPSE_COLUMNS}\n");
    for &t in &times {
        let mean = gmr_condition(&model, t)?.mean;
        writeln!(gmr_csv, "{t:.9},{}", ellipse_row(t, &mean)?).unwrap();
    }

    let mut centers_csv = format!("component,prior,time,{ELLIPSE_COLUMNS}\n");
    for (k, (c, p)) in model.means().iter().zip(model.priors()).enumerate() {
        writeln!(
            centers_csv,
            "{k},{p:.9},{:.9},{}",
            c.time,
            ellipse_row(c.time, &c.spd)?
        )
        .unwrap();
    }

    write(&out, "demo_ellipses.csv", &demo_csv)?;
    write(&out, "gmr_ellipses.csv", &gmr_csv)?;
    write(&out, "centers.csv", &centers_csv)?;
    println!(
        "exported {} demo rows, {} regression rows, {} centers",
        demo_csv.lines().count() - 1,
        times.len(),
        model.components()
    );
    Ok(())
}
