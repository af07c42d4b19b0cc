//! The pipeline stages behind the CLI subcommands. Each stage reads its
//! inputs from the experiment directory, writes its own artifacts, and
//! leaves earlier ones alone, so a directory accumulates a full run and
//! re-running a stage reproduces its files byte for byte. The single
//! exception is `plans/timings.tsv`: wall-clock numbers land there, away
//! from the deterministic tables.

use std::fs;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{concatenate, s, stack, Array2, Array3, Axis};
use pixplan::domains::{corrupt, sample_instances, sample_transitions, Domain, TransitionDataset};
use pixplan::extraction::{
    ama1_translate, encode_dataset, generate_domain_from_latent, generate_problem,
};
use pixplan::metrics::{
    bit_census, eval_neg_elbo, state_variance, successor_error, write_line_plot,
    write_scatter_plot, MetricsReport, PddlStatistics, METRICS_HEADER, VARIANCE_DRAWS,
    VARIANCE_NOISE_SIGMA,
};
use pixplan::models::checkpoint;
use pixplan::models::train::{train, train_any};
use pixplan::models::{Ama2, CubeSpace, Sae, TrainedModel};
use pixplan::strips::pddl::{emit_domain, parse_domain, parse_plan_file, parse_problem};
use pixplan::strips::{astar_with_stats, Heuristic, PlanningProblem, SearchLimits, SearchResult};
use pixplan::validate::{
    judge, visualize, write_contact_sheet, write_image_sequence, ValidationVerdict,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{
    read_instances, read_tsv, write_instances, write_tsv, ExperimentDir, InstanceArchive,
    InstanceEntry, INSTANCES_FORMAT,
};
use crate::config::{self, derive_seed, ExperimentConfig, Manifest, ModelKind, PlannerKind};
use crate::external::{self, RunStatus};
use crate::CliError;

/// Resolve the experiment behind `root`: the manifest's configuration with
/// this invocation's overrides applied on top. The manifest itself stays
/// untouched.
fn open(root: &Path, sets: &[String]) -> Result<(ExperimentDir, ExperimentConfig), CliError> {
    let dir = ExperimentDir::new(root);
    let path = dir.require(dir.manifest(), "generate-data")?;
    let manifest = Manifest::read(&path)?;
    let cfg = config::with_overrides(&manifest.config, sets)?;
    Ok((dir, cfg))
}

fn load_dataset(dir: &ExperimentDir) -> Result<TransitionDataset, CliError> {
    let path = dir.require(dir.dataset(), "generate-data")?;
    TransitionDataset::load_from_path(&path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_model(dir: &ExperimentDir) -> Result<TrainedModel, CliError> {
    let path = dir.require(dir.checkpoint(), "train")?;
    Ok(checkpoint::load_from_path(&path)?)
}

/// Sample the transition dataset and freeze the manifest. Rejects a
/// directory whose manifest was written from a different configuration.
pub fn generate_data(
    root: &Path,
    config_path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = config::load_config(config_path, sets, seed)?;
    fs::create_dir_all(root)?;
    let dir = ExperimentDir::new(root);
    let manifest = Manifest::new(cfg.clone())?;
    if dir.manifest().exists() {
        let stored = Manifest::read(&dir.manifest())?;
        if stored.config_hash != manifest.config_hash {
            return Err(CliError::Config(format!(
                "{} already holds an experiment with config hash {}, but this invocation resolves to {}; use a fresh directory or repeat the original configuration",
                root.display(),
                stored.config_hash,
                manifest.config_hash
            )));
        }
    } else {
        manifest.write(&dir.manifest())?;
    }
    let domain = Domain::new(cfg.domain.clone());
    let dataset = sample_transitions(&domain, cfg.train.transitions, cfg.seed);
    dataset.save_to_path(dir.dataset())?;
    println!(
        "wrote {} {} transitions to {}",
        dataset.len(),
        cfg.domain.name(),
        dir.dataset().display()
    );
    Ok(())
}

/// Train the configured model on the sampled transitions and save the
/// checkpoint. Two-phase models first fit their state autoencoder, logged
/// separately.
pub fn train_model(root: &Path, sets: &[String]) -> Result<(), CliError> {
    let (dir, cfg) = open(root, sets)?;
    let ds = load_dataset(&dir)?;
    let lat = cfg.latent.to_core();
    lat.validate().map_err(CliError::Config)?;
    let net = cfg.network.to_core(ds.spec.image_shape());
    let tcfg = cfg.train.to_core(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut model = match cfg.model {
        ModelKind::Ama1 => TrainedModel::Sae(Sae::new(net, lat, &mut rng)),
        ModelKind::Ama2 => {
            let mut sae = Sae::new(net, lat, &mut rng);
            let mut log = File::create(dir.sae_train_log())?;
            let report =
                train(&mut sae, &ds.x0, &ds.x1, &tcfg, Some(&mut log as &mut dyn std::io::Write))?;
            println!(
                "autoencoder phase: {} epochs, val total {:.4}",
                report.epochs, report.final_val.total
            );
            TrainedModel::Ama2(Ama2::new(sae, &mut rng))
        }
        ModelKind::Ama3Plus => TrainedModel::CubeSpace(CubeSpace::new(net, lat, false, &mut rng)),
        ModelKind::Ama4Plus => TrainedModel::CubeSpace(CubeSpace::new(net, lat, true, &mut rng)),
    };
    let mut log = File::create(dir.train_log())?;
    let report =
        train_any(&mut model, &ds.x0, &ds.x1, &tcfg, Some(&mut log as &mut dyn std::io::Write))?;
    checkpoint::save_to_path(&model, &dir.checkpoint())?;
    println!(
        "trained {} for {} epochs: val total {:.4}, test total {:.4}; checkpoint at {}",
        cfg.model.label(),
        report.epochs,
        report.final_val.total,
        report.test.total,
        dir.checkpoint().display()
    );
    Ok(())
}

/// Lower-cased name with everything but letters and digits collapsed to
/// single hyphens, prefixed when it would not start with a letter. Keeps
/// exported names portable across PDDL tooling.
fn pddl_name(name: &str) -> String {
    let mut out = String::new();
    let mut gap = false;
    for ch in name.chars() {
        let c = ch.to_ascii_lowercase();
        if c.is_ascii_alphanumeric() {
            if gap && !out.is_empty() {
                out.push('-');
            }
            gap = false;
            out.push(c);
        } else {
            gap = true;
        }
    }
    match out.chars().next() {
        None => "run".to_string(),
        Some(c) if !c.is_ascii_alphabetic() => format!("run-{out}"),
        Some(_) => out,
    }
}

/// Extract a grounded STRIPS domain from the checkpoint and write the
/// domain file, the per-action extraction report, and summary statistics.
pub fn export_pddl(root: &Path, sets: &[String]) -> Result<(), CliError> {
    let (dir, cfg) = open(root, sets)?;
    let ds = load_dataset(&dir)?;
    let mut model = load_model(&dir)?;
    let domain_name = pddl_name(&cfg.name);
    let (domain_text, stats, report_tsv) = match cfg.model {
        ModelKind::Ama2 => {
            return Err(CliError::Config(
                "ama2 keeps its action model in network weights, so there is no STRIPS domain to export; train ama1, ama3plus, or ama4plus for planning"
                    .to_string(),
            ))
        }
        ModelKind::Ama1 => {
            let z0 = model.encode_bits(&ds.x0);
            let z1 = model.encode_bits(&ds.x1);
            let actions = ama1_translate(&z0, &z1);
            let text = emit_domain(&domain_name, model.lat().f_bits, &actions);
            let stats = PddlStatistics::from_ama1(&actions, &z0, &z1);
            (text, stats, None)
        }
        ModelKind::Ama3Plus | ModelKind::Ama4Plus => {
            let cube = model.as_cube_space().ok_or_else(|| {
                CliError::Config(
                    "checkpoint does not hold a cube-space model; retrain with the configured model kind"
                        .to_string(),
                )
            })?;
            let data = encode_dataset(cube, &ds.x0, &ds.x1);
            let artifacts = generate_domain_from_latent(cube, &data, &domain_name)?;
            let stats = PddlStatistics::from_artifacts(&artifacts, &data);
            (artifacts.domain_text, stats, Some(artifacts.report.to_tsv()))
        }
    };
    fs::write(dir.domain_pddl(), &domain_text)?;
    if let Some(tsv) = report_tsv {
        fs::write(dir.extraction_report(), tsv)?;
    }
    let mut stats_json = serde_json::to_string_pretty(&stats)?;
    stats_json.push('\n');
    fs::write(dir.pddl_stats(), stats_json)?;
    println!(
        "exported {} grounded actions to {}",
        stats.actions_a2,
        dir.domain_pddl().display()
    );
    Ok(())
}

/// Sample goal-directed instances at the configured depths, optionally
/// corrupting their stored images with Gaussian pixel noise.
pub fn make_instances(root: &Path, sets: &[String]) -> Result<(), CliError> {
    let (dir, cfg) = open(root, sets)?;
    let ds = load_dataset(&dir)?;
    let domain = ds.domain();
    let mut entries = Vec::new();
    for &g in &cfg.instances.g_values {
        let seed = derive_seed(cfg.seed, &format!("instances-{g}"));
        for (i, instance) in
            sample_instances(&domain, g, cfg.instances.per_g, seed)?.into_iter().enumerate()
        {
            entries.push(InstanceEntry { id: format!("g{g:02}-i{i:02}"), g, instance });
        }
    }
    if cfg.instances.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "instance-noise"));
        for e in &mut entries {
            let pair = stack(Axis(0), &[e.instance.x_init.view(), e.instance.x_goal.view()])
                .expect("paired renders share a shape");
            let noisy = corrupt(&pair, cfg.instances.noise_sigma, &mut rng);
            e.instance.x_init = noisy.index_axis(Axis(0), 0).to_owned();
            e.instance.x_goal = noisy.index_axis(Axis(0), 1).to_owned();
        }
    }
    let count = entries.len();
    write_instances(&dir, &InstanceArchive { format: INSTANCES_FORMAT.to_string(), entries })?;
    println!(
        "wrote {count} instances ({} per depth in {:?}) to {}",
        cfg.instances.per_g,
        cfg.instances.g_values,
        dir.instances().display()
    );
    Ok(())
}

/// Run `f` over indices 0..n on up to `jobs` scoped worker threads,
/// collecting results in order. One worker means plain serial execution.
fn run_indexed<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = jobs.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("no poisoned slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("no poisoned slot").expect("worker filled every slot"))
        .collect()
}

struct PlanJob {
    id: String,
    g: usize,
    problem: PlanningProblem,
    problem_path: PathBuf,
    plan_path: PathBuf,
    log_path: PathBuf,
}

struct PlanRow {
    outcome: String,
    length: Option<usize>,
    expansions: Option<usize>,
    seconds: f64,
}

/// Encode every instance into a problem file, run the configured planner
/// on each, and tabulate the outcomes. Search work goes to `stats.tsv`
/// (deterministic); wall-clock time goes to `timings.tsv`.
pub fn plan(root: &Path, sets: &[String], jobs: usize) -> Result<(), CliError> {
    let (dir, cfg) = open(root, sets)?;
    let ds = load_dataset(&dir)?;
    let mut model = load_model(&dir)?;
    let domain_path = dir.require(dir.domain_pddl(), "export-pddl")?;
    let parsed = parse_domain(&fs::read_to_string(&domain_path)?)?;
    let archive = read_instances(&dir)?;
    fs::create_dir_all(dir.plans_dir())?;

    // Problems first: encoding needs the model, solving does not.
    let mut jobs_list = Vec::with_capacity(archive.entries.len());
    for e in &archive.entries {
        let init = ds.normalizer.apply3(&e.instance.x_init);
        let goal = ds.normalizer.apply3(&e.instance.x_goal);
        let text = generate_problem(&mut model, init.view(), goal.view(), &e.id, &parsed.name)?;
        let problem_path = dir.problem_file(&e.id);
        fs::write(&problem_path, &text)?;
        let problem = parse_problem(&text)?.assemble(&parsed)?;
        jobs_list.push(PlanJob {
            id: e.id.clone(),
            g: e.g,
            problem,
            problem_path,
            plan_path: dir.plan_file(&e.id),
            log_path: dir.planner_log(&e.id),
        });
    }

    let external_cmd = match cfg.planner.kind {
        PlannerKind::External => {
            let t = if cfg.planner.external_command.is_empty() {
                std::env::var("PIXPLAN_PLANNER").unwrap_or_default()
            } else {
                cfg.planner.external_command.clone()
            };
            if t.trim().is_empty() {
                return Err(CliError::Config(
                    "planner.kind is external but no command template is set; set planner.external_command or the PIXPLAN_PLANNER environment variable"
                        .to_string(),
                ));
            }
            Some(t)
        }
        _ => None,
    };
    let heuristic = match cfg.planner.kind {
        PlannerKind::InternalGoalCount => Heuristic::GoalCount,
        _ => Heuristic::Blind,
    };
    let limits = SearchLimits {
        max_expansions: cfg.planner.max_expansions,
        max_seconds: Some(cfg.planner.time_limit_seconds),
    };

    let solve_one = |job: &PlanJob| -> Result<PlanRow, CliError> {
        match &external_cmd {
            None => {
                let (result, stats) = astar_with_stats(&job.problem, heuristic, limits);
                if let SearchResult::Solved(p) = &result {
                    let mut text = p.names(&job.problem).join("\n");
                    text.push('\n');
                    fs::write(&job.plan_path, text)?;
                }
                Ok(PlanRow {
                    outcome: result.outcome_label().to_string(),
                    length: result.plan().map(|p| p.cost()),
                    expansions: Some(stats.expansions),
                    seconds: stats.seconds,
                })
            }
            Some(template) => {
                let argv = external::resolve_template(
                    template,
                    &domain_path,
                    &job.problem_path,
                    &job.plan_path,
                )?;
                let (status, seconds) =
                    external::run_with_deadline(&argv, cfg.planner.time_limit_seconds, &job.log_path)?;
                // The plan file is the ground truth for success; exit codes
                // vary across planners.
                let outcome = match status {
                    RunStatus::TimedOut => "timeout",
                    RunStatus::Finished { .. } if job.plan_path.exists() => "solved",
                    RunStatus::Finished { success: true } => "exhausted",
                    RunStatus::Finished { success: false } => "error",
                };
                let length = if outcome == "solved" {
                    Some(parse_plan_file(&fs::read_to_string(&job.plan_path)?)?.len())
                } else {
                    None
                };
                Ok(PlanRow { outcome: outcome.to_string(), length, expansions: None, seconds })
            }
        }
    };

    let results = run_indexed(jobs_list.len(), jobs, |i| solve_one(&jobs_list[i]));
    let mut stats_rows = Vec::new();
    let mut timing_rows = Vec::new();
    let mut solved = 0usize;
    let planner_label = cfg.planner.kind.label();
    for (job, res) in jobs_list.iter().zip(results) {
        let row = res?;
        if row.outcome == "solved" {
            solved += 1;
        }
        stats_rows.push(format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            job.id,
            job.g,
            planner_label,
            row.outcome,
            row.length.map(|v| v.to_string()).unwrap_or_default(),
            row.expansions.map(|v| v.to_string()).unwrap_or_default(),
        ));
        timing_rows.push(format!("{}\t{:.3}", job.id, row.seconds));
    }
    write_tsv(&dir.plan_stats(), "instance\tg\tplanner\toutcome\tlength\texpansions", &stats_rows)?;
    write_tsv(&dir.plan_timings(), "instance\tseconds", &timing_rows)?;
    println!(
        "solved {}/{} instances; outcomes at {}",
        solved,
        jobs_list.len(),
        dir.plan_stats().display()
    );
    Ok(())
}

enum Prepared {
    NotFound,
    Broken { reason: String },
    Trace { frames: Vec<Array3<f64>>, length: usize },
}

fn opt_cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Decode every found plan back to images, write the frames, and judge
/// each trace against the ground-truth simulator. The verdict table keys
/// the whole run: found / valid / optimal per instance with the failure
/// reason when one applies.
pub fn validate(root: &Path, sets: &[String], jobs: usize) -> Result<(), CliError> {
    let (dir, cfg) = open(root, sets)?;
    let ds = load_dataset(&dir)?;
    let mut model = load_model(&dir)?;
    let parsed = parse_domain(&fs::read_to_string(dir.require(dir.domain_pddl(), "export-pddl")?)?)?;
    let archive = read_instances(&dir)?;
    let domain = ds.domain();
    let lat = *model.lat();

    // Decode serially: the model is not thread safe. Judging below is.
    let mut prepared: Vec<(&InstanceEntry, Prepared)> = Vec::with_capacity(archive.entries.len());
    for e in &archive.entries {
        let plan_path = dir.plan_file(&e.id);
        if !plan_path.exists() {
            prepared.push((e, Prepared::NotFound));
            continue;
        }
        let names = match parse_plan_file(&fs::read_to_string(&plan_path)?) {
            Ok(n) => n,
            Err(err) => {
                let reason = format!("plan file does not parse: {err}");
                prepared.push((e, Prepared::Broken { reason }));
                continue;
            }
        };
        let ptext = fs::read_to_string(dir.require(dir.problem_file(&e.id), "plan")?)?;
        let problem = parse_problem(&ptext)?.assemble(&parsed)?;
        let states = match problem.simulate_named(&names) {
            Ok(st) => st,
            Err(err) => {
                let reason = format!("plan does not execute: {err}");
                prepared.push((e, Prepared::Broken { reason }));
                continue;
            }
        };
        let mut bits = Array2::zeros((states.len(), lat.f_bits));
        for (i, st) in states.iter().enumerate() {
            for b in st.ones() {
                bits[[i, b]] = 1.0;
            }
        }
        let frames = visualize(&mut model, &bits, &ds.normalizer);
        let vis = dir.vis_dir(&e.id);
        fs::create_dir_all(&vis)?;
        write_image_sequence(&frames, &vis, "step")?;
        write_contact_sheet(&frames, &vis.join("trace.png"))?;
        prepared.push((e, Prepared::Trace { frames, length: names.len() }));
    }

    let verdicts: Vec<ValidationVerdict> = run_indexed(prepared.len(), jobs, |i| {
        let (e, prep) = &prepared[i];
        match prep {
            Prepared::NotFound => judge(&domain, &e.instance, None),
            Prepared::Broken { reason } => ValidationVerdict {
                found: true,
                valid: false,
                optimal: Some(false),
                failure_step: None,
                failure_reason: reason.clone(),
            },
            Prepared::Trace { frames, .. } => judge(&domain, &e.instance, Some(frames)),
        }
    });

    let hyper = format!("f={} a={} eps={}", lat.f_bits, lat.actions, lat.epsilon);
    let mut rows = Vec::new();
    let (mut found, mut valid, mut optimal) = (0usize, 0usize, 0usize);
    for ((e, prep), v) in prepared.iter().zip(&verdicts) {
        found += usize::from(v.found);
        valid += usize::from(v.valid);
        optimal += usize::from(v.optimal == Some(true));
        let length = match prep {
            Prepared::Trace { length, .. } => Some(*length),
            _ => None,
        };
        rows.push(format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            ds.spec.name(),
            cfg.model.label(),
            cfg.planner.kind.label(),
            hyper,
            e.id,
            e.g,
            v.found,
            v.valid,
            opt_cell(&v.optimal),
            opt_cell(&length),
            opt_cell(&v.failure_step),
            v.failure_reason,
        ));
    }
    write_tsv(
        &dir.verdicts(),
        "domain\tmodel\tplanner\thyperparams\tinstance\tg\tfound\tvalid\toptimal\tlength\tfailure_step\tfailure_reason",
        &rows,
    )?;
    println!(
        "validated {} instances: {found} found, {valid} valid, {optimal} optimal; verdicts at {}",
        prepared.len(),
        dir.verdicts().display()
    );
    Ok(())
}

/// Evaluation metrics for the checkpoint on the test split, plus training
/// and planning plots when their source tables exist.
pub fn report(root: &Path, sets: &[String]) -> Result<(), CliError> {
    let (dir, cfg) = open(root, sets)?;
    let ds = load_dataset(&dir)?;
    let mut model = load_model(&dir)?;
    fs::create_dir_all(dir.report_dir())?;

    let r = ds.split.test_range();
    let (x0, x1) = if r.is_empty() {
        (ds.x0.clone(), ds.x1.clone())
    } else {
        (
            ds.x0.slice(s![r.clone(), .., .., ..]).to_owned(),
            ds.x1.slice(s![r, .., .., ..]).to_owned(),
        )
    };
    let both = concatenate(Axis(0), &[x0.view(), x1.view()]).expect("paired sets share a shape");
    let census = bit_census(&mut model, &both);
    let pddl: Option<PddlStatistics> = if dir.pddl_stats().exists() {
        Some(serde_json::from_str(&fs::read_to_string(dir.pddl_stats())?)?)
    } else {
        None
    };
    let metrics = MetricsReport {
        neg_elbo_beta1: eval_neg_elbo(&mut model, &x0, &x1),
        state_variance: state_variance(
            &mut model,
            &x0,
            VARIANCE_NOISE_SIGMA,
            VARIANCE_DRAWS,
            derive_seed(cfg.seed, "variance"),
        ),
        effective_bits: census.effective,
        constant_zero_bits: census.constant_zero,
        successor_abs_error: successor_error(&mut model, &x0, &x1),
        pddl,
    };
    write_tsv(&dir.metrics(), METRICS_HEADER, &[metrics.row(ds.spec.name(), &model)])?;

    if dir.train_log().exists() {
        let (header, rows) = read_tsv(&dir.train_log())?;
        if let Some(col) = header.iter().position(|h| h == "total") {
            let values: Vec<f64> =
                rows.iter().filter_map(|row| row.get(col)?.parse().ok()).collect();
            if !values.is_empty() {
                write_line_plot(&values, &dir.train_curve_plot())?;
            }
        }
    }
    if dir.verdicts().exists() {
        let (header, rows) = read_tsv(&dir.verdicts())?;
        let gi = header.iter().position(|h| h == "g");
        let li = header.iter().position(|h| h == "length");
        if let (Some(gi), Some(li)) = (gi, li) {
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|row| Some((row.get(gi)?.parse().ok()?, row.get(li)?.parse().ok()?)))
                .collect();
            if !points.is_empty() {
                write_scatter_plot(&points, &dir.length_plot())?;
            }
        }
    }
    println!(
        "eval objective {:.4}, state variance {:.4}, {} effective bits; report under {}",
        metrics.neg_elbo_beta1,
        metrics.state_variance,
        metrics.effective_bits,
        dir.report_dir().display()
    );
    Ok(())
}
