use std::fs;
use std::path::Path;
use std::time::Instant;

use pixplan::metrics::METRICS_HEADER;
use pixplan::strips::pddl::parse_domain;
use pixplan_cli::stages;

/// A deliberately tiny experiment: 2x2 lights on 6x6 images, 8 latent
/// bits, 3 epochs. Enough to move every stage without meaningful compute.
const MICRO: &[&str] = &[
    "name=micro",
    "seed=11",
    "domain.kind=lights_out",
    "domain.n=2",
    "domain.cell=3",
    "model=ama4plus",
    "latent.f_bits=8",
    "latent.actions=8",
    "network.conv_channels=2",
    "network.kernel=3",
    "network.action_hidden=16",
    "train.transitions=48",
    "train.epochs=3",
    "train.batch=16",
    "train.anneal_epochs=2",
    "instances.g_values=[1]",
    "instances.per_g=2",
    "instances.noise_sigma=0.05",
    "planner.max_expansions=5000",
    "planner.time_limit_seconds=30",
];

fn micro_sets(extra: &[&str]) -> Vec<String> {
    MICRO.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[cfg(unix)]
fn write_script(path: &Path, body: &str) {
    use std::os::unix::fs::PermissionsExt;
    fs::write(path, body).unwrap();
    fs::set_permissions(path, fs::Permissions::from_mode(0o755)).unwrap();
}

#[test]
fn full_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    stages::generate_data(root, None, &micro_sets(&[]), None).unwrap();
    stages::train_model(root, &[]).unwrap();
    stages::export_pddl(root, &[]).unwrap();
    stages::make_instances(root, &[]).unwrap();
    stages::plan(root, &[], 2).unwrap();
    stages::validate(root, &[], 2).unwrap();
    stages::report(root, &[]).unwrap();

    for name in [
        "manifest.json",
        "dataset.json",
        "checkpoint.json",
        "train_log.tsv",
        "domain.pddl",
        "extraction_report.tsv",
        "pddl_stats.json",
        "instances.json",
        "plans/stats.tsv",
        "plans/timings.tsv",
        "verdicts.tsv",
        "report/metrics.tsv",
    ] {
        assert!(root.join(name).exists(), "missing artifact {name}");
    }

    let stats = lines(&root.join("plans/stats.tsv"));
    assert_eq!(stats.len(), 3, "header plus one row per instance: {stats:?}");
    assert_eq!(stats[0], "instance\tg\tplanner\toutcome\tlength\texpansions");
    for row in &stats[1..] {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[2], "blind");
        assert!(
            ["solved", "exhausted", "timeout"].contains(&cols[3]),
            "unexpected outcome in {row}"
        );
        // Every plan file that exists belongs to a solved row and has its
        // decoded trace written.
        if cols[3] == "solved" {
            assert!(root.join(format!("plans/{}.plan", cols[0])).exists());
            assert!(root.join(format!("vis/{}/trace.png", cols[0])).exists());
        }
        assert!(root.join(format!("plans/{}.pddl", cols[0])).exists());
    }

    let verdicts = lines(&root.join("verdicts.tsv"));
    assert_eq!(verdicts.len(), 3);
    assert!(verdicts[0].starts_with("domain\tmodel\tplanner\thyperparams"));
    for row in &verdicts[1..] {
        assert!(row.starts_with("lights_out\tama4plus\tblind\tf=8 a=8"), "row: {row}");
    }

    let metrics = lines(&root.join("report/metrics.tsv"));
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics[0], METRICS_HEADER);
    assert!(metrics[1].starts_with("lights_out\tbicsae\t8\t"), "row: {}", metrics[1]);

    // Re-running stages reproduces the deterministic artifacts byte for
    // byte; only timings.tsv may differ.
    let frozen: Vec<(String, Vec<u8>)> = [
        "dataset.json",
        "instances.json",
        "domain.pddl",
        "extraction_report.tsv",
        "pddl_stats.json",
        "plans/stats.tsv",
        "verdicts.tsv",
        "report/metrics.tsv",
    ]
    .iter()
    .map(|n| (n.to_string(), fs::read(root.join(n)).unwrap()))
    .collect();
    stages::generate_data(root, None, &micro_sets(&[]), None).unwrap();
    stages::export_pddl(root, &[]).unwrap();
    stages::make_instances(root, &[]).unwrap();
    stages::plan(root, &[], 1).unwrap();
    stages::validate(root, &[], 1).unwrap();
    stages::report(root, &[]).unwrap();
    for (name, before) in &frozen {
        let after = fs::read(root.join(name)).unwrap();
        assert_eq!(&after, before, "{name} changed across identical reruns");
    }

    #[cfg(unix)]
    external_planner_roundtrip(root);
}

/// Drives the external adapter against the artifacts of a finished run: a
/// fake planner that emits one action, then one that hangs past the
/// deadline.
#[cfg(unix)]
fn external_planner_roundtrip(root: &Path) {
    let domain_text = fs::read_to_string(root.join("domain.pddl")).unwrap();
    let parsed = parse_domain(&domain_text).unwrap();
    assert!(!parsed.actions.is_empty(), "micro run extracted no actions");
    let action = &parsed.actions[0].name;

    let solver = root.join("fake_planner.sh");
    write_script(&solver, &format!("#!/bin/sh\nprintf '(%s)\\n' '{action}' > \"$3\"\n"));
    let sets = vec![
        "planner.kind=external".to_string(),
        format!("planner.external_command={} {{domain}} {{problem}} {{plan}}", solver.display()),
    ];
    stages::plan(root, &sets, 1).unwrap();
    let stats = lines(&root.join("plans/stats.tsv"));
    assert_eq!(stats.len(), 3);
    for row in &stats[1..] {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[2], "external");
        assert_eq!(cols[3], "solved", "row: {row}");
        assert_eq!(cols[4], "1", "external plan has one action: {row}");
        assert_eq!(cols[5], "", "external runs report no expansions: {row}");
    }
    // The planted plan flows through validation like any other.
    stages::validate(root, &sets, 1).unwrap();
    assert_eq!(lines(&root.join("verdicts.tsv")).len(), 3);

    let slow = root.join("slow_planner.sh");
    write_script(&slow, "#!/bin/sh\nsleep 30\n");
    let sets = vec![
        "planner.kind=external".to_string(),
        format!("planner.external_command={} {{domain}} {{problem}} {{plan}}", slow.display()),
        "planner.time_limit_seconds=0.3".to_string(),
    ];
    // Stale plan files from the previous external run must not be read as
    // this run's output.
    for row in &lines(&root.join("plans/stats.tsv"))[1..] {
        let id = row.split('\t').next().unwrap();
        let _ = fs::remove_file(root.join(format!("plans/{id}.plan")));
    }
    let start = Instant::now();
    stages::plan(root, &sets, 1).unwrap();
    assert!(start.elapsed().as_secs_f64() < 15.0, "deadline was not enforced");
    for row in &lines(&root.join("plans/stats.tsv"))[1..] {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[3], "timeout", "row: {row}");
    }
}

#[test]
fn ama2_trains_in_two_phases_and_refuses_pddl_export() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    stages::generate_data(root, None, &micro_sets(&["model=ama2"]), None).unwrap();
    stages::train_model(root, &[]).unwrap();
    assert!(root.join("sae_train_log.tsv").exists());
    assert!(root.join("train_log.tsv").exists());
    assert!(root.join("checkpoint.json").exists());
    let err = stages::export_pddl(root, &[]).unwrap_err().to_string();
    assert!(err.contains("ama1, ama3plus, or ama4plus"), "unexpected message: {err}");
}

#[test]
fn missing_artifacts_point_at_their_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let err = stages::train_model(root, &[]).unwrap_err().to_string();
    assert!(err.contains("pixplan generate-data"), "unexpected message: {err}");

    stages::generate_data(root, None, &micro_sets(&[]), None).unwrap();
    for err in [
        stages::export_pddl(root, &[]).unwrap_err().to_string(),
        stages::plan(root, &[], 1).unwrap_err().to_string(),
        stages::validate(root, &[], 1).unwrap_err().to_string(),
        stages::report(root, &[]).unwrap_err().to_string(),
    ] {
        assert!(err.contains("pixplan train"), "unexpected message: {err}");
    }
}

#[test]
fn a_directory_keeps_its_original_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    stages::generate_data(root, None, &micro_sets(&[]), None).unwrap();
    let err = stages::generate_data(root, None, &micro_sets(&["seed=99"]), None)
        .unwrap_err()
        .to_string();
    assert!(err.contains("config hash"), "unexpected message: {err}");
    stages::generate_data(root, None, &micro_sets(&[]), None).unwrap();
}

#[test]
fn binary_reports_missing_manifest_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_pixplan"))
        .arg("train")
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generate-data"), "stderr: {err}");
}

#[test]
fn binary_generates_data_from_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_pixplan"))
        .arg("generate-data")
        .arg("--out")
        .arg(tmp.path())
        .args(["--set", "domain.kind=lights_out", "--set", "domain.n=2", "--set", "domain.cell=3"])
        .args(["--set", "train.transitions=5", "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("manifest.json").exists());
    assert!(tmp.path().join("dataset.json").exists());
}
