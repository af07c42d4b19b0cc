//! Adapter for an external PDDL planner: substitute paths into a command
//! template, run it with a wall-clock deadline, and let the caller read
//! the plan file back. No shell is involved; the template is split into
//! words and executed directly.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::CliError;

/// How an external run ended. `Finished` only says the process exited;
/// whether a plan exists is decided from the plan file afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Finished { success: bool },
    TimedOut,
}

/// Expand `{domain}`, `{problem}` and `{plan}` in a template and split it
/// into argv. Splitting happens before substitution, so substituted paths
/// may contain spaces without changing the word count.
pub fn resolve_template(
    template: &str,
    domain: &Path,
    problem: &Path,
    plan: &Path,
) -> Result<Vec<String>, CliError> {
    let words: Vec<String> = template
        .split_whitespace()
        .map(|w| {
            w.replace("{domain}", &domain.display().to_string())
                .replace("{problem}", &problem.display().to_string())
                .replace("{plan}", &plan.display().to_string())
        })
        .collect();
    if words.is_empty() {
        return Err(CliError::Config(
            "external planner command is empty; set planner.external_command or PIXPLAN_PLANNER"
                .to_string(),
        ));
    }
    Ok(words)
}

/// Run argv with stdout and stderr captured to `log_path`, killing the
/// process once `limit_seconds` of wall clock pass. Returns the status
/// and the elapsed seconds.
pub fn run_with_deadline(
    argv: &[String],
    limit_seconds: f64,
    log_path: &Path,
) -> Result<(RunStatus, f64), CliError> {
    let log = std::fs::File::create(log_path)?;
    let err_log = log.try_clone()?;
    let start = Instant::now();
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(err_log))
        .spawn()
        .map_err(|e| CliError::Config(format!("cannot start planner {:?}: {e}", argv[0])))?;
    loop {
        if let Some(status) = child.try_wait()? {
            let elapsed = start.elapsed().as_secs_f64();
            return Ok((RunStatus::Finished { success: status.success() }, elapsed));
        }
        if start.elapsed().as_secs_f64() > limit_seconds {
            // Best effort: the process may exit between the checks.
            let _ = child.kill();
            let _ = child.wait();
            return Ok((RunStatus::TimedOut, start.elapsed().as_secs_f64()));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_substitutes_each_placeholder() {
        let argv = resolve_template(
            "solver --domain {domain} {problem} --out {plan}",
            Path::new("/tmp/d.pddl"),
            Path::new("/tmp/p.pddl"),
            Path::new("/tmp/p.plan"),
        )
        .unwrap();
        assert_eq!(
            argv,
            vec!["solver", "--domain", "/tmp/d.pddl", "/tmp/p.pddl", "--out", "/tmp/p.plan"]
        );
    }

    #[test]
    fn empty_template_is_rejected() {
        let err = resolve_template("  ", Path::new("d"), Path::new("p"), Path::new("o"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("PIXPLAN_PLANNER"), "unexpected message: {err}");
    }
}
