//! The child-process runner protocol, exercised with shell stand-ins for
//! the real runner.

use std::time::Instant;

use coderev::executor::{ExecJob, ExecStatus, Executor, ProcessSandbox, TestPurpose};

fn sandbox(script: &str) -> ProcessSandbox {
    ProcessSandbox::new(vec!["sh".into(), "-c".into(), script.into()])
}

fn job(timeout_ms: u64) -> ExecJob<'static> {
    ExecJob {
        task_id: "t/0",
        index: 3,
        context: "def add(a, b):\n",
        body: "    return a + b\n",
        test: "add(1, 2)",
        timeout_ms,
        purpose: TestPurpose::Visible,
    }
}

#[test]
fn request_is_one_json_object_on_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let seen = dir.path().join("request.json");
    let script = format!(
        "cat > '{}'; printf '%s' '{{\"status\":\"ok\",\"output\":\"3\",\"duration_ms\":1,\"detail\":null}}'",
        seen.display()
    );
    let out = sandbox(&script).run(&job(1000));
    assert_eq!(out.status, ExecStatus::Ok, "{out:?}");
    assert_eq!(out.output.as_deref(), Some("3"));
    let request: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&seen).unwrap()).unwrap();
    assert_eq!(
        request,
        serde_json::json!({
            "context": "def add(a, b):\n",
            "body": "    return a + b\n",
            "test": "add(1, 2)",
            "timeout_ms": 1000,
        })
    );
}

#[test]
fn runner_reported_errors_pass_through() {
    let script = r#"cat >/dev/null; echo '{"status":"runtime_error","output":null,"duration_ms":4,"detail":"ZeroDivisionError"}'"#;
    let out = sandbox(script).run(&job(1000));
    assert_eq!(out.status, ExecStatus::RuntimeError);
    assert_eq!(out.detail.as_deref(), Some("ZeroDivisionError"));
    assert!(!out.is_ok());
}

#[test]
fn hung_runner_is_killed_as_timeout() {
    let started = Instant::now();
    let out = sandbox("sleep 30").run(&job(100));
    assert_eq!(out.status, ExecStatus::Timeout);
    // Requested timeout plus grace, with room for a slow machine.
    assert!(started.elapsed().as_millis() < 5_000);
}

#[test]
fn malformed_output_is_a_sandbox_failure() {
    let out = sandbox("cat >/dev/null; echo not json").run(&job(1000));
    assert_eq!(out.status, ExecStatus::SandboxFailure);
    assert!(out.detail.unwrap().contains("malformed"));
}

#[test]
fn nonzero_exit_is_a_sandbox_failure() {
    let out = sandbox(
        r#"cat >/dev/null; echo '{"status":"ok","output":"1","duration_ms":1,"detail":null}'; echo boom >&2; exit 3"#,
    )
    .run(&job(1000));
    assert_eq!(out.status, ExecStatus::SandboxFailure);
    assert!(out.detail.unwrap().contains("boom"));
}

#[test]
fn second_object_is_rejected() {
    let one = r#"{"status":"ok","output":"1","duration_ms":1,"detail":null}"#;
    let out = sandbox(&format!("cat >/dev/null; echo '{one}'; echo '{one}'")).run(&job(1000));
    assert_eq!(out.status, ExecStatus::SandboxFailure);
}

#[test]
fn silent_runner_is_a_sandbox_failure() {
    let out = sandbox("cat >/dev/null").run(&job(1000));
    assert_eq!(out.status, ExecStatus::SandboxFailure);
}

#[test]
fn missing_runner_binary_is_a_sandbox_failure() {
    let out = ProcessSandbox::new(vec!["/nonexistent/runner".into()]).run(&job(1000));
    assert_eq!(out.status, ExecStatus::SandboxFailure);
}
