//! Exit-code and output contracts of the `couplet` binary.

use std::io::Write;
use std::process::{Command, Output};

fn couplet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_couplet"))
        .args(args)
        .output()
        .expect("run couplet")
}

fn write_config(name: &str, contents: &str) -> std::path::PathBuf {
    let path = std::env::temp_dir().join(format!("couplet-test-{name}-{}.cfg", std::process::id()));
    let mut file = std::fs::File::create(&path).unwrap();
    file.write_all(contents.as_bytes()).unwrap();
    path
}

const DEMO: &str = "\
instance macro submodel:demo.macro
instance micro submodel:demo.micro
scale macro dt=1 hour T=1 day
scale micro dt=60 s T=1 hour
param micro.restart_port environmentValue
conduit macro.macroscopicVariable -> micro.environmentValue
conduit micro.microscopicResponse -> macro.feedback
";

#[test]
fn validate_ok_is_silent_exit_zero() {
    let path = write_config("ok", DEMO);
    let output = couplet(&["validate", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0));
    assert!(output.stdout.is_empty(), "expected no output");
    std::fs::remove_file(path).ok();
}

#[test]
fn validate_duplicate_instance_prints_one_line_exit_one() {
    let path = write_config("dup", "instance a mapper:x\ninstance a mapper:x\n");
    let output = couplet(&["validate", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains("duplicate instance a"));
    std::fs::remove_file(path).ok();
}

#[test]
fn run_demo_prints_final_line_exit_zero() {
    let path = write_config("run", DEMO);
    let output = couplet(&["run", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.lines().last(), Some("all instances deregistered"));
    std::fs::remove_file(path).ok();
}

#[test]
fn run_aborting_config_exits_two() {
    // demo.macro implements a submodel; declaring the instance as a
    // source makes the kind mismatch fail the run.
    let config = "\
instance src source:demo.macro
instance snk sink:demo.micro
conduit src.out -> snk.inp
";
    let path = write_config("abort", config);
    let output = couplet(&["run", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    std::fs::remove_file(path).ok();
}

#[test]
fn usage_errors_exit_sixty_four() {
    assert_eq!(couplet(&["no-such-command"]).status.code(), Some(64));
    assert_eq!(couplet(&["run"]).status.code(), Some(64));
    assert_eq!(
        couplet(&["bench-speed", "--transport", "socket", "--bogus-flag"])
            .status
            .code(),
        Some(64)
    );
    assert_eq!(couplet(&[]).status.code(), Some(64));
}

#[test]
fn bench_speed_emits_table_and_csv() {
    let output = couplet(&[
        "bench-speed",
        "--transport",
        "in-process",
        "--sizes",
        "0,1024",
        "--round-trips",
        "5",
    ]);
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("transport,size_bytes,mean_s,min_s"));
    assert!(stdout.contains("in-process,0,"));
    assert!(stdout.contains("latency:"));
}

#[test]
fn bench_overhead_emits_fit() {
    let output = couplet(&[
        "bench-overhead",
        "--n-values",
        "1,2",
        "--m-values",
        "0,2",
        "--repeats",
        "1",
    ]);
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("n,m,T_s"));
    assert!(stdout.contains("fit: T ="));
}

#[test]
fn demo_canal_emits_report_csv_to_file() {
    let out = std::env::temp_dir().join(format!("canal-{}.csv", std::process::id()));
    let output = couplet(&[
        "demo-canal",
        "--n-values",
        "0.5,1",
        "--iterations",
        "50",
        "--length-m",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("N,grid,T_mono_s,T_local_s,eps_local\n"));
    assert_eq!(csv.lines().count(), 3);
    std::fs::remove_file(out).ok();
}

#[test]
fn distributed_run_across_two_processes() {
    let path = write_config("dist", DEMO);
    let config = path.to_str().unwrap();
    let manager = {
        // Reserve a port for the simulation manager.
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        addr
    };
    let peer = Command::new(env!("CARGO_BIN_EXE_couplet"))
        .args([
            "run", config, "--manager", &manager, "--as", "peer", "--place", "micro=peer",
        ])
        .spawn()
        .unwrap();
    let main = couplet(&[
        "run",
        config,
        "--manager",
        &manager,
        "--as",
        "main",
        "--serve-manager",
        "--place",
        "micro=peer",
    ]);
    let peer = peer.wait_with_output().unwrap();
    assert_eq!(
        main.status.code(),
        Some(0),
        "main stderr: {}",
        String::from_utf8_lossy(&main.stderr)
    );
    assert_eq!(
        peer.status.code(),
        Some(0),
        "peer stderr: {}",
        String::from_utf8_lossy(&peer.stderr)
    );
    assert!(String::from_utf8_lossy(&main.stdout).contains("all instances deregistered"));
    std::fs::remove_file(path).ok();
}
