use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn diomp(tmp: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diomp"))
        .args(args)
        .env("TMPDIR", tmp)
        .env_remove("DIOMP_FAULT_ABORT_RANK")
        .env_remove("DIOMP_INJECT_FAULT")
        .output()
        .expect("launch diomp")
}

fn child_pids(stderr: &[u8]) -> Vec<u32> {
    String::from_utf8_lossy(stderr)
        .lines()
        .filter_map(|l| l.strip_prefix("diomp: rank ")?.split(" pid ").nth(1)?.parse().ok())
        .collect()
}

fn alive(pid: u32) -> bool {
    // A reaped child has no /proc entry; a zombie would still show one.
    Path::new(&format!("/proc/{pid}")).exists()
}

fn assert_empty(dir: &Path) {
    let left: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(left.is_empty(), "run directory leaked: {left:?}");
}

#[test]
fn single_rank_selftest_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = diomp(tmp.path(), &["run", "-n", "1", "selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(!text.contains("FAIL"));
}

#[test]
fn injected_overlap_fails_selftest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_diomp"))
        .args(["run", "selftest"])
        .env("TMPDIR", tmp.path())
        .env("DIOMP_INJECT_FAULT", "alloc-overlap")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["run", "--nodes", "5", "-n", "4", "stencil"][..],
        &["run", "-n", "2", "p2p", "--kind", "bcast"],
        &["run", "-n", "2", "--node-map", "0", "matmul"],
        &["run", "--bogus", "selftest"],
        &["launch"],
    ] {
        let out = diomp(tmp.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn merged_csv_has_every_rank_row() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("out.csv");
    let run_tmp = tempfile::tempdir().unwrap();
    let out = diomp(
        run_tmp.path(),
        &[
            "run", "-n", "3", "--devices", "2", "--out", csv.to_str().unwrap(),
            "p2p", "--kind", "bandwidth", "--sizes", "64,4096,65536", "--iters", "4", "--warmup", "1",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,size_bytes,iters,mean_us,bw_MiBs");
    // Only the issuing rank measures: three sizes, one row each.
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[1..].iter().all(|l| l.starts_with("bandwidth,")));
    assert_eq!(child_pids(&out.stderr).len(), 3);
    assert_empty(run_tmp.path());
}

#[test]
fn baseline_adds_ratio_column() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base.csv");
    std::fs::write(&base, "kind,size_bytes,iters,mean_us,bw_MiBs\nput_latency,8,1,1000000.0,0\n").unwrap();
    let out = diomp(
        tmp.path(),
        &["run", "-n", "2", "--baseline", base.to_str().unwrap(), "p2p", "--sizes", "8,16", "--iters", "3"],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].ends_with(",log10_ratio"));
    let ratio: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(ratio > 0.0, "1 s baseline should be slower than a local put: {ratio}");
    assert!(lines[2].ends_with(','), "unmatched size has an empty ratio: {}", lines[2]);
}

#[test]
fn aborted_child_is_reported_and_peers_reaped() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_diomp"))
        .args(["run", "-n", "4", "--nodes", "2", "stencil", "--grid", "32", "--steps", "5000"])
        .env("TMPDIR", tmp.path())
        .env("DIOMP_FAULT_ABORT_RANK", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed() < Duration::from_secs(30));
    let pids = child_pids(&out.stderr);
    assert_eq!(pids.len(), 4);
    for pid in pids {
        assert!(!alive(pid), "rank process {pid} outlived the launcher");
    }
    assert!(out.stdout.is_empty());
    assert_empty(tmp.path());
}

#[test]
fn timeout_kills_every_rank() {
    let tmp = tempfile::tempdir().unwrap();
    let out = diomp(
        tmp.path(),
        &["run", "-n", "2", "--timeout", "1", "stencil", "--grid", "48", "--steps", "1000000"],
    );
    assert_eq!(out.status.code(), Some(4));
    for pid in child_pids(&out.stderr) {
        assert!(!alive(pid));
    }
    assert_empty(tmp.path());
}

#[test]
fn stencil_dump_matches_across_rank_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dumps = Vec::new();
    for n in ["1", "3"] {
        let path = tmp.path().join(format!("field{n}.bin"));
        let out = diomp(
            tmp.path(),
            &["run", "-n", n, "stencil", "--grid", "24", "--steps", "30", "--dump-field", path.to_str().unwrap()],
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        dumps.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(dumps[0].len(), 24 * 24 * 24 * 8);
    assert_eq!(dumps[0], dumps[1]);
}
