use std::fs;
use std::process::{Command, Output};

fn tokendiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokendiff")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn linear_schedule_ends_at_stationary_masses() {
    let out = tokendiff(&["schedule", "inspect", "--kind", "linear", "--T", "100", "--K", "512"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let last: Vec<&str> = text.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(last[0], "100");
    assert!(last.contains(&"0.9") && last.contains(&"0.1"), "{last:?}");
}

#[test]
fn pitch_self_comparison_is_error_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pitch.csv");
    fs::write(&path, "frame,f0,voiced\n0,120.0,1\n1,0,0\n2,180.5,1\n").unwrap();
    let p = path.to_str().unwrap();
    let out = tokendiff(&["metrics", "pitch", "--ref", p, "--syn", p]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "gpe=0 vde=0 ffe=0");
}

#[test]
fn mcd_reports_the_euclidean_distance() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&a, "0,0\n").unwrap();
    fs::write(&b, "3,4\n").unwrap();
    let out = tokendiff(&["metrics", "mcd", "--ref", a.to_str().unwrap(), "--syn", b.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "mcd=5");
}

#[test]
fn usage_errors_exit_two_and_domain_errors_exit_one() {
    assert_eq!(tokendiff(&["diffuse", "sample"]).status.code(), Some(2));
    assert_eq!(tokendiff(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(tokendiff(&["--help"]).status.code(), Some(0));
    let out = tokendiff(&["metrics", "mcd", "--ref", "/nonexistent/a.csv", "--syn", "/nonexistent/b.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn failed_commands_leave_no_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let features = dir.path().join("f.csv");
    // three distinct rows cannot support eight codes
    fs::write(&features, "1,2\n1,2\n3,4\n5,6\n").unwrap();
    let out_path = dir.path().join("codec.json");
    let out = tokendiff(&[
        "codec", "fit", "--features", features.to_str().unwrap(), "--kind", "VQ", "--Kp", "8", "--out", out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_path.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1, "stray temporary files left behind");
}

#[test]
fn codec_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    let rows: String = (0..40).map(|i| format!("{},{}\n", (i % 5) as f64, (i % 7) as f64 * 0.5)).collect();
    fs::write(p("f.csv"), rows).unwrap();
    for args in [
        vec!["codec", "fit", "--features", &p("f.csv"), "--kind", "RVQ", "--R", "2", "--Kp", "4", "--out", &p("c.json")],
        vec!["codec", "encode", "--codec", &p("c.json"), "--features", &p("f.csv"), "--out", &p("t.json")],
        vec!["codec", "decode", "--codec", &p("c.json"), "--tokens", &p("t.json"), "--out", &p("r.csv")],
    ] {
        let out = tokendiff(&args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let decoded = fs::read_to_string(p("r.csv")).unwrap();
    assert_eq!(decoded.lines().count(), 40);
}
