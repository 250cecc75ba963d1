use defgen::transcript::Transcript;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn defgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defgen")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const MINIMAL: &str = r#"
version = 1
rounds = 50
seed = 7
timing = false

[scenario]
kind = "iid"
d = 2
"#;

#[test]
fn run_writes_transcript_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", MINIMAL);
    let out = dir.path().join("out");
    let o = defgen(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let t = Transcript::load(&out.join("transcript.ndjson")).unwrap();
    assert_eq!(t.records.len(), 50);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("scenario,T,d,kernel,family,max_oigap,bound,ratio,max_residual,seconds_per_round"));
    assert_eq!(report.lines().count(), 4);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", MINIMAL);
    let read = |sub: &str| {
        let out = dir.path().join(sub);
        assert_eq!(defgen(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(0));
        (fs::read(out.join("transcript.ndjson")).unwrap(), fs::read(out.join("report.csv")).unwrap())
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", MINIMAL);
    let run = |sub: &str, extra: &[&str]| {
        let out = dir.path().join(sub);
        let mut args = vec!["run", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(defgen(&args).status.code(), Some(0));
        fs::read(out.join("transcript.ndjson")).unwrap()
    };
    let a = run("a", &[]);
    assert_eq!(a, run("b", &["--seed", "7"]));
    assert_ne!(a, run("c", &["--seed", "8"]));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("zero.toml", &MINIMAL.replace("rounds = 50", "rounds = 0")),
        ("unknown.toml", &MINIMAL.replace("seed = 7", "seed = 7\nspeed = 1")),
        ("version.toml", &MINIMAL.replace("version = 1", "version = 9")),
        ("syntax.toml", &"version = ".to_string()),
    ] {
        let cfg = write(dir.path(), name, text);
        let o = defgen(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    let o = defgen(&["run", "--config", "/nonexistent/c.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = defgen(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lds_with_one_hot_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = "version = 1\nrounds = 10\nmap = \"one_hot\"\n\n[scenario]\nkind = \"lds\"\nd = 2\nlag = 3\n";
    let cfg = write(dir.path(), "c.toml", text);
    let o = defgen(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("one_hot") || String::from_utf8_lossy(&o.stderr).contains("OneHot"));
}

#[test]
fn verify_passes_on_run_output_and_catches_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("[scenario]", "[kernel]\nkind = \"affine_pair\"\n\n[scenario]");
    let cfg = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("out");
    assert_eq!(defgen(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let path = out.join("transcript.ndjson");
    let o = defgen(&["verify", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("pass"));

    let mut t = Transcript::load(&path).unwrap();
    t.records[16].weights[0] = 2.0;
    let bad = dir.path().join("bad.ndjson");
    t.save(&bad).unwrap();
    let o = defgen(&["verify", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("round 17"), "{stdout}");
}

#[test]
fn verify_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.ndjson", "");
    assert_eq!(defgen(&["verify", &empty]).status.code(), Some(0));
    let junk = write(dir.path(), "junk.ndjson", "{not json\n");
    assert_eq!(defgen(&["verify", &junk]).status.code(), Some(2));
    assert_eq!(defgen(&["verify", "/nonexistent/t.ndjson"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_rate_with_slope() {
    let dir = tempfile::tempdir().unwrap();
    let text = "version = 1\nrounds = 1\nseed = 3\n\n[scenario]\nkind = \"adversarial_flip\"\n";
    let cfg = write(dir.path(), "c.toml", text);
    let out = dir.path().join("sweep");
    let o = defgen(&["--threads", "2", "sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--t", "20,40,80"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rd = csv::Reader::from_path(out.join("rate.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["T", "error", "slope"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let slope: f64 = rows[0][2].parse().unwrap();
    assert!(slope.is_finite());
    assert!(String::from_utf8_lossy(&o.stdout).contains("slope="));
    let o = defgen(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--t", "100"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_rebuilds_from_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", MINIMAL);
    let out = dir.path().join("out");
    assert_eq!(defgen(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let o = defgen(&["report", out.join("transcript.ndjson").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(o.stdout, fs::read(out.join("report.csv")).unwrap());
}
