use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[grid]
points = 256

[solver]
k_max = 10
krylov = 20

[simulation]
t_end = 1.0
record_every = 10

[ensemble]
realizations = 6
sigmas = [0.1]
"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochwave"))
        .args(args)
        .current_dir(dir)
        .env_remove("STOCHWAVE_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn hash_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn wave_outputs_are_reproducible_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for out in ["a", "b"] {
        let o = run(&["wave", "--config", &cfg, "--out", out], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/wave.csv")).unwrap();
    let b = fs::read(dir.path().join("b/wave.csv")).unwrap();
    assert_eq!(a, b);
    let h = hash_line(&dir.path().join("a/wave.csv"));
    assert!(h.starts_with("# config_sha256 = "));
    assert_eq!(h, hash_line(&dir.path().join("a/config.toml")));
    let manifest = fs::read_to_string(dir.path().join("a/wave.toml")).unwrap();
    assert!(manifest.contains(h.trim_start_matches("# config_sha256 = ")));
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_a = write_config(dir.path(), "[model]\na = 1.5\n");
    assert_eq!(run(&["wave", "--config", &bad_a], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("typo.toml"), "[grid]\npoints_typo = 10\n").unwrap();
    assert_eq!(
        run(&["wave", "--config", "typo.toml"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["wave", "--config", "missing.toml"], dir.path()).status.code(),
        Some(2)
    );
    fs::write(dir.path().join("custom.toml"), "[model]\nname = \"custom\"\n").unwrap();
    assert_eq!(
        run(&["wave", "--config", "custom.toml"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn report_on_empty_directory_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = run(&["report", "empty"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(fs::read_dir(dir.path().join("empty")).unwrap().count(), 0);
}

#[test]
fn zero_noise_lab_frame_moves_at_c0() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("t_end = 1.0", "t_end = 5.0\nframe = \"lab\"");
    fs::write(&cfg, text).unwrap();
    let o = run(&["wave", "--config", &cfg, "--out", "w"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let o = run(
        &["simulate", "--config", &cfg, "--sigma", "0", "--out", "s"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let wave: toml::Table = toml::from_str(&fs::read_to_string(dir.path().join("w/wave.toml")).unwrap()).unwrap();
    let c0 = wave["c0"].as_float().unwrap();
    let sim = fs::read_to_string(dir.path().join("s/simulate.csv")).unwrap();
    let last = sim.lines().last().unwrap();
    let cols: Vec<f64> = last.split(',').map(|v| v.parse().unwrap()).collect();
    let (t, gamma) = (cols[0], cols[1]);
    assert!((t - 5.0).abs() < 1e-12);
    assert!((gamma - c0 * t).abs() < 1e-3, "{gamma} vs {}", c0 * t);
}

#[test]
fn ensemble_is_thread_count_invariant_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o1 = run(
        &["ensemble", "--config", &cfg, "--threads", "1", "--out", "one"],
        dir.path(),
    );
    assert_eq!(o1.status.code(), Some(0), "{}", String::from_utf8_lossy(&o1.stderr));
    let o4 = Command::new(env!("CARGO_BIN_EXE_stochwave"))
        .args(["ensemble", "--config", &cfg, "--out", "four"])
        .current_dir(dir.path())
        .env("STOCHWAVE_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(o4.status.code(), Some(0));
    let a = fs::read(dir.path().join("one/ensemble_0.csv")).unwrap();
    let b = fs::read(dir.path().join("four/ensemble_0.csv")).unwrap();
    assert_eq!(a, b);
    let r = run(&["report", "one"], dir.path());
    assert_eq!(r.status.code(), Some(0));
    assert!(dir.path().join("one/report.txt").exists());
    assert!(dir.path().join("one/fig_phase.csv").exists());
}

#[test]
fn seed_changes_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for (seed, out) in [("1", "s1"), ("2", "s2")] {
        let o = run(
            &["ensemble", "--config", &cfg, "--seed", seed, "--out", out],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
    }
    let a = fs::read_to_string(dir.path().join("s1/ensemble_0.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("s2/ensemble_0.csv")).unwrap();
    assert_ne!(a.lines().nth(1), None);
    assert_ne!(
        a.lines().skip(1).collect::<Vec<_>>(),
        b.lines().skip(1).collect::<Vec<_>>()
    );
}
