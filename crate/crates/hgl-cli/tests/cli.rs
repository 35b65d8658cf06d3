use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use hgl_core::Snapshot;

fn hgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgl")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.in.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_with(dir: &TempDir, sub: &str, cfg: &str, out: &str, extra: &[&str]) -> (Output, PathBuf) {
    let c = write_config(dir.path(), cfg);
    let o = dir.path().join(out);
    let mut args = vec!["run", sub, "--config", c.to_str().unwrap(), "--out", o.to_str().unwrap()];
    args.extend_from_slice(extra);
    (hgl(&args), o)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const TINY_FLUCTUATE: &str = "schema = 1
[fluctuate]
with_sigma = false
with_kappa = false
with_moments = false
[fluctuate.mc]
eps = [0.25, 0.2]
n_samples = 12
";

#[test]
fn fluctuate_is_deterministic_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let (a, da) = run_with(&dir, "fluctuate", TINY_FLUCTUATE, "a", &["--seed", "5", "--threads", "1"]);
    let (b, db) = run_with(&dir, "fluctuate", TINY_FLUCTUATE, "b", &["--seed", "5", "--threads", "2"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(b.status.success());
    for f in ["samples.csv", "fluctuation.csv"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
    let ma: Value = serde_json::from_str(&std::fs::read_to_string(da.join("manifest.json")).unwrap()).unwrap();
    let mb: Value = serde_json::from_str(&std::fs::read_to_string(db.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["seeds"], mb["seeds"]);
    for f in ma["files"].as_array().unwrap() {
        assert!(da.join(f.as_str().unwrap()).exists(), "{f}");
    }
    let (c, dc) = run_with(&dir, "fluctuate", TINY_FLUCTUATE, "c", &["--seed", "6"]);
    assert!(c.status.success());
    assert_ne!(std::fs::read(da.join("samples.csv")).unwrap(), std::fs::read(dc.join("samples.csv")).unwrap());
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let (a, da) = run_with(&dir, "fluctuate", TINY_FLUCTUATE, "a", &["--seed", "8"]);
    assert!(a.status.success());
    let eff = da.join("config.toml");
    let b = hgl(&["run", "fluctuate", "--config", eff.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]);
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(std::fs::read(da.join("samples.csv")).unwrap(), std::fs::read(dir.path().join("b/samples.csv")).unwrap());
}

#[test]
fn constant_law_corrector_is_trivial() {
    let dir = TempDir::new().unwrap();
    let cfg = "schema = 1\nlaw = \"constant(1.5)\"\n[geometry]\nd = 3\nl = 6\n[corrector]\nn_env = 2\n";
    let (o, d) = run_with(&dir, "corrector", cfg, "c", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&d);
    let mean = &r["data"]["a_hom"]["mean"];
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.5 } else { 0.0 };
            assert!((mean[i][j].as_f64().unwrap() - want).abs() < 1e-14);
        }
    }
    for env in r["data"]["environments"].as_array().unwrap() {
        assert_eq!(env["max_abs_sigma"].as_f64().unwrap(), 0.0);
        assert_eq!(env["max_abs_phi"].as_f64().unwrap(), 0.0);
    }
    let (_, set) = Snapshot::load(&d.join("corrector_1.hgl")).unwrap().to_corrector().unwrap();
    assert_eq!(set.a_hom[0][0], mean[0][0].as_f64().unwrap());
}

#[test]
fn verify_bounds_default_sweep_passes() {
    let dir = TempDir::new().unwrap();
    let (o, d) = run_with(&dir, "verify-bounds", "schema = 1\n", "b", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(d.join("bounds.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(text.lines().any(|l| l.starts_with("SG,")));
}

#[test]
fn sample_env_snapshots_round_trip() {
    let dir = TempDir::new().unwrap();
    let (o, d) = run_with(&dir, "sample-env", "schema = 1\nseed = 3\n[geometry]\nd = 2\nl = 5\nbc = \"dirichlet-zero\"\n[sample_env]\ncount = 3\n", "s", &[]);
    assert!(o.status.success());
    let env = Snapshot::load(&d.join("env_2.hgl")).unwrap().to_environment().unwrap();
    assert_eq!(env.geometry().shape(), &[5, 5]);
    assert!(!env.geometry().is_periodic());
    assert_eq!(std::fs::read_to_string(d.join("environments.csv")).unwrap().lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let (o, _) = run_with(&dir, "solve", "schema = 2\n", "x", &[]);
    assert_eq!(o.status.code(), Some(2));
    let (o, _) = run_with(&dir, "solve", "schema = 1\n[solve]\nlamda = 1.0\n", "x", &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = hgl(&["run", "no-such-thing"]);
    assert_eq!(o.status.code(), Some(2));

    let (o, d) = run_with(&dir, "solve", "schema = 1\n[geometry]\nl = 12\nbc = \"dirichlet-zero\"\n[solver]\nrel_tol = 1e-14\nmax_iter = 2\n", "fail", &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(report(&d)["status"], "solver-failure");
    assert!(d.join("manifest.json").exists());

    let (o, d) = run_with(&dir, "corrector", "schema = 1\n[geometry]\nl = 6\n[corrector]\ncheck_tol = 0.0\nsnapshots = false\n", "inv", &[]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(report(&d)["status"], "invariant-violation");
    assert!(d.join("a_hom.csv").exists());
}

#[test]
fn solve_writes_green_function() {
    let dir = TempDir::new().unwrap();
    let (o, d) = run_with(&dir, "solve", "schema = 1\n[geometry]\nd = 3\nl = 7\nbc = \"dirichlet-zero\"\n", "g", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&d);
    assert!(r["data"]["value_at_source"].as_f64().unwrap() > 0.0);
    assert_eq!(std::fs::read_to_string(d.join("green.csv")).unwrap().lines().count(), 1 + 343);
}

#[test]
fn plotdata_series() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "{}").unwrap();
    let o = hgl(&["plotdata", empty.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "eps,rescaled_variance,se\n");

    let (o, d) = run_with(&dir, "fluctuate", TINY_FLUCTUATE, "f", &[]);
    assert!(o.status.success());
    let o = hgl(&["plotdata", d.join("report.json").to_str().unwrap()]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("0.25,"));

    let cfg = "schema = 1\n[residual]\nl = 8\nn_env = 2\nradii = [3, 1, 2]\n";
    let (o, d) = run_with(&dir, "residual", cfg, "r", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("r.csv");
    let o = hgl(&["plotdata", d.join("report.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let radii: Vec<String> = std::fs::read_to_string(&out).unwrap().lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(radii, ["1", "2", "3"]);

    let o = hgl(&["plotdata", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kernel_from_saved_tensor() {
    let dir = TempDir::new().unwrap();
    let (o, d) = run_with(&dir, "estimate-k", "schema = 1\n[estimate_k]\nl = 6\nn_env = 4\nn_ou = 1\n", "k", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(d.join("kernel.csv")).unwrap().lines().count(), 1 + 81);
    let cfg = format!(
        "schema = 1\n[kernel]\nk_report = \"{}\"\n[kernel.quadrature]\nh = 0.125\nhalf_width = 1.5\n",
        d.join("report.json").display()
    );
    let (o, d2) = run_with(&dir, "kernel", &cfg, "q", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&d2);
    assert!(r["data"]["sigma_g2"]["sigma2"].as_f64().unwrap() > 0.0);
}
