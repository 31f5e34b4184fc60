use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use unida::fdt::read_tensor;
use unida::schedule::build_schedule;

const BIN: &str = env!("CARGO_BIN_EXE_unida");

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("UNIDA_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(cmd: &str, config: &Path, out: &Path) {
    let o = run(cmd, config, out, &[]);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    let line: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["command"], cmd);
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn ssm_config(method: &str) -> Value {
    json!({
        "seed": 11,
        "dataset": {
            "kind": "ssm",
            "frames": 12,
            "model": {
                "a": [[0.9, 0.2], [-0.1, 0.8]],
                "q": [[0.1, 0.02], [0.02, 0.05]],
                "h": [[1.0, 0.5]],
                "r": [[0.09]],
                "mu0": [0.5, -0.3],
                "p0": [[1.0, 0.3], [0.3, 0.5]]
            }
        },
        "observe": { "operator": { "kind": "linear" }, "sigma_y": 0.3 },
        "method": { "kind": method },
        "evaluate": { "csi_thresholds": [0.0, 0.4] }
    })
}

fn pipeline(config: &Path, out: &Path) {
    for cmd in ["generate", "observe", "assimilate", "evaluate"] {
        ok(cmd, config, out);
    }
}

/// Mean of frame `k` given the first `seen(k)` observations, from the stacked joint Gaussian.
fn dense_means(cfg: &Value, ys: &[f64], seen: impl Fn(usize) -> usize) -> Vec<Vec<f64>> {
    let m = &cfg["dataset"]["model"];
    let mat = |v: &Value| {
        let rows: Vec<Vec<f64>> = serde_json::from_value(v.clone()).unwrap();
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    };
    let (a, q, h, p0) = (mat(&m["a"]), mat(&m["q"]), mat(&m["h"]), mat(&m["p0"]));
    let mu0: Vec<f64> = serde_json::from_value(m["mu0"].clone()).unwrap();
    let r2 = cfg["observe"]["sigma_y"].as_f64().unwrap().powi(2);
    let d = a.nrows();
    let n = ys.len();

    let mut means = vec![DVector::from_vec(mu0)];
    let mut covs = vec![p0];
    for k in 1..n {
        means.push(&a * &means[k - 1]);
        covs.push(&a * &covs[k - 1] * a.transpose() + &q);
    }
    let mut joint = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for j in 0..=i {
            let block = a.pow((i - j) as u32) * &covs[j];
            joint.view_mut((i * d, j * d), (d, d)).copy_from(&block);
            joint.view_mut((j * d, i * d), (d, d)).copy_from(&block.transpose());
        }
    }
    (0..n)
        .map(|k| {
            let s = seen(k);
            let mut hb = DMatrix::zeros(s, s * d);
            for j in 0..s {
                hb.view_mut((j, j * d), (1, d)).copy_from(&h);
            }
            let cxx = joint.view((0, 0), (s * d, s * d)).into_owned();
            let prior = DVector::from_iterator(s * d, means[..s].iter().flat_map(|m| m.iter().copied()));
            let innov = DVector::from_column_slice(&ys[..s]) - &hb * &prior;
            let gram = &hb * &cxx * hb.transpose() + DMatrix::identity(s, s) * r2;
            let gain = gram.lu().solve(&innov).unwrap();
            let post = prior + &cxx * hb.transpose() * gain;
            post.rows(k * d, d).iter().copied().collect()
        })
        .collect()
}

#[test]
fn ssm_pipeline_matches_dense_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ssm_config("kf");
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    let t0 = Instant::now();
    pipeline(&config, &out);
    assert!(t0.elapsed().as_secs_f64() < 10.0);

    let obs = read_tensor(out.join("obs/obs.fdt")).unwrap();
    assert_eq!(obs.dims(), [12, 1]);
    let expect = dense_means(&cfg, obs.data(), |k| k + 1);
    let analysis = read_tensor(out.join("assim/analysis.fdt")).unwrap();
    let truth = read_tensor(out.join("data/traj_0000.fdt")).unwrap();
    assert_eq!(analysis.dims(), truth.dims());
    for (k, e) in expect.iter().enumerate() {
        for (i, v) in e.iter().enumerate() {
            let got = analysis.data()[k * 2 + i];
            assert!((got - v).abs() < 1e-9, "frame {k} dim {i}: {got} vs {v}");
        }
    }
    let csv = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains(",nrmse,")));
}

#[test]
fn smoother_matches_dense_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ssm_config("rts");
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    pipeline(&config, &out);
    let obs = read_tensor(out.join("obs/obs.fdt")).unwrap();
    let n = obs.dims()[0];
    let expect = dense_means(&cfg, obs.data(), |_| n);
    let analysis = read_tensor(out.join("assim/analysis.fdt")).unwrap();
    let got = analysis.data().chunks(2);
    for (k, (e, g)) in expect.iter().zip(got).enumerate() {
        assert!(e.iter().zip(g).all(|(a, b)| (a - b).abs() < 1e-9), "frame {k}: {g:?} vs {e:?}");
    }
}

#[test]
fn evaluate_identity_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &ssm_config("kf"));
    let out = dir.path().join("run");
    ok("generate", &config, &out);
    fs::create_dir_all(out.join("assim")).unwrap();
    fs::copy(out.join("data/traj_0000.fdt"), out.join("assim/analysis.fdt")).unwrap();
    ok("evaluate", &config, &out);
    let csv = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let v: f64 = f[4].parse().unwrap();
        seen.insert(f[2].to_string());
        match f[2] {
            "nrmse" | "rmse" | "bias" => assert_eq!(v, 0.0, "{line}"),
            "acc" | "csi" => assert!((v - 1.0).abs() < 1e-12, "{line}"),
            other => panic!("unexpected metric {other}"),
        }
    }
    for m in ["nrmse", "rmse", "bias", "acc", "csi"] {
        assert!(seen.contains(m), "missing {m}");
    }
}

#[test]
fn schedule_dump_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &json!({ "schedule": { "frames": 3, "steps": 4, "u": 2 } }));
    let out = dir.path().join("run");
    ok("schedule-dump", &config, &out);
    let csv = fs::read_to_string(out.join("schedule.csv")).unwrap();
    let rows: Vec<Vec<usize>> =
        csv.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let lib = build_schedule(3, 4, 2).unwrap();
    assert_eq!(rows.len(), 3);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 9);
        assert_eq!(row.as_slice(), lib.row(k));
    }
    assert_eq!(rows[0], vec![4, 3, 2, 1, 0, 0, 0, 0, 0]);
    assert_eq!(rows[2], vec![4, 4, 4, 4, 4, 3, 2, 1, 0]);
}

fn digest(p: &Path) -> String {
    Sha256::digest(fs::read(p).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn data_files(root: &Path) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for dir in ["data", "obs", "assim", "eval"] {
        for e in fs::read_dir(root.join(dir)).unwrap() {
            v.push(e.unwrap().path().strip_prefix(root).unwrap().to_path_buf());
        }
    }
    v.sort();
    v
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ssm_config("enkf");
    cfg["method"] = json!({ "kind": "enkf", "members": 40, "inflation": 1.05 });
    let config = write_config(dir.path(), &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&config, &a);
    pipeline(&config, &b);
    let files = data_files(&a);
    assert!(files.len() >= 7);
    assert_eq!(files, data_files(&b));
    for f in files {
        assert_eq!(digest(&a.join(&f)), digest(&b.join(&f)), "{}", f.display());
    }
}

#[test]
fn seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &ssm_config("kf"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok("generate", &config, &a);
    let o = run("generate", &config, &b, &["--seed", "12"]);
    assert!(o.status.success());
    assert_ne!(digest(&a.join("data/traj_0000.fdt")), digest(&b.join("data/traj_0000.fdt")));
}

#[test]
fn manifests_list_every_output_with_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &ssm_config("rts"));
    let out = dir.path().join("run");
    pipeline(&config, &out);
    let mut listed = std::collections::BTreeSet::new();
    for cmd in ["generate", "observe", "assimilate", "evaluate"] {
        let m: Value = serde_json::from_str(&fs::read_to_string(out.join(format!("manifests/{cmd}.json"))).unwrap()).unwrap();
        assert_eq!(m["command"], cmd);
        assert_eq!(m["seed"], 11);
        assert_eq!(m["threads"], 2);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert!(m["toolkit_version"].is_string());
        assert!(m["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
        for entry in m["inputs"].as_array().unwrap().iter().chain(m["outputs"].as_array().unwrap()) {
            let p = out.join(entry["path"].as_str().unwrap());
            assert_eq!(entry["sha256"].as_str().unwrap(), digest(&p), "{}", p.display());
            assert_eq!(entry["bytes"].as_u64().unwrap(), fs::metadata(&p).unwrap().len());
        }
        for entry in m["outputs"].as_array().unwrap() {
            listed.insert(PathBuf::from(entry["path"].as_str().unwrap()));
        }
    }
    for f in data_files(&out) {
        assert!(listed.contains(&f), "{} not in any manifest", f.display());
    }
    assert!(!out.join("manifests").read_dir().unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "tmp")));
}

#[test]
fn config_hash_ignores_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), &json!({ "schedule": { "frames": 3, "steps": 4, "u": 2 }, "seed": 1 }));
    let b = dir.path().join("b.json");
    fs::write(&b, r#"{"seed": 1, "schedule": {"u": 2, "steps": 4, "frames": 3}}"#).unwrap();
    ok("schedule-dump", &a, &dir.path().join("ra"));
    ok("schedule-dump", &b, &dir.path().join("rb"));
    let hash = |r: &str| {
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join(r).join("manifests/schedule-dump.json")).unwrap()).unwrap();
        m["config_hash"].clone()
    };
    assert_eq!(hash("ra"), hash("rb"));
}

fn error_of(o: &Output) -> Value {
    assert!(!o.status.success());
    let v: Value = serde_json::from_slice(&o.stderr).expect("stderr is JSON");
    assert!(v["error"]["kind"].is_string());
    v["error"]["message"].as_str().unwrap().to_string().into()
}

#[test]
fn unknown_key_is_named_in_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &json!({ "schedule": { "frames": 3, "steps": 4, "uu": 2 } }));
    let o = run("schedule-dump", &config, &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let msg = error_of(&o);
    assert!(msg.as_str().unwrap().contains("uu"), "{msg}");
}

#[test]
fn incompatible_method_names_both_sides() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ssm_config("var3d");
    cfg["method"] = json!({ "kind": "var3d", "cvt": { "sigma_b": 1.0, "length_scales": [2.0] } });
    let config = write_config(dir.path(), &cfg);
    let o = run("assimilate", &config, &dir.path().join("run"), &[]);
    let msg = error_of(&o).as_str().unwrap().to_string();
    assert!(msg.contains("var3d") && msg.contains("linear"), "{msg}");
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &ssm_config("kf"));
    let o = run("assimilate", &config, &dir.path().join("run"), &[]);
    let msg = error_of(&o);
    assert!(msg.as_str().unwrap().contains("traj_0000.fdt") || msg.as_str().unwrap().contains("obs"), "{msg}");
}
