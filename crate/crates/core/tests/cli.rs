use std::path::Path;
use std::process::{Command, Output};

use soarq::io::{read_packed, write_checkpoint, Dtype, Report, TensorRecord};
use soarq::synthetic::gaussian;

fn soarq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soarq"))
        .args(args)
        .env_remove("SOARQ_JOBS")
        .output()
        .expect("spawn soarq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut records = vec![
        TensorRecord {
            dtype: Dtype::F32,
            tensor: soarq::Tensor {
                shape: vec![4, 40],
                ..gaussian("layers.0.attn.weight", 160, 1)
            },
        },
        TensorRecord {
            dtype: Dtype::F32,
            tensor: gaussian("layers.0.mlp.weight", 96, 2),
        },
    ];
    for r in &mut records {
        for v in &mut r.tensor.values {
            *v = f64::from(*v as f32);
        }
    }
    let path = dir.join("model.safetensors");
    write_checkpoint(&path, &records).unwrap();
    path
}

#[test]
fn help_documents_exit_codes() {
    let o = soarq(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for line in ["quantize", "compare", "trace", "inspect", "2  invalid flags", "6  packed artifact"] {
        assert!(text.contains(line), "missing `{line}` in help:\n{text}");
    }
}

#[test]
fn quantize_then_inspect_recomputes_the_reported_mse() {
    let dir = tempfile::tempdir().unwrap();
    let (art, rep, tr) = (dir.path().join("a.soq"), dir.path().join("r.json"), dir.path().join("t.csv"));
    let o = soarq(&[
        "quantize", "--synthetic", "gaussian:8x64", "--synthetic", "laplace:300", "--seed", "5",
        "-o", p(&art), "--report", p(&rep), "--trace", p(&tr),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let report: Report = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    let names: Vec<_> = report.records.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["synthetic.0", "synthetic.1"]);
    assert_eq!(report.records[0].bytes, 512 / 2 + 512 / 16 + 4);

    let trace = std::fs::read_to_string(&tr).unwrap();
    assert!(trace.starts_with("tensor,iteration,loss_after_cjso,loss_after_dss,loss,rel_improvement,outcome\n"));
    let iters: usize = report.records.iter().map(|r| r.iterations).sum();
    assert_eq!(trace.lines().count(), 1 + iters);

    let o = soarq(&["inspect", p(&art), "--synthetic", "gaussian:8x64", "--synthetic", "laplace:300", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mses: Vec<f64> = stdout(&o)
        .lines()
        .filter_map(|l| l.trim().strip_prefix("mse="))
        .map(|v| v.parse().unwrap())
        .collect();
    let expected: Vec<f64> = report.records.iter().map(|r| r.mse).collect();
    assert_eq!(mses, expected);
    assert!(stdout(&o).contains("bytes=292 codes=256 scales=32 global=4"));
}

#[test]
fn compare_mxfp4_emits_only_supported_methods() {
    let o = soarq(&["compare", "--synthetic", "uniform:256", "--format", "mxfp4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let methods: Vec<&str> = out
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(methods, ["baseline", "dss"]);
    let err = stderr(&o);
    assert!(err.contains("skipping cjso") && err.contains("skipping soar"), "{err}");
}

#[test]
fn compare_nvfp4_lists_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let rep = dir.path().join("cmp.json");
    let o = soarq(&["compare", "--synthetic", "gaussian:1024", "--report", p(&rep)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Report = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    let methods: Vec<_> = report.records.iter().map(|r| r.method.name()).collect();
    assert_eq!(methods, ["baseline", "cjso", "dss", "soar"]);
    assert!(report.records[3].mse <= report.records[0].mse);
}

#[test]
fn filter_selects_checkpoint_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let art = dir.path().join("m.soq");
    let o = soarq(&["quantize", p(&ckpt), "--filter", "*.mlp.*", "--method", "baseline", "-o", p(&art)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let back = read_packed(&art).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].name, "layers.0.mlp.weight");

    let o = soarq(&["inspect", p(&art), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("mse="));
}

#[test]
fn trace_writes_requested_method() {
    let dir = tempfile::tempdir().unwrap();
    let tr = dir.path().join("t.csv");
    let o = soarq(&["trace", "--synthetic", "gaussian:512", "--method", "cjso", "--trace", p(&tr)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&tr).unwrap();
    let first = text.lines().nth(1).unwrap();
    // cjso rows have no search-phase loss
    assert!(first.starts_with("synthetic.0,1,") && first.split(',').nth(3) == Some(""), "{first}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.soq");

    let o = soarq(&["quantize", "--synthetic", "gaussian:64", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = soarq(&["quantize", "--synthetic", "gaussian:64", "--format", "mxfp4", "--method", "soar", "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = soarq(&["trace", "--synthetic", "gaussian:64", "--method", "dss", "--trace", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = soarq(&["quantize", "--synthetic", "gaussian:64", "--grid-step", "0", "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let missing = dir.path().join("missing.safetensors");
    let o = soarq(&["quantize", p(&missing), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"\x05\x00\x00\x00\x00\x00\x00\x00{oops").unwrap();
    let o = soarq(&["quantize", p(&junk), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("at byte"), "{}", stderr(&o));

    let unwritable = dir.path().join("no/such/dir/x.soq");
    let o = soarq(&["quantize", "--synthetic", "gaussian:64", "-o", p(&unwritable)]);
    assert_eq!(o.status.code(), Some(5));

    let o = soarq(&["quantize", "--synthetic", "gaussian:64", "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let mut bytes = std::fs::read(&out).unwrap();
    let last = bytes.len() - 5;
    bytes[last] ^= 0x40;
    std::fs::write(&out, &bytes).unwrap();
    let o = soarq(&["inspect", p(&out)]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    let o = soarq(&["inspect", p(&missing)]);
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn skipped_dtypes_warn_but_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let header = br#"{"ids":{"dtype":"I32","shape":[2],"data_offsets":[0,8]},"w":{"dtype":"F32","shape":[2],"data_offsets":[8,16]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(&[0; 8]);
    bytes.extend_from_slice(&1.0f32.to_le_bytes());
    bytes.extend_from_slice(&(-0.5f32).to_le_bytes());
    let ckpt = dir.path().join("mixed.safetensors");
    std::fs::write(&ckpt, bytes).unwrap();
    let out = dir.path().join("mixed.soq");
    let o = soarq(&["quantize", p(&ckpt), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipping `ids`"), "{}", stderr(&o));
    assert_eq!(read_packed(&out).unwrap().len(), 1);
}

fn exact_checkpoint(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exact.safetensors");
    let tensor = soarq::synthetic::exact_grid(soarq::Format::Nvfp4, 8);
    write_checkpoint(&path, &[TensorRecord { dtype: Dtype::F32, tensor }]).unwrap();
    path
}

#[test]
fn exact_fixture_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = exact_checkpoint(dir.path());
    let art = dir.path().join("e.soq");
    let o = soarq(&["quantize", p(&ckpt), "--method", "baseline", "-o", p(&art)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // report defaults to the artifact path with a .json extension
    let report: Report = serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
    assert!(report.records.iter().all(|r| r.mse == 0.0));

    let rep = dir.path().join("cmp.json");
    let o = soarq(&["compare", p(&ckpt), "--report", p(&rep)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Report = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(report.records.len(), 4);
    assert!(report.records.iter().all(|r| r.mse == 0.0));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.soq", "b.soq"] {
        let path = dir.path().join(name);
        let o = soarq(&["quantize", "--synthetic", "gaussian:4096", "--seed", "7", "-o", p(&path)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

fn trace_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn trace_examples() {
    let dir = tempfile::tempdir().unwrap();
    let (soar, cjso, fixed) = (dir.path().join("s.csv"), dir.path().join("c.csv"), dir.path().join("f.csv"));
    let src = ["--synthetic", "gaussian:2048", "--synthetic", "laplace:32x32", "--seed", "3"];
    for (method, path) in [("soar", &soar), ("cjso", &cjso)] {
        let mut args = vec!["trace", "--method", method, "--trace", p(path)];
        args.extend(src);
        assert_eq!(soarq(&args).status.code(), Some(0));
    }
    let mut args = vec!["trace", "--tol", "0", "--iters", "5", "--trace", p(&fixed)];
    args.extend(src);
    assert_eq!(soarq(&args).status.code(), Some(0));

    let fixed = trace_rows(&fixed);
    for name in ["synthetic.0", "synthetic.1"] {
        assert_eq!(fixed.iter().filter(|r| r[0] == name).count(), 5);
    }

    let (soar, cjso) = (trace_rows(&soar), trace_rows(&cjso));
    for name in ["synthetic.0", "synthetic.1"] {
        let losses = |rows: &[Vec<String>]| -> Vec<f64> {
            rows.iter().filter(|r| r[0] == name).map(|r| r[4].parse().unwrap()).collect()
        };
        let s = losses(&soar);
        assert!(s.windows(2).all(|w| w[1] <= w[0]), "{name}: {s:?}");
        assert!(s.last() <= losses(&cjso).last());
    }
}

#[test]
fn inspect_examples() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("k.soq");
    let o = soarq(&["quantize", "--synthetic", "gaussian:1024", "-o", p(&art)]);
    assert_eq!(o.status.code(), Some(0));
    let o = soarq(&["inspect", p(&art)]);
    assert!(stdout(&o).contains("bytes=580 codes=512 scales=64 global=4"), "{}", stdout(&o));

    let empty = dir.path().join("empty.soq");
    soarq::io::write_packed(&empty, &[]).unwrap();
    let o = soarq(&["inspect", p(&empty)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 tensor(s)"), "{}", stdout(&o));
}
