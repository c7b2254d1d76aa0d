use std::fs;
use std::path::Path;

use deltakv::cli::run;

fn argv(out: &Path, rest: &[&str]) -> Vec<String> {
    let mut v = vec!["deltakv".to_string(), "--output-dir".into(), out.display().to_string()];
    v.extend(rest.iter().map(|s| s.to_string()));
    v
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_gives_identical_outputs() {
    for cmd in [&["analyze", "--tokens", "24"][..], &["generate", "--prompt-len", "12", "--new-tokens", "6"], &["audit", "--tokens", "40"]] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            let mut args = argv(d.path(), &["--seed", "11"]);
            args.extend(cmd.iter().map(|s| s.to_string()));
            assert_eq!(run(args), 0, "{cmd:?}");
        }
        let (oa, ob) = (outputs(a.path()), outputs(b.path()));
        assert!(!oa.is_empty());
        assert_eq!(oa, ob, "{cmd:?}");
    }
}

#[test]
fn manifest_records_seed_and_hashes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, "{}").unwrap();
    let cfg = cfg.display().to_string();
    assert_eq!(run(argv(d.path(), &["--config", &cfg, "ratios", "--l-full", "4", "--l-total", "32"])), 0);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "ratios");
    assert_eq!(m["seed_source"], "generated");
    // sha256 of "{}"
    assert_eq!(m["input_sha256"][&cfg], "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a");
    let r: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("ratios.json")).unwrap()).unwrap();
    assert!((r["kr"].as_f64().unwrap() - 0.43125).abs() < 1e-12);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(argv(d.path(), &["frobnicate"])), 1);
    assert_eq!(run(argv(d.path(), &["--set", "engine.controller.budget=2", "generate"])), 1);
    assert_eq!(run(argv(d.path(), &["--config", "/nonexistent/cfg.json", "audit"])), 1);
    assert_eq!(run(argv(d.path(), &["ratios", "--l-full", "9", "--l-total", "4"])), 2);
}
