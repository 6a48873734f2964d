use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikemamba"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn energy_report_ann_total() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["energy-report", "--config", "130m", "--variant", "ann"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("energy_report.csv")).unwrap();
    assert!(csv.contains("498.6607"), "{csv}");
    let resolved = fs::read_to_string(d.path().join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("variant=ann"));
}

#[test]
fn energy_report_golden_comparison() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["energy-report", "--config", "1.3b", "--variant", "tilif", "--paper"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("4.7332"));
    let cmp = fs::read_to_string(d.path().join("energy_compare.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 7);
    assert!(cmp.lines().skip(1).all(|l| l.ends_with(",true")), "{cmp}");
}

#[test]
fn golden_flag_rejects_explicit_rates() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["energy-report", "--variant", "lif", "--paper", "--fr-in", "0.2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_fire_rate_is_validation_failure() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["energy-report", "--variant", "lif", "--fr-in", "1.5"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn run_config_layering_and_unknown_keys() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("run.cfg");
    fs::write(&cfg, "# energy\nvariant = tilif\nfr_in=0.25\nfr_out=0.05\nk=2\n").unwrap();
    let o = run(d.path(), &["energy-report", "--run-config", cfg.to_str().unwrap(), "--k", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(d.path().join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("variant=tilif\n"));
    assert!(resolved.contains("fr_in=0.25\n"));
    assert!(resolved.contains("k=4\n"));

    fs::write(&cfg, "varient=tilif\n").unwrap();
    let o = run(d.path(), &["energy-report", "--run-config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
}

#[test]
fn bad_precision_rejected() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(d.path(), &["gradcheck", "--precision", "f16"])), 1);
}

#[test]
fn verify_and_gradcheck_pass() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["verify-equivalence", "--instances", "300"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(fs::read_to_string(d.path().join("verify_equivalence.csv")).unwrap().contains("spike_equivalence,300,0"));
    let o = run(d.path(), &["gradcheck", "--probes", "20"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(fs::read_to_string(d.path().join("gradcheck.csv")).unwrap().lines().count(), 8);
}

#[test]
fn gen_corpus_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        assert_eq!(code(&run(d.path(), &["gen-corpus", "--lines", "50", "--seed", "3"])), 0);
        assert_eq!(code(&run(d.path(), &["gen-corpus", "--kind", "prefs", "--lines", "50", "--n", "10"])), 0);
    }
    for f in ["corpus.txt", "prefs.jsonl"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn missing_checkpoint_is_validation_failure() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(d.path(), &["eval-ppl"])), 1);
    assert_eq!(code(&run(d.path(), &["eval-ppl", "--ckpt", "/nonexistent.ckpt"])), 1);
}

fn teacher(dir: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train-teacher", "--steps", steps, "--lines", "300", "--seq-len", "32", "--batch", "4"];
    args.extend_from_slice(extra);
    run(dir, &args)
}

#[test]
fn training_pipeline_end_to_end() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    let o = teacher(p, "30", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = p.join("teacher.ckpt");
    let ck = ckpt.to_str().unwrap();
    assert!(fs::read_to_string(p.join("teacher_log.csv")).unwrap().starts_with("step,loss_ce,lr\n"));

    let o = run(p, &["eval-ppl", "--ckpt", ck, "--seq-len", "32", "--max-windows", "8"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("ppl "));

    let o = run(p, &["activation-hist", "--ckpt", ck, "--layer", "1", "--site", "u_t", "--bins", "10", "--seq-len", "32", "--max-windows", "4"]);
    assert_eq!(code(&o), 0);
    let hist = fs::read_to_string(p.join("activation_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 11);
    assert!(hist.starts_with("value_lo,value_hi,count\n"));
    assert_eq!(code(&run(p, &["activation-hist", "--ckpt", ck, "--layer", "5"])), 1);

    let o = run(p, &["clamp-ablation", "--ckpt", ck, "--mode", "max_to_one", "--seq-len", "32", "--max-windows", "4"]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(p.join("clamp_ablation.csv")).unwrap().contains("max_to_one,y_t,"));

    let o = run(
        p,
        &["distill", "--teacher", ck, "--steps", "4", "--pool-size", "4", "--seq-len", "24", "--batch", "2", "--lines", "300"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(p.join("distill_log.csv")).unwrap().lines().count(), 5);
    let student = p.join("student.ckpt");
    assert!(student.exists());
    // A spiking model cannot serve as the teacher.
    assert_eq!(code(&run(p, &["distill", "--teacher", student.to_str().unwrap(), "--steps", "1"])), 1);

    for method in ["dpo", "kto"] {
        let o = run(p, &["rl", "--method", method, "--policy", ck, "--steps", "3", "--batch", "2", "--max-len", "32", "--lines", "300"]);
        assert_eq!(code(&o), 0, "{method}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(fs::read_to_string(p.join("rl_log.csv")).unwrap().lines().count(), 4);
    }
    assert_eq!(code(&run(p, &["rl", "--method", "ppo", "--policy", ck])), 1);
}

#[test]
fn teacher_csv_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        assert_eq!(code(&teacher(d.path(), "5", &[])), 0);
    }
    for f in ["teacher_log.csv", "teacher.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn degenerate_corpus_ppl_near_one() {
    let d = TempDir::new().unwrap();
    let corpus = d.path().join("a.txt");
    fs::write(&corpus, format!("{}\n", "a".repeat(30)).repeat(200)).unwrap();
    let c = corpus.to_str().unwrap();
    let o = teacher(d.path(), "120", &["--corpus", c]);
    assert_eq!(code(&o), 0);
    let ck = d.path().join("teacher.ckpt");
    let o = run(d.path(), &["eval-ppl", "--ckpt", ck.to_str().unwrap(), "--corpus", c, "--seq-len", "32", "--max-windows", "16"]);
    let ppl: f64 = stdout(&o).trim().trim_start_matches("ppl ").parse().unwrap();
    assert!(ppl > 1.0 && ppl < 1.3, "{ppl}");
}
