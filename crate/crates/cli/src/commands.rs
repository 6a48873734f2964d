//! Subcommand bodies. Each one takes a resolved [`RunConfig`], writes its
//! artifacts under `out` and reports whether its checks held.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use spikemamba_core::corpus::{load_text, synthetic_corpus, token_stream};
use spikemamba_core::energy::{golden_base, report_with_ratio, to_csv, to_text_table, EnergyConstants, ModelShape, Variant};
use spikemamba_core::eval::{collect_activations, eval_ppl, histogram, histogram_csv};
use spikemamba_core::mamba2::{checkpoint, default_sgc_layers, ClampMode, Mamba2Config, ModelParams, Site};
use spikemamba_core::neurons::{NeuronConfig, NeuronKind};
use spikemamba_core::numerics::Scalar;
use spikemamba_core::training::{
    build_pool, distill_run, parse_preferences, rl_run, synthetic_preferences, train_teacher, DistillConfig, DistillRow,
    PreferenceRecord, RlConfig, RlMethod, RlRow, TeacherConfig, TeacherRow,
};
use spikemamba_core::{gradcheck, verify};

use crate::run_config::RunConfig;

/// Whether every check a command ran held.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    Failed,
}

macro_rules! with_precision {
    ($rc:expr, $t:ident => $body:expr) => {
        match $rc.raw("precision") {
            "f64" => {
                type $t = f64;
                $body
            }
            _ => {
                type $t = f32;
                $body
            }
        }
    };
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn csv<R>(header: &str, rows: &[R], line: impl Fn(&R) -> String) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

/// Training text: the file in `corpus`, or a synthetic corpus of `lines` lines.
fn training_text(rc: &RunConfig) -> Result<String> {
    match rc.opt::<String>("corpus")? {
        Some(p) => Ok(load_text(Path::new(&p))?),
        None => Ok(synthetic_corpus(rc.get("seed")?, rc.get("lines")?)),
    }
}

/// Held-out text: the file in `corpus`, or 400 synthetic lines from the next seed.
fn eval_text(rc: &RunConfig) -> Result<String> {
    match rc.opt::<String>("corpus")? {
        Some(p) => Ok(load_text(Path::new(&p))?),
        None => Ok(synthetic_corpus(rc.get::<u64>("seed")? + 1, 400)),
    }
}

fn required(rc: &RunConfig, key: &str) -> Result<PathBuf> {
    match rc.opt::<String>(key)? {
        Some(p) => Ok(PathBuf::from(p)),
        None => bail!("--{} is required", key.replace('_', "-")),
    }
}

pub fn verify_equivalence(rc: &RunConfig) -> Result<Outcome> {
    let dir = rc.out_dir();
    let eq = verify::spike_equivalence(rc.get("instances")?, rc.get("seed")?)?;
    let rt = verify::neuron_round_trip()?;
    let sg = verify::surrogate_boundaries()?;
    let mut report = String::from("check,cases,failures,max_f32_err,pass\n");
    let line = |name: &str, cases: usize, fails: usize, err: String, ok: bool| {
        println!("{:<20} {cases:>6} cases  {fails} failures  {}", name, if ok { "PASS" } else { "FAIL" });
        format!("{name},{cases},{fails},{err},{ok}\n")
    };
    report += &line(
        "spike_equivalence",
        eq.instances,
        eq.exact_mismatches,
        format!("{:.3e}", eq.max_f32_err),
        eq.passed(),
    );
    report += &line("neuron_round_trip", rt.cases, rt.failures.len(), String::new(), rt.failures.is_empty());
    report += &line("surrogate_window", 32, sg.len(), String::new(), sg.is_empty());
    write(&dir, "verify_equivalence.csv", &report)?;
    let ok = eq.passed() && rt.failures.is_empty() && sg.is_empty();
    Ok(if ok { Outcome::Passed } else { Outcome::Failed })
}

pub fn gradcheck(rc: &RunConfig) -> Result<Outcome> {
    let results = gradcheck::run_all(rc.get("probes")?, rc.get("seed")?)?;
    let mut report = String::from("check,probes,max_rel_err,pass\n");
    for r in &results {
        println!(
            "{:<20} {:>4} probes  max rel err {:.3e}  {}",
            r.name,
            r.probes,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
        writeln!(report, "{},{},{:.6e},{}", r.name, r.probes, r.max_rel_err, r.passed)?;
    }
    write(&rc.out_dir(), "gradcheck.csv", &report)?;
    let ok = results.iter().all(|r| r.passed);
    Ok(if ok { Outcome::Passed } else { Outcome::Failed })
}

const ENERGY_TOLERANCE: f64 = 5e-3;

pub fn energy_report(rc: &RunConfig) -> Result<Outcome> {
    let shape = ModelShape::preset(rc.raw("config"))?;
    let variant: Variant = rc.get("variant")?;
    let consts = EnergyConstants::default();
    let paper: bool = rc.get("paper")?;
    let (fr_in, fr_out, k, golden) = if paper {
        if !rc.raw("fr_in").is_empty() || !rc.raw("fr_out").is_empty() || !rc.raw("k").is_empty() {
            bail!("--paper takes fire rates and k from the golden data; drop --fr-in/--fr-out/--k");
        }
        let g = golden_base(&shape.name, variant)
            .with_context(|| format!("no golden row for {} {}", shape.name, variant.as_str()))?;
        (g.fr_in, g.fr_out, g.k, Some(g))
    } else {
        let default_k = if matches!(variant, Variant::Ann | Variant::Lif) { 1 } else { 4 };
        (
            rc.opt("fr_in")?.unwrap_or(0.0),
            rc.opt("fr_out")?.unwrap_or(0.0),
            rc.opt("k")?.unwrap_or(default_k),
            None,
        )
    };
    let rep = report_with_ratio(&shape, variant, fr_in, fr_out, k, &consts)?;
    print!("{}", to_text_table(std::slice::from_ref(&rep)));
    let dir = rc.out_dir();
    write(&dir, "energy_report.csv", &to_csv(std::slice::from_ref(&rep)))?;
    let Some(g) = golden else {
        return Ok(Outcome::Passed);
    };
    let cells = [
        ("in_proj_uj", g.in_proj, rep.in_proj),
        ("out_proj_uj", g.out_proj, rep.out_proj),
        ("ssm_uj", g.ssm, rep.ssm),
        ("others_uj", g.others, rep.others),
        ("total_uj", g.total, rep.total),
        ("ratio", g.ratio, rep.ratio),
    ];
    let mut cmp = String::from("cell,golden,computed,rel_err,pass\n");
    let mut ok = true;
    for (name, want, got) in cells {
        let rel = (got - want).abs() / want.abs();
        let pass = rel <= ENERGY_TOLERANCE;
        ok &= pass;
        println!("{name:<12} golden {want:>12.4}  computed {got:>12.4}  rel err {rel:.2e}  {}", if pass { "PASS" } else { "FAIL" });
        writeln!(cmp, "{name},{want:.4},{got:.4},{rel:.6e},{pass}")?;
    }
    write(&dir, "energy_compare.csv", &cmp)?;
    Ok(if ok { Outcome::Passed } else { Outcome::Failed })
}

pub fn gen_corpus(rc: &RunConfig) -> Result<Outcome> {
    let dir = rc.out_dir();
    let seed: u64 = rc.get("seed")?;
    match rc.raw("kind") {
        "text" => {
            write(&dir, "corpus.txt", &synthetic_corpus(seed, rc.get("lines")?))?;
        }
        "prefs" => {
            let text = training_text(rc)?;
            let recs = synthetic_preferences(&text, rc.get("n")?, rc.get("paired")?, seed)?;
            let mut s = String::new();
            for r in &recs {
                s.push_str(&serde_json::to_string(r)?);
                s.push('\n');
            }
            write(&dir, "prefs.jsonl", &s)?;
        }
        other => bail!("kind must be text or prefs, got `{other}`"),
    }
    Ok(Outcome::Passed)
}

fn model_config(rc: &RunConfig) -> Result<Mamba2Config> {
    let mut cfg = Mamba2Config::toy();
    cfg.d_model = rc.get("d_model")?;
    cfg.n_state = rc.get("n_state")?;
    cfg.n_heads = rc.get("n_heads")?;
    cfg.d_head = rc.get("d_head")?;
    cfg.n_layers = rc.get("n_layers")?;
    cfg.sgc_layers = default_sgc_layers(cfg.n_layers);
    cfg.validate()?;
    Ok(cfg)
}

fn save<T: Scalar>(model: &ModelParams<T>, dir: &Path, name: &str) -> Result<()> {
    let path = dir.join(name);
    checkpoint::save(model, &path)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn train_teacher_cmd(rc: &RunConfig) -> Result<Outcome> {
    let cfg = model_config(rc)?;
    let stream = token_stream(&training_text(rc)?);
    let eval = token_stream(&synthetic_corpus(rc.get::<u64>("seed")? + 1, 400));
    let tc = TeacherConfig {
        steps: rc.get("steps")?,
        batch: rc.get("batch")?,
        seq_len: rc.get("seq_len")?,
        lr: rc.get("lr")?,
        weight_decay: rc.get("weight_decay")?,
        clip: rc.get("clip")?,
        seed: rc.get("seed")?,
    };
    let dir = rc.out_dir();
    with_precision!(rc, T => {
        let (model, rows) = train_teacher::<T>(&cfg, &stream, &tc)?;
        let ppl = eval_ppl(&model, &eval, tc.seq_len, 64, None)?;
        println!("teacher: {} params, final loss {:.4}, held-out ppl {ppl:.4}",
            model.num_params(), rows.last().map_or(f64::NAN, |r| r.loss_ce));
        write(&dir, "teacher_log.csv", &csv(TeacherRow::HEADER, &rows, TeacherRow::csv))?;
        save(&model, &dir, "teacher.ckpt")?;
    });
    Ok(Outcome::Passed)
}

fn parse_layers(raw: &str, n_layers: usize) -> Result<BTreeSet<usize>> {
    match raw {
        "auto" => Ok(default_sgc_layers(n_layers)),
        "none" | "" => Ok(BTreeSet::new()),
        list => list
            .split(',')
            .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad layer index `{s}`")))
            .collect(),
    }
}

pub fn distill_cmd(rc: &RunConfig) -> Result<Outcome> {
    let teacher_path = required(rc, "teacher")?;
    let stream = token_stream(&training_text(rc)?);
    let kind: NeuronKind = rc.get("neuron")?;
    let d_max = if kind == NeuronKind::Lif { 1 } else { rc.get("d_max")? };
    let neuron = NeuronConfig::new(kind, d_max)?;
    let dc = DistillConfig {
        steps: rc.get("steps")?,
        batch: rc.get("batch")?,
        lr: rc.get("lr")?,
        weight_decay: rc.get("weight_decay")?,
        clip: rc.get("clip")?,
        seed: rc.get("seed")?,
        pool_size: rc.get("pool_size")?,
        prompt_len: rc.get("prompt_len")?,
        seq_len: rc.get("seq_len")?,
        hidden_sgc_only: rc.get("hidden_sgc_only")?,
        freeze_embedding: rc.get("freeze_embedding")?,
    };
    let dir = rc.out_dir();
    with_precision!(rc, T => {
        let teacher = checkpoint::load::<T>(&teacher_path)?;
        let layers = parse_layers(rc.raw("sgc_layers"), teacher.cfg.n_layers)?;
        let student_cfg = teacher.cfg.clone().spiking(neuron).with_sgc_layers(layers);
        student_cfg.validate()?;
        let pool = build_pool(&teacher, &stream, &dc)?;
        let rep = distill_run(&teacher, &student_cfg, &pool, &dc)?;
        let last = rep.rows.last();
        println!(
            "distill: pool KL {:.6} -> {:.6}, fire rate in {:.4} out {:.4}",
            rep.initial_kl,
            rep.final_kl,
            last.map_or(0.0, |r| r.fr_in),
            last.map_or(0.0, |r| r.fr_out)
        );
        write(&dir, "distill_log.csv", &csv(DistillRow::HEADER, &rep.rows, DistillRow::csv))?;
        write(&dir, "distill_summary.csv", &format!(
            "initial_kl,final_kl\n{:.6},{:.6}\n", rep.initial_kl, rep.final_kl))?;
        save(&rep.student, &dir, "student.ckpt")?;
    });
    Ok(Outcome::Passed)
}

pub fn rl_cmd(rc: &RunConfig) -> Result<Outcome> {
    let policy_path = required(rc, "policy")?;
    let method: RlMethod = rc.get("method")?;
    let data = match rc.opt::<String>("prefs")? {
        Some(p) => parse_preferences(&load_text(Path::new(&p))?)?,
        None => {
            let text = training_text(rc)?;
            let recs: Vec<PreferenceRecord> =
                synthetic_preferences(&text, 256, method == RlMethod::Dpo, rc.get("seed")?)?;
            recs.iter().map(TryFrom::try_from).collect::<Result<_, _>>()?
        }
    };
    let rcfg = RlConfig {
        method,
        steps: rc.get("steps")?,
        batch: rc.get("batch")?,
        lr: rc.get("lr")?,
        beta_pref: rc.get("beta")?,
        seed: rc.get("seed")?,
        clip: rc.get("clip")?,
        max_len: rc.get("max_len")?,
        z_ref: rc.opt("z_ref")?,
        weight_desirable: rc.get("weight_desirable")?,
        weight_undesirable: rc.get("weight_undesirable")?,
    };
    let dir = rc.out_dir();
    with_precision!(rc, T => {
        let policy = checkpoint::load::<T>(&policy_path)?;
        let rep = rl_run(&policy, &data, &rcfg)?;
        if let (Some(first), Some(last)) = (rep.rows.first(), rep.rows.last()) {
            println!("rl: loss {:.6} -> {:.6}, margin {:.6} -> {:.6}", first.loss, last.loss, first.margin, last.margin);
        }
        write(&dir, "rl_log.csv", &csv(RlRow::HEADER, &rep.rows, RlRow::csv))?;
        save(&rep.policy, &dir, "policy.ckpt")?;
    });
    Ok(Outcome::Passed)
}

pub fn eval_ppl_cmd(rc: &RunConfig) -> Result<Outcome> {
    let ckpt = required(rc, "ckpt")?;
    let stream = token_stream(&eval_text(rc)?);
    let (seq_len, windows) = (rc.get("seq_len")?, rc.get("max_windows")?);
    let ppl = with_precision!(rc, T => {
        let model = checkpoint::load::<T>(&ckpt)?;
        eval_ppl(&model, &stream, seq_len, windows, None)?
    });
    println!("ppl {ppl:.6}");
    write(&rc.out_dir(), "eval_ppl.csv", &format!("ppl\n{ppl:.6}\n"))?;
    Ok(Outcome::Passed)
}

pub fn activation_hist(rc: &RunConfig) -> Result<Outcome> {
    let ckpt = required(rc, "ckpt")?;
    let stream = token_stream(&eval_text(rc)?);
    let site: Site = rc.get("site")?;
    let layer: usize = rc.get("layer")?;
    let values = with_precision!(rc, T => {
        let model = checkpoint::load::<T>(&ckpt)?;
        collect_activations(&model, &stream, rc.get("seq_len")?, rc.get("max_windows")?, layer, site)?
    });
    let bins = histogram(&values, rc.get("bins")?)?;
    println!("{} values at layer {layer} {}, {} bins", values.len(), site.as_str(), bins.len());
    write(&rc.out_dir(), "activation_hist.csv", &histogram_csv(&bins))?;
    Ok(Outcome::Passed)
}

pub fn clamp_ablation(rc: &RunConfig) -> Result<Outcome> {
    let ckpt = required(rc, "ckpt")?;
    let stream = token_stream(&eval_text(rc)?);
    let mode: ClampMode = rc.get("mode")?;
    let site: Site = rc.get("site")?;
    let (seq_len, windows) = (rc.get("seq_len")?, rc.get("max_windows")?);
    let (base, clamped) = with_precision!(rc, T => {
        let model = checkpoint::load::<T>(&ckpt)?;
        (
            eval_ppl(&model, &stream, seq_len, windows, None)?,
            eval_ppl(&model, &stream, seq_len, windows, Some((mode, site)))?,
        )
    });
    let delta = clamped - base;
    println!("ppl off {base:.6}  clamped {clamped:.6}  delta {delta:+.6}");
    write(
        &rc.out_dir(),
        "clamp_ablation.csv",
        &format!(
            "mode,site,ppl_off,ppl_clamped,delta\n{},{},{base:.6},{clamped:.6},{delta:.6}\n",
            rc.raw("mode"),
            site.as_str()
        ),
    )?;
    Ok(Outcome::Passed)
}
