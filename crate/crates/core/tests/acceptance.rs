//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use ultramem::lm::{preset, synthetic_text, train, Corpus, LmConfig, StepMetrics};
use ultramem::verify::{run_suite, VerifyOptions};
use ultramem::Precision;

const SUITES: [(&str, &str); 9] = [
    ("ive", "implicit value expansion matches materialized expansion"),
    ("mcs", "multi-core scores sum to the aggregate core"),
    ("tdqkr", "rank-one cores retrieve the exhaustive top-m"),
    ("pkm", "two-phase top-m equals exhaustive grid top-m"),
    ("aux", "aux loss value, zero set and descent"),
    ("gradients", "finite-difference gradient checks"),
    ("init", "initialization statistics"),
    ("cost", "memory access cost model"),
    ("partition", "partition communication volumes"),
];

fn corpus_for(cfg: &LmConfig) -> Corpus {
    let text = synthetic_text(cfg.train.corpus_bytes, cfg.seed);
    Corpus::from_bytes(&text, cfg.train.seq_len + 1).expect("corpus")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn run(cfg: &LmConfig) -> Result<Vec<StepMetrics>, String> {
    let corpus = corpus_for(cfg);
    train(cfg, &corpus, Precision::F64, |_, _| Ok(()))
        .map(|(_, rows)| rows)
        .map_err(|e| e.to_string())
}

fn training() -> (bool, String) {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut finals = Vec::new();
    for name in ["dense-tiny", "pkm-tiny", "ultramem-tiny"] {
        let cfg = preset(name).expect("preset");
        let t0 = Instant::now();
        let rows = match run(&cfg) {
            Ok(rows) => rows,
            Err(e) => {
                ok = false;
                notes.push(format!("{name}: {e}"));
                continue;
            }
        };
        let finite = rows.iter().all(|r| r.lm_loss.is_finite() && r.aux_loss.is_finite());
        let initial = mean(rows.iter().take(10).map(|r| r.lm_loss));
        let smoothed = mean(rows.iter().rev().take(100).map(|r| r.lm_loss));
        let drop = 1.0 - smoothed / initial;
        let steps = cfg.train.steps as f64;
        let mut worst = 0.0f64;
        for r in rows.iter().filter(|r| r.val_loss.is_some()) {
            let row = r.csv_row();
            let cols: Vec<f64> = row.rsplit(',').take(2).map(|c| c.parse().unwrap()).collect();
            let (value_lr, lr) = (cols[0], cols[1]);
            let want = 10.0 - 9.0 * r.step as f64 / steps;
            worst = worst.max((value_lr / lr / want - 1.0).abs());
        }
        let pass = finite && drop >= 0.30 && worst < 1e-5;
        ok &= pass;
        let val = rows.last().and_then(|r| r.val_loss).unwrap_or(f64::NAN);
        finals.push((name, val));
        notes.push(format!(
            "{name}: loss {initial:.3} -> {smoothed:.3} ({:.0}% drop), val {val:.3}, lr-trace err {worst:.1e}, {:.0}s",
            100.0 * drop,
            t0.elapsed().as_secs_f64()
        ));
    }

    let mut short = preset("ultramem-tiny").expect("preset");
    short.train.steps = 40;
    short.train.eval_every = 10;
    let csv = |rows: Vec<StepMetrics>| rows.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
    let bits = |rows: &[StepMetrics]| {
        rows.iter()
            .map(|r| (r.lm_loss.to_bits(), r.aux_loss.to_bits(), r.grad_norm.to_bits()))
            .collect::<Vec<_>>()
    };
    match (run(&short), run(&short)) {
        (Ok(a), Ok(b)) => {
            let same = bits(&a) == bits(&b) && csv(a) == csv(b);
            ok &= same;
            notes.push(format!("rerun bitwise identical: {same}"));
        }
        _ => {
            ok = false;
            notes.push("rerun failed".into());
        }
    }

    if let [(_, dense), (_, pkm), (_, um)] = finals[..] {
        notes.push(format!(
            "trend: final val loss dense {dense:.4}, pkm {pkm:.4}, ultramem {um:.4}; ultramem - pkm = {:+.4}",
            um - pkm
        ));
    }
    (ok, notes.join("\n    "))
}

fn main() -> ExitCode {
    let opts = VerifyOptions::default();
    let mut all = true;
    for (k, (suite, what)) in SUITES.iter().enumerate() {
        let (ok, detail) = match run_suite(suite, &opts) {
            Ok(r) => (r.passed, format!("{} checks, {:.1}s; {}", r.checks, r.seconds, r.detail)),
            Err(e) => (false, e.to_string()),
        };
        all &= ok;
        println!("{} criterion {}: {what}", if ok { "PASS" } else { "FAIL" }, k + 1);
        println!("    {detail}");
    }
    let (ok, detail) = training();
    all &= ok;
    println!(
        "{} criterion 10: desk-scale training of the three presets",
        if ok { "PASS" } else { "FAIL" }
    );
    println!("    {detail}");
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
