//! Acceptance criteria, one line per criterion. Runs as a plain binary so
//! the report prints in order; the process fails if any criterion fails.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use umcl::ablation::{false_negative_study, run_grid, AblationGrid};
use umcl::config::RunConfig;
use umcl::data::MultiHotLabel;
use umcl::evaluation::{evaluate, precision_at_k, EvalTasks};
use umcl::linalg::l2_normalize;
use umcl::objective::{
    gradcheck, label_cosine, label_targets, normalize_similarity, pair_targets, raw_similarity,
    umcl_loss, GradcheckOptions, Matrix,
};
use umcl::par;
use umcl::training::{metrics_csv, train, Checkpoint, RunStatus};

const TRAIN_KV: &str = include_str!("../../../configs/train.kv");
const OVERLAP_KV: &str = include_str!("../../../configs/overlap.kv");
const ABLATION_GRID: &str = include_str!("../../../configs/ablation.grid");

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)*));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_label(rng: &mut ChaCha8Rng, k: usize) -> Vec<bool> {
    loop {
        let p = rng.random_range(0.05..0.9);
        let bits: Vec<bool> = (0..k).map(|_| rng.random_bool(p)).collect();
        if bits.iter().any(|b| *b) {
            return bits;
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    l2_normalize(&gaussian(rng, d)).0
}

// Independent oracles. These work on plain vectors and never call into the
// library's objective code.

fn oracle_cosine(a: &[bool], b: &[bool]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&x| f64::from(u8::from(x))).collect();
    let b: Vec<f64> = b.iter().map(|&x| f64::from(u8::from(x))).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt()
}

fn oracle_loss(y: &[Vec<f64>], v: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let n = v.len();
    let s: Vec<Vec<f64>> = v
        .iter()
        .map(|vi| {
            t.iter()
                .map(|tj| vi.iter().zip(tj).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let f = s.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if y[i][j] != 0.0 {
                loss -= y[i][j] * (s[i][j] / f).clamp(1e-8, 1.0).ln();
            }
        }
    }
    loss / n as f64
}

fn c1_gradcheck() -> Outcome {
    let t = Instant::now();
    let report = gradcheck(0, &GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure!(report.passed(), "failures: {:?}", report.failures());
    ensure!(
        report.max_rel_err() < 1e-4,
        "max rel err {}",
        report.max_rel_err()
    );
    ensure!(report.step == 1e-5, "step {}", report.step);
    let tensors: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.suite == "encoders")
        .map(|r| r.tensor.as_str())
        .collect();
    ensure!(
        tensors.len() == 10,
        "expected 10 trainable tensors, saw {tensors:?}"
    );
    for suite in ["objective/image_label", "objective/image_text"] {
        for tensor in &tensors {
            ensure!(
                report
                    .rows
                    .iter()
                    .any(|r| r.suite == suite && r.tensor == *tensor),
                "{suite} does not cover {tensor}"
            );
        }
    }
    ensure!(
        report
            .rows
            .iter()
            .any(|r| r.suite == "prompt_bank" && r.checked > 0),
        "prompt bank path not exercised"
    );
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "max rel err {:.2e} over {} rows, {:.2}s",
        report.max_rel_err(),
        report.rows.len(),
        elapsed.as_secs_f64()
    ))
}

fn c2_label_cosine_oracle() -> Outcome {
    let mut r = rng(2);
    for i in 0..1000 {
        let k = r.random_range(1..=20);
        let a = random_label(&mut r, k);
        let b = random_label(&mut r, k);
        let got = label_cosine(
            &MultiHotLabel::new(a.clone()).unwrap(),
            &MultiHotLabel::new(b.clone()).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        let want = oracle_cosine(&a, &b);
        ensure!(
            got.to_bits() == want.to_bits(),
            "pair {i}: {got:e} vs oracle {want:e}"
        );
    }
    Ok("1000 pairs bit-identical".into())
}

fn c3_frobenius() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (rows, cols) = (r.random_range(1..12), r.random_range(1..12));
        let scale = 10f64.powf(r.random_range(-4.0..4.0));
        let data: Vec<f64> = gaussian(&mut r, rows * cols)
            .iter()
            .map(|x| x * scale)
            .collect();
        let n = normalize_similarity(&Matrix { rows, cols, data }).map_err(|e| e.to_string())?;
        let f = n.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((f - 1.0).abs());
    }
    ensure!(worst <= 1e-6, "worst |norm - 1| = {worst:e}");
    let hand = normalize_similarity(&Matrix {
        rows: 2,
        cols: 2,
        data: vec![3.0, 4.0, 0.0, 0.0],
    })
    .map_err(|e| e.to_string())?;
    ensure!(
        hand.data == [0.6, 0.8, 0.0, 0.0],
        "hand value {:?}",
        hand.data
    );
    Ok(format!(
        "worst deviation {worst:.1e}; [[3,4],[0,0]] -> [[0.6,0.8],[0,0]]"
    ))
}

fn c4_hand_loss() -> Outcome {
    let s = normalize_similarity(&Matrix::identity(2)).map_err(|e| e.to_string())?;
    let loss = umcl_loss(&pair_targets(2), &s).map_err(|e| e.to_string())?;
    let want = std::f64::consts::LN_2 / 2.0;
    ensure!((loss - want).abs() <= 1e-10, "loss {loss} vs {want}");
    Ok(format!("loss {loss:.12} (ln 2 / 2 = {want:.12})"))
}

fn c5_symmetry_purity() -> Outcome {
    let mut r = rng(5);
    let (mut perm_drift, mut scale_drift, mut oracle_drift): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut min_loss = f64::INFINITY;
    for inst in 0..1000 {
        let n = r.random_range(2..10);
        let d = r.random_range(2..9);
        let k = r.random_range(1..8);
        let raw_v: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, d)).collect();
        // image and text embeddings share a direction so the batch is
        // mostly positively correlated
        let raw_t: Vec<Vec<f64>> = raw_v
            .iter()
            .map(|v| {
                v.iter()
                    .map(|x| {
                        let e: f64 = StandardNormal.sample(&mut r);
                        x + 0.5 * e
                    })
                    .collect()
            })
            .collect();
        let y = if inst % 2 == 0 {
            let labels: Vec<MultiHotLabel> = (0..n)
                .map(|_| MultiHotLabel::new(random_label(&mut r, k)).unwrap())
                .collect();
            let refs: Vec<&MultiHotLabel> = labels.iter().collect();
            label_targets(&refs, &refs).map_err(|e| e.to_string())?
        } else {
            pair_targets(n)
        };
        let loss_of = |v: &[Vec<f64>], t: &[Vec<f64>], y: &Matrix| -> Result<f64, String> {
            let v: Vec<Vec<f64>> = v.iter().map(|x| l2_normalize(x).0).collect();
            let t: Vec<Vec<f64>> = t.iter().map(|x| l2_normalize(x).0).collect();
            let s = normalize_similarity(&raw_similarity(&v, &t).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            umcl_loss(y, &s).map_err(|e| e.to_string())
        };
        let base = loss_of(&raw_v, &raw_t, &y)?;
        min_loss = min_loss.min(base);

        let yv: Vec<Vec<f64>> = (0..n).map(|i| y.row(i).to_vec()).collect();
        let unit_v: Vec<Vec<f64>> = raw_v.iter().map(|x| l2_normalize(x).0).collect();
        let unit_t: Vec<Vec<f64>> = raw_t.iter().map(|x| l2_normalize(x).0).collect();
        oracle_drift = oracle_drift.max((base - oracle_loss(&yv, &unit_v, &unit_t)).abs());

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let pv: Vec<Vec<f64>> = perm.iter().map(|&i| raw_v[i].clone()).collect();
        let pt: Vec<Vec<f64>> = perm.iter().map(|&i| raw_t[i].clone()).collect();
        let mut py = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                py.set(i, j, y.get(perm[i], perm[j]));
            }
        }
        perm_drift = perm_drift.max((loss_of(&pv, &pt, &py)? - base).abs());

        let sv: Vec<Vec<f64>> = raw_v
            .iter()
            .map(|x| {
                let c = 10f64.powf(r.random_range(-3.0..3.0));
                x.iter().map(|e| e * c).collect()
            })
            .collect();
        let st: Vec<Vec<f64>> = raw_t
            .iter()
            .map(|x| {
                let c = 10f64.powf(r.random_range(-3.0..3.0));
                x.iter().map(|e| e * c).collect()
            })
            .collect();
        scale_drift = scale_drift.max((loss_of(&sv, &st, &y)? - base).abs());
    }
    ensure!(perm_drift <= 1e-12, "permutation drift {perm_drift:e}");
    ensure!(scale_drift <= 1e-12, "scale drift {scale_drift:e}");
    ensure!(min_loss >= 0.0, "negative loss {min_loss}");
    ensure!(
        oracle_drift <= 1e-12,
        "loss differs from oracle by {oracle_drift:e}"
    );
    Ok(format!(
        "perm drift {perm_drift:.1e}, scale drift {scale_drift:.1e}, min loss {min_loss:.3}, oracle drift {oracle_drift:.1e}"
    ))
}

fn c6_zero_shot() -> Outcome {
    let run = RunConfig::parse(TRAIN_KV, Path::new(".")).map_err(|e| e.to_string())?;
    ensure!(
        run.train.num_classes == 4 && run.train.steps == 5000,
        "unexpected shipped config"
    );
    let t = Instant::now();
    let data = run.load_data().map_err(|e| e.to_string())?;
    let out = train(&run.train, &data.datasets, &data.registry).map_err(|e| e.to_string())?;
    ensure!(out.status == RunStatus::Completed, "{:?}", out.status);
    let m = evaluate(
        &out.checkpoint,
        data.eval.as_ref().unwrap(),
        &EvalTasks::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let (single, ens) = (m.zero_shot_acc.unwrap(), m.zero_shot_acc_ens.unwrap());
    ensure!(single >= 0.90, "zero-shot {single:.4} < 0.90");
    ensure!(
        ens >= single - 0.02,
        "ensemble {ens:.4} < single {single:.4} - 0.02"
    );
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "zero-shot {single:.4}, ensemble {ens:.4}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn c7_false_negatives() -> Outcome {
    let run = RunConfig::parse(OVERLAP_KV, Path::new(".")).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let rows = false_negative_study(&run, &[0.5], &[1, 2, 3], None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let r = &rows[0];
    let detail = format!(
        "median umcl {:.4} vs hard {:.4} (umcl {:?}, hard {:?}), {:.1}s",
        r.umcl_acc,
        r.baseline_acc,
        r.umcl_per_seed,
        r.baseline_per_seed,
        elapsed.as_secs_f64()
    );
    ensure!(r.umcl_acc >= r.baseline_acc, "{detail}");
    ensure!(elapsed < Duration::from_secs(1200), "took {elapsed:?}");
    Ok(detail)
}

fn c8_ablation_grid() -> Outcome {
    let grid = AblationGrid::parse(ABLATION_GRID, Path::new(".")).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let report = run_grid(&grid, None, None).map_err(|e| e.to_string())?;
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    ensure!(
        names
            == [
                "context-16",
                "context-32",
                "context-64",
                "w/o context",
                "w/o label-data"
            ],
        "rows {names:?}"
    );
    for row in &report.rows {
        ensure!(row.error.is_none(), "{} failed: {:?}", row.name, row.error);
    }
    let full = report.row("context-32").unwrap().zero_shot_acc.unwrap();
    let no_label = report.row("w/o label-data").unwrap().zero_shot_acc.unwrap();
    ensure!(
        no_label < full,
        "w/o label-data {no_label:.4} not below full model {full:.4}\n{}",
        report.to_table()
    );
    Ok(format!(
        "5 rows; w/o label-data {no_label:.4} < full {full:.4}, {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

fn c9_retrieval_oracle() -> Outcome {
    let mut r = rng(9);
    let d = 32;
    let queries: Vec<Vec<f64>> = (0..1000).map(|_| unit(&mut r, d)).collect();
    let cands: Vec<Vec<f64>> = (0..1000).map(|_| unit(&mut r, d)).collect();
    let qc: Vec<usize> = (0..1000).map(|i| i % 5).collect();
    let cc: Vec<usize> = (0..1000).map(|i| (i * 7) % 5).collect();
    let p =
        precision_at_k(&queries, &qc, &cands, &cc, &[1, 2, 5, 10]).map_err(|e| e.to_string())?;
    for (k, v) in &p {
        ensure!(
            (0.17..=0.23).contains(v),
            "P@{k} = {v:.4} on random embeddings"
        );
    }
    let anchors: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut r, d)).collect();
    let aq: Vec<Vec<f64>> = qc.iter().map(|&c| anchors[c].clone()).collect();
    let ac: Vec<usize> = (0..5).collect();
    let p1 = precision_at_k(&aq, &qc, &anchors, &ac, &[1]).map_err(|e| e.to_string())?[&1];
    ensure!(p1 == 1.0, "P@1 on anchors = {p1}");
    let shown: Vec<String> = p.iter().map(|(k, v)| format!("P@{k} {v:.3}")).collect();
    Ok(format!("{}; anchors P@1 = 1", shown.join(", ")))
}

fn c10_determinism() -> Outcome {
    let mut run = RunConfig::parse(TRAIN_KV, Path::new(".")).map_err(|e| e.to_string())?;
    run.train.steps = 400;
    run.train.log_every = 10;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let once = |threads: Option<usize>, name: &str| -> Result<(Vec<u8>, Checkpoint), String> {
        let data = run.load_data().map_err(|e| e.to_string())?;
        let out = par::with_threads(threads, || {
            train(&run.train, &data.datasets, &data.registry)
        })
        .map_err(|e| e.to_string())?;
        let path = dir.path().join(name);
        std::fs::write(&path, metrics_csv(&out.log)).map_err(|e| e.to_string())?;
        Ok((
            std::fs::read(&path).map_err(|e| e.to_string())?,
            out.checkpoint,
        ))
    };
    let (a, ckpt) = once(None, "a.csv")?;
    let (b, _) = once(None, "b.csv")?;
    let (c, _) = once(Some(1), "c.csv")?;
    ensure!(a == b, "metrics logs differ between identical runs");
    ensure!(a == c, "metrics log differs on a single worker");

    let path = dir.path().join("ckpt.bin");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let data = run.load_data().map_err(|e| e.to_string())?;
    let eval = data.eval.as_ref().unwrap();
    let tasks = EvalTasks {
        probe: true,
        retrieval: true,
        ..EvalTasks::default()
    };
    let m1 = evaluate(&ckpt, eval, &tasks).map_err(|e| e.to_string())?;
    let m2 = evaluate(&loaded, eval, &tasks).map_err(|e| e.to_string())?;
    let bits = |m: &umcl::evaluation::EvalMetrics| {
        let mut v = vec![
            m.zero_shot_acc.unwrap().to_bits(),
            m.zero_shot_acc_ens.unwrap().to_bits(),
            m.probe_acc.unwrap().to_bits(),
        ];
        v.extend(m.p_at_k.as_ref().unwrap().values().map(|x| x.to_bits()));
        v
    };
    ensure!(
        bits(&m1) == bits(&m2),
        "reloaded evaluation differs: {m1:?} vs {m2:?}"
    );
    Ok(format!(
        "{} log bytes identical x3; reloaded eval bit-identical",
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 gradient correctness", c1_gradcheck),
        ("2 label cosine oracle", c2_label_cosine_oracle),
        ("3 global normalization", c3_frobenius),
        ("4 loss hand value", c4_hand_loss),
        ("5 symmetry and purity", c5_symmetry_purity),
        ("6 synthetic zero-shot", c6_zero_shot),
        ("7 false-negative direction", c7_false_negatives),
        ("8 ablation grid", c8_ablation_grid),
        ("9 retrieval oracle", c9_retrieval_oracle),
        ("10 determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "[{tag}] criterion {name}: {detail}");
        let _ = out.flush();
    }
    let _ = writeln!(out, "acceptance: {failed} failing criteria");
    if failed > 0 {
        std::process::exit(1);
    }
}
