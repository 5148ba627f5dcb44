//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use modx_core::analysis::{
    flip_language_side, ram, recall_at_k, rotation_flip_demo, sam, sam_delta_hist, PairedEmbeddings, SAM_BINS,
};
use modx_core::experiment::{pretrain, run_continual, Benchmark, ExperimentConfig, Strategy, OLD_DOMAIN_NAME};
use modx_core::gradcheck::Check;
use modx_core::losses::{kl_alignment, modx_loss, screen, unscreened_distill_loss, ContrastiveMatrix};
use modx_core::numeric::{gaussian, l2_normalize_rows, random_rotation, seeded_rng, Matrix, UnitEmbeddings};
use modx_core::optimizer::{OptimizerConfig, OptimizerState};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for check in Check::ALL {
        for (n, d) in [(8, 16), (4, 3)] {
            for seed in 0..5 {
                let err = check.run(n, d, seed).map_err(|e| e.to_string())?;
                ensure(
                    err < 1e-5,
                    format!("{} n={n} d={d} seed={seed}: rel err {err:e}", check.name()),
                )?;
                worst = worst.max(err);
                instances += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("{instances} instances, worst rel err {worst:.1e}, {secs:.2}s"))
}

fn random_matrix(n: usize, seed: u64) -> ContrastiveMatrix {
    ContrastiveMatrix::new(Matrix::gaussian(n, n, &mut seeded_rng(seed))).expect("square")
}

fn screening_contract() -> Outcome {
    let mut replaced = 0;
    for k in 0..1000u64 {
        let n = 2 + (k % 9) as usize;
        let old = random_matrix(n, 2 * k);
        let new = random_matrix(n, 2 * k + 1);
        let s = screen(&old, &new).map_err(|e| e.to_string())?;
        for i in 0..n {
            let copied = s.matrix().row(i) == new.matrix().row(i);
            ensure(s.row_argmax(i) == i || copied, format!("pair {k} row {i}"))?;
            if old.row_argmax(i) != i {
                replaced += 1;
            }
        }
        ensure(
            screen(&s, &new).map_err(|e| e.to_string())? == s,
            format!("pair {k} not idempotent"),
        )?;
    }
    Ok(format!("1000 pairs, {replaced} rows replaced"))
}

fn kl_identity() -> Outcome {
    let mut rng = seeded_rng(3);
    for k in 0..200u64 {
        let m = random_matrix(1 + (k % 8) as usize, 1000 + k);
        let tau = 0.05 + 3.0 * gaussian(&mut rng).abs();
        let kl = kl_alignment(&m, &m, tau).map_err(|e| e.to_string())?;
        let gmax = kl.grad.as_slice().iter().fold(0.0f64, |a, g| a.max(g.abs()));
        ensure(
            kl.value.abs() <= 1e-12 && gmax <= 1e-12,
            format!("case {k}: {} {gmax}", kl.value),
        )?;
    }
    Ok("200 random matrices, value and gradient 0".into())
}

fn unit(n: usize, d: usize, seed: u64) -> UnitEmbeddings {
    l2_normalize_rows(&Matrix::gaussian(n, d, &mut seeded_rng(seed))).expect("nondegenerate")
}

fn geometry_invariants() -> Outcome {
    for seed in 0..20 {
        let e = unit(12, 6, seed);
        let s = sam(&e);
        for a in 0..12 {
            ensure(s[(a, a)].abs() < 1e-9, "sam diagonal")?;
            for b in 0..12 {
                ensure((s[(a, b)] - s[(b, a)]).abs() < 1e-9, "sam symmetry")?;
            }
        }
        let rotated = e.transform(&random_rotation(6, seed + 50)).map_err(|e| e.to_string())?;
        let h = sam_delta_hist(&e, &rotated, &SAM_BINS).map_err(|e| e.to_string())?;
        ensure(
            h.fractions[0] == 1.0,
            format!("seed {seed}: lowest SAM bin {}", h.fractions[0]),
        )?;
    }
    // Embeddings in a plane, rotated within it.
    let mut rng = seeded_rng(9);
    let phis: Vec<f64> = (0..16).map(|_| 360.0 * gaussian(&mut rng)).collect();
    for theta in [5.0f64, 25.0, 90.0] {
        for d in [2, 5] {
            let embed = |shift: f64| {
                let rows: Vec<Vec<f64>> = phis
                    .iter()
                    .map(|p| {
                        let a = (p + shift).to_radians();
                        let mut r = vec![0.0; d];
                        r[0] = a.cos();
                        r[1] = a.sin();
                        r
                    })
                    .collect();
                UnitEmbeddings::from_normalized(Matrix::from_rows(&rows)).expect("unit rows")
            };
            let angles = ram(&embed(0.0), &embed(theta)).map_err(|e| e.to_string())?;
            let err = angles.iter().fold(0.0f64, |a, x| a.max((x - theta).abs()));
            ensure(err < 1e-6, format!("ram at {theta} deg, d={d}: err {err:e}"))?;
        }
    }
    Ok("sam symmetric, rotation lands in lowest bin, ram exact for 5/25/90 deg".into())
}

fn rotation_demo() -> Outcome {
    let started = Instant::now();
    let m = ContrastiveMatrix::new(Matrix::from_rows(&[[0.9, 0.1], [0.5, 0.6]])).expect("square");
    let flip = flip_language_side(&m);
    ensure(flip.all_negated && flip.argmax_after[0] != 0, "2x2 example")?;
    for seed in 0..20 {
        let demo = rotation_flip_demo(8, 4, seed).map_err(|e| e.to_string())?;
        ensure(demo.language_only.all_negated, format!("seed {seed}: not all negated"))?;
        ensure(demo.correct_sample_flipped, format!("seed {seed}: argmax stayed"))?;
        ensure(demo.orthogonality_error == 0.0, "R^T R != I")?;
        ensure(
            demo.retrieval_before == demo.retrieval_both_sides,
            "both-sides retrieval changed",
        )?;
    }
    // A generic rotation on both sides also leaves retrieval alone.
    let (v, l) = (unit(10, 6, 1), unit(10, 6, 2));
    let r = random_rotation(6, 3);
    let before = recall_at_k(&ContrastiveMatrix::from_embeddings(&v, &l).expect("pair"), &[1, 5]);
    let m2 = ContrastiveMatrix::from_embeddings(&v.transform(&r).expect("rot"), &l.transform(&r).expect("rot"))
        .expect("pair");
    ensure(
        recall_at_k(&m2, &[1, 5]) == before,
        "random rotation pair changed retrieval",
    )?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 1.0, format!("took {secs:.2}s"))?;
    Ok(format!("20 seeds, {secs:.3}s"))
}

fn oracle_rows() -> Vec<Vec<String>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/forgetting_oracle.txt");
    std::fs::read_to_string(path)
        .expect("oracle file")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

fn forgetting() -> Outcome {
    let started = Instant::now();
    let oracle = oracle_rows();
    let (mut ct_forgets, mut modx_beats, mut joint_bound) = (0, 0, 0);
    for seed in 0..10u64 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let bench = Benchmark::generate(&cfg).map_err(|e| e.to_string())?;
        let pre = pretrain(&cfg, &bench).map_err(|e| e.to_string())?;
        let run = |strategy| {
            run_continual(
                &ExperimentConfig {
                    strategy,
                    ..cfg.clone()
                },
                &bench,
                Some(&pre),
            )
            .map_err(|e| e.to_string())
        };
        let old_r1 = |r: &modx_core::experiment::PhaseRecord| r.r1(OLD_DOMAIN_NAME).expect("old domain").0;
        let ct = run(Strategy::Ct)?;
        let modx = run(Strategy::Modx)?;
        let joint = run(Strategy::Joint)?;
        let (p0, c, m, j) = (
            old_r1(&ct.records[0]),
            old_r1(ct.last()),
            old_r1(modx.last()),
            old_r1(joint.last()),
        );
        ct_forgets += usize::from(c < p0);
        modx_beats += usize::from(m > c);
        joint_bound += usize::from(j >= c);
        let got: Vec<String> = [p0, c, m, j].iter().map(|x| format!("{x:.4}")).collect();
        let pinned = &oracle[seed as usize][1..5];
        ensure(
            got == pinned,
            format!("seed {seed}: {got:?} differs from pinned {pinned:?}"),
        )?;
    }
    let secs = started.elapsed().as_secs_f64();
    let summary =
        format!("ct forgets {ct_forgets}/10, modx > ct {modx_beats}/10, joint >= ct {joint_bound}/10, {secs:.1}s");
    ensure(ct_forgets >= 9 && modx_beats >= 9 && joint_bound >= 9, summary.clone())?;
    ensure(secs < 600.0, summary.clone())?;
    Ok(summary)
}

fn reductions() -> Outcome {
    let cfg = ExperimentConfig {
        strategy: Strategy::Ct,
        train_per_domain: 400,
        test_per_domain: 200,
        n_phases: 2,
        pretrain_epochs: 8,
        epochs_per_phase: 3,
        ..ExperimentConfig::default()
    };
    let bench = Benchmark::generate(&cfg).map_err(|e| e.to_string())?;
    let pre = pretrain(&cfg, &bench).map_err(|e| e.to_string())?;
    let ct = run_continual(&cfg, &bench, Some(&pre)).map_err(|e| e.to_string())?;
    let modx0 = run_continual(
        &ExperimentConfig {
            strategy: Strategy::Modx,
            alpha: 0.0,
            ..cfg.clone()
        },
        &bench,
        Some(&pre),
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (a, b) in ct.records.iter().zip(&modx0.records) {
        ensure(a.epoch_losses.len() == b.epoch_losses.len(), "epoch counts differ")?;
        for (x, y) in a.epoch_losses.iter().zip(&b.epoch_losses) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-12, format!("alpha=0 loss gap {worst:e}"))?;

    // Teacher = pretrained snapshot on samples it retrieves correctly both ways.
    let data = &bench.old.test;
    let teacher = &pre.snapshot;
    let m = PairedEmbeddings::encode(teacher, data)
        .and_then(|p| p.contrastive())
        .map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..m.n())
        .filter(|&i| m.row_argmax(i) == i && m.col_argmax(i) == i)
        .take(40)
        .collect();
    ensure(idx.len() >= 8, "too few correctly retrieved samples")?;
    let batch = data.select(&idx);
    let student = &ct.snapshots[1];
    let (v, l) = student
        .encode_pair(&batch.vision_inputs, &batch.language_inputs)
        .map_err(|e| e.to_string())?;
    let (vi, li) = (&batch.vision_inputs, &batch.language_inputs);
    let a = modx_loss(&v, &l, teacher, vi, li, cfg.tau, 20.0, 1.0).map_err(|e| e.to_string())?;
    let b = unscreened_distill_loss(&v, &l, teacher, vi, li, cfg.tau, 20.0, 1.0).map_err(|e| e.to_string())?;
    ensure(a == b, "screened and unscreened losses differ on a diagonal teacher")?;
    Ok(format!(
        "alpha=0 loss gap {worst:e}; noscreen == modx on {} diagonal rows",
        idx.len()
    ))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_modx")
}

fn modx(cwd: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("modx {args:?}: {}", String::from_utf8_lossy(&out.stderr)),
    )?;
    Ok(out.stdout)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timing.json") {
                out.push((
                    p.strip_prefix(dir).expect("inside").to_path_buf(),
                    std::fs::read(&p).expect("file"),
                ));
            }
        }
    }
    out.sort();
    out
}

const SMALL_CONFIG: &str = "\
# reduced benchmark
train_per_domain = 300
test_per_domain = 100
n_phases = 2
batch_size = 32
pretrain_epochs = 3
epochs_per_phase = 2
joint_epochs = 2
";

fn determinism() -> Outcome {
    let roots = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    let mut stdouts = Vec::new();
    for root in &roots {
        let cwd = root.path();
        std::fs::write(cwd.join("bench.cfg"), SMALL_CONFIG).map_err(|e| e.to_string())?;
        let mut outs = Vec::new();
        outs.push(modx(cwd, &["generate", "--config", "bench.cfg", "--out", "data"])?);
        for strategy in ["modx", "ewc", "replay", "joint"] {
            let out = format!("train_{strategy}");
            modx(
                cwd,
                &["train", "--config", "bench.cfg", "--strategy", strategy, "--out", &out],
            )?;
        }
        modx(
            cwd,
            &["sweep", "--config", "bench.cfg", "--alphas", "0,20", "--out", "sweep"],
        )?;
        outs.push(modx(
            cwd,
            &[
                "analyze",
                "--before",
                "train_modx/phase_0/snapshot.bin",
                "--after",
                "train_modx/phase_1/snapshot.bin",
                "--data",
                "data/old_test.csv",
                "--json",
                "analysis.json",
            ],
        )?);
        outs.push(modx(cwd, &["demo-rotation", "--dim", "8", "--n", "4", "--seed", "1"])?);
        outs.push(modx(cwd, &["report", "train_modx"])?);
        outs.push(modx(cwd, &["report", "sweep"])?);
        stdouts.push(outs);
    }
    let (a, b) = (tree(roots[0].path()), tree(roots[1].path()));
    ensure(a.len() > 20, format!("only {} files written", a.len()))?;
    ensure(a.iter().map(|x| &x.0).eq(b.iter().map(|x| &x.0)), "file sets differ")?;
    for ((path, x), (_, y)) in a.iter().zip(&b) {
        ensure(x == y, format!("{} differs", path.display()))?;
    }
    ensure(stdouts[0] == stdouts[1], "stdout differs")?;
    Ok(format!("6 subcommands, {} files byte-identical", a.len()))
}

fn optimizer_schedule() -> Outcome {
    let c = OptimizerConfig::reference(1000);
    let w = c.warmup_steps();
    ensure(c.lr_at(0) == 0.0, format!("lr_at(0) = {}", c.lr_at(0)))?;
    ensure(
        (c.lr_at(w) - c.base_lr).abs() <= 1e-12,
        format!("lr_at({w}) = {}", c.lr_at(w)),
    )?;
    ensure(
        c.lr_at(1000).abs() <= 1e-12,
        format!("lr_at(total) = {}", c.lr_at(1000)),
    )?;
    let hand = OptimizerConfig {
        base_lr: 0.1,
        beta1: 0.0,
        beta2: 0.0,
        epsilon: 0.0,
        weight_decay: 0.0,
        warmup_fraction: 0.0,
        total_steps: 1,
    };
    let mut state = OptimizerState::new(hand, 1);
    let mut theta = [1.0];
    state.step_with_lr(&mut theta, &[1.0], 0.1).map_err(|e| e.to_string())?;
    ensure(theta[0] == 0.9, format!("hand step gave {}", theta[0]))?;
    Ok(format!("warmup end {w}, hand step 1.0 -> 0.9"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 screening contract", screening_contract),
        ("3 KL identity", kl_identity),
        ("4 geometry invariants", geometry_invariants),
        ("5 rotation flip demo", rotation_demo),
        ("6 forgetting reproduced directionally", forgetting),
        ("7 reduction identities", reductions),
        ("8 determinism", determinism),
        ("9 optimizer schedule", optimizer_schedule),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
