//! End-to-end acceptance checks. Each test prints one `criterion N:` line to
//! stderr (uncaptured) and fails on a miss, except the soft criterion 6.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;
#[path = "../../core/tests/support/gradnet.rs"]
mod gradnet;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::OnceLock;

use mmkd::distill::*;
use mmkd::metrics::{expected_calibration_error, ECE_BINS};
use mmkd::models::{Modality, ModalityModel, Task};
use mmkd::synthdata::{build_splits, DatasetConfig};
use mmkd::training::{distill_student, train_teacher, Data, TrainConfig};
use mmkd::{Graph, Tensor};
use mmkd_cli::config::ExperimentConfig;
use mmkd_cli::sweep::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, status: &str, detail: &str) {
    let _ = writeln!(std::io::stderr(), "criterion {n}: {status} {detail}");
}

fn verdict(n: u32, ok: bool, detail: String) {
    report(n, if ok { "PASS" } else { "FAIL" }, &detail);
    assert!(ok, "criterion {n}: {detail}");
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let reports: Vec<_> = (0..24).map(gradnet::check_random_net).collect();
    let passed = reports.iter().filter(|r| r.passed(1e-3)).count();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    verdict(
        1,
        passed == reports.len() && passed >= 20,
        format!("{passed}/{} networks below 1e-3 relative error ({checked} coordinates, worst {worst:.2e})", reports.len()),
    );
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[test]
fn criterion_2_math_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 5];
    for _ in 0..300 {
        let b = rng.gen_range(1..8);
        let c = rng.gen_range(2..10);
        let logits = f64s(&f32s(&(0..b * c).map(|_| rng.gen_range(-8.0..8.0)).collect::<Vec<f64>>()));
        let other = f64s(&f32s(&(0..b * c).map(|_| rng.gen_range(-8.0..8.0)).collect::<Vec<f64>>()));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[b, c], f32s(&logits)).unwrap());
        let ce = cross_entropy(&mut g, x, &labels).unwrap();
        let got = g.value(ce).data()[0] as f64;
        worst[0] = worst[0].max((got - oracle::cross_entropy(&logits, c, &labels)).abs());

        let tau = [1.0f32, 4.0, 10.0][rng.gen_range(0..3)];
        let t = Tensor::new(&[b, c], f32s(&other)).unwrap();
        let kl = kd_kl_loss(&mut g, &t, x, tau).unwrap();
        let got = g.value(kl).data()[0] as f64;
        let want = oracle::kd_kl(&other, &logits, c, tau as f64);
        worst[1] = worst[1].max((got - want).abs() / want.abs().max(1.0));

        let errors: Vec<f64> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0.0..5.0)).collect();
        let gamma = rng.gen_range(0.1..40.0);
        let w = compute_teacher_weights(&errors, gamma).unwrap();
        let neg: Vec<f64> = errors.iter().map(|e| -e).collect();
        for (a, o) in w.iter().zip(oracle::softmax_row(&neg, gamma)) {
            worst[2] = worst[2].max((a - o).abs());
        }

        let w0 = rng.gen_range(0.0..1.0);
        let ta = Tensor::new(&[b, c], f32s(&logits)).unwrap();
        let (ens, _) = ensemble_logits(&[&ta, &t], &[w0, 1.0 - w0]).unwrap();
        for i in 0..b * c {
            let want = w0 * logits[i] + (1.0 - w0) * other[i];
            worst[3] = worst[3].max((ens.data()[i] as f64 - want).abs());
        }

        let probs: Vec<f32> = logits
            .chunks(c)
            .flat_map(|row| f32s(&oracle::softmax_row(row, 1.0)))
            .collect();
        let pt = Tensor::new(&[b, c], probs.clone()).unwrap();
        let got = expected_calibration_error(&pt, &labels, ECE_BINS).unwrap();
        worst[4] = worst[4].max((got - oracle::ece(&f64s(&probs), c, &labels, ECE_BINS)).abs());
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    verdict(
        2,
        max < 1e-5,
        format!(
            "max deviation over 300 cases: CE {:.1e}, KL {:.1e}, weights {:.1e}, ensemble {:.1e}, ECE {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
}

fn tiny(base: DatasetConfig) -> DatasetConfig {
    DatasetConfig {
        frames: 8,
        clip_frames: 6,
        height: 28,
        width: 28,
        num_train: 80,
        num_val: 16,
        holdout_size: 16,
        ..base
    }
}

fn distill_digest(c: &DatasetConfig) -> Vec<String> {
    let s = build_splits(c).unwrap();
    let data = Data { train: &s.train.examples, val: &s.val.examples, config: c };
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 11, ..TrainConfig::default() };
    let members: Vec<ModalityModel> = [Modality::Flow, Modality::Layout]
        .iter()
        .map(|&m| train_teacher(m, Task::Verb, data, &cfg).unwrap().0)
        .collect();
    let ens = TeacherEnsemble::from_holdout(members, &s.holdout.examples, c, 1.0).unwrap();
    let (model, log) = distill_student(&ens, data, &DistillConfig::paper_best(), &cfg, None, None).unwrap();
    let mut out: Vec<String> = log.steps.iter().map(|r| format!("{:.6} {:.6}", r.loss, r.ce)).collect();
    let r = log.final_report().unwrap();
    out.push(format!("{:.6} {:.6} {:.6}", r.top1, r.top5, r.ece));
    out.push(format!("{:.6}", model.params.iter().flat_map(|p| p.data()).map(|&v| v as f64).sum::<f64>()));
    out
}

fn gen_data(out: &Path) -> Vec<Vec<u8>> {
    let status = Command::new(env!("CARGO_BIN_EXE_mmkd"))
        .args(["--seed", "5", "--out-dir"])
        .arg(out)
        .arg("gen-data")
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    ["train", "holdout", "val"]
        .iter()
        .map(|s| std::fs::read(out.join("data").join(format!("{s}.shard"))).unwrap())
        .collect()
}

#[test]
fn criterion_3_runs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_data(&tmp.path().join("a"));
    let b = gen_data(&tmp.path().join("b"));
    let bytes: usize = a.iter().map(Vec::len).sum();
    let data_same = a == b;
    let c = tiny(DatasetConfig::compositional());
    let (x, y) = (distill_digest(&c), distill_digest(&c));
    let differing = x.iter().zip(&y).filter(|(p, q)| p != q).count();
    verdict(
        3,
        data_same && differing == 0 && x.len() == y.len(),
        format!(
            "default gen-data shards identical: {data_same} ({bytes} bytes); distill run: {differing} of {} logged values differ at 6 dp",
            x.len()
        ),
    );
}

fn student() -> Cell {
    Cell::new(1.0, 30.0)
}

fn cell<'a>(s: &'a SweepSummary, c: Cell) -> &'a CellSummary {
    s.cells.iter().find(|x| x.lambda == c.lambda && x.gamma == c.gamma).unwrap()
}

/// Default compositional preset, three seeds: baseline, λ = 1 γ = 30 student
/// and Omnivore, each evaluated with 1 and 4 clips.
fn compositional() -> &'static SweepSummary {
    static RUN: OnceLock<SweepSummary> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::preset("compositional").unwrap();
        let spec = SweepSpec {
            cells: vec![Cell::baseline(), student()],
            clips: vec![1, 4],
            omnivore: true,
            ..SweepSpec::table5()
        };
        let tmp = tempfile::tempdir().unwrap();
        let result = run_sweep(&cfg, &spec, tmp.path(), false).unwrap();
        summarize(&cfg, &spec, &result)
    })
}

#[test]
fn criterion_4_distillation_beats_baseline_on_unseen_nouns() {
    let s = compositional();
    let (st, bl) = (cell(s, student()), cell(s, Cell::baseline()));
    let gain = st.accuracy.mean - bl.accuracy.mean;
    verdict(
        4,
        gain >= 0.02 && st.ece.mean < bl.ece.mean,
        format!(
            "student top-1 {:.4} ± {:.4} vs baseline {:.4} ± {:.4} ({:+.1} points); ECE {:.4} vs {:.4}",
            st.accuracy.mean,
            st.accuracy.std,
            bl.accuracy.mean,
            bl.accuracy.std,
            100.0 * gain,
            st.ece.mean,
            bl.ece.mean
        ),
    );
}

fn best() -> Cell {
    Cell::new(0.8, 1.0)
}

/// Weak-spectro preset, three seeds: the weighted (λ = 0.8, γ = 1) and the
/// uniform KL-only (λ = 1, γ = 30) students.
fn weak_spectro() -> &'static SweepSummary {
    static RUN: OnceLock<SweepSummary> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::preset("weak-spectro").unwrap();
        let spec = SweepSpec {
            cells: vec![best(), student()],
            clips: vec![1],
            ..SweepSpec::table5()
        };
        let tmp = tempfile::tempdir().unwrap();
        let result = run_sweep(&cfg, &spec, tmp.path(), false).unwrap();
        summarize(&cfg, &spec, &result)
    })
}

fn teacher(s: &SweepSummary, m: Modality) -> &TeacherSummary {
    s.teachers.iter().find(|t| t.modality == m).unwrap()
}

#[test]
fn criterion_5_weighting_recovers_from_a_weak_teacher() {
    let s = weak_spectro();
    let (b, u) = (cell(s, best()), cell(s, student()));
    let (sp, fl) = (teacher(s, Modality::Spectro), teacher(s, Modality::Flow));
    verdict(
        5,
        b.accuracy.mean >= u.accuracy.mean && sp.weight_gamma1.mean < fl.weight_gamma1.mean,
        format!(
            "action top-1 {:.4} (λ 0.8, γ 1) vs {:.4} (λ 1, γ 30); w at γ = 1: spectro {:.4}, flow {:.4}",
            b.accuracy.mean, u.accuracy.mean, sp.weight_gamma1.mean, fl.weight_gamma1.mean,
        ),
    );
}

#[test]
fn weak_spectro_teacher_trails_flow_on_verbs() {
    let s = weak_spectro();
    let verb = |m| teacher(s, m).verb_top1.unwrap().mean;
    let (sp, fl) = (verb(Modality::Spectro), verb(Modality::Flow));
    assert!(sp <= fl - 0.15, "spectro {sp:.4} vs flow {fl:.4}");
}

#[test]
fn criterion_6_clip_robustness_and_omnivore() {
    let s = compositional();
    let (st, bl) = (cell(s, student()), cell(s, Cell::baseline()));
    let drop = |c: &CellSummary| c.clip_accuracy[&4].mean - c.clip_accuracy[&1].mean;
    let (ds, db) = (drop(st), drop(bl));
    let om = s.omnivore.unwrap();
    let ok = -ds <= -db + DEGRADATION_SLACK && st.accuracy.mean >= om.mean;
    // Soft criterion: reported, never fails the suite.
    report(
        6,
        if ok { "PASS" } else { "WARN" },
        &format!(
            "4 → 1 clips: student {:+.4}, baseline {:+.4}; student {:.4} vs omnivore {:.4}",
            -ds, -db, st.accuracy.mean, om.mean
        ),
    );
}

#[test]
fn criterion_7_sweep_table_structure() {
    let mut cfg = ExperimentConfig::preset("iid").unwrap();
    cfg.dataset = tiny(cfg.dataset);
    cfg.distill.holdout_size = cfg.dataset.holdout_size;
    cfg.train = TrainConfig { epochs: 1, batch_size: 8, ..cfg.train };
    let spec = SweepSpec { seeds: vec![0], clips: vec![1, 2], ..SweepSpec::table5() };
    let tmp = tempfile::tempdir().unwrap();
    let result = run_sweep(&cfg, &spec, tmp.path(), false).unwrap();
    let path = tmp.path().join("sweep.csv");
    write_csv(&path, &spec, &result.rows).unwrap();

    let mut reader = csv::Reader::from_path(&path).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let mut configs: Vec<(String, String, String)> = rows
        .iter()
        .map(|r| (r[col("objective")].to_string(), r[col("lambda")].to_string(), r[col("gamma")].to_string()))
        .collect();
    configs.dedup();
    let expected: Vec<(String, String, String)> = [
        ("L_CE", "0", ""),
        ("L_KL", "1", "30"),
        ("L_CE ∧ L_KL", "0.8", "30"),
        ("L_CE ∧ L_KL", "0.8", "3"),
        ("L_KL", "1", "1"),
        ("L_CE ∧ L_KL", "0.8", "1"),
        ("L_CE ∧ L_KL", "0.8", "0.33"),
    ]
    .iter()
    .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()))
    .collect();
    let num = |r: &csv::StringRecord, name: &str| r[col(name)].parse::<f64>().unwrap();
    let bins_ok = rows.iter().all(|r| r[col("num_bins")] == *"15" && (0.0..=1.0).contains(&num(r, "ece")));
    let action_ok = rows
        .iter()
        .all(|r| num(r, "action_top1") <= num(r, "noun_top1").min(num(r, "verb_top1")) + 1e-12);
    verdict(
        7,
        configs == expected && bins_ok && action_ok,
        format!(
            "{} rows, configs match: {}, K = 15 on every ECE: {bins_ok}, action ≤ min(noun, verb): {action_ok}",
            rows.len(),
            configs == expected
        ),
    );
}
