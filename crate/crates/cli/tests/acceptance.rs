//! Acceptance criteria 1 to 8. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Criteria 5, 6 and 8 train 60 networks twice and take several minutes in
//! a release-optimized build.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use invarcast_cli::config::ExperimentConfig;
use invarcast_cli::run::{REPORT_CSV, SEED_CURVES_CSV, SUMMARY_CSV};
use invarcast_cli::{eval, oracle_check, run, OracleOptions, RealData, RunOutput};
use invarcast_core::diffnum::{DiffError, Tape, Tensor, Var};
use invarcast_core::ingest::{fill_missing, load_csv, partition_environments, write_csv, Grouping, LocationSeries};
use invarcast_core::invariance::{irm_penalty_mse, irm_penalty_on, LambdaSchedule};
use invarcast_core::models::{Activation, Arch, Cell, Forecaster, ModelConfig};
use invarcast_core::rng::Stream;
use invarcast_core::semgen::{generate_static, EnvType, Role, SemConfig};
use invarcast_core::training::{fit_linear, prepare_suite, EnvSeries, Mode, TargetKind, TrainConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= budget, || format!("took {:.1}s, budget {}s", took.as_secs_f64(), budget.as_secs()))
}

fn random(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Check {
    let start = Instant::now();
    let opts = OracleOptions { samples: 100_000, seed: 2024, ..OracleOptions::default() };
    let rows = oracle_check(&opts).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for &s in &opts.sigma2 {
        // closed forms restated here, independent of the library
        let expected = [
            ("alpha1_only", "alpha1", 1.0),
            ("alpha2_only", "alpha2", s / (s + 0.5)),
            ("joint", "alpha1", 1.0 / (s + 1.0)),
            ("joint", "alpha2", s / (s + 1.0)),
        ];
        for (form, coef, want) in expected {
            let row = rows
                .iter()
                .find(|r| r.sigma2 == s && r.form == form && r.coefficient == coef)
                .ok_or_else(|| format!("missing row sigma2={s} {form} {coef}"))?;
            let got = row.empirical.ok_or_else(|| format!("sigma2={s} {form} {coef}: no estimate"))?;
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 0.02, || format!("sigma2={s} {form} {coef}: {got:.4} vs {want:.4}"))?;
        }
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("16 coefficients, max |error| {worst:.4}, {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 2

/// `sum_j (dR/dw_j)^2` at `w = 1` for `R(w) = mean((w_j H_bj - T_bj)^2)`,
/// by central differences.
fn penalty_by_differences(h: &Tensor, t: &Tensor) -> f64 {
    let m = h.cols();
    let n = h.len() as f64;
    let risk = |col: usize, w: f64| -> f64 {
        h.data()
            .iter()
            .zip(t.data())
            .enumerate()
            .map(|(i, (&hv, &tv))| {
                let wi = if i % m == col { w } else { 1.0 };
                (wi * hv - tv).powi(2)
            })
            .sum::<f64>()
            / n
    };
    let eps = 1e-4;
    (0..m).map(|j| ((risk(j, 1.0 + eps) - risk(j, 1.0 - eps)) / (2.0 * eps)).powi(2)).sum()
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = Stream::new(77);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let b = 1 + rng.index(48);
        let m = 1 + rng.index(6);
        let h = random(&[b, m], &mut rng);
        let t = random(&[b, m], &mut rng);
        let fd = penalty_by_differences(&h, &t);
        let analytic = irm_penalty_mse(&h, &t).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone()).map_err(|e| e.to_string())?;
        let p = irm_penalty_on(&mut tape, hv, &t).map_err(|e| e.to_string())?;
        let on_tape = tape.value(p).item();
        for (name, v) in [("value", analytic), ("tape", on_tape)] {
            let rel = (v - fd).abs() / fd.abs().max(1e-12);
            worst = worst.max(rel);
            ensure(rel < 1e-6, || format!("batch {i} ({name}): {v:e} vs {fd:e}, rel {rel:e}"))?;
        }
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok(format!("100 batches, max rel error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn static_env(sigma2: f64, seed: u64, n: usize) -> (Tensor, Tensor) {
    let s = generate_static(&SemConfig::static_model(sigma2, seed).with_length(n)).unwrap();
    let design = s.x().iter().zip(s.z()).flat_map(|(&x, &z)| [x, z]).collect();
    (Tensor::matrix(n, 2, design), Tensor::matrix(n, 1, s.y().to_vec()))
}

/// Two-column least squares through the 2x2 normal equations.
fn ols2(design: &[f64], y: &[f64]) -> [f64; 2] {
    let (mut a, mut b, mut c, mut p, mut q) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (row, &yv) in design.chunks(2).zip(y) {
        a += row[0] * row[0];
        b += row[0] * row[1];
        c += row[1] * row[1];
        p += row[0] * yv;
        q += row[1] * yv;
    }
    let det = a * c - b * b;
    [(c * p - b * q) / det, (a * q - b * p) / det]
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let n = 20_000;
    let envs = vec![static_env(0.1, 31, n), static_env(1.0, 32, n)];
    let irm = fit_linear(&envs, LambdaSchedule::default(), 40, 20, 1e-2).map_err(|e| e.to_string())?;
    let (a1, a2) = (irm.coefficients[0], irm.coefficients[1]);
    ensure((a1 - 1.0).abs() <= 0.1 && a2.abs() <= 0.1, || format!("IRM gave ({a1:.3}, {a2:.3})"))?;

    let erm = fit_linear(&envs, LambdaSchedule::ZERO, 40, 20, 1e-2).map_err(|e| e.to_string())?;
    let design: Vec<f64> = envs.iter().flat_map(|e| e.0.data().to_vec()).collect();
    let y: Vec<f64> = envs.iter().flat_map(|e| e.1.data().to_vec()).collect();
    let pooled = ols2(&design, &y);
    let gap = (erm.coefficients[1] - pooled[1]).abs();
    ensure(gap <= 0.05, || format!("ERM alpha2 {:.3} vs pooled OLS {:.3}", erm.coefficients[1], pooled[1]))?;
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("IRM ({a1:.3}, {a2:.3}); ERM alpha2 {:.3} vs OLS {:.3}", erm.coefficients[1], pooled[1]))
}

// ---------------------------------------------------------------- 4

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)` over
/// every element of every input, with central differences of step `eps`.
fn max_rel_error(f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>, inputs: &[Tensor], eps: f64) -> Result<f64, String> {
    let value = |inputs: &[Tensor]| -> Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).data().to_vec();
        for (j, &analytic) in g.iter().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let bump = |t: &mut Tensor, d: f64| {
                let mut data = t.data().to_vec();
                data[j] += d;
                *t = Tensor::new(t.shape().to_vec(), data).unwrap();
            };
            bump(&mut plus[i], eps);
            bump(&mut minus[i], -eps);
            let numeric = (value(&plus)? - value(&minus)?) / (2.0 * eps);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
        }
    }
    Ok(worst)
}

/// Reduces any output to a scalar through a fixed random weighting.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = tape.value(y).shape().to_vec();
    let w = random(&shape, &mut Stream::new(seed));
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Primitive = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>>, Vec<Vec<usize>>);

fn primitives() -> Vec<Primitive> {
    fn op(f: impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + 'static) -> Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>> {
        Box::new(move |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, 5)
        })
    }
    vec![
        ("add", op(|t, v| t.add(v[0], v[1])), vec![vec![3, 4], vec![3, 4]]),
        ("sub", op(|t, v| t.sub(v[0], v[1])), vec![vec![3, 4], vec![3, 4]]),
        ("mul", op(|t, v| t.mul(v[0], v[1])), vec![vec![3, 4], vec![3, 4]]),
        ("add_row", op(|t, v| t.add_row(v[0], v[1])), vec![vec![3, 4], vec![4]]),
        ("mul_row", op(|t, v| t.mul_row(v[0], v[1])), vec![vec![3, 4], vec![4]]),
        ("scale", op(|t, v| t.scale(v[0], -1.7)), vec![vec![2, 5]]),
        ("sigmoid", op(|t, v| t.sigmoid(v[0])), vec![vec![3, 4]]),
        ("tanh", op(|t, v| t.tanh(v[0])), vec![vec![3, 4]]),
        ("relu", op(|t, v| t.relu(v[0])), vec![vec![3, 4]]),
        ("square", op(|t, v| t.square(v[0])), vec![vec![3, 4]]),
        ("matmul", op(|t, v| t.matmul(v[0], v[1])), vec![vec![3, 4], vec![4, 2]]),
        ("matmul_nt", op(|t, v| t.matmul_nt(v[0], v[1])), vec![vec![3, 4], vec![5, 4]]),
        ("batched_matmul", op(|t, v| t.batched_matmul(v[0], v[1])), vec![vec![2, 3, 4], vec![2, 4, 2]]),
        ("batched_matmul_nt", op(|t, v| t.batched_matmul_nt(v[0], v[1])), vec![vec![2, 3, 4], vec![2, 5, 4]]),
        ("softmax_rows", op(|t, v| t.softmax_rows(v[0])), vec![vec![3, 5]]),
        ("layer_norm_rows", op(|t, v| t.layer_norm_rows(v[0], 1e-5)), vec![vec![3, 5]]),
        ("reshape", op(|t, v| t.reshape(v[0], &[4, 3])), vec![vec![2, 6]]),
        ("slice_cols", op(|t, v| t.slice_cols(v[0], 1, 3)), vec![vec![3, 5]]),
        ("concat_cols", op(|t, v| t.concat_cols(&[v[0], v[1]])), vec![vec![3, 2], vec![3, 4]]),
        ("select_rows", op(|t, v| t.select_rows(v[0], &[2, 0, 2])), vec![vec![3, 4]]),
        ("sum", op(|t, v| t.sum(v[0])), vec![vec![3, 4]]),
        ("mean", op(|t, v| t.mean(v[0])), vec![vec![3, 4]]),
        ("sum_rows", op(|t, v| t.sum_rows(v[0])), vec![vec![3, 4]]),
    ]
}

/// Forecaster gradient error: the loss is a random weighting of the logits,
/// perturbed through the parameter store.
fn forecaster_error(cfg: &ModelConfig) -> Result<f64, String> {
    let (d, k, b, t) = (2, 2, 3, 4);
    let mut rng = Stream::new(11);
    let inputs = random(&[b, t, d], &mut rng);
    let model = Forecaster::new(cfg, d, k, 3).map_err(|e| e.to_string())?;
    let weights = random(&[b, d * k], &mut rng);
    let loss_of = |m: &Forecaster| -> f64 {
        let y = m.predict(&inputs).unwrap();
        y.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
    };

    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape).map_err(|e| e.to_string())?;
    let y = model.forward(&mut tape, &vars, &inputs).map_err(|e| e.to_string())?;
    let w = tape.constant(weights.clone()).unwrap();
    let p = tape.mul(y, w).unwrap();
    let loss = tape.sum(p).unwrap();
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).data().to_vec()).collect();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().values_mut().nth(i).unwrap()[j] += delta;
                loss_of(&m)
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
    }
    Ok(worst)
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let mut rng = Stream::new(4);
    let mut prim_worst: f64 = 0.0;
    for (name, f, shapes) in primitives() {
        // keep relu probes away from its kink
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random(s, &mut rng).map(|v| if name == "relu" && v.abs() < 0.05 { v + 0.1 } else { v }))
            .collect();
        let err = max_rel_error(&*f, &inputs, 1e-6)?;
        prim_worst = prim_worst.max(err);
        ensure(err < 1e-5, || format!("primitive {name}: rel error {err:.2e}"))?;
    }
    let models = [
        ("lstm", ModelConfig { hidden: 3, ..Default::default() }),
        ("elman", ModelConfig { cell: Cell::Elman, activation: Activation::Tanh, hidden: 3, ..Default::default() }),
        ("transformer", ModelConfig { arch: Arch::Transformer, width: 4, heads: 2, layers: 2, ffn: 5, ..Default::default() }),
    ];
    let mut model_worst: f64 = 0.0;
    for (name, cfg) in models {
        let err = forecaster_error(&cfg)?;
        model_worst = model_worst.max(err);
        ensure(err < 1e-4, || format!("{name}: rel error {err:.2e}"))?;
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("{} primitives max {prim_worst:.1e}; forecasters max {model_worst:.1e}", primitives().len()))
}

// ---------------------------------------------------------------- 5, 6, 8

struct SyntheticRuns {
    dir: PathBuf,
    runs: BTreeMap<&'static str, RunOutput>,
    elapsed: Duration,
}

fn run_presets(root: &Path) -> Result<SyntheticRuns, String> {
    let start = Instant::now();
    let mut runs = BTreeMap::new();
    for preset in EnvType::ALL {
        let config = ExperimentConfig { preset: Some(preset), ..ExperimentConfig::default() };
        let out = root.join(format!("env-type-{}", preset.label()));
        let result = run(&config, &out).map_err(|e| format!("Env-Type={preset}: {e:#}"))?;
        runs.insert(preset.label(), result);
    }
    Ok(SyntheticRuns { dir: root.to_path_buf(), runs, elapsed: start.elapsed() })
}

fn criterion_5(runs: &Result<SyntheticRuns, String>) -> Check {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for (label, out) in &runs.runs {
        for arch in [Arch::Recurrent, Arch::Transformer] {
            let report = out.report(arch).ok_or("missing report")?;
            for metric in ["mse", "mae"] {
                let get = |mode| report.get(mode, "et", metric).map(|r| r.mean).ok_or(format!("no {metric} row"));
                let (erm, irm) = (get(Mode::Erm)?, get(Mode::Irm)?);
                let gain = (erm - irm) / erm;
                notes.push(format!("{label}/{}/{metric} {:+.1}%", arch.label(), 100.0 * gain));
                if irm >= erm {
                    failures.push(format!("Env-Type={label} {} {metric}: IRM {irm:.6} >= ERM {erm:.6}", arch.label()));
                } else if *label == "2" && metric == "mse" && gain < 0.10 {
                    failures.push(format!("Env-Type=2 {} mse: improvement {:.1}% < 10%", arch.label(), 100.0 * gain));
                }
            }
        }
    }
    if runs.elapsed > Duration::from_secs(30 * 60) {
        failures.push(format!("took {:.0}s, budget 1800s", runs.elapsed.as_secs_f64()));
    }
    let detail = format!("IRM gain vs ERM: {} ({:.0}s)", notes.join(", "), runs.elapsed.as_secs_f64());
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

/// Final-epoch test MSE per (mode, seed) read back from the emitted CSV.
fn final_epoch_mse(path: &Path) -> Result<BTreeMap<(String, usize), f64>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut last: BTreeMap<(String, usize), (usize, f64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let seed: usize = rec[0].parse().map_err(|_| "bad seed")?;
        let epoch: usize = rec[1].parse().map_err(|_| "bad epoch")?;
        let mse: f64 = rec[3].parse().map_err(|_| "bad mse")?;
        let e = last.entry((rec[2].to_string(), seed)).or_insert((epoch, mse));
        if epoch >= e.0 {
            *e = (epoch, mse);
        }
    }
    Ok(last.into_iter().map(|(k, (_, v))| (k, v)).collect())
}

fn criterion_6(runs: &Result<SyntheticRuns, String>) -> Check {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let out = &runs.runs["2"];
    let mut notes = Vec::new();
    let mut ok = true;
    for arch in [Arch::Recurrent, Arch::Transformer] {
        let finals = final_epoch_mse(&out.dir.join(arch.label()).join(SEED_CURVES_CSV))?;
        let wins = (0..5)
            .filter(|&s| match (finals.get(&("irm".into(), s)), finals.get(&("erm".into(), s))) {
                (Some(i), Some(e)) => i < e,
                _ => false,
            })
            .count();
        ok &= wins >= 4;
        notes.push(format!("{}: IRM below ERM at final epoch in {wins}/5 seeds", arch.label()));
    }
    if ok {
        Ok(notes.join("; "))
    } else {
        Err(notes.join("; "))
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_8(first: &Result<SyntheticRuns, String>, root: &Path) -> Check {
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = run_presets(root)?;
    let (a, b) = (files_under(&first.dir), files_under(&second.dir));
    ensure(a == b, || format!("file sets differ: {} vs {}", a.len(), b.len()))?;
    for rel in &a {
        let same = fs::read(first.dir.join(rel)).ok() == fs::read(second.dir.join(rel)).ok();
        ensure(same, || format!("{} differs", rel.display()))?;
    }
    Ok(format!("{} files byte-identical across two runs", a.len()))
}

// ---------------------------------------------------------------- 7

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/three_stations.csv")
}

fn criterion_7(root: &Path) -> Check {
    let series = load_csv(fixture()).map_err(|e| e.to_string())?;
    ensure(series.len() == 3, || format!("expected 3 stations, got {}", series.len()))?;

    // round trip
    let mut buf = Vec::new();
    write_csv(&series, &mut buf).map_err(|e| e.to_string())?;
    let copy = root.join("copy.csv");
    fs::write(&copy, &buf).map_err(|e| e.to_string())?;
    ensure(load_csv(&copy).map_err(|e| e.to_string())? == series, || "round trip changed the series".into())?;

    // missing data: bj-0 has a 2-hour pm25 hole, sz-1 is missing hours 120..128
    let by_id: BTreeMap<&str, &LocationSeries> = series.iter().map(|s| (s.station_id.as_str(), s)).collect();
    let bj = fill_missing(by_id["bj-0"], 21).map_err(|e| e.to_string())?;
    ensure(bj.len() == 1 && bj[0].len() == 240, || "bj-0 should stay one 240-hour series".into())?;
    ensure(bj[0].values[0][30] == by_id["bj-0"].values[0][29] && bj[0].values[0][31] == bj[0].values[0][29], || "pm25 gap not forward-filled".into())?;
    let sz = fill_missing(by_id["sz-1"], 21).map_err(|e| e.to_string())?;
    let lens: Vec<usize> = sz.iter().map(LocationSeries::len).collect();
    ensure(lens == [120, 112], || format!("sz-1 segments {lens:?}, expected [120, 112]"))?;
    ensure(fill_missing(by_id["sz-1"], 121).map_err(|e| e.to_string())?.is_empty(), || "short segments should be dropped".into())?;

    // partition
    for (grouping, keys) in [(Grouping::ByStation, vec!["bj-0", "gz-1", "sz-1"]), (Grouping::ByCity, vec!["BJ", "GZ", "SZ"])] {
        let envs = partition_environments(series.clone(), grouping);
        ensure(envs.keys().map(String::as_str).eq(keys.iter().copied()), || format!("{grouping:?} keys {:?}", envs.keys()))?;
        let mut flat: Vec<String> = envs.into_values().flatten().map(|s| s.station_id).collect();
        flat.sort();
        ensure(flat == ["bj-0", "gz-1", "sz-1"], || format!("{grouping:?} flatten gave {flat:?}"))?;
    }

    // train-only normalization: an outlier in the test city leaves the transform alone
    let as_envs = |poison: bool| -> Vec<EnvSeries> {
        let mut list = Vec::new();
        for (city, role) in [("BJ", Role::Test), ("GZ", Role::Train), ("SZ", Role::Train)] {
            let mut segs = Vec::new();
            for s in series.iter().filter(|s| s.city == city) {
                for piece in fill_missing(s, 21).unwrap() {
                    let mut t = piece.to_tensor().unwrap().into_data();
                    if poison && role == Role::Test {
                        t[5] = 1e12;
                    }
                    segs.push(Tensor::matrix(6, piece.len(), t));
                }
            }
            list.push(EnvSeries { env_id: city.into(), role, segments: segs });
        }
        list
    };
    let clean = prepare_suite(&as_envs(false), 20, 1, 1, TargetKind::Delta).ok_or("no suite")?;
    let poisoned = prepare_suite(&as_envs(true), 20, 1, 1, TargetKind::Delta).ok_or("no suite")?;
    ensure(clean.normalizer == poisoned.normalizer, || "test data changed the normalizer".into())?;

    // end-to-end run on the fixture: SZ + GZ train, BJ test
    let config = ExperimentConfig {
        preset: None,
        real: Some(RealData { paths: vec![fixture()], grouping: Grouping::ByCity, test_envs: vec!["BJ".into()], train_envs: None }),
        replicates: 2,
        train: TrainConfig {
            model: ModelConfig { hidden: 8, width: 8, heads: 2, layers: 1, ffn: 16, ..Default::default() },
            epochs: 3,
            steps_per_epoch: 4,
            batch_size: 8,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let out = root.join("real-run");
    let result = run(&config, &out).map_err(|e| format!("{e:#}"))?;
    ensure(result.test_envs == ["BJ"], || format!("test envs {:?}", result.test_envs))?;
    for arch in [Arch::Recurrent, Arch::Transformer] {
        let text = fs::read_to_string(out.join(arch.label()).join(REPORT_CSV)).map_err(|e| e.to_string())?;
        let mut lines = text.lines();
        ensure(lines.next() == Some("mode,env_id,metric,mean,std"), || "bad report header".into())?;
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        // 2 modes x 3 envs x 2 metrics
        ensure(rows.len() == 12, || format!("{} report rows", rows.len()))?;
        for r in &rows {
            let finite = r.len() == 5 && r[3].parse::<f64>().is_ok_and(f64::is_finite) && r[4].parse::<f64>().is_ok_and(|s| s >= 0.0);
            ensure(finite, || format!("bad row {r:?}"))?;
        }
    }
    let summary = fs::read_to_string(out.join(SUMMARY_CSV)).map_err(|e| e.to_string())?;
    ensure(summary.lines().count() == 5, || "summary should list 4 models".into())?;
    let evaluated = eval(&out, None, &out).map_err(|e| format!("{e:#}"))?;
    ensure(evaluated.len() == 2 * 2 * 2 * 3, || format!("{} eval rows", evaluated.len()))?;
    Ok("round trip, gap fill/split, partition, train-only transform, 3-station run + eval".into())
}

// ----------------------------------------------------------------

fn record(results: &mut Vec<bool>, n: usize, name: &str, f: impl FnOnce() -> Check) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
        Err(detail) => println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let _ = env_logger::builder().is_test(true).filter_level(log::LevelFilter::Warn).try_init();
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();

    record(&mut results, 1, "oracle equivalence", criterion_1);
    record(&mut results, 2, "IRM penalty correctness", criterion_2);
    record(&mut results, 3, "linear IRM invariant recovery", criterion_3);
    record(&mut results, 4, "gradient suite", criterion_4);
    let mut runs = Err("preset runs did not finish".to_string());
    record(&mut results, 5, "ERM vs IRM ordering", || {
        runs = run_presets(&tmp.path().join("first"));
        criterion_5(&runs)
    });
    record(&mut results, 6, "final-epoch curve shape", || criterion_6(&runs));
    record(&mut results, 7, "ingestion and real-data pipeline", || {
        let dir = tmp.path().join("ingest");
        fs::create_dir_all(&dir).unwrap();
        criterion_7(&dir)
    });
    record(&mut results, 8, "determinism", || criterion_8(&runs, &tmp.path().join("second")));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    // exit() skips destructors
    drop(tmp);
    if passed != results.len() {
        std::process::exit(1);
    }
}
