//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cici_core::dsp::{detect_beats, hrv_metrics, DftBasis, Temperature, HR_BAND_BPM};
use cici_core::gdc::{combine, grads_for};
use cici_core::gradcheck::finite_diff_check;
use cici_core::harness::{pass_running_mae, write_suite_outputs, ExperimentConfig, SuiteOutcome};
use cici_core::losses::{self_sim_matrix, self_sim_values, stfc_loss, stti_loss};
use cici_core::synth::{gen_beat_train, BeatTrainConfig, IbiModulation};
use cici_core::{
    augment, run_suite, BvpNetMini, GradientBundle, Graph, LabeledInstance, Mode, ModelConfig, RunConfig,
    StfcConfig, Stmap, SuiteSpec, Tensor,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn main() {
    let mut results = Vec::new();
    let mut record = |id: &str, title: &str, check: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "{} criterion {id} ({title}): {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        results.push(v.pass);
    };

    record("1", "gradient fidelity", &mut gradient_fidelity);
    record("2", "oracle equivalence", &mut oracle_equivalence);
    record("3", "GDC algebra", &mut gdc_algebra);
    record("4", "STFC gate", &mut stfc_gate);

    let experiment = ExperimentConfig::default();
    let pretrained = experiment.pretrain().expect("pretraining succeeds").0.model;
    let stream = experiment.target.instances().expect("target suite generates");
    let mut first_suite = None;
    record("5", "adaptation benefit", &mut || adaptation_benefit(&pretrained, &stream, &mut first_suite));
    record("6", "long-run stability", &mut || stability(&pretrained, &stream));
    record("7", "STTI vanishing gradient", &mut stti_scaling);
    record("8", "HRV band recovery", &mut hrv_recovery);
    record("9", "determinism", &mut || determinism(&pretrained, &stream, first_suite.take()));

    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn small_instance(seed: u64) -> LabeledInstance {
    let spec = SuiteSpec {
        seed,
        scenarios: 1,
        instances_per_scenario: 1,
        window: 128,
        ..SuiteSpec::target_default()
    };
    spec.instances().unwrap().remove(0)
}

fn model_loss(
    model: &BvpNetMini,
    x: &Stmap,
    xa: &Stmap,
    which: &str,
    tau: f64,
    with_grad: bool,
) -> (f64, Option<GradientBundle>, bool) {
    let basis = DftBasis::new(128, 30.0, HR_BAND_BPM).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let y = model.forward(&mut g, &bound, x).unwrap();
    let ya = model.forward(&mut g, &bound, xa).unwrap();
    let (loss, gate) = match which {
        "stfc" => {
            let cfg = StfcConfig {
                temperature: Temperature::Absolute(tau),
                ..StfcConfig::default()
            };
            let t = stfc_loss(&mut g, &basis, y, ya, &cfg).unwrap();
            (t.loss, t.gate_open)
        }
        _ => {
            let m = self_sim_matrix(&mut g, y, 32).unwrap();
            let ma = self_sim_matrix(&mut g, ya, 32).unwrap();
            (stti_loss(&mut g, m, ma).unwrap(), true)
        }
    };
    let value = g.scalar(loss);
    let grads = if with_grad { grads_for(&g, loss, &bound).ok() } else { None };
    (value, grads, gate)
}

fn gradient_fidelity() -> Verdict {
    let mut details = Vec::new();
    let mut pass = true;
    for which in ["stfc", "stti"] {
        // Pick the first seed whose augmented pair opens the STFC gate, so
        // the check exercises a nonzero gradient.
        let (model, x, xa, tau) = (0..20)
            .find_map(|seed| {
                let model = BvpNetMini::init(ModelConfig::default(), seed).unwrap();
                let inst = small_instance(100 + seed);
                let pair = augment(&inst.window, 128, seed).unwrap();
                let y = model.predict(&pair.x).unwrap();
                let basis = DftBasis::new(128, 30.0, HR_BAND_BPM).unwrap();
                let tau = 0.05 * basis.psd(&y.samples).unwrap().max_power();
                let (_, _, gate) = model_loss(&model, &pair.x, &pair.x_aug, "stfc", tau, false);
                gate.then_some((model, pair.x, pair.x_aug, tau))
            })
            .expect("some seed opens the gate");
        let start = Instant::now();
        let (_, grads, _) = model_loss(&model, &x, &xa, which, tau, true);
        let analytic = grads.unwrap().values;
        let params = model.flat_params();
        let mut probe = model.clone();
        let report = finite_diff_check(
            |p| {
                probe.set_flat_params(p).unwrap();
                model_loss(&probe, &x, &xa, which, tau, false).0
            },
            &analytic,
            &params,
            1e-5,
        )
        .unwrap();
        let elapsed = start.elapsed();
        let ok = report.max_relative_error <= 1e-4 && elapsed < Duration::from_secs(60);
        pass &= ok;
        details.push(format!(
            "{which}: max rel err {:.2e} over {} params in {:.1}s (worst #{}: analytic {:.4e}, numeric {:.4e})",
            report.max_relative_error,
            params.len(),
            elapsed.as_secs_f64(),
            report.worst_index,
            report.analytic,
            report.numeric
        ));
    }
    verdict(pass, details.join("; "))
}

// ---------------------------------------------------------------- 2

fn naive_psd(x: &[f64], bins: &[usize]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    bins.iter()
        .map(|&k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let phase = 2.0 * PI * k as f64 * t as f64 / n as f64;
                re += (v - mean) * phase.cos();
                im -= (v - mean) * phase.sin();
            }
            let p = (re * re + im * im) / n as f64;
            if 2 * k == n {
                p / 2.0
            } else {
                p
            }
        })
        .collect()
}

fn naive_self_sim(x: &[f64], s: usize) -> Vec<f64> {
    let n = x.len() - s + 1;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
            for k in 0..s {
                d += x[i + k] * x[j + k];
                a += x[i + k] * x[i + k];
                b += x[j + k] * x[j + k];
            }
            out[i * n + j] = if a > 0.0 && b > 0.0 { d / (a.sqrt() * b.sqrt()) } else { 0.0 };
        }
    }
    out
}

fn oracle_equivalence() -> Verdict {
    let mut psd_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = [64, 100, 128, 256, 300][seed as usize % 5];
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let basis = if seed % 2 == 0 {
            DftBasis::full_band(len, 30.0).unwrap()
        } else {
            DftBasis::new(len, 30.0, HR_BAND_BPM).unwrap()
        };
        let fast = basis.psd(&x).unwrap().power;
        let slow = naive_psd(&x, basis.bins());
        for (a, b) in fast.iter().zip(&slow) {
            psd_err = psd_err.max((a - b).abs() / b.abs().max(1e-300));
        }
    }
    let mut sim_err = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let len = rng.random_range(40..=128);
        let s = rng.random_range(2..=32);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = self_sim_values(&x, s).unwrap();
        let slow = naive_self_sim(&x, s);
        for (a, b) in fast.data().iter().zip(&slow) {
            sim_err = sim_err.max((a - b).abs());
        }
    }
    verdict(
        psd_err <= 1e-6 && sim_err <= 1e-6,
        format!("psd max rel err {psd_err:.2e} (100 signals), self-sim max err {sim_err:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

fn gdc_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sum_err = 0.0f64;
    let mut mix_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (stfc, stti) = (GradientBundle::from_values(a.clone()), GradientBundle::from_values(b.clone()));
        let c = combine(&stfc, &stti, true, 0.01).unwrap();
        sum_err = sum_err.max((c.lambda_stti + c.lambda_stfc - 1.0).abs());
        let c = combine(&stfc, &stti, false, 0.01).unwrap();
        for i in 0..n {
            mix_err = mix_err.max((c.gradient[i] - (0.01 * b[i] + a[i])).abs());
        }
    }
    let stti = GradientBundle::from_values(vec![3.0, 0.0]);
    let stfc = GradientBundle::from_values(vec![-1.0, 0.0]);
    let c = combine(&stfc, &stti, true, 0.01).unwrap();
    let exact = c.lambda_stti == 0.25 && c.lambda_stfc == 0.75;
    verdict(
        sum_err <= 1e-12 && mix_err <= 1e-12 && exact,
        format!(
            "|l1+l2-1| max {sum_err:.1e}, (G1,G2)=(3,1) -> ({}, {}), no-conflict max err {mix_err:.1e}",
            c.lambda_stti, c.lambda_stfc
        ),
    )
}

// ---------------------------------------------------------------- 4

fn stfc_gate() -> Verdict {
    let basis = DftBasis::new(128, 30.0, HR_BAND_BPM).unwrap();
    let inst = small_instance(7);
    let pair = augment(&inst.window, 128, 7).unwrap();
    let mut closed_nonzero = 0usize;
    let mut open_nonzero = 0usize;
    let mut cases = 0;
    for seed in 0..10 {
        let model = BvpNetMini::init(ModelConfig::default(), seed).unwrap();
        let run = |xa: &Stmap, psi: f64| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let y = model.forward(&mut g, &bound, &pair.x).unwrap();
            let ya = model.forward(&mut g, &bound, xa).unwrap();
            let cfg = StfcConfig {
                psi_bpm: psi,
                ..StfcConfig::default()
            };
            let t = stfc_loss(&mut g, &basis, y, ya, &cfg).unwrap();
            let b = grads_for(&g, t.loss, &bound).unwrap();
            (t.delta_bpm, b.values.iter().filter(|v| **v != 0.0).count())
        };
        // Identical views: delta is zero, below any positive threshold.
        let (d0, nz0) = run(&pair.x, 1.0);
        assert!(d0 < 1.0);
        closed_nonzero += nz0;
        let (delta, _) = run(&pair.x_aug, 1.0);
        if delta > 0.0 {
            let (_, nz_closed) = run(&pair.x_aug, delta * 1.5);
            let (_, nz_open) = run(&pair.x_aug, delta * 0.5);
            closed_nonzero += nz_closed;
            if nz_open > 0 {
                open_nonzero += 1;
            }
            cases += 1;
        }
    }
    verdict(
        closed_nonzero == 0 && cases > 0 && open_nonzero == cases,
        format!(
            "closed gate: {closed_nonzero} nonzero parameter gradients; open gate: nonzero in {open_nonzero}/{cases} models"
        ),
    )
}

// ---------------------------------------------------------------- 5, 6, 9

fn mean_post_mae(outcome: &SuiteOutcome, label: &str) -> f64 {
    let s = outcome.summaries.iter().find(|s| s.label == label).expect("label present");
    s.mae_post_mean
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn adaptation_benefit(
    model: &BvpNetMini,
    stream: &[LabeledInstance],
    keep: &mut Option<(SuiteOutcome, tempfile::TempDir)>,
) -> Verdict {
    let configs = [RunConfig::with_mode(Mode::NoAdapt), RunConfig::with_mode(Mode::Cici)];
    let start = Instant::now();
    let outcome = run_suite(model, stream, &configs, &SEEDS).unwrap();
    let elapsed = start.elapsed();
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    let base = mean_post_mae(&outcome, "no-adapt");
    let cici = mean_post_mae(&outcome, "cici");
    let reduction = (base - cici) / base;
    let per_seed: Vec<String> = outcome
        .reports
        .iter()
        .filter(|(l, _)| l == "cici")
        .map(|(_, r)| format!("{:.2}", r.summary.post.mae))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    write_suite_outputs(&outcome, dir.path()).unwrap();
    *keep = Some((outcome, dir));
    verdict(
        cici < base && reduction >= 0.10 && elapsed < Duration::from_secs(600),
        format!(
            "{} instances x 5 seeds: no-adapt MAE {base:.3}, cici MAE {cici:.3} (per seed [{}]), reduction {:.1}%, suite {:.0}s",
            stream.len(),
            per_seed.join(", "),
            100.0 * reduction,
            elapsed.as_secs_f64()
        ),
    )
}

fn stability(model: &BvpNetMini, stream: &[LabeledInstance]) -> Verdict {
    let cycles = 500usize.div_ceil(stream.len());
    let configs: Vec<RunConfig> = [Mode::Cici, Mode::StfcOnly]
        .into_iter()
        .map(|mode| RunConfig {
            cycles,
            ..RunConfig::with_mode(mode)
        })
        .collect();
    let outcome = run_suite(model, stream, &configs, &SEEDS).unwrap();
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    let finals = |label: &str| -> Vec<(f64, f64)> {
        outcome
            .reports
            .iter()
            .filter(|(l, _)| l == label)
            .map(|(_, r)| {
                let curve = pass_running_mae(&r.rows);
                let min = curve.iter().cloned().fold(f64::INFINITY, f64::min);
                (*curve.last().unwrap(), min)
            })
            .collect()
    };
    let cici = finals("cici");
    let stfc = finals("stfc-only");
    let worst_ratio = cici.iter().map(|(f, m)| f / m).fold(0.0, f64::max);
    let mean = |v: &[(f64, f64)]| v.iter().map(|(f, _)| f).sum::<f64>() / v.len() as f64;
    let (cm, sm) = (mean(&cici), mean(&stfc));
    let fmt = |v: &[(f64, f64)]| v.iter().map(|(f, _)| format!("{f:.2}")).collect::<Vec<_>>().join(", ");
    let stable = worst_ratio <= 1.25;
    let ordered = cm <= sm;
    verdict(
        stable && ordered,
        format!(
            "{} steps, running-MAE window {}: cici final/min max {worst_ratio:.3} ({}); final running MAE cici {cm:.3} [{}] vs stfc-only {sm:.3} [{}] ({})",
            cycles * stream.len(),
            stream.len(),
            if stable { "stable" } else { "unstable" },
            fmt(&cici),
            fmt(&stfc),
            if ordered { "ordered" } else { "cici worse than stfc-only" }
        ),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism(
    model: &BvpNetMini,
    stream: &[LabeledInstance],
    first: Option<(SuiteOutcome, tempfile::TempDir)>,
) -> Verdict {
    let (_, first_dir) = first.expect("criterion 5 produced a suite");
    let configs = [RunConfig::with_mode(Mode::NoAdapt), RunConfig::with_mode(Mode::Cici)];
    let outcome = run_suite(model, stream, &configs, &SEEDS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_suite_outputs(&outcome, dir.path()).unwrap();
    let (a, b) = (tree(first_dir.path()), tree(dir.path()));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    verdict(
        a.len() == b.len() && a.len() == 12 && differing.is_empty(),
        format!("{} files compared, {} differ {:?}", a.len(), differing.len(), differing),
    )
}

// ---------------------------------------------------------------- 7

fn stti_scaling() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 16;
    let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ma: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad_norm = |c: f64| -> (f64, f64) {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![n, n], m.iter().map(|v| v * c).collect()).unwrap());
        let b = g.param(Tensor::new(vec![n, n], ma.iter().map(|v| v * c).collect()).unwrap());
        let loss = stti_loss(&mut g, a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        let sq: f64 = [a, b]
            .iter()
            .flat_map(|v| grads.get_or_zeros(*v).into_data())
            .map(|x| x * x)
            .sum();
        (g.scalar(loss), sq.sqrt())
    };
    let (cos1, g1) = grad_norm(1.0);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for c in [10.0, 100.0] {
        let (cos, gc) = grad_norm(c);
        assert!((cos - cos1).abs() < 1e-12);
        let rel = (gc * c / g1 - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("c={c}: |g|*c/|g1| = {:.4}", gc * c / g1));
    }
    verdict(worst <= 0.05, format!("cos {cos1:.4}; {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 8

fn hrv_for(mods: Vec<IbiModulation>) -> cici_core::HrvMetrics {
    let train = gen_beat_train(&BeatTrainConfig {
        modulations: mods,
        ..BeatTrainConfig::default()
    });
    let beats = detect_beats(&train.signal).unwrap();
    hrv_metrics(&beats, train.signal.frame_rate_hz).unwrap()
}

fn hrv_recovery() -> Verdict {
    let m = |freq_hz: f64| IbiModulation {
        freq_hz,
        amplitude_s: 0.05,
    };
    let lf = hrv_for(vec![m(0.10)]);
    let hf = hrv_for(vec![m(0.30)]);
    let both = hrv_for(vec![m(0.10), m(0.30)]);
    verdict(
        lf.lfnu >= 0.9 && hf.hfnu >= 0.9 && (0.8..=1.25).contains(&both.lf_hf_ratio),
        format!(
            "0.10 Hz LFnu {:.3}; 0.30 Hz HFnu {:.3}; equal mix LF/HF {:.3}",
            lf.lfnu, hf.hfnu, both.lf_hf_ratio
        ),
    )
}
