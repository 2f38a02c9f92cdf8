//! Acceptance criteria 1-10. Each test prints one `C<k> PASS|FAIL` line with
//! the measured quantities, then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command as Process;
use std::time::Instant;

use fim_core::bayesopt::{optimize, BoProblem, BoSettings};
use fim_core::bench::{
    estimation_case, run_nmse_sweep, run_power_vs_paths, run_runtime, Experiment, ExperimentConfig, Preset,
};
use fim_core::estimation::{evaluate_nmse, AngleGrid, SparseProblem};
use fim_core::interference::{
    expected_bounds, monte_carlo_bounds, pbf_only_objective, solve_multi_element_single_path,
    solve_single_element_two_paths_em, Mode,
};
use fim_core::linalg::CMatrix;
use fim_core::mc::{derive_seed, median, rng_from_seed};
use fim_core::model::{cascaded_channel, complex_gaussian, received_power, Aperture, ChannelSpec};
use fim_core::recovery::{recover, Algorithm, RecoverySettings, SblEngine, SblHyperparams, SblVariant};
use fim_core::Complex64;

use rand::Rng;

const LAM: f64 = 0.03;

// Written to the stderr handle directly: the test harness only captures the
// print macros, so the verdict lines show up in a plain `cargo test` log.
fn report(id: u32, pass: bool, detail: String) {
    let line = format!("\nC{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[test]
fn c01_closed_form_optimality() {
    let start = Instant::now();
    // unbounded region: the alignment lines of any nonzero angle are reachable
    let ap = Aperture::new(LAM, f64::INFINITY, LAM / 2.0).unwrap();
    let spec = ChannelSpec::new(1, 1, 1.0, 1.0, 1.0);
    let mut worst_sum = 0.0f64;
    let mut worst_obj = 0.0f64;
    let mut solved = 0usize;
    for n in [1usize, 4] {
        for draw in 0..1000u64 {
            let ch = spec.sample_seeded(derive_seed(1, n as u64, draw)).unwrap();
            let g = ch.cascaded().gains[0].norm();
            let gamma = ch.direct();
            let want = (n as f64 * g + gamma.norm()).powi(2);
            for mode in Mode::ALL {
                let sol = solve_multi_element_single_path(&ch, n, &ap, mode).unwrap();
                let h = cascaded_channel(&sol.geometry, &sol.phases, &ch).unwrap();
                worst_sum = worst_sum.max(((h + gamma).norm() - (h.norm() + gamma.norm())).abs());
                let f = received_power(&sol.geometry, &sol.phases, &ch).unwrap();
                worst_obj = worst_obj.max((f - want).abs()).max((sol.objective - want).abs());
                solved += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_sum < 1e-9 && worst_obj < 1e-9 && secs < 5.0;
    report(1, pass, format!("solutions={solved} max|sum gap|={worst_sum:.2e} max|objective gap|={worst_obj:.2e} time={secs:.2}s"));
    assert!(pass);
}

#[test]
fn c02_em_dominates_pbf_for_two_paths() {
    let start = Instant::now();
    let ap = Aperture::new(LAM, f64::INFINITY, 0.0).unwrap();
    let spec = ChannelSpec::new(1, 2, 1.0, 1.0, 1.0);
    let (mut violations, mut strict) = (0usize, 0usize);
    let draws = 1000u64;
    for draw in 0..draws {
        let ch = spec.sample_seeded(derive_seed(2, 0, draw)).unwrap();
        let em = solve_single_element_two_paths_em(&ch, &ap).unwrap();
        let f_em = received_power(&em.geometry, &em.phases, &ch).unwrap();
        let f_pbf = pbf_only_objective(&ch, 1);
        if f_em < f_pbf - 1e-9 {
            violations += 1;
        }
        if f_em > f_pbf + 1e-9 {
            strict += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let frac = strict as f64 / draws as f64;
    let pass = violations == 0 && frac > 0.99 && secs < 10.0;
    report(2, pass, format!("violations={violations} strict={frac:.3} time={secs:.2}s"));
    assert!(pass);
}

#[test]
fn c03_expected_power_formulas() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (case, (l, p, n)) in [1usize, 2, 4]
        .into_iter()
        .flat_map(|l| [1usize, 2, 4].into_iter().flat_map(move |p| [1usize, 2].into_iter().map(move |n| (l, p, n))))
        .enumerate()
    {
        let mc = monte_carlo_bounds(l, p, n, (1.0, 1.0, 1.0), 1_000_000, derive_seed(3, 0, case as u64));
        let th = expected_bounds(l, p, n, 1.0, 1.0, 1.0);
        let e_pbf = (mc.pbf.mean - th.pbf).abs() / th.pbf;
        let e_ub = (mc.upper.mean - th.upper).abs() / th.upper;
        worst = worst.max(e_pbf).max(e_ub);
        if e_pbf >= 0.01 || e_ub >= 0.01 || mc.violations > 0 {
            lines.push(format!("(L={l},P={p},N={n}) pbf {:.4}/{:.4} ub {:.4}/{:.4}", mc.pbf.mean, th.pbf, mc.upper.mean, th.upper));
        }
    }
    let spot = expected_bounds(1, 1, 1, 1.0, 1.0, 1.0).pbf;
    let spot_mc = monte_carlo_bounds(1, 1, 1, (1.0, 1.0, 1.0), 1_000_000, 33).pbf.mean;
    let spot_ok = (spot - 3.392).abs() <= 0.034 && (spot_mc - 3.392).abs() <= 0.034;
    let secs = start.elapsed().as_secs_f64();
    let pass = lines.is_empty() && spot_ok && secs < 120.0;
    report(
        3,
        pass,
        format!("max rel err={worst:.4} spot theory={spot:.4} mc={spot_mc:.4} time={secs:.1}s {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn c04_power_versus_paths() {
    let start = Instant::now();
    let cfg = ExperimentConfig::defaults_for(Experiment::PowerVsPaths);
    assert_eq!((cfg.channel.bs_paths, cfg.channel.elements, cfg.trials, cfg.closed_form_trials, cfg.bo.budget), (1, 1, 100, 10_000, 200));
    assert_eq!(cfg.aperture.region_wavelengths, 1.0);
    let out = run_power_vs_paths(&cfg).unwrap();
    let t = out.artifact.table().unwrap();
    let col = |c: &str| t.column(c).unwrap();
    let (paths, pbf, em, empbf, theory) =
        (col("paths"), col("pbf_only_power_mean"), col("em_only_power_mean"), col("em_pbf_power_mean"), col("theory_pbf_power_mean"));
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..paths.len() {
        let rel = (pbf[i] - theory[i]).abs() / theory[i];
        worst = worst.max(rel);
        if rel >= 0.02 {
            bad.push(format!("P={} pbf {:.3} vs {:.3}", paths[i], pbf[i], theory[i]));
        }
        if paths[i] >= 2.0 && !(empbf[i] >= em[i] && em[i] >= pbf[i]) {
            bad.push(format!("P={} order em_pbf {:.3} em {:.3} pbf {:.3}", paths[i], empbf[i], em[i], pbf[i]));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs < 1800.0;
    report(4, pass, format!("max pbf rel err={worst:.4} time={secs:.0}s {}", bad.join("; ")));
    assert!(pass);
}

#[test]
fn c05_noiseless_exact_recovery() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::defaults_for(Experiment::NmseVsQ);
    cfg.protocol.snr_db = None;
    let settings = RecoverySettings { sparsity: 17, ..cfg.recovery };
    let algs = [Algorithm::Omp, Algorithm::Vsbl, Algorithm::Mfvsbl, Algorithm::Cmfvsbl];
    let mut hits = [0usize; 4];
    for trial in 0..100u64 {
        let case = estimation_case(&cfg, None, 16, None, trial).unwrap();
        assert_eq!((case.problem.rows(), case.problem.atoms()), (144, 145));
        for (k, a) in algs.iter().enumerate() {
            let s = RecoverySettings { cluster_seed: derive_seed(5, 0, trial), ..settings };
            let r = recover(&case.problem, *a, &s).unwrap();
            let n = evaluate_nmse(&r, &case.channel, &case.problem).unwrap();
            if n.cascaded < 1e-4 && n.direct < 1e-4 {
                hits[k] += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = hits.iter().all(|&h| h >= 95) && secs < 600.0;
    let detail: Vec<String> = algs.iter().zip(&hits).map(|(a, h)| format!("{}={h}/100", a.label())).collect();
    report(5, pass, format!("{} time={secs:.0}s", detail.join(" ")));
    assert!(pass);
}

#[test]
fn c06_nmse_ordering() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::defaults_for(Experiment::NmseVsQ);
    cfg.protocol.snr_db = Some(20.0);
    cfg.trials = 200;
    cfg.sweep = vec![8.0, 16.0];
    cfg.algorithms = vec![Algorithm::Omp, Algorithm::Mfvsbl, Algorithm::Cmfvsbl];
    let out = run_nmse_sweep(&cfg).unwrap();
    let t = out.artifact.table().unwrap();
    let at = |alg: &str, kind: &str, row: usize| t.column(&format!("{alg}_{kind}_nmse_mean")).unwrap()[row];
    let mut bad = Vec::new();
    let mut parts = Vec::new();
    for kind in ["cascaded", "direct"] {
        let (c, m, o) = (at("cmfvsbl", kind, 1), at("mfvsbl", kind, 1), at("omp", kind, 1));
        parts.push(format!("{kind} Q16 cmfv={:.1}dB mfv={:.1}dB omp={:.1}dB", db(c), db(m), db(o)));
        if !(c <= m && m <= o) {
            bad.push(format!("{kind} ordering"));
        }
        let gap = db(at("cmfvsbl", kind, 0)) - db(c);
        parts.push(format!("{kind} cmfv Q8-Q16={gap:.1}dB"));
        if gap.abs() > 10.0 {
            bad.push(format!("{kind} Q8 gap"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs < 1800.0;
    report(6, pass, format!("{} time={secs:.0}s {}", parts.join(" "), bad.join("; ")));
    assert!(pass);
}

fn random_problem(m: usize, g: usize, seed: u64) -> SparseProblem {
    let mut rng = rng_from_seed(seed);
    let phi = CMatrix::from_fn(m, g, |_, _| complex_gaussian(&mut rng, 1.0));
    let mut xi = vec![Complex64::new(0.0, 0.0); g];
    for _ in 0..8 {
        xi[rng.random_range(0..g)] = complex_gaussian(&mut rng, 1.0);
    }
    let mut y = fim_core::linalg::mat_vec(&phi, &xi);
    y.iter_mut().for_each(|v| *v += complex_gaussian(&mut rng, 0.01));
    let mut angles = vec![(0.0, 0.0)];
    angles.extend((1..g).map(|i| (i as f64 * 1e-3, 0.5)));
    SparseProblem::new(phi, y, AngleGrid::from_pairs(angles).unwrap(), 0.01, seed, 1.0, vec![(0.0, 0.0)]).unwrap()
}

#[test]
fn c07_reduction_identities() {
    let start = Instant::now();
    let h = SblHyperparams::default().without_pruning();
    let (mut worst_full, mut worst_mf) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let p = random_problem(40, 120, 700 + seed);
        let mut full = SblEngine::new(&p, h, SblVariant::Full).unwrap();
        let mut one = SblEngine::new(&p, h, SblVariant::Clustered { clusters: Some(1), seed }).unwrap();
        let mut mf = SblEngine::new(&p, h, SblVariant::MeanField).unwrap();
        let mut all = SblEngine::new(&p, h, SblVariant::Clustered { clusters: Some(120), seed }).unwrap();
        for _ in 0..50 {
            for e in [&mut full, &mut one, &mut mf, &mut all] {
                e.step().unwrap();
            }
            for (a, b) in full.mean().iter().zip(one.mean()) {
                worst_full = worst_full.max((a - b).norm());
            }
            for (a, b) in mf.mean().iter().zip(all.mean()) {
                worst_mf = worst_mf.max((a - b).norm());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_full < 1e-8 && worst_mf < 1e-8 && secs < 60.0;
    report(7, pass, format!("D=1 vs full={worst_full:.2e} D=G vs mean-field={worst_mf:.2e} time={secs:.1}s"));
    assert!(pass);
}

#[test]
fn c08_runtime_ordering() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::defaults_for(Experiment::Runtime);
    let largest = cfg.sweep.iter().cloned().fold(0.0, f64::max);
    cfg.sweep = vec![largest];
    cfg.algorithms = vec![Algorithm::Omp, Algorithm::Mfvsbl, Algorithm::Cmfvsbl, Algorithm::Vsbl];
    cfg.repetitions = 3;
    let out = run_runtime(&cfg).unwrap();
    let atoms = out.artifact.table().unwrap().column("atoms").unwrap()[0];
    let time = |a: &str| out.timing.column(&format!("{a}_seconds_median")).unwrap()[0];
    let (omp, mfv, cmfv, v) = (time("omp"), time("mfvsbl"), time("cmfvsbl"), time("vsbl"));
    let secs = start.elapsed().as_secs_f64();
    let pass = atoms >= 500.0 && omp < cmfv && cmfv < v && mfv < v && secs < 900.0;
    report(
        8,
        pass,
        format!("G={atoms} median s: omp={omp:.3} mfvsbl={mfv:.3} cmfvsbl={cmfv:.3} vsbl={v:.3} time={secs:.0}s"),
    );
    assert!(pass);
}

#[test]
fn c09_bayesopt_reaches_known_optimum() {
    let start = Instant::now();
    let ap = Aperture::half_wavelength(LAM, 1.0).unwrap();
    let spec = ChannelSpec::new(1, 1, 1.0, 1.0, 1.0);
    let mut ratios = Vec::new();
    for seed in 0..20u64 {
        let ch = spec.sample_seeded(derive_seed(9, 0, seed)).unwrap();
        let optimum = (ch.cascaded().gains[0].norm() + ch.direct().norm()).powi(2);
        let settings = BoSettings { budget: 50, seed: derive_seed(9, 1, seed), ..BoSettings::default() };
        let out = optimize(&BoProblem::new(ch.clone(), ap, 1, Mode::EmPbf, settings).unwrap()).unwrap();
        assert!(out.run.trace.len() <= 50);
        // re-evaluate independently of the optimizer's bookkeeping
        let f = received_power(&out.solution.geometry, &out.solution.phases, &ch).unwrap();
        ratios.push(f / optimum);
    }
    let med = median(&ratios);
    let secs = start.elapsed().as_secs_f64();
    let pass = med >= 0.99 && secs < 120.0;
    report(9, pass, format!("median best/optimum={med:.5} min={:.5} time={secs:.1}s", ratios.iter().cloned().fold(1.0, f64::min)));
    assert!(pass);
}

fn command_for(p: Preset) -> &'static str {
    match p.config().experiment {
        Experiment::Fringe => "fringe",
        Experiment::PowerVsPaths => "power",
        Experiment::Bounds => "bounds",
        Experiment::NmseVsQ | Experiment::NmseVsSnr => "nmse",
        Experiment::Runtime => "runtime",
    }
}

fn run_cli(args: &[&str], out: &Path) {
    let status = Process::new(env!("CARGO_BIN_EXE_fimsim"))
        .args(args)
        .arg("--out")
        .arg(out)
        .status()
        .expect("fimsim runs");
    assert!(status.success(), "fimsim {args:?} failed");
}

#[test]
fn c10_cli_presets_are_deterministic() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut bad = Vec::new();
    for preset in Preset::ALL {
        let label = preset.label();
        let mut args = vec![command_for(preset), "--preset", label, "--seed", "11"];
        // reduced counts keep the check affordable; determinism does not depend on them
        match preset {
            Preset::Fig2 | Preset::Fig3 => {}
            Preset::Fig7 => args.extend(["--trials", "1", "--repetitions", "1"]),
            _ => args.extend(["--trials", "2"]),
        }
        let a = dir.path().join(format!("{label}_a.out"));
        let b = dir.path().join(format!("{label}_b.out"));
        run_cli(&[&args[..], &["--threads", "1"]].concat(), &a);
        run_cli(&[&args[..], &["--threads", "2"]].concat(), &b);
        if std::fs::read(&a).unwrap() != std::fs::read(&b).unwrap() {
            bad.push(label);
        }
    }
    // config-file driven commands without a preset
    for (cmd, cfg) in [
        ("bounds", r#"{"experiment":"BOUNDS","closed_form_trials":20000}"#),
        ("estimate", r#"{"experiment":"NMSE_VS_Q"}"#),
    ] {
        let cfg_path = dir.path().join(format!("{cmd}.json"));
        std::fs::write(&cfg_path, cfg).unwrap();
        let c = cfg_path.to_str().unwrap();
        let a = dir.path().join(format!("{cmd}_a.out"));
        let b = dir.path().join(format!("{cmd}_b.out"));
        run_cli(&[cmd, "--config", c, "--threads", "1"], &a);
        run_cli(&[cmd, "--config", c, "--threads", "2"], &b);
        if std::fs::read(&a).unwrap() != std::fs::read(&b).unwrap() {
            bad.push(cmd);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty();
    report(10, pass, format!("presets={} differing={bad:?} time={secs:.0}s", Preset::ALL.len()));
    assert!(pass);
}
