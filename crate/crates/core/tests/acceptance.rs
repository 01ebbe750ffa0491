//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use fedncv::data::{self, PartitionSpec};
use fedncv::estimators::{self, ClientGradSet, CvConfig, Flavor};
use fedncv::fedsim;
use fedncv::models::{self, Activation, LabeledSample, ModelKind, ModelSpec};
use fedncv::numeric::{derive_stream, stream_key};
use fedncv::run_config::{Algorithm, AlphaMode, PartitionMode, RunConfig};
use fedncv::score_oracle;
use fedncv::verify;
use fedncv::GradVec;

type Outcome = Result<String, String>;

fn v(x: &[f64]) -> GradVec {
    GradVec::new(x.to_vec()).unwrap()
}

fn rows_of(set: &ClientGradSet) -> Vec<Vec<f64>> {
    set.per_sample.iter().map(|g| g.as_slice().to_vec()).collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            m[k] += r[k] / rows.len() as f64;
        }
    }
    m
}

fn loo_row(rows: &[Vec<f64>], i: usize) -> Vec<f64> {
    let others: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, r)| r.clone())
        .collect();
    mean_rows(&others)
}

fn rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn trace_var(rows: &[Vec<f64>]) -> f64 {
    let m = mean_rows(rows);
    let ss: f64 = rows
        .iter()
        .map(|r| r.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    ss / (rows.len() - 1) as f64
}

// 1 ---------------------------------------------------------------------------

fn identity_suite() -> Outcome {
    let mut rng = derive_stream(1001, 0);
    let (mut loo_err, mut reshape_err, mut zero_err, mut compose_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let sets = verify::random_gaussian_clients(&mut rng);
        let alpha: f64 = rng.random_range(-2.0..2.0);
        for s in &sets {
            let rows = rows_of(s);
            let m = mean_rows(&rows);
            let loos: Vec<Vec<f64>> = (0..rows.len()).map(|i| loo_row(&rows, i)).collect();
            loo_err = loo_err.max(rel(&mean_rows(&loos), &m, 1e-300));
            // library LOO against the by-hand one
            for (i, l) in loos.iter().enumerate() {
                loo_err = loo_err.max(rel(estimators::loo_mean(&s.per_sample, i).unwrap().as_slice(), l, 1e-300));
            }
            let reshaped = estimators::client_reshape(s, alpha).unwrap();
            let rm = mean_rows(&reshaped.iter().map(|g| g.as_slice().to_vec()).collect::<Vec<_>>());
            let expect: Vec<f64> = m.iter().map(|x| (1.0 - alpha) * x).collect();
            let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            reshape_err = reshape_err.max(rel(&rm, &expect, scale * 1e-6));
        }

        // equal sizes: trim every client to the smallest
        let n_min = sets.iter().map(|s| s.n()).min().unwrap();
        let equal: Vec<ClientGradSet> = sets
            .iter()
            .map(|s| ClientGradSet::new(s.client_id, s.per_sample[..n_min].to_vec()))
            .collect();
        let input_scale = equal
            .iter()
            .flat_map(|s| s.per_sample.iter().map(|g| g.dot(g).sqrt()))
            .fold(0.0, f64::max);
        let cfg = CvConfig::uniform(equal.iter().map(|s| s.client_id), alpha, 1.0, Flavor::GradientBaseline);
        let z = estimators::networked_estimate_direct(&equal, &cfg).unwrap();
        zero_err = zero_err.max(z.max_abs() / input_scale);

        let cfg = CvConfig::uniform(sets.iter().map(|s| s.client_id), alpha, 0.0, Flavor::GradientBaseline);
        let direct = estimators::networked_estimate_direct(&sets, &cfg).unwrap();
        let n: usize = sets.iter().map(|s| s.n()).sum();
        let mut weighted = vec![0.0; direct.dim()];
        for s in &sets {
            let agg = mean_rows(
                &estimators::client_reshape(s, alpha)
                    .unwrap()
                    .iter()
                    .map(|g| g.as_slice().to_vec())
                    .collect::<Vec<_>>(),
            );
            for k in 0..weighted.len() {
                weighted[k] += s.n() as f64 / n as f64 * agg[k];
            }
        }
        compose_err = compose_err.max(rel(direct.as_slice(), &weighted, 1e-300));
    }
    let detail = format!(
        "loo {loo_err:.2e}, reshape {reshape_err:.2e} (<= 1e-10); beta=1 zero {zero_err:.2e} (<= 1e-9); beta=0 composition {compose_err:.2e} (<= 1e-12)"
    );
    if loo_err <= 1e-10 && reshape_err <= 1e-10 && zero_err <= 1e-9 && compose_err <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 2, 3 ------------------------------------------------------------------------

/// `Σ_k p_k l_k (e_k - p)` evaluated directly from the fixture's numbers.
fn fixture_exact_gradient() -> Vec<f64> {
    let logits = [0.2, -0.4, 0.9, 0.0, -1.1];
    let rewards = [1.0, 0.3, 0.7, 1.5, 0.2];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let mean_reward: f64 = p.iter().zip(&rewards).map(|(p, r)| p * r).sum();
    // d/dθ_j Σ p_k l_k = p_j (l_j - Σ p_k l_k)
    (0..5).map(|j| p[j] * (rewards[j] - mean_reward)).collect()
}

fn unbiasedness() -> Outcome {
    let exact = fixture_exact_gradient();
    let (p, r) = verify::pinned_score_fixture();
    let lib = score_oracle::exact_gradient(&p, &r).unwrap();
    if rel(lib.as_slice(), &exact, 1e-12) > 1e-12 {
        return Err(format!("exact gradient mismatch: {lib:?} vs {exact:?}"));
    }
    let s = verify::fixture_networked_summary(1.0, 200_000, &derive_stream(2002, 0)).unwrap();
    let z: Vec<f64> = (0..5)
        .map(|k| (s.mean[k] - exact[k]).abs() / s.std_error[k])
        .collect();
    let worst = z.iter().cloned().fold(0.0, f64::max);
    let detail = format!("2e5 estimates (m=3, n=4, beta=0), max |z| = {worst:.3} (<= 3)");
    if worst <= 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rloo_variance_reduction() -> Outcome {
    let plain = verify::fixture_networked_summary(0.0, 10_000, &derive_stream(3003, 0)).unwrap();
    let loo = verify::fixture_networked_summary(1.0, 10_000, &derive_stream(3003, 1)).unwrap();
    let reduction = 1.0 - loo.variance_trace / plain.variance_trace;
    let detail = format!(
        "trace {:.5} (alpha=0) -> {:.5} (alpha=1), reduction {:.1}% (>= 20%)",
        plain.variance_trace,
        loo.variance_trace,
        100.0 * reduction
    );
    if reduction >= 0.2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 4 ---------------------------------------------------------------------------

/// Variance trace of the pooled per-sample summands `g_i - α c_i`, by hand.
fn summand_variance(sets: &[Vec<Vec<f64>>], alpha: f64) -> f64 {
    let mut rows = Vec::new();
    for client in sets {
        for i in 0..client.len() {
            let c = loo_row(client, i);
            rows.push(client[i].iter().zip(&c).map(|(g, c)| g - alpha * c).collect::<Vec<f64>>());
        }
    }
    trace_var(&rows)
}

fn optimal_alpha_grid() -> Outcome {
    let mut rng = derive_stream(4004, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let sets = verify::random_gaussian_clients(&mut rng);
        let raw: Vec<Vec<Vec<f64>>> = sets.iter().map(rows_of).collect();
        let alpha = estimators::pooled_optimal_alpha(&sets).unwrap();
        let grid_min = (0..=4000)
            .map(|k| summand_variance(&raw, -2.0 + k as f64 * 1e-3))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(summand_variance(&raw, alpha) / grid_min - 1.0);
    }
    let detail = format!("worst excess over grid minimum {:.3}% (<= 5%)", 100.0 * worst);
    if worst <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 5 ---------------------------------------------------------------------------

/// Direct networked-minus-single variance over slots, from raw draws.
fn monte_carlo_gap(
    policy_probs: &[f64],
    rewards: &[f64],
    alpha: f64,
    rounds: &[Vec<ClientGradSet>],
) -> f64 {
    let k = policy_probs.len();
    let mut networked = Vec::new();
    let mut single = Vec::new();
    for sets in rounds {
        // rebuild every reshaped term from outcomes: score = e_x - p
        let mut per_client: Vec<Vec<Vec<f64>>> = Vec::new();
        for s in sets {
            let rw = s.rewards.as_ref().unwrap();
            let n = rw.len();
            let total: f64 = rw.iter().sum();
            per_client.push(
                s.per_sample
                    .iter()
                    .zip(rw)
                    .map(|(score, r)| {
                        // outcome is the coordinate where the score is positive
                        let x = (0..k).find(|j| score[*j] > 0.0).unwrap();
                        assert_eq!(*r, rewards[x]);
                        let b = (total - r) / (n - 1) as f64;
                        (0..k)
                            .map(|j| (r - alpha * b) * (if j == x { 1.0 } else { 0.0 } - policy_probs[j]))
                            .collect()
                    })
                    .collect(),
            );
        }
        let sums: Vec<Vec<f64>> = per_client
            .iter()
            .map(|rows| (0..k).map(|j| rows.iter().map(|r| r[j]).sum()).collect())
            .collect();
        let n: usize = per_client.iter().map(|c| c.len()).sum();
        for (u, rows) in per_client.iter().enumerate() {
            let a = n - rows.len();
            let others: Vec<f64> = (0..k)
                .map(|j| sums.iter().enumerate().filter(|(w, _)| *w != u).map(|(_, s)| s[j]).sum::<f64>() / a as f64)
                .collect();
            for r in rows {
                networked.push(r.iter().zip(&others).map(|(x, o)| x - o).collect());
                single.push(r.clone());
            }
        }
    }
    trace_var(&networked) - trace_var(&single)
}

fn variance_gap_sign() -> Outcome {
    let mut disagreements = Vec::new();
    let mut summary = Vec::new();
    for i in 0..10u64 {
        let mut rng = derive_stream(5005, stream_key(&[i]));
        let (p, r) = verify::random_score_env(5, &mut rng).unwrap();
        let alpha = [0.0, 0.5, 1.0][i as usize % 3];
        let base = rng.child(1);
        let rounds: Vec<Vec<ClientGradSet>> = (0..20_000u64)
            .map(|t| score_oracle::score_client_sets(&p, &r, 3, 4, &base.child(t)).unwrap())
            .collect();
        let plug_in = estimators::variance_gap_replicated(&rounds, alpha).unwrap();
        let mc = monte_carlo_gap(p.probs(), r.as_slice(), alpha, &rounds);
        summary.push(format!("{plug_in:+.3}/{mc:+.3}"));
        if (plug_in > 0.0) != (mc > 0.0) {
            disagreements.push(i);
        }
    }
    let detail = format!(
        "plug-in/Monte-Carlo gaps {}; disagreements {:?}",
        summary.join(" "),
        disagreements
    );
    if disagreements.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 6 ---------------------------------------------------------------------------

fn central_difference(spec: &ModelSpec, theta: &GradVec, s: &LabeledSample, eps: f64) -> Vec<f64> {
    let mut t = theta.as_slice().to_vec();
    (0..t.len())
        .map(|j| {
            let orig = t[j];
            t[j] = orig + eps;
            let up = models::forward_loss(spec, &v(&t), s).unwrap();
            t[j] = orig - eps;
            let down = models::forward_loss(spec, &v(&t), s).unwrap();
            t[j] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn model_gradients() -> Outcome {
    let specs = [
        ModelSpec::logistic(6, 4),
        ModelSpec::mlp1(6, 8, 4, Activation::Tanh),
        ModelSpec::mlp1(6, 8, 4, Activation::Relu),
    ];
    let mut rng = derive_stream(6006, 0);
    let mut report = Vec::new();
    let mut ok = true;
    for spec in specs {
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < 50 {
            let theta = spec.init(&mut rng).unwrap().scaled(2.0);
            let x: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            let s = LabeledSample::new(x, rng.random_range(0..4)).unwrap();
            if spec.kind == ModelKind::Mlp1 && spec.activation == Activation::Relu {
                // skip draws within reach of a kink
                let t = theta.as_slice();
                let near_kink = (0..8).any(|h| {
                    let z: f64 = (0..6).map(|j| t[h * 6 + j] * s.x[j]).sum::<f64>() + t[48 + h];
                    z.abs() < 1e-3
                });
                if near_kink {
                    continue;
                }
            }
            let g = models::per_sample_grad(&spec, &theta, &s).unwrap();
            let fd = central_difference(&spec, &theta, &s, 1e-5);
            let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den = g.dot(&g).sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
            worst = worst.max(num / den);
            done += 1;
        }
        ok &= worst < 1e-4;
        report.push(format!("{:?}/{:?} {worst:.1e}", spec.kind, spec.activation));
    }
    let detail = format!("max relative error over 50 draws: {} (< 1e-4)", report.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 7 ---------------------------------------------------------------------------

fn entropy(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / labels.len() as f64;
            -p * p.ln()
        })
        .sum()
}

fn dirichlet_partitioner() -> Outcome {
    let ds = data::synth_gaussian_mixture(10, 4, 10_000, 1.0, 7007).unwrap();
    let labels: Vec<usize> = ds.samples().iter().map(|s| s.y).collect();
    let mean_entropy = |conc: f64, seed: u64| -> std::result::Result<f64, String> {
        let p = data::dirichlet_partition(
            &ds,
            &PartitionSpec {
                num_clients: 20,
                concentration: conc,
                min_per_client: 2,
                seed,
            },
        )
        .map_err(|e| e.to_string())?;
        let mut seen = vec![0u8; ds.len()];
        for idx in p.assignment.values() {
            for &i in idx {
                seen[i] += 1;
            }
        }
        if seen.iter().any(|c| *c != 1) {
            return Err(format!("seed {seed}, concentration {conc}: not a set partition"));
        }
        let total: f64 = p
            .assignment
            .values()
            .map(|idx| entropy(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 10))
            .sum();
        Ok(total / 20.0)
    };

    let (mut low, mut high) = (0.0, 0.0);
    for seed in 0..100 {
        low += mean_entropy(0.1, seed)? / 100.0;
        high += mean_entropy(10.0, seed)? / 100.0;
    }
    let pinned = data::dirichlet_partition(
        &ds,
        &PartitionSpec {
            num_clients: 20,
            concentration: 0.1,
            min_per_client: 2,
            seed: 7,
        },
    )
    .unwrap();
    let missing = pinned
        .assignment
        .values()
        .filter(|idx| {
            let mut has = [false; 10];
            for &i in idx.iter() {
                has[labels[i]] = true;
            }
            has.iter().any(|h| !h)
        })
        .count();
    let detail = format!(
        "200 partitions exact; mean entropy {low:.3} (0.1) vs {high:.3} (10.0); {missing}/20 clients miss a class at seed 7"
    );
    if low < high && missing >= 1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 8 ---------------------------------------------------------------------------

fn desk_config(algorithm: Algorithm, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.algorithm = algorithm;
    cfg.seed = seed;
    cfg.clients = 20;
    cfg.rounds = 100;
    cfg.dirichlet = 0.1;
    cfg.beta = 0.5;
    cfg.alpha_mode = AlphaMode::ClosedForm;
    cfg.num_classes = 10;
    cfg.input_dim = 32;
    cfg.n_samples = 10_000;
    cfg.spread = 0.25;
    cfg.gamma = 32.0;
    cfg
}

fn centralized_accuracy(seed: u64) -> f64 {
    let mut cfg = desk_config(Algorithm::FedAvg, seed);
    cfg.clients = 1;
    cfg.beta = 0.0;
    cfg.partition = PartitionMode::IidEqual;
    cfg.gamma = 2.0;
    cfg.rounds = 300;
    fedsim::run(&cfg).unwrap().metrics.last().unwrap().test_accuracy
}

fn desk_scale() -> Outcome {
    let central = centralized_accuracy(0);
    if central < 0.95 {
        return Err(format!("centralized logistic fit reaches only {central:.4}"));
    }
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let avg = fedsim::run(&desk_config(Algorithm::FedAvg, seed)).unwrap();
        let ncv = fedsim::run(&desk_config(Algorithm::FedNcv, seed)).unwrap();
        if avg.aborted.is_some() || ncv.aborted.is_some() {
            lines.push(format!("seed {seed}: diverged"));
            continue;
        }
        let disp = |m: &[fedsim::RoundMetrics]| {
            let w: Vec<f64> = m.iter().filter(|r| r.round >= 10).map(|r| r.grad_dispersion).collect();
            w.iter().sum::<f64>() / w.len() as f64
        };
        let (a_acc, n_acc) = (
            avg.metrics.last().unwrap().test_accuracy,
            ncv.metrics.last().unwrap().test_accuracy,
        );
        let (a_disp, n_disp) = (disp(&avg.metrics), disp(&ncv.metrics));
        let ok = n_acc >= a_acc - 0.01 && n_disp < a_disp;
        wins += ok as usize;
        lines.push(format!(
            "seed {seed}: acc {n_acc:.4} vs {a_acc:.4}, dispersion {n_disp:.2e} vs {a_disp:.2e}{}",
            if ok { "" } else { " (miss)" }
        ));
    }
    let detail = format!(
        "centralized {central:.4}; FedNCV vs FedAvg: {}; {wins}/5 seeds (>= 4)",
        lines.join("; ")
    );
    if wins >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 9 ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str, threads: &str| -> std::result::Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_fedncv"))
            .args(["run", "--seed", "3", "--threads", threads, "--out"])
            .arg(&out)
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("run exited with {status}"));
        }
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let a = run("a.csv", "1")?;
    let b = run("b.csv", "1")?;
    let c = run("c.csv", "4")?;
    let detail = format!("{} bytes; repeat identical: {}; 1 vs 4 threads identical: {}", a.len(), a == b, a == c);
    if a == b && a == c {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("1 leave-one-out identities", Duration::from_secs(5), identity_suite),
        ("2 unbiasedness in the score setting", Duration::from_secs(30), unbiasedness),
        ("3 leave-one-out variance reduction", Duration::from_secs(10), rloo_variance_reduction),
        ("4 closed-form alpha vs grid search", Duration::from_secs(10), optimal_alpha_grid),
        ("5 variance-gap sign agreement", Duration::from_secs(20), variance_gap_sign),
        ("6 model gradients vs finite differences", Duration::from_secs(5), model_gradients),
        ("7 Dirichlet partitioner", Duration::from_secs(10), dirichlet_partitioner),
        ("8 desk-scale FedNCV vs FedAvg", Duration::from_secs(180), desk_scale),
        ("9 run determinism", Duration::from_secs(60), determinism),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) => (elapsed <= budget, d),
            Err(d) => (false, d),
        };
        failed += !pass as usize;
        println!(
            "{} {name}: {detail} [{:.1}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {}/9 passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
