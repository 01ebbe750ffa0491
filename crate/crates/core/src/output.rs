//! CSV rendering for runs and sweeps.
//!
//! Run files start with the effective configuration as `# key=value`
//! lines, then the header and one row per round. Numbers use `%.10g`.

use crate::fedsim::RoundMetrics;
use crate::format::g10;
use crate::run_config::RunConfig;

pub const RUN_HEADER: &str =
    "round,algorithm,seed,train_loss,test_accuracy,grad_dispersion,global_grad_norm,alpha_mean,beta";

pub const SUMMARY_HEADER: &str = "key,value,rounds_completed,train_loss,test_accuracy,grad_dispersion,global_grad_norm,alpha_mean,beta,test_accuracy_std";

/// Rounds at the end of a run used for the summary's accuracy spread.
pub const SUMMARY_WINDOW: usize = 10;

fn metric_fields(m: &RoundMetrics) -> [String; 6] {
    [
        g10(m.train_loss),
        g10(m.test_accuracy),
        g10(m.grad_dispersion),
        g10(m.global_grad_norm),
        g10(m.alpha_mean),
        g10(m.beta),
    ]
}

pub fn render_run_csv(cfg: &RunConfig, metrics: &[RoundMetrics]) -> String {
    let mut out = String::new();
    for line in cfg.provenance_lines() {
        out.push_str("# ");
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str(RUN_HEADER);
    out.push('\n');
    for m in metrics {
        let mut row = vec![m.round.to_string(), cfg.algorithm.to_string(), cfg.seed.to_string()];
        row.extend(metric_fields(m));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Sample standard deviation of test accuracy over the last
/// [`SUMMARY_WINDOW`] rounds; 0 with fewer than two rounds.
pub fn tail_accuracy_std(metrics: &[RoundMetrics]) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(SUMMARY_WINDOW)..];
    if tail.len() < 2 {
        return 0.0;
    }
    let n = tail.len() as f64;
    let mean = tail.iter().map(|m| m.test_accuracy).sum::<f64>() / n;
    let ss: f64 = tail.iter().map(|m| (m.test_accuracy - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// One summary row: the last completed round of a run.
pub fn summary_row(key: &str, value: &str, metrics: &[RoundMetrics]) -> String {
    let mut row = vec![key.to_string(), value.to_string(), metrics.len().to_string()];
    match metrics.last() {
        Some(m) => row.extend(metric_fields(m)),
        None => row.extend(std::iter::repeat_n(String::from("nan"), 6)),
    }
    row.push(g10(tail_accuracy_std(metrics)));
    row.join(",")
}
