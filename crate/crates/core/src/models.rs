//! Small classifiers with hand-written backprop.
//!
//! Parameters are flattened layer by layer; within a layer the weight
//! matrix comes first in row-major order (one row per output unit),
//! followed by the bias vector. For `Mlp1` that is `W1, b1, W2, b2`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{GradVec, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Ignored for `Logistic`.
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            num_classes,
            hidden_dim: 0,
            activation: Activation::Tanh,
        }
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize, num_classes: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp1,
            input_dim,
            num_classes,
            hidden_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.kind == ModelKind::Mlp1 && self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::Logistic => c * d + c,
            ModelKind::Mlp1 => h * d + h + c * h + c,
        }
    }

    /// Uniform(-s, s) with `s = 1/sqrt(fan_in)` for every layer, biases included.
    pub fn init(&self, rng: &mut RngStream) -> Result<GradVec> {
        self.validate()?;
        let layers: Vec<(usize, usize)> = match self.kind {
            ModelKind::Logistic => vec![(self.input_dim, self.num_classes)],
            ModelKind::Mlp1 => vec![
                (self.input_dim, self.hidden_dim),
                (self.hidden_dim, self.num_classes),
            ],
        };
        let mut theta = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in layers {
            let s = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                theta.push(rng.random_range(-s..s));
            }
        }
        GradVec::new(theta)
    }

    fn check(&self, theta: &GradVec, sample: &LabeledSample) -> Result<()> {
        if theta.dim() != self.param_count() {
            return Err(Error::DimMismatch {
                expected: self.param_count(),
                got: theta.dim(),
            });
        }
        if sample.x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                got: sample.x.len(),
            });
        }
        if sample.y >= self.num_classes {
            return Err(Error::IndexOutOfRange {
                index: sample.y,
                len: self.num_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl LabeledSample {
    pub fn new(x: Vec<f64>, y: usize) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { x, y })
    }
}

/// `out = W x + b` with `W` stored row-major at `params[..rows*cols]`.
fn affine(params: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let (w, b) = params.split_at(rows * cols);
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[r]
        })
        .collect()
}

struct Forward {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    scores: Vec<f64>,
}

fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Forward {
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    match spec.kind {
        ModelKind::Logistic => Forward {
            pre: Vec::new(),
            hidden: Vec::new(),
            scores: affine(theta, c, d, x),
        },
        ModelKind::Mlp1 => {
            let split = h * d + h;
            let pre = affine(&theta[..split], h, d, x);
            let hidden: Vec<f64> = pre.iter().map(|z| spec.activation.apply(*z)).collect();
            let scores = affine(&theta[split..], c, h, &hidden);
            Forward { pre, hidden, scores }
        }
    }
}

/// `(log-sum-exp, softmax)` with the max subtracted first.
fn log_softmax_parts(scores: &[f64]) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    (max + z.ln(), exp.into_iter().map(|e| e / z).collect())
}

fn cross_entropy(scores: &[f64], y: usize) -> f64 {
    let (lse, _) = log_softmax_parts(scores);
    (lse - scores[y]).max(0.0)
}

pub fn scores(spec: &ModelSpec, theta: &GradVec, sample: &LabeledSample) -> Result<Vec<f64>> {
    spec.check(theta, sample)?;
    Ok(forward(spec, theta.as_slice(), &sample.x).scores)
}

/// `-log softmax(scores)[y]`.
pub fn forward_loss(spec: &ModelSpec, theta: &GradVec, sample: &LabeledSample) -> Result<f64> {
    spec.check(theta, sample)?;
    Ok(cross_entropy(
        &forward(spec, theta.as_slice(), &sample.x).scores,
        sample.y,
    ))
}

pub fn per_sample_grad(spec: &ModelSpec, theta: &GradVec, sample: &LabeledSample) -> Result<GradVec> {
    spec.check(theta, sample)?;
    let t = theta.as_slice();
    let fw = forward(spec, t, &sample.x);
    let (_, mut delta) = log_softmax_parts(&fw.scores);
    delta[sample.y] -= 1.0;

    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let mut grad = vec![0.0; spec.param_count()];
    match spec.kind {
        ModelKind::Logistic => {
            write_affine_grad(&mut grad, &delta, &sample.x);
        }
        ModelKind::Mlp1 => {
            let split = h * d + h;
            let w2 = &t[split..split + c * h];
            write_affine_grad(&mut grad[split..], &delta, &fw.hidden);
            let back: Vec<f64> = (0..h)
                .map(|j| {
                    let upstream: f64 = (0..c).map(|k| w2[k * h + j] * delta[k]).sum();
                    upstream * spec.activation.slope(fw.pre[j], fw.hidden[j])
                })
                .collect();
            write_affine_grad(&mut grad[..split], &back, &sample.x);
        }
    }
    GradVec::new(grad)
}

/// Weight gradient `delta ⊗ input` followed by bias gradient `delta`.
fn write_affine_grad(out: &mut [f64], delta: &[f64], input: &[f64]) {
    let cols = input.len();
    for (r, dr) in delta.iter().enumerate() {
        for (j, xj) in input.iter().enumerate() {
            out[r * cols + j] = dr * xj;
        }
    }
    out[delta.len() * cols..delta.len() * cols + delta.len()].copy_from_slice(delta);
}

/// Central differences of an arbitrary scalar function.
pub fn finite_diff<F>(f: F, theta: &GradVec, eps: f64) -> Result<GradVec>
where
    F: Fn(&GradVec) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = theta.clone().into_vec();
    let mut out = Vec::with_capacity(probe.len());
    for j in 0..probe.len() {
        let orig = probe[j];
        probe[j] = orig + eps;
        let up = f(&GradVec::new(probe.clone())?)?;
        probe[j] = orig - eps;
        let down = f(&GradVec::new(probe.clone())?)?;
        probe[j] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    GradVec::new(out)
}

pub fn finite_diff_grad(
    spec: &ModelSpec,
    theta: &GradVec,
    sample: &LabeledSample,
    eps: f64,
) -> Result<GradVec> {
    spec.check(theta, sample)?;
    finite_diff(|t| forward_loss(spec, t, sample), theta, eps)
}

/// `argmax` of the scores, lowest index on ties.
pub fn predict(spec: &ModelSpec, theta: &GradVec, sample: &LabeledSample) -> Result<usize> {
    let s = scores(spec, theta, sample)?;
    let mut best = 0;
    for (k, v) in s.iter().enumerate().skip(1) {
        if *v > s[best] {
            best = k;
        }
    }
    Ok(best)
}

/// `(mean loss, accuracy)` over a dataset.
pub fn evaluate(spec: &ModelSpec, theta: &GradVec, samples: &[LabeledSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        spec.check(theta, s)?;
        let fw = forward(spec, theta.as_slice(), &s.x).scores;
        loss += cross_entropy(&fw, s.y);
        let mut best = 0;
        for k in 1..fw.len() {
            if fw[k] > fw[best] {
                best = k;
            }
        }
        if best == s.y {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Relative error `‖a - b‖ / max(‖a‖, ‖b‖)`, with a floor on the denominator.
pub fn relative_error(a: &GradVec, b: &GradVec) -> f64 {
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt()).max(1e-12);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::derive_stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_sample(spec: &ModelSpec, rng: &mut RngStream) -> LabeledSample {
        let x = (0..spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        LabeledSample::new(x, rng.random_range(0..spec.num_classes)).unwrap()
    }

    fn specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::logistic(4, 3),
            ModelSpec::mlp1(4, 5, 3, Activation::Tanh),
            ModelSpec::mlp1(4, 5, 3, Activation::Relu),
        ]
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::logistic(32, 10).param_count(), 330);
        assert_eq!(ModelSpec::mlp1(4, 5, 3, Activation::Tanh).param_count(), 20 + 5 + 15 + 3);
        for spec in specs() {
            let t = spec.init(&mut derive_stream(0, 0)).unwrap();
            assert_eq!(t.dim(), spec.param_count());
        }
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let spec = ModelSpec::mlp1(16, 4, 3, Activation::Tanh);
        let t = spec.init(&mut derive_stream(1, 0)).unwrap();
        let split = 16 * 4 + 4;
        assert!(t.as_slice()[..split].iter().all(|v| v.abs() < 0.25));
        assert!(t.as_slice()[split..].iter().all(|v| v.abs() < 0.5));
        assert_eq!(t, spec.init(&mut derive_stream(1, 0)).unwrap());
    }

    #[test]
    fn zero_theta_loss_is_log_classes() {
        let spec = ModelSpec::logistic(3, 7);
        let t = GradVec::zeros(spec.param_count());
        let s = LabeledSample::new(vec![1.0, -4.0, 2.5], 5).unwrap();
        assert_relative_eq!(forward_loss(&spec, &t, &s).unwrap(), 7f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn pinned_loss_fixture() {
        // Logistic, 2 inputs, 3 classes. W = [[1,0],[0,1],[1,1]], b = [0, 0.5, -1].
        // x = (0.5, -1): scores = (0.5, -0.5, -1.5), y = 1.
        // loss = log(e^0.5 + e^-0.5 + e^-1.5) + 0.5
        //      = log(1.6487212707 + 0.6065306597 + 0.2231301601) + 0.5
        //      = log(2.4783820905) + 0.5 = 0.9076059644 + 0.5
        let spec = ModelSpec::logistic(2, 3);
        let t = GradVec::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.5, -1.0]).unwrap();
        let s = LabeledSample::new(vec![0.5, -1.0], 1).unwrap();
        assert_relative_eq!(forward_loss(&spec, &t, &s).unwrap(), 1.4076059644, max_relative = 1e-9);
    }

    #[test]
    fn two_class_gradient_by_hand() {
        // θ = 0, x = e1, y = 0: softmax = (.5,.5), delta = (-.5, .5).
        let spec = ModelSpec::logistic(2, 2);
        let t = GradVec::zeros(6);
        let s = LabeledSample::new(vec![1.0, 0.0], 0).unwrap();
        let g = per_sample_grad(&spec, &t, &s).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, 0.0, 0.5, 0.0, -0.5, 0.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = derive_stream(3, 0);
        for spec in specs() {
            for _ in 0..50 {
                let t = spec.init(&mut rng).unwrap().scaled(3.0);
                let s = random_sample(&spec, &mut rng);
                if spec.activation == Activation::Relu && spec.kind == ModelKind::Mlp1 {
                    // skip draws sitting on a kink
                    let fw = forward(&spec, t.as_slice(), &s.x);
                    if fw.pre.iter().any(|z| z.abs() < 1e-3) {
                        continue;
                    }
                }
                let g = per_sample_grad(&spec, &t, &s).unwrap();
                let fd = finite_diff_grad(&spec, &t, &s, 1e-5).unwrap();
                assert!(relative_error(&g, &fd) < 1e-5, "{spec:?}: {}", relative_error(&g, &fd));
            }
        }
    }

    #[test]
    fn finite_diff_exact_on_quadratic() {
        // f(θ) = θ0² + 3 θ0 θ1 - θ1², ∇ = (2θ0 + 3θ1, 3θ0 - 2θ1)
        let f = |t: &GradVec| Ok(t[0] * t[0] + 3.0 * t[0] * t[1] - t[1] * t[1]);
        let t = GradVec::new(vec![0.7, -1.3]).unwrap();
        let g = finite_diff(f, &t, 1e-3).unwrap();
        assert_relative_eq!(g[0], 2.0 * 0.7 - 3.9, max_relative = 1e-9);
        assert_relative_eq!(g[1], 2.1 + 2.6, max_relative = 1e-9);
        assert!(finite_diff(f, &t, 0.0).is_err());
    }

    #[test]
    fn shrinking_eps_tightens_agreement() {
        let spec = ModelSpec::logistic(4, 3);
        let mut rng = derive_stream(5, 0);
        let t = spec.init(&mut rng).unwrap().scaled(2.0);
        let s = random_sample(&spec, &mut rng);
        let g = per_sample_grad(&spec, &t, &s).unwrap();
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|e| relative_error(&g, &finite_diff_grad(&spec, &t, &s, *e).unwrap()))
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn duplicated_samples_double_the_gradient() {
        let spec = ModelSpec::mlp1(4, 5, 3, Activation::Tanh);
        let mut rng = derive_stream(6, 0);
        let t = spec.init(&mut rng).unwrap();
        let s = random_sample(&spec, &mut rng);
        let g = per_sample_grad(&spec, &t, &s).unwrap();
        let mut twice = g.clone();
        twice.add_scaled(1.0, &g);
        assert_eq!(twice, g.scaled(2.0));
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = derive_stream(7, 0);
        for spec in specs() {
            let t = spec.init(&mut rng).unwrap();
            let s = random_sample(&spec, &mut rng);
            let g = per_sample_grad(&spec, &t, &s).unwrap();
            let stepped = t.minus_scaled(1e-3, &g);
            assert!(forward_loss(&spec, &stepped, &s).unwrap() < forward_loss(&spec, &t, &s).unwrap());
        }
    }

    #[test]
    fn dimension_errors() {
        let spec = ModelSpec::logistic(3, 2);
        let t = GradVec::zeros(8);
        let s = LabeledSample::new(vec![1.0, 2.0, 3.0], 0).unwrap();
        assert!(matches!(forward_loss(&spec, &GradVec::zeros(7), &s), Err(Error::DimMismatch { .. })));
        assert!(matches!(
            per_sample_grad(&spec, &t, &LabeledSample::new(vec![1.0], 0).unwrap()),
            Err(Error::DimMismatch { .. })
        ));
        assert!(forward_loss(&spec, &t, &LabeledSample::new(vec![1.0, 2.0, 3.0], 2).unwrap()).is_err());
        assert!(LabeledSample::new(vec![f64::NAN], 0).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let spec = ModelSpec::logistic(2, 3);
        let t = GradVec::zeros(spec.param_count());
        let data: Vec<LabeledSample> = [0, 1, 0, 2, 0]
            .iter()
            .map(|y| LabeledSample::new(vec![1.0, 1.0], *y).unwrap())
            .collect();
        let (loss, acc) = evaluate(&spec, &t, &data).unwrap();
        assert_relative_eq!(loss, 3f64.ln(), max_relative = 1e-14);
        assert_eq!(acc, 0.6);
        assert!(evaluate(&spec, &t, &[]).is_err());
        let (_, one) = evaluate(&spec, &t, &data[1..2]).unwrap();
        assert_eq!(one, 0.0);
    }

    #[test]
    fn separable_fixture_is_classified_perfectly() {
        // W rows pick out the sign of x0: class 0 when x0 < 0, class 1 otherwise.
        let spec = ModelSpec::logistic(2, 2);
        let t = GradVec::new(vec![-5.0, 0.0, 5.0, 0.0, 0.0, 0.0]).unwrap();
        let data: Vec<LabeledSample> = [(-2.0, 0), (-0.5, 0), (0.3, 1), (4.0, 1)]
            .iter()
            .map(|(x, y)| LabeledSample::new(vec![*x, 1.0], *y).unwrap())
            .collect();
        assert_eq!(evaluate(&spec, &t, &data).unwrap().1, 1.0);
    }

    proptest! {
        #[test]
        fn shifting_scores_is_invisible(seed in 0u64..1000, shift in -100.0..100.0f64) {
            // adding the same constant to every output bias shifts every score
            let spec = ModelSpec::mlp1(3, 4, 5, Activation::Tanh);
            let mut rng = derive_stream(seed, 0);
            let t = spec.init(&mut rng).unwrap();
            let s = random_sample(&spec, &mut rng);
            let mut moved = t.clone().into_vec();
            let n = moved.len();
            for b in &mut moved[n - 5..] {
                *b += shift;
            }
            let moved = GradVec::new(moved).unwrap();
            let l0 = forward_loss(&spec, &t, &s).unwrap();
            let l1 = forward_loss(&spec, &moved, &s).unwrap();
            prop_assert!((l0 - l1).abs() <= 1e-12 * (1.0 + shift.abs()));
            let g0 = per_sample_grad(&spec, &t, &s).unwrap();
            let g1 = per_sample_grad(&spec, &moved, &s).unwrap();
            prop_assert!(g0.iter().zip(g1.iter()).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + shift.abs())));
        }

        #[test]
        fn loss_is_non_negative(seed in 0u64..1000, scale in 0.0..50.0f64) {
            let spec = ModelSpec::logistic(4, 3);
            let mut rng = derive_stream(seed, 1);
            let t = spec.init(&mut rng).unwrap().scaled(scale);
            let s = random_sample(&spec, &mut rng);
            prop_assert!(forward_loss(&spec, &t, &s).unwrap() >= 0.0);
        }
    }
}
