//! Two-layer perceptron with manual backpropagation.
//!
//! Parameters are stored as `f32`; every forward and backward pass runs in `f64`
//! with a fixed accumulation order, so results are bitwise reproducible. Inputs
//! are centered by subtracting [`INPUT_CENTER`] before the first layer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// No nonlinearity; the network collapses to a linear model.
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Linear => z,
        }
    }

    /// Derivative expressed through the activation value `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - a * a,
            Self::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 40,
            lr: 0.1,
            init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("classifier.hidden must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "classifier.lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::config("classifier.init_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    input_dims: Vec<usize>,
    hidden: usize,
    classes: usize,
    activation: Activation,
    /// `[hidden][input]`, row-major.
    w1: Vec<f32>,
    b1: Vec<f32>,
    /// `[classes][hidden]`, row-major.
    w2: Vec<f32>,
    b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

/// Four-lane dot product; the fixed lane split keeps the summation order stable.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `f64` working copy of the parameters.
#[derive(Debug, Clone)]
struct Params {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Params {
    fn forward(&self, x: &[f64], dims: (usize, usize, usize), act: Activation) -> Forward {
        let (d, hn, k) = dims;
        let hidden: Vec<f64> = (0..hn)
            .map(|j| act.apply(dot(&self.w1[j * d..(j + 1) * d], x) + self.b1[j]))
            .collect();
        let logits = (0..k)
            .map(|c| dot(&self.w2[c * hn..(c + 1) * hn], &hidden) + self.b2[c])
            .collect();
        Forward { hidden, logits }
    }

    /// Hidden-layer error `∂CE/∂z1` for one sample.
    fn hidden_delta(&self, f: &Forward, dlogits: &[f64], hn: usize, act: Activation) -> Vec<f64> {
        (0..hn)
            .map(|j| {
                let back: f64 = dlogits.iter().enumerate().map(|(c, g)| g * self.w2[c * hn + j]).sum();
                back * act.slope(f.hidden[j])
            })
            .collect()
    }
}

/// Inputs are shifted by this constant before the first layer.
pub const INPUT_CENTER: f64 = 0.5;

fn centered(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v - INPUT_CENTER).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Classifier {
    /// Fresh network with weights drawn from `N(0, init_scale²)` and zero biases.
    pub fn init(
        input_dims: &[usize],
        hidden: usize,
        classes: usize,
        activation: Activation,
        init_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dims.is_empty() || input_dims.contains(&0) || hidden == 0 || classes < 2 {
            return Err(Error::config(format!(
                "invalid classifier shape: input {input_dims:?}, hidden {hidden}, classes {classes}"
            )));
        }
        let d: usize = input_dims.iter().product();
        let mut r = rng::seeded(seed);
        let w1 = rng::standard_normal_vec(hidden * d, &mut r)
            .into_iter()
            .map(|v| (v * init_scale) as f32)
            .collect();
        let w2 = rng::standard_normal_vec(classes * hidden, &mut r)
            .into_iter()
            .map(|v| (v * init_scale) as f32)
            .collect();
        Ok(Self {
            input_dims: input_dims.to_vec(),
            hidden,
            classes,
            activation,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
        })
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// First-layer weights, `[hidden][input]`.
    pub fn w1(&self) -> &[f32] {
        &self.w1
    }

    /// Second-layer weights, `[classes][hidden]`.
    pub fn w2(&self) -> &[f32] {
        &self.w2
    }

    fn params(&self) -> Params {
        Params {
            w1: to_f64(&self.w1),
            b1: to_f64(&self.b1),
            w2: to_f64(&self.w2),
            b2: to_f64(&self.b2),
        }
    }

    fn dims3(&self) -> (usize, usize, usize) {
        (self.input_len(), self.hidden, self.classes)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dims() != self.input_dims.as_slice() {
            return Err(Error::shape(format!(
                "classifier expects {:?}, got {:?}",
                self.input_dims,
                x.dims()
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(Error::config(format!(
                "label {label} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    /// Logits for a flat `f64` input.
    pub fn logits_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::shape("input length does not match the classifier"));
        }
        Ok(self
            .params()
            .forward(&centered(x), self.dims3(), self.activation)
            .logits)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.logits_at(&x.to_f64())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let logits = self.logits(x)?;
        Ok(Prediction {
            label: argmax(&logits),
            probabilities: softmax(&logits),
        })
    }

    pub fn predict_batch(&self, xs: &[Tensor]) -> Result<Vec<usize>> {
        let p = self.params();
        xs.iter()
            .map(|x| {
                self.check_input(x)?;
                Ok(argmax(
                    &p.forward(&centered(&x.to_f64()), self.dims3(), self.activation).logits,
                ))
            })
            .collect()
    }

    pub fn loss_at(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(cross_entropy(&self.logits_at(x)?, label))
    }

    pub fn loss(&self, x: &Tensor, label: usize) -> Result<f64> {
        self.check_input(x)?;
        self.loss_at(&x.to_f64(), label)
    }

    /// Loss and `∇_x CE` for a flat `f64` input.
    pub fn loss_and_input_gradient_at(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_label(label)?;
        if x.len() != self.input_len() {
            return Err(Error::shape("input length does not match the classifier"));
        }
        let (d, hn, _) = self.dims3();
        let p = self.params();
        let f = p.forward(&centered(x), self.dims3(), self.activation);
        let mut dlogits = softmax(&f.logits);
        dlogits[label] -= 1.0;
        let dz1 = p.hidden_delta(&f, &dlogits, hn, self.activation);
        let mut grad = vec![0.0; d];
        for (j, g) in dz1.iter().enumerate() {
            axpy(*g, &p.w1[j * d..(j + 1) * d], &mut grad);
        }
        Ok((cross_entropy(&f.logits, label), grad))
    }

    /// `∇_x CE(softmax(f(x)), label)` with the dims of `x`.
    pub fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let (_, g) = self.loss_and_input_gradient_at(&x.to_f64(), label)?;
        Tensor::from_f64(x.dims().to_vec(), &g)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters concatenated as `w1, b1, w2, b2`.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v
    }

    fn from_flat(meta: &ClassifierMeta, flat: &[f32]) -> Result<Self> {
        let d: usize = meta.input_dims.iter().product();
        let (hn, k) = (meta.hidden, meta.classes);
        let expected = hn * d + hn + k * hn + k;
        if flat.len() != expected {
            return Err(Error::Format(format!(
                "classifier parameter file holds {} values, sidecar implies {expected}",
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(hn * d);
        let (b1, rest) = rest.split_at(hn);
        let (w2, b2) = rest.split_at(k * hn);
        Ok(Self {
            input_dims: meta.input_dims.clone(),
            hidden: hn,
            classes: k,
            activation: meta.activation,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2.to_vec(),
        })
    }

    /// Writes `<dir>/classifier.mptf` (flat parameters) and `<dir>/classifier.json`.
    pub fn save(&self, dir: &Path, training: Option<TrainSummary>) -> Result<()> {
        let flat = self.flat_params();
        store::save_raw(dir.join(PARAMS_FILE), &Tensor::new(vec![flat.len()], flat)?)?;
        let meta = ClassifierMeta {
            input_dims: self.input_dims.clone(),
            hidden: self.hidden,
            classes: self.classes,
            activation: self.activation,
            training,
        };
        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, ClassifierMeta)> {
        let meta_path = dir.join(META_FILE);
        let params_path = dir.join(PARAMS_FILE);
        for p in [&meta_path, &params_path] {
            if !p.exists() {
                return Err(Error::MissingPrerequisite {
                    path: p.clone(),
                    hint: "run `manipure train-clf` first".into(),
                });
            }
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ClassifierMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        let flat = store::load_raw(&params_path)?;
        let clf = Self::from_flat(&meta, flat.data())?;
        Ok((clf, meta))
    }
}

pub const PARAMS_FILE: &str = "classifier.mptf";
pub const META_FILE: &str = "classifier.json";

/// JSON sidecar describing the parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub input_dims: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
    pub activation: Activation,
    pub training: Option<TrainSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss before each epoch's update.
    pub losses: Vec<f64>,
    /// Mean training loss of the returned parameters.
    pub final_loss: f64,
}

/// Full-batch gradient descent on the mean cross-entropy, single-threaded.
pub fn train(clf: &mut Classifier, images: &[Tensor], labels: &[usize], epochs: usize, lr: f64) -> Result<TrainReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::config(format!(
            "training needs matching, nonempty images and labels ({} vs {})",
            images.len(),
            labels.len()
        )));
    }
    for (x, &y) in images.iter().zip(labels) {
        clf.check_input(x)?;
        clf.check_label(y)?;
    }
    let xs: Vec<Vec<f64>> = images.iter().map(|x| centered(&x.to_f64())).collect();
    let (d, hn, k) = clf.dims3();
    let act = clf.activation;
    let n = xs.len() as f64;
    let mut p = clf.params();
    let mut losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut g = Params {
            w1: vec![0.0; hn * d],
            b1: vec![0.0; hn],
            w2: vec![0.0; k * hn],
            b2: vec![0.0; k],
        };
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            let f = p.forward(x, (d, hn, k), act);
            loss += cross_entropy(&f.logits, y);
            let mut dlogits = softmax(&f.logits);
            dlogits[y] -= 1.0;
            for (c, gc) in dlogits.iter().enumerate() {
                axpy(*gc, &f.hidden, &mut g.w2[c * hn..(c + 1) * hn]);
                g.b2[c] += gc;
            }
            let dz1 = p.hidden_delta(&f, &dlogits, hn, act);
            for (j, gj) in dz1.iter().enumerate() {
                axpy(*gj, x, &mut g.w1[j * d..(j + 1) * d]);
                g.b1[j] += gj;
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch} (loss {loss}); lower the learning rate"
            )));
        }
        losses.push(loss);
        let step = lr / n;
        for (param, grad) in [
            (&mut p.w1, &g.w1),
            (&mut p.b1, &g.b1),
            (&mut p.w2, &g.w2),
            (&mut p.b2, &g.b2),
        ] {
            for (a, b) in param.iter_mut().zip(grad.iter()) {
                *a -= step * b;
            }
        }
    }

    clf.w1 = to_f32(&p.w1);
    clf.b1 = to_f32(&p.b1);
    clf.w2 = to_f32(&p.w2);
    clf.b2 = to_f32(&p.b2);
    let q = clf.params();
    let final_loss = xs
        .iter()
        .zip(labels)
        .map(|(x, &y)| cross_entropy(&q.forward(x, (d, hn, k), act).logits, y))
        .sum::<f64>()
        / n;
    if !final_loss.is_finite() {
        return Err(Error::Numerical(
            "training produced non-finite parameters; lower the learning rate".into(),
        ));
    }
    Ok(TrainReport { losses, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn tiny(act: Activation, seed: u64) -> Classifier {
        Classifier::init(&[4, 4, 1], 6, 3, act, 0.5, seed).unwrap()
    }

    fn random_input(seed: u64, len: usize) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..len).map(|_| r.random::<f64>()).collect()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let clf = tiny(Activation::Tanh, 1);
        let x = Tensor::from_f64(vec![4, 4, 1], &random_input(2, 16)).unwrap();
        let p = clf.predict(&x).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.probabilities.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, clf.predict(&x).unwrap());
        assert_eq!(p.label, argmax(&clf.logits(&x).unwrap()));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let clf = tiny(Activation::Tanh, 3);
        let x = random_input(4, 16);
        let (_, g) = clf.loss_and_input_gradient_at(&x, 2).unwrap();
        let h = 1e-3;
        for i in 0..16 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (clf.loss_at(&xp, 2).unwrap() - clf.loss_at(&xm, 2).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn linear_gradient_closed_form() {
        // Without the nonlinearity, ∇_x CE = W1ᵀ W2ᵀ (p - onehot); centering does not enter.
        let clf = tiny(Activation::Linear, 5);
        let x = random_input(6, 16);
        let label = 1;
        let (_, g) = clf.loss_and_input_gradient_at(&x, label).unwrap();
        let mut r = softmax(&clf.logits_at(&x).unwrap());
        r[label] -= 1.0;
        let (hn, k) = (6, 3);
        for (i, gi) in g.iter().enumerate() {
            let mut expected = 0.0;
            for j in 0..hn {
                let back: f64 = (0..k).map(|c| clf.w2[c * hn + j] as f64 * r[c]).sum();
                expected += clf.w1[j * 16 + i] as f64 * back;
            }
            assert!((gi - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_prediction_has_tiny_gradient() {
        let mut clf = tiny(Activation::Tanh, 7);
        clf.b2 = vec![200.0, 0.0, 0.0];
        let x = random_input(8, 16);
        let (loss, g) = clf.loss_and_input_gradient_at(&x, 0).unwrap();
        assert!(loss < 1e-12);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-4 * 16.0);
    }

    #[test]
    fn training_is_deterministic_and_decreasing() {
        let images: Vec<Tensor> = (0..12)
            .map(|i| Tensor::from_f64(vec![4, 4, 1], &random_input(100 + i, 16)).unwrap())
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let run = |epochs, lr| {
            let mut clf = tiny(Activation::Tanh, 9);
            let rep = train(&mut clf, &images, &labels, epochs, lr).unwrap();
            (clf, rep)
        };
        let (a, ra) = run(10, 0.01);
        let (b, _) = run(10, 0.01);
        assert_eq!(a, b);
        assert!(ra.losses.windows(2).all(|w| w[1] < w[0]));
        let (zero, _) = run(0, 0.01);
        assert_eq!(zero, tiny(Activation::Tanh, 9));
    }

    #[test]
    fn divergence_is_reported() {
        let images = vec![Tensor::from_f64(vec![4, 4, 1], &[1e3; 16]).unwrap(); 3];
        let labels = vec![0, 1, 2];
        let mut clf = tiny(Activation::Linear, 1);
        let err = train(&mut clf, &images, &labels, 50, 1e6).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clf = tiny(Activation::Tanh, 11);
        clf.save(dir.path(), None).unwrap();
        let (back, meta) = Classifier::load(dir.path()).unwrap();
        assert_eq!(back, clf);
        assert_eq!(meta.hidden, 6);
        let missing = Classifier::load(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(missing, Error::MissingPrerequisite { .. }));
    }
}
