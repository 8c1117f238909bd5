//! Gated-attention MIL network.
//!
//! A bag of `K` patch embeddings (each of width `M`) is scored patch by patch
//! with a sigmoid-gated attention branch of hidden width `L`, the scores are
//! softmax-normalised over the bag, and the score-weighted mean embedding is
//! passed through a small fully connected head producing two class logits.
//!
//! Gradients are computed analytically; [`Adam`] applies decoupled weight
//! decay. Everything is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::seed;

/// Shape of a model: attention width `l`, embedding width `m`, and the widths
/// of the head's hidden layers (the output layer of width 2 is implicit).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub l: usize,
    pub m: usize,
    pub hidden: Vec<usize>,
}

impl ModelDims {
    /// Attention width `l`, embedding width `m`, one hidden layer of `m / 2`.
    pub fn standard(l: usize, m: usize) -> Self {
        ModelDims {
            l,
            m,
            hidden: vec![(m / 2).max(1)],
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims::standard(256, 1024)
    }
}

/// Fully connected layer, `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (r, out) in y.iter_mut().enumerate() {
            *out += dot(self.weight.row(r), x);
        }
        y
    }
}

/// Trainable parameters: attention matrices `V`, `U` (`L × M`), projection
/// vector `w` (`L`), then the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub attn_v: Matrix,
    pub attn_u: Matrix,
    pub attn_w: Vec<f64>,
    pub head: Vec<Dense>,
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

impl ModelParams {
    /// Glorot-uniform initialisation with zero biases.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        if dims.l == 0 || dims.m == 0 || dims.hidden.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        let mut rng = seed::rng_for(seed, &["model-init".into()]);
        let attn_v = glorot(dims.l, dims.m, dims.m, dims.l, &mut rng);
        let attn_u = glorot(dims.l, dims.m, dims.m, dims.l, &mut rng);
        let attn_w = glorot(1, dims.l, dims.l, 1, &mut rng).into_vec();
        let mut head = Vec::with_capacity(dims.hidden.len() + 1);
        let mut width = dims.m;
        for &out in dims.hidden.iter().chain(std::iter::once(&2)) {
            head.push(Dense {
                weight: glorot(out, width, width, out, &mut rng),
                bias: vec![0.0; out],
            });
            width = out;
        }
        Ok(ModelParams {
            attn_v,
            attn_u,
            attn_w,
            head,
        })
    }

    /// All-zero parameters with the given layout.
    pub fn zeros(dims: &ModelDims) -> Self {
        let mut head = Vec::new();
        let mut width = dims.m;
        for &out in dims.hidden.iter().chain(std::iter::once(&2)) {
            head.push(Dense::zeros(width, out));
            width = out;
        }
        ModelParams {
            attn_v: Matrix::zeros(dims.l, dims.m),
            attn_u: Matrix::zeros(dims.l, dims.m),
            attn_w: vec![0.0; dims.l],
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(&self.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            l: self.attn_v.rows(),
            m: self.attn_v.cols(),
            hidden: self.head[..self.head.len().saturating_sub(1)]
                .iter()
                .map(Dense::output_width)
                .collect(),
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.attn_v.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.attn_v.cols()
    }

    /// Check the structural invariants and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (l, m) = (self.attn_v.rows(), self.attn_v.cols());
        if self.attn_u.rows() != l || self.attn_u.cols() != m {
            return Err(Error::shape("attention matrices V and U differ in shape"));
        }
        if self.attn_w.len() != l {
            return Err(Error::shape(format!(
                "attention vector has length {}, expected {l}",
                self.attn_w.len()
            )));
        }
        let Some(last) = self.head.last() else {
            return Err(Error::shape("classifier head has no layers"));
        };
        if last.output_width() != 2 {
            return Err(Error::shape("classifier head must end in 2 logits"));
        }
        let mut width = m;
        for layer in &self.head {
            if layer.input_width() != width || layer.bias.len() != layer.output_width() {
                return Err(Error::shape("classifier head layers do not chain"));
            }
            width = layer.output_width();
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// Parameter tensors in checkpoint order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.attn_v.as_slice(),
            self.attn_u.as_slice(),
            &self.attn_w,
        ];
        for layer in &self.head {
            out.push(layer.weight.as_slice());
            out.push(&layer.bias);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.attn_v.as_mut_slice(),
            self.attn_u.as_mut_slice(),
            &mut self.attn_w,
        ];
        for layer in &mut self.head {
            out.push(layer.weight.as_mut_slice());
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if features.cols() != self.embedding_dim() {
            return Err(Error::shape(format!(
                "features have width {}, model expects {}",
                features.cols(),
                self.embedding_dim()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("patch features"));
        }
        Ok(())
    }

    /// Gated attention logit of a single embedding.
    pub fn attention_logit(&self, h: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.attention_dim() {
            let p = dot(self.attn_v.row(j), h);
            let q = dot(self.attn_u.row(j), h);
            acc += self.attn_w[j] * p.tanh() * sigmoid(q);
        }
        acc
    }

    /// Attention scores and pooled embedding for a bag.
    pub fn attention_forward(&self, features: &Matrix) -> Result<AttentionResult> {
        self.check_features(features)?;
        let logits: Vec<f64> = (0..features.rows())
            .map(|k| self.attention_logit(features.row(k)))
            .collect();
        Ok(AttentionResult::from_logits(logits, features))
    }

    /// Deterministic head evaluation (no dropout).
    pub fn classify(&self, embedding: &[f64]) -> Result<[f64; 2]> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::shape(format!(
                "embedding has length {}, expected {}",
                embedding.len(),
                self.embedding_dim()
            )));
        }
        Ok(self.head_forward(embedding, None).logits)
    }

    fn head_forward(&self, embedding: &[f64], masks: Option<&[Vec<f64>]>) -> HeadTrace {
        let mut activations = vec![embedding.to_vec()];
        let mut pre = Vec::with_capacity(self.head.len());
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            let z = layer.apply(activations.last().expect("nonempty"));
            if i < last {
                let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                if let Some(masks) = masks {
                    for (v, m) in a.iter_mut().zip(&masks[i]) {
                        *v *= m;
                    }
                }
                activations.push(a);
            }
            pre.push(z);
        }
        let out = pre.last().expect("head nonempty");
        HeadTrace {
            logits: [out[0], out[1]],
            activations,
            pre,
        }
    }

    /// Attention followed by classification.
    pub fn forward(&self, features: &Matrix) -> Result<Forward> {
        let attention = self.attention_forward(features)?;
        let logits = self.head_forward(&attention.bag_embedding, None).logits;
        Ok(Forward { attention, logits })
    }

    /// Sample inverted-dropout masks for the hidden layers of the head.
    pub fn dropout_masks(&self, rate: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let keep = 1.0 - rate;
        self.head[..self.head.len() - 1]
            .iter()
            .map(|layer| {
                (0..layer.output_width())
                    .map(|_| {
                        if rate <= 0.0 || rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Loss and exact gradients with respect to every parameter and every
    /// feature entry. `masks` fixes the dropout pattern; `None` disables it.
    pub fn gradients(
        &self,
        features: &Matrix,
        label: u8,
        objective: &Objective,
        masks: Option<&[Vec<f64>]>,
    ) -> Result<Gradients> {
        self.check_features(features)?;
        let weight = objective.class_weight(label)?;
        let (k, l, m) = (features.rows(), self.attention_dim(), self.embedding_dim());

        // forward, keeping the gate activations
        let mut tanh_p = Matrix::zeros(k, l);
        let mut sig_q = Matrix::zeros(k, l);
        let mut logits = vec![0.0; k];
        for i in 0..k {
            let h = features.row(i);
            let mut acc = 0.0;
            for j in 0..l {
                let t = dot(self.attn_v.row(j), h).tanh();
                let s = sigmoid(dot(self.attn_u.row(j), h));
                tanh_p.set(i, j, t);
                sig_q.set(i, j, s);
                acc += self.attn_w[j] * t * s;
            }
            logits[i] = acc;
        }
        let attention = AttentionResult::from_logits(logits, features);
        let head = self.head_forward(&attention.bag_embedding, masks);
        let probs = softmax2(head.logits);
        let loss = -weight * probs[label as usize].ln();

        let mut grads = self.zeros_like();

        // head backward
        let mut delta: Vec<f64> = (0..2)
            .map(|c| weight * (probs[c] - if c == label as usize { 1.0 } else { 0.0 }))
            .collect();
        for i in (0..self.head.len()).rev() {
            let layer = &self.head[i];
            grads.head[i].weight.add_outer(&delta, &head.activations[i]);
            for (b, d) in grads.head[i].bias.iter_mut().zip(&delta) {
                *b += d;
            }
            let mut upstream = vec![0.0; layer.input_width()];
            layer.weight.matvec_t_add(&delta, &mut upstream);
            if i > 0 {
                // through dropout and ReLU of hidden layer i-1
                let pre = &head.pre[i - 1];
                for (n, u) in upstream.iter_mut().enumerate() {
                    let mask = masks.map_or(1.0, |ms| ms[i - 1][n]);
                    *u *= if pre[n] > 0.0 { mask } else { 0.0 };
                }
            }
            delta = upstream;
        }
        let d_embedding = delta;

        // pooling backward: z = Σ a_k h_k
        let scores = &attention.scores;
        let d_scores: Vec<f64> = (0..k).map(|i| dot(&d_embedding, features.row(i))).collect();
        let mean: f64 = scores.iter().zip(&d_scores).map(|(a, d)| a * d).sum();

        let mut d_features = Matrix::zeros(k, m);
        let mut dp = vec![0.0; l];
        let mut dq = vec![0.0; l];
        for i in 0..k {
            let ds = scores[i] * (d_scores[i] - mean);
            let h = features.row(i);
            let row = d_features.row_mut(i);
            for (o, dz) in row.iter_mut().zip(&d_embedding) {
                *o = scores[i] * dz;
            }
            if ds == 0.0 {
                continue;
            }
            for j in 0..l {
                let t = tanh_p.get(i, j);
                let s = sig_q.get(i, j);
                grads.attn_w[j] += ds * t * s;
                let dg = ds * self.attn_w[j];
                dp[j] = dg * s * (1.0 - t * t);
                dq[j] = dg * t * s * (1.0 - s);
            }
            grads.attn_v.add_outer(&dp, h);
            grads.attn_u.add_outer(&dq, h);
            self.attn_v.matvec_t_add(&dp, row);
            self.attn_u.matvec_t_add(&dq, row);
        }

        Ok(Gradients {
            loss,
            logits: head.logits,
            params: grads,
            features: d_features,
        })
    }
}

struct HeadTrace {
    logits: [f64; 2],
    /// inputs to each layer (post-ReLU, post-dropout)
    activations: Vec<Vec<f64>>,
    /// pre-activation outputs of each layer
    pre: Vec<Vec<f64>>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let p = softmax(&logits);
    [p[0], p[1]]
}

/// Probability of class 1 from a pair of logits.
pub fn positive_probability(logits: [f64; 2]) -> f64 {
    sigmoid(logits[1] - logits[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
    pub bag_embedding: Vec<f64>,
}

impl AttentionResult {
    /// Normalise raw gated logits and pool `features` with the scores.
    pub fn from_logits(logits: Vec<f64>, features: &Matrix) -> Self {
        let scores = softmax(&logits);
        let mut bag_embedding = vec![0.0; features.cols()];
        for (k, &a) in scores.iter().enumerate() {
            for (z, h) in bag_embedding.iter_mut().zip(features.row(k)) {
                *z += a * h;
            }
        }
        AttentionResult {
            scores,
            logits,
            bag_embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub attention: AttentionResult,
    pub logits: [f64; 2],
}

impl Forward {
    pub fn positive_probability(&self) -> f64 {
        positive_probability(self.logits)
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub logits: [f64; 2],
    pub params: ModelParams,
    pub features: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    CrossEntropy,
    BalancedCrossEntropy,
}

/// Loss mode plus the training-set class counts used by the balanced mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mode: LossMode,
    pub class_counts: [usize; 2],
}

impl Objective {
    pub fn plain() -> Self {
        Objective {
            mode: LossMode::CrossEntropy,
            class_counts: [1, 1],
        }
    }

    /// Per-sample weight. Balanced weights are `n / (2 n_c)`, which average
    /// to one over the training samples.
    pub fn class_weight(&self, label: u8) -> Result<f64> {
        if label > 1 {
            return Err(Error::InvalidLabel(label));
        }
        match self.mode {
            LossMode::CrossEntropy => Ok(1.0),
            LossMode::BalancedCrossEntropy => {
                let [n0, n1] = self.class_counts;
                if n0 == 0 || n1 == 0 {
                    return Err(Error::config("balanced loss needs positive class counts"));
                }
                Ok((n0 + n1) as f64 / (2.0 * self.class_counts[label as usize] as f64))
            }
        }
    }
}

/// Weighted cross-entropy of `softmax(logits)` at `label`.
pub fn loss(logits: [f64; 2], label: u8, objective: &Objective) -> Result<f64> {
    let weight = objective.class_weight(label)?;
    // log-softmax via log-sum-exp
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    Ok(weight * (lse - logits[label as usize]))
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: ModelParams,
    second: ModelParams,
    step: i32,
}

impl Adam {
    pub fn new(like: &ModelParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One Adam update with decoupled weight decay:
    /// `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        learning_rate: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.dims() != grads.dims() || params.dims() != self.first.dims() {
            return Err(Error::shape("parameter, gradient and optimizer shapes differ"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let g_slices = grads.slices();
        let m_slices = self.first.slices_mut();
        let v_slices = self.second.slices_mut();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(g_slices)
            .zip(m_slices)
            .zip(v_slices)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(l: usize, m: usize, seed: u64) -> ModelParams {
        ModelParams::init(&ModelDims::standard(l, m), seed).unwrap()
    }

    fn features(k: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        let data = (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(k, m, data).unwrap()
    }

    #[test]
    fn single_patch_gets_all_attention() {
        let p = toy(4, 3, 1);
        let r = p.attention_forward(&features(1, 3, 2)).unwrap();
        assert_eq!(r.scores, vec![1.0]);
    }

    #[test]
    fn identical_rows_share_attention_equally() {
        let p = toy(4, 3, 1);
        let row = vec![0.3, -0.2, 0.9];
        let f = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let r = p.attention_forward(&f).unwrap();
        for s in &r.scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-15);
        }
        for (z, h) in r.bag_embedding.iter().zip(&row) {
            assert!((z - h).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_gated_attention_matches_hand_evaluation() {
        let mut p = ModelParams::zeros(&ModelDims {
            l: 1,
            m: 1,
            hidden: vec![1],
        });
        p.attn_v.set(0, 0, 1.0);
        p.attn_u.set(0, 0, 1.0);
        p.attn_w[0] = 1.0;
        let big = 3.0;
        let f = Matrix::from_rows(&[vec![0.0], vec![big]]).unwrap();
        let r = p.attention_forward(&f).unwrap();
        // s(0) = tanh(0)·σ(0) = 0; s(3) = tanh(3)/(1+e^-3)
        let s1 = big.tanh() / (1.0 + (-big).exp());
        let a0 = 1.0 / (1.0 + s1.exp());
        assert!((r.logits[0] - 0.0).abs() < 1e-15);
        assert!((r.logits[1] - s1).abs() < 1e-15);
        assert!((r.scores[0] - a0).abs() < 1e-15);
        assert!((r.scores[1] - (1.0 - a0)).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_bad_input() {
        let p = toy(4, 3, 1);
        assert!(matches!(
            p.attention_forward(&features(2, 4, 1)),
            Err(Error::Shape(_))
        ));
        let mut f = features(2, 3, 1);
        f.set(1, 1, f64::NAN);
        assert!(matches!(p.attention_forward(&f), Err(Error::NonFinite(_))));
        assert!(matches!(
            p.attention_forward(&Matrix::zeros(0, 3)),
            Err(Error::EmptyBag)
        ));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let p = ModelParams::zeros(&ModelDims::standard(2, 4));
        assert_eq!(p.classify(&[1.0, 2.0, 3.0, 4.0]).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn single_layer_head_matches_manual_multiply() {
        let mut p = ModelParams::zeros(&ModelDims {
            l: 1,
            m: 2,
            hidden: vec![],
        });
        p.head[0].weight = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, -1.0]]).unwrap();
        p.head[0].bias = vec![0.5, -0.5];
        // [1·3 + 0·4 + 0.5, 2·3 − 4 − 0.5]
        assert_eq!(p.classify(&[3.0, 4.0]).unwrap(), [3.5, 1.5]);
        assert!(p.classify(&[1.0]).is_err());
    }

    #[test]
    fn classify_is_deterministic() {
        let p = toy(4, 6, 3);
        let e = vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        assert_eq!(p.classify(&e).unwrap(), p.classify(&e).unwrap());
    }

    #[test]
    fn loss_fixed_values() {
        let o = Objective::plain();
        assert!((loss([0.0, 0.0], 0, &o).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss([10.0, -10.0], 0, &o).unwrap() < 1e-4);
        assert!(matches!(loss([0.0, 0.0], 2, &o), Err(Error::InvalidLabel(2))));
    }

    #[test]
    fn balanced_loss_weights_minority_class() {
        let o = Objective {
            mode: LossMode::BalancedCrossEntropy,
            class_counts: [75, 25],
        };
        let plain = loss([0.3, -0.1], 1, &Objective::plain()).unwrap();
        // 100 / (2·25) = 2, 100 / (2·75) = 2/3; average over samples is 1
        assert!((loss([0.3, -0.1], 1, &o).unwrap() - 2.0 * plain).abs() < 1e-15);
        let plain0 = loss([0.3, -0.1], 0, &Objective::plain()).unwrap();
        assert!((loss([0.3, -0.1], 0, &o).unwrap() - plain0 * 2.0 / 3.0).abs() < 1e-15);
        let avg = (75.0 * o.class_weight(0).unwrap() + 25.0 * o.class_weight(1).unwrap()) / 100.0;
        assert!((avg - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_loss_matches_forward_loss() {
        let p = toy(3, 4, 5);
        let f = features(6, 4, 6);
        let g = p.gradients(&f, 1, &Objective::plain(), None).unwrap();
        let fwd = p.forward(&f).unwrap();
        assert_eq!(g.logits, fwd.logits);
        assert!((g.loss - loss(fwd.logits, 1, &Objective::plain()).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn duplicated_rows_receive_equal_feature_gradients() {
        let p = toy(3, 4, 8);
        let mut f = features(5, 4, 9);
        let dup = f.row(1).to_vec();
        f.row_mut(3).copy_from_slice(&dup);
        let g = p.gradients(&f, 0, &Objective::plain(), None).unwrap();
        for c in 0..4 {
            assert!((g.features.get(1, c) - g.features.get(3, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_without_decay_is_identity() {
        let mut p = toy(3, 4, 1);
        let before = p.clone();
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &before.zeros_like(), 0.01, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_scalar_trace() {
        let dims = ModelDims {
            l: 1,
            m: 1,
            hidden: vec![],
        };
        let mut p = ModelParams::zeros(&dims);
        p.attn_w[0] = 1.0;
        let mut g = ModelParams::zeros(&dims);
        g.attn_w[0] = 0.5;
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1, 0.0).unwrap();
        // m̂ = 0.5, v̂ = 0.25, update = 0.1·0.5/(0.5+1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.attn_w[0] - expected).abs() < 1e-15);
        // untouched coordinates with zero gradient stay put
        assert_eq!(p.attn_v.get(0, 0), 0.0);
    }

    #[test]
    fn adam_decay_shrinks_parameters() {
        let mut p = toy(3, 4, 2);
        let zero = p.zeros_like();
        let mut adam = Adam::new(&p);
        let before = p.norm();
        adam.step(&mut p, &zero, 0.01, 0.1).unwrap();
        assert!(p.norm() < before);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = toy(3, 4, 2);
        let g = toy(2, 4, 2);
        let mut adam = Adam::new(&p);
        assert!(adam.step(&mut p, &g, 0.01, 0.0).is_err());
    }

    #[test]
    fn validate_catches_broken_params() {
        let mut p = toy(3, 4, 1);
        p.validate().unwrap();
        p.attn_w.push(0.0);
        assert!(p.validate().is_err());
        let mut q = toy(3, 4, 1);
        q.head[0].bias[0] = f64::INFINITY;
        assert!(matches!(q.validate(), Err(Error::NonFinite(_))));
    }
}
