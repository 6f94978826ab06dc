//! Independent reference implementations used as test oracles. Written with
//! plain loops over `Vec<f64>`, sharing no code with the library kernels.
#![allow(dead_code)]

use caw_core::model::{ClassPrototypeSet, DualEncoderModel, EncoderArch, ImageEncoder};
use caw_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `tanh(x W₁ᵀ + b₁) … W_Lᵀ + b_L`, one sample at a time.
pub fn encode(enc: &ImageEncoder, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = enc.layers().len();
    for (k, l) in enc.layers().iter().enumerate() {
        let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
        let w = l.weight.data();
        let mut next = vec![0.0; out];
        for o in 0..out {
            let mut s = l.bias.data()[o];
            for i in 0..inp {
                s += w[o * inp + i] * h[i];
            }
            next[o] = if k + 1 < n { s.tanh() } else { s };
        }
        h = next;
    }
    h
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|a| a / n).collect()
}

/// Cosine similarity to each prototype divided by τ.
pub fn logits(model: &DualEncoderModel, enc: &ImageEncoder, x: &[f64]) -> Vec<f64> {
    let f = unit(&encode(enc, x));
    let p = model.prototypes().embeddings();
    (0..p.rows())
        .map(|c| {
            let q = unit(p.row(c));
            f.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / model.temperature()
        })
        .collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let l = log_sum_exp(z);
    z.iter().map(|v| (v - l).exp()).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.max(1e-12).ln() - b.max(1e-12).ln())).sum()
}

/// Mean cross-entropy of the given encoder on a batch.
pub fn ce(model: &DualEncoderModel, enc: &ImageEncoder, x: &Tensor, y: &[usize]) -> f64 {
    (0..x.rows()).map(|i| {
        let z = logits(model, enc, x.row(i));
        log_sum_exp(&z) - z[y[i]]
    }).sum::<f64>() / x.rows() as f64
}

/// Central differences of `f` around `x`.
pub fn fd(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn toy_model(seed: u64, arch: EncoderArch, classes: usize, tau: f64) -> DualEncoderModel {
    let mut r = rng(seed);
    let enc = ImageEncoder::init(&arch, &mut r).unwrap();
    let protos = ClassPrototypeSet::random(classes, arch.embed_dim(), &mut r).unwrap();
    DualEncoderModel::new(enc, protos, tau).unwrap()
}

pub fn uniform_batch(seed: u64, b: usize, d: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let x = Tensor::matrix(b, d, (0..b * d).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    (x, (0..b).map(|_| r.random_range(0..classes)).collect())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
