//! Named parameter collections and the layer primitives built on them.

use std::collections::HashMap;

use dhvae_autograd::functional::{group_norm, weight_standardize};
use dhvae_autograd::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const WS_EPS: f64 = 1e-10;
pub const GN_EPS: f64 = 1e-5;

/// Ordered, uniquely named parameter arrays.
#[derive(Clone, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ModelParams({} arrays, {} values)", self.len(), self.count())
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        match self.index.get(name) {
            Some(&i) => &self.tensors[i],
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Replaces the values of parameter `i` with a fresh trainable leaf.
    pub fn set_values(&mut self, i: usize, data: Vec<f64>) {
        let shape = self.tensors[i].shape().to_vec();
        self.tensors[i] = Tensor::param(data, &shape);
    }

    /// Copy whose arrays are constants that no gradient reaches.
    pub fn frozen(&self) -> Self {
        let mut out = self.clone();
        out.tensors = self.tensors.iter().map(Tensor::detach).collect();
        out
    }

    /// Checks names and shapes against `layout` and adopts its order.
    pub fn conform_to(&self, layout: &ModelParams) -> Result<ModelParams> {
        if self.len() != layout.len() {
            return Err(Error::Shape(format!("expected {} parameter arrays, found {}", layout.len(), self.len())));
        }
        let mut out = ModelParams::new();
        for (name, t) in layout.iter() {
            let mine = self.try_get(name).ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if mine.shape() != t.shape() {
                return Err(Error::Shape(format!("parameter {name}: shape {:?}, expected {:?}", mine.shape(), t.shape())));
            }
            out.insert(name, Tensor::param(mine.to_vec(), mine.shape()));
        }
        Ok(out)
    }
}

/// Sequential, seeded parameter initializer.
pub(crate) struct Init<'a> {
    pub params: ModelParams,
    rng: &'a mut ChaCha8Rng,
    trainable: bool,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, trainable: bool) -> Self {
        Init { params: ModelParams::new(), rng, trainable }
    }

    fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        if self.trainable {
            Tensor::param(data, shape)
        } else {
            Tensor::from_vec(data, shape)
        }
    }

    /// He-normal kernel scaled by `gain`, zero bias.
    pub fn conv(&mut self, name: &str, o: usize, i: usize, k: usize, gain: f64) {
        let fan_in = (i * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).unwrap();
        let w: Vec<f64> = (0..o * i * k * k).map(|_| normal.sample(self.rng)).collect();
        let w = self.leaf(w, &[o, i, k, k]);
        let b = self.leaf(vec![0.0; o], &[o]);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), b);
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        let g = self.leaf(vec![1.0; c], &[c]);
        let b = self.leaf(vec![0.0; c], &[c]);
        self.params.insert(format!("{name}.gamma"), g);
        self.params.insert(format!("{name}.beta"), b);
    }

    pub fn resblock(&mut self, name: &str, cin: usize, cout: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cout, cin, 3, 1.0);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, 1.0);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1, 1.0);
        }
    }

    pub fn attention(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.norm"), c);
        for part in ["q", "k", "v"] {
            self.conv(&format!("{name}.{part}"), c, c, 1, 1.0);
        }
        self.conv(&format!("{name}.proj"), c, c, 1, 0.1);
    }
}

/// Largest group count not above 8 that divides `c`.
pub fn group_count(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

fn add_bias(y: &Tensor, b: &Tensor) -> Tensor {
    y.add(&b.reshape(&[1, b.numel(), 1, 1]))
}

/// Plain convolution with bias; padding keeps the spatial size at stride 1.
pub fn conv(p: &ModelParams, name: &str, x: &Tensor, stride: usize) -> Tensor {
    let w = p.get(&format!("{name}.weight"));
    add_bias(&x.conv2d(w, stride, w.dim(2) / 2), p.get(&format!("{name}.bias")))
}

/// Convolution whose kernel is standardized per output channel first.
pub fn ws_conv(p: &ModelParams, name: &str, x: &Tensor, stride: usize) -> Tensor {
    let w = weight_standardize(p.get(&format!("{name}.weight")), WS_EPS);
    add_bias(&x.conv2d(&w, stride, w.dim(2) / 2), p.get(&format!("{name}.bias")))
}

pub fn norm(p: &ModelParams, name: &str, x: &Tensor) -> Tensor {
    let g = p.get(&format!("{name}.gamma"));
    group_norm(x, group_count(x.dim(1)), g, p.get(&format!("{name}.beta")), GN_EPS)
}

/// Pre-activation residual block: (GN, swish, WS conv) twice plus skip.
pub fn resblock(p: &ModelParams, name: &str, x: &Tensor) -> Tensor {
    let h = ws_conv(p, &format!("{name}.conv1"), &norm(p, &format!("{name}.norm1"), x).swish(), 1);
    let h = ws_conv(p, &format!("{name}.conv2"), &norm(p, &format!("{name}.norm2"), &h).swish(), 1);
    let skip_name = format!("{name}.skip");
    let skip = if p.try_get(&format!("{skip_name}.weight")).is_some() {
        ws_conv(p, &skip_name, x, 1)
    } else {
        x.clone()
    };
    h.add(&skip)
}

/// Single-head scaled dot-product self-attention over spatial positions,
/// added back to the input.
pub fn attention(p: &ModelParams, name: &str, x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (n, c, len) = (s[0], s[1], s[2] * s[3]);
    let h = norm(p, &format!("{name}.norm"), x);
    let q = conv(p, &format!("{name}.q"), &h, 1).reshape(&[n, c, len]);
    let k = conv(p, &format!("{name}.k"), &h, 1).reshape(&[n, c, len]);
    let v = conv(p, &format!("{name}.v"), &h, 1).reshape(&[n, c, len]);
    // scores[i, j] = q_i . k_j / sqrt(c)
    let scores = q.matmul_t(&k, true, false).mul_scalar(1.0 / (c as f64).sqrt());
    let attn = scores.softmax(2);
    let out = v.matmul_t(&attn, false, true).reshape(&s);
    x.add(&conv(p, &format!("{name}.proj"), &out, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;

    #[test]
    fn group_counts() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(2), 2);
        assert_eq!(group_count(1), 1);
    }

    #[test]
    fn insert_order_and_conform() {
        let mut rng = rng_from(0);
        let mut init = Init::new(&mut rng, true);
        init.conv("a", 2, 1, 3, 1.0);
        init.norm("b", 2);
        let p = init.params;
        assert_eq!(p.names(), &["a.weight", "a.bias", "b.gamma", "b.beta"]);
        assert_eq!(p.count(), 18 + 2 + 2 + 2);
        let again = p.conform_to(&p).unwrap();
        assert_eq!(again, p);
        let mut other = ModelParams::new();
        other.insert("a.weight", Tensor::zeros(&[2, 1, 3, 3]));
        assert!(other.conform_to(&p).is_err());
    }

    #[test]
    fn attention_is_permutation_equivariant_over_batch() {
        let mut rng = rng_from(1);
        let mut init = Init::new(&mut rng, true);
        init.attention("att", 4);
        let p = init.params;
        let xs: Vec<f64> = (0..2 * 4 * 9).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let x = Tensor::from_vec(xs, &[2, 4, 3, 3]);
        let y = attention(&p, "att", &x);
        let y0 = attention(&p, "att", &x.narrow(0, 0, 1));
        let y1 = attention(&p, "att", &x.narrow(0, 1, 1));
        assert_eq!(&y.data()[..36], y0.data());
        assert_eq!(&y.data()[36..], y1.data());
    }
}
