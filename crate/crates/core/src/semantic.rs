//! Class-specific spatial maps from patch tokens, their pooled scores, and the
//! selection of which classes to localize.

use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DidError, Result};
use crate::tensor::{average_pool_spatial, Tensor};
use crate::vit::{read_f64s, write_f64s};

/// The `C x D` weights of the 1x1 convolution mapping token channels to classes.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadKernel {
    weights: Tensor,
}

impl HeadKernel {
    pub fn new(weights: Tensor) -> Result<Self> {
        weights.dims2()?;
        Ok(HeadKernel { weights })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        HeadKernel {
            weights: Tensor::zeros(&[classes, dim]),
        }
    }

    /// Glorot-uniform initialisation from a seed.
    pub fn init(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (classes + dim) as f64).sqrt();
        let data = (0..classes * dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        HeadKernel {
            weights: Tensor::from_parts(vec![classes, dim], data),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Class logits for an already pooled `D`-vector of token features.
    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        assert_eq!(pooled.len(), self.dim());
        (0..self.classes())
            .map(|c| {
                self.weights
                    .row(c)
                    .iter()
                    .zip(pooled)
                    .map(|(k, x)| k * x)
                    .sum()
            })
            .collect()
    }

    /// Header `classes, dim` as little-endian `u64`, then the row-major weights
    /// as little-endian `f64`.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(&(self.classes() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        write_f64s(&mut out, self.weights.data())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        let classes = u64::from_le_bytes(buf) as usize;
        input.read_exact(&mut buf)?;
        let dim = u64::from_le_bytes(buf) as usize;
        let count = classes
            .checked_mul(dim)
            .ok_or_else(|| DidError::Config("head header out of range".into()))?;
        let data = read_f64s(&mut input, count)?;
        Self::new(Tensor::new(vec![classes, dim], data)?)
    }
}

/// `N x D` tokens to a `D x h x w` feature stack, token `t` landing at
/// `(t / w, t % w)`.
pub fn reshape_tokens(tokens: &Tensor) -> Result<Tensor> {
    let (n, d) = tokens.dims2()?;
    let side = exact_sqrt(n).ok_or(DidError::NonSquareTokens(n))?;
    let src = tokens.data();
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        for c in 0..d {
            out[c * n + t] = src[t * d + c];
        }
    }
    Ok(Tensor::from_parts(vec![d, side, side], out))
}

/// Inverse of [`reshape_tokens`].
pub fn flatten_features(features: &Tensor) -> Result<Tensor> {
    let (d, h, w) = features.dims3()?;
    let n = h * w;
    let src = features.data();
    let mut out = vec![0.0; n * d];
    for c in 0..d {
        for t in 0..n {
            out[t * d + c] = src[c * n + t];
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

pub(crate) fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// `A_c(i, j) = sum_d x'_d(i, j) * k[c, d]`.
pub fn project_categories(features: &Tensor, head: &HeadKernel) -> Result<Tensor> {
    project_selected(features, head, &(0..head.classes()).collect::<Vec<_>>())
}

/// Category maps for a subset of classes, in the given order.
pub fn project_selected(features: &Tensor, head: &HeadKernel, classes: &[usize]) -> Result<Tensor> {
    let (d, h, w) = features.dims3()?;
    if classes.is_empty() {
        return Err(DidError::InvalidTensor("no classes selected".into()));
    }
    if d != head.dim() {
        return Err(DidError::shape(
            "project_categories",
            features.shape(),
            head.weights.shape(),
        ));
    }
    let area = h * w;
    let mut out = vec![0.0; classes.len() * area];
    for (slot, &c) in classes.iter().enumerate() {
        let map = &mut out[slot * area..(slot + 1) * area];
        for (ch, &k) in head.weights.row(c).iter().enumerate() {
            for (m, &x) in map.iter_mut().zip(features.row(ch)) {
                *m += x * k;
            }
        }
    }
    Ok(Tensor::from_parts(vec![classes.len(), h, w], out))
}

/// Spatial mean of each category map.
pub fn pool_scores(maps: &Tensor) -> Result<Vec<f64>> {
    average_pool_spatial(maps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelectionOrder {
    #[default]
    Descending,
    Ascending,
    Random,
}

impl SelectionOrder {
    pub const ALL: [SelectionOrder; 3] = [Self::Descending, Self::Ascending, Self::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Descending => "descending",
            Self::Ascending => "ascending",
            Self::Random => "random",
        }
    }
}

impl FromStr for SelectionOrder {
    type Err = DidError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| DidError::Config(format!("unknown selection order '{s}'")))
    }
}

/// Picks `min(n, C)` class indices. Ties keep the lower index first; the
/// random order is a seeded sample without replacement.
pub fn select_topn(scores: &[f64], n: usize, order: SelectionOrder, seed: u64) -> Vec<usize> {
    let n = n.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match order {
        SelectionOrder::Descending => {
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)))
        }
        SelectionOrder::Ascending => {
            idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
        }
        SelectionOrder::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return index::sample(&mut rng, scores.len(), n).into_vec();
        }
    }
    idx.truncate(n);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reshape_examples() {
        // token t = [t, 10t]
        let tokens = Tensor::from_rows(&(0..4).map(|t| vec![t as f64, 10.0 * t as f64]).collect::<Vec<_>>())
            .unwrap();
        let x = reshape_tokens(&tokens).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2]);
        assert_eq!(x.row(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(x.row(1), &[0.0, 10.0, 20.0, 30.0]);
        assert_eq!(flatten_features(&x).unwrap(), tokens);

        let one = Tensor::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap();
        let x = reshape_tokens(&one).unwrap();
        assert_eq!(x.shape(), &[3, 1, 1]);
        assert_eq!(x.data(), &[4.0, 5.0, 6.0]);

        assert!(matches!(
            reshape_tokens(&Tensor::zeros(&[3, 2])),
            Err(DidError::NonSquareTokens(3))
        ));
    }

    #[test]
    fn projection_examples() {
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let eye = HeadKernel::new(Tensor::identity(2)).unwrap();
        assert_eq!(project_categories(&x, &eye).unwrap(), x);

        let x = Tensor::new(vec![2, 1, 1], vec![2.0, 3.0]).unwrap();
        let k = HeadKernel::new(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap()).unwrap();
        assert_eq!(project_categories(&x, &k).unwrap().data(), &[-1.0]);

        let x = Tensor::filled(&[3, 2, 2], 1.5);
        let a = project_categories(&x, &HeadKernel::zeros(4, 3)).unwrap();
        assert_eq!(a.shape(), &[4, 2, 2]);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_shape_mismatch() {
        let x = Tensor::zeros(&[3, 2, 2]);
        assert!(project_categories(&x, &HeadKernel::zeros(2, 4)).is_err());
    }

    #[test]
    fn pool_examples() {
        let a = Tensor::new(vec![3, 2, 2], vec![7.0, 7.0, 7.0, 7.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(pool_scores(&a).unwrap(), vec![7.0, 2.5, 0.0]);
    }

    #[test]
    fn select_examples() {
        let b = [0.1, 0.9, 0.5];
        assert_eq!(select_topn(&b, 2, SelectionOrder::Descending, 0), vec![1, 2]);
        assert_eq!(select_topn(&b, 2, SelectionOrder::Ascending, 0), vec![0, 2]);
        assert_eq!(select_topn(&b, 5, SelectionOrder::Descending, 0), vec![1, 2, 0]);
        assert_eq!(select_topn(&b, 0, SelectionOrder::Descending, 0), Vec::<usize>::new());
        assert_eq!(select_topn(&[0.3, 0.3, 0.3], 2, SelectionOrder::Descending, 0), vec![0, 1]);
        assert_eq!(select_topn(&[0.3, 0.3, 0.3], 2, SelectionOrder::Ascending, 0), vec![0, 1]);
    }

    #[test]
    fn random_selection_is_seeded_without_replacement() {
        let b = [0.0; 8];
        let a = select_topn(&b, 5, SelectionOrder::Random, 42);
        assert_eq!(a, select_topn(&b, 5, SelectionOrder::Random, 42));
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        assert!(a.iter().all(|&i| i < 8));
        assert_eq!(select_topn(&b, 20, SelectionOrder::Random, 1).len(), 8);
    }

    #[test]
    fn head_round_trip() {
        let k = HeadKernel::init(4, 32, 3);
        let mut buf = Vec::new();
        k.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 32 * 8);
        assert_eq!(HeadKernel::read_from(buf.as_slice()).unwrap(), k);
    }

    fn features(d: usize, side: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-5.0..5.0f64, d * side * side)
            .prop_map(move |v| Tensor::new(vec![d, side, side], v).unwrap())
    }

    proptest! {
        #[test]
        fn pooling_commutes_with_projection(
            (x, k) in (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(d, side, c)| {
                (features(d, side), prop::collection::vec(-2.0..2.0f64, c * d)
                    .prop_map(move |v| HeadKernel::new(Tensor::matrix(c, d, v).unwrap()).unwrap()))
            })
        ) {
            let pooled = pool_scores(&project_categories(&x, &k).unwrap()).unwrap();
            let means = average_pool_spatial(&x).unwrap();
            let direct = k.logits(&means);
            for (a, b) in pooled.iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn reshape_inverse_is_identity(x in (1usize..6, 1usize..6).prop_flat_map(|(d, s)| features(d, s))) {
            let tokens = flatten_features(&x).unwrap();
            prop_assert_eq!(reshape_tokens(&tokens).unwrap(), x);
        }

        #[test]
        fn selection_respects_order(b in prop::collection::vec(-3.0..3.0f64, 1..10), n in 0usize..12) {
            let desc = select_topn(&b, n, SelectionOrder::Descending, 0);
            prop_assert_eq!(desc.len(), n.min(b.len()));
            prop_assert!(desc.windows(2).all(|w| b[w[0]] >= b[w[1]]));
            let asc = select_topn(&b, n, SelectionOrder::Ascending, 0);
            prop_assert!(asc.windows(2).all(|w| b[w[0]] <= b[w[1]]));
        }
    }
}
