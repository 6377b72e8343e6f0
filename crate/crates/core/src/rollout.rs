//! Attention rollout: per-layer head averages with an identity term, column
//! normalised and multiplied through depth. The class-token row of the product,
//! minus its self-entry, is the spatial prior.

use crate::error::{DidError, Result};
use crate::semantic::exact_sqrt;
use crate::tensor::{matmul, Tensor};

/// Divides every column by its sum.
pub fn normc(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    let data = m.data();
    let mut sums = vec![0.0; c];
    for row in data.chunks(c) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some((column, &sum)) = sums.iter().enumerate().find(|(_, &s)| s <= 0.0) {
        return Err(DidError::ColumnSum { column, sum });
    }
    let mut out = Vec::with_capacity(r * c);
    for row in data.chunks(c) {
        out.extend(row.iter().zip(&sums).map(|(v, s)| v / s));
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

/// `normc(mean_h(W_h) + I)` for one layer's `heads x T x T` attention.
pub fn layer_aggregate(attention: &Tensor) -> Result<Tensor> {
    let (heads, t, t2) = attention.dims3()?;
    if t != t2 {
        return Err(DidError::shape("layer_aggregate", attention.shape(), &[heads, t, t]));
    }
    let mut mean = vec![0.0; t * t];
    for h in 0..heads {
        for (m, a) in mean.iter_mut().zip(attention.row(h)) {
            *m += a;
        }
    }
    for m in mean.iter_mut() {
        *m /= heads as f64;
    }
    for i in 0..t {
        mean[i * t + i] += 1.0;
    }
    normc(&Tensor::from_parts(vec![t, t], mean))
}

/// Left-to-right product `G_1 G_2 ... G_L`.
pub fn rollout(layers: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| DidError::InvalidTensor("rollout needs at least one layer".into()))?;
    rest.iter().try_fold(first.clone(), |acc, g| matmul(&acc, g))
}

/// Row 0 of `V` without its first entry, reshaped to `sqrt(N) x sqrt(N)` in
/// the same raster order as the patch grid.
pub fn extract_class_row(v: &Tensor) -> Result<Tensor> {
    let (t, t2) = v.dims2()?;
    if t != t2 || t < 2 {
        return Err(DidError::shape("extract_class_row", v.shape(), &[t, t]));
    }
    let n = t - 1;
    let side = exact_sqrt(n).ok_or(DidError::NonSquareTokens(n))?;
    Ok(Tensor::from_parts(vec![side, side], v.row(0)[1..].to_vec()))
}

/// Full chain from a backbone's attention stack to the spatial prior.
pub fn spatial_prior(attention: &[Tensor]) -> Result<Tensor> {
    let layers = attention
        .iter()
        .map(layer_aggregate)
        .collect::<Result<Vec<_>>>()?;
    extract_class_row(&rollout(&layers)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column_sums(m: &Tensor) -> Vec<f64> {
        let (_, c) = m.dims2().unwrap();
        let mut s = vec![0.0; c];
        for row in m.data().chunks(c) {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        s
    }

    fn random_row_stochastic(rng: &mut ChaCha8Rng, heads: usize, t: usize) -> Tensor {
        let mut data: Vec<f64> = (0..heads * t * t).map(|_| rng.gen_range(0.0..1.0)).collect();
        for row in data.chunks_mut(t) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![heads, t, t], data).unwrap()
    }

    #[test]
    fn normc_examples() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(normc(&m).unwrap().data(), &[0.25, 0.5, 0.75, 0.5]);
        assert_eq!(normc(&Tensor::identity(3)).unwrap(), Tensor::identity(3));
        let stochastic = Tensor::from_rows(&[vec![0.5, 0.25], vec![0.5, 0.75]]).unwrap();
        assert_eq!(normc(&stochastic).unwrap(), stochastic);
    }

    #[test]
    fn normc_rejects_zero_column() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(normc(&m), Err(DidError::ColumnSum { column: 1, .. })));
    }

    #[test]
    fn aggregate_examples() {
        let mut eye = Vec::new();
        for _ in 0..3 {
            eye.extend_from_slice(Tensor::identity(4).data());
        }
        let heads = Tensor::new(vec![3, 4, 4], eye).unwrap();
        assert_eq!(layer_aggregate(&heads).unwrap(), Tensor::identity(4));

        let uniform = Tensor::filled(&[1, 2, 2], 0.5);
        assert_eq!(layer_aggregate(&uniform).unwrap().data(), &[0.75, 0.25, 0.25, 0.75]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = layer_aggregate(&random_row_stochastic(&mut rng, 4, 10)).unwrap();
        assert!(column_sums(&g).iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rollout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = layer_aggregate(&random_row_stochastic(&mut rng, 2, 5)).unwrap();
        assert_eq!(rollout(std::slice::from_ref(&g)).unwrap(), g);
        let eye = vec![Tensor::identity(5); 3];
        assert_eq!(rollout(&eye).unwrap(), Tensor::identity(5));
        assert!(rollout(&[]).is_err());
    }

    #[test]
    fn rollout_stays_column_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let layers = rng.gen_range(1..=4);
            let heads = rng.gen_range(1..=4);
            let side = rng.gen_range(1..=8);
            let t = side * side + 1;
            let gs: Vec<Tensor> = (0..layers)
                .map(|_| layer_aggregate(&random_row_stochastic(&mut rng, heads, t)).unwrap())
                .collect();
            let v = rollout(&gs).unwrap();
            assert!(column_sums(&v).iter().all(|s| (s - 1.0).abs() < 1e-9));
            let prior = extract_class_row(&v).unwrap();
            assert!(prior.data().iter().all(|&p| p >= 0.0));
            let total: f64 = prior.data().iter().sum();
            let direct: f64 = v.row(0)[1..].iter().sum();
            assert_eq!(total, direct);
            assert!((total - (v.row(0).iter().sum::<f64>() - v.at(&[0, 0]))).abs() < 1e-12);
        }
    }

    #[test]
    fn class_row_examples() {
        assert!(extract_class_row(&Tensor::identity(5)).unwrap().data().iter().all(|&v| v == 0.0));
        let mut data = vec![0.0; 25];
        data[..5].copy_from_slice(&[0.2, 0.1, 0.2, 0.3, 0.2]);
        let v = Tensor::matrix(5, 5, data).unwrap();
        let prior = extract_class_row(&v).unwrap();
        assert_eq!(prior.shape(), &[2, 2]);
        assert_eq!(prior.data(), &[0.1, 0.2, 0.3, 0.2]);
        assert!(matches!(
            extract_class_row(&Tensor::identity(4)),
            Err(DidError::NonSquareTokens(3))
        ));
    }

    #[test]
    fn aggregate_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (heads, side) = (3, 3);
        let t = side * side + 1;
        let stack: Vec<Tensor> = (0..2).map(|_| random_row_stochastic(&mut rng, heads, t)).collect();
        // permutation of tokens 1..N, token 0 fixed
        let mut perm: Vec<usize> = (1..t).collect();
        perm.reverse();
        perm.insert(0, 0);
        let permuted: Vec<Tensor> = stack
            .iter()
            .map(|a| {
                let mut out = vec![0.0; heads * t * t];
                for h in 0..heads {
                    for i in 0..t {
                        for j in 0..t {
                            out[h * t * t + i * t + j] = a.at(&[h, perm[i], perm[j]]);
                        }
                    }
                }
                Tensor::new(vec![heads, t, t], out).unwrap()
            })
            .collect();
        let p = spatial_prior(&stack).unwrap();
        let q = spatial_prior(&permuted).unwrap();
        for i in 1..t {
            assert!((q.data()[i - 1] - p.data()[perm[i] - 1]).abs() < 1e-12);
        }
    }
}
