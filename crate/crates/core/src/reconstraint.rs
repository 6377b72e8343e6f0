use std::str::FromStr;

use crate::error::{DidError, Result};
use crate::tensor::Tensor;

/// How the spatial prior is fused into the selected category maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Strategy {
    /// `S = V' * A`, elementwise.
    #[default]
    Hadamard,
    /// `S = V' + A`, elementwise.
    Sum,
    /// `S = A`.
    Identity,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Self::Hadamard, Self::Sum, Self::Identity];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hadamard => "hadamard",
            Self::Sum => "sum",
            Self::Identity => "identity",
        }
    }
}

impl FromStr for Strategy {
    type Err = DidError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DidError::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaps {
    /// `n_sel x h x w`
    pub maps: Tensor,
    pub strategy: Strategy,
}

pub fn apply_strategy(selected: &Tensor, prior: &Tensor, strategy: Strategy) -> Result<InstanceMaps> {
    let (_, h, w) = selected.dims3()?;
    if prior.shape() != [h, w] {
        return Err(DidError::shape("apply_strategy", selected.shape(), prior.shape()));
    }
    let area = h * w;
    let mut data = selected.data().to_vec();
    match strategy {
        Strategy::Identity => {}
        Strategy::Hadamard => {
            for map in data.chunks_mut(area) {
                map.iter_mut().zip(prior.data()).for_each(|(s, p)| *s *= p);
            }
        }
        Strategy::Sum => {
            for map in data.chunks_mut(area) {
                map.iter_mut().zip(prior.data()).for_each(|(s, p)| *s += p);
            }
        }
    }
    Ok(InstanceMaps {
        maps: Tensor::from_parts(selected.shape().to_vec(), data),
        strategy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Strategy;

    #[test]
    fn neutral_priors_reproduce_maps() {
        let a = Tensor::new(vec![2, 2, 2], vec![1.0, -2.0, 3.0, 4.0, 0.5, 0.0, -7.0, 2.0]).unwrap();
        let ones = Tensor::filled(&[2, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 2]);
        assert_eq!(apply_strategy(&a, &ones, Strategy::Hadamard).unwrap().maps, a);
        assert_eq!(apply_strategy(&a, &zeros, Strategy::Sum).unwrap().maps, a);
    }

    #[test]
    fn hadamard_hand_example() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let s = apply_strategy(&a, &v, Strategy::Hadamard).unwrap();
        assert_eq!(s.maps.data(), &[0.5, -1.0, 3.0, 0.0]);
        assert_eq!(s.strategy, Strategy::Hadamard);
    }

    #[test]
    fn extent_mismatch() {
        let a = Tensor::zeros(&[1, 2, 2]);
        assert!(apply_strategy(&a, &Tensor::zeros(&[3, 2]), Strategy::Sum).is_err());
    }

    #[test]
    fn parse_names() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("product".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn identity_copies_and_hadamard_keeps_prior_zeros(
            a in prop::collection::vec(-10.0..10.0f64, 2 * 9),
            v in prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 9),
        ) {
            let a = Tensor::new(vec![2, 3, 3], a).unwrap();
            let v = Tensor::new(vec![3, 3], v).unwrap();
            prop_assert_eq!(&apply_strategy(&a, &v, Strategy::Identity).unwrap().maps, &a);
            let s = apply_strategy(&a, &v, Strategy::Hadamard).unwrap().maps;
            for ch in 0..2 {
                for (sv, pv) in s.row(ch).iter().zip(v.data()) {
                    if *pv == 0.0 {
                        prop_assert_eq!(*sv, 0.0);
                    }
                }
            }
        }
    }
}
