//! Two-operand batched contraction in einsum notation (`"bij,bjk->bik"`).
//!
//! Labels shared by both operands and the output are batch axes, labels
//! shared by both operands but absent from the output are summed, and labels
//! appearing in one operand and the output are free. Each operand's axes are
//! regrouped to `[batch, free, contracted]` and handed to a strided GEMM;
//! operands already in a compatible order are used in place.

use std::fmt;

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractSpec {
    pub lhs: Vec<char>,
    pub rhs: Vec<char>,
    pub out: Vec<char>,
}

impl ContractSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let invalid = |reason: &str| NumericsError::InvalidSpec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let (inputs, out) = spec.split_once("->").ok_or_else(|| invalid("missing '->'"))?;
        let (lhs, rhs) = inputs
            .split_once(',')
            .ok_or_else(|| invalid("expected two comma-separated operands"))?;
        let labels = |s: &str| -> Result<Vec<char>> {
            let v: Vec<char> = s.trim().chars().collect();
            if let Some(c) = v.iter().find(|c| !c.is_ascii_alphabetic()) {
                return Err(invalid(&format!("'{c}' is not an axis label")));
            }
            for (i, c) in v.iter().enumerate() {
                if v[..i].contains(c) {
                    return Err(invalid(&format!("label '{c}' repeated within an operand")));
                }
            }
            Ok(v)
        };
        let parsed = Self {
            lhs: labels(lhs)?,
            rhs: labels(rhs)?,
            out: labels(out)?,
        };
        for c in &parsed.out {
            if !parsed.lhs.contains(c) && !parsed.rhs.contains(c) {
                return Err(invalid(&format!("output label '{c}' not found in inputs")));
            }
        }
        for (side, other) in [(&parsed.lhs, &parsed.rhs), (&parsed.rhs, &parsed.lhs)] {
            if let Some(c) = side.iter().find(|c| !other.contains(c) && !parsed.out.contains(c)) {
                return Err(invalid(&format!(
                    "label '{c}' appears in one operand only and is not in the output"
                )));
            }
        }
        Ok(parsed)
    }

    /// Spec computing the gradient of the left operand from the output
    /// gradient and the right operand.
    pub(crate) fn lhs_adjoint(&self) -> Self {
        Self {
            lhs: self.out.clone(),
            rhs: self.rhs.clone(),
            out: self.lhs.clone(),
        }
    }

    /// Spec computing the gradient of the right operand: `out, lhs -> rhs`.
    pub(crate) fn rhs_adjoint(&self) -> Self {
        Self {
            lhs: self.out.clone(),
            rhs: self.lhs.clone(),
            out: self.rhs.clone(),
        }
    }
}

impl fmt::Display for ContractSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

fn extent_of(labels: &[char], shape: &[usize], c: char) -> usize {
    shape[labels.iter().position(|&l| l == c).unwrap()]
}

/// Reorders `t` (labelled `labels`) so its axes follow `order`.
fn arrange<T: Scalar>(t: &Tensor<T>, labels: &[char], order: &[char]) -> Result<Tensor<T>> {
    let axes: Vec<usize> = order
        .iter()
        .map(|c| labels.iter().position(|l| l == c).unwrap())
        .collect();
    t.permute(&axes)
}

fn is_prefix_order(labels: &[char], order: &[char]) -> bool {
    labels == order
}

/// Batched contraction of `a` and `b` following `spec`.
pub fn contract<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, spec: &ContractSpec) -> Result<Tensor<T>> {
    if a.rank() != spec.lhs.len() || b.rank() != spec.rhs.len() {
        return Err(NumericsError::InvalidSpec {
            spec: spec.to_string(),
            reason: format!("operand ranks {} and {} do not match", a.rank(), b.rank()),
        });
    }
    for (i, &c) in spec.lhs.iter().enumerate() {
        if let Some(j) = spec.rhs.iter().position(|&l| l == c) {
            if a.shape()[i] != b.shape()[j] {
                return Err(NumericsError::ExtentMismatch {
                    label: c,
                    lhs: a.shape()[i],
                    rhs: b.shape()[j],
                });
            }
        }
    }

    let batch: Vec<char> = spec
        .out
        .iter()
        .copied()
        .filter(|c| spec.lhs.contains(c) && spec.rhs.contains(c))
        .collect();
    let summed: Vec<char> = spec
        .lhs
        .iter()
        .copied()
        .filter(|c| spec.rhs.contains(c) && !spec.out.contains(c))
        .collect();
    let free_a: Vec<char> = spec.lhs.iter().copied().filter(|c| !spec.rhs.contains(c)).collect();
    let free_b: Vec<char> = spec.rhs.iter().copied().filter(|c| !spec.lhs.contains(c)).collect();

    let ext_a = |c: char| extent_of(&spec.lhs, a.shape(), c);
    let ext_b = |c: char| extent_of(&spec.rhs, b.shape(), c);
    let nb: usize = batch.iter().map(|&c| ext_a(c)).product();
    let m: usize = free_a.iter().map(|&c| ext_a(c)).product();
    let k: usize = summed.iter().map(|&c| ext_a(c)).product();
    let n: usize = free_b.iter().map(|&c| ext_b(c)).product();

    // Left operand as [batch, m, k] (row-major) or [batch, k, m] (transposed).
    let order_mk: Vec<char> = [&batch[..], &free_a[..], &summed[..]].concat();
    let order_km: Vec<char> = [&batch[..], &summed[..], &free_a[..]].concat();
    let (a_buf, rsa, csa) = if is_prefix_order(&spec.lhs, &order_mk) {
        (None, k as isize, 1)
    } else if is_prefix_order(&spec.lhs, &order_km) {
        (None, 1, m as isize)
    } else {
        (Some(arrange(a, &spec.lhs, &order_mk)?), k as isize, 1)
    };
    let a_data = a_buf.as_ref().map_or(a.data(), |t| t.data());

    let order_kn: Vec<char> = [&batch[..], &summed[..], &free_b[..]].concat();
    let order_nk: Vec<char> = [&batch[..], &free_b[..], &summed[..]].concat();
    let (b_buf, rsb, csb) = if is_prefix_order(&spec.rhs, &order_kn) {
        (None, n as isize, 1)
    } else if is_prefix_order(&spec.rhs, &order_nk) {
        (None, 1, k as isize)
    } else {
        (Some(arrange(b, &spec.rhs, &order_kn)?), n as isize, 1)
    };
    let b_data = b_buf.as_ref().map_or(b.data(), |t| t.data());

    let mut out = vec![T::zero(); nb * m * n];
    for bi in 0..nb {
        T::gemm(
            m,
            k,
            n,
            &a_data[bi * m * k..],
            rsa,
            csa,
            &b_data[bi * k * n..],
            rsb,
            csb,
            &mut out[bi * m * n..],
        );
    }

    let natural: Vec<char> = [&batch[..], &free_a[..], &free_b[..]].concat();
    let natural_shape: Vec<usize> = natural
        .iter()
        .map(|&c| if spec.lhs.contains(&c) { ext_a(c) } else { ext_b(c) })
        .collect();
    debug_assert_eq!(numel(&natural_shape), out.len());
    let result = Tensor::new(natural_shape, out)?;
    if natural == spec.out {
        Ok(result)
    } else {
        arrange(&result, &natural, &spec.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn([m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|t| a.at(&[i, t]) * b.at(&[t, j])).sum()
        })
    }

    #[test]
    fn matrix_product_matches_triple_loop() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64 * 0.5 - 1.0);
        let b = Tensor::<f64>::from_fn([3, 4], |i| (i as f64).sin());
        let spec = ContractSpec::parse("ij,jk->ik").unwrap();
        let c = contract(&a, &b, &spec).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c, naive_matmul(&a, &b));
    }

    #[test]
    fn identity_leaves_operand_unchanged() {
        let b = Tensor::<f64>::from_fn([3, 3], |i| i as f64 + 0.25);
        let spec = ContractSpec::parse("ij,jk->ik").unwrap();
        assert_eq!(contract(&Tensor::eye(3), &b, &spec).unwrap(), b);
    }

    #[test]
    fn batched_slices_match_per_slice_products() {
        let a = Tensor::<f64>::from_fn([5, 2, 3], |i| ((i * 7) % 11) as f64 - 5.0);
        let b = Tensor::<f64>::from_fn([5, 3, 1], |i| (i as f64).cos());
        let spec = ContractSpec::parse("bij,bjk->bik").unwrap();
        let c = contract(&a, &b, &spec).unwrap();
        assert_eq!(c.shape(), &[5, 2, 1]);
        for s in 0..5 {
            let sa = a.narrow(0, s, 1).unwrap().reshape([2, 3]).unwrap();
            let sb = b.narrow(0, s, 1).unwrap().reshape([3, 1]).unwrap();
            let sc = c.narrow(0, s, 1).unwrap().reshape([2, 1]).unwrap();
            assert_eq!(sc, naive_matmul(&sa, &sb));
        }
    }

    #[test]
    fn extent_mismatch_names_axis() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([4, 2]);
        let err = contract(&a, &b, &ContractSpec::parse("ij,jk->ik").unwrap()).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ExtentMismatch {
                label: 'j',
                lhs: 3,
                rhs: 4
            }
        );
        assert!(err.to_string().contains("'j'"));
    }

    #[test]
    fn rejects_malformed_specs() {
        assert!(ContractSpec::parse("ij,jk").is_err());
        assert!(ContractSpec::parse("ii,jk->ik").is_err());
        assert!(ContractSpec::parse("ij,jk->iz").is_err());
        assert!(ContractSpec::parse("ijx,jk->ik").is_err());
    }
}
