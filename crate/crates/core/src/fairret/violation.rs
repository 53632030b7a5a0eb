//! Fairrets that penalize the violation vector directly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Inf,
}

/// `||v||` for the chosen order. The infinity norm routes its gradient to the
/// first maximal entry.
pub fn norm_fairret(tape: &mut Tape, v: Var, order: NormOrder) -> Result<Var> {
    let out = match order {
        // v is non-negative, so the sum is the 1-norm.
        NormOrder::L1 => tape.sum(v)?,
        NormOrder::L2 => tape.norm2(v)?,
        NormOrder::Inf => tape.max(v)?,
    };
    Ok(out)
}

/// `log sum_k exp(v_k) - log d_s`, which is zero exactly at `v = 0`.
pub fn smoothmax_fairret(tape: &mut Tape, v: Var) -> Result<Var> {
    let d_s = tape.value(v).numel() as f64;
    let lse = tape.logsumexp(v)?;
    Ok(tape.add_scalar(lse, -d_s.ln())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn eval(v: &[f64], f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(v.to_vec()));
        let r = f(&mut tape, x).unwrap();
        tape.value(r).data()[0]
    }

    #[test]
    fn norm_examples() {
        assert!((eval(&[0.6, 0.6], |t, v| norm_fairret(t, v, NormOrder::L1)) - 1.2).abs() < 1e-15);
        assert!((eval(&[0.3, 0.4], |t, v| norm_fairret(t, v, NormOrder::L2)) - 0.5).abs() < 1e-15);
        assert_eq!(
            eval(&[0.3, 0.4], |t, v| norm_fairret(t, v, NormOrder::Inf)),
            0.4
        );
        for order in [NormOrder::L1, NormOrder::L2, NormOrder::Inf] {
            assert_eq!(eval(&[0.0, 0.0], |t, v| norm_fairret(t, v, order)), 0.0);
        }
    }

    #[test]
    fn smoothmax_examples() {
        assert_eq!(eval(&[0.0, 0.0], smoothmax_fairret), 0.0);
        assert!((eval(&[0.6, 0.6], smoothmax_fairret) - 0.6).abs() < 1e-15);
        // log((e^0.4 + 1) / 2)
        assert!((eval(&[0.4, 0.0], smoothmax_fairret) - 0.219_868_071_840_007_34).abs() < 1e-12);
    }

    #[test]
    fn order_serializes_as_plain_token() {
        assert_eq!(serde_json::to_string(&NormOrder::Inf).unwrap(), "\"inf\"");
        assert_eq!(
            serde_json::from_str::<NormOrder>("\"2\"").unwrap(),
            NormOrder::L2
        );
    }

    proptest! {
        #[test]
        fn strict_and_bounded(v in prop::collection::vec(0.0f64..2.0, 1..8), zero_mask in prop::collection::vec(any::<bool>(), 8)) {
            let v: Vec<f64> = v.iter().zip(&zero_mask).map(|(x, z)| if *z { 0.0 } else { *x }).collect();
            let is_zero = v.iter().all(|&x| x == 0.0);
            let sm = eval(&v, smoothmax_fairret);
            let max = v.iter().copied().fold(0.0, f64::max);
            let d_s = v.len() as f64;
            prop_assert!(sm >= 0.0);
            prop_assert!(sm <= max + 1e-12);
            prop_assert!(sm >= max - d_s.ln() - 1e-12);
            prop_assert_eq!(sm == 0.0, is_zero);
            for order in [NormOrder::L1, NormOrder::L2, NormOrder::Inf] {
                let r = eval(&v, |t, x| norm_fairret(t, x, order));
                prop_assert_eq!(r == 0.0, is_zero);
            }
        }
    }
}
