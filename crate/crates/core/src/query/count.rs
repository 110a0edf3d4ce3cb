use num_bigint::BigUint;
use num_traits::{One, Zero};

/// Number of multisets of size `m` over `num_queries` distinct queries,
/// `C(num_queries + m - 1, m)`.
pub fn count_multisets(num_queries: &BigUint, m: u64) -> BigUint {
    if num_queries.is_zero() {
        return if m == 0 { BigUint::one() } else { BigUint::zero() };
    }
    // acc_i = C(n + i - 1, i) stays integral after each exact division
    let mut acc = BigUint::one();
    for i in 1..=m {
        acc = acc * (num_queries + BigUint::from(i - 1)) / BigUint::from(i);
    }
    acc
}

/// Base-10 logarithm of a nonzero big integer.
pub fn log10_biguint(x: &BigUint) -> f64 {
    let digits = x.to_str_radix(10);
    let lead = &digits[..digits.len().min(17)];
    let mantissa: f64 = lead.parse().expect("decimal digits");
    mantissa.log10() + (digits.len() - lead.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binomial_oracle(n: u64, k: u64) -> u128 {
        let mut c = 1u128;
        for i in 0..k {
            c = c * u128::from(n - i) / u128::from(i + 1);
        }
        c
    }

    #[test]
    fn small_counts() {
        assert_eq!(count_multisets(&BigUint::from(1u32), 5), BigUint::one());
        assert_eq!(count_multisets(&BigUint::from(7u32), 0), BigUint::one());
        for n in 1..12u64 {
            for m in 0..10u64 {
                let expected = binomial_oracle(n + m - 1, m);
                assert_eq!(count_multisets(&BigUint::from(n), m), BigUint::from(expected));
            }
        }
    }

    #[test]
    fn log10_matches_float_for_small_values() {
        let x = BigUint::from(123_456_789u64);
        assert!((log10_biguint(&x) - 123_456_789f64.log10()).abs() < 1e-12);
    }
}
