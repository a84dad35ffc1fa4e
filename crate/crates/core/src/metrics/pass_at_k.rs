use num::{BigInt, BigRational, One, Zero};

use super::MetricsError;
use crate::scalar::Scalar;

fn check(n: usize, c: usize, k: usize) -> Result<(), MetricsError> {
    if c > n || k == 0 || k > n {
        return Err(MetricsError::PassAtK { n, c, k });
    }
    Ok(())
}

/// `1 - C(n-c, k) / C(n, k)` in exact rational arithmetic, via the product
/// `prod_{i<k} (n-c-i)/(n-i)`.
pub fn pass_at_k_exact(n: usize, c: usize, k: usize) -> Result<BigRational, MetricsError> {
    check(n, c, k)?;
    if n - c < k {
        return Ok(BigRational::one());
    }
    let mut miss = BigRational::one();
    for i in 0..k {
        miss *= BigRational::new(BigInt::from(n - c - i), BigInt::from(n - i));
        if miss.is_zero() {
            break;
        }
    }
    Ok(BigRational::one() - miss)
}

/// Floating-point pass@k with the same product form.
pub fn pass_at_k<T: Scalar>(n: usize, c: usize, k: usize) -> Result<T, MetricsError> {
    check(n, c, k)?;
    if n - c < k {
        return Ok(T::one());
    }
    let miss = (0..k).fold(T::one(), |acc, i| acc * T::of_usize(n - c - i) / T::of_usize(n - i));
    Ok(T::one() - miss)
}
