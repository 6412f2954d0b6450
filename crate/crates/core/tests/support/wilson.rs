//! Wilson bounds evaluated in exact rationals; the single square root is an
//! integer root at 30 decimal digits.

use num_bigint::BigInt;
use num_rational::BigRational;

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn sqrt(x: &BigRational) -> BigRational {
    let scale = BigInt::from(10).pow(30);
    let scaled = x.numer() * &scale * &scale / x.denom();
    BigRational::new(scaled.sqrt(), scale)
}

fn to_f64(x: &BigRational) -> f64 {
    let scale = BigInt::from(10).pow(15);
    let n: BigInt = x.numer() * &scale / x.denom();
    n.to_string().parse::<f64>().unwrap() / 1e15
}

/// Bounds as proportions clamped to [0, 1]; `z` is given as a fraction.
pub fn exact(s: u64, n: u64, z: (i64, i64)) -> (f64, f64) {
    let n_r = rat(n as i64, 1);
    let p = rat(s as i64, n as i64);
    let z = rat(z.0, z.1);
    let z2 = &z * &z;
    let one = rat(1, 1);
    let two = rat(2, 1);
    let four = rat(4, 1);
    let denom = &one + &z2 / &n_r;
    let center = (&p + &z2 / (&two * &n_r)) / &denom;
    let radicand = &p * (&one - &p) / &n_r + &z2 / (&four * &n_r * &n_r);
    let half = &z * sqrt(&radicand) / &denom;
    let zero = rat(0, 1);
    let lo = (&center - &half).max(zero);
    let hi = (&center + &half).min(one);
    (to_f64(&lo), to_f64(&hi))
}
