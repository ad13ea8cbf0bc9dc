use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Exact coefficient field. `BigRational` keeps the fraction reduced with a
/// positive denominator after every operation.
pub type Rational = BigRational;

/// Default denominator bound used when converting floating Jacobians.
pub const DEFAULT_MAX_DENOMINATOR: u64 = 1_000_000_000_000;

pub fn rat(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

pub fn rat_int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Best rational approximation of `x` whose denominator does not exceed
/// `max_denominator`, via continued-fraction convergents and the final
/// semiconvergent.
pub fn rational_from_float(x: f64, max_denominator: u64) -> Result<Rational> {
    if !x.is_finite() {
        return Err(Error::NonFinite(x));
    }
    if max_denominator == 0 {
        return Err(Error::InvalidArgument("max_denominator must be >= 1".into()));
    }
    let exact = Rational::from_float(x).ok_or(Error::NonFinite(x))?;
    Ok(limit_denominator(&exact, &BigInt::from(max_denominator)))
}

pub fn limit_denominator(value: &Rational, max_den: &BigInt) -> Rational {
    if value.denom() <= max_den {
        return value.clone();
    }
    let negative = value.is_negative();
    let target = value.abs();

    let (mut p0, mut q0, mut p1, mut q1) = (
        BigInt::zero(),
        BigInt::one(),
        BigInt::one(),
        BigInt::zero(),
    );
    let mut n = target.numer().clone();
    let mut d = target.denom().clone();
    loop {
        let a = &n / &d;
        let q2 = &q0 + &a * &q1;
        if &q2 > max_den {
            break;
        }
        let p2 = &p0 + &a * &p1;
        p0 = std::mem::replace(&mut p1, p2);
        q0 = std::mem::replace(&mut q1, q2);
        let r = &n - &a * &d;
        n = std::mem::replace(&mut d, r);
        if d.is_zero() {
            break;
        }
    }
    let k = (max_den - &q0) / &q1;
    let semi = Rational::new(&p0 + &k * &p1, &q0 + &k * &q1);
    let conv = Rational::new(p1, q1);
    let best = if (&conv - &target).abs() <= (&semi - &target).abs() {
        conv
    } else {
        semi
    };
    if negative {
        -best
    } else {
        best
    }
}
