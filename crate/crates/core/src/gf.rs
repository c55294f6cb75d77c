//! Arithmetic in prime fields `F_p`.
//!
//! Every [`FieldElement`] carries its modulus. The checked methods
//! (`checked_add`, `checked_mul`, ...) report a [`FieldError::Mismatch`] when
//! the operands come from different fields; the `std::ops` impls panic in that
//! case and are meant for code that builds all of its elements from one
//! [`PrimeField`].

use std::fmt;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported modulus. Products are formed in 128-bit width, but the
/// wire format carries the modulus as a `u32`.
pub const MAX_PRIME: u64 = u32::MAX as u64;

/// Default modulus: the smallest prime above 255, so every byte maps to a
/// distinct field element.
pub const DEFAULT_PRIME: u64 = 257;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("field mismatch: operands live in F_{left} and F_{right}")]
    Mismatch { left: u64, right: u64 },
    #[error("division by zero in F_{0}")]
    DivisionByZero(u64),
    #[error("modulus {0} is not prime")]
    NotPrime(u64),
    #[error("modulus {0} exceeds the supported maximum {MAX_PRIME}")]
    TooLarge(u64),
    #[error("value {value} is not a canonical residue of F_{prime}")]
    OutOfRange { value: u64, prime: u64 },
}

/// Deterministic trial-division primality test, adequate for `p <= 2^32`.
pub fn is_prime(p: u64) -> bool {
    if p < 2 {
        return false;
    }
    if p < 4 {
        return true;
    }
    if p.is_multiple_of(2) {
        return false;
    }
    let mut d = 3u64;
    while d * d <= p {
        if p.is_multiple_of(d) {
            return false;
        }
        d += 2;
    }
    true
}

/// A validated prime modulus; the factory for field elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct PrimeField {
    p: u64,
}

impl PrimeField {
    pub fn new(p: u64) -> Result<Self, FieldError> {
        if p > MAX_PRIME {
            return Err(FieldError::TooLarge(p));
        }
        if !is_prime(p) {
            return Err(FieldError::NotPrime(p));
        }
        Ok(Self { p })
    }

    #[inline]
    pub fn prime(&self) -> u64 {
        self.p
    }

    /// Reduces an arbitrary integer into the field.
    #[inline]
    pub fn elem(&self, value: u64) -> FieldElement {
        FieldElement {
            value: value % self.p,
            prime: self.p,
        }
    }

    /// Accepts only canonical residues `0 <= value < p`.
    pub fn try_elem(&self, value: u64) -> Result<FieldElement, FieldError> {
        if value >= self.p {
            return Err(FieldError::OutOfRange {
                value,
                prime: self.p,
            });
        }
        Ok(FieldElement {
            value,
            prime: self.p,
        })
    }

    #[inline]
    pub fn zero(&self) -> FieldElement {
        self.elem(0)
    }

    #[inline]
    pub fn one(&self) -> FieldElement {
        self.elem(1)
    }
}

impl TryFrom<u64> for PrimeField {
    type Error = FieldError;

    fn try_from(p: u64) -> Result<Self, Self::Error> {
        PrimeField::new(p)
    }
}

impl From<PrimeField> for u64 {
    fn from(f: PrimeField) -> u64 {
        f.p
    }
}

impl fmt::Display for PrimeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F_{}", self.p)
    }
}

/// A canonical residue `0 <= value < prime`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldElement {
    value: u64,
    prime: u64,
}

impl FieldElement {
    #[inline]
    pub fn value(self) -> u64 {
        self.value
    }

    #[inline]
    pub fn prime(self) -> u64 {
        self.prime
    }

    #[inline]
    pub fn field(self) -> PrimeField {
        PrimeField { p: self.prime }
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.value == 0
    }

    #[inline]
    fn check(self, rhs: Self) -> Result<(), FieldError> {
        if self.prime == rhs.prime {
            Ok(())
        } else {
            Err(FieldError::Mismatch {
                left: self.prime,
                right: rhs.prime,
            })
        }
    }

    #[inline]
    fn with(self, value: u64) -> Self {
        Self {
            value,
            prime: self.prime,
        }
    }

    pub fn checked_add(self, rhs: Self) -> Result<Self, FieldError> {
        self.check(rhs)?;
        let s = self.value + rhs.value;
        Ok(self.with(if s >= self.prime { s - self.prime } else { s }))
    }

    pub fn checked_sub(self, rhs: Self) -> Result<Self, FieldError> {
        self.check(rhs)?;
        Ok(self.with(if self.value >= rhs.value {
            self.value - rhs.value
        } else {
            self.value + self.prime - rhs.value
        }))
    }

    pub fn checked_mul(self, rhs: Self) -> Result<Self, FieldError> {
        self.check(rhs)?;
        let prod = (self.value as u128 * rhs.value as u128) % self.prime as u128;
        Ok(self.with(prod as u64))
    }

    pub fn checked_div(self, rhs: Self) -> Result<Self, FieldError> {
        self.check(rhs)?;
        self.checked_mul(rhs.inv()?)
    }

    #[inline]
    pub fn neg(self) -> Self {
        self.with(if self.value == 0 {
            0
        } else {
            self.prime - self.value
        })
    }

    pub fn pow(self, mut exp: u64) -> Self {
        let p = self.prime as u128;
        let mut base = self.value as u128;
        let mut acc = 1u128 % p;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = acc * base % p;
            }
            base = base * base % p;
            exp >>= 1;
        }
        self.with(acc as u64)
    }

    /// Multiplicative inverse via the extended Euclidean algorithm.
    pub fn inv(self) -> Result<Self, FieldError> {
        if self.value == 0 {
            return Err(FieldError::DivisionByZero(self.prime));
        }
        let (mut old_r, mut r) = (self.value as i128, self.prime as i128);
        let (mut old_s, mut s) = (1i128, 0i128);
        while r != 0 {
            let q = old_r / r;
            (old_r, r) = (r, old_r - q * r);
            (old_s, s) = (s, old_s - q * s);
        }
        debug_assert_eq!(old_r, 1);
        Ok(self.with(old_s.rem_euclid(self.prime as i128) as u64))
    }
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

macro_rules! panicking_op {
    ($trait:ident, $method:ident, $checked:ident, $assign_trait:ident, $assign:ident) => {
        impl $trait for FieldElement {
            type Output = FieldElement;

            #[inline]
            fn $method(self, rhs: Self) -> Self {
                match self.$checked(rhs) {
                    Ok(v) => v,
                    Err(e) => panic!("{e}"),
                }
            }
        }

        impl $assign_trait for FieldElement {
            #[inline]
            fn $assign(&mut self, rhs: Self) {
                *self = $trait::$method(*self, rhs);
            }
        }
    };
}

panicking_op!(Add, add, checked_add, AddAssign, add_assign);
panicking_op!(Sub, sub, checked_sub, SubAssign, sub_assign);
panicking_op!(Mul, mul, checked_mul, MulAssign, mul_assign);

impl Neg for FieldElement {
    type Output = FieldElement;

    #[inline]
    fn neg(self) -> Self {
        FieldElement::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(p: u64) -> PrimeField {
        PrimeField::new(p).unwrap()
    }

    #[test]
    fn add_examples() {
        let f7 = f(7);
        assert_eq!(f7.elem(3).checked_add(f7.elem(5)).unwrap().value(), 1);
        assert_eq!(f7.elem(0).checked_add(f7.elem(4)).unwrap().value(), 4);
        let f257 = f(257);
        assert_eq!((f257.elem(200) + f257.elem(100)).value(), 43);
    }

    #[test]
    fn mul_examples() {
        let f7 = f(7);
        assert_eq!((f7.elem(3) * f7.elem(5)).value(), 1);
        assert_eq!((f7.elem(1) * f7.elem(6)).value(), 6);
        let f257 = f(257);
        assert_eq!((f257.elem(16) * f257.elem(16)).value(), 256);
    }

    #[test]
    fn inv_examples() {
        let f7 = f(7);
        assert_eq!(f7.elem(3).inv().unwrap().value(), 5);
        assert_eq!(f7.elem(1).inv().unwrap().value(), 1);
        assert_eq!(f(257).elem(2).inv().unwrap().value(), 129);
        assert_eq!(f7.zero().inv(), Err(FieldError::DivisionByZero(7)));
    }

    #[test]
    fn neg_sub_pow_examples() {
        let f7 = f(7);
        assert_eq!((-f7.elem(3)).value(), 4);
        assert_eq!(f7.elem(3).pow(6).value(), 1);
        assert_eq!((f7.elem(2) - f7.elem(5)).value(), 4);
        assert_eq!(f7.elem(5).pow(0).value(), 1);
    }

    #[test]
    fn mismatched_fields_are_rejected() {
        let a = f(7).elem(3);
        let b = f(11).elem(3);
        let err = FieldError::Mismatch { left: 7, right: 11 };
        assert_eq!(a.checked_add(b), Err(err.clone()));
        assert_eq!(a.checked_mul(b), Err(err.clone()));
        assert_eq!(a.checked_sub(b), Err(err));
    }

    #[test]
    #[should_panic(expected = "field mismatch")]
    fn operator_panics_on_mismatch() {
        let _ = f(7).elem(1) + f(5).elem(1);
    }

    #[test]
    fn modulus_validation() {
        assert_eq!(PrimeField::new(4), Err(FieldError::NotPrime(4)));
        assert_eq!(PrimeField::new(1), Err(FieldError::NotPrime(1)));
        assert!(PrimeField::new(2).is_ok());
        assert!(PrimeField::new(4_294_967_291).is_ok());
        assert!(matches!(
            PrimeField::new(1 << 33),
            Err(FieldError::TooLarge(_))
        ));
        assert!(f(7).try_elem(7).is_err());
        assert_eq!(f(7).elem(15).value(), 1);
    }

    #[test]
    fn primality_matches_sieve() {
        let limit = 2000usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..limit {
            if sieve[i] {
                for j in (i * i..limit).step_by(i) {
                    sieve[j] = false;
                }
            }
        }
        for (i, &prime) in sieve.iter().enumerate() {
            assert_eq!(is_prime(i as u64), prime, "{i}");
        }
    }

    fn prime_strategy() -> impl Strategy<Value = u64> {
        prop::sample::select(vec![2u64, 3, 7, 257, 65_537, 4_294_967_291])
    }

    proptest! {
        #[test]
        fn field_axioms(p in prime_strategy(), a: u64, b: u64, c: u64) {
            let fp = f(p);
            let (a, b, c) = (fp.elem(a), fp.elem(b), fp.elem(c));
            prop_assert_eq!((a + b) + c, a + (b + c));
            prop_assert_eq!((a * b) * c, a * (b * c));
            prop_assert_eq!(a + b, b + a);
            prop_assert_eq!(a * b, b * a);
            prop_assert_eq!(a * (b + c), a * b + a * c);
            prop_assert_eq!(a + (-a), fp.zero());
            prop_assert_eq!((a - b) + b, a);
            for x in [a + b, a * b, a - b, -a, a.pow(c.value())] {
                prop_assert!(x.value() < p);
            }
            if !a.is_zero() {
                prop_assert_eq!(a * a.inv().unwrap(), fp.one());
                prop_assert_eq!(a.pow(p - 1), fp.one());
            }
        }
    }
}
