//! Scalar abstraction: the whole engine runs over f32 or f64.

use num_traits::{Float, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Scalar:
    Float
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        Self::from(x).expect("f64 conversion")
    }
    fn from_usize_(x: usize) -> Self {
        Self::from(x).expect("usize conversion")
    }
    fn to_f64_(self) -> f64 {
        self.to_f64().expect("to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
