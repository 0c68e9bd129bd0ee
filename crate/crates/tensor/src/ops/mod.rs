pub(crate) mod arith;
pub(crate) mod conv;
pub(crate) mod loss;
pub(crate) mod nn;
pub(crate) mod shape;
