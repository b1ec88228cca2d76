pub mod attention;
pub mod conv;
pub mod norm;
pub(crate) mod reduce;
pub mod resample;
