pub mod reference;
pub mod stub;
