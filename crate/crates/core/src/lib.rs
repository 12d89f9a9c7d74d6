pub mod dynamics;
pub mod embed;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod numeric;
pub mod prep;
pub mod rng;
pub mod table;
