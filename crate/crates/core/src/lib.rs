pub mod ad;
pub mod check;
pub mod env;
pub mod linalg;
pub mod mpc;
pub mod nlp;
pub mod qfun;
pub mod sens;
pub mod trainer;
