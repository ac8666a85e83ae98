pub mod charts;
pub mod conormal;
pub mod error;
pub mod flow;
pub mod kuznecov;
pub mod linalg;
pub mod ode;
pub mod perturb_conformal;
pub mod perturb_diffeo;
pub mod scenarios;
