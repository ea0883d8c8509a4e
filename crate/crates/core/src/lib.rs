pub mod engine;
pub mod gradcheck;
pub mod ipm;
pub mod latent;
pub mod localizer;
pub mod schema;
pub mod semantic;
pub mod solver;
pub mod taxonomy;
