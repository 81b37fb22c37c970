pub mod advisory;
pub mod criteria;
pub mod curve_models;
pub mod error;
pub mod inference;
pub mod io;
pub mod race;
pub mod seeding;

pub use error::{Error, Result};
