pub mod checkpoint;
pub mod container;
pub mod control;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod hull;
pub mod nn;
pub mod observation;
pub mod scene;
pub mod seeding;
pub mod shapes;
pub mod sim;
pub mod visibility;

pub use error::{Error, Result};
