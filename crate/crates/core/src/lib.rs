//! Augmented fast marching: reinitializes a level set to signed distance
//! while carrying its gradient and Hessian along with the front.

// Axis-indexed loops over several parallel arrays read better than zips here.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod grid;
pub mod interp;
pub mod io;
pub mod march;
pub mod project;
pub mod seed;
pub mod systems;

pub use error::{AfmmError, Result};
