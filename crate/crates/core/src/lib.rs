pub mod design;
pub mod error;
pub mod estimate;
pub mod kron;
pub mod layout;
pub mod predict;
pub mod simlab;
pub mod uncertainty;

pub use error::{Error, Result};
