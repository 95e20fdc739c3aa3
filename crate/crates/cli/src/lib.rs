//! The `ems` command-line tool and the synthetic corpus generator.

pub mod app;
pub mod toy;

pub use app::run;
