//! Experiment drivers behind the `kdd` command-line tool.

pub mod appendix_a;
pub mod gradcheck;
pub mod toy_gan;
