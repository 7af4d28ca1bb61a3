//! Run-directory pipeline behind the `fmalloc` command.

pub mod pipeline;
