#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod explain;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod spatial;
