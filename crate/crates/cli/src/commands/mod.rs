pub mod attention;
pub mod exp2;
pub mod pipeline;
pub mod roofline;
pub mod schedule;
