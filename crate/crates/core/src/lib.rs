pub mod numeric;
pub mod corpus;
pub mod tokenize;
pub mod model;
pub mod fsutil;
pub mod train;
pub mod metrics;
pub mod fisher;
pub mod cli;
