pub mod checkpoint;
pub mod cli;
pub mod cube;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tape;
pub mod train;
