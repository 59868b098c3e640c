pub mod grid;
pub mod lookup;
pub mod placement;
pub mod rng;
pub mod energy;
pub mod io;
pub mod metrics;
pub mod sim;
pub mod bench;
