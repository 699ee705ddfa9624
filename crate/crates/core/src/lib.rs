pub mod graph;
pub mod io;
pub mod se2;
pub mod sparse;
