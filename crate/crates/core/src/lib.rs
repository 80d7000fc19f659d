pub mod cli;
pub mod coupled_riccati;
pub mod matops;
pub mod plant;
pub mod structure;
pub mod synthesis;
pub mod verify;
