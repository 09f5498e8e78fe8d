//! Deterministic discrete-event simulator of SDN-controlled mobile devices
//! that hand sessions over between Bluetooth and Wi-Fi to save energy, and
//! relay traffic between the two technologies.

pub mod controller;
pub mod energy;
pub mod engine;
pub mod handover;
pub mod link;
pub mod mobility;
pub mod model;
pub mod report;
pub mod reproduce;
pub mod scenario;
pub mod sim;
pub mod switch;
pub mod traffic;

