//! Price-formation laboratory: order-book reconstruction from LOBSTER-style
//! event streams, zero-intelligence order-flow simulation with an exact
//! first-passage oracle, event-time dataset construction, from-scratch
//! linear / feedforward / LSTM classifiers for the direction of the next
//! mid-price move, synchronous and asynchronous training, and the
//! experiment harness that compares them across a universe of stocks.

pub mod book;
pub mod eval;
pub mod feed;
pub mod features;
pub mod models;
pub mod sim;
pub mod train;
