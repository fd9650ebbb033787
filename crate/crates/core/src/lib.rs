//! Multi-area PV forecasting with a from-scratch stacked LSTM and two
//! baselines, evaluated through day-ahead and real-time economic dispatch.

pub mod baselines;
pub mod checkpoint;
pub mod dispatch;
pub mod lp;
pub mod lstm;
pub mod pipeline;
pub mod synth;
pub mod timeseries;
