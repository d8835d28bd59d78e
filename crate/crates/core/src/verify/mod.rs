//! Property suites and the numerical oracles behind them.

pub mod oracle;
pub mod selfcheck;
