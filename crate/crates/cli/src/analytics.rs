//! Correlation-likelihood tables.

use std::io::Write;

use anyhow::Result;
use streamssl::analytics::{
    correlation_likelihood_closed, correlation_likelihood_exact,
    correlation_likelihood_monte_carlo, fifo_reduction_check,
};

use crate::config::AnalyticsSection;

/// One row per `(b, p_c)`: double sum, closed form, Monte Carlo estimate
/// with its standard error, and the FIFO window ratio for `B = factor * b`.
pub fn write_analytics<W: Write>(a: &AnalyticsSection, seed: u64, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "b",
        "p_c",
        "exact",
        "closed",
        "monte_carlo",
        "monte_carlo_sigma",
        "fifo_window",
        "fifo_exact_ratio",
        "fifo_approx_ratio",
    ])?;
    for (i, &b) in a.batch_sizes.iter().enumerate() {
        for (j, &p) in a.p_c.iter().enumerate() {
            let exact = correlation_likelihood_exact(b, p)?;
            let closed = correlation_likelihood_closed(b, p)?;
            let mc_seed = seed ^ ((i as u64) << 32 | j as u64);
            let (mc, sigma) =
                correlation_likelihood_monte_carlo(b, p, a.monte_carlo_trials, mc_seed)?;
            let big_b = b * a.fifo_factor;
            let (ratio, approx) = match fifo_reduction_check(b, big_b, p) {
                Ok(r) => (r.exact_ratio.to_string(), r.approx_ratio.to_string()),
                Err(_) => (String::new(), String::new()),
            };
            out.write_record([
                b.to_string(),
                p.to_string(),
                exact.to_string(),
                closed.to_string(),
                mc.to_string(),
                sigma.to_string(),
                big_b.to_string(),
                ratio,
                approx,
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
