use std::fmt::Write;
use std::path::Path;

use crate::compare::{read_bundle, ResultBundle};
use crate::HarnessError;

/// Relative variance (divided by on-policy Monte Carlo's) and episodes to
/// parity, one column per strategy.
pub fn render_tables(bundle: &ResultBundle) -> String {
    let mut out = String::new();
    let width = 14;
    let _ = writeln!(
        out,
        "Relative variance at n = {}",
        bundle.config.reference_n
    );
    let _ = write!(out, "{:<20}", "");
    for r in &bundle.relative_variance {
        let _ = write!(out, "{:>width$}", r.strategy.label());
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<20}", "mean ratio");
    for r in &bundle.relative_variance {
        let _ = write!(out, "{:>width$.3}", r.mean_ratio);
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<20}", "std. error");
    for r in &bundle.relative_variance {
        let _ = write!(out, "{:>width$.3}", r.se_ratio);
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<20}", "groups below 1");
    for r in &bundle.relative_variance {
        let _ = write!(
            out,
            "{:>width$}",
            format!("{}/{}", r.groups_below_one, r.groups)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Episodes needed to match on-policy Monte Carlo at n = {}",
        bundle.config.reference_n
    );
    let _ = write!(out, "{:<20}", "");
    for r in &bundle.parity {
        let _ = write!(out, "{:>width$}", r.strategy.label());
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<20}", "episodes");
    for r in &bundle.parity {
        let _ = write!(out, "{:>width$.0}", r.episodes);
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<20}", "fraction of ref.");
    for r in &bundle.parity {
        let _ = write!(out, "{:>width$.3}", r.ratio_to_reference);
    }
    let _ = writeln!(out);
    out
}

pub fn cmd_table(dir: &Path) -> Result<String, HarnessError> {
    Ok(render_tables(&read_bundle(dir)?))
}
