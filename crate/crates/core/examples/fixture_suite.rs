//! Builds a self-contained demo suite (toy weights, database, queries, match files and
//! recorded client fixtures) that the CLI can replay offline.
//!
//! cargo run -p geosearch --example fixture_suite -- <dir>

use geosearch::synth::suite::{build_fixture_suite, SuiteSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).ok_or("usage: fixture_suite <dir>")?;
    let suite = build_fixture_suite(&dir, &SuiteSpec::default())?;
    println!("{}", suite.config_path.display());
    Ok(())
}
