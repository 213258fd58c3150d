//! Run a scenario file through the discrete-event simulator.
//!
//! ```text
//! cargo run --example simulate_scenario -- crates/core/examples/scenario.toml
//! ```

use medusa::netsim::{run_scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/scenario.toml").into());
    let config = ScenarioConfig::load(path.as_ref())?;
    let run = run_scenario(&config)?;
    print!("{}", run.metrics.to_table());
    println!("replay matches: {}", run.replay_matches()?);
    Ok(())
}
