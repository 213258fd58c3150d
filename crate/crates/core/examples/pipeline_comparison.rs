//! The same conflict-free workload under execute-order-validate and under
//! the order-execute baseline.

use medusa::netsim::{run_order_execute_baseline, run_scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = ScenarioConfig::single_channel(8, 5, 200);
    config.peers[3].endorses = Some(vec![]);
    config.peers[4].endorses = Some(vec![]);
    config.channels[0].required = Some(2);

    let eov = run_scenario(&config)?;
    let oe = run_order_execute_baseline(&config)?;
    println!("{:<8} {:>10} {:>10}", "peer", "EOV execs", "OE execs");
    for (peer, n) in &eov.metrics.executions {
        println!("{peer:<8} {n:>10} {:>10}", oe.metrics.executions[peer]);
    }
    println!("\nEOV: {:.1} tps, p50 {} us", eov.metrics.tps, eov.metrics.latency_p50_us);
    println!("OE:  {:.1} tps, p50 {} us", oe.metrics.tps, oe.metrics.latency_p50_us);
    let same = eov.metrics.channels["audit"].content_digest == oe.metrics.channels["audit"].content_digest;
    println!("final states identical: {same}");
    Ok(())
}
