//! Run every dispatch policy on a scenario file and print one summary line each.
//!
//! cargo run --release -p coserve --example policies -- scenarios/bursty_desk.toml 1

use coserve::config::Scenario;
use coserve::dispatcher::Policy;
use coserve::engine::run_policy;

fn main() -> coserve::Result<()> {
    let mut args = std::env::args().skip(1);
    let sc = match args.next() {
        Some(p) => Scenario::load(p)?,
        None => Scenario::default(),
    };
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    for p in Policy::ALL {
        let s = run_policy(&sc, p, seed)?.summary();
        println!(
            "{:<12} goodput {:>9.1} q_goodput {:>9.1} slo {:.3} util {:.3} rounds {}",
            p.name(),
            s.goodput,
            s.q_goodput,
            s.slo_attainment,
            s.mean_utilization,
            s.fl_rounds
        );
    }
    Ok(())
}
