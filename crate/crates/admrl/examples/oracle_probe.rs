use admrl::admrl_loop::RunConfig;
use admrl::metrics_io::{optimal_return_oracle, OracleCache};
use ndarray::array;

fn main() {
    let cfg = RunConfig { desk_scale: 6, ..RunConfig::default() };
    let mut cache = OracleCache::new();
    for psi in [
        array![0.0, 0.0],
        array![-0.6, 0.6],
        array![3.0, -1.8],
        array![1.8, -1.8],
        array![5.0, -1.0],
        array![5.0, 5.0],
    ] {
        let t = std::time::Instant::now();
        let e = optimal_return_oracle(&cfg, &psi, 300, 20, 12345, &mut cache).unwrap();
        println!(
            "psi=({:+.2},{:+.2}) a*={:9.3} lowconf={} ({:.1}s)",
            psi[0],
            psi[1],
            e.a_star,
            e.low_confidence,
            t.elapsed().as_secs_f64()
        );
        use std::io::Write;
        std::io::stdout().flush().ok();
    }
}
