use admrl::admrl_loop::{run, RunConfig, Sampler};
use admrl::envs::TaskBox;
use admrl::metrics_io::{grid_eval, GridSpec, OracleCache};

fn main() {
    let mut cache = OracleCache::new();
    let adapt = [2000u64, 4000, 6000];
    for (sampler, seed) in [
        (Sampler::Adversarial, 2u64),
        (Sampler::Uniform, 0),
    ] {
        let cfg = RunConfig {
            sampler,
            seed,
            first_task_slbo: 3,
            desk_scale: 6,
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let state = run(&cfg, dir.path()).unwrap();
        for spec in [
            GridSpec::in_distribution(state.config.task_box(), 6),
            GridSpec::ood_boundary(TaskBox::symmetric(2, 5.0), 6),
        ] {
            let grid = grid_eval(&state, &spec, &adapt, 20, 300, 12345, &mut cache).unwrap();
            println!("== {sampler:?} seed={seed} boundary_only={}", spec.boundary_only);
            for c in &grid.cells {
                println!(
                    "psi=({:+.2},{:+.2}) a0={:8.3} a2000={:8.3} a4000={:8.3} a6000={:8.3} a*={:8.3} g0={:7.3} g6000={:7.3}{}",
                    c.psi[0],
                    c.psi[1],
                    c.a0.unwrap_or(f64::NAN),
                    c.a_n.first().copied().unwrap_or(f64::NAN),
                    c.a_n.get(1).copied().unwrap_or(f64::NAN),
                    c.a_n.get(2).copied().unwrap_or(f64::NAN),
                    c.a_star.unwrap_or(f64::NAN),
                    c.g0.unwrap_or(f64::NAN),
                    c.g_n.get(2).copied().unwrap_or(f64::NAN),
                    if c.a_star_low_confidence { " LOWCONF" } else { "" },
                );
                use std::io::Write;
                std::io::stdout().flush().ok();
            }
            println!("gmax0={:?} gmax6000={:.3}", grid.gmax_0, grid.gmax_n[2]);
        }
    }
}
