use admrl::admrl_loop::{run, RunConfig, RunState, Sampler};
use admrl::envs::TaskBox;
use admrl::metrics_io::{grid_eval, ood_model_error, GridSpec, OracleCache};

fn cfg(sampler: Sampler, seed: u64) -> RunConfig {
    RunConfig { sampler, seed, first_task_slbo: 9, desk_scale: 6, ..RunConfig::default() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() {
    let t0 = std::time::Instant::now();
    let mut cache = OracleCache::new();
    let adapt = [2000u64, 4000, 6000];
    let eval_seed = 12345u64;
    let mut summary: Vec<(String, f64, f64, f64, f64, f64, f64)> = Vec::new();
    for sampler in [Sampler::Adversarial, Sampler::Uniform, Sampler::Gaussian] {
        for seed in [0u64, 1, 2] {
            let t = std::time::Instant::now();
            let dir = tempfile::tempdir().unwrap();
            let state: RunState = run(&cfg(sampler, seed), dir.path()).unwrap();
            let train_s = t.elapsed().as_secs_f64();
            let frac = state
                .records
                .iter()
                .filter(|r| r.psi.iter().fold(0.0f64, |m, v| m.max(v.abs())) >= 2.5)
                .count() as f64
                / state.records.len() as f64;
            let t = std::time::Instant::now();
            let spec = GridSpec::in_distribution(state.config.task_box(), 6);
            let grid = grid_eval(&state, &spec, &adapt, 100, 300, eval_seed, &mut cache).unwrap();
            let ood_spec = GridSpec::ood_boundary(TaskBox::symmetric(2, 5.0), 6);
            let ood = grid_eval(&state, &ood_spec, &adapt, 100, 300, eval_seed, &mut cache).unwrap();
            let me = ood_model_error(&state, &ood_spec.cells().unwrap(), 5, eval_seed).unwrap();
            let eval_s = t.elapsed().as_secs_f64();
            let a0 = median(grid.cells.iter().filter_map(|c| c.a0).collect());
            let a6000 = median(grid.cells.iter().filter_map(|c| c.a_n.get(2).copied()).collect());
            println!(
                "{sampler:?} seed={seed}: gmax6000={:.4} ood={:.4} moderr={:.5} frac={frac:.2} a0={a0:.3} a6000={a6000:.3} lowconf={} (train {train_s:.0}s eval {eval_s:.0}s)",
                grid.gmax_n[2],
                ood.gmax_n[2],
                me,
                grid.cells.iter().filter(|c| c.a_star_low_confidence).count(),
            );
            use std::io::Write;
            std::io::stdout().flush().ok();
            summary.push((
                format!("{sampler:?}"),
                grid.gmax_n[2],
                ood.gmax_n[2],
                me,
                frac,
                a0,
                a6000,
            ));
        }
    }
    for s in ["Adversarial", "Uniform", "Gaussian"] {
        let rows: Vec<_> = summary.iter().filter(|r| r.0 == s).collect();
        println!(
            "{s}: med gmax6000={:.4} med ood={:.4} med moderr={:.5} med frac={:.2} med a0={:.3} med a6000={:.3}",
            median(rows.iter().map(|r| r.1).collect()),
            median(rows.iter().map(|r| r.2).collect()),
            median(rows.iter().map(|r| r.3).collect()),
            median(rows.iter().map(|r| r.4).collect()),
            median(rows.iter().map(|r| r.5).collect()),
            median(rows.iter().map(|r| r.6).collect()),
        );
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
