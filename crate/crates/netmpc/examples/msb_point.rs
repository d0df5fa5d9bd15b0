//! Quick closed-loop sanity run: the four-dimensional reference system at
//! one operating point, printing the aggregate metrics.
//!
//! `cargo run --release -p netmpc --example msb_point -- [paths] [u_max]`

use netmpc::channels::ChannelSpec;
use netmpc::model::{reference, BlockForm};
use netmpc::policy::{Sigmoid, ThetaVariant};
use netmpc::qpsolver::SolveOptions;
use netmpc::simulation::{run_monte_carlo, PolicyKind, SimConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let paths: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let u_max: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5.0);

    let config = SimConfig {
        model: reference::four_dim(u_max),
        block_form: Some(BlockForm { d_orth: 3 }),
        sensor: ChannelSpec::Bernoulli { p: 0.8 },
        control: ChannelSpec::Bernoulli { p: 0.8 },
        sat: Box::new(Sigmoid),
        policy: PolicyKind::Qp(ThetaVariant::Full),
        stability_enabled: true,
        stability_r: None,
        stability_zeta: None,
        steps: 120,
        paths,
        seed: 20260810,
        moment_samples: 100_000,
        moment_seed: 1,
        solver: SolveOptions::default(),
    };
    let t0 = std::time::Instant::now();
    let setup = config.prepare().expect("prepare");
    let t_moments = t0.elapsed().as_secs_f64();
    for w in &setup.warnings {
        eprintln!("warning: {w}");
    }
    let t1 = std::time::Instant::now();
    let (stats, paths_data) = run_monte_carlo(&setup).expect("run");
    let t_run = t1.elapsed().as_secs_f64();

    // Alternate readings of the MSB estimator, for diagnosis.
    let mean_of_path_max = paths_data
        .iter()
        .map(|p| p.sq_state.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / paths_data.len() as f64;
    let argmax = stats
        .mean_sq_trace
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(t, _)| t)
        .unwrap();
    let tail_mean = stats.mean_sq_trace[60..].iter().sum::<f64>() / (stats.mean_sq_trace.len() - 60) as f64;
    println!(
        "max-of-mean={:.2} (argmax t={argmax}), mean-of-path-max={:.2}, tail mean (t>=60)={:.2}",
        stats.sup_mean_sq, mean_of_path_max, tail_mean
    );
    let mut iters: Vec<usize> = paths_data.iter().flat_map(|p| p.solve_iters.iter().copied()).collect();
    iters.sort_unstable();
    if !iters.is_empty() {
        let total: usize = iters.iter().sum();
        println!(
            "iters: mean={:.0} p50={} p90={} p99={} max={} capped={}",
            total as f64 / iters.len() as f64,
            iters[iters.len() / 2],
            iters[iters.len() * 9 / 10],
            iters[iters.len() * 99 / 100],
            iters[iters.len() - 1],
            iters.iter().filter(|&&i| i >= 4000).count()
        );
    }
    println!(
        "paths={paths} u_max={u_max}: msb={:.3} mae={:.4} fallback_rate={:.4} solves={} mean_solve={:.3}ms",
        stats.empirical_msb,
        stats.mae_per_stage,
        stats.fallback_rate,
        stats.total_solves,
        stats.mean_solve_time * 1e3
    );
    println!("moments {t_moments:.2}s, simulation {t_run:.2}s");
}
