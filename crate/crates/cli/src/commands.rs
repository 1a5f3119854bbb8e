//! Subcommand implementations. Seeds run in parallel; each seed writes its own files.

use std::path::Path;
use std::time::Instant;

use lopa_core::allocator::{Allocator, AllocatorKind, PowerAllocator};
use lopa_core::baselines::sum_rate;
use lopa_core::channel::{rates, sample_channels, ChannelState, NetworkConfig};
use lopa_core::fedsim::{
    admission_threshold, measure_loss_curve, run_online, OnlineSettings, SyntheticTask, TaskConfig,
};
use lopa_core::fom::{solve_fom, FomRecord};
use lopa_core::lossmodel::{convergence_bound, fit_power_law, min_samples, LossCurve};
use lopa_core::mm::AllocationResult;
use lopa_core::AllocationProblem;
use rayon::prelude::*;

use crate::artifact::OutDir;
use crate::failure::Failure;
use crate::scenario::Scenario;

fn per_seed<T: Send>(
    sc: &Scenario,
    run: impl Fn(u64) -> Result<T, Failure> + Sync,
) -> Result<Vec<T>, Failure> {
    sc.seeds.par_iter().map(|&s| run(s)).collect::<Vec<_>>().into_iter().collect()
}

fn instance(sc: &Scenario, seed: u64) -> Result<(NetworkConfig, ChannelState, AllocationProblem), Failure> {
    let cfg = sc.network.to_config(seed)?;
    let channels = sample_channels(&cfg, seed)?;
    let prob = AllocationProblem::from_network(&cfg, channels.gains.clone())?;
    Ok((cfg, channels, prob))
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

pub fn allocate(sc: &Scenario, out: &OutDir) -> Result<(), Failure> {
    let kind = sc.allocator;
    let summaries = per_seed(sc, |seed| {
        let (cfg, channels, prob) = instance(sc, seed)?;
        let (result, records): (AllocationResult, Option<Vec<FomRecord>>) = match kind {
            AllocatorKind::Fom => {
                let o = solve_fom(&prob, &sc.solver.fom)?;
                (o.result, Some(o.records))
            }
            _ => (Allocator::new(kind, sc.solver.clone()).allocate(&prob)?, None),
        };
        out.write(
            &format!("channels_seed{seed}.csv"),
            Some(seed),
            &csv_bytes(|b| channels.write_fading_csv(b))?,
        )?;
        let trace = (0..result.objective_trace.len()).map(|t| {
            [
                t.to_string(),
                result.objective_trace[t].to_string(),
                result.step_trace[t].to_string(),
                result.sample_trace[t].to_string(),
            ]
        });
        out.write_table(
            &format!("allocate_{kind}_seed{seed}.csv"),
            Some(seed),
            &["t", "phi", "step_norm", "samples"],
            trace,
        )?;
        let r = rates(&channels.gains, &result.p_opt, cfg.noise_mw)?;
        let powers = result.p_opt.iter().enumerate().map(|(k, p)| {
            [
                k.to_string(),
                cfg.partition.node_of(k).to_string(),
                p.to_string(),
                r[k].to_string(),
            ]
        });
        out.write_table(
            &format!("powers_{kind}_seed{seed}.csv"),
            Some(seed),
            &["device", "node", "power_mw", "rate_bps_hz"],
            powers,
        )?;
        if let Some(records) = records {
            let rows = records.iter().map(|r| {
                [
                    r.iteration.to_string(),
                    r.mse.to_string(),
                    r.objective.to_string(),
                    r.beta.to_string(),
                    r.theta.to_string(),
                    r.total_power.to_string(),
                ]
            });
            out.write_table(
                &format!("fom_seed{seed}.csv"),
                Some(seed),
                &["t", "mse", "phi", "beta", "theta", "total_power"],
                rows,
            )?;
        }
        Ok(format!(
            "seed {seed}: {kind} phi = {} status = {} iterations = {}",
            result.objective(),
            result.status.as_str(),
            result.iterations
        ))
    })?;
    summaries.iter().for_each(|s| println!("{s}"));
    Ok(())
}

pub fn simulate(sc: &Scenario, out: &OutDir, loss_curve: bool) -> Result<(), Failure> {
    let kind = sc.allocator;
    let allocator = Allocator::new(kind, sc.solver.clone());
    let rows = per_seed(sc, |seed| {
        let cfg = sc.network.to_config(seed)?;
        let task = SyntheticTask::new(TaskConfig {
            seed,
            ..sc.task.clone()
        })?;
        let settings = OnlineSettings {
            seed,
            ..sc.online.clone()
        };
        let trace = run_online(&cfg, &allocator as &dyn PowerAllocator, &task, &settings)?;
        out.write(
            &format!("trace_{kind}_seed{seed}.csv"),
            Some(seed),
            &csv_bytes(|b| trace.write_csv(b))?,
        )?;
        let total: u64 = trace
            .records
            .last()
            .map(|r| r.samples.iter().sum())
            .unwrap_or_else(|| cfg.initial_samples.iter().sum());
        Ok([
            seed.to_string(),
            trace.records.len().to_string(),
            trace.final_loss().map(|l| l.to_string()).unwrap_or_default(),
            total.to_string(),
            join(&trace.warm_up),
        ])
    })?;
    out.write_table(
        &format!("summary_{kind}.csv"),
        None,
        &["seed", "rounds", "final_global_loss", "total_samples", "warm_up_nodes"],
        rows,
    )?;
    if loss_curve {
        let seed = sc.seeds[0];
        let task = SyntheticTask::new(TaskConfig {
            seed,
            ..sc.task.clone()
        })?;
        let points = measure_loss_curve(&task, &sc.curve.sizes, &sc.curve.training)?;
        let rows = points.iter().map(|p| {
            [
                p.samples.to_string(),
                p.loss.to_string(),
                p.train_loss.to_string(),
                p.epochs.to_string(),
                u8::from(p.converged).to_string(),
            ]
        });
        out.write_table(
            "loss_curve.csv",
            Some(seed),
            &["n", "loss", "train_loss", "epochs", "converged"],
            rows,
        )?;
    }
    Ok(())
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Reads `(n, loss)` pairs from the first two columns. `#` lines are skipped
/// and a non-numeric first row is taken as a header.
pub fn read_loss_points(path: &Path) -> Result<Vec<(f64, f64)>, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut points = Vec::new();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parsed = match (record.get(0), record.get(1)) {
            (Some(n), Some(loss)) => n.parse::<f64>().ok().zip(loss.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(point) => points.push(point),
            None if first => {}
            None => {
                return Err(Failure::Config(format!(
                    "{} line {line}: expected two numeric columns `n,loss`",
                    path.display()
                )))
            }
        }
        first = false;
    }
    Ok(points)
}

pub fn fit(path: &Path, out: &OutDir) -> Result<LossCurve, Failure> {
    let points = read_loss_points(path)?;
    let curve = fit_power_law(&points)?;
    let row = [
        curve.a.to_string(),
        curve.b.to_string(),
        curve.residual.to_string(),
        u8::from(curve.refined).to_string(),
    ];
    println!("a,b,residual,refined\n{}", row.join(","));
    out.write_table("fit.csv", None, &["a", "b", "residual", "refined"], [row])?;
    Ok(curve)
}

pub fn compare(sc: &Scenario, out: &OutDir, timestamp: bool) -> Result<(), Failure> {
    let tables = per_seed(sc, |seed| {
        let (_, _, prob) = instance(sc, seed)?;
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for kind in AllocatorKind::ALL {
            let started = Instant::now();
            let outcome = Allocator::new(kind, sc.solver.clone()).allocate(&prob);
            let elapsed = started.elapsed().as_secs_f64();
            let wall = if timestamp { elapsed.to_string() } else { String::new() };
            let row = match outcome {
                Ok(r) => {
                    let p = &r.p_opt;
                    vec![
                        seed.to_string(),
                        kind.to_string(),
                        prob.phi_global(p)?.to_string(),
                        prob.capped_deviation(p)?.to_string(),
                        join(&prob.samples_per_node(p)?),
                        sum_rate(&prob, p).to_string(),
                        wall,
                        r.iterations.to_string(),
                        r.status.as_str().to_string(),
                        String::new(),
                    ]
                }
                Err(e) => {
                    failures.push(format!("seed {seed}: {kind}: {e}"));
                    let mut row = vec![String::new(); 10];
                    row[0] = seed.to_string();
                    row[1] = kind.to_string();
                    row[6] = wall;
                    row[8] = "failed".into();
                    row
                }
            };
            rows.push(row);
        }
        Ok((rows, failures))
    })?;
    let mut all_rows = Vec::new();
    let mut failures = Vec::new();
    for (rows, f) in tables {
        all_rows.extend(rows);
        failures.extend(f);
    }
    out.write_table(
        "compare.csv",
        None,
        &[
            "seed",
            "allocator",
            "phi",
            "capped_phi",
            "samples_per_node",
            "sum_rate",
            "wall_time_s",
            "iterations",
            "status",
            "qot_max_phi",
        ],
        all_rows,
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Solver(failures.join("; ")))
    }
}

pub fn bound(sc: &Scenario, out: &OutDir) -> Result<(), Failure> {
    let b = &sc.bound;
    let params = b.params();
    let rows = (0..=b.t_max)
        .map(|t| Ok([t.to_string(), convergence_bound(&params, b.alpha, t)?.to_string()]))
        .collect::<Result<Vec<_>, lopa_core::Error>>()?;
    out.write_table("bound.csv", None, &["t", "bound"], rows)?;
    let caps = sc.network.to_config(sc.seeds[0])?.dataset_caps;
    println!("node,cap,min_samples");
    for (i, d) in caps.iter().enumerate() {
        println!("{i},{d},{}", min_samples(*d as f64, b.xi2));
    }
    println!("admission_threshold,{}", admission_threshold(&caps, b.xi2));
    Ok(())
}
