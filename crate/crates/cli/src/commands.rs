use std::path::Path;

use mrtl_bench::{
    oracle_val_loss, run_comparison, sensitivity_sweep, theory_sweep, BenchmarkReport, DataSource, Method,
};
use mrtl_core::data::encode_at;
use mrtl_core::{checkpoint, export, mrtl_train, AnyModel, RunOptions, TrainReport};
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::{threads_from_env, Failure};

fn io_err(what: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", what.display()))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    final_val_loss: f64,
    final_train_loss: f64,
    report: &'a TrainReport,
}

pub fn train(config_path: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let loaded = LoadedConfig::load(config_path)?;
    let mut cfg = loaded.config.train.clone();
    cfg.threads = threads_from_env()?;
    let resume = resume
        .map(|p| checkpoint::load(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display()))))
        .transpose()?;

    let all = loaded.dataset().map_err(|e| Failure::Config(format!("data: {e}")))?;
    let n_tasks = all.meta.n_tasks;
    let schedule = loaded.schedule(n_tasks).map_err(|e| Failure::Config(format!("schedule: {e}")))?;
    let (train, val) = all.split(loaded.config.val_frac, cfg.seed);

    let out = loaded.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let echo = loaded.echo(n_tasks).map_err(Failure::Config)?;
    std::fs::write(out.join("config.toml"), echo).map_err(|e| io_err(&out, e))?;

    let (model, report) = mrtl_train(
        &schedule,
        &train,
        &cfg,
        RunOptions { val: Some(&val), observer: None, out_dir: Some(&out), resume },
    )?;

    let (gb, gc) = schedule.finest();
    let m = model.as_dyn();
    let final_val_loss = m.mean_log_loss(&encode_at(&val, &gb, &gc)?)?;
    let final_train_loss = m.mean_log_loss(&encode_at(&train, &gb, &gc)?)?;
    let body = TrainOutput { final_val_loss, final_train_loss, report: &report };
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&body).map_err(mrtl_core::Error::from)?)
        .map_err(|e| io_err(&out, e))?;
    if let AnyModel::Factored(f) = &model {
        export::export_all(f, &out)?;
    }

    println!("segments: {}", report.stages.len());
    for s in &report.stages {
        println!(
            "  segment {} stage {} {:?} {}x{}/{}x{}: {} steps, {} params{}",
            s.segment,
            s.stage,
            s.phase,
            s.grid_b[0],
            s.grid_b[1],
            s.grid_c[0],
            s.grid_c[1],
            s.steps,
            s.param_count,
            s.fired_at.map(|k| format!(", criterion fired at {k}")).unwrap_or_default()
        );
    }
    println!("weighted cost: {:.6e}", report.total_weighted_cost);
    println!("final train loss: {final_train_loss:.6}");
    println!("final val loss: {final_val_loss:.6}");
    println!("output: {}", out.display());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub methods: Option<String>,
    pub threshold: Option<f64>,
    pub seeds: u64,
    pub sweep: Option<String>,
    pub draws: usize,
    pub theory: bool,
}

pub fn bench(config_path: &Path, args: &BenchArgs) -> Result<(), Failure> {
    let loaded = LoadedConfig::load(config_path)?;
    let bench_cfg = loaded
        .config
        .bench
        .clone()
        .ok_or_else(|| Failure::Config(format!("{}: bench: section is required", config_path.display())))?;
    let sweep_kind = match &args.sweep {
        None => None,
        Some(s) => {
            let m: Method = s.parse().map_err(Failure::Config)?;
            Some(m.criterion_kind().ok_or_else(|| Failure::Config(format!("--sweep: {m} has no thresholds")))?)
        }
    };
    let methods = match &args.methods {
        Some(list) => Method::parse_list(list).map_err(Failure::Config)?,
        None if sweep_kind.is_some() || args.theory => Vec::new(),
        None => Method::ALL.to_vec(),
    };
    if args.seeds == 0 {
        return Err(Failure::Config("--seeds: must be >= 1".into()));
    }
    if sweep_kind.is_some() && args.draws < 2 {
        return Err(Failure::Config("--draws: must be >= 2".into()));
    }

    let mut report = BenchmarkReport::default();
    if !methods.is_empty() || sweep_kind.is_some() {
        let all = loaded.dataset().map_err(|e| Failure::Config(format!("data: {e}")))?;
        let n_tasks = all.meta.n_tasks;
        let data = match &loaded.config.data.synthetic {
            Some(spec) => DataSource::Synthetic(spec.clone()),
            None => DataSource::Dataset(all),
        };
        let threshold = match (args.threshold, &loaded.config.data.synthetic) {
            (Some(t), _) => t,
            (None, Some(spec)) => {
                let schedule = loaded.schedule(n_tasks).map_err(Failure::Config)?;
                oracle_val_loss(spec, &schedule, loaded.config.val_frac, 0)? + 0.01
            }
            (None, None) => return Err(Failure::Config("--threshold: required for file datasets".into())),
        };
        let mut setup = loaded.comparison_setup(n_tasks, threshold)?;
        let mut needed = methods.clone();
        needed.extend(sweep_kind.and_then(|k| Method::ALL.into_iter().find(|m| m.criterion_kind() == Some(k))));
        setup.validate(&needed).map_err(|e| Failure::Config(format!("bench: {e}")))?;
        setup.train.threads = threads_from_env()?;
        let seeds: Vec<u64> = (0..args.seeds).collect();
        println!("threshold: {threshold:.6}");

        if !methods.is_empty() {
            let c = run_comparison(&data, &setup, &methods, &seeds)?;
            for s in &c.summaries {
                let median = s.median_cost.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "inf".into());
                println!("{:<18} reached {}/{}  median cost {median}", s.method.name(), s.reached, s.runs);
            }
            report.comparison = Some(c);
        }
        if let Some(kind) = sweep_kind {
            let s = sensitivity_sweep(
                &data,
                &setup,
                kind,
                args.draws,
                &bench_cfg.tau_ranges,
                seeds[0],
                bench_cfg.sweep_seed,
            )?;
            println!("sweep {}: {} converged, {} not", kind.name(), s.converged, s.non_converged);
            report.sweeps.push(s);
        }
    }
    if args.theory {
        report.theory = theory_sweep(&[0.3, 0.5, 0.8], &[1e-1, 1e-2, 1e-3])?;
        for t in &report.theory {
            println!(
                "theory alpha {} eps {:e}: fixed/predicted {:.3}, multi/fixed cost {:.3}",
                t.config.alpha, t.config.eps, t.fixed_ratio, t.cost_ratio
            );
        }
    }
    let dir = loaded.out_dir().join("bench");
    report.write(&dir)?;
    println!("output: {}", dir.display());
    Ok(())
}

pub fn export_factors(ckpt: &Path, out: &Path) -> Result<(), Failure> {
    let ck = checkpoint::load(ckpt).map_err(|e| Failure::Config(format!("{}: {e}", ckpt.display())))?;
    match &ck.model {
        AnyModel::Factored(f) => {
            export::export_all(f, out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        AnyModel::Full(_) => {
            Err(Failure::Config(format!("{}: checkpoint holds a full-rank model, not factors", ckpt.display())))
        }
    }
}
