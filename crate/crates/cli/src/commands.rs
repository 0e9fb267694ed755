use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use ckm_core::data::{
    read_dataset, synth_generate, write_dataset, CkmGrid, RegionGrid, SynthParams,
};
use ckm_core::eval::{run_task_parallel, zeta_sweep_parallel, TaskConfig};
use ckm_core::net::{
    load_weights, save_weights, train, ArchConfig, LossWeighting, ScoreNet, TrainConfig,
};
use ckm_core::observation::{observe, Observation};
use ckm_core::ops::OperatorSpec;
use ckm_core::posterior::PosteriorConfig;
use ckm_core::sde::ScheduleSpec;
use ckm_core::Tensor;
use ckm_edge::{edge_construct, fetch_model, serve, ModelCache, ModelSource, Registry};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::{
    Cli, Command, ConstructArgs, EvalArgs, FetchArgs, ObserveArgs, PublishArgs, ServeArgs,
    SweepArgs, SynthArgs, TaskArgs, TrainArgs, Weighting,
};

const DEFAULT_TIMESTEPS: usize = 200;
const DEFAULT_WIDTH: usize = 32;

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    /// Relative output paths live under `--out-dir`.
    fn output(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.cli.out_dir.join(p)
        }
    }

    /// Writes `<out-dir>/<command>.config.json` with the resolved settings.
    fn echo(&self, resolved: impl Serialize) -> Result<()> {
        fs::create_dir_all(&self.cli.out_dir)?;
        let doc = json!({
            "ckm_version": env!("CARGO_PKG_VERSION"),
            "command": self.cli.command.name(),
            "seed": self.cli.seed,
            "out_dir": self.cli.out_dir,
            "args": &self.cli.command,
            "resolved": resolved,
        });
        let path = self
            .cli
            .out_dir
            .join(format!("{}.config.json", self.cli.command.name()));
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// Operator JSON given inline (`{...}`) or as a file path, optionally `@`-prefixed.
pub fn read_op_json(arg: &str) -> Result<(String, OperatorSpec)> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        let path = arg.strip_prefix('@').unwrap_or(arg);
        fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read operator JSON {path:?}: {e}")))?
    };
    let spec = OperatorSpec::from_json(&text)?;
    Ok((text, spec))
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Serve(a) => serve_cmd(&ctx, a),
        Command::Publish(a) => publish(&ctx, a),
        Command::Fetch(a) => fetch(&ctx, a),
        Command::Observe(a) => observe_cmd(&ctx, a),
        Command::Construct(a) => construct(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(CliError::usage("count must be ≥ 1"));
    }
    let factor = ArchConfig::default().spatial_factor();
    if !a.size.is_multiple_of(factor) {
        return Err(CliError::usage(format!(
            "size {} must be divisible by {factor} for the score network",
            a.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cli.seed);
    let seeds: Vec<u64> = (0..a.count).map(|_| rng.random()).collect();
    let out = ctx.output(&a.out);
    ctx.echo(json!({ "out": out, "grid_seeds": seeds }))?;
    let grids = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            Ok(RegionGrid {
                region: i as u64,
                grid: synth_generate(&SynthParams::with_size(a.size, s))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&out, &grids)?;
    println!(
        "wrote {} grids of {}x{} to {}",
        a.count,
        a.size,
        a.size,
        out.display()
    );
    Ok(())
}

fn load_tensors(path: &Path) -> Result<Vec<Tensor<f32>>> {
    Ok(read_dataset(path)?
        .iter()
        .map(|g| g.grid.to_tensor())
        .collect())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let init = match &a.init {
        Some(p) => {
            let net = load_weights(p)?;
            if let Some(w) = a.width.filter(|&w| w != net.arch().base_width) {
                return Err(CliError::usage(format!(
                    "--width {w} does not match --init width {}",
                    net.arch().base_width
                )));
            }
            if let Some(n) = a.n_timesteps.filter(|&n| n != net.schedule().steps()) {
                return Err(CliError::usage(format!(
                    "--n-timesteps {n} does not match --init N={}",
                    net.schedule().steps()
                )));
            }
            net
        }
        None => {
            let arch = ArchConfig::with_width(a.width.unwrap_or(DEFAULT_WIDTH));
            ScoreNet::init(
                arch,
                ScheduleSpec::vp(a.n_timesteps.unwrap_or(DEFAULT_TIMESTEPS)),
                ctx.cli.seed,
            )?
        }
    };
    let cfg = TrainConfig {
        batch_size: a.batch,
        steps: a.steps,
        learning_rate: a.lr,
        ema_decay: a.ema,
        seed: ctx.cli.seed,
        log_every: a.log_every,
        weighting: match a.weighting {
            Weighting::NoiseVariance => LossWeighting::NoiseVariance,
            Weighting::Unweighted => LossWeighting::Unweighted,
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let out = ctx.output(&a.out);
    let csv = out.with_extension("loss.csv");
    ctx.echo(json!({
        "out": out,
        "loss_csv": csv,
        "init": init.descriptor(),
    }))?;
    let data = load_tensors(&a.data)?;
    info!(
        "training on {} grids, {} parameters",
        data.len(),
        init.n_params()
    );
    let (net, report) = train(&init, &data, &cfg)?;
    create_parent(&out)?;
    save_weights(&net, &out)?;
    let mut text = String::from("step,loss\n");
    for (step, loss) in &report.log {
        writeln!(text, "{step},{loss}").expect("string write");
    }
    fs::write(&csv, text)?;
    println!(
        "initial loss {:.6} final loss {:.6}; weights {}",
        report.initial_loss,
        report.final_loss,
        out.display()
    );
    Ok(())
}

fn serve_cmd(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    ctx.echo(json!({}))?;
    let registry = Arc::new(RwLock::new(Registry::open(&a.registry)?));
    let handle = serve(registry, &a.bind)?;
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| CliError::usage(format!("cannot install signal handler: {e}")))?;
    println!("listening on {}", handle.local_addr());
    let _ = rx.recv();
    handle.shutdown();
    Ok(())
}

fn publish(ctx: &Ctx, a: &PublishArgs) -> Result<()> {
    let ts = a.timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    ctx.echo(json!({ "timestamp": ts }))?;
    let mut registry = Registry::open(&a.registry)?;
    let manifest = registry.publish(&a.weights, &a.version, ts)?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

fn cache_for(dir: &Option<PathBuf>) -> Result<ModelCache> {
    Ok(match dir {
        Some(d) => ModelCache::new(d)?,
        None => ModelCache::from_env()?,
    })
}

fn fetch(ctx: &Ctx, a: &FetchArgs) -> Result<()> {
    let cache = cache_for(&a.cache)?;
    ctx.echo(json!({ "cache": cache.dir() }))?;
    let f = fetch_model(&a.server, &a.version, &cache)?;
    let summary = json!({
        "version": f.manifest.version,
        "sha256": f.manifest.sha256,
        "path": f.path,
        "cache_hit": f.cache_hit,
        "offline": f.offline,
        "bytes_on_wire": f.transfer.total(),
        "weight_bytes": f.transfer.weight_bytes,
    });
    println!("{summary}");
    Ok(())
}

fn observe_cmd(ctx: &Ctx, a: &ObserveArgs) -> Result<()> {
    let (_, spec) = read_op_json(&a.op_json)?;
    let out = ctx.output(&a.out);
    ctx.echo(json!({ "operator": spec, "out": out }))?;
    let grid = CkmGrid::load(&a.grid)?;
    let obs = observe(&grid, &spec, a.sigma, ctx.cli.seed)?;
    create_parent(&out)?;
    obs.save(&out)?;
    println!("wrote {} observation to {}", spec.kind(), out.display());
    Ok(())
}

fn construct(ctx: &Ctx, a: &ConstructArgs) -> Result<()> {
    let source = match (&a.weights, &a.server) {
        (Some(_), Some(_)) => {
            return Err(CliError::usage(
                "--weights and --server are mutually exclusive",
            ))
        }
        (None, None) => return Err(CliError::usage("one of --weights or --server is required")),
        (Some(w), None) => ModelSource::Local(w.clone()),
        (None, Some(s)) => ModelSource::Remote {
            addr: s.clone(),
            version: a.version.clone(),
            cache: cache_for(&a.cache)?,
        },
    };
    let op = a.op_json.as_deref().map(read_op_json).transpose()?;
    let obs = Observation::load(&a.obs)?;
    let spec = op
        .as_ref()
        .map_or_else(|| obs.operator().spec().clone(), |(_, s)| s.clone());
    let cfg = PosteriorConfig {
        correctors: a.corrector_steps,
        zeta: a
            .zeta
            .unwrap_or_else(|| PosteriorConfig::default_zeta(&spec)),
        snr_r: a.snr,
        sigma: obs.sigma(),
        seed: ctx.cli.seed,
        detach_score: a.detach_score,
    };
    cfg.validate()?;
    let out = ctx.output(&a.out);
    ctx.echo(json!({ "posterior": cfg, "operator": spec, "out": out }))?;
    let built = edge_construct(
        &source,
        &a.obs,
        op.as_ref().map(|(t, _)| t.as_str()),
        &cfg,
        !a.no_timing,
        &out,
    )?;
    if let Some(f) = &built.fetched {
        info!(
            "prior {} ({} weight bytes transferred)",
            f.manifest.version, f.transfer.weight_bytes
        );
    }
    println!(
        "wrote {} and {}",
        built.grid_path.display(),
        built.sidecar_path.display()
    );
    Ok(())
}

fn task_config(ctx: &Ctx, t: &TaskArgs, zeta: Option<f64>) -> TaskConfig {
    TaskConfig {
        zeta: zeta.unwrap_or_else(|| t.task.default_zeta()),
        correctors: t.corrector_steps,
        snr_r: t.snr,
        sigma: t.sigma,
        detach_score: t.detach_score,
        seed: ctx.cli.seed,
        include_buildings: !t.exclude_buildings,
        timing: !t.no_timing,
        ..TaskConfig::new(t.task)
    }
}

fn load_testset(t: &TaskArgs) -> Result<(ScoreNet, Vec<CkmGrid>)> {
    let net = load_weights(&t.weights)?;
    let grids = read_dataset(&t.testset)?
        .into_iter()
        .map(|g| g.grid)
        .collect();
    Ok((net, grids))
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let cfg = task_config(ctx, &a.task, a.zeta);
    cfg.validate()?;
    let out = ctx.output(&a.out);
    let dump = a.dump_pgm.then(|| ctx.cli.out_dir.join("pgm"));
    ctx.echo(json!({ "task_config": cfg, "out": out, "pgm_dir": dump }))?;
    let (net, grids) = load_testset(&a.task)?;
    let report = run_task_parallel(&cfg, &net, &grids, dump.as_deref(), a.task.jobs)?;
    create_parent(&out)?;
    fs::write(&out, report.to_json() + "\n")?;
    let g = &report.aggregate;
    println!(
        "{} over {} grids: gain RMSE {:.3} dB (baseline {:.3}), AoA sine RMSE {:.4} (baseline {:.4}), beats baseline on {}",
        cfg.task.name(),
        g.grids,
        g.gain_rmse_db,
        g.baseline_gain_rmse_db,
        g.aoa_sine_rmse,
        g.baseline_aoa_sine_rmse,
        g.beats_baseline
    );
    Ok(())
}

fn parse_zetas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|z| {
            z.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("bad zeta value {z:?}")))
        })
        .collect()
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<()> {
    let zetas = parse_zetas(&a.zetas)?;
    let cfg = task_config(ctx, &a.task, None);
    cfg.validate()?;
    let out = ctx.output(&a.out);
    let reports = a.reports.as_deref().map(|p| ctx.output(p));
    ctx.echo(json!({ "task_config": cfg, "zetas": zetas, "out": out, "reports": reports }))?;
    let (net, grids) = load_testset(&a.task)?;
    let sweep = zeta_sweep_parallel(&cfg, &net, &grids, &zetas, a.task.jobs)?;
    create_parent(&out)?;
    fs::write(&out, sweep.to_csv())?;
    if let Some(p) = &reports {
        create_parent(p)?;
        fs::write(p, serde_json::to_string_pretty(&sweep)? + "\n")?;
    }
    print!("{}", sweep.to_csv());
    if let Some(best) = sweep.argmin() {
        println!(
            "minimum gain RMSE at zeta {} (interior: {})",
            sweep.points[best].zeta,
            sweep.has_interior_minimum()
        );
    }
    Ok(())
}
