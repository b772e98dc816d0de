//! Command implementations for the `hep` binary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use hep_core::audit::{run_audit, AuditOptions};
use hep_core::binio::{magic, sha256_hex};
use hep_core::config::RunConfig;
use hep_core::dataset::{
    dataset_from_bytes, grid_from_bytes, grid_to_bytes, load_dataset, save_dataset, Dataset, DatasetContent, GridDump,
    DATASET_MAGIC, GRID_MAGIC,
};
use hep_core::env::expert::{generate_demos, ExpertPolicy};
use hep_core::env::reset;
use hep_core::env::rollout::{evaluate, sample_episodes, EvalReport, Policy};
use hep_core::equinet::checkpoint::{self, Checkpoint};
use hep_core::high_level::select_keypose;
use hep_core::model::{episode_noise_seed, Model};
use hep_core::train::{expected_header, pairs_from_dataset, Trainer, METRICS_HEADER};

#[derive(Parser, Debug)]
#[command(name = "hep", version, about = "Hierarchical equivariant policy: demos, training, evaluation, audit")]
pub struct Cli {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate expert demonstrations into a dataset container.
    GenDemos {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both levels; writes checkpoints and a metrics CSV.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out a trained policy (or the scripted expert) and report success.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        expert: bool,
        /// Also write the heatmap of the first episode's initial observation.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Run the equivariance and gradient audit.
    Audit {
        /// Audit these weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a dataset, checkpoint or heatmap container in readable form.
    Inspect { path: PathBuf },
}

/// One or more audit checks exceeded tolerance.
#[derive(Debug)]
pub struct AuditFailure(pub Vec<String>);

impl std::fmt::Display for AuditFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "audit failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for AuditFailure {}

/// 0 success, 1 usage/config error, 2 audit failure, 3 numerical abort.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<AuditFailure>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hep_core::Error>() {
            if matches!(e, hep_core::Error::NonFiniteLoss(_) | hep_core::Error::NonFinite { .. }) {
                return 3;
            }
        }
    }
    1
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?,
        None => String::new(),
    };
    Ok(RunConfig::from_toml_with_overrides(&text, overrides)?)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Inspect { path } = &cli.command {
        print!("{}", inspect(path)?);
        return Ok(());
    }
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenDemos { out } => gen_demos(&cfg, out.as_deref().unwrap_or(&cfg.paths.dataset)).map(|_| ()),
        Command::Train { dataset, checkpoint, resume } => train(
            &cfg,
            dataset.as_deref().unwrap_or(&cfg.paths.dataset),
            checkpoint.as_deref().unwrap_or(&cfg.paths.checkpoint),
            resume,
        ),
        Command::Eval { checkpoint, expert, heatmap } => {
            let ck = if expert { None } else { Some(checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone())) };
            let rep = eval(&cfg, ck.as_deref(), heatmap.as_deref())?;
            let (lo, hi) = rep.interval95();
            println!(
                "success {:.3} ({}/{}), 95% interval [{lo:.3}, {hi:.3}]",
                rep.success_rate(),
                rep.successes(),
                rep.rows.len()
            );
            Ok(())
        }
        Command::Audit { checkpoint, seed } => audit(&cfg, checkpoint.as_deref(), seed),
        Command::Inspect { .. } => unreachable!("handled above"),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

/// Expert demos over the configured seeds and transforms. Aborts, writing
/// nothing, when too many seeds are unsolvable.
pub fn gen_demos(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let d = &cfg.demos;
    let episodes = sample_episodes(d.count, d.seed, &d.transforms, cfg.env.resolution);
    let (demos, failed) = generate_demos(cfg.task, &episodes, &cfg.env, cfg.t_hist, cfg.t_act, cfg.m)?;
    if d.count > 0 && failed.len() as f64 / d.count as f64 > d.max_unsolvable {
        bail!(
            "{} of {} seeds unsolvable (limit {:.0}%): {:?}",
            failed.len(),
            d.count,
            100.0 * d.max_unsolvable,
            failed
        );
    }
    let frames: usize = demos.iter().map(|x| x.len()).sum();
    let ds = Dataset { header: expected_header(cfg), content: DatasetContent::Demos(demos) };
    ensure_parent(out)?;
    let bytes = save_dataset(&ds, out)?;
    println!(
        "{} demos ({} frames), {} unsolvable seeds skipped {:?}",
        ds.len(),
        frames,
        failed.len(),
        failed
    );
    println!("wrote {} sha256 {}", out.display(), sha256_hex(&bytes));
    Ok(ds)
}

/// Rows of an existing metrics file up to and including `iter`.
fn metrics_prefix(path: &Path, iter: u64) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    let Ok(text) = fs::read_to_string(path) else { return Ok(out) };
    for line in text.lines().skip(1) {
        let Some(Ok(i)) = line.split(',').next().map(str::parse::<u64>) else { continue };
        if i <= iter {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn train(cfg: &RunConfig, dataset: &Path, ck_path: &Path, resume: bool) -> Result<()> {
    let ds = load_dataset(dataset).with_context(|| format!("cannot load dataset {}", dataset.display()))?;
    let pairs = pairs_from_dataset(&ds, cfg)?;
    let (mut trainer, prefix) = if resume {
        let ck = Checkpoint::load(ck_path).with_context(|| format!("cannot load checkpoint {}", ck_path.display()))?;
        let t = Trainer::resume(cfg, pairs, &ck)?;
        let p = metrics_prefix(&cfg.paths.metrics, t.iteration)?;
        (t, p)
    } else {
        (Trainer::new(cfg, pairs)?, format!("{METRICS_HEADER}\n"))
    };
    info!(
        "training {} pairs, {} parameters, from iteration {}",
        trainer.pairs.len(),
        trainer.model.store.num_scalars(),
        trainer.iteration
    );
    ensure_parent(&cfg.paths.metrics)?;
    ensure_parent(ck_path)?;
    let mut metrics = BufWriter::new(File::create(&cfg.paths.metrics)?);
    metrics.write_all(prefix.as_bytes())?;
    let every = cfg.train.checkpoint_every;
    let result = trainer.run(Some(ck_path), &mut |row| {
        writeln!(metrics, "{}", row.csv_line())?;
        if row.iter % every == 0 {
            metrics.flush()?;
            info!("iter {} loss_high {:.4} loss_low {:.4}", row.iter, row.loss_high, row.loss_low);
        }
        Ok(())
    });
    metrics.flush()?;
    result.with_context(|| format!("training stopped; last good checkpoint kept at {}", ck_path.display()))?;
    println!("trained to iteration {}; checkpoint {}", trainer.iteration, ck_path.display());
    Ok(())
}

/// Runs the configured evaluation episodes and writes the CSV.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, heatmap: Option<&Path>) -> Result<EvalReport> {
    let e = &cfg.eval;
    let episodes = sample_episodes(e.episodes, e.seed, &e.transforms, cfg.env.resolution);
    let model = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("cannot load checkpoint {}", p.display()))?;
            Some(Model::from_checkpoint(cfg, &ck)?)
        }
        None => None,
    };
    let (mode, m) = (cfg.mode, cfg.m);
    let report = match &model {
        Some(model) => {
            let mut make = |seed: u64| -> hep_core::Result<Box<dyn Policy + '_>> {
                Ok(Box::new(model.policy(episode_noise_seed(e.policy_seed, seed))))
            };
            evaluate(&mut make, cfg.task, &episodes, &cfg.env, cfg.t_hist, cfg.t_act, mode, m)?
        }
        None => {
            let mut make = |_seed: u64| -> hep_core::Result<Box<dyn Policy>> { Ok(Box::new(ExpertPolicy::new(mode, m))) };
            evaluate(&mut make, cfg.task, &episodes, &cfg.env, cfg.t_hist, cfg.t_act, mode, m)?
        }
    };
    ensure_parent(&cfg.paths.eval_csv)?;
    fs::write(&cfg.paths.eval_csv, report.to_csv())?;
    if let Some(path) = heatmap {
        let Some(model) = &model else { bail!("--heatmap needs a checkpoint") };
        let Some(&(seed, g)) = episodes.first() else { bail!("--heatmap needs at least one episode") };
        let (_, obs) = reset(cfg.task, seed, &g, &cfg.env, cfg.t_hist, cfg.t_act)?;
        let hm = model.high.heatmap(&model.store, &obs)?;
        ensure_parent(path)?;
        checkpoint::write_atomic(path, &grid_to_bytes(&GridDump { label: format!("heatmap seed {seed}"), grid: hm.grid }))?;
    }
    Ok(report)
}

pub fn audit(cfg: &RunConfig, checkpoint: Option<&Path>, seed: u64) -> Result<()> {
    let model = match checkpoint {
        Some(p) => Model::from_checkpoint(cfg, &Checkpoint::load(p)?)?,
        None => Model::build(cfg)?,
    };
    let report = run_audit(&model, cfg, &AuditOptions { seed, ..AuditOptions::default() })?;
    let csv = report.to_csv();
    print!("{csv}");
    ensure_parent(&cfg.paths.audit_report)?;
    fs::write(&cfg.paths.audit_report, &csv)?;
    let failed: Vec<String> = report.failures().iter().map(|c| c.name.clone()).collect();
    if !failed.is_empty() {
        return Err(AuditFailure(failed).into());
    }
    Ok(())
}

fn stats(v: &[f64]) -> (f64, f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, v.iter().sum::<f64>() / v.len().max(1) as f64, hi)
}

/// Human-readable summary of any container, chosen by its magic bytes.
pub fn inspect(path: &Path) -> Result<String> {
    let data = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut s = String::new();
    let mg = magic(&data)?;
    writeln!(s, "file {} ({} bytes, sha256 {})", path.display(), data.len(), sha256_hex(&data))?;
    if &mg == DATASET_MAGIC {
        let ds = dataset_from_bytes(&data)?;
        let h = ds.header;
        writeln!(s, "dataset: {} {}", ds.len(), ds.kind())?;
        writeln!(s, "kf {} m {} t_hist {} t_act {}", h.kf, h.m, h.t_hist, h.t_act)?;
        match &ds.content {
            DatasetContent::Demos(demos) => {
                let lens: Vec<f64> = demos.iter().map(|d| d.len() as f64).collect();
                let (lo, mean, hi) = stats(&lens);
                writeln!(s, "frames per demo: min {lo} mean {mean:.1} max {hi}")?;
                for d in demos {
                    let g = d.meta.transform;
                    writeln!(
                        s,
                        "  {} seed {} r^{} t [{}, {}, {}] frames {}",
                        d.meta.task.name(),
                        d.meta.seed,
                        g.m,
                        g.t[0],
                        g.t[1],
                        g.t[2],
                        d.len()
                    )?;
                }
            }
            DatasetContent::Pairs(pairs) => {
                for p in pairs {
                    let k = p.target_keypose;
                    writeln!(s, "  keypose [{}, {}, {}] points {}", k[0], k[1], k[2], p.obs.cloud.len())?;
                }
            }
        }
    } else if &mg == checkpoint::MAGIC {
        let ck = Checkpoint::from_bytes(&data)?;
        writeln!(s, "checkpoint: iteration {}", ck.iteration)?;
        writeln!(
            s,
            "optimizer state: {}",
            ck.optimizer.as_ref().map_or("none".to_string(), |o| format!("AdamW step {}", o.t))
        )?;
        writeln!(s, "parameters: {} blocks, {} scalars", ck.store.len(), ck.store.num_scalars())?;
        for (info, v) in ck.store.infos.iter().zip(&ck.store.values) {
            writeln!(s, "  {} {:?} [{}] rms {:.4e}", info.name, info.shape, info.rep, rms(v))?;
        }
        writeln!(s, "model config:\n{}", ck.model_config.trim_end())?;
    } else if &mg == GRID_MAGIC {
        let d = grid_from_bytes(&data)?;
        let spec = &d.grid.spec;
        writeln!(s, "grid: {}", d.label)?;
        writeln!(
            s,
            "dims {:?} resolution {} origin {:?} rep {}",
            spec.dims, spec.resolution, spec.origin, d.grid.rep
        )?;
        let (lo, mean, hi) = stats(&d.grid.data);
        writeln!(s, "values: min {lo:.6} mean {mean:.6} max {hi:.6}")?;
        if d.grid.rep.dim() == 1 {
            let hm = hep_core::high_level::Heatmap { grid: d.grid.clone() };
            let idx = hm.argmax();
            let k = select_keypose(&hm);
            writeln!(
                s,
                "argmax {} {:?} margin {:.6} keypose [{}, {}, {}]",
                idx,
                spec.unlinear(idx),
                hm.margin(),
                k[0],
                k[1],
                k[2]
            )?;
        }
    } else {
        return Err(hep_core::Error::BadMagic(mg).into());
    }
    Ok(s)
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}
