//! Commands: `generate`, `train`, `eval`, `ensemble` and `report`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anticipation_core::datagen::{generate, DatasetManifest, Split};
use anticipation_core::evalkit::{ensemble_report, report_csv, FusionSpec, ReportRow, ReportTable, ScoreSet};
use anticipation_core::model::AnticipationModel;
use anticipation_core::trainer::{run_phase, score_split, EpochMetrics, PhaseKind, METRICS_HEADER};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::{info, warn};

use crate::config::{describe_keys, RunConfig};
use crate::error::{Error, Result};
use crate::{checkpoint, scorefile, store};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "anticipation", version, about = "Train and evaluate recurrent action-anticipation models on synthetic clips")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory; overrides ANTICIPATION_OUT_DIR and the `out` key.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the output directory.
    Generate {
        #[command(flatten)]
        out: OutArgs,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run training phases, checkpointing after each one.
    Train {
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
        /// Contiguous comma-separated phase list, e.g. `ordinary,finetune`.
        #[arg(long, value_delimiter = ',')]
        phases: Option<Vec<String>>,
        /// Checkpoint to continue from; defaults to the previous phase's
        /// checkpoint in the output directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train into a non-empty output directory, restarting its metrics log.
        #[arg(long)]
        force: bool,
    },
    /// Score one split with a checkpoint and print its MT5R.
    Eval {
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        model_id: Option<String>,
        /// Score file to write; defaults to `<out>/<model_id>.<split>.scores`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Late-fuse score files and report every member and fusion.
    Ensemble {
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Explicit per-file weights, in input order.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Weight of rgb score sets relative to other modalities.
        #[arg(long)]
        rgb_weight: Option<f64>,
        #[arg(long, default_value = "ensemble")]
        name: String,
        #[command(flatten)]
        out: OutArgs,
        #[arg(required = true)]
        scores: Vec<PathBuf>,
    },
    /// Tabulate score files and turn metrics logs into plot data.
    Report {
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Metrics logs written by `train`.
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
        scores: Vec<PathBuf>,
    },
}

/// Parses the process arguments, with the configuration keys in `--help`.
pub fn parse() -> Cli {
    let cmd = Cli::command().after_long_help(describe_keys());
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

pub fn load_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(f) = file {
        cfg.apply_file(f)?;
    }
    for s in sets {
        cfg.set_pair(s)?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.set)?;
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match cli.command {
        Command::Generate { out, force } => {
            let m = cmd_generate(&cfg, &cfg.out_dir(out.out.as_deref()), force)?;
            println!("{}", summary(&m));
        }
        Command::Train {
            data,
            out,
            phases,
            resume,
            force,
        } => {
            set_opt(&mut cfg, "data", path_str(&data))?;
            let phases = parse_phases(phases.as_deref())?;
            let out = cfg.out_dir(out.out.as_deref());
            let log = cmd_train(&cfg, &out, &phases, resume.as_deref(), force)?;
            if let Some(last) = log.last() {
                println!("{METRICS_HEADER}\n{last}");
            }
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            model_id,
            output,
            out,
        } => {
            set_opt(&mut cfg, "data", path_str(&data))?;
            set_opt(&mut cfg, "eval.split", split)?;
            set_opt(&mut cfg, "eval.model_id", model_id)?;
            let out = cfg.out_dir(out.out.as_deref());
            let (set, path) = cmd_eval(&cfg, &checkpoint, output.as_deref(), &out)?;
            let labels = store::labels(Path::new(cfg.raw("data")), cfg.get("eval.split")?)?;
            let r = set.recall(&labels)?;
            println!("model,split,mt5r_verb,mt5r_noun,mt5r_action");
            println!("{},{},{},{},{}", set.model_id, cfg.raw("eval.split"), r.verb, r.noun, r.action);
            info!("scores written to {}", path.display());
        }
        Command::Ensemble {
            data,
            split,
            weights,
            rgb_weight,
            name,
            out,
            scores,
        } => {
            set_opt(&mut cfg, "data", path_str(&data))?;
            set_opt(&mut cfg, "eval.split", split)?;
            set_opt(&mut cfg, "ensemble.rgb_weight", rgb_weight.map(|w| w.to_string()))?;
            let out = cfg.out_dir(out.out.as_deref());
            let rows = cmd_ensemble(&cfg, &scores, weights.as_deref(), &name, &out)?;
            print!("{}", ReportTable(&rows));
        }
        Command::Report {
            data,
            split,
            metrics,
            out,
            scores,
        } => {
            set_opt(&mut cfg, "data", path_str(&data))?;
            set_opt(&mut cfg, "eval.split", split)?;
            let out = cfg.out_dir(out.out.as_deref());
            let text = cmd_report(&cfg, &scores, &metrics, &out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn set_opt(cfg: &mut RunConfig, key: &str, v: Option<String>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, &v),
        None => Ok(()),
    }
}

fn summary(m: &DatasetManifest) -> String {
    format!(
        "verbs={} nouns={} actions={} seed={} frames={} observed={} train={} val={} test={}",
        m.verbs,
        m.nouns,
        m.actions,
        m.seed,
        m.frames,
        m.observed_frames,
        m.split_size(Split::Train),
        m.split_size(Split::Val),
        m.split_size(Split::Test)
    )
}

fn is_nonempty_dir(p: &Path) -> Result<bool> {
    match fs::read_dir(p) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(p)(e)),
    }
}

/// Writes a fresh dataset. With `force`, a previous dataset in `out` is
/// replaced; unrelated files are left alone.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<DatasetManifest> {
    let gen = cfg.generate_config()?;
    if is_nonempty_dir(out)? {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to replace it", out.display())));
        }
        for split in Split::ALL {
            let d = out.join(split.name());
            if d.is_dir() {
                fs::remove_dir_all(&d).map_err(Error::io(&d))?;
            }
        }
    }
    let data = generate(&gen)?;
    info!("writing {} clips to {}", data.samples().len(), out.display());
    store::save(out, &data)?;
    Ok(data.manifest.clone())
}

pub fn parse_phases(names: Option<&[String]>) -> Result<Vec<PhaseKind>> {
    let Some(names) = names else {
        return Ok(PhaseKind::ALL.to_vec());
    };
    let kinds = names.iter().map(|n| n.trim().parse()).collect::<Result<Vec<PhaseKind>, _>>()?;
    let first = kinds
        .first()
        .and_then(|k| PhaseKind::ALL.iter().position(|a| a == k))
        .ok_or_else(|| Error::Config("--phases is empty".into()))?;
    if PhaseKind::ALL.get(first..first + kinds.len()) != Some(kinds.as_slice()) {
        return Err(Error::Config(format!(
            "phases must be a contiguous run of {:?}",
            PhaseKind::ALL.map(PhaseKind::name)
        )));
    }
    Ok(kinds)
}

pub fn checkpoint_dir(out: &Path, phase: PhaseKind) -> PathBuf {
    out.join(format!("checkpoint-{phase}"))
}

/// Runs `phases`, writing `checkpoint-<phase>/` after each and appending one
/// line per epoch to `metrics.csv`.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    phases: &[PhaseKind],
    resume: Option<&Path>,
    force: bool,
) -> Result<Vec<EpochMetrics>> {
    let first = *phases.first().ok_or_else(|| Error::Config("no phases to run".into()))?;
    let resume = match resume {
        Some(p) => Some(p.to_path_buf()),
        None if first == PhaseKind::Warmup => None,
        None => {
            let prev = PhaseKind::ALL[PhaseKind::ALL.iter().position(|&k| k == first).unwrap_or(1) - 1];
            let dir = checkpoint_dir(out, prev);
            if !dir.join(checkpoint::MANIFEST).is_file() {
                return Err(Error::Config(format!(
                    "{first} resumes from a {prev} checkpoint; none at {}, pass --resume",
                    dir.display()
                )));
            }
            Some(dir)
        }
    };
    if is_nonempty_dir(out)? && resume.is_none() && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to train into it", out.display())));
    }

    let data_dir = Path::new(cfg.raw("data"));
    if !data_dir.join(store::MANIFEST).is_file() {
        return Err(Error::Config(format!("no dataset at {}", data_dir.display())));
    }
    let data = store::load(data_dir)?;
    let train = cfg.train_config()?;
    let specs = phases.iter().map(|&k| cfg.phase(k)).collect::<Result<Vec<_>>>()?;
    let mut model = match &resume {
        Some(dir) => {
            let (m, manifest) = checkpoint::load(dir)?;
            info!("resuming from {} ({:?})", dir.display(), manifest.phase);
            if manifest.model.cell != cfg.get("model.cell")? || manifest.model.modality != cfg.get("model.modality")? {
                warn!("checkpoint model differs from model.* keys; the checkpoint wins");
            }
            m
        }
        None => AnticipationModel::new(cfg.model_config(&data.manifest)?)?,
    };

    fs::create_dir_all(out).map_err(Error::io(out))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_string()).map_err(Error::io(&cfg_path))?;
    let log_path = out.join(METRICS_FILE);
    let fresh = resume.is_none() || !log_path.is_file();
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    if fresh {
        writeln!(log_file, "{METRICS_HEADER}").map_err(Error::io(&log_path))?;
    }

    let mut all = Vec::new();
    for spec in &specs {
        let mut write_err = None;
        let lines = run_phase(&mut model, &data, spec, &train, |m| {
            info!("{m}");
            if let Err(e) = writeln!(log_file, "{m}").and_then(|_| log_file.flush()) {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(Error::io(&log_path)(e));
        }
        let dir = checkpoint_dir(out, spec.kind);
        checkpoint::save(&dir, &model, Some(spec.kind.name()))?;
        info!("checkpoint written to {}", dir.display());
        all.extend(lines);
    }
    Ok(all)
}

/// Scores `eval.split` and writes the score file; returns it and its path.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, output: Option<&Path>, out: &Path) -> Result<(ScoreSet, PathBuf)> {
    let (model, _) = checkpoint::load(ckpt)?;
    let data_dir = Path::new(cfg.raw("data"));
    let manifest = store::read_manifest(data_dir)?;
    let mc = model.config();
    if mc.frame_shape() != manifest.frame_shape(mc.modality) {
        return Err(Error::Config(format!(
            "checkpoint expects {} frames of shape {:?}, dataset provides {:?}",
            mc.modality,
            mc.frame_shape(),
            manifest.frame_shape(mc.modality)
        )));
    }
    let split: Split = cfg.get("eval.split")?;
    let id = match cfg.raw("eval.model_id") {
        "" => format!("{}-{}", mc.cell.name(), mc.modality.name()),
        s => s.to_string(),
    };
    let data = store::load(data_dir)?;
    let set = score_split(&model, &data, split, &id)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            fs::create_dir_all(out).map_err(Error::io(out))?;
            out.join(format!("{id}.{split}.scores"))
        }
    };
    scorefile::write(&path, &set)?;
    Ok((set, path))
}

/// Reports each input alone, their uniform fusion, and the rgb-weighted or
/// explicitly weighted fusion when requested. The last row's fusion is
/// written to `<out>/<name>.scores` and the table to `<out>/<name>.csv`.
pub fn cmd_ensemble(
    cfg: &RunConfig,
    files: &[PathBuf],
    weights: Option<&[f64]>,
    name: &str,
    out: &Path,
) -> Result<Vec<ReportRow>> {
    let mut sets = files.iter().map(|f| scorefile::read(f)).collect::<Result<Vec<_>>>()?;
    // Fusion specs address members by id, so repeated ids get a position tag.
    for i in 1..sets.len() {
        if sets[..i].iter().any(|s| s.model_id == sets[i].model_id) {
            sets[i].model_id = format!("{}#{}", sets[i].model_id, i + 1);
        }
    }
    let labels = store::labels(Path::new(cfg.raw("data")), cfg.get("eval.split")?)?;
    let ids: Vec<&str> = sets.iter().map(|s| s.model_id.as_str()).collect();
    let mut specs: Vec<FusionSpec> = ids.iter().map(|id| FusionSpec::uniform(id, &[id])).collect();
    specs.push(FusionSpec::uniform(&format!("{name}-uniform"), &ids));
    let rgb: f64 = cfg.get("ensemble.rgb_weight")?;
    if rgb != 1.0 {
        specs.push(FusionSpec::modality_weighted(&format!("{name}-rgb{rgb}"), &sets, "rgb", rgb));
    }
    if let Some(w) = weights {
        if w.len() != sets.len() {
            return Err(Error::Config(format!("{} weights for {} score files", w.len(), sets.len())));
        }
        specs.push(FusionSpec {
            name: format!("{name}-weighted"),
            members: ids.iter().map(|s| s.to_string()).zip(w.iter().copied()).collect(),
        });
    }
    let rows = ensemble_report(&sets, &labels, &specs)?;
    let fused = anticipation_core::evalkit::fuse(&sets, specs.last().expect("at least one spec"))?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    scorefile::write(&out.join(format!("{name}.scores")), &fused)?;
    let csv = out.join(format!("{name}.csv"));
    fs::write(&csv, report_csv(&rows)).map_err(Error::io(&csv))?;
    Ok(rows)
}

/// Per-file MT5R table (also `<out>/report.csv`) and, for metrics logs,
/// `<out>/curves.csv` with a running epoch index for plotting.
pub fn cmd_report(cfg: &RunConfig, scores: &[PathBuf], metrics: &[PathBuf], out: &Path) -> Result<String> {
    if scores.is_empty() && metrics.is_empty() {
        return Err(Error::Config("nothing to report: pass score files or --metrics".into()));
    }
    let mut text = String::new();
    fs::create_dir_all(out).map_err(Error::io(out))?;
    if !scores.is_empty() {
        let sets = scores.iter().map(|f| scorefile::read(f)).collect::<Result<Vec<_>>>()?;
        let labels = store::labels(Path::new(cfg.raw("data")), cfg.get("eval.split")?)?;
        let specs: Vec<_> = sets.iter().map(|s| FusionSpec::uniform(&s.model_id, &[&s.model_id])).collect();
        let rows = ensemble_report(&sets, &labels, &specs)?;
        text.push_str(&ReportTable(&rows).to_string());
        let p = out.join("report.csv");
        fs::write(&p, report_csv(&rows)).map_err(Error::io(&p))?;
    }
    if !metrics.is_empty() {
        let mut csv = format!("run,step,{METRICS_HEADER}\n");
        for (run, path) in metrics.iter().enumerate() {
            let body = fs::read_to_string(path).map_err(Error::io(path))?;
            let mut lines = body.lines();
            if lines.next() != Some(METRICS_HEADER) {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: "missing metrics header".into(),
                });
            }
            let mut last: Vec<&str> = Vec::new();
            for (step, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
                if line.split(',').count() != 7 {
                    return Err(Error::Format {
                        path: path.clone(),
                        reason: format!("malformed line {line:?}"),
                    });
                }
                csv.push_str(&format!("{run},{step},{line}\n"));
                last.push(line);
            }
            text.push_str(&format!("{}: {} epochs", path.display(), last.len()));
            if let Some(l) = last.last() {
                text.push_str(&format!(", final {l}"));
            }
            text.push('\n');
        }
        let p = out.join("curves.csv");
        fs::write(&p, csv).map_err(Error::io(&p))?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn phase_lists_must_be_contiguous() {
        assert_eq!(parse_phases(None).unwrap(), PhaseKind::ALL.to_vec());
        assert_eq!(
            parse_phases(Some(&names(&["ordinary", "finetune"]))).unwrap(),
            vec![PhaseKind::Ordinary, PhaseKind::Finetune]
        );
        assert!(parse_phases(Some(&names(&["warmup", "finetune"]))).is_err());
        assert!(parse_phases(Some(&names(&["finetune", "ordinary"]))).is_err());
        assert!(parse_phases(Some(&names(&["warmup", "warmup"]))).is_err());
        assert!(parse_phases(Some(&names(&["cooldown"]))).is_err());
        assert!(parse_phases(Some(&[])).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
