//! Command-line experiment runner. Each invocation resolves a config,
//! creates `<out>/<config-hash>-<timestamp>/`, writes `config.resolved`
//! there and then the artifacts of its subcommand.
//!
//! | subcommand | artifacts |
//! |---|---|
//! | `gen-data` | `world.txt`, `split.tsv`, `metrics.csv` |
//! | `train` | `checkpoint.bin`, `losses.jsonl`, `styles.tsv`, `metrics.csv` |
//! | `train-clf` | `checkpoint.bin` (with classifier), `losses.jsonl`, `metrics.csv` |
//! | `sample` | `samples.jsonl`, `metrics.csv` |
//! | `eval` | `metrics.csv`, `reports.jsonl` |
//! | `sweep` | `metrics.csv` |
//! | `verify` | `metrics.csv` |
//!
//! Exit codes: 0 success, 1 runtime failure (including failed self-tests),
//! 2 malformed config or usage, 3 missing checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::diffusion::{Condition, GuidanceMode, SamplerOptions};
use crate::error::Error;
use crate::eval::{
    content_error, eca_oracle, nearest_speaker_accuracy, probe_disentanglement, sweep_csv,
    CellMetrics, EvalReport, EvalSample, SpeakerGroup,
};
use crate::pipeline::Experiment;
use crate::rng::{derive_index, derive_seed, seeded};
use crate::synthworld::{sample_utterance, World, NEUTRAL};
use crate::training::{classifier_accuracy, Checkpoint, ClassifierPosterior, NoisyClassifier};
use crate::verify;

#[derive(Debug, Parser)]
#[command(
    name = "emoguide",
    version,
    about = "Guided conditional diffusion on a synthetic speakers x emotions world"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Config file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500` or `--set seed=3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory under which run directories are created.
    #[arg(long, default_value = "runs", global = true)]
    pub out: PathBuf,
    /// Read the world from a `world.txt` instead of building it from the config.
    #[arg(long, global = true)]
    pub world: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build the world and speaker split and write them out.
    GenData,
    /// Jointly train encoder, generator, score network and adversarial probe.
    Train,
    /// Train the noisy emotion classifier used by classifier guidance.
    TrainClf(CheckpointArg),
    /// Generate samples for one speaker and target emotion.
    Sample(CheckpointArg),
    /// Evaluate unguided, classifier-free and classifier guidance on seen and unseen speakers.
    Eval(CheckpointArg),
    /// Oracle ECA and content error across guidance scales.
    Sweep(SweepArgs),
    /// Run the oracle self-tests.
    Verify,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArg {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated ascending guidance scales; defaults to `eval.sweep_gammas`.
    #[arg(long)]
    pub gammas: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(Error),
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("{0} of the oracle self-tests failed")]
    VerifyFailed(usize),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingCheckpoint(_) => 3,
            CliError::VerifyFailed(_) | CliError::Run(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// What a successful run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    /// Human-readable report lines, also printed by the binary.
    pub report: Vec<String>,
}

/// Resolves the config from the file and overrides.
pub fn resolve_config(global: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let text = match &global.config {
        Some(p) => fs::read_to_string(p).map_err(|e| {
            CliError::Config(Error::Config {
                line: 0,
                msg: format!("{}: {e}", p.display()),
            })
        })?,
        None => String::new(),
    };
    ExperimentConfig::resolve(&text, &global.overrides).map_err(CliError::Config)
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> CliResult<RunSummary> {
    let config = resolve_config(&cli.global)?;
    let checkpoint = match &cli.command {
        Command::TrainClf(a) | Command::Sample(a) | Command::Eval(a) => Some(&a.checkpoint),
        Command::Sweep(a) => Some(&a.checkpoint),
        _ => None,
    };
    if let Some(p) = checkpoint {
        if !p.is_file() {
            return Err(CliError::MissingCheckpoint(p.clone()));
        }
    }
    let gammas = match &cli.command {
        Command::Sweep(SweepArgs {
            gammas: Some(g), ..
        }) => Some(parse_gammas(g)?),
        _ => None,
    };
    let ex = match &cli.global.world {
        Some(p) => Experiment::with_world(
            config,
            World::from_text(&fs::read_to_string(p).map_err(Error::from)?)?,
        )?,
        None => Experiment::new(config)?,
    };
    let run_dir = create_run_dir(&cli.global.out, &ex.config.hash())?;
    write(&run_dir, "config.resolved", &ex.config.to_resolved())?;
    let load = || -> CliResult<Checkpoint> {
        let ck = Checkpoint::load(checkpoint.expect("checked above"))?;
        ex.check_checkpoint(&ck)?;
        Ok(ck)
    };
    let report = match &cli.command {
        Command::GenData => gen_data(&ex, &run_dir)?,
        Command::Train => train(&ex, &run_dir)?,
        Command::TrainClf(_) => train_clf(&ex, &load()?, &run_dir)?,
        Command::Sample(_) => sample(&ex, &load()?, &run_dir)?,
        Command::Eval(_) => eval(&ex, &load()?, &run_dir)?,
        Command::Sweep(_) => sweep(&ex, &load()?, gammas, &run_dir)?,
        Command::Verify => verify_cmd(&ex, &run_dir)?,
    };
    Ok(RunSummary {
        run_dir,
        config_hash: ex.config.hash(),
        report,
    })
}

fn parse_gammas(raw: &str) -> CliResult<Vec<f64>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .ok()
                .filter(|g| g.is_finite() && *g >= 0.0)
        })
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]))
        .ok_or_else(|| {
            CliError::Config(Error::Config {
                line: 0,
                msg: format!("--gammas expects ascending non-negative numbers, got `{raw}`"),
            })
        })
}

fn create_run_dir(out: &Path, hash: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(out).map_err(Error::from)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = out.join(format!("{hash}-{stamp}"));
    let mut dir = base.clone();
    for n in 2.. {
        match fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
            }
            Err(e) => return Err(Error::from(e).into()),
        }
    }
    Ok(dir)
}

fn write(dir: &Path, name: &str, body: &str) -> CliResult<()> {
    fs::write(dir.join(name), body).map_err(|e| Error::from(e).into())
}

fn jsonl<T: serde::Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(&r).expect("records serialize"));
        s.push('\n');
    }
    s
}

fn kv_csv(rows: &[(&str, String)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

fn gen_data(ex: &Experiment, dir: &Path) -> CliResult<Vec<String>> {
    write(dir, "world.txt", &ex.world.to_text())?;
    let mut split = String::from("speaker\tgroup\n");
    for s in 0..ex.world.speakers() {
        let _ = writeln!(
            split,
            "{s}\t{}",
            if ex.split.is_seen(s) {
                "seen"
            } else {
                "unseen"
            }
        );
    }
    write(dir, "split.tsv", &split)?;
    let w = &ex.world;
    write(
        dir,
        "metrics.csv",
        &kv_csv(&[
            ("world_hash", w.hash()),
            ("frame_dim", w.frame_dim().to_string()),
            ("vocab", w.config.vocab.to_string()),
            ("speakers", w.speakers().to_string()),
            ("emotions", w.emotions().to_string()),
            ("seen", ex.split.seen.len().to_string()),
            ("unseen", ex.split.unseen.len().to_string()),
        ]),
    )?;
    Ok(vec![format!(
        "world {} with {} speakers ({} seen)",
        w.hash(),
        w.speakers(),
        ex.split.seen.len()
    )])
}

fn train(ex: &Experiment, dir: &Path) -> CliResult<Vec<String>> {
    let mut losses =
        std::io::BufWriter::new(fs::File::create(dir.join("losses.jsonl")).map_err(Error::from)?);
    let mut sink = |r: &crate::training::LossRecord| -> crate::error::Result<()> {
        serde_json::to_writer(&mut losses, r).map_err(|e| Error::Format(e.to_string()))?;
        losses.write_all(b"\n")?;
        Ok(())
    };
    let (model, out) = ex.train(Some(&mut sink))?;
    losses.flush().map_err(Error::from)?;
    drop(losses);
    let ck = ex.checkpoint(out.store);
    ck.save(&dir.join("checkpoint.bin"))?;

    let styles = ex.style_set(
        &model,
        &ck.model,
        400,
        derive_seed(ex.config.seed, "styles"),
    )?;
    write(dir, "styles.tsv", &styles.to_tsv())?;
    let probe = probe_disentanglement(
        &styles.vectors,
        &styles.emotions,
        ex.world.emotions(),
        ex.config.seed,
    )?;
    let n = out.trace.len();
    let window = &out.trace[n.saturating_sub(200)..];
    let avg = |f: fn(&crate::training::LossRecord) -> f64| {
        window.iter().map(f).sum::<f64>() / window.len().max(1) as f64
    };
    let chance = 100.0 / ex.world.emotions() as f64;
    write(
        dir,
        "metrics.csv",
        &kv_csv(&[
            ("steps", n.to_string()),
            ("final_total", format!("{:.6}", avg(|r| r.total))),
            ("final_recon", format!("{:.6}", avg(|r| r.recon))),
            ("final_dsm", format!("{:.6}", avg(|r| r.dsm))),
            ("final_dat", format!("{:.6}", avg(|r| r.dat))),
            ("probe_accuracy", format!("{probe:.2}")),
            ("probe_chance", format!("{chance:.2}")),
            ("checkpoint_hash", ck.hash()),
        ]),
    )?;
    Ok(vec![format!(
        "trained {n} steps; style probe accuracy {probe:.1}% (chance {chance:.1}%)"
    )])
}

fn restore(ck: &Checkpoint) -> CliResult<crate::training::Model> {
    Ok(ck.model()?)
}

fn train_clf(ex: &Experiment, ck: &Checkpoint, dir: &Path) -> CliResult<Vec<String>> {
    let model = restore(ck)?;
    let (clf, cstore, losses) = ex.train_classifier(&model, &ck.model)?;
    write(
        dir,
        "losses.jsonl",
        &jsonl(
            losses
                .iter()
                .enumerate()
                .map(|(step, loss)| serde_json::json!({ "step": step, "loss": loss })),
        ),
    )?;
    let held_out = ex.classifier_data(
        &model,
        &ck.model,
        400,
        derive_seed(ex.config.seed, "clf-held-out"),
    )?;
    let mut rows = Vec::new();
    let mut report = Vec::new();
    for t in [0.05, 0.5, 1.0] {
        let acc = classifier_accuracy(
            &clf,
            &cstore,
            &held_out,
            &ex.schedule,
            t,
            derive_seed(ex.config.seed, "clf-acc"),
        )?;
        rows.push((t, acc));
        report.push(format!("classifier accuracy at t={t}: {:.1}%", 100.0 * acc));
    }
    let names = ["accuracy_t0.05", "accuracy_t0.5", "accuracy_t1.0"];
    let kv: Vec<(&str, String)> = names
        .iter()
        .zip(&rows)
        .map(|(n, (_, a))| (*n, format!("{a:.4}")))
        .collect();
    write(dir, "metrics.csv", &kv_csv(&kv))?;
    let out = Checkpoint {
        classifier: Some((ex.config.classifier.clone(), cstore)),
        ..ck.clone()
    };
    out.save(&dir.join("checkpoint.bin"))?;
    Ok(report)
}

fn classifier_of(ck: &Checkpoint) -> Option<(NoisyClassifier, &crate::autodiff::ParamStore)> {
    ck.classifier.as_ref().map(|(_, s)| {
        (
            NoisyClassifier::new(ck.dims.frame_dim, ck.dims.emotions, &ck.model_config),
            s,
        )
    })
}

fn sample(ex: &Experiment, ck: &Checkpoint, dir: &Path) -> CliResult<Vec<String>> {
    let sc = &ex.config.sample;
    let model = restore(ck)?;
    let nets = model.nets(&ck.model);
    let seed = ex.config.seed;
    let mut rng = seeded(derive_seed(seed, "sample-scripts"));
    let ref_tokens = ex.world.random_script(sc.ref_len, &mut rng);
    let reference = sample_utterance(
        &ex.world,
        sc.speaker,
        NEUTRAL,
        &ref_tokens,
        derive_seed(seed, "sample-ref"),
    )?;
    let style = model.encode_style(&ck.model, &reference.frames)?;
    let base = derive_seed(seed, "sample-noise");
    let conds: Vec<Condition> = (0..sc.count)
        .map(|i| Condition {
            tokens: ex.world.random_script(sc.script_len, &mut rng),
            style: style.clone(),
            emotion: sc.emotion,
            seed: derive_index(base, i as u64),
        })
        .collect();
    let opts = SamplerOptions {
        steps: sc.steps,
        stochastic: sc.stochastic,
    };
    let mut report = Vec::new();
    let frames = match sc.mode {
        GuidanceMode::None => nets.sample_unguided(&conds, false, &ex.schedule, &opts)?,
        GuidanceMode::ClassifierFree => {
            let s = nets.sample_cfg(&conds, &ex.schedule, &opts, sc.gamma, None)?;
            report.extend(s.warnings.into_iter().map(|w| format!("warning: {w}")));
            s.samples
        }
        GuidanceMode::Classifier => {
            let (clf, store) = classifier_of(ck).ok_or_else(|| {
                Error::InvalidArgument(
                    "classifier guidance needs a checkpoint produced by train-clf".into(),
                )
            })?;
            let mut post = ClassifierPosterior::new(&clf, store);
            nets.sample_cg(&mut post, &conds, &ex.schedule, &opts, sc.gamma, None)?
        }
    };
    let samples: Vec<EvalSample> = frames
        .into_iter()
        .zip(&conds)
        .map(|(f, c)| EvalSample {
            frames: f,
            speaker: sc.speaker,
            target: c.emotion,
            tokens: c.tokens.clone(),
        })
        .collect();
    write(
        dir,
        "samples.jsonl",
        &jsonl(samples.iter().enumerate().map(|(i, s)| {
            serde_json::json!({
                "index": i,
                "speaker": s.speaker,
                "emotion": s.target,
                "tokens": s.tokens,
                "frames": s.frames.rows().map(<[f64]>::to_vec).collect::<Vec<_>>(),
            })
        })),
    )?;
    let eca = eca_oracle(&ex.world, &samples)?;
    let ce = content_error(&ex.world, &samples)?.mean;
    let ns = 100.0 * nearest_speaker_accuracy(&ex.world, &samples)?;
    let mut csv = String::from("mode,gamma,eca,content_error,nearest_speaker,n\n");
    let _ = writeln!(
        csv,
        "{},{:.4},{eca:.4},{ce:.6},{ns:.4},{}",
        sc.mode.name(),
        sc.gamma,
        samples.len()
    );
    write(dir, "metrics.csv", &csv)?;
    report.push(format!(
        "{} samples ({} gamma={}) for speaker {} emotion {}: ECA {eca:.1}%, content error {ce:.3}",
        samples.len(),
        sc.mode.name(),
        sc.gamma,
        sc.speaker,
        sc.emotion
    ));
    Ok(report)
}

const EVAL_HEADER: &str =
    "group,mode,gamma,eca,content_error,secs_mean_frame,secs_style,nearest_speaker,n";

fn eval_row(c: &CellMetrics) -> String {
    format!(
        "{},{},{:.4},{:.4},{:.6},{:.6},{:.6},{:.4},{}",
        c.group.name(),
        c.mode.name(),
        c.gamma,
        c.eca,
        c.content_error,
        c.secs_mean_frame,
        c.secs_style,
        c.nearest_speaker,
        c.n
    )
}

fn eval(ex: &Experiment, ck: &Checkpoint, dir: &Path) -> CliResult<Vec<String>> {
    let model = restore(ck)?;
    let bank = ex.bank()?;
    let clf = classifier_of(ck);
    let ev = ex.evaluator(
        &model,
        &ck.model,
        clf.as_ref().map(|(c, s)| (c, *s)),
        &bank,
        ex.config.eval.clone(),
    );
    let mut cells: Vec<(GuidanceMode, f64)> = vec![(GuidanceMode::None, 0.0)];
    cells.extend(
        ex.config
            .eval
            .cfg_gammas
            .iter()
            .map(|&g| (GuidanceMode::ClassifierFree, g)),
    );
    let mut report = Vec::new();
    if clf.is_some() {
        cells.push((GuidanceMode::Classifier, ex.config.eval.cg_gamma));
    } else {
        report.push("no classifier in checkpoint; skipping classifier guidance".to_string());
    }
    let mut csv = format!("{EVAL_HEADER}\n");
    let mut reports = Vec::new();
    let (wh, ch) = (ex.world.hash(), ck.hash());
    for group in [SpeakerGroup::Seen, SpeakerGroup::Unseen] {
        for &(mode, gamma) in &cells {
            let c = ev.averaged(mode, gamma, group)?;
            csv.push_str(&eval_row(&c));
            csv.push('\n');
            report.push(format!(
                "{:<6} {:<15} gamma={:<5} ECA {:5.1}  content {:.3}  nearest-speaker {:5.1}",
                group.name(),
                mode.name(),
                gamma,
                c.eca,
                c.content_error,
                c.nearest_speaker
            ));
            reports.extend(EvalReport::from_cell(&c, &wh, &ch));
        }
    }
    write(dir, "metrics.csv", &csv)?;
    write(dir, "reports.jsonl", &jsonl(reports))?;
    Ok(report)
}

fn sweep(
    ex: &Experiment,
    ck: &Checkpoint,
    gammas: Option<Vec<f64>>,
    dir: &Path,
) -> CliResult<Vec<String>> {
    let model = restore(ck)?;
    let bank = ex.bank()?;
    let clf = classifier_of(ck);
    let e = &ex.config.eval;
    let gammas = gammas.unwrap_or_else(|| e.sweep_gammas.clone());
    let ev = ex.evaluator(
        &model,
        &ck.model,
        clf.as_ref().map(|(c, s)| (c, *s)),
        &bank,
        e.clone(),
    );
    let rows = ev.guidance_sweep(&gammas, e.sweep_mode, e.sweep_group, ex.config.seed)?;
    write(dir, "metrics.csv", &sweep_csv(&rows))?;
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "{} gamma={:<5} ECA {:5.1}  content {:.3}",
                r.mode.name(),
                r.gamma,
                r.eca,
                r.content_error
            )
        })
        .collect())
}

fn verify_cmd(ex: &Experiment, dir: &Path) -> CliResult<Vec<String>> {
    let seed = ex.config.seed;
    let checks = vec![
        verify::check_gradients(20, seed)?,
        verify::check_score_oracle(&ex.world, &ex.schedule, seed)?,
        verify::check_bayes_identity(&ex.world, &ex.schedule, seed)?,
    ];
    let mut csv = String::from("check,max_error,tolerance,cases,passed\n");
    for c in &checks {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{},{}",
            c.name,
            c.max_error,
            c.tolerance,
            c.cases,
            c.passed()
        );
    }
    write(dir, "metrics.csv", &csv)?;
    let failed = checks.iter().filter(|c| !c.passed()).count();
    let mut report: Vec<String> = checks.iter().map(verify::Check::line).collect();
    if failed > 0 {
        for l in &report {
            eprintln!("{l}");
        }
        return Err(CliError::VerifyFailed(failed));
    }
    report.push(format!("all {} oracle checks passed", checks.len()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gammas_parse_and_reject() {
        assert_eq!(parse_gammas("0,0.5, 1").unwrap(), vec![0.0, 0.5, 1.0]);
        for bad in ["", "1,0", "a", "-1", "1,1"] {
            assert_eq!(parse_gammas(bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::MissingCheckpoint("x".into()).exit_code(), 3);
        assert_eq!(
            CliError::Config(Error::Config {
                line: 1,
                msg: "m".into()
            })
            .exit_code(),
            2
        );
        assert_eq!(CliError::VerifyFailed(1).exit_code(), 1);
        assert_eq!(CliError::Run(Error::NoForward).exit_code(), 1);
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), "abc").unwrap();
        let b = create_run_dir(tmp.path(), "abc").unwrap();
        assert_ne!(a, b);
        assert!(a.file_name().unwrap().to_str().unwrap().starts_with("abc-"));
    }
}
