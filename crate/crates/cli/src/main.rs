use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use sttran_core::checkpoint::load_checkpoint;
use sttran_core::config::{Mode, ModelConfig};
use sttran_core::data::synth::write_dataset;
use sttran_core::data::{check_compatible, perturb_videos, synth_generate, FeatureDims, Manifest, Perturbation, Split, SynthSpec};
use sttran_core::eval::{default_sweep, evaluate};
use sttran_core::graphgen::{apply_strategy, frame_candidates, score_triplets, topk, Strategy, StrategyConfig, TripletEnd};
use sttran_core::model::Sttran;
use sttran_core::numerics::Precision;
use sttran_core::par::Exec;
use sttran_core::train::{CheckpointPolicy, Trainer};
use sttran_core::verify::{self, grad_check_result, VerifyReport};
use sttran_core::vocab::Vocabulary;
use sttran_core::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

const RESUMABLE_KEYS: [&str; 3] = ["steps", "checkpoint_every", "log_level"];

#[derive(Parser)]
#[command(name = "sttran", version, about = "Spatial-temporal transformer for dynamic scene graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines, `preset = desk|paper` first).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use sequential execution even when built with rayon.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the train split of a dataset manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint and run record.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Evaluate on the test split when training finishes.
        #[arg(long)]
        eval: bool,
    },
    /// Recall@K table and predicate AP for a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// predcls, sgcls, sgdet or all
        #[arg(long, default_value = "all")]
        mode: String,
        /// with, semi, no or all
        #[arg(long, default_value = "all")]
        strategy: String,
        /// Comma-separated K values; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Add a Semi Constraint threshold sweep.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ranked triplets per frame of one video, as JSON lines.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value = "with")]
        strategy: Strategy,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        videos: usize,
        #[arg(long, default_value_t = 20)]
        test_videos: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Probability that a contact label reflects the previous frame.
        #[arg(long, default_value_t = 0.0)]
        coupling: f64,
        #[arg(long, default_value_t = 0.9)]
        switch_prob: f64,
    },
    /// Copy a dataset with a fraction of training videos reordered.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: Perturbation,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        fraction: f64,
    },
    /// Gradient checks, equivariance, invariants and determinism.
    Verify,
    /// Gradient checks only.
    Gradcheck {
        /// Corrupt the matmul backward; the check must then fail.
        #[arg(long)]
        corrupt: bool,
        #[arg(long, default_value_t = 3)]
        frames: usize,
    },
}

enum Failure {
    Error(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))
        })
        .collect()
}

impl Common {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn model_config(&self) -> Result<ModelConfig, Error> {
        let mut overrides = parse_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        let cfg = match &self.config {
            Some(p) => ModelConfig::load(p, &overrides)?,
            None => ModelConfig::parse("preset = desk\n", &overrides)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn split_of(name: &str) -> Result<Split, Error> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split `{name}` (train|test)"))),
    }
}

fn parse_list<T: std::str::FromStr<Err = Error> + Copy>(raw: &str, all: &[T]) -> Result<Vec<T>, Error> {
    if raw == "all" {
        return Ok(all.to_vec());
    }
    raw.split(',').map(|s| s.trim().parse()).collect()
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Points the model at the vocabulary's person class.
fn attach_vocabulary(model: &mut Sttran, vocab: &Vocabulary) -> Result<(), Error> {
    if let Some(p) = vocab.person_class() {
        model.net.person_class = p;
    } else if model.config().pair_policy == sttran_core::config::PairPolicy::PersonCentric {
        return Err(Error::Vocabulary("person-centric pairs need a `person` object class".into()));
    }
    Ok(())
}

fn load_model(checkpoint: &Path, manifest: &Manifest, vocab: &Vocabulary) -> CliResult<Sttran> {
    let ck = load_checkpoint(checkpoint, vocab)?;
    let mut model = ck.model;
    check_compatible(model.config(), manifest.dims, vocab)?;
    attach_vocabulary(&mut model, vocab)?;
    Ok(model)
}

fn cmd_train(
    common: &Common,
    data: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    mode: Option<Mode>,
    eval: bool,
) -> CliResult {
    let manifest = Manifest::load(data)?;
    let vocab = manifest.vocabulary()?;
    let mut trainer = match checkpoint {
        Some(p) => {
            let mut ck = load_checkpoint(p, &vocab)?;
            // the checkpoint fixes the model; only the schedule may change
            let cfg = &mut ck.model.net.config;
            for (k, v) in parse_overrides(&common.overrides)? {
                if !RESUMABLE_KEYS.contains(&k.as_str()) {
                    return Err(Error::Config(format!("`{k}` cannot change when resuming")).into());
                }
                cfg.set(&k, &v)?;
            }
            cfg.validate()?;
            Trainer::resume(ck.model, ck.optimizer)
        }
        None => {
            let mut cfg = common.model_config()?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            Trainer::new(Sttran::new(cfg)?)
        }
    };
    let cfg = trainer.model.config().clone();
    check_compatible(&cfg, manifest.dims, &vocab)?;
    attach_vocabulary(&mut trainer.model, &vocab)?;
    let train = manifest.load_split(Split::Train, &vocab)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let policy = CheckpointPolicy {
        path: out.join("checkpoint.sttc"),
        every: cfg.checkpoint_every,
        vocab: &vocab,
    };
    info!("training {} videos for {} steps ({})", train.len(), cfg.steps, cfg.mode.name());
    let mut record = trainer.run(&train, cfg.steps as u64, Some(&policy))?;
    if eval {
        let test = manifest.load_split(Split::Test, &vocab)?;
        let report = evaluate(
            &mut trainer.model,
            &test,
            &vocab,
            &[cfg.mode],
            &Strategy::ALL,
            &cfg.recall_ks,
            cfg.semi_threshold,
            None,
            common.exec(),
        )?;
        print!("{}", report.to_text());
        record.eval = Some(report);
    }
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("run.json"), text + "\n")?;
    if let Some(loss) = record.tail_loss(50) {
        println!(
            "trained {} steps in {:.1}s, final mean loss {loss:.5}, checkpoint {}",
            record.steps.len(),
            record.wall_clock_secs,
            policy.path.display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    mode: &str,
    strategy: &str,
    k: &[usize],
    threshold: Option<f64>,
    sweep: bool,
    split: &str,
    as_json: bool,
    out: Option<&Path>,
) -> CliResult {
    let manifest = Manifest::load(data)?;
    let vocab = manifest.vocabulary()?;
    let modes = parse_list(mode, &Mode::ALL)?;
    let strategies = parse_list(strategy, &Strategy::ALL)?;
    let mut model = load_model(checkpoint, &manifest, &vocab)?;
    let ks = if k.is_empty() { model.config().recall_ks.clone() } else { k.to_vec() };
    if ks.contains(&0) {
        return Err(Error::Config("K must be >= 1".into()).into());
    }
    let threshold = threshold.unwrap_or(model.config().semi_threshold);
    StrategyConfig::new(Strategy::Semi, threshold)?;
    let videos = manifest.load_split(split_of(split)?, &vocab)?;
    let grid = default_sweep();
    let report = evaluate(
        &mut model,
        &videos,
        &vocab,
        &modes,
        &strategies,
        &ks,
        threshold,
        sweep.then_some(grid.as_slice()),
        common.exec(),
    )?;
    let text = if as_json {
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))? + "\n"
    } else {
        report.to_text()
    };
    write_output(out, &text)
}

fn end_json(e: &TripletEnd, vocab: &Vocabulary) -> serde_json::Value {
    json!({
        "index": e.index,
        "class": vocab.objects.get(e.class).map_or("background", String::as_str),
        "box": [e.bbox.x1, e.bbox.y1, e.bbox.x2, e.bbox.y2],
        "score": e.score,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    data: &Path,
    checkpoint: &Path,
    video_id: &str,
    split: &str,
    mode: Option<Mode>,
    strategy: Strategy,
    k: usize,
    threshold: Option<f64>,
    out: Option<&Path>,
) -> CliResult {
    let manifest = Manifest::load(data)?;
    let vocab = manifest.vocabulary()?;
    let mut model = load_model(checkpoint, &manifest, &vocab)?;
    if let Some(m) = mode {
        model.net.config.mode = m;
    }
    let threshold = threshold.unwrap_or(model.config().semi_threshold);
    let strat = StrategyConfig::new(strategy, threshold)?;
    let videos = manifest.load_split(split_of(split)?, &vocab)?;
    let video = videos
        .iter()
        .find(|v| v.id == video_id)
        .ok_or_else(|| Error::Config(format!("video `{video_id}` not in the {split} split")))?;
    let output = model.predict(video)?;
    let mut text = String::new();
    for frame in &output.frames {
        let ranked = apply_strategy(&score_triplets(&frame_candidates(frame)), strat);
        let triplets: Vec<serde_json::Value> = topk(&ranked, k)
            .iter()
            .enumerate()
            .map(|(rank, t)| {
                json!({
                    "rank": rank + 1,
                    "subject": end_json(&t.subject, &vocab),
                    "object": end_json(&t.object, &vocab),
                    "predicate": {"type": t.predicate.kind.name(), "name": vocab.predicate_name(t.predicate)},
                    "s_sub": t.subject.score,
                    "s_p": t.s_p,
                    "s_obj": t.object.score,
                    "s_rel": t.s_rel,
                })
            })
            .collect();
        let line = json!({
            "video": output.video,
            "frame": frame.index,
            "mode": model.config().mode.name(),
            "strategy": strategy.name(),
            "triplets": triplets,
        });
        text += &line.to_string();
        text.push('\n');
    }
    write_output(out, &text)
}

fn cmd_synth(
    common: &Common,
    out: &Path,
    videos: usize,
    test_videos: usize,
    frames: usize,
    coupling: f64,
    switch_prob: f64,
) -> CliResult {
    let cfg = common.model_config()?;
    let seed = cfg.seed;
    let spec = SynthSpec {
        n_videos: videos,
        frames,
        coupling,
        switch_prob,
        seed,
        world_seed: seed,
        dims: FeatureDims::of(&cfg),
        predicate_sizes: cfg.predicate_sizes,
        max_objects: SynthSpec::default().max_objects.min(cfg.num_object_classes.saturating_sub(1)),
        ..SynthSpec::default()
    };
    let train = synth_generate(&spec)?;
    let test = synth_generate(&SynthSpec {
        n_videos: test_videos,
        seed: seed ^ 0x7465_7374,
        ..spec.clone()
    })?;
    let vocab = spec.vocabulary();
    let manifest = write_dataset(out, &vocab, spec.dims, &train, &test)?;
    println!(
        "wrote {} train and {} test videos to {} (frame-local contact bound {:.3})",
        train.len(),
        test.len(),
        manifest.root.display(),
        spec.frame_local_contact_bound()
    );
    Ok(())
}

fn cmd_perturb(common: &Common, data: &Path, out: &Path, kind: Perturbation, fraction: f64) -> CliResult {
    let manifest = Manifest::load(data)?;
    let vocab = manifest.vocabulary()?;
    let train = manifest.load_split(Split::Train, &vocab)?;
    let test = manifest.load_split(Split::Test, &vocab)?;
    let seed = common.seed.unwrap_or(0);
    let (perturbed, chosen) = perturb_videos(&train, fraction, kind, seed)?;
    write_dataset(out, &vocab, manifest.dims, &perturbed, &test)?;
    let ids: Vec<&str> = chosen.iter().map(|&i| train[i].id.as_str()).collect();
    println!("perturbed {} of {} training videos: {}", ids.len(), train.len(), ids.join(" "));
    Ok(())
}

fn finish_verify(report: VerifyReport) -> CliResult {
    print!("{}", report.to_text());
    if report.all_passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(Failure::Verify(format!(
            "failed: {} (reproduce with --seed {})",
            names.join(", "),
            report.seed
        )))
    }
}

fn cmd_gradcheck(seed: u64, corrupt: bool, frames: usize) -> CliResult {
    let start = std::time::Instant::now();
    let mut checks = Vec::new();
    if corrupt {
        let r = verify::end_to_end_gradcheck(Mode::PredCls, frames, seed, true)?;
        checks.push(grad_check_result("gradcheck/end-to-end/predcls (corrupted)", &r));
    } else {
        for (name, r) in verify::op_gradchecks(seed)? {
            checks.push(grad_check_result(&format!("gradcheck/op/{name}"), &r));
        }
        for mode in Mode::ALL {
            let r = verify::end_to_end_gradcheck(mode, frames, seed, false)?;
            checks.push(grad_check_result(&format!("gradcheck/end-to-end/{}", mode.name()), &r));
        }
    }
    finish_verify(VerifyReport {
        seed,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn run(cli: Cli) -> CliResult {
    let common = &cli.common;
    match &cli.command {
        Command::Train {
            data,
            out,
            checkpoint,
            mode,
            eval,
        } => cmd_train(common, data, out, checkpoint.as_deref(), *mode, *eval),
        Command::Eval {
            data,
            checkpoint,
            mode,
            strategy,
            k,
            threshold,
            sweep,
            split,
            json,
            out,
        } => cmd_eval(
            common,
            data,
            checkpoint,
            mode,
            strategy,
            k,
            *threshold,
            *sweep,
            split,
            *json,
            out.as_deref(),
        ),
        Command::Predict {
            data,
            checkpoint,
            video,
            split,
            mode,
            strategy,
            k,
            threshold,
            out,
        } => cmd_predict(data, checkpoint, video, split, *mode, *strategy, *k, *threshold, out.as_deref()),
        Command::Synth {
            out,
            videos,
            test_videos,
            frames,
            coupling,
            switch_prob,
        } => cmd_synth(common, out, *videos, *test_videos, *frames, *coupling, *switch_prob),
        Command::Perturb {
            data,
            out,
            kind,
            fraction,
        } => cmd_perturb(common, data, out, *kind, *fraction),
        Command::Verify => {
            let mut cfg = common.model_config()?;
            cfg.precision = Precision::F64;
            finish_verify(verify::run_verify(&cfg, cfg.seed))
        }
        Command::Gradcheck { corrupt, frames } => cmd_gradcheck(common.seed.unwrap_or(0), *corrupt, *frames),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = cli.common.model_config().map_or_else(|_| "info".to_string(), |c| c.log_level);
    init_logging(&level);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
