mod config;
mod error;
mod exp;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use log::{info, warn};
use mtpt_core::data_synth::{synth_corpus, Corpus, Split, UttKind};
use mtpt_core::dataset::TaskData;
use mtpt_core::decoding::{decode_set, train_lm, BeamConfig, LanguageModel, NgramLm};
use mtpt_core::losses::{MetricsRecord, Task};
use mtpt_core::manifest::{load_corpus, store_corpus, FEATURES_FILE, MANIFEST_FILE};
use mtpt_core::model::Model;
use mtpt_core::pseudo_codes::{
    bpe_train, kmeans_fit, speech_to_units, teacher_vectors, BpeModel, Codebook, PseudoCoder, TeacherFeaturizer,
};
use mtpt_core::trainer::{ablate, fit_model_config, standard_variants, AblationVariant, RunOptions, Trainer};

use crate::config::Config;
use crate::error::CliError;
use crate::exp::{record, ExperimentDir};

#[derive(Parser)]
#[command(name = "mtpt", version, about = "Multi-task speech/text pre-training on synthetic data")]
struct Cli {
    /// TOML configuration file; see `--dump-config` for every key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to corpus, coder, model and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Only warnings and errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// More log output; repeat for more.
    #[arg(long, short, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "exp")]
    exp: PathBuf,
    /// Replace outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into <exp>/data.
    SynthData,
    /// Fit the teacher projection and the k-means codebook.
    TrainCodebook,
    /// Learn BPE merges over deduplicated codebook units.
    TrainBpe,
    /// Write pseudo-codes for every speech utterance to <exp>/artifacts/units.tsv.
    EncodeUnits,
    /// Train the n-gram language model on the text split.
    TrainLm,
    /// Stage 1 warm-up and stage 2 multi-task pre-training.
    Pretrain(RunArgs),
    /// Speech-to-text fine-tuning.
    Finetune(FinetuneArgs),
    /// Beam-search decode a split.
    Decode(DecodeArgs),
    /// Token error rate between two hypothesis files.
    Eval(EvalArgs),
    /// Pre-train and fine-tune with tasks removed; writes a TER table.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Output run directory name under the experiment directory.
    #[arg(long, default_value = "pretrain")]
    name: String,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, default_value = "finetune")]
    name: String,
    /// Checkpoint to start from; defaults to <exp>/pretrain/final.ckpt.
    #[arg(long, conflicts_with = "from_scratch")]
    init: Option<PathBuf>,
    /// Start from a randomly initialized model.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Defaults to <exp>/finetune/final.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus directory holding manifest.tsv; defaults to <exp>/data.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    split: String,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    lm_weight: Option<f64>,
    /// Defaults to <exp>/artifacts/lm.json when the LM weight is positive.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Defaults to <exp>/decode/<split>.hyp.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated tasks to remove in one variant; repeatable. Without
    /// it the standard table is run.
    #[arg(long = "remove")]
    remove: Vec<String>,
    /// Also run the full model.
    #[arg(long)]
    with_full: bool,
}

fn init_logging(quiet: bool, verbose: u8) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, rec| {
            let line = serde_json::json!({
                "level": rec.level().as_str().to_lowercase(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.quiet, cli.verbose);
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({"level": "error", "kind": e.kind(), "msg": e.to_string()});
            eprintln!("{line}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.config.as_deref(), std::env::vars(), cli.seed)?;
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config("no subcommand given; see --help".into()));
    };
    let exp = ExperimentDir { root: cli.exp, force: cli.force };
    match command {
        Command::SynthData => synth_data(&exp, &cfg),
        Command::TrainCodebook => train_codebook(&exp, &cfg),
        Command::TrainBpe => train_bpe_cmd(&exp, &cfg),
        Command::EncodeUnits => encode_units(&exp),
        Command::TrainLm => train_lm_cmd(&exp, &cfg),
        Command::Pretrain(a) => pretrain(&exp, &cfg, a),
        Command::Finetune(a) => finetune(&exp, &cfg, a),
        Command::Decode(a) => decode(&exp, &cfg, a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(&exp, &cfg, a),
    }
}

fn snapshot(exp: &ExperimentDir, dir: &Path, cfg: &Config) -> Result<(), CliError> {
    exp.write(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

fn load_data(exp: &ExperimentDir) -> Result<Corpus, CliError> {
    let dir = exp.data();
    exp.require(&dir.join(MANIFEST_FILE), "corpus manifest", "synth-data")?;
    exp.require(&dir.join(FEATURES_FILE), "corpus features", "synth-data")?;
    Ok(load_corpus(&dir)?)
}

/// Speech used to fit the coder: every training-split utterance with audio.
fn coder_speech(corpus: &Corpus) -> Vec<&mtpt_core::autograd::Matrix> {
    corpus
        .utterances
        .iter()
        .filter(|u| u.split == Split::Train)
        .filter_map(|u| u.features.as_ref())
        .collect()
}

fn load_featurizer_codebook(exp: &ExperimentDir) -> Result<(TeacherFeaturizer, Codebook), CliError> {
    let t = exp.require(&exp.artifact("teacher.json"), "teacher projection", "train-codebook")?;
    let c = exp.require(&exp.artifact("codebook.json"), "codebook", "train-codebook")?;
    Ok((TeacherFeaturizer::load(&t)?, Codebook::load(&c)?))
}

fn load_coder(exp: &ExperimentDir) -> Result<PseudoCoder, CliError> {
    let (featurizer, codebook) = load_featurizer_codebook(exp)?;
    let b = exp.require(&exp.artifact("bpe.json"), "BPE model", "train-bpe")?;
    Ok(PseudoCoder::new(featurizer, codebook, BpeModel::load(&b)?)?)
}

fn synth_data(exp: &ExperimentDir, cfg: &Config) -> Result<(), CliError> {
    let dir = exp.data();
    exp.claim(&dir.join(MANIFEST_FILE))?;
    snapshot(exp, &dir, cfg)?;
    let corpus = synth_corpus(&cfg.corpus)?;
    store_corpus(&corpus, &dir)?;
    for f in [MANIFEST_FILE, FEATURES_FILE, "lexicon.tsv", "corpus.json"] {
        record(&dir.join(f))?;
    }
    info!("wrote {} utterances to {}", corpus.utterances.len(), dir.display());
    Ok(())
}

fn train_codebook(exp: &ExperimentDir, cfg: &Config) -> Result<(), CliError> {
    let corpus = load_data(exp)?;
    let (tp, cp) = (exp.artifact("teacher.json"), exp.artifact("codebook.json"));
    exp.claim(&tp)?;
    exp.claim(&cp)?;
    exp.write(&exp.artifact("codebook.config.toml"), cfg.to_toml().as_bytes())?;
    let speech = coder_speech(&corpus);
    let c = &cfg.coder;
    let featurizer = TeacherFeaturizer::new(corpus.config.feature_dim, c.teacher_dim, c.window, c.seed)?;
    let vectors = teacher_vectors(&featurizer, &speech, c.max_points)?;
    let fit = kmeans_fit(&vectors, c.clusters, c.kmeans_iters, c.kmeans_tol, c.seed)?;
    featurizer.save(&tp)?;
    record(&tp)?;
    fit.codebook.save(&cp)?;
    record(&cp)?;
    info!(
        "codebook: k={} points={} iterations={} inertia={:.6} reseeded={}",
        fit.codebook.k(),
        vectors.rows(),
        fit.iterations,
        fit.inertia.last().copied().unwrap_or(f64::NAN),
        fit.reseeded
    );
    Ok(())
}

fn train_bpe_cmd(exp: &ExperimentDir, cfg: &Config) -> Result<(), CliError> {
    let corpus = load_data(exp)?;
    let (featurizer, codebook) = load_featurizer_codebook(exp)?;
    let path = exp.artifact("bpe.json");
    exp.claim(&path)?;
    exp.write(&exp.artifact("bpe.config.toml"), cfg.to_toml().as_bytes())?;
    let units = coder_speech(&corpus)
        .into_iter()
        .map(|m| speech_to_units(&featurizer, &codebook, m))
        .collect::<mtpt_core::Result<Vec<_>>>()?;
    let bpe = bpe_train(&units, codebook.k(), cfg.coder.bpe_vocab)?;
    bpe.save(&path)?;
    record(&path)?;
    info!("bpe: base={} merges={} vocab={}", bpe.base, bpe.merges.len(), bpe.vocab_size());
    Ok(())
}

fn encode_units(exp: &ExperimentDir) -> Result<(), CliError> {
    let corpus = load_data(exp)?;
    let coder = load_coder(exp)?;
    let mut out = String::new();
    for u in &corpus.utterances {
        if let Some(f) = &u.features {
            let codes: Vec<String> = coder.encode(f)?.iter().map(usize::to_string).collect();
            out += &format!("{}\t{}\n", u.id, codes.join(" "));
        }
    }
    exp.write(&exp.artifact("units.tsv"), out.as_bytes())?;
    info!("wrote pseudo-codes to {}", exp.artifact("units.tsv").display());
    Ok(())
}

fn text_of(corpus: &Corpus, split: Split) -> Vec<Vec<usize>> {
    corpus
        .utterances
        .iter()
        .filter(|u| u.split == split && matches!(u.kind(), UttKind::Text | UttKind::Paired))
        .filter_map(|u| u.text.clone())
        .collect()
}

fn train_lm_cmd(exp: &ExperimentDir, cfg: &Config) -> Result<(), CliError> {
    let corpus = load_data(exp)?;
    let path = exp.artifact("lm.json");
    exp.claim(&path)?;
    exp.write(&exp.artifact("lm.config.toml"), cfg.to_toml().as_bytes())?;
    let v = corpus.lexicon.text_vocab_size();
    let lm = train_lm(&text_of(&corpus, Split::Train), v, &cfg.lm)?;
    lm.save(&path)?;
    record(&path)?;
    let held = text_of(&corpus, Split::Dev);
    if !held.is_empty() {
        let ppl = lm.perplexity(&held)?;
        info!("lm: held-out perplexity {ppl:.4} (uniform {})", v + 1);
        println!("perplexity\t{ppl:.6}\tuniform\t{}", v + 1);
    }
    Ok(())
}

fn metrics_logger(path: &Path) -> Result<impl FnMut(&MetricsRecord), CliError> {
    let file = File::create(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    Ok(move |r: &MetricsRecord| {
        if let Err(e) = w.write_all(r.to_json_line().as_bytes()).and_then(|_| w.flush()) {
            warn!("metrics log: {e}");
        }
        if r.dev_loss.is_some() || r.collapse_alert || r.step.is_multiple_of(100) {
            info!("{}", r.to_json_line().trim_end());
        }
    })
}

fn drive(exp: &ExperimentDir, dir: &Path, mut trainer: Trainer, data: &TaskData) -> Result<Trainer, CliError> {
    let final_path = dir.join("final.ckpt");
    exp.claim(&final_path)?;
    let metrics = dir.join(if trainer.state.step == 0 { "metrics.jsonl".to_string() } else {
        format!("metrics.resume-{}-{}.jsonl", trainer.state.phase.as_str(), trainer.state.step)
    });
    exp.claim(&metrics)?;
    let mut log = metrics_logger(&metrics)?;
    trainer.run(data, &mut RunOptions { checkpoint_dir: Some(dir.to_path_buf()), max_steps: None, log: Some(&mut log) })?;
    drop(log);
    record(&metrics)?;
    for entry in fs::read_dir(dir).map_err(|e| CliError::Input(e.to_string()))?.flatten() {
        let p = entry.path();
        if p.extension().is_some_and(|x| x == "bin") && !exp::sidecar_exists(&p) {
            record(&p)?;
        }
    }
    trainer.save(&final_path)?;
    record(&final_path)?;
    info!("wrote {}", final_path.display());
    Ok(trainer)
}

fn pretrain(exp: &ExperimentDir, cfg: &Config, a: RunArgs) -> Result<(), CliError> {
    let corpus = load_data(exp)?;
    let coder = load_coder(exp)?;
    let data = TaskData::from_corpus(&corpus, Some(&coder))?;
    let dir = exp.run(&a.name);
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(&exp.require(p, "checkpoint", "pretrain")?)?,
        None => {
            snapshot(exp, &dir, cfg)?;
            Trainer::pretrain(Model::new(fit_model_config(&cfg.model, &data))?, cfg.train.clone())?
        }
    };
    let t = drive(exp, &dir, trainer, &data)?;
    info!("pretrain: stage1 steps {}, collapse alerts {}", t.state.stage1_steps_run, t.state.collapse_alerts);
    Ok(())
}

fn finetune(exp: &ExperimentDir, cfg: &Config, a: FinetuneArgs) -> Result<(), CliError> {
    let corpus = load_data(exp)?;
    let data = TaskData::from_corpus(&corpus, None)?;
    let dir = exp.run(&a.name);
    let trainer = if let Some(p) = &a.resume {
        Trainer::resume(&exp.require(p, "checkpoint", "finetune")?)?
    } else {
        let model = if a.from_scratch {
            let mut m = fit_model_config(&cfg.model, &data);
            // Keep the code head the same size as a pre-trained model's would be.
            if let Ok(coder) = load_coder(exp) {
                m.code_vocab = coder.vocab_size();
            }
            Model::new(m)?
        } else {
            let init = a.init.clone().unwrap_or_else(|| exp.run("pretrain").join("final.ckpt"));
            Trainer::resume(&exp.require(&init, "pre-trained checkpoint", "pretrain")?)?.model
        };
        snapshot(exp, &dir, cfg)?;
        Trainer::finetune(model, cfg.train.clone())?
    };
    drive(exp, &dir, trainer, &data)?;
    Ok(())
}

fn decode(exp: &ExperimentDir, cfg: &Config, a: DecodeArgs) -> Result<(), CliError> {
    let split = Split::parse(&a.split).ok_or_else(|| CliError::Config(format!("unknown split {}", a.split)))?;
    let data_dir = match &a.manifest {
        Some(p) if p.is_file() => p.parent().map(Path::to_path_buf).unwrap_or_default(),
        Some(p) => p.clone(),
        None => exp.data(),
    };
    exp.require(&data_dir.join(MANIFEST_FILE), "corpus manifest", "synth-data")?;
    let corpus = load_corpus(&data_dir)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| exp.run("finetune").join("final.ckpt"));
    let model = Trainer::resume(&exp.require(&ckpt, "checkpoint", "finetune")?)?.model;
    let beam = BeamConfig {
        beam_size: a.beam.unwrap_or(cfg.decode.beam_size),
        lm_weight: a.lm_weight.unwrap_or(cfg.decode.lm_weight),
        ..cfg.decode.clone()
    };
    beam.validate()?;
    let lm = if beam.lm_weight > 0.0 {
        let p = a.lm.clone().unwrap_or_else(|| exp.artifact("lm.json"));
        Some(NgramLm::load(&exp.require(&p, "language model", "train-lm")?)?)
    } else {
        None
    };
    let data = TaskData::from_corpus(&corpus, None)?;
    let items = match split {
        Split::Train => &data.paired,
        Split::Dev => &data.paired_dev,
        Split::Test => &data.paired_test,
    };
    let hyps = decode_set(&model, items, lm.as_ref().map(|l| l as &dyn LanguageModel), &beam)?;
    let join = |t: &[usize]| t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut hyp_text = String::new();
    let mut ref_text = String::new();
    let mut capped = 0;
    for (it, h) in items.iter().zip(&hyps) {
        hyp_text += &format!("{}\t{:.6}\t{}\n", it.id, h.score, join(&h.tokens));
        ref_text += &format!("{}\t-\t{}\n", it.id, join(&it.text));
        capped += usize::from(!h.finished);
    }
    let out = a.out.clone().unwrap_or_else(|| exp.run("decode").join(format!("{}.hyp", split.as_str())));
    exp.write(&out, hyp_text.as_bytes())?;
    exp.write(&out.with_extension("ref"), ref_text.as_bytes())?;
    if capped > 0 {
        warn!("{capped} hypotheses hit max_len without the end symbol");
    }
    info!("decoded {} utterances to {}", items.len(), out.display());
    Ok(())
}

/// `id<TAB>score<TAB>tokens` or `id<TAB>tokens`.
fn read_hyp_file(path: &Path) -> Result<Vec<(String, Vec<String>)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let tokens = match cols.len() {
            2 => cols[1],
            3 => cols[2],
            n => {
                return Err(CliError::Input(format!("{}:{}: expected 2 or 3 tab-separated columns, got {n}", path.display(), i + 1)))
            }
        };
        out.push((cols[0].to_string(), tokens.split_whitespace().map(str::to_string).collect()));
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let hyps: HashMap<String, Vec<String>> = read_hyp_file(&a.hyp)?.into_iter().collect();
    let refs = read_hyp_file(&a.reference)?;
    let mut h = Vec::with_capacity(refs.len());
    let mut r = Vec::with_capacity(refs.len());
    for (id, tokens) in refs {
        let hyp = hyps.get(&id).ok_or_else(|| CliError::Input(format!("no hypothesis for reference {id}")))?;
        h.push(hyp.clone());
        r.push(tokens);
    }
    let ter = mtpt_core::decoding::token_error_rate(&h, &r)?;
    println!("TER {ter:.6}");
    Ok(())
}

fn ablate_cmd(exp: &ExperimentDir, cfg: &Config, a: AblateArgs) -> Result<(), CliError> {
    let corpus = load_data(exp)?;
    let coder = load_coder(exp)?;
    let data = TaskData::from_corpus(&corpus, Some(&coder))?;
    let mut variants = Vec::new();
    if a.remove.is_empty() {
        variants = standard_variants();
    } else {
        if a.with_full {
            variants.push(AblationVariant::new(&[]));
        }
        for spec in &a.remove {
            let tasks = spec
                .split(',')
                .map(|s| Task::parse(s.trim()).ok_or_else(|| CliError::Config(format!("unknown task {s}"))))
                .collect::<Result<Vec<_>, _>>()?;
            variants.push(AblationVariant::new(&tasks));
        }
    }
    let dir = exp.run("ablate");
    exp.claim(&dir.join("report.tsv"))?;
    snapshot(exp, &dir, cfg)?;
    let report = ablate(&cfg.model, &cfg.train, &data, &variants)?;
    let table = report.to_table();
    exp.write(&dir.join("report.tsv"), table.as_bytes())?;
    exp.write(&dir.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    print!("{table}");
    Ok(())
}
