//! Command-line orchestration: corpus generation, training, proposition
//! checks and report generation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::evaluation::{
    cluster_metrics, cluster_report_csv, codeword_assignments, confusion_csv, confusion_frobenius,
    knn_disagreement, learning_curves_svg, metrics_csv, mse_table, natural_stimuli, oracle_classify,
    pca_project, scatter_csv, scatter_svg, split_latents, system_stimuli, ConfusionMatrix, ScatterRow,
    Scheme, NMI_NOTE,
};
use crate::nets::HiddenSizes;
use crate::objectives::{
    heuristic_encode_map, verify_elbo_decomposition, verify_prop1, verify_prop2, verify_prop3,
    verify_gradients, verify_prop3_reencode, verify_prop4, LatentPrior, PropositionReport,
};
use crate::synthdata::{between_style_gap, generate_corpus, mse_floor, CorpusConfig, Split, StyleCorpus};
use crate::trainer::{
    learning_curve_csv, prepare, train_system, ArchConfig, Checkpoint, Pool, SystemId, SystemSpec,
    TrainConfig,
};
use crate::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Neighbours inspected for the any-of-k disagreement count.
pub const KNN_K: usize = 5;

/// Noise scales for the shrinking-variance check.
pub const PROP4_SCHEDULE: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Debug, Parser)]
#[command(name = "ctrl-synth", version, about = "Train and evaluate controllable sequence synthesizers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a styled-sequence corpus.
    GenData(GenDataArgs),
    /// Train one system on a corpus.
    Train(TrainArgs),
    /// Run the objective-level proposition checks.
    Verify(VerifyArgs),
    /// Evaluate every trained system in a run directory.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Corpus config JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output corpus JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub system: String,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run config JSON (`arch` and `train` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; outputs go to `<out>/<SYSTEM>/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Comma-separated subset of 1,2,3,4,elbo.
    #[arg(long, default_value = "1,2,3,4,elbo,grad")]
    pub props: String,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the JSON reports to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "per-utterance,per-style")]
    pub schemes: String,
}

/// Architecture and optimizer settings for `train`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

/// Per-system record written by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub system: SystemId,
    pub corpus: PathBuf,
    pub corpus_sha256: String,
    pub config_sha256: String,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub tool_version: String,
    pub wall_clock_s: f64,
}

/// Run-level manifest written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: PathBuf,
    pub tool_version: String,
    pub corpus: PathBuf,
    pub corpus_sha256: String,
    pub systems: BTreeMap<SystemId, TrainEntry>,
    pub reports: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T, Error> {
    serde_json::from_str(text).map_err(|e| Error::Config { field: what.into(), reason: e.to_string() })
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Error> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<(), Error> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
    }
}

pub fn load_corpus_config(path: Option<&Path>) -> Result<CorpusConfig, Error> {
    match path {
        Some(p) => parse_json(&read(p)?, "config"),
        None => Ok(CorpusConfig::default()),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<(), Error> {
    let mut config = load_corpus_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let corpus = generate_corpus(&config)?;
    write(&a.out, &corpus.to_json())?;
    let floor = mse_floor(&config);
    let gap = between_style_gap(&config)?;
    emit(out, &format!("sequences {}\nmse_floor {floor}\nbetween_style_gap {gap}\n", corpus.sequences.len()))
}

pub fn load_corpus(path: &Path) -> Result<StyleCorpus, Error> {
    StyleCorpus::from_json(&read(path)?)
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    let cfg: RunConfig = match path {
        Some(p) => parse_json(&read(p)?, "config")?,
        None => RunConfig::default(),
    };
    cfg.arch.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn system_dir(run: &Path, id: SystemId) -> PathBuf {
    run.join(id.name())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), Error> {
    let id: SystemId = a.system.parse()?;
    let cfg = load_run_config(a.config.as_deref())?;
    let corpus_text = read(&a.corpus)?;
    let corpus = StyleCorpus::from_json(&corpus_text)?;
    let start = Instant::now();
    let ck = train_system(&SystemSpec::new(id, cfg.arch), &corpus, &cfg.train)?;
    let elapsed = start.elapsed().as_secs_f64();
    let dir = system_dir(&a.out, id);
    let ck_path = dir.join("checkpoint.json");
    let ck_json = ck.to_json();
    write(&ck_path, &ck_json)?;
    write(&dir.join("learning_curve.csv"), &learning_curve_csv(&ck.history))?;
    let entry = TrainEntry {
        system: id,
        corpus: a.corpus.clone(),
        corpus_sha256: sha256_hex(corpus_text.as_bytes()),
        config_sha256: sha256_hex(serde_json::to_string(&cfg).expect("config serializes").as_bytes()),
        checkpoint: ck_path,
        checkpoint_sha256: sha256_hex(ck_json.as_bytes()),
        tool_version: TOOL_VERSION.into(),
        wall_clock_s: elapsed,
    };
    write(&dir.join("entry.json"), &serde_json::to_string_pretty(&entry).expect("entry serializes"))?;
    let best = ck.best_record().expect("best epoch is recorded");
    emit(
        out,
        &format!(
            "system,best_epoch,train_mse,val_mse,test_mse\n{id},{},{},{},{}\n",
            ck.epoch, best.train_mse, best.val_mse, best.test_mse
        ),
    )
}

fn parse_props(spec: &str) -> Result<Vec<String>, Error> {
    let known = ["1", "2", "3", "4", "elbo", "grad"];
    let props: Vec<String> = spec.split(',').map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect();
    if props.is_empty() {
        return Err(Error::Config { field: "props".into(), reason: "no propositions selected".into() });
    }
    if let Some(bad) = props.iter().find(|p| !known.contains(&p.as_str())) {
        return Err(Error::Config { field: "props".into(), reason: format!("unknown proposition `{bad}`") });
    }
    Ok(props)
}

/// Re-encoding domain for the trained check; a flat prior lets the latent
/// drift without bound when the decoder saturates.
/// Central-difference step for the gradient checks.
pub const FD_STEP: f64 = 1e-5;

const PROP3_PRIOR: LatentPrior = LatentPrior::Box { lo: -3.0, hi: 3.0 };

/// Re-encoding check on a small trained system with `D = 1`: test-split
/// latents are driven to convergence with frozen weights, then re-encoded.
pub fn prop3_trained(seed: u64) -> Result<PropositionReport, Error> {
    let corpus = generate_corpus(&CorpusConfig {
        styles: 2,
        sequences_per_style: 10,
        vocab_size: 5,
        min_len: 5,
        max_len: 8,
        embedding_dim: 3,
        output_dim: 3,
        style_dim: 2,
        split_fractions: [0.6, 0.2, 0.2],
        seed,
        ..CorpusConfig::default()
    })?;
    let arch = ArchConfig { hidden: HiddenSizes { feedforward: 8, recurrent: 4 }, latent_dim: 1, ..ArchConfig::default() };
    let train = TrainConfig { max_epochs: 30, patience: 30, batch_size: 4, seed, ..TrainConfig::default() };
    let ck = train_system(&SystemSpec::new(SystemId::Hzi, arch), &corpus, &train)?;
    let model = ck.model()?;
    let mut data: Vec<(Tensor, Tensor)> = Vec::new();
    let mut latents = Vec::new();
    for d in prepare(&corpus).into_iter().filter(|d| d.split == Split::Test) {
        let z0 = model.infer_latent(&d)?.ok_or(Error::MissingLatent(d.id))?;
        let enc = heuristic_encode_map(&model.decoder, d.datum(), &z0, 5000, 0.05, &PROP3_PRIOR)?;
        latents.push(enc.z);
        data.push((d.l, d.x));
    }
    verify_prop3_reencode(&model.decoder, &data, &latents, 200, 0.05, &PROP3_PRIOR)
}

/// Runs the selected checks; `Err(PropositionFailed)` names the failures.
pub fn verify_reports(props: &[String], instances: usize, seed: u64) -> Result<Vec<PropositionReport>, Error> {
    if instances == 0 {
        return Err(Error::Config { field: "instances".into(), reason: "must be positive".into() });
    }
    let mut reports = Vec::new();
    for p in props {
        match p.as_str() {
            "1" => reports.push(verify_prop1(instances, seed)?),
            "2" => reports.push(verify_prop2(instances, seed, 0.5)?),
            "3" => {
                reports.push(verify_prop3(instances, seed)?);
                reports.push(prop3_trained(seed)?);
            }
            "4" => reports.push(verify_prop4(instances, seed, &PROP4_SCHEDULE)?),
            "elbo" => reports.push(verify_elbo_decomposition(instances, seed)?),
            "grad" => reports.push(verify_gradients(instances, seed, FD_STEP)?),
            _ => unreachable!("validated by parse_props"),
        }
    }
    Ok(reports)
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<(), Error> {
    let props = parse_props(&a.props)?;
    let reports = verify_reports(&props, a.instances, a.seed)?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    if let Some(path) = &a.out {
        write(path, &json)?;
    }
    emit(out, &format!("{json}\n"))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.proposition.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::PropositionFailed(failed.join(", ")))
    }
}

fn parse_schemes(spec: &str) -> Result<Vec<Scheme>, Error> {
    let schemes: Vec<Scheme> =
        spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    if schemes.is_empty() {
        return Err(Error::Config { field: "schemes".into(), reason: "no schemes selected".into() });
    }
    Ok(schemes)
}

fn load_entry(run: &Path, id: SystemId) -> Result<(TrainEntry, Checkpoint), Error> {
    let dir = system_dir(run, id);
    let entry_path = dir.join("entry.json");
    let ck_path = dir.join("checkpoint.json");
    if !entry_path.exists() || !ck_path.exists() {
        return Err(Error::MissingArtifact(format!("{id} checkpoint ({})", ck_path.display())));
    }
    let entry: TrainEntry =
        serde_json::from_str(&read(&entry_path)?).map_err(|e| Error::Corrupt(format!("{}: {e}", entry_path.display())))?;
    let text = read(&ck_path)?;
    if sha256_hex(text.as_bytes()) != entry.checkpoint_sha256 {
        return Err(Error::Corrupt(format!("{id} checkpoint hash does not match its entry")));
    }
    Ok((entry, Checkpoint::from_json(&text)?))
}

/// Written report files, name to contents, in a fixed order.
pub type Reports = BTreeMap<String, String>;

/// Builds every report for a set of checkpoints trained on `corpus`.
pub fn build_reports(
    checkpoints: &[Checkpoint],
    corpus: &StyleCorpus,
    schemes: &[Scheme],
    pool: &Pool,
) -> Result<(Reports, String), Error> {
    let mut reports = Reports::new();
    let mut summary = String::new();

    let rows = mse_table(checkpoints, corpus, pool)?;
    reports.insert("metrics_table.csv".into(), metrics_csv(&rows));
    summary.push_str("== per-frame MSE\n");
    summary.push_str(&metrics_csv(&rows));
    let floor = mse_floor(&corpus.config);
    let gap = between_style_gap(&corpus.config)?;
    let _ = writeln!(summary, "mse_floor {floor}\nbetween_style_gap {gap}");

    let models: Vec<_> = checkpoints.iter().map(Checkpoint::model).collect::<Result<_, _>>()?;

    let mut clusters = Vec::new();
    for m in models.iter().filter(|m| m.system().is_vq()) {
        clusters.push((m.system(), cluster_metrics(&codeword_assignments(m, corpus, Split::Test, pool)?)?));
    }
    if !clusters.is_empty() {
        let csv = cluster_report_csv(&clusters);
        let _ = writeln!(summary, "== codeword clustering (test split)\n{NMI_NOTE}");
        summary.push_str("system,total_indices,purity,nmi\n");
        for (id, c) in &clusters {
            let _ = writeln!(summary, "{id},{},{},{}", c.total_indices, c.purity, c.nmi);
        }
        reports.insert("cluster_report.csv".into(), csv);
    }

    let mut knn = String::from("system,points,nearest_disagree,k,any_disagree\n");
    let mut scatter = Vec::new();
    for m in models.iter().filter(|m| m.system().latent_scheme() != crate::trainer::LatentScheme::None) {
        let id = m.system();
        if id == SystemId::Sup {
            continue;
        }
        let latents = split_latents(m, corpus, Split::Test, pool)?;
        let pts: Vec<(Vec<f64>, usize)> = latents.iter().map(|(_, z, l)| (z.clone(), *l)).collect();
        let k = KNN_K.min(pts.len().saturating_sub(1)).max(1);
        let c = knn_disagreement(&pts, k)?;
        let _ = writeln!(knn, "{id},{},{},{k},{}", c.points, c.nearest_disagree, c.any_disagree);
        let proj = pca_project(&latents.iter().map(|(_, z, _)| z.clone()).collect::<Vec<_>>())?;
        for ((sid, z, label), pc) in latents.into_iter().zip(proj.coords) {
            scatter.push(ScatterRow { system: id, id: sid, label, z, pc });
        }
    }
    summary.push_str("== latent nearest-neighbour disagreement (test split)\n");
    summary.push_str(&knn);
    reports.insert("knn_report.csv".into(), knn);
    reports.insert("scatter.csv".into(), scatter_csv(&scatter));
    reports.insert("scatter.svg".into(), scatter_svg(&scatter));

    let natural = oracle_classify(&natural_stimuli(corpus), Some(&corpus.truth))?;
    let identity = ConfusionMatrix::identity(corpus.config.styles);
    reports.insert("confusion_NAT_natural.csv".into(), confusion_csv(&natural));
    let mut frob = String::from("system,scheme,to_identity,to_natural\n");
    let _ = writeln!(frob, "NAT,natural,{},0", confusion_frobenius(&natural, &identity)?);
    for m in &models {
        for &scheme in schemes {
            let conf = oracle_classify(&system_stimuli(m, corpus, scheme, pool)?, Some(&corpus.truth))?;
            let id = m.system();
            reports.insert(format!("confusion_{id}_{scheme}.csv"), confusion_csv(&conf));
            let _ = writeln!(
                frob,
                "{id},{scheme},{},{}",
                confusion_frobenius(&conf, &identity)?,
                confusion_frobenius(&conf, &natural)?
            );
        }
    }
    summary.push_str("== oracle-classifier confusion, Frobenius distances\n");
    summary.push_str(&frob);
    reports.insert("frobenius.csv".into(), frob);

    let curves: Vec<_> = checkpoints.iter().map(|c| (c.spec.system, c.history.clone())).collect();
    reports.insert("learning_curves.svg".into(), learning_curves_svg(&curves));
    Ok((reports, summary))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), Error> {
    let schemes = parse_schemes(&a.schemes)?;
    let mut entries = BTreeMap::new();
    let mut checkpoints = Vec::new();
    for id in SystemId::HEADLINE {
        let (entry, ck) = load_entry(&a.run, id)?;
        entries.insert(id, entry);
        checkpoints.push(ck);
    }
    if system_dir(&a.run, SystemId::Cvae).join("entry.json").exists() {
        let (entry, ck) = load_entry(&a.run, SystemId::Cvae)?;
        entries.insert(SystemId::Cvae, entry);
        checkpoints.push(ck);
    }
    let first = &entries[&SystemId::Bot];
    let corpus_path = first.corpus.clone();
    let corpus_text = read(&corpus_path)?;
    let corpus_sha = sha256_hex(corpus_text.as_bytes());
    if let Some((id, _)) = entries.iter().find(|(_, e)| e.corpus_sha256 != corpus_sha) {
        return Err(Error::Mismatch(format!("{id} was trained on a different corpus than {}", corpus_path.display())));
    }
    let corpus = StyleCorpus::from_json(&corpus_text)?;
    let (reports, summary) = build_reports(&checkpoints, &corpus, &schemes, &Pool::from_env()?)?;
    let dir = a.run.join("reports");
    for (name, body) in &reports {
        write(&dir.join(name), body)?;
    }
    let manifest = RunManifest {
        run: a.run.clone(),
        tool_version: TOOL_VERSION.into(),
        corpus: corpus_path,
        corpus_sha256: corpus_sha,
        systems: entries,
        reports: reports.iter().map(|(k, v)| (k.clone(), sha256_hex(v.as_bytes()))).collect(),
    };
    write(&a.run.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    emit(out, &summary)
}
