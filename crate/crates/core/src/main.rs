use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stutterkit::config::KeyValues;
use stutterkit::error::{Error, Result};
use stutterkit::features::io::write_atomic;
use stutterkit::features::manifest::labels_from_ints;
use stutterkit::features::{
    fbank, read_manifest, synth_dataset, write_features, write_manifest, ClipRecord, SyntheticSpec, Waveform,
};
use stutterkit::mining::check::{oracle_check, CHECK_LENGTHS};
use stutterkit::model::{load_checkpoint, save_checkpoint};
use stutterkit::pipeline::diagnostics::{composite_grad_check, grad_check_suite, GRAD_TOLERANCE};
use stutterkit::pipeline::infer::{read_predictions, write_predictions, DEFAULT_THRESHOLD};
use stutterkit::pipeline::train::write_log;
use stutterkit::pipeline::{
    ablate, evaluate, infer, load_manifest_clips, train, AblationGrid, TrainConfig,
};
use stutterkit::NUM_CLASSES;

#[derive(Parser)]
#[command(name = "stutterkit", version, about = "Stuttering event detection with fine-grained contrastive training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Plain-text `key = value` file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn key_values(&self) -> Result<KeyValues> {
        match &self.config {
            Some(p) => KeyValues::load(p),
            None => Ok(KeyValues::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature dataset.
    Synth {
        /// Dataset spec; same as --config.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute fbank features for every .wav file in a directory.
    Extract {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// CSV lines `id,p,b,r,wr,i` with 0/1 labels; unlisted clips get all zeros.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes model.ckpt, train_log.csv and config.txt.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score clips and write a prediction manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class F1 of predictions against a labelled manifest.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for report.csv and report.md.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every cell of a grid.
    Ablate {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// `components` or `cascade`; otherwise the grid comes from `grid.*` config keys.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Mining utilities.
    Mine {
        /// Compare fast erosion/dilation with the naive scan.
        #[arg(long)]
        check: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { spec, out_dir, common } => {
            let kv = match spec.or(common.config.clone()) {
                Some(p) => KeyValues::load(&p)?,
                None => KeyValues::default(),
            };
            let mut s = SyntheticSpec::from_key_values(&kv)?;
            if let Some(seed) = common.seed {
                s.seed = seed;
            }
            let records = synth_dataset(&s, &out_dir)?;
            println!("wrote {} clips to {}", records.len(), out_dir.display());
        }
        Command::Extract { wav_dir, out_dir, labels, common } => {
            common.key_values()?.reject_unknown(&[])?;
            extract(&wav_dir, &out_dir, labels.as_deref())?;
        }
        Command::Train { manifest, out_dir, common } => return train_cmd(&manifest, &out_dir, &common),
        Command::Infer { checkpoint, manifest, out, common } => {
            let thresholds = thresholds(&common.key_values()?)?;
            let model = load_checkpoint(&checkpoint)?;
            let outcome = infer(&model, &read_manifest(&manifest)?, &thresholds)?;
            write_predictions(&out, &outcome.predictions)?;
            println!(
                "wrote {} predictions to {} ({} skipped)",
                outcome.predictions.len(),
                out.display(),
                outcome.skipped.len()
            );
            for (id, reason) in &outcome.skipped {
                println!("skipped {}: {}", id, reason);
            }
        }
        Command::Eval { predictions, manifest, out_dir, common } => {
            common.key_values()?.reject_unknown(&[])?;
            let report = evaluate(&read_predictions(&predictions)?, &read_manifest(&manifest)?)?;
            let md = report.to_markdown("Model");
            print!("{}", md);
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
                write_atomic(&dir.join("report.md"), md.as_bytes())?;
            }
        }
        Command::Ablate { train_manifest, test_manifest, out_dir, preset, common } => {
            let (grid_kv, base_kv) = common.key_values()?.split_prefix("grid.");
            let mut base = TrainConfig::from_key_values(&base_kv)?;
            if let Some(seed) = common.seed {
                base.seed = seed;
            }
            let grid = match preset.as_deref() {
                None => AblationGrid::from_key_values(&grid_kv)?,
                Some("components") => AblationGrid::components(),
                Some("cascade") => AblationGrid::cascade(),
                Some(other) => return Err(Error::InvalidArgument(format!("unknown preset {:?}", other))),
            };
            let train_clips = load_manifest_clips(&train_manifest)?;
            let test_clips = load_manifest_clips(&test_manifest)?;
            if base_kv.get("input_dim").is_none() {
                base.model.encoder.input_dim = train_clips[0].features.dim();
            }
            let table = ablate(&base, &grid, &train_clips, &test_clips)?;
            fs::create_dir_all(&out_dir)?;
            write_atomic(&out_dir.join("ablation.csv"), table.to_csv().as_bytes())?;
            write_atomic(&out_dir.join("ablation.md"), table.to_markdown().as_bytes())?;
            print!("{}", table.to_markdown());
        }
        Command::GradCheck { common } => {
            common.key_values()?.reject_unknown(&[])?;
            let seed = common.seed.unwrap_or(0);
            let entries = grad_check_suite(seed)?;
            let mut ok = true;
            for e in &entries {
                ok &= e.passed();
                println!("{} {} rel_error={:.3e}", if e.passed() { "PASS" } else { "FAIL" }, e.name, e.rel_error);
            }
            if !composite_grad_check(seed)?.1 {
                println!("note: a confusing set was empty for this seed; the matching contrast half was not exercised");
            }
            println!("{} (tolerance {:e})", if ok { "PASS" } else { "FAIL" }, GRAD_TOLERANCE);
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Mine { check, common } => {
            if !check {
                return Err(Error::InvalidArgument("mine requires --check".into()));
            }
            common.key_values()?.reject_unknown(&[])?;
            let r = oracle_check(&CHECK_LENGTHS, 16, 10_000, 1000, common.seed.unwrap_or(0));
            println!(
                "exhaustive={} random={} mismatches={}",
                r.exhaustive_cases, r.random_cases, r.mismatches
            );
            if let Some((b, l)) = &r.first_mismatch {
                let bits: String = b.iter().map(|&x| if x { '1' } else { '0' }).collect();
                println!("first mismatch: l={} b={}", l, bits);
            }
            println!("{}", if r.passed() { "PASS" } else { "FAIL" });
            if !r.passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn thresholds(kv: &KeyValues) -> Result<[f64; NUM_CLASSES]> {
    kv.reject_unknown(&["thresholds"])?;
    Ok(match kv.list::<f64>("thresholds")? {
        None => [DEFAULT_THRESHOLD; NUM_CLASSES],
        Some(v) if v.len() == 1 => [v[0]; NUM_CLASSES],
        Some(v) if v.len() == NUM_CLASSES => v.try_into().expect("length checked"),
        Some(v) => return Err(Error::Config(format!("thresholds has {} values", v.len()))),
    })
}

fn train_cmd(manifest: &Path, out_dir: &Path, common: &Common) -> Result<ExitCode> {
    let kv = common.key_values()?;
    let clips = load_manifest_clips(manifest)?;
    let mut config = TrainConfig::default();
    if kv.get("input_dim").is_none() {
        config.model.encoder.input_dim = clips[0].features.dim();
    }
    config.apply(&kv)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    fs::create_dir_all(out_dir)?;
    let run = train(&config, &clips)?;
    save_checkpoint(&out_dir.join("model.ckpt"), &run.model)?;
    write_log(&out_dir.join("train_log.csv"), &run.log)?;
    write_atomic(&out_dir.join("config.txt"), config.to_key_values().to_text().as_bytes())?;
    if let Some(e) = run.failure {
        eprintln!("error: {}; saved last finite checkpoint", e);
        return Ok(ExitCode::from(3));
    }
    println!("trained {} steps; wrote {}", run.log.len(), out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn read_label_csv(path: &Path) -> Result<Vec<(String, [bool; NUM_CLASSES])>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e)))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            let mut parts = l.split(',').map(str::trim);
            let id = parts.next().unwrap_or_default().to_string();
            let ints = parts
                .map(|s| s.parse::<u8>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Manifest(format!("{} line {}: {}", path.display(), n + 1, e)))?;
            Ok((id, labels_from_ints(&ints)?))
        })
        .collect()
}

fn extract(wav_dir: &Path, out_dir: &Path, labels: Option<&Path>) -> Result<()> {
    let known = match labels {
        Some(p) => read_label_csv(p)?,
        None => Vec::new(),
    };
    let mut wavs: Vec<PathBuf> = fs::read_dir(wav_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::InvalidArgument(format!("no .wav files in {}", wav_dir.display())));
    }
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut records = Vec::with_capacity(wavs.len());
    for wav in &wavs {
        let id = wav.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let features = fbank(&Waveform::read_wav(wav)?)?;
        let path = feat_dir.join(format!("{}.fgc", id));
        write_features(&path, &features)?;
        let labels = known
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, l)| *l)
            .unwrap_or([false; NUM_CLASSES]);
        records.push(ClipRecord {
            id,
            feature_path: path,
            labels,
            frame_truth: None,
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    println!("extracted {} clips to {}", records.len(), out_dir.display());
    Ok(())
}
