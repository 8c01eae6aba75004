//! Command-line front end: extraction, pair building, training, enhancement,
//! evaluation and figures.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use melfix::audio::read_wav;
use melfix::codec::{image_to_mel, mel_to_image, read_image_with_meta, write_image_with_meta};
use melfix::container::{mel_from_container, mel_to_container, Container};
use melfix::dsp::{extract, MelSpectrogram};
use melfix::metrics::{metric_row, plot_triptych, report_csv, MetricRow};
use melfix::tensor::gradcheck::{standard_suite, CHAIN_TOLERANCE};
use melfix::training::{
    enhance, load_as_image, load_checkpoint, oversmooth, save_checkpoint, train_with, write_loss_csv, write_manifest,
    Checkpoint, PairDataset,
};

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Parser, Debug)]
#[command(name = "melfix", version, about = "GAN postfilter for over-smoothed mel-spectrograms")]
struct Cli {
    /// key=value config file applied before `--set`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// WAV files to mel feature files, 16-bit PNGs and sidecars.
    Extract {
        in_dir: PathBuf,
        out_dir: PathBuf,
        /// paper48k or desk16k.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Time-blur every spectrogram (PNG or WAV) in a directory.
    Degrade {
        in_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        sigma_t: Option<f64>,
    },
    /// Pair same-named PNGs into a training manifest.
    Pack {
        natural_dir: PathBuf,
        input_dir: PathBuf,
        out_manifest: PathBuf,
    },
    /// Train on a manifest; writes the checkpoint and a loss CSV.
    Train {
        manifest: PathBuf,
        /// key=value training config.
        train_config: PathBuf,
        out_ckpt: PathBuf,
        /// Loss log path (default: checkpoint path with `.losses.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the generator on one PNG or a directory of PNGs.
    Enhance {
        ckpt: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Per-file LSD and GV ratio of `a` against `b`.
    Eval {
        a_dir: PathBuf,
        b_dir: PathBuf,
        report: PathBuf,
    },
    /// Three-panel figure: original, synthesized, enhanced.
    Plot {
        original: PathBuf,
        synthesized: PathBuf,
        enhanced: PathBuf,
        out: PathBuf,
    },
    /// Finite-difference check of every autodiff op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MELFIX_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("MELFIX_THREADS={v}: expected a positive integer")))?;
        if n == 0 {
            return Err(CliError::Usage("MELFIX_THREADS must be >= 1".into()));
        }
        // a second call only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Files in `dir` with one of `exts`, sorted. Errors if none.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{}: not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(dir.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && exts.iter().any(|x| has_ext(p, x)))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("{}: no input files", dir.display())));
    }
    Ok(files)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", p.display())))
    }
}

fn require_parent(p: &Path) -> Result<(), CliError> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            Err(CliError::Usage(format!("{}: directory does not exist", d.display())))
        }
        _ => Ok(()),
    }
}

/// Apply `job` to each file in parallel, print successes in input order and
/// report every failure. Fails if any file failed.
fn for_each_file<F>(files: &[PathBuf], job: F) -> Result<(), CliError>
where
    F: Fn(&Path) -> Result<String, CliError> + Sync,
{
    let results: Vec<_> = files.par_iter().map(|p| (p, job(p))).collect();
    let mut failed = 0;
    for (p, r) in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} files failed", files.len())));
    }
    Ok(())
}

/// PNG (with sidecar) or `.mel` feature file.
fn read_mel(path: &Path) -> Result<MelSpectrogram, CliError> {
    if has_ext(path, "mel") {
        let c = Container::load(path).map_err(|e| runtime(path.display(), e))?;
        mel_from_container(&c).map_err(|e| runtime(path.display(), e))
    } else {
        let (img, meta) = read_image_with_meta(path).map_err(|e| runtime(path.display(), e))?;
        image_to_mel(&img, &meta, &stem(path)).map_err(|e| runtime(path.display(), e))
    }
}

fn cmd_extract(cfg: &RunConfig, in_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    let files = list_files(in_dir, &["wav"])?;
    ensure_dir(out_dir)?;
    let s = cfg.image_settings();
    for_each_file(&files, |p| {
        let audio = read_wav(p).map_err(|e| runtime("read", e))?;
        let id = stem(p);
        let mel = extract(&audio, s.profile, &id).map_err(|e| runtime("extract", e))?;
        mel_to_container(&mel)
            .save(out_dir.join(format!("{id}.mel")))
            .map_err(|e| runtime("write features", e))?;
        let (img, meta) = mel_to_image(&mel, s.min_db, s.max_db, s.pad_multiple).map_err(|e| runtime("encode", e))?;
        let png = out_dir.join(format!("{id}.png"));
        write_image_with_meta(&img, &meta, &png).map_err(|e| runtime("write image", e))?;
        Ok(format!(
            "{id}: {} mels x {} frames -> {}",
            mel.n_mels(),
            mel.n_frames(),
            png.display()
        ))
    })
}

fn cmd_degrade(cfg: &RunConfig, in_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    let files = list_files(in_dir, &["png", "wav"])?;
    ensure_dir(out_dir)?;
    let s = cfg.image_settings();
    for_each_file(&files, |p| {
        let (img, meta, mel) = load_as_image(p, &s).map_err(|e| runtime("load", e))?;
        let id = stem(p);
        let mel = match mel {
            Some(m) => m,
            None => image_to_mel(&img, &meta, &id).map_err(|e| runtime("decode", e))?,
        };
        let smooth = oversmooth(&mel, cfg.sigma_t).map_err(|e| runtime("degrade", e))?;
        let (out, out_meta) =
            mel_to_image(&smooth, meta.min_db, meta.max_db, s.pad_multiple).map_err(|e| runtime("encode", e))?;
        let png = out_dir.join(format!("{id}.png"));
        write_image_with_meta(&out, &out_meta, &png).map_err(|e| runtime("write image", e))?;
        Ok(format!("{id}: sigma_t {} -> {}", cfg.sigma_t, png.display()))
    })
}

fn cmd_pack(natural_dir: &Path, input_dir: &Path, out: &Path) -> Result<(), CliError> {
    let naturals = list_files(natural_dir, &["png"])?;
    let inputs = list_files(input_dir, &["png"])?;
    require_parent(out)?;
    let ids = |v: &[PathBuf]| v.iter().map(|p| stem(p)).collect::<Vec<_>>();
    let (nat_ids, in_ids) = (ids(&naturals), ids(&inputs));
    if let Some(id) = nat_ids
        .iter()
        .find(|i| !in_ids.contains(i))
        .or_else(|| in_ids.iter().find(|i| !nat_ids.contains(i)))
    {
        return Err(CliError::Runtime(format!("UnmatchedPair: no counterpart for '{id}'")));
    }
    let mut entries = Vec::new();
    for (y, x) in naturals.iter().zip(&inputs) {
        let (yi, _) = read_image_with_meta(y).map_err(|e| runtime(y.display(), e))?;
        let (xi, _) = read_image_with_meta(x).map_err(|e| runtime(x.display(), e))?;
        if (xi.width(), xi.height()) != (yi.width(), yi.height()) {
            return Err(CliError::Runtime(format!(
                "{}: {}x{} but {} is {}x{}",
                x.display(),
                xi.height(),
                xi.width(),
                y.display(),
                yi.height(),
                yi.width()
            )));
        }
        let abs = |p: &Path| fs::canonicalize(p).map_err(|e| runtime(p.display(), e));
        entries.push((abs(x)?, abs(y)?));
    }
    write_manifest(&entries, out).map_err(|e| runtime(out.display(), e))?;
    println!("{} pairs -> {}", entries.len(), out.display());
    Ok(())
}

fn cmd_train(cli: &Cli, manifest: &Path, train_config: &Path, out: &Path, log: Option<&Path>) -> Result<(), CliError> {
    require_file(manifest)?;
    require_file(train_config)?;
    require_parent(out)?;
    let mut cfg = RunConfig::default();
    if let Some(extra) = &cli.config {
        let text = fs::read_to_string(extra).map_err(|e| CliError::Usage(format!("{}: {e}", extra.display())))?;
        cfg.apply_text(&text)?;
    }
    let text = fs::read_to_string(train_config).map_err(|e| CliError::Usage(format!("{}: {e}", train_config.display())))?;
    cfg.apply_text(&text)?;
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set {o}: expected key=value")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("losses.csv"));
    require_parent(&log_path)?;

    let ds = PairDataset::from_manifest(manifest).map_err(|e| runtime(manifest.display(), e))?;
    let steps = cfg.train.steps;
    let every = (steps / 20).max(1);
    eprintln!("training on {} pairs for {steps} steps", ds.len());
    let (ck, records) = train_with::<f32>(&ds, &cfg.train, |r| {
        if r.step % every == 0 || r.step + 1 == steps {
            eprintln!(
                "step {:>6}  loss_d {:.4}  loss_g_adv {:.4}  loss_g_l1 {:.4}",
                r.step, r.loss_d, r.loss_g_adv, r.loss_g_l1
            );
        }
    })
    .map_err(|e| runtime("train", e))?;
    save_checkpoint(&ck, out).map_err(|e| runtime(out.display(), e))?;
    write_loss_csv(&records, &log_path).map_err(|e| runtime(log_path.display(), e))?;
    println!("checkpoint -> {}; losses -> {}", out.display(), log_path.display());
    Ok(())
}

fn cmd_enhance(ckpt: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    require_file(ckpt)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        ensure_dir(output)?;
        list_files(input, &["png"])?
            .into_iter()
            .map(|p| {
                let o = output.join(p.file_name().expect("listed file"));
                (p, o)
            })
            .collect()
    } else {
        require_file(input)?;
        require_parent(output)?;
        vec![(input.to_path_buf(), output.to_path_buf())]
    };
    let ck: Checkpoint<f32> = load_checkpoint(ckpt).map_err(|e| runtime(ckpt.display(), e))?;
    let inputs: Vec<PathBuf> = jobs.iter().map(|(i, _)| i.clone()).collect();
    for_each_file(&inputs, |p| {
        let out = &jobs.iter().find(|(i, _)| i == p).expect("job").1;
        let (img, meta) = read_image_with_meta(p).map_err(|e| runtime("read", e))?;
        let (enh, meta) = enhance(&ck, &img, &meta).map_err(|e| runtime("enhance", e))?;
        write_image_with_meta(&enh, &meta, out).map_err(|e| runtime("write", e))?;
        Ok(format!("{} -> {}", p.display(), out.display()))
    })
}

fn cmd_eval(a_dir: &Path, b_dir: &Path, report: &Path) -> Result<(), CliError> {
    let a_files = list_files(a_dir, &["png", "mel"])?;
    list_files(b_dir, &["png", "mel"])?;
    require_parent(report)?;
    let rows: Vec<Result<MetricRow, CliError>> = a_files
        .par_iter()
        .map(|a| {
            let b = b_dir.join(a.file_name().expect("listed file"));
            if !b.is_file() {
                return Err(CliError::Runtime(format!("UnmatchedPair: {} has no counterpart", a.display())));
            }
            let (ma, mb) = (read_mel(a)?, read_mel(&b)?);
            metric_row(&stem(a), &ma, &mb).map_err(|e| runtime(a.display(), e))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    fs::write(report, report_csv(&rows)).map_err(|e| runtime(report.display(), e))?;
    let n = rows.len() as f64;
    println!(
        "{} files: mean lsd {:.4} dB, mean gv ratio {:.4} -> {}",
        rows.len(),
        rows.iter().map(|r| r.lsd).sum::<f64>() / n,
        rows.iter().map(|r| r.gv_ratio_mean).sum::<f64>() / n,
        report.display()
    );
    Ok(())
}

fn cmd_plot(original: &Path, synthesized: &Path, enhanced: &Path, out: &Path) -> Result<(), CliError> {
    for p in [original, synthesized, enhanced] {
        require_file(p)?;
    }
    require_parent(out)?;
    let (o, s, e) = (read_mel(original)?, read_mel(synthesized)?, read_mel(enhanced)?);
    plot_triptych(&o, &s, &e, out).map_err(|e| runtime(out.display(), e))?;
    println!("figure -> {}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), CliError> {
    let results = standard_suite(seed).map_err(|e| runtime("gradcheck", e))?;
    let mut ok = true;
    for r in &results {
        let pass = r.max_rel_error < CHAIN_TOLERANCE;
        ok &= pass;
        println!(
            "{:<28} max rel err {:.3e}  {}",
            r.name,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check above {CHAIN_TOLERANCE:e}")))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    let needs_cfg = !matches!(cli.command, Command::Train { .. } | Command::Gradcheck { .. });
    let mut cfg = if needs_cfg {
        RunConfig::load(cli.config.as_deref(), &cli.overrides)?
    } else {
        RunConfig::default()
    };
    match &cli.command {
        Command::Extract { in_dir, out_dir, profile } => {
            if let Some(p) = profile {
                cfg.set("profile", p)?;
            }
            cmd_extract(&cfg, in_dir, out_dir)
        }
        Command::Degrade { in_dir, out_dir, sigma_t } => {
            if let Some(s) = sigma_t {
                cfg.set("sigma_t", &s.to_string())?;
                cfg.validate()?;
            }
            cmd_degrade(&cfg, in_dir, out_dir)
        }
        Command::Pack {
            natural_dir,
            input_dir,
            out_manifest,
        } => cmd_pack(natural_dir, input_dir, out_manifest),
        Command::Train {
            manifest,
            train_config,
            out_ckpt,
            log,
        } => cmd_train(cli, manifest, train_config, out_ckpt, log.as_deref()),
        Command::Enhance { ckpt, input, output } => cmd_enhance(ckpt, input, output),
        Command::Eval { a_dir, b_dir, report } => cmd_eval(a_dir, b_dir, report),
        Command::Plot {
            original,
            synthesized,
            enhanced,
            out,
        } => cmd_plot(original, synthesized, enhanced, out),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
