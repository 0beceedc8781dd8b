use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use jnet_core::datapipe::{scan_dir, Corpus, ValidationSet};
use jnet_core::degradation::{self, DegradationMeta};
use jnet_core::evalkit::{
    compare_methods, format_db, summary_table, write_reports, CompareOptions, EvalReport, Method, NamedImage,
};
use jnet_core::jnet::{super_resolve, Network};
use jnet_core::trainer::{load_checkpoint, load_checkpoint_for, Trainer, TrainState};
use jnet_core::{Error, ImageTensor, SeededRng};

use crate::config::{self, RunConfig};
use crate::ConfigArgs;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    /// Any failure while reading inputs is a data error, including I/O.
    fn input(e: Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::NonFiniteLoss { .. } => EXIT_RUNTIME,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

/// Resolves and validates the configuration before anything touches data.
fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = config::resolve(args.preset, args.config.as_deref(), &args.overrides).map_err(Failure::usage)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

fn scan(dir: &Path) -> Result<Corpus, Failure> {
    let corpus = scan_dir(dir).map_err(Failure::input)?;
    if !corpus.failures().is_empty() {
        let lines: Vec<String> = corpus.failures().iter().map(|f| format!("  {}: {}", f.path.display(), f.reason)).collect();
        return Err(Failure::data(format!("{} unreadable image(s) in {}:\n{}", lines.len(), dir.display(), lines.join("\n"))));
    }
    Ok(corpus)
}

fn sidecar_path(out: &Path, image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.join(format!("{stem}.meta"))
}

pub fn degrade(args: &ConfigArgs, input: &Path, output: &Path) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let corpus = scan(input)?;
    let scale = cfg.degradation.scale;
    let mut jobs = Vec::with_capacity(corpus.len());
    for (i, record) in corpus.records().iter().enumerate() {
        let (img, depth) = ImageTensor::load_with_depth(&record.path).map_err(Failure::input)?;
        let (h, w) = (img.height() / scale * scale, img.width() / scale * scale);
        let hr = img.crop(0, 0, h, w)?;
        let mut rng = SeededRng::derive(cfg.seed, &[i as u64]);
        let (lr, meta) = degradation::degrade(&hr, &cfg.degradation, &mut rng)?;
        jobs.push((record.file_name(), lr, depth, meta));
    }
    fs::create_dir_all(output).map_err(|e| Error::Io { path: output.to_path_buf(), source: e })?;
    let mut metas: Vec<DegradationMeta> = Vec::new();
    for (name, lr, depth, meta) in jobs {
        let path = output.join(&name);
        lr.save(&path, depth)?;
        let side = sidecar_path(output, &path);
        fs::write(&side, meta.to_sidecar(cfg.seed)).map_err(|e| Error::Io { path: side, source: e })?;
        metas.push(meta);
    }
    let lo = metas.iter().map(|m| m.sigma).fold(f64::INFINITY, f64::min);
    let hi = metas.iter().map(|m| m.sigma).fold(f64::NEG_INFINITY, f64::max);
    println!("degraded {} image(s) by x{scale} into {}; sigma range [{lo:.4}, {hi:.4}]", metas.len(), output.display());
    Ok(())
}

pub struct TrainArgs {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    pub stop_after: Option<u64>,
    pub quiet: bool,
}

pub fn train(args: &ConfigArgs, t: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args)?;
    if let Some(d) = t.train_dir {
        cfg.paths.train_dir = Some(d);
    }
    if let Some(d) = t.val_dir {
        cfg.paths.val_dir = Some(d);
    }
    if let Some(d) = t.out_dir {
        cfg.paths.out_dir = Some(d);
    }
    let train_dir = cfg.paths.train_dir.clone().ok_or_else(|| Failure::usage("no training directory (--train-dir or paths.train_dir)"))?;
    let out_dir = cfg.paths.out_dir.clone().ok_or_else(|| Failure::usage("no output directory (--out-dir or paths.out_dir)"))?;

    let mut corpus = scan(&train_dir)?;
    corpus.preload().map_err(Failure::input)?;
    let val = match &cfg.paths.val_dir {
        Some(dir) => {
            let vc = scan(dir)?;
            Some(ValidationSet::build(&vc, &cfg.degradation, cfg.seed, cfg.network.in_channels, cfg.train.val_crop, 1).map_err(Failure::input)?)
        }
        None => None,
    };

    fs::create_dir_all(&out_dir).map_err(|e| Error::Io { path: out_dir.clone(), source: e })?;
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::Io { path: cfg_path, source: e })?;

    let quiet = t.quiet;
    let mut trainer = Trainer::new(&corpus, &cfg.network, &cfg.train, &cfg.degradation)?.with_output_dir(&out_dir).on_record(move |r| {
        if !quiet {
            let val = r.val_psnr.map(|v| format!(" val_psnr={}", format_db(v))).unwrap_or_default();
            println!("iter {:>7}  lr {:.3e}  loss {:.6e}{val}", r.iter, r.lr, r.loss);
        }
    });
    if let Some(v) = &val {
        trainer = trainer.with_validation(v);
    }
    let outcome = trainer.run(t.resume, t.stop_after)?;
    if let Some(from) = outcome.resumed_from {
        println!("resumed from iteration {from}");
    }
    println!("stopped at iteration {} of {}; checkpoint in {}", outcome.state.iter, cfg.train.total_iters, out_dir.display());
    Ok(())
}

fn load_model(path: &Path, expected: Option<&RunConfig>) -> Result<(Network, TrainState), Failure> {
    let state = match expected {
        Some(cfg) => load_checkpoint_for(path, &cfg.network).map_err(Failure::input)?,
        None => load_checkpoint(path).map_err(Failure::input)?,
    };
    let net = Network::layout(&state.spec)?;
    Ok((net, state))
}

fn parse_simple_method(name: &str, cfg: &RunConfig) -> Option<Method> {
    match name {
        "bicubic" => Some(Method::Bicubic),
        "lucy-richardson" => Some(Method::LucyRichardson { sigma: cfg.lr_sigma(), iters: cfg.eval.lr_iters }),
        "passthrough" => Some(Method::Passthrough),
        _ => None,
    }
}

fn print_and_write(reports: &[EvalReport], report_dir: Option<&Path>) -> Result<(), Failure> {
    print!("{}", summary_table(reports));
    if let Some(dir) = report_dir {
        write_reports(dir, reports)?;
    }
    Ok(())
}

pub fn eval(args: &ConfigArgs, checkpoint: Option<&Path>, val_dir: Option<PathBuf>, method: &str, report_dir: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = load_config(args)?;
    if let Some(d) = val_dir {
        cfg.paths.val_dir = Some(d);
    }
    let method = match parse_simple_method(method, &cfg) {
        Some(m) => m,
        None if method == "model" => {
            let path = checkpoint.ok_or_else(|| Failure::usage("--method model needs --checkpoint"))?;
            let pinned = config::file_sets_section(args.config.as_deref(), "network")
                || args.overrides.iter().any(|o| o.starts_with("network."));
            let (network, state) = load_model(path, pinned.then_some(&cfg))?;
            if state.spec.scale != cfg.degradation.scale {
                return Err(Failure::usage(format!(
                    "checkpoint scale {} differs from degradation.scale {}",
                    state.spec.scale, cfg.degradation.scale
                )));
            }
            Method::Model { label: "model".into(), network, params: state.params }
        }
        None => return Err(Failure::usage(format!("unknown method `{method}`"))),
    };
    let val_dir = cfg.paths.val_dir.clone().ok_or_else(|| Failure::usage("no validation directory (--val-dir or paths.val_dir)"))?;
    let corpus = scan(&val_dir)?;
    let channels = corpus.records().iter().map(|r| r.channels).max().unwrap_or(3);
    let val = ValidationSet::build(&corpus, &cfg.degradation, cfg.seed, channels, cfg.eval.crop, 1).map_err(Failure::input)?;
    let lr: Vec<NamedImage> = val.pairs.iter().map(|p| NamedImage { name: p.name.clone(), image: p.lr.clone() }).collect();
    let hr: Vec<NamedImage> = val.pairs.iter().map(|p| NamedImage { name: p.name.clone(), image: p.hr.clone() }).collect();
    let opts = CompareOptions {
        crop_border: cfg.eval.crop_border,
        degradation: Some(toml::to_string(&cfg.degradation).expect("serializable")),
        seed: Some(cfg.seed),
    };
    let reports = compare_methods(&lr, &hr, &[method], &opts)?;
    println!("mean PSNR over {} image(s): {} dB", val.len(), format_db(reports[0].mean_psnr));
    print_and_write(&reports, report_dir)
}

pub fn infer(checkpoint: &Path, input: &Path, output: &Path) -> Result<(), Failure> {
    let (net, state) = load_model(checkpoint, None)?;
    let (img, depth) = ImageTensor::load_with_depth(input).map_err(Failure::input)?;
    let sr = super_resolve(&net, &state.params, &img)?;
    sr.save(output, depth)?;
    println!(
        "{}x{} -> {}x{} ({} channel(s)) written to {}",
        img.width(),
        img.height(),
        sr.width(),
        sr.height(),
        sr.channels(),
        output.display()
    );
    Ok(())
}

fn load_named(dir: &Path) -> Result<BTreeMap<String, ImageTensor>, Failure> {
    let corpus = scan(dir)?;
    let mut out = BTreeMap::new();
    for (i, r) in corpus.records().iter().enumerate() {
        out.insert(r.file_name(), corpus.load(i, r.channels).map_err(Failure::input)?);
    }
    Ok(out)
}

fn parse_method(spec: &str, cfg: &RunConfig) -> Result<Method, Failure> {
    if let Some(m) = parse_simple_method(spec, cfg) {
        return Ok(m);
    }
    let (head, target) = spec.split_once('=').ok_or_else(|| Failure::usage(format!("unknown method `{spec}`")))?;
    let (kind, label) = match head.split_once(':') {
        Some((k, l)) => (k, Some(l.to_string())),
        None => (head, None),
    };
    let target = PathBuf::from(target);
    let fallback = || target.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| kind.to_string());
    match kind {
        "model" => {
            let (network, state) = load_model(&target, None)?;
            Ok(Method::Model { label: label.unwrap_or_else(fallback), network, params: state.params })
        }
        "external" => {
            if !target.is_dir() {
                return Err(Failure::data(format!("external directory {} does not exist", target.display())));
            }
            Ok(Method::External { label: label.unwrap_or_else(fallback), dir: target })
        }
        _ => Err(Failure::usage(format!("unknown method `{spec}`"))),
    }
}

pub fn compare(args: &ConfigArgs, lr_dir: &Path, hr_dir: &Path, methods: &[String], report_dir: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let methods = methods.iter().map(|m| parse_method(m, &cfg)).collect::<Result<Vec<_>, _>>()?;
    let lr = load_named(lr_dir)?;
    let hr = load_named(hr_dir)?;
    let only_lr: Vec<&String> = lr.keys().filter(|k| !hr.contains_key(*k)).collect();
    let only_hr: Vec<&String> = hr.keys().filter(|k| !lr.contains_key(*k)).collect();
    if !only_lr.is_empty() || !only_hr.is_empty() {
        let mut msg = String::from("LR and HR sets do not match");
        for (what, names) in [("only in LR", only_lr), ("only in HR", only_hr)] {
            for n in names {
                msg.push_str(&format!("\n  {what}: {n}"));
            }
        }
        return Err(Failure::data(msg));
    }
    let lr_set: Vec<NamedImage> = lr.into_iter().map(|(name, image)| NamedImage { name, image }).collect();
    let hr_set: Vec<NamedImage> = hr.into_iter().map(|(name, image)| NamedImage { name, image }).collect();
    let opts = CompareOptions { crop_border: cfg.eval.crop_border, degradation: None, seed: None };
    let reports = compare_methods(&lr_set, &hr_set, &methods, &opts)?;
    print_and_write(&reports, report_dir)
}
