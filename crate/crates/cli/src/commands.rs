use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hebbseg::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use hebbseg::data::{
    gen_synthetic, load_dataset, load_mask, save_mask, split_regime, train_val_split, write_dataset,
    Mask, RegimeSpec, Sample, Split, SyntheticData, SyntheticTaskSpec, IMAGE_EXTENSIONS,
};
use hebbseg::finetune::{
    argmax_labels, finetune as run_finetune, linear_probe, write_history_csv, FinetuneOptions,
    SGDConfig,
};
use hebbseg::metrics::{evaluate, mean_ci, write_metrics_csv, BinaryMask, MetricsReport};
use hebbseg::oracles::{HpcaOracle, SwtaOracle};
use hebbseg::pretrain::{pretrain as run_pretrain, write_telemetry_csv, PretrainOptions};
use hebbseg::segnet::{Network, NetworkSpec};
use hebbseg::{HebbianConfig, Rule, TconvVariant, Tensor};
use image::{GrayImage, Luma};
use serde::Serialize;

use crate::config::{record_run, resolve, run_dir, usage};
use crate::{
    EvalArgs, FinetuneArgs, InspectArgs, NetArgs, OracleArgs, PretrainArgs, ProbeArgs, RuleArg,
    SgdArgs, SplitArg, SynthArgs, VariantArg,
};

const DEFAULT_WIDTHS: [usize; 2] = [8, 16];

/// `<dir>/<stem><suffix>` for an output path.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    run_dir(path).join(format!("{stem}{suffix}"))
}

fn spec_path(ckpt: &Path) -> PathBuf {
    sibling(ckpt, ".spec.json")
}

fn save_network(net: &Network, ckpt: &Path) -> Result<()> {
    fs::create_dir_all(run_dir(ckpt))?;
    save_checkpoint(net, ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    fs::write(spec_path(ckpt), serde_json::to_string_pretty(net.spec())? + "\n")?;
    Ok(())
}

fn network_spec(in_channels: usize, net: &NetArgs) -> NetworkSpec {
    let widths = net.widths.clone().unwrap_or_else(|| DEFAULT_WIDTHS.to_vec());
    NetworkSpec::new(in_channels, widths, 2)
}

/// A checkpoint with its recorded spec. `--widths`, when given, must agree.
fn load_network(ckpt: &Path, net: &NetArgs, in_channels: Option<usize>) -> Result<Network> {
    let spec = match fs::read_to_string(spec_path(ckpt)) {
        Ok(text) => {
            let spec: NetworkSpec = serde_json::from_str(&text)
                .with_context(|| format!("reading {}", spec_path(ckpt).display()))?;
            if let Some(w) = &net.widths {
                if *w != spec.widths {
                    bail!(
                        "checkpoint {} was trained with widths {:?}, --widths is {:?}",
                        ckpt.display(),
                        spec.widths,
                        w
                    );
                }
            }
            spec
        }
        Err(_) => network_spec(in_channels.unwrap_or(1), net),
    };
    if let Some(c) = in_channels {
        if c != spec.in_channels {
            bail!("checkpoint expects {} input channels, data has {c}", spec.in_channels);
        }
    }
    load_checkpoint(ckpt, &spec).with_context(|| format!("loading {}", ckpt.display()))
}

fn channels(samples: &[Sample]) -> usize {
    samples.first().map_or(1, |s| s.image.shape()[1])
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let args: SynthArgs = resolve(&args, args.config.as_deref())?;
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading spec {}", args.spec.display()))?;
    let mut spec: SyntheticTaskSpec =
        serde_json::from_str(&text).map_err(|e| usage(format!("bad spec {}: {e}", args.spec.display())))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let val_fraction = args.val_fraction.unwrap_or(0.2);
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(usage(format!("--val-fraction must be in [0, 1), got {val_fraction}")));
    }
    let data = gen_synthetic(&spec)?;
    let out = &args.out;
    fs::create_dir_all(out)?;
    match data {
        SyntheticData::Blobs { samples } => {
            let (_, val) = train_val_split(samples.len(), val_fraction, spec.seed);
            let mut splits = vec![Split::Train; samples.len()];
            for i in val {
                splits[i] = Split::Val;
            }
            write_dataset(out, &samples, &splits)?;
            println!("wrote {} image/mask pairs to {}", samples.len(), out.display());
        }
        SyntheticData::Clusters { samples, centroids, assignments } => {
            write_matrix(&out.join("samples.csv"), &samples)?;
            let truth = serde_json::json!({
                "centroids": rows(&centroids),
                "assignments": assignments,
            });
            fs::write(out.join("ground_truth.json"), serde_json::to_string_pretty(&truth)? + "\n")?;
            println!("wrote {} samples to {}", samples.shape()[0], out.display());
        }
        SyntheticData::Covariance { samples, eigenvalues, eigenvectors } => {
            write_matrix(&out.join("samples.csv"), &samples)?;
            let truth = serde_json::json!({
                "eigenvalues": eigenvalues,
                "eigenvectors": rows(&eigenvectors),
            });
            fs::write(out.join("ground_truth.json"), serde_json::to_string_pretty(&truth)? + "\n")?;
            println!("wrote {} samples to {}", samples.shape()[0], out.display());
        }
    }
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    record_run(out, "synth", &serde_json::json!({ "spec": spec, "val_fraction": val_fraction }))
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}

fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows(t) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PretrainRun<'a> {
    data: &'a Path,
    out: &'a Path,
    hebbian: HebbianConfig,
    options: PretrainOptions,
    network: &'a NetworkSpec,
    size: Option<(usize, usize)>,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let args: PretrainArgs = resolve(&args, args.config.as_deref())?;
    let rule = args.rule.unwrap_or(RuleArg::Swta);
    let epochs = args.epochs.unwrap_or(20);
    if epochs == 0 {
        return Err(usage("--epochs must be >= 1"));
    }
    if rule == RuleArg::Hpca && args.temp.is_some() {
        eprintln!("warning: --temp is ignored by the hpca rule");
    }
    let hebbian = HebbianConfig {
        rule: match rule {
            RuleArg::Swta => Rule::Swta,
            RuleArg::Hpca => Rule::Hpca,
        },
        tconv_variant: match args.variant.unwrap_or(VariantArg::Tsa) {
            VariantArg::S => TconvVariant::S,
            VariantArg::Tsa => TconvVariant::Tsa,
        },
        eta: args.eta.unwrap_or(match rule {
            RuleArg::Swta => 0.05,
            RuleArg::Hpca => 0.005,
        }),
        temperature: args.temp.unwrap_or(0.1),
    };
    let seed = args.seed.unwrap_or(0);
    let options = PretrainOptions {
        epochs,
        batch_size: args.batch_size.unwrap_or(4),
        seed,
        decay: None,
    };
    let (train, _) = load_dataset(&args.data, args.net.size, seed)?;
    let spec = network_spec(channels(&train), &args.net);
    let images: Vec<Tensor> = train.into_iter().map(|s| s.image).collect();
    let mut net = Network::init(spec, seed)?;
    let telemetry = run_pretrain(&mut net, &images, &hebbian, &options)?;
    save_network(&net, &args.out)?;
    write_telemetry_csv(&telemetry, sibling(&args.out, "_telemetry.csv"))?;
    record_run(
        &run_dir(&args.out),
        "pretrain",
        &PretrainRun {
            data: &args.data,
            out: &args.out,
            hebbian,
            options,
            network: net.spec(),
            size: args.net.size,
        },
    )?;
    println!("pretrained {} layers on {} images for {epochs} epochs -> {}", net.layers().len() - 1, images.len(), args.out.display());
    Ok(())
}

fn sgd_config(sgd: &SgdArgs) -> SGDConfig {
    let d = SGDConfig::default();
    SGDConfig {
        lr0: sgd.lr0.unwrap_or(d.lr0),
        decay_every: sgd.decay_every.unwrap_or(d.decay_every),
        decay_factor: sgd.decay.unwrap_or(d.decay_factor),
        epochs: sgd.epochs.unwrap_or(d.epochs),
        momentum: sgd.momentum.unwrap_or(d.momentum),
        batch_size: sgd.batch_size.unwrap_or(d.batch_size),
    }
}

/// Labelled regime subset of the training pool, and the validation set.
fn supervised_sets(data: &Path, net: &NetArgs, regime: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(regime > 0.0 && regime <= 100.0) {
        return Err(usage(format!("--regime must be in (0, 100], got {regime}")));
    }
    let (train, val) = load_dataset(data, net.size, seed)?;
    let pool: Vec<Sample> = train.into_iter().filter(|s| s.mask.is_some()).collect();
    if pool.is_empty() {
        bail!("{} has no labelled training images", data.display());
    }
    if val.is_empty() || val.iter().any(|s| s.mask.is_none()) {
        bail!("{} needs a labelled validation split", data.display());
    }
    let split = split_regime(pool.len(), &RegimeSpec { r: regime, seed })?;
    let labeled = split.labeled.iter().map(|&i| pool[i].clone()).collect();
    Ok((labeled, val))
}

fn initial_network(init: &str, net: &NetArgs, in_channels: usize, seed: u64) -> Result<Network> {
    if init == "random" {
        Ok(Network::init(network_spec(in_channels, net), seed)?)
    } else {
        load_network(Path::new(init), net, Some(in_channels))
    }
}

#[derive(Serialize)]
struct SupervisedRun<'a> {
    data: &'a Path,
    out: &'a Path,
    init: &'a str,
    regime: f64,
    labeled: Vec<&'a str>,
    seed: u64,
    augment: bool,
    sgd: SGDConfig,
    network: &'a NetworkSpec,
    size: Option<(usize, usize)>,
    best_epoch: Option<usize>,
    best_val_dc: f64,
}

pub fn finetune(args: FinetuneArgs) -> Result<()> {
    let args: FinetuneArgs = resolve(&args, args.config.as_deref())?;
    let seed = args.seed.unwrap_or(0);
    let regime = args.regime.unwrap_or(100.0);
    let init = args.init.clone().unwrap_or_else(|| "random".into());
    let cfg = sgd_config(&args.sgd);
    cfg.validate()?;
    let (labeled, val) = supervised_sets(&args.data, &args.net, regime, seed)?;
    let net = initial_network(&init, &args.net, channels(&labeled), seed)?;
    let augment = !args.no_augment;
    let result = run_finetune(net, &labeled, &val, &cfg, &FinetuneOptions { augment, seed })?;
    save_network(&result.net, &args.out)?;
    write_history_csv(&result.history, sibling(&args.out, "_history.csv"))?;
    record_run(
        &run_dir(&args.out),
        "finetune",
        &SupervisedRun {
            data: &args.data,
            out: &args.out,
            init: &init,
            regime,
            labeled: labeled.iter().map(|s| s.id.as_str()).collect(),
            seed,
            augment,
            sgd: cfg,
            network: result.net.spec(),
            size: args.net.size,
            best_epoch: Some(result.best_epoch),
            best_val_dc: result.best_val_dc,
        },
    )?;
    println!(
        "best validation DC {:.4} at epoch {} ({} labelled images) -> {}",
        result.best_val_dc,
        result.best_epoch,
        labeled.len(),
        args.out.display()
    );
    Ok(())
}

pub fn probe(args: ProbeArgs) -> Result<()> {
    let args: ProbeArgs = resolve(&args, args.config.as_deref())?;
    let seed = args.seed.unwrap_or(0);
    let regime = args.regime.unwrap_or(100.0);
    let init = args.init.clone().unwrap_or_else(|| "random".into());
    let cfg = sgd_config(&args.sgd);
    cfg.validate()?;
    let (labeled, val) = supervised_sets(&args.data, &args.net, regime, seed)?;
    let backbone = initial_network(&init, &args.net, channels(&labeled), seed)?;
    let result = linear_probe(&backbone, &labeled, &val, &cfg, seed)?;
    let mut net = backbone;
    net.set_head(result.head)?;
    save_network(&net, &args.out)?;
    write_history_csv(&result.history, sibling(&args.out, "_history.csv"))?;
    record_run(
        &run_dir(&args.out),
        "probe",
        &SupervisedRun {
            data: &args.data,
            out: &args.out,
            init: &init,
            regime,
            labeled: labeled.iter().map(|s| s.id.as_str()).collect(),
            seed,
            augment: false,
            sgd: cfg,
            network: net.spec(),
            size: args.net.size,
            best_epoch: None,
            best_val_dc: result.val_dc,
        },
    )?;
    println!("probe validation DC {:.4} -> {}", result.val_dc, args.out.display());
    Ok(())
}

/// Mask files of a directory by id: `<id>_mask.<ext>` when present,
/// otherwise `<id>.<ext>` itself.
fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut plain = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match stem.strip_suffix("_mask") {
            Some(id) => masks.insert(id.to_string(), path),
            None => plain.insert(stem, path),
        };
    }
    for (id, path) in plain {
        masks.entry(id).or_insert(path);
    }
    if masks.is_empty() {
        bail!("no mask images in {}", dir.display());
    }
    Ok(masks)
}

fn report_row(id: &str, pred: &Mask, target: &Mask) -> Result<(String, MetricsReport)> {
    let r = evaluate(&BinaryMask::of_class(pred, 1), &BinaryMask::of_class(target, 1))
        .with_context(|| format!("image `{id}`"))?;
    Ok((id.to_string(), r))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let args: EvalArgs = resolve(&args, args.config.as_deref())?;
    let mut rows = Vec::new();
    match (&args.pred, &args.ckpt) {
        (Some(pred_dir), None) => {
            let targets = mask_files(&args.target)?;
            let preds = mask_files(pred_dir)?;
            for (id, tpath) in &targets {
                let ppath = preds
                    .get(id)
                    .with_context(|| format!("no prediction for `{id}` in {}", pred_dir.display()))?;
                rows.push(report_row(id, &load_mask(ppath)?, &load_mask(tpath)?)?);
            }
        }
        (None, Some(ckpt)) => {
            let seed = args.seed.unwrap_or(0);
            let (train, val) = load_dataset(&args.target, args.net.size, seed)?;
            let samples: Vec<Sample> = match args.split.unwrap_or(SplitArg::Val) {
                SplitArg::Train => train,
                SplitArg::Val => val,
                SplitArg::All => train.into_iter().chain(val).collect(),
            };
            let samples: Vec<Sample> = samples.into_iter().filter(|s| s.mask.is_some()).collect();
            if samples.is_empty() {
                bail!("no labelled images to evaluate in {}", args.target.display());
            }
            let net = load_network(ckpt, &args.net, Some(channels(&samples)))?;
            if let Some(dir) = &args.save_pred {
                fs::create_dir_all(dir)?;
            }
            for s in &samples {
                let pred = argmax_labels(&net.predict(&s.image)?)?.remove(0);
                if let Some(dir) = &args.save_pred {
                    save_mask(&pred, dir.join(format!("{}.png", s.id)))?;
                }
                rows.push(report_row(&s.id, &pred, s.mask.as_ref().expect("filtered"))?);
            }
        }
        _ => return Err(usage("give exactly one of --pred or --ckpt")),
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_metrics_csv(&rows, &args.out)?;
    let sentinels = rows.iter().filter(|(_, r)| r.sentinel).count();
    println!("{} images", rows.len());
    for (name, f) in [
        ("dc", (|r: &MetricsReport| r.dc) as fn(&MetricsReport) -> f64),
        ("ji", |r| r.ji),
        ("hd95", |r| r.hd95),
        ("asd", |r| r.asd),
    ] {
        let v: Vec<f64> = rows.iter().map(|(_, r)| f(r)).collect();
        let (m, hw) = mean_ci(&v, 0.90);
        println!("{name:>5} {m:.4} ± {hw:.4}");
    }
    if sentinels > 0 {
        println!("{sentinels} image(s) with exactly one empty mask use the diagonal as distance");
    }
    record_run(&run_dir(&args.out), "eval", &args)
}

#[derive(Serialize)]
struct OracleReport {
    hpca: Vec<hebbseg::oracles::HpcaOutcome>,
    swta: Vec<hebbseg::oracles::SwtaOutcome>,
}

pub fn verify_oracles(args: OracleArgs) -> Result<()> {
    let args: OracleArgs = resolve(&args, args.config.as_deref())?;
    let seeds = args.seeds.unwrap_or(5);
    let first = args.seed.unwrap_or(0);
    let min_pass = args.min_pass.unwrap_or(4);
    if seeds == 0 || min_pass > seeds {
        return Err(usage(format!("need 1 <= --min-pass <= --seeds, got {min_pass} of {seeds}")));
    }
    let hpca_oracle = HpcaOracle::default();
    let swta_oracle = SwtaOracle::default();
    let hpca = (first..first + seeds).map(|s| hpca_oracle.run(s)).collect::<hebbseg::Result<Vec<_>>>()?;
    let swta = (first..first + seeds).map(|s| swta_oracle.run(s)).collect::<hebbseg::Result<Vec<_>>>()?;
    let hpca_pass = hpca.iter().filter(|o| o.passed).count() as u64;
    let swta_pass = swta.iter().filter(|o| o.passed).count() as u64;
    let worst_cos = hpca.iter().flat_map(|o| o.abs_cos.iter().copied()).fold(f64::INFINITY, f64::min);
    let worst_err = swta.iter().flat_map(|o| o.errors.iter().copied()).fold(0.0, f64::max);
    let verdict = |n: u64| if n >= min_pass { "PASS" } else { "FAIL" };
    println!(
        "{} hpca-principal-components: {hpca_pass}/{seeds} seeds with every |cos| >= {} (worst {worst_cos:.4})",
        verdict(hpca_pass),
        hpca_oracle.min_abs_cos
    );
    println!(
        "{} swta-cluster-centroids: {swta_pass}/{seeds} seeds with every error <= {} sigma (worst {worst_err:.3})",
        verdict(swta_pass),
        swta_oracle.max_error
    );
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, serde_json::to_string_pretty(&OracleReport { hpca, swta })? + "\n")?;
    }
    if hpca_pass < min_pass || swta_pass < min_pass {
        bail!("oracle check failed");
    }
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let args: InspectArgs = resolve(&args, args.config.as_deref())?;
    let zoom = args.zoom.unwrap_or(8);
    if zoom == 0 {
        return Err(usage("--zoom must be >= 1"));
    }
    let records = read_checkpoint(&args.ckpt).with_context(|| format!("reading {}", args.ckpt.display()))?;
    fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("stats.csv"))?;
    w.write_record(["layer", "shape", "mean", "std", "min", "max", "frobenius"])?;
    for r in &records {
        let d = r.weights.data();
        let n = d.len() as f64;
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = d.iter().copied().fold(f32::INFINITY, f32::min);
        let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let shape: Vec<String> = r.weights.shape().iter().map(usize::to_string).collect();
        w.write_record([
            r.name.clone(),
            shape.join("x"),
            format!("{mean:.6}"),
            format!("{std:.6}"),
            format!("{min:.6}"),
            format!("{max:.6}"),
            format!("{:.6}", r.weights.frobenius_norm()),
        ])?;
    }
    w.flush()?;
    let first = records.first().context("checkpoint has no layers")?;
    let path = args.out.join(format!("{}_kernels.pgm", first.name));
    kernel_tiles(&first.weights, zoom)
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote stats for {} layers and {}", records.len(), path.display());
    Ok(())
}

/// One tile per (output, input) kernel pair: outputs across, inputs down,
/// a one-pixel gap between tiles. Grey levels span the layer's value range.
fn kernel_tiles(w: &Tensor, zoom: usize) -> GrayImage {
    let s = w.shape();
    let (cout, cin, kh, kw) = (s[0], s[1], s[2], s[3]);
    let lo = w.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = w.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (tw, th) = (kw * zoom + 1, kh * zoom + 1);
    GrayImage::from_fn((cout * tw + 1) as u32, (cin * th + 1) as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if x % tw == 0 || y % th == 0 {
            return Luma([0]);
        }
        let (o, i) = (x / tw, y / th);
        let (kx, ky) = ((x % tw - 1) / zoom, (y % th - 1) / zoom);
        let v = w.data()[((o * cin + i) * kh + ky) * kw + kx];
        Luma([((v - lo) / span * 255.0).round() as u8])
    })
}
