use std::fs;
use std::path::Path;

use priorattn::attention::heatmap_export;
use priorattn::data_io::{
    generate_synthetic, load_dataset, read_artifacts, read_head, read_manifest, write_artifacts,
    write_attention_cache, AttentionCache, CachedMap, Dataset, SyntheticSpec, TrainedArtifacts,
};
use priorattn::episodes::{
    attention_for, base_seed, derive_seed, evaluate_cells, format_grid, run_grid, train_base,
    with_threads, AttentionStore, BaseShots, GridSpec,
};
use priorattn::train::{gradcheck, GradcheckConfig, TrainConfig, MAX_ADAPT_STEPS};
use priorattn::{Error, Result};

use crate::args::{AttendArgs, BaseTrainArgs, EvalArgs, GradcheckArgs, SynthArgs};

/// Seed stream for label shuffling, kept apart from task sampling.
const SHUFFLE_STREAM: u64 = 0x1abe1;

/// Outcome of a subcommand that ran to completion.
pub enum Status {
    Ok,
    /// Completed, but the check it performed failed.
    CheckFailed,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn check_temp(temp: f64) -> Result<()> {
    if temp.is_finite() && temp > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("--temp must be positive, got {temp}")))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("--tau must be positive, got {tau}")))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load(manifest: &Path) -> Result<Dataset> {
    load_dataset(&read_manifest(manifest)?)
}

pub fn synth(args: &SynthArgs) -> Result<Status> {
    let spec = SyntheticSpec {
        base_classes: args.base_classes,
        val_classes: args.val_classes,
        novel_classes: args.novel_classes,
        examples_per_class: args.examples,
        w: args.width,
        h: args.height,
        d: args.dim,
        signal_fraction: args.signal_fraction,
        separation: args.separation,
        noise: args.noise,
        clutter: args.clutter,
        clutter_directions: args.clutter_directions,
        prior_contrast: args.prior_contrast,
        prior_classes: args.prior_classes,
        seed: args.seed,
    };
    spec.validate()?;
    create_dir(&args.out)?;
    let (manifest, set) = generate_synthetic(&spec, &args.out)?;
    println!(
        "wrote {} classes ({} examples each) and a {}-class prior head",
        set.dataset.classes.len(),
        spec.examples_per_class,
        set.head.classes()
    );
    println!("manifest {}", manifest.display());
    Ok(Status::Ok)
}

pub fn attend(args: &AttendArgs) -> Result<Status> {
    let temp = args.temp.resolve();
    check_temp(temp)?;
    let dataset = load(&args.manifest)?;
    let head = read_head(&args.head)?;
    let store = with_threads(args.threads, || AttentionStore::compute(&dataset, &head, temp))??;
    let mut maps = Vec::new();
    for (class, per_class) in store.classes().iter().enumerate() {
        for (example, map) in per_class.iter().enumerate() {
            maps.push(CachedMap {
                class,
                example,
                map: map.clone(),
            });
        }
    }
    let cache = AttentionCache {
        w: dataset.w,
        h: dataset.h,
        maps,
    };
    write_attention_cache(&args.out, &cache)?;
    println!("wrote {} maps (T = {temp}) to {}", cache.maps.len(), args.out.display());
    if let Some(dir) = &args.heatmaps {
        create_dir(dir)?;
        for m in &cache.maps {
            heatmap_export(&m.map, &dir.join(format!("{:04}_{:04}.pgm", m.class, m.example)))?;
        }
        println!("wrote {} heatmaps to {}", cache.maps.len(), dir.display());
    }
    Ok(Status::Ok)
}

pub fn base_train_cmd(args: &BaseTrainArgs) -> Result<Status> {
    check_tau(args.tau)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        max_steps: args.steps,
        batch_size: args.batch_size,
        optimizer: args.optimizer.into(),
        seed: base_seed(args.seed),
        ..TrainConfig::base()
    };
    config.validate()?;
    let dataset = load(&args.manifest)?;
    let (adapter, head, losses) =
        with_threads(args.threads, || train_base(&dataset, args.k, args.tau, &config))??;
    let artifacts = TrainedArtifacts {
        k: args.k,
        adapter,
        head,
        config,
        losses,
    };
    write_artifacts(&args.out, &artifacts)?;
    match (artifacts.losses.first(), artifacts.losses.last()) {
        (Some(first), Some(last)) => println!(
            "k = {}: {} steps, loss {first:.6} -> {last:.6}, tau {:.6}",
            args.k,
            artifacts.losses.len(),
            artifacts.head.tau()
        ),
        _ => println!("k = {}: no training steps, identity adapter", args.k),
    }
    println!("artifacts {}", args.out.display());
    Ok(Status::Ok)
}

fn grid_spec(args: &EvalArgs) -> Result<GridSpec> {
    if args.tasks < 2 {
        return Err(invalid("--tasks must be at least 2"));
    }
    if args.ways < 2 {
        return Err(invalid("--ways must be at least 2"));
    }
    if args.queries == 0 {
        return Err(invalid("--queries must be positive"));
    }
    if args.kprime.is_empty() || args.kprime.contains(&0) {
        return Err(invalid("--kprime values must be positive"));
    }
    if args.steps > MAX_ADAPT_STEPS {
        return Err(invalid(format!(
            "--steps is capped at {MAX_ADAPT_STEPS} for adaptation, got {}",
            args.steps
        )));
    }
    let uses_attention = args.attention.iter().any(|s| s.enabled());
    if uses_attention && args.head.is_none() {
        return Err(invalid("--head is required when --attention includes on"));
    }
    if args.artifacts.is_some() && args.tau.is_some() {
        return Err(invalid("--tau cannot override the scale stored in --artifacts"));
    }
    if let Some(tau) = args.tau {
        check_tau(tau)?;
    }
    check_temp(args.temp.resolve())?;
    let adapt = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        max_steps: args.steps,
        optimizer: args.optimizer.into(),
        ..TrainConfig::novel()
    };
    adapt.validate()?;
    let base = TrainConfig {
        learning_rate: args.base_lr,
        momentum: args.base_momentum,
        max_steps: args.base_steps,
        batch_size: args.batch_size,
        ..TrainConfig::base()
    };
    base.validate()?;
    let mut attention: Vec<bool> = args.attention.iter().map(|s| s.enabled()).collect();
    let mut adaptation: Vec<bool> = args.adapt.iter().map(|s| s.enabled()).collect();
    attention.dedup();
    adaptation.dedup();
    Ok(GridSpec {
        ks: if args.k.is_empty() {
            vec![BaseShots::Count(0)]
        } else {
            args.k.clone()
        },
        shots: args.kprime.clone(),
        attention,
        adaptation,
        ways: args.ways,
        queries: args.queries,
        tasks: args.tasks,
        split: args.split,
        tau: args.tau.unwrap_or(priorattn::classify::TAU_INIT),
        base,
        adapt,
        seed: args.seed,
        threads: args.threads,
    })
}

pub fn eval(args: &EvalArgs) -> Result<Status> {
    let spec = grid_spec(args)?;
    let mut dataset = load(&args.manifest)?;
    if args.shuffle_labels {
        dataset.shuffle_labels(derive_seed(args.seed, SHUFFLE_STREAM));
    }
    let maps = match &args.head {
        Some(path) if spec.attention.contains(&true) => {
            let head = read_head(path)?;
            attention_for(&dataset, &head, args.temp.resolve(), &spec)?
        }
        _ => None,
    };
    let rows = match &args.artifacts {
        Some(path) => {
            let artifacts = read_artifacts(path)?;
            if artifacts.adapter.channels() != dataset.d {
                return Err(Error::Shape(format!(
                    "artifacts have {} channels, features have {}",
                    artifacts.adapter.channels(),
                    dataset.d
                )));
            }
            evaluate_cells(
                &dataset,
                maps.as_ref(),
                artifacts.k,
                &artifacts.adapter,
                artifacts.head.tau(),
                &spec,
            )?
        }
        None => run_grid(&dataset, maps.as_ref(), &spec)?,
    };
    print!("{}", format_grid(&rows));
    if let Some(out) = &args.out {
        let mut text = String::new();
        for row in &rows {
            let line = serde_json::to_string(row)
                .map_err(|e| Error::InvalidInput(format!("serializing results: {e}")))?;
            text.push_str(&line);
            text.push('\n');
        }
        fs::write(out, text).map_err(|source| Error::Io {
            path: out.clone(),
            source,
        })?;
    }
    Ok(Status::Ok)
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<Status> {
    if args.instances == 0 {
        return Err(invalid("--instances must be positive"));
    }
    if args.locations.iter().any(|&r| {
        let s = (r as f64).sqrt().round() as usize;
        r == 0 || s * s != r
    }) {
        return Err(invalid("--locations values must be positive perfect squares"));
    }
    if args.dim.contains(&0) || args.classes.iter().any(|&c| c < 2) {
        return Err(invalid("--dim must be positive and --classes at least 2"));
    }
    if !(args.tolerance > 0.0) {
        return Err(invalid("--tolerance must be positive"));
    }
    let config = GradcheckConfig {
        locations: args.locations.clone(),
        channels: args.dim.clone(),
        classes: args.classes.clone(),
        instances: args.instances,
        tolerance: args.tolerance,
        perturb: args.perturb,
        seed: args.seed,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&config)?;
    println!("instances {}", report.instances);
    println!("components checked {}", report.components_checked);
    println!("max relative error {:.3e}", report.max_rel_error);
    println!("failures {}", report.failures);
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::InvalidInput(format!("serializing report: {e}")))?;
        fs::write(out, text + "\n").map_err(|source| Error::Io {
            path: out.clone(),
            source,
        })?;
    }
    Ok(if report.passed {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}
