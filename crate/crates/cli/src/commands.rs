use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use fspool::checks;
use fspool::data::{self, MnistSetConfig, MnistSplits, Split};
use fspool::exec::Execution;
use fspool::models::{Checkpoint, DecoderKind, ForwardOptions, SetModel};
use fspool::probe;
use fspool::svg;
use fspool::train::{self, EvalMetrics, Regime, Task};
use fspool::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{self, Mode, RunConfig};
use crate::{usage, EvalArgs, Failure, GradcheckArgs, PlotArgs, ProbeArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn apply_flags(c: &mut RunConfig, a: &TrainArgs) {
    let ae = &mut c.autoencoder;
    let cl = &mut c.classifier;
    if a.classify {
        c.mode = Mode::Classifier;
    }
    if let Some(v) = a.task {
        ae.task = v;
    }
    if let Some(v) = a.model {
        ae.model = v;
    }
    if let Some(v) = a.loss {
        ae.loss = v;
    }
    if let Some(v) = a.n_points {
        ae.n_points = v;
    }
    if let Some(v) = a.pool {
        ae.pool = v;
        cl.pool = v;
    }
    if let Some(v) = a.sigma {
        ae.sigma = v;
        cl.sigma = v;
    }
    if let Some(v) = a.knots {
        ae.knots = v;
        cl.knots = v;
    }
    if let Some(v) = a.w_init {
        ae.w_init = v;
        cl.w_init = v;
    }
    if let Some(v) = a.sort {
        ae.sort = v;
        cl.sort = v;
    }
    if let Some(v) = a.tau {
        ae.temperature.start = v;
    }
    if a.tau_decay {
        ae.temperature.decay = true;
    }
    if let Some(v) = a.tau_floor {
        ae.temperature.floor = v;
    }
    if let Some(v) = a.steps {
        ae.steps = v;
    }
    if let Some(v) = a.epochs {
        ae.epochs = v;
        cl.epochs = v;
    }
    if let Some(v) = a.batch {
        ae.batch = v;
        cl.batch = v;
    }
    if let Some(v) = a.lr {
        ae.adam.lr = v;
        cl.adam.lr = v;
    }
    if let Some(v) = a.seed {
        ae.seed = v;
        cl.seed = v;
    }
    if a.mask_feature {
        ae.mask_feature = true;
    }
    if let Some(v) = a.perm_subset {
        ae.perm_subset = Some(v);
    }
    if a.zero_latent {
        ae.zero_latent = true;
    }
    if let Some(v) = a.eval_samples {
        ae.eval_samples = v;
    }
    if a.mnist_hungarian {
        ae.mnist_hungarian = true;
    }
    if let Some(v) = a.regime {
        cl.regime = v;
    }
    if let Some(v) = &a.pretrained {
        c.pretrained = Some(v.clone());
    }
    if let Some(v) = &a.data_dir {
        c.mnist.dir = Some(v.clone());
    }
    if let Some(v) = a.train_size {
        c.mnist.train_size = v;
    }
    if let Some(v) = a.test_size {
        c.mnist.test_size = v;
    }
}

fn validate(c: &RunConfig) -> Result<(), Failure> {
    match c.mode {
        Mode::Autoencoder => c.autoencoder.validate().map_err(usage)?,
        Mode::Classifier => {
            c.classifier.validate().map_err(usage)?;
            match (c.classifier.regime, &c.pretrained) {
                (Regime::RandomInit, Some(_)) => {
                    return Err(usage(anyhow!(
                        "--pretrained has no effect with the random-init regime"
                    )))
                }
                (Regime::Frozen | Regime::Unfrozen, None) => {
                    return Err(usage(anyhow!(
                        "the {:?} regime needs --pretrained",
                        c.classifier.regime
                    )))
                }
                _ => {}
            }
        }
    }
    if c.is_mnist() && (c.mnist.train_size == 0 || c.mnist.test_size == 0) {
        return Err(usage(anyhow!("train and test sizes must be positive")));
    }
    Ok(())
}

fn load_mnist(dir: &Path, train: usize, test: usize, seed: u64) -> anyhow::Result<MnistSplits> {
    let (images, _) = data::mnist_paths(dir, Split::Train);
    if !images.exists() {
        bail!(
            "MNIST files not found in {}; run scripts/fetch_mnist.py or point MNIST_DIR / --data-dir at IDX files",
            dir.display()
        );
    }
    let splits = data::load_mnist_sets(
        dir,
        Some(train),
        Some(test),
        &MnistSetConfig::default(),
        seed,
    )?;
    log::info!(
        "loaded {} train / {} test sets (mean test size {:.1})",
        splits.train.len(),
        splits.test.len(),
        splits.test.mean_size()
    );
    Ok(splits)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<(SetModel, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = SetModel::from_checkpoint(&ckpt)?;
    Ok((model, ckpt))
}

/// Forward options recorded at the end of training, if any.
fn recorded_forward(ckpt: &Checkpoint) -> ForwardOptions {
    ckpt.config
        .run
        .get("forward")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

fn print_table(eval: &EvalMetrics) -> String {
    let mut s = String::from("metric,raw,hundredths\n");
    for (name, raw, h) in eval.table() {
        s.push_str(&format!("{name},{raw},{h}\n"));
    }
    s
}

pub fn train(a: TrainArgs, exec: Execution) -> CmdResult {
    let file = a
        .config
        .as_deref()
        .map(config::read_config_file)
        .transpose()
        .map_err(usage)?;
    let mut cfg = config::merge(file, a.task, a.model).map_err(usage)?;
    apply_flags(&mut cfg, &a);
    validate(&cfg)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("resolved-config.json"), &cfg)?;

    let seed = match cfg.mode {
        Mode::Autoencoder => cfg.autoencoder.seed,
        Mode::Classifier => cfg.classifier.seed,
    };
    let mnist = if cfg.is_mnist() {
        Some(load_mnist(
            &cfg.mnist.resolved_dir(),
            cfg.mnist.train_size,
            cfg.mnist.test_size,
            seed,
        )?)
    } else {
        None
    };

    let (model, metrics, run) = match cfg.mode {
        Mode::Autoencoder => {
            let (model, metrics) =
                train::train_autoencoder(&cfg.autoencoder, mnist.as_ref(), exec)?;
            let total = metrics.train_loss.len();
            (
                model,
                metrics,
                train::autoencoder_run_info(&cfg.autoencoder, total),
            )
        }
        Mode::Classifier => {
            let pretrained = match &cfg.pretrained {
                Some(p) => Some(load_model(p)?.0),
                None => None,
            };
            let data = mnist.as_ref().expect("classifier runs load MNIST");
            let (model, metrics) =
                train::train_classifier(&cfg.classifier, pretrained.as_ref(), data, exec)?;
            let run = json!({
                "kind": "classifier",
                "train": cfg.classifier,
                "forward": ForwardOptions { sort: cfg.classifier.sort, ..ForwardOptions::default() },
            });
            (model, metrics, run)
        }
    };
    model.checkpoint(run).save(&a.out.join("checkpoint.json"))?;
    metrics.write_csv(&a.out.join("metrics.csv"))?;
    if let Some(eval) = &metrics.eval {
        print!("{}", print_table(eval));
    }
    if let Some(acc) = metrics.accuracy {
        println!("accuracy,{acc}");
    }
    log::info!("finished in {:.1}s", metrics.wall_clock_s);
    Ok(())
}

/// The task recorded in the checkpoint, else guessed from the model shape.
fn infer_task(model: &SetModel, ckpt: &Checkpoint, explicit: Option<Task>) -> Task {
    let recorded = ckpt
        .config
        .run
        .pointer("/train/task")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    explicit.or(recorded).unwrap_or(
        if model.config.d_in == 2
            && model.config.classifier_hidden.is_none()
            && model.config.n_max != data::MNIST_N_MAX
        {
            Task::Polygon
        } else {
            Task::Mnist
        },
    )
}

pub fn eval(a: EvalArgs, exec: Execution) -> CmdResult {
    let (model, ckpt) = load_model(&a.checkpoint).map_err(usage)?;
    let opts = recorded_forward(&ckpt);
    let task = infer_task(&model, &ckpt, a.task);
    let table = match task {
        Task::Polygon => {
            let n = a.n_points.unwrap_or(model.config.n_max);
            let eval = train::evaluate_polygon(&model, n, a.samples, a.seed, &opts, exec)
                .map_err(usage)?;
            print_table(&eval)
        }
        Task::Mnist => {
            let dir = a
                .data_dir
                .clone()
                .or_else(|| std::env::var_os("MNIST_DIR").map(Into::into))
                .unwrap_or_else(|| "data/mnist".into());
            let splits = load_mnist(&dir, 1, a.test_size, a.seed)?;
            if model.config.classifier_hidden.is_some() {
                let acc = train::accuracy(&model, &splits.test, a.sigma, a.seed, &opts, exec)?;
                format!("metric,value\naccuracy,{acc}\n")
            } else {
                let set_cfg = MnistSetConfig {
                    sigma: a.sigma,
                    mask_feature: model.config.d_in == 3,
                    ..MnistSetConfig::default()
                };
                let eval = train::evaluate_mnist(
                    &model,
                    &splits.test,
                    &set_cfg,
                    a.hungarian,
                    &opts,
                    a.seed,
                    exec,
                )?;
                print_table(&eval)
            }
        }
    };
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn probe(a: ProbeArgs, exec: Execution) -> CmdResult {
    let (model, ckpt) = load_model(&a.checkpoint).map_err(usage)?;
    let n = a.n_points.unwrap_or(model.config.n_max);
    let profile =
        probe::sweep_rotation(&model, n, a.steps, &recorded_forward(&ckpt), exec).map_err(usage)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("probe.csv"), profile.to_csv())?;
    fs::write(
        a.out.join("probe.svg"),
        profile.to_svg(&format!("rotation sweep, n = {n}")),
    )?;
    println!(
        "max_d_l {:.6e} median_d_l {:.6e} ratio {:.3} jump {:.6e} collapsed {}",
        profile.max_d_l, profile.median_d_l, profile.ratio, profile.jump, profile.collapsed
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut names: Vec<&str> = Vec::new();
    for s in &a.suite {
        if s == "all" {
            names.extend(checks::SUITES);
        } else if let Some(&known) = checks::SUITES.iter().find(|&&k| k == s) {
            names.push(known);
        } else {
            return Err(usage(anyhow!(
                "unknown suite {s:?}; expected one of {} or all",
                checks::SUITES.join(", ")
            )));
        }
    }
    names.dedup();
    let mut failed = 0;
    println!("suite,case,max_rel_error,threshold,status");
    for name in names {
        for r in checks::run_suite(name)? {
            let status = if r.passed() { "pass" } else { "FAIL" };
            failed += usize::from(!r.passed());
            println!(
                "{},{},{:.3e},{:.0e},{status}",
                r.suite, r.case, r.max_rel_error, r.threshold
            );
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{failed} gradient check(s) above threshold"
        )));
    }
    Ok(())
}

fn points(t: &Tensor, keep: impl Fn(usize) -> bool) -> Vec<(f64, f64)> {
    (0..t.cols())
        .filter(|&j| keep(j))
        .map(|j| (t.at(0, j), t.at(1, j)))
        .collect()
}

pub fn plot(a: PlotArgs) -> CmdResult {
    let (model, ckpt) = load_model(&a.checkpoint).map_err(usage)?;
    if model.config.decoder == DecoderKind::None {
        return Err(usage(anyhow!(
            "classifier checkpoints have no reconstruction to plot"
        )));
    }
    let opts = recorded_forward(&ckpt);
    let (input, target, title) = match infer_task(&model, &ckpt, None) {
        Task::Polygon => {
            let n = a.n_points.unwrap_or(model.config.n_max);
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let x = data::random_polygon(n, &mut rng);
            (x.clone(), x, format!("polygon, n = {n}"))
        }
        Task::Mnist => {
            let dir = a
                .data_dir
                .clone()
                .or_else(|| std::env::var_os("MNIST_DIR").map(Into::into))
                .unwrap_or_else(|| "data/mnist".into());
            let splits = load_mnist(&dir, 1, a.index + 1, a.seed)?;
            if a.index >= splits.test.len() {
                return Err(usage(anyhow!(
                    "test split has only {} sets",
                    splits.test.len()
                )));
            }
            let set_cfg = MnistSetConfig {
                sigma: a.sigma,
                mask_feature: model.config.d_in == 3,
                ..MnistSetConfig::default()
            };
            let clean = splits.test.batch(&[a.index], &set_cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let noisy = data::add_noise(&clean, a.sigma, &mut rng)?;
            let pick = |b: &data::SetBatch| {
                if b.mask_feature {
                    b.x[0].clone()
                } else {
                    b.valid(0)
                }
            };
            (
                pick(&noisy),
                pick(&clean),
                format!("MNIST test set {} (label {})", a.index, clean.labels[0]),
            )
        }
    };
    let output = model.reconstruct(&input, &opts)?;
    let masked = model.config.d_in == 3;
    let panel = |t: &Tensor| points(t, |j| !masked || t.at(2, j) > 0.5);
    let svg = svg::scatter_panels(
        &title,
        &[
            ("input", panel(&input)),
            ("target", panel(&target)),
            ("output", panel(&output)),
        ],
    );
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
