use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ssnn_core::checkpoint;
use ssnn_core::eventdata::{self, Sample};
use ssnn_core::network::{build_network, Model, StageTelemetry};
use ssnn_core::temporal::{average_timestep, overhead_count};
use ssnn_core::training::{self, metrics_header, EpochRecord, FrameDataset};
use ssnn_core::{DType, Scalar};

use crate::config::RunConfig;
use crate::{io, CliError};

const CHANNELS: usize = 2;

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Generates the moving-bars set and writes it with a stratified split.
fn synthesize(cfg: &RunConfig, root: &Path) -> Result<(), CliError> {
    let s = cfg.synth()?;
    let samples = eventdata::synth_moving_bars(&s).map_err(|e| CliError::Config(e.to_string()))?;
    let labels: Vec<usize> = samples.iter().map(|x| x.label).collect();
    let (tr, te) = eventdata::split(&labels, cfg.test_fraction()?, s.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    fs::create_dir_all(root).map_err(|e| io(root, e))?;
    eventdata::write_dataset(root, &pick(&tr), &pick(&te))?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.data_dir().unwrap_or_else(|| cfg.out_dir().join("data"));
    synthesize(cfg, &root)?;
    println!("dataset={}", root.display());
    println!("manifest_sha256={}", eventdata::manifest_digest(&root)?);
    Ok(())
}

struct Data<F> {
    train: FrameDataset<F>,
    test: FrameDataset<F>,
    hw: (usize, usize),
}

fn input_hw(samples: &[Sample], cfg: &RunConfig) -> Result<(usize, usize), CliError> {
    let first = samples
        .first()
        .ok_or_else(|| CliError::Io("empty split".into()))?;
    let sensor = (first.stream.height as usize, first.stream.width as usize);
    Ok(cfg.input_size()?.unwrap_or(sensor))
}

fn load_data<F: Scalar>(cfg: &RunConfig, root: &Path, frames: usize, need_train: bool) -> Result<Data<F>, CliError> {
    let test_samples = eventdata::load_split(root, "test")?;
    let hw = input_hw(&test_samples, cfg)?;
    let window = cfg.frame_ms()?;
    let test = eventdata::to_frame_dataset::<F>(&test_samples, window, frames, Some(hw))?;
    let train = if need_train {
        eventdata::to_frame_dataset::<F>(&eventdata::load_split(root, "train")?, window, frames, Some(hw))?
    } else {
        FrameDataset {
            clips: Vec::new(),
            labels: Vec::new(),
        }
    };
    Ok(Data { train, test, hw })
}

fn first_timesteps(cfg: &RunConfig) -> Result<usize, CliError> {
    cfg.get("stage_timesteps")
        .split(',')
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| CliError::Config(format!("`stage_timesteps`: cannot parse `{}`", cfg.get("stage_timesteps"))))
}

pub fn train(mut cfg: RunConfig, synth: bool) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let data_dir = match cfg.data_dir() {
        Some(d) => d,
        None if synth => {
            let d = out.join("data");
            cfg.set("data_dir", &d.to_string_lossy())?;
            d
        }
        None => return Err(CliError::Config("no `data_dir` given; pass --synth to generate one".into())),
    };
    // Validate everything that can be checked without data first.
    cfg.network(CHANNELS, (16, 16))?;
    cfg.dtype()?;
    fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    if synth && !data_dir.join(eventdata::MANIFEST).exists() {
        synthesize(&cfg, &data_dir)?;
    }
    match cfg.dtype()? {
        DType::F32 => train_typed::<f32>(&cfg, &out, &data_dir),
        DType::F64 => train_typed::<f64>(&cfg, &out, &data_dir),
    }
}

fn train_typed<F: Scalar>(cfg: &RunConfig, out: &Path, data_dir: &Path) -> Result<(), CliError> {
    let t1 = first_timesteps(cfg)?;
    let data = load_data::<F>(cfg, data_dir, t1, true)?;
    let spec = cfg.network(CHANNELS, data.hw)?;
    let plan = spec.plan()?;
    let tcfg = cfg.train(plan.len())?;
    println!("average_timestep={:?}", average_timestep(&plan)?);
    println!("w_add={}", overhead_count(&plan));

    let seed: u64 = tcfg.seed;
    let mut model = build_network::<F>(&spec, seed)?;
    println!(
        "parameters={} transformer_parameters={} early_classifier_parameters={}",
        model.parameter_count(),
        model.transformer_parameter_count(),
        model.early_classifier_parameter_count()
    );

    write(&out.join("config.txt"), cfg.echo())?;
    let digest = eventdata::manifest_digest(data_dir)?;
    write(
        &out.join("provenance.txt"),
        format!(
            "data_dir = {}\nmanifest_sha256 = {digest}\ntrain_samples = {}\ntest_samples = {}\n",
            data_dir.display(),
            data.train.len(),
            data.test.len()
        ),
    )?;
    checkpoint::save(&model, &out.join("checkpoint_init.ssnn"))?;

    let heads = plan.len();
    let mut metrics = format!("{}\n", metrics_header(heads));
    let mut timing = String::from("epoch,wall_seconds\n");
    write(&out.join("metrics.csv"), &metrics)?;
    let mut best = f64::NEG_INFINITY;
    let best_path = out.join("checkpoint_best.ssnn");
    let history = training::fit(&mut model, &data.train, &data.test, &tcfg, |rec: &EpochRecord, m: &Model<F>| {
        let row = rec.csv_row();
        println!("{row}");
        metrics.push_str(&row);
        metrics.push('\n');
        let _ = writeln!(timing, "{},{:.3}", rec.train.epoch, rec.train.wall_seconds);
        fs::write(out.join("metrics.csv"), &metrics).map_err(|e| ssnn_core::Error::Dataset(e.to_string()))?;
        fs::write(out.join("timing.csv"), &timing).map_err(|e| ssnn_core::Error::Dataset(e.to_string()))?;
        let acc = rec.test.final_accuracy();
        if acc > best {
            best = acc;
            checkpoint::save(m, &best_path)?;
        }
        Ok(())
    })?;
    checkpoint::save(&model, &out.join("checkpoint_final.ssnn"))?;
    if history.is_empty() {
        checkpoint::save(&model, &best_path)?;
    }
    if let Some(last) = history.last() {
        println!("final_test_acc={:?}", last.test.final_accuracy());
        println!("best_test_acc={best:?}");
    }
    Ok(())
}

fn load_model<F: Scalar>(cfg: &RunConfig, ckpt: &Path) -> Result<(Model<F>, Data<F>), CliError> {
    let data_dir = cfg
        .data_dir()
        .ok_or_else(|| CliError::Config("`data_dir` is required".into()))?;
    let data = load_data::<F>(cfg, &data_dir, first_timesteps(cfg)?, false)?;
    let spec = cfg.network(CHANNELS, data.hw)?;
    let mut model = build_network::<F>(&spec, 0)?;
    checkpoint::load(&mut model, ckpt)?;
    Ok((model, data))
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, rates: Option<&Path>) -> Result<(), CliError> {
    match cfg.dtype()? {
        DType::F32 => eval_typed::<f32>(cfg, ckpt, rates),
        DType::F64 => eval_typed::<f64>(cfg, ckpt, rates),
    }
}

fn eval_typed<F: Scalar>(cfg: &RunConfig, ckpt: &Path, rates: Option<&Path>) -> Result<(), CliError> {
    let (model, data) = load_model::<F>(cfg, ckpt)?;
    let batch: usize = cfg.get("batch").parse().unwrap_or(64);
    let m = training::evaluate(&model, &data.test, batch)?;
    println!("final_test_acc={:?}", m.final_accuracy());
    for (i, a) in m.accuracies[..m.accuracies.len() - 1].iter().enumerate() {
        println!("ec{}_test_acc={a:?}", i + 1);
    }
    let t = model.plan().timesteps()[0];
    let mut tele = vec![StageTelemetry::default(); model.plan().len()];
    let idx: Vec<usize> = (0..data.test.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.test.batch(chunk, t)?;
        let (_, st) = model.infer_with_telemetry(&x)?;
        for (a, b) in tele.iter_mut().zip(st) {
            a.spikes += b.spikes;
            a.synaptic_ops += b.synaptic_ops;
        }
    }
    let n = data.test.len() as f64;
    for (i, s) in tele.iter().enumerate() {
        println!(
            "stage{}_spikes_per_sample={:.3} stage{}_synops_per_sample={:.1}",
            i + 1,
            s.spikes / n,
            i + 1,
            s.synaptic_ops / n
        );
    }
    if let Some(path) = rates {
        write_rates(&model, &data.test, batch, path)?;
    }
    Ok(())
}

fn write_rates<F: Scalar>(model: &Model<F>, data: &FrameDataset<F>, batch: usize, path: &Path) -> Result<(), CliError> {
    let t = model.plan().timesteps()[0];
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut acc: Vec<(usize, String, Vec<f64>)> = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk, t)?;
        let layers = model.firing_rates(&x)?;
        if acc.is_empty() {
            acc = layers.iter().map(|l| (l.stage, l.name.clone(), vec![0.0; l.rates.len()])).collect();
        }
        for (a, l) in acc.iter_mut().zip(&layers) {
            for (s, r) in a.2.iter_mut().zip(&l.rates) {
                *s += r * chunk.len() as f64;
            }
        }
    }
    let mut csv = String::from("layer,stage,unit,rate\n");
    for (stage, name, sums) in &acc {
        for (u, s) in sums.iter().enumerate() {
            let _ = writeln!(csv, "{name},{},{u},{:?}", stage + 1, s / data.len() as f64);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    write(path, csv)?;
    println!("firing_rates={}", path.display());
    Ok(())
}

pub fn dump_firing_rates(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<(), CliError> {
    fn run<F: Scalar>(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<(), CliError> {
        let (model, data) = load_model::<F>(cfg, ckpt)?;
        write_rates(&model, &data.test, cfg.get("batch").parse().unwrap_or(64), out)
    }
    match cfg.dtype()? {
        DType::F32 => run::<f32>(cfg, ckpt, out),
        DType::F64 => run::<f64>(cfg, ckpt, out),
    }
}
