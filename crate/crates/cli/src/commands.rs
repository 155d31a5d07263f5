use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use agcm_core::data::{
    load_checkpoint, load_dir, save_checkpoint, synth_samples, write_synth_dir, Checkpoint, Sample,
};
use agcm_core::metrics::{CorpusReport, EvalReport};
use agcm_core::network::{NetworkConfig, SaliencyNet};
use agcm_core::nn::ParameterStore;
use agcm_core::training::{EpochLog, TrainConfig, TrainState, Trainer, EPOCH_LOG_HEADER, STEP_LOG_HEADER};
use agcm_core::{Error, Result, Tensor};

use crate::config::{Baseline, RunConfig};
use crate::gradcheck::run_gradcheck;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const EVAL_CSV: &str = "eval.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_SUMMARY: &str = "ablation.txt";

/// The AGCM placements compared by the ablation, in table order.
pub const ABLATION_ROWS: [&[usize]; 3] = [&[], &[4], &[4, 5]];

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let s = &cfg.synth;
    write_synth_dir(out_dir, s.count, s.seed, &s.scene)?;
    say(out, format_args!("wrote {} scenes to {}", s.count, out_dir.display()))
}

/// Samples from `data`, or the configured synthetic training scenes.
pub fn training_samples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Sample>> {
    match data {
        Some(dir) => load_dir(dir),
        None => synthetic(cfg.synth.count, cfg.synth.seed, cfg),
    }
}

/// Held-out samples: `<data>/eval` when present, otherwise synthetic scenes
/// from a seed disjoint from the training set.
pub fn eval_samples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Sample>> {
    match data.map(|d| d.join("eval")).filter(|d| d.is_dir()) {
        Some(dir) => load_dir(&dir),
        None => synthetic(cfg.synth.eval_count, cfg.synth.eval_seed(), cfg),
    }
}

fn synthetic(n: usize, seed: u64, cfg: &RunConfig) -> Result<Vec<Sample>> {
    Ok(synth_samples(n, seed, &cfg.synth.scene)?
        .into_iter()
        .map(|(s, _, _)| s)
        .collect())
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub logs: Vec<EpochLog>,
}

fn append(path: &Path, header: &str, text: &str, fresh: bool) -> Result<()> {
    let new_file = fresh || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!new_file)
        .truncate(new_file)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if new_file {
        let _ = writeln!(buf, "{header}");
    }
    buf.push_str(text);
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Train, writing logs and checkpoints into `out_dir` as epochs complete.
/// A resumed run appends to the logs already in `out_dir`.
pub fn train_to_dir(
    network: &NetworkConfig,
    train: &TrainConfig,
    samples: &[Sample],
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let net = SaliencyNet::new(network.clone())?;
    let trainer = Trainer::new(&net, train.clone(), samples)?;
    let fresh = resume.is_none();
    let mut state = match resume {
        Some(ckpt) => {
            ckpt.check_params(&net.decls())?;
            ckpt.into_state()
        }
        None => trainer.init_state()?,
    };
    create_dir(out_dir)?;
    let log_path = out_dir.join(TRAIN_LOG);
    let step_path = out_dir.join(STEP_LOG);
    append(&log_path, EPOCH_LOG_HEADER, "", fresh)?;
    append(&step_path, STEP_LOG_HEADER, "", fresh)?;
    let mut logs = Vec::new();
    trainer.run(&mut state, |state, log| {
        append(&log_path, EPOCH_LOG_HEADER, &format!("{}\n", log.csv_line()), false)?;
        append(&step_path, STEP_LOG_HEADER, &log.step_lines(), false)?;
        if log.improved {
            save_checkpoint(&out_dir.join(BEST_CKPT), &Checkpoint::from_state(network, state))?;
        }
        logs.push(log.clone());
        Ok(())
    })?;
    save_checkpoint(&out_dir.join(FINAL_CKPT), &Checkpoint::from_state(network, &state))?;
    Ok(TrainOutcome { state, logs })
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let samples = training_samples(cfg, data)?;
    let resume = resume.map(|p| load_checkpoint(p, &cfg.network)).transpose()?;
    let started = Instant::now();
    let outcome = train_to_dir(&cfg.network, &cfg.train, &samples, out_dir, resume)?;
    for log in &outcome.logs {
        say(out, log.csv_line())?;
    }
    say(
        out,
        format_args!(
            "trained {} steps on {} samples in {:.1}s; best MAE {:.6}",
            outcome.state.step,
            samples.len(),
            started.elapsed().as_secs_f64(),
            outcome.state.best_mae
        ),
    )
}

/// Source of the saliency maps being scored.
pub enum Predictor {
    Model { net: SaliencyNet, params: ParameterStore },
    Baseline(Baseline),
}

impl Predictor {
    pub fn predict(&self, sample: &Sample) -> Result<Tensor> {
        match self {
            Predictor::Model { net, params } => {
                let [h, w] = net.config.input_size;
                if sample.image.shape() != [3, h, w] {
                    return Err(Error::Data(format!(
                        "sample {}: image {:?} does not match the {h}×{w} model input",
                        sample.id,
                        sample.image.shape()
                    )));
                }
                net.predict(params, &sample.image)
            }
            Predictor::Baseline(Baseline::GroundTruth) => Ok(sample.mask.clone()),
            Predictor::Baseline(Baseline::Half) => Ok(Tensor::full(sample.mask.shape(), 0.5)),
        }
    }
}

pub fn evaluate_samples(predictor: &Predictor, samples: &[Sample]) -> Result<CorpusReport> {
    let preds = samples
        .iter()
        .map(|s| predictor.predict(s))
        .collect::<Result<Vec<_>>>()?;
    CorpusReport::evaluate(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.id.clone(), p, &s.mask)),
    )
}

pub fn cmd_eval(
    cfg: &RunConfig,
    data: Option<&Path>,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let predictor = match (cfg.eval.baseline, checkpoint) {
        (Some(b), _) => Predictor::Baseline(b),
        (None, Some(path)) => {
            let ckpt = load_checkpoint(path, &cfg.network)?;
            let net = SaliencyNet::new(cfg.network.clone())?;
            ckpt.check_params(&net.decls())?;
            Predictor::Model {
                net,
                params: ckpt.params,
            }
        }
        (None, None) => {
            return Err(Error::Usage(
                "eval needs --checkpoint or a baseline (--baseline / eval.baseline)".into(),
            ))
        }
    };
    let samples = match data {
        Some(dir) => load_dir(dir)?,
        None => eval_samples(cfg, None)?,
    };
    let report = evaluate_samples(&predictor, &samples)?;
    write_file(&out_dir.join(EVAL_CSV), &report.to_csv())?;
    let m = report.mean();
    say(
        out,
        format_args!(
            "{} images: f_beta {:.6} mae {:.6} e_measure {:.6} s_measure {:.6}",
            samples.len(),
            m.f_beta,
            m.mae,
            m.e_measure,
            m.s_measure
        ),
    )
}

pub fn cmd_gradcheck(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let report = run_gradcheck(&cfg.gradcheck)?;
    write_file(&out_dir.join(GRADCHECK_CSV), &report.to_csv())?;
    for s in &report.stages {
        say(out, s.csv_line())?;
        match &s.outcome {
            Ok(c) => say(
                out,
                format_args!("  worst {}: analytic {:e} numeric {:e}", c.worst, c.analytic, c.numeric),
            )?,
            Err(msg) => say(out, format_args!("  {}: {msg}", s.stage))?,
        }
    }
    say(out, format_args!("elapsed {:.2}s", started.elapsed().as_secs_f64()))?;
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<&str> = report
        .stages
        .iter()
        .filter(|s| !s.passed())
        .map(|s| s.stage)
        .collect();
    let suspects: Vec<&str> = report.suspects.iter().map(|k| k.name()).collect();
    let suspects = if suspects.is_empty() {
        "none isolated".to_string()
    } else {
        suspects.join(", ")
    };
    say(out, format_args!("suspect ops: {suspects}"))?;
    Err(Error::Numeric(format!(
        "gradient check failed for {}; suspect ops: {suspects}",
        failed.join(", ")
    )))
}

/// One trained configuration of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub stages: Vec<usize>,
    pub params: usize,
    pub train: EvalReport,
    pub eval: EvalReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let s: Vec<String> = self.stages.iter().map(usize::to_string).collect();
        format!("{{{}}}", s.join(","))
    }
}

pub const ABLATION_HEADER: &str = "layer4,layer5,params,\
train_f_beta,train_mae,train_e_measure,train_s_measure,\
eval_f_beta,eval_mae,eval_e_measure,eval_s_measure";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let flag = |s| u8::from(r.stages.contains(&s));
        let _ = write!(out, "{},{},{}", flag(4), flag(5), r.params);
        for m in [&r.train, &r.eval] {
            let _ = write!(out, ",{},{},{},{}", m.f_beta, m.mae, m.e_measure, m.s_measure);
        }
        out.push('\n');
    }
    out
}

/// Plain-text comparison of the two-AGCM row against the baseline row.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6} params {:>7}  eval F {:.4}  MAE {:.4}  E {:.4}  S {:.4}",
            r.label(),
            r.params,
            r.eval.f_beta,
            r.eval.mae,
            r.eval.e_measure,
            r.eval.s_measure
        );
    }
    if let (Some(base), Some(two)) = (rows.first(), rows.last()) {
        let verdict = if two.eval.mae < base.eval.mae {
            "lower than"
        } else {
            "not lower than"
        };
        let _ = writeln!(
            out,
            "eval MAE with AGCMs at stages 4 and 5 ({:.6}) is {verdict} without AGCM ({:.6})",
            two.eval.mae, base.eval.mae
        );
    }
    out
}

pub fn run_ablation(cfg: &RunConfig, data: Option<&Path>, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let train_set = training_samples(cfg, data)?;
    let eval_set = eval_samples(cfg, data)?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for stages in ABLATION_ROWS {
        let mut network = cfg.network.clone();
        network.agcm_stages = stages.to_vec();
        let dir_name = match stages {
            [] => "none".to_string(),
            s => s.iter().map(usize::to_string).collect::<Vec<_>>().join("_"),
        };
        let row_dir = out_dir.join(format!("row_{dir_name}"));
        create_dir(&row_dir)?;
        write_file(&row_dir.join("network.json"), &serde_json::to_string_pretty(&network).expect("serializes"))?;
        let outcome = train_to_dir(&network, &cfg.train, &train_set, &row_dir, None)?;
        let predictor = Predictor::Model {
            net: SaliencyNet::new(network.clone())?,
            params: outcome.state.store,
        };
        rows.push(AblationRow {
            stages: stages.to_vec(),
            params: network.param_count(),
            train: evaluate_samples(&predictor, &train_set)?.mean(),
            eval: evaluate_samples(&predictor, &eval_set)?.mean(),
        });
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, data: Option<&Path>, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let rows = run_ablation(cfg, data, out_dir)?;
    write_file(&out_dir.join(ABLATION_CSV), &ablation_csv(&rows))?;
    let summary = ablation_summary(&rows);
    write_file(&out_dir.join(ABLATION_SUMMARY), &summary)?;
    say(out, summary.trim_end())
}
