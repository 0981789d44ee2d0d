use std::path::Path;

use anyhow::{bail, Context, Result};
use cu_core::dataio::{
    generate_synthetic, load_corpus, load_pseudo_labels, save_corpus, save_pseudo_labels, simulate_partial_labels,
    Corpus, GenConfig, Interval,
};
use cu_core::evalkit::{emit_report, evaluate, render_records, render_table, EvalReport, ReportFormat};
use cu_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use cu_core::trainer::{
    export_pseudo_labels, run_two_stage, train_explicit, train_implicit, ExplicitModel, ExplicitParams,
    LabelConfig, TrainConfig, TrainLog,
};
use cu_core::write_atomic;

use crate::{
    Command, EvalArgs, ExportArgs, GenArgs, InferArgs, LabelArgs, TrainExplicitArgs, TrainImplicitArgs, TrainOpts,
    TwoStageArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Label(a) => label(a),
        Command::TrainImplicit(a) => train_implicit_cmd(a),
        Command::ExportPseudo(a) => export(a),
        Command::TrainExplicit(a) => train_explicit_cmd(a),
        Command::Infer(a) => infer(a),
        Command::RunTwoStage(a) => two_stage(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => crate::grid::ablate(a),
        Command::Robustness(a) => crate::grid::robustness(a),
    }
}

fn corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

/// The config file (or defaults) with command-line overrides applied;
/// `epochs` sets the epochs of the implicit stage unless `explicit`.
pub(crate) fn train_config(opts: &TrainOpts, explicit: bool) -> Result<TrainConfig> {
    let mut cfg = match &opts.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(e) = opts.epochs {
        if explicit {
            cfg.explicit_epochs = e;
        } else {
            cfg.epochs = e;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_log(log: &TrainLog, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        write_atomic(p, log.to_jsonl().as_bytes())?;
    }
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => GenConfig::load(p)?,
        None => GenConfig::default(),
    };
    let overrides = [
        (a.samples, &mut cfg.num_samples),
        (a.frames, &mut cfg.frames),
        (a.clusters, &mut cfg.clusters),
        (a.id_offset, &mut cfg.id_offset),
    ];
    for (v, slot) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (Some(extra), Some(holdout_out)) = (a.holdout, &a.holdout_out) else {
        let c = generate_synthetic(&cfg)?;
        save_corpus(&c, &a.out)?;
        eprintln!("wrote {} samples to {}", c.len(), a.out.display());
        return Ok(());
    };
    // one draw, split, so both parts share the planted prototypes
    let n = cfg.num_samples;
    cfg.num_samples += extra;
    let (main, held) = generate_synthetic(&cfg)?.split_at(n)?;
    save_corpus(&main, &a.out)?;
    save_corpus(&held, holdout_out)?;
    eprintln!(
        "wrote {} samples to {} and {} to {}",
        main.len(),
        a.out.display(),
        held.len(),
        holdout_out.display()
    );
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let c = corpus(&a.corpus)?;
    let labelled = simulate_partial_labels(&c, a.dist.into(), a.dur, a.seed)?;
    save_corpus(&labelled, &a.out)?;
    Ok(())
}

fn train_implicit_cmd(a: TrainImplicitArgs) -> Result<()> {
    let mut cfg = train_config(&a.train, false)?;
    if let Some(f) = a.flags {
        cfg.flags = f;
    }
    let c = corpus(&a.corpus)?;
    let (model, log) = train_implicit(&c, &cfg)?;
    save_checkpoint(&model.to_checkpoint(), &a.out)?;
    write_log(&log, a.log.as_deref())?;
    if let Some(last) = log.last() {
        eprintln!(
            "epoch {}: loss {:.4}, containment {:.3}",
            last.epoch + 1,
            last.loss,
            last.containment.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let model = ModelParams::from_checkpoint(&load_checkpoint(&a.ckpt)?)?;
    let c = corpus(&a.corpus)?;
    save_pseudo_labels(&export_pseudo_labels(&model, &c)?, &a.out)?;
    Ok(())
}

fn train_explicit_cmd(a: TrainExplicitArgs) -> Result<()> {
    let cfg = train_config(&a.train, true)?;
    let c = corpus(&a.corpus)?;
    let pseudo = load_pseudo_labels(&a.pseudo)?;
    let (params, log) = train_explicit(&c, &pseudo, &cfg)?;
    save_checkpoint(&params.to_checkpoint(), &a.out)?;
    write_log(&log, a.log.as_deref())?;
    Ok(())
}

fn predict(params: &ExplicitParams, c: &Corpus) -> Result<Vec<(String, Interval)>> {
    c.samples
        .iter()
        .map(|s| {
            let mut bare = s.clone();
            bare.label = None;
            bare.gt = None;
            Ok((s.id.clone(), params.infer(&bare)?))
        })
        .collect()
}

fn infer(a: InferArgs) -> Result<()> {
    let params = ExplicitParams::from_checkpoint(&load_checkpoint(&a.ckpt)?)?;
    let c = corpus(&a.corpus)?;
    save_pseudo_labels(&predict(&params, &c)?, &a.out)?;
    Ok(())
}

fn two_stage(a: TwoStageArgs) -> Result<()> {
    let mut cfg = train_config(&a.opts, false)?;
    if let Some(f) = a.flags {
        cfg.flags = f;
    }
    let train = corpus(&a.train)?;
    let test = corpus(&a.test)?;
    let labels = LabelConfig {
        distribution: a.dist.into(),
        duration: a.dur,
        seed: a.label_seed,
    };
    let out = run_two_stage(&train, &test, &labels, &cfg)?;
    let dir = &a.out;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    save_checkpoint(&out.implicit.to_checkpoint(), &dir.join("implicit.ckpt"))?;
    save_checkpoint(&out.explicit.to_checkpoint(), &dir.join("explicit.ckpt"))?;
    save_pseudo_labels(&out.pseudo, &dir.join("pseudo.txt"))?;
    save_pseudo_labels(&out.predictions, &dir.join("predictions.txt"))?;
    write_log(&out.implicit_log, Some(&dir.join("implicit.log.jsonl")))?;
    write_log(&out.explicit_log, Some(&dir.join("explicit.log.jsonl")))?;
    let reports = [out.pseudo_report, out.report];
    emit_report(&reports, ReportFormat::Records, &dir.join("eval.txt"))?;
    print!("{}", render_table(&reports)?);
    Ok(())
}

pub(crate) fn ground_truth(c: &Corpus) -> Result<Vec<(String, Interval)>> {
    c.samples
        .iter()
        .map(|s| match s.gt {
            Some(g) => Ok((s.id.clone(), g)),
            None => bail!("sample `{}` has no ground truth", s.id),
        })
        .collect()
}

fn render(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Table => render_table(reports)?,
        ReportFormat::Records => render_records(reports)?,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = load_pseudo_labels(&a.pred)?;
    let gts = ground_truth(&corpus(&a.gt)?)?;
    let report = evaluate(&pred, &gts, &a.thresholds, &a.tag)?;
    let format: ReportFormat = a.format.into();
    match &a.out {
        Some(p) => emit_report(&[report], format, p)?,
        None => print!("{}", render(&[report], format)?),
    }
    Ok(())
}
