use std::fmt::Write as _;

use absolutenet::data::{read_dataset, sidecar_path, split_modality, synthesize, write_dataset, HrfConfig, TrialSet};
use absolutenet::ga::{ga_csv, run_ga};
use absolutenet::model::{ablate, count_params, AbsoluteNet, LayerReport, Variant, REFERENCE};
use absolutenet::rng::{derive, derived, seeded};
use absolutenet::train::{
    cross_validate, epochs_csv, evaluate, fit, fold_seed, folds_csv, stratified_folds, Metrics, EPOCHS_CSV_HEADER,
};
use absolutenet::verify::{gradient_at, run_case, CASES};
use anyhow::{Context, Result};
use serde_json::json;

use crate::{
    AblateArgs, Command, CvArgs, DataArgs, GaArgs, GenArgs, GradcheckArgs, Outcome, Run, TrainArgs, TrainFlags,
    UsageError, VerifyArchArgs,
};

pub fn run(command: &Command, run: &mut Run) -> Result<Outcome> {
    match command {
        Command::Gen(a) => gen(a, run),
        Command::VerifyArch(a) => verify_arch(a, run),
        Command::Train(a) => train(a, run),
        Command::Cv(a) => cv(a, run),
        Command::Ablate(a) => ablation(a, run),
        Command::Ga(a) => ga(a, run),
        Command::Gradcheck(a) => gradcheck(a, run),
        Command::Replay(_) => unreachable!("replay is resolved before running"),
    }
}

fn json_pretty(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn gen(a: &GenArgs, run: &mut Run) -> Result<Outcome> {
    let data = &mut run.config.data;
    if let Some(n) = a.trials_per_class {
        data.trials_per_class = n;
    }
    if let Some(p) = a.preset {
        data.hrf = HrfConfig::preset(p);
    }
    let data = data.clone();
    let set = synthesize(&data, run.config.seed)?;
    let path = run.output(a.output.clone())?;
    write_dataset(&set, &path)?;
    run.outputs.push(sidecar_path(&path));
    let (standard, deviant) = set.class_counts();
    println!(
        "wrote {} trials ({standard} standard, {deviant} deviant), {} channels x {} samples, to {}",
        set.len(),
        set.channels,
        set.samples,
        path.display()
    );
    let h = &data.hrf;
    let drift: Vec<String> = h
        .sinusoids
        .iter()
        .map(|s| format!("{} Hz x {}", s.freq_hz, s.amplitude))
        .collect();
    println!(
        "signal: standard amplitude {}, deviant amplitude {}, white noise sigma {}, drift [{}], trial jitter {}",
        h.standard_amplitude,
        h.deviant_amplitude,
        h.white_sigma,
        drift.join(", "),
        h.trial_jitter
    );
    Ok(Outcome::Pass)
}

fn shape(s: &[usize]) -> String {
    let inner: Vec<String> = s.iter().map(|d| d.to_string()).collect();
    if s.len() == 1 {
        format!("({},)", inner[0])
    } else {
        format!("({})", inner.join(", "))
    }
}

/// Report rows next to the reference ones, marking differing cells.
fn side_by_side(report: &LayerReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<28} {:>14} {:>7} | {:>14} {:>7}",
        "block", "layer", "output", "params", "expected", "params"
    );
    let n = report.rows.len().max(REFERENCE.len());
    for i in 0..n {
        let got = report.rows.get(i);
        let want = REFERENCE.get(i);
        let (block, layer) = match (got, want) {
            (Some(r), _) => (r.block.as_str(), r.layer.as_str()),
            (None, Some(w)) => (w.0, w.1),
            (None, None) => unreachable!("index below the longer length"),
        };
        let ok = match (got, want) {
            (Some(r), Some(w)) => r.block == w.0 && r.layer == w.1 && r.output == w.2 && r.params == w.3,
            _ => false,
        };
        let _ = writeln!(
            out,
            "{block:<20} {layer:<28} {:>14} {:>7} | {:>14} {:>7}  {}",
            got.map(|r| shape(&r.output)).unwrap_or_default(),
            got.map(|r| r.params.to_string()).unwrap_or_default(),
            want.map(|w| shape(w.2)).unwrap_or_default(),
            want.map(|w| w.3.to_string()).unwrap_or_default(),
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    out
}

fn verify_arch(a: &VerifyArchArgs, run: &mut Run) -> Result<Outcome> {
    let mut model = run.config.model.clone();
    if let Some(v) = a.variant {
        model.variant = v;
        if v == Variant::SingleModality {
            model = model.with_channels(14);
        }
    }
    if let Some(s) = a.pool_stride {
        model.pool_stride = s;
    }
    run.config.model = model.clone();
    let net = AbsoluteNet::<f32>::build(&model, &mut seeded(run.config.seed))?;
    let report = net.report();
    let (closed_trainable, closed_total) = count_params(&model);
    let mut problems = Vec::new();
    if (closed_trainable, closed_total) != (report.trainable, report.total()) {
        problems.push(format!(
            "closed-form count {closed_trainable} / {closed_total} differs from the built model {} / {}",
            report.trainable,
            report.total()
        ));
    }
    let compared = model.variant == Variant::Full;
    if compared {
        problems.extend(report.compare_reference());
        print!("{}", side_by_side(&report));
    } else {
        print!("{report}");
        println!("(no reference table for variant {})", model.variant.name());
    }
    println!(
        "trainable {} / total {} (closed form {closed_trainable} / {closed_total})",
        report.trainable,
        report.total()
    );
    for p in &problems {
        println!("mismatch: {p}");
    }
    let verdict = if problems.is_empty() { "PASS" } else { "FAIL" };
    println!("{verdict}");
    run.write(
        a.out.join("arch.json"),
        json_pretty(&json!({
            "report": report,
            "closed_form": { "trainable": closed_trainable, "total": closed_total },
            "compared_with_reference": compared,
            "mismatches": problems,
        }))?,
    )?;
    Ok(if problems.is_empty() {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}

pub const GRADCHECK_CSV_HEADER: &str = "case,kind,coords,straddled,max_rel_error,max_abs_error,pass";

fn gradcheck(a: &GradcheckArgs, run: &mut Run) -> Result<Outcome> {
    if let Some(x) = a.at {
        let op = a.op.as_deref().expect("clap enforces --op with --at");
        let g = gradient_at(op, x).map_err(|e| UsageError(e.to_string()))?;
        println!("d/dx {op}(x) at x = {x}: {g}");
        run.write(a.out.join("gradient.csv"), format!("op,at,gradient\n{op},{x},{g}\n"))?;
        return Ok(Outcome::Pass);
    }
    let cases: Vec<_> = CASES
        .iter()
        .filter(|c| a.op.as_deref().is_none_or(|op| op == c.name))
        .collect();
    if cases.is_empty() {
        let names: Vec<&str> = CASES.iter().map(|c| c.name).collect();
        return Err(UsageError(format!(
            "unknown case {:?}; known: {}",
            a.op.as_deref().unwrap_or_default(),
            names.join(", ")
        ))
        .into());
    }
    let mut csv = String::from(GRADCHECK_CSV_HEADER);
    csv.push('\n');
    let mut failed = 0;
    for c in cases {
        let kind = c.kind.name();
        match run_case(c.name, run.config.seed) {
            Ok(r) => {
                let pass = r.passes(a.tolerance);
                failed += usize::from(!pass);
                let straddled = if r.straddled > 0 {
                    format!(", {} at a kink left out", r.straddled)
                } else {
                    String::new()
                };
                println!(
                    "{} {:<26} {:<9} max rel error {:.3e} over {} coordinates{straddled}",
                    if pass { "PASS" } else { "FAIL" },
                    c.name,
                    kind,
                    r.max_rel_error,
                    r.coords
                );
                let _ = writeln!(
                    csv,
                    "{},{kind},{},{},{:e},{:e},{pass}",
                    c.name, r.coords, r.straddled, r.max_rel_error, r.max_abs_error
                );
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {:<26} {kind:<9} {e}", c.name);
                let _ = writeln!(csv, "{},{kind},0,0,NaN,NaN,false", c.name);
            }
        }
    }
    println!("{failed} failing at tolerance {:e}", a.tolerance);
    run.write(a.out.join("gradcheck.csv"), csv)?;
    Ok(if failed == 0 { Outcome::Pass } else { Outcome::Fail })
}

fn apply_train_flags(flags: &TrainFlags, run: &mut Run) -> Result<()> {
    let t = &mut run.config.train;
    if let Some(e) = flags.epochs {
        t.epochs_select = e;
    }
    if let Some(e) = flags.retrain_epochs {
        t.epochs_retrain = e;
    }
    if let Some(lr) = flags.learning_rate {
        t.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = b;
    }
    t.validate()?;
    Ok(())
}

/// Reads the dataset, keeps the requested chromophores and adapts the
/// model's input shape to them.
fn load(data: &DataArgs, run: &mut Run) -> Result<TrialSet> {
    let set = read_dataset(&data.dataset)?;
    let set = split_modality(&set, data.input)?;
    let mut model = run.config.model.clone().with_channels(set.channels);
    model.input_samples = set.samples;
    model.validate()?;
    run.config.model = model;
    Ok(set)
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "accuracy {:.4}  sensitivity {:.4}  specificity {:.4}  (tp {} fp {} tn {} fn {})",
        m.accuracy, m.sensitivity, m.specificity, m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn_
    )
}

fn train(a: &TrainArgs, run: &mut Run) -> Result<Outcome> {
    apply_train_flags(&a.train, run)?;
    let set = load(&a.data, run)?;
    let (model, train, seed) = (run.config.model.clone(), run.config.train.clone(), run.config.seed);
    let folds = stratified_folds(&set.labels, run.config.cv.folds, derive(seed, 1))?;
    let split = folds
        .get(a.fold)
        .ok_or_else(|| UsageError(format!("--fold {} but only {} folds", a.fold, folds.len())))?;
    let fs = fold_seed(seed, split.fold);
    let mut net = AbsoluteNet::<f32>::build(&model, &mut derived(fs, 0))?;
    let out = fit(
        &mut net,
        &set,
        &split.train,
        Some(&split.val),
        train.epochs_select,
        &train,
        derive(fs, 1),
    )?;
    *net.params_mut() = out.best;
    let params = run.output(a.out.join("model.params"))?;
    net.save(&params)?;
    let val = evaluate(&net, &set, &split.val)?;
    let test = evaluate(&net, &set, &split.test)?;

    let mut csv = String::from(EPOCHS_CSV_HEADER);
    csv.push('\n');
    for e in &out.report.epochs {
        let _ = writeln!(
            csv,
            "{},select,{},{:.6},{:.6},{:.6},{:.6}",
            split.fold,
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.val_loss.unwrap_or(f64::NAN),
            e.val_accuracy.unwrap_or(f64::NAN)
        );
    }
    run.write(a.out.join("epochs.csv"), csv)?;
    run.write(
        a.out.join("train.json"),
        json_pretty(&json!({ "fold": split.fold, "report": out.report, "validation": val, "test": test }))?,
    )?;
    println!(
        "fold {}: selected epoch {} of {}, best validation loss {:.4}",
        split.fold,
        out.report.selected_epoch,
        out.report.epochs.len(),
        out.report.best_val_loss.unwrap_or(f64::NAN)
    );
    println!("validation: {}", metrics_line(&val));
    println!("test:       {}", metrics_line(&test));
    println!("saved checkpoint to {}", params.display());
    Ok(Outcome::Pass)
}

fn input_label(data: &DataArgs) -> &'static str {
    match data.input {
        absolutenet::data::Modality::Hbo2 => "HbO2",
        absolutenet::data::Modality::Hbr => "HbR",
        absolutenet::data::Modality::Both => "HbO2+HbR",
    }
}

fn cv(a: &CvArgs, run: &mut Run) -> Result<Outcome> {
    apply_train_flags(&a.train, run)?;
    if let Some(k) = a.folds {
        run.config.cv.folds = k;
    }
    if let Some(m) = a.max_folds {
        run.config.cv.max_folds = Some(m);
    }
    let set = load(&a.data, run)?;
    let report = cross_validate(&set, &run.config.model, &run.config.train, &run.config.cv)?;
    for f in &report.folds {
        println!("fold {}: {}", f.fold, metrics_line(&f.test));
    }
    let mut summary = format!(
        "input: {}\nfolds: {}\ntrainable params: {}\n",
        input_label(&a.data),
        report.folds.len(),
        report.trainable_params
    );
    let _ = writeln!(summary, "{}", report.summary);
    print!("{summary}");
    run.write(a.out.join("folds.csv"), folds_csv(&report))?;
    run.write(a.out.join("epochs.csv"), epochs_csv(&report))?;
    run.write(a.out.join("summary.txt"), summary)?;
    run.write(a.out.join("cv.json"), json_pretty(&report)?)?;
    Ok(Outcome::Pass)
}

pub const ABLATION_CSV_HEADER: &str = "variant,trainable_params,closed_form_params,folds,accuracy_mean,accuracy_std,sensitivity_mean,sensitivity_std,specificity_mean,specificity_std";

fn ablation(a: &AblateArgs, run: &mut Run) -> Result<Outcome> {
    apply_train_flags(&a.train, run)?;
    if let Some(m) = a.max_folds {
        run.config.cv.max_folds = Some(m);
    }
    let data = DataArgs {
        dataset: a.dataset.clone(),
        input: absolutenet::data::Modality::Both,
    };
    let set = load(&data, run)?;
    let base = run.config.model.clone();
    let mut variants = vec![base.clone()];
    for study in 1..=4 {
        variants.push(ablate(&base, study)?);
    }
    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    let mut reports = Vec::new();
    let mut outcome = Outcome::Pass;
    for model in &variants {
        let report = cross_validate(&set, model, &run.config.train, &run.config.cv)
            .with_context(|| format!("variant {}", model.variant.name()))?;
        let (closed, _) = count_params(model);
        if closed != report.trainable_params {
            outcome = Outcome::Fail;
        }
        let s = &report.summary;
        let _ = writeln!(
            csv,
            "{},{},{closed},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            model.variant.name(),
            report.trainable_params,
            report.folds.len(),
            s.accuracy.mean,
            s.accuracy.std,
            s.sensitivity.mean,
            s.sensitivity.std,
            s.specificity.mean,
            s.specificity.std
        );
        println!(
            "{:<22} params {:>6} (closed form {closed:>6})  accuracy {}  sensitivity {}  specificity {}",
            model.variant.name(),
            report.trainable_params,
            s.accuracy,
            s.sensitivity,
            s.specificity
        );
        reports.push(report);
    }
    run.write(a.out.join("ablation.csv"), csv)?;
    run.write(a.out.join("ablation.json"), json_pretty(&reports)?)?;
    Ok(outcome)
}

fn ga(a: &GaArgs, run: &mut Run) -> Result<Outcome> {
    let g = &mut run.config.ga;
    if let Some(p) = a.pop {
        g.population = p;
    }
    if let Some(n) = a.gens {
        g.generations = n;
    }
    if let Some(e) = a.fitness_epochs {
        g.fitness_epochs = e;
    }
    if let Some(r) = a.mutation_rate {
        g.mutation_rate = r;
    }
    if let Some(e) = a.elite_count {
        g.elite_count = e;
    }
    g.validate()?;
    let set = load(&a.data, run)?;
    let report = run_ga(&set, &run.config.model, &run.config.train, &run.config.ga)?;
    for (g, f) in report.trajectory.iter().enumerate() {
        println!("generation {g}: best fitness {f:.6}");
    }
    let b = &report.best;
    println!(
        "best: learning_rate {:e}, temporal_kernel {}, separable_kernel {}, pool_size {}, pool_stride {} ({} trainings)",
        b.learning_rate, b.temporal_kernel, b.separable_kernel, b.pool_size, b.pool_stride, report.evaluations
    );
    let best = format!(
        "# Best genome, fitness {}\n[model]\ntemporal_kernel = {}\nseparable_kernel = {}\npool_size = {}\npool_stride = {}\n\n[train]\nlearning_rate = {:?}\n",
        report.best_fitness, b.temporal_kernel, b.separable_kernel, b.pool_size, b.pool_stride, b.learning_rate
    );
    run.write(a.out.join("ga_log.csv"), ga_csv(&report))?;
    run.write(a.out.join("best.toml"), best)?;
    run.write(a.out.join("ga.json"), json_pretty(&report)?)?;
    Ok(Outcome::Pass)
}
