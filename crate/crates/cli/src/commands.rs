use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gridcascade::dataset::{Dataset, Split};
use gridcascade::grid::{bundled_rts24_path, load_case, scale_dispatch, scale_loads, GridCase};
use gridcascade::powerflow::solve_ac;
use gridcascade_model::train::write_log_csv;
use gridcascade_model::{evaluate, per_round_report, predict, train, Mode, Model, ModelError, Variant};

use crate::args::{AblateArgs, EvalArgs, GenerateArgs, PfSolveArgs, TrainArgs};
use crate::manifest::RunManifest;
use crate::tables::{buildup_csv, deltas_csv, per_round_csv, report_header, report_row, runs_csv, summary_csv, RunResult};
use crate::Invalid;

fn case_or_default(path: &Option<PathBuf>) -> Result<(GridCase, PathBuf)> {
    let path = path.clone().unwrap_or_else(bundled_rts24_path);
    let case = load_case(&path).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
    Ok((case, path))
}

fn write(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn set_workers(workers: usize) {
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build_global();
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let (case, case_path) = case_or_default(&a.case)?;
    let cfg = a.cascade.config(a.seed).map_err(Invalid)?;
    let mut manifest = RunManifest::start("generate");
    manifest.seed("sim", a.seed);
    manifest.input(&case_path);
    let start = Instant::now();
    let ds = Dataset::generate(&case, &cfg, a.n, a.workers)?;
    ds.save(&a.out)?;
    manifest.config_hashes.insert("cascade".into(), ds.manifest.config_hash.clone());
    manifest.config_hashes.insert("norm_stats".into(), ds.manifest.stats_hash.clone());
    for f in [gridcascade::dataset::SAMPLES_FILE, gridcascade::dataset::MANIFEST_FILE] {
        manifest.output(&a.out.join(f))?;
    }
    let s = &ds.manifest.summary;
    println!("samples            {}", s.n_samples);
    println!("operating points   {}", s.n_operating_points);
    println!("cascade rate       {:.3}", s.cascade_rate);
    println!("unsafe fraction    {:.3}", s.unsafe_fraction);
    println!("edge positive rate {:.4}", s.edge_positive_rate);
    println!("node positive rate {:.4}", s.node_positive_rate);
    println!("mean dns           {:.4}", s.mean_dns);
    println!("max depth          {}", s.max_depth);
    println!("diverged fraction  {:.3}", s.diverged_fraction);
    println!("elapsed            {:.1}s", start.elapsed().as_secs_f64());
    manifest.finish(&a.out)?;
    Ok(())
}

fn splits(
    ds: &Dataset,
) -> (Vec<gridcascade::dataset::GraphSample>, Vec<gridcascade::dataset::GraphSample>, Vec<gridcascade::dataset::GraphSample>) {
    (ds.normalized(Split::Train), ds.normalized(Split::Val), ds.normalized(Split::Test))
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    set_workers(a.workers);
    let ds = load_dataset(&a.data)?;
    let model_cfg = a.model.config(a.variant, a.mode);
    let train_cfg = a.optim.config(a.mode, a.seed);
    let loss_cfg = a.loss.config();
    let out =
        a.out.clone().unwrap_or_else(|| a.data.join("runs").join(format!("{}-{}-seed{}", a.variant.label(), mode_label(a.mode), a.seed)));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::start("train");
    manifest.seed("train", a.seed);
    manifest.config("model", &model_cfg);
    manifest.config("train", &train_cfg);
    manifest.config("loss", &loss_cfg);
    manifest.config_hashes.insert("norm_stats".into(), ds.manifest.stats_hash.clone());
    manifest.input(&a.data);
    let (tr, va, _) = splits(&ds);
    let model = Model::new(model_cfg, a.seed)?;
    let result = train(model, &tr, &va, &loss_cfg, &train_cfg)?;
    let ckpt = out.join("checkpoint.json");
    result.model.save(&ckpt, &ds.manifest.stats_hash, Some(result.thresholds))?;
    manifest.output(&ckpt)?;
    let log = out.join("train_log.csv");
    write_log_csv(&log, &result.log).with_context(|| format!("writing {}", log.display()))?;
    manifest.output(&log)?;
    write(&out.join("thresholds.json"), &serde_json::to_string_pretty(&result.thresholds)?, &mut manifest)?;
    println!(
        "best epoch {} of {}; thresholds edge {} node {}; checkpoint {}",
        result.best_epoch,
        result.log.len(),
        result.thresholds.edge,
        result.thresholds.node,
        ckpt.display()
    );
    manifest.finish(&out)?;
    Ok(())
}

fn mode_label(mode: Mode) -> &'static str {
    match mode {
        Mode::OneShot => "one-shot",
        Mode::MultiRound => "multi-round",
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Invalid(format!("unknown split `{s}` (train, val or test)")).into()),
    }
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    set_workers(a.workers);
    let split = parse_split(&a.split)?;
    let (model, header) = Model::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_dataset(&a.data)?;
    if header.stats_hash != ds.manifest.stats_hash {
        return Err(ModelError::StatsMismatch { checkpoint: header.stats_hash, dataset: ds.manifest.stats_hash.clone() }.into());
    }
    if a.mode == Mode::MultiRound && model.cfg.multi_round.is_none() {
        return Err(ModelError::NotMultiRound.into());
    }
    if a.per_round && a.mode != Mode::MultiRound {
        bail!(Invalid("--per-round needs --mode multi-round".into()));
    }
    let thresholds = header.thresholds.unwrap_or_default();
    let samples = ds.normalized(split);
    let report = evaluate(&model, &thresholds, &samples, a.mode)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let rounds = if a.per_round {
        let preds = predict(&model, &samples, a.mode, 64)?;
        let r = model.cfg.multi_round.map(|m| m.rounds).unwrap_or(1);
        let rows = per_round_report(&samples, &preds, &thresholds, r);
        print!("{}", per_round_csv(&rows));
        Some(rows)
    } else {
        None
    };
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut manifest = RunManifest::start("eval");
        manifest.input(&a.checkpoint);
        manifest.input(&a.data);
        manifest.config_hashes.insert("norm_stats".into(), ds.manifest.stats_hash.clone());
        write(&out.join("eval.json"), &serde_json::to_string_pretty(&report)?, &mut manifest)?;
        write(
            &out.join("eval.csv"),
            &format!("variant,mode,{}\n{},{},{}\n", report_header(), header.variant.label(), mode_label(a.mode), report_row(&report)),
            &mut manifest,
        )?;
        if let Some(rows) = &rounds {
            write(&out.join("per_round.csv"), &per_round_csv(rows), &mut manifest)?;
        }
        manifest.finish(out)?;
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    set_workers(a.workers);
    let ds = load_dataset(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.join("ablation"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let variants: Vec<Variant> = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };
    if a.seeds.is_empty() {
        bail!(Invalid("--seeds must name at least one seed".into()));
    }
    let loss_cfg = a.loss.config();
    let mut manifest = RunManifest::start("ablate");
    manifest.input(&a.data);
    manifest.config("loss", &loss_cfg);
    manifest.config("model", &a.model.config(Variant::Full, a.mode));
    manifest.config("train", &a.optim.config(a.mode, 0));
    manifest.config_hashes.insert("norm_stats".into(), ds.manifest.stats_hash.clone());
    let (tr, va, te) = splits(&ds);
    let mut runs = Vec::new();
    let mut timing = String::from("variant,seed,train_secs\n");
    for &seed in &a.seeds {
        manifest.seed(&format!("train.{seed}"), seed);
        for &variant in &variants {
            let start = Instant::now();
            let model = Model::new(a.model.config(variant, a.mode), seed)?;
            let result = train(model, &tr, &va, &loss_cfg, &a.optim.config(a.mode, seed))?;
            let secs = start.elapsed().as_secs_f64();
            let report = evaluate(&result.model, &result.thresholds, &te, a.mode)?;
            log::info!(
                "{} seed {seed}: edge AP {:.3} node AP {:.3} dns R2 {:.3} ({secs:.0}s)",
                variant.label(),
                report.edge_pr_auc,
                report.node_pr_auc,
                report.dns_r2
            );
            let stem = format!("{}-seed{seed}", variant.label());
            let log_path = out.join(format!("{stem}.train_log.csv"));
            write_log_csv(&log_path, &result.log).with_context(|| format!("writing {}", log_path.display()))?;
            manifest.output(&log_path)?;
            let ckpt = out.join(format!("{stem}.checkpoint.json"));
            result.model.save(&ckpt, &ds.manifest.stats_hash, Some(result.thresholds))?;
            manifest.output(&ckpt)?;
            timing.push_str(&format!("{},{seed},{secs}\n", variant.label()));
            runs.push(RunResult { variant, seed, best_epoch: result.best_epoch, epochs: result.log.len(), report });
        }
    }
    write(&out.join("ablation_runs.csv"), &runs_csv(&runs), &mut manifest)?;
    let summary = summary_csv(&runs);
    write(&out.join("ablation.csv"), &summary, &mut manifest)?;
    write(&out.join("ablation_deltas.csv"), &deltas_csv(&runs), &mut manifest)?;
    write(&out.join("buildup.csv"), &buildup_csv(&runs), &mut manifest)?;
    write(&out.join("timing.csv"), &timing, &mut manifest)?;
    print!("{summary}");
    manifest.finish(&out)?;
    Ok(())
}

pub fn pf_solve(a: &PfSolveArgs) -> Result<()> {
    let (case, _) = case_or_default(&a.case)?;
    let case = if a.load_scale == 1.0 {
        case
    } else {
        let scaled = scale_loads(&case, a.load_scale).map_err(|e| Invalid(e.to_string()))?;
        scale_dispatch(&scaled, a.load_scale).map_err(|e| Invalid(e.to_string()))?
    };
    let mut in_service = vec![true; case.n_branches()];
    for &k in &a.outage {
        if k >= in_service.len() {
            bail!(Invalid(format!("branch {k} out of range (case has {})", in_service.len())));
        }
        in_service[k] = false;
    }
    let sol = solve_ac(&case, &in_service, None).to_degrees();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&sol)?);
    } else {
        println!("converged {} iterations {} max mismatch {:e} p.u.", sol.converged, sol.iterations, sol.max_mismatch);
        println!("{:>4} {:>10} {:>8} {:>9} {:>9} {:>9}", "bus", "state", "vm_pu", "va_deg", "p_mw", "q_mvar");
        for i in 0..case.n_buses() {
            println!(
                "{:>4} {:>10} {:>8.4} {:>9.3} {:>9.2} {:>9.2}",
                i,
                format!("{:?}", sol.bus_state[i]),
                sol.v_mag[i],
                sol.v_ang[i],
                sol.p_inj[i],
                sol.q_inj[i]
            );
        }
        println!("{:>4} {:>4} {:>4} {:>9} {:>9} {:>9}", "br", "from", "to", "p_from", "q_from", "load_pct");
        for (k, b) in case.branches.iter().enumerate() {
            println!(
                "{:>4} {:>4} {:>4} {:>9.2} {:>9.2} {:>9.1}",
                k, b.from_bus, b.to_bus, sol.p_from[k], sol.q_from[k], sol.loading_pct[k]
            );
        }
    }
    if !sol.converged {
        bail!("power flow did not converge");
    }
    Ok(())
}
