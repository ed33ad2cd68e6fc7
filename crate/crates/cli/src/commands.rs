//! Command implementations.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde_json::json;

use occot::backends::{
    load_fixture, HttpBackend, HttpConfig, MockBackend, MockExpert, ModelBackend,
};
use occot::dataset::{
    generate_corpus, read_annotations, read_records, read_runs, write_jsonl, AttributeTable,
    CorpusConfig,
};
use occot::eval::{fixtures, render_report, score_runs, BaselineRow, ScoreConfig, ScoreReport};
use occot::pipeline::run_batch;

use crate::config::{echo_path_for_file, write_echo, BackendKind, ConfigEcho, RunConfig};
use crate::scripting::script_from_annotations;
use crate::{CliError, Command};

pub fn execute(command: Command, mut config: RunConfig) -> Result<(), CliError> {
    match command {
        Command::GenData {
            n,
            seed,
            out,
            clarity_threshold,
            attribute_table,
        } => {
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(threshold) = clarity_threshold {
                config.clarity_threshold = threshold;
            }
            if let Some(path) = &attribute_table {
                config.attribute_table = AttributeTable::from_json_file(path)
                    .map_err(|err| CliError::Config(err.to_string()))?;
            }
            config.validate()?;
            gen_data(&config, n, &out)
        }
        Command::Run {
            records,
            out,
            backend,
            annotations,
            noise,
            fixture,
            base_url,
            model,
            seed,
            workers,
            no_expert,
            no_probe,
            expert_failure_rate,
        } => {
            if let Some(kind) = backend {
                config.backend = kind.into();
            }
            if let Some(noise) = noise {
                config.noise = noise;
            }
            if let Some(url) = base_url {
                config.base_url = Some(url);
            }
            if let Some(model) = model {
                config.model = Some(model);
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(workers) = workers {
                config.pipeline.workers = workers;
            }
            if no_expert {
                config.pipeline.expert_enabled = false;
            }
            if no_probe {
                config.pipeline.probe_enabled = false;
            }
            if let Some(rate) = expert_failure_rate {
                config.expert_failure_rate = rate;
            }
            config.validate()?;
            run(
                &config,
                &records,
                &out,
                annotations.as_deref(),
                fixture.as_deref(),
            )
        }
        Command::Eval {
            runs,
            annotations,
            out,
            model_label,
            setting_label,
            description_source,
            baselines,
            synonyms,
            clarity_threshold,
        } => {
            if let Some(threshold) = clarity_threshold {
                config.clarity_threshold = threshold;
            }
            config.validate()?;
            let synonyms = match synonyms.as_deref() {
                Some(path) => {
                    let content = std::fs::read_to_string(path).map_err(|err| {
                        CliError::Config(format!(
                            "cannot read synonyms `{}`: {err}",
                            path.display()
                        ))
                    })?;
                    serde_json::from_str(&content).map_err(|err| {
                        CliError::Config(format!("invalid synonyms `{}`: {err}", path.display()))
                    })?
                }
                None => Default::default(),
            };
            let score_config = ScoreConfig {
                model_label,
                setting_label,
                description_source: description_source.map(Into::into).unwrap_or_default(),
                clarity_threshold: Some(config.clarity_threshold),
                synonyms,
            };
            eval(
                &config,
                &runs,
                &annotations,
                &out,
                &score_config,
                baselines.as_deref(),
            )
        }
        Command::Report {
            out,
            fixture,
            reports,
            baselines,
        } => {
            config.validate()?;
            report(
                &config,
                &out,
                fixture.as_deref(),
                &reports,
                baselines.as_deref(),
            )
        }
        Command::LossSelftest {
            points,
            epsilon,
            seed,
            beta,
            delta,
            w_p,
            w_q,
            w_g,
            alpha_r,
            alpha_l,
            alpha_t,
            lambda_sr,
            lambda_fd,
        } => {
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let mpo = &mut config.mpo;
            for (slot, flag) in [
                (&mut mpo.beta, beta),
                (&mut mpo.delta, delta),
                (&mut mpo.w_p, w_p),
                (&mut mpo.w_q, w_q),
                (&mut mpo.w_g, w_g),
            ] {
                if let Some(value) = flag {
                    *slot = value;
                }
            }
            let staged = &mut config.staged;
            for (slot, flag) in [
                (&mut staged.alpha_r, alpha_r),
                (&mut staged.alpha_l, alpha_l),
                (&mut staged.alpha_t, alpha_t),
                (&mut staged.lambda_sr, lambda_sr),
                (&mut staged.lambda_fd, lambda_fd),
            ] {
                if let Some(value) = flag {
                    *slot = value;
                }
            }
            config.validate()?;
            selftest::run(&config, points, epsilon)
        }
    }
}

fn read_json_array<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let content = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read `{}`", path.display()))
        .map_err(CliError::Runtime)?;
    serde_json::from_str(&content)
        .with_context(|| format!("invalid JSON array in `{}`", path.display()))
        .map_err(CliError::Runtime)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create `{}`", dir.display()))
        .map_err(CliError::Runtime)
}

fn gen_data(config: &RunConfig, n: usize, out: &Path) -> Result<(), CliError> {
    let corpus_config = CorpusConfig {
        clarity_threshold: config.clarity_threshold,
        templates: config.pipeline.templates.clone(),
        attribute_table: config.attribute_table.clone(),
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(n, config.seed, &corpus_config)?;
    ensure_dir(out)?;
    corpus.write_to_dir(out)?;
    let counts = corpus.counts();
    write_echo(
        &out.join("config-echo.json"),
        &ConfigEcho {
            command: "gen-data",
            params: json!({"n": n, "seed": config.seed, "out": out}),
            config,
        },
    )?;
    println!(
        "gen-data: {} records, {} annotations ({} steps), {} preference pairs -> {} (seed {})",
        counts.records,
        counts.annotations,
        counts.annotation_steps,
        counts.preference_pairs,
        out.display(),
        config.seed
    );
    Ok(())
}

fn build_backend(
    config: &RunConfig,
    annotations_path: Option<&Path>,
    fixture_path: Option<&Path>,
) -> Result<Box<dyn ModelBackend>, CliError> {
    match config.backend {
        BackendKind::Mock => {
            let path = annotations_path.ok_or_else(|| {
                CliError::Config("mock backend needs gold annotations (--annotations)".to_string())
            })?;
            let annotations = read_annotations(path)?;
            let script = script_from_annotations(&annotations, config.noise, config.seed)?;
            Ok(Box::new(MockBackend::new(script)))
        }
        BackendKind::Fixture => {
            let path = fixture_path.ok_or_else(|| {
                CliError::Config("fixture backend needs a fixture file (--fixture)".to_string())
            })?;
            Ok(Box::new(load_fixture(path)?))
        }
        BackendKind::Http => {
            let http = HttpConfig {
                path: config.endpoint_path.clone(),
                timeout_secs: config.timeout_secs,
                max_retries: config.max_retries,
                max_in_flight: config.max_in_flight,
                ..HttpConfig::new(
                    config.base_url.clone().expect("validated"),
                    config.model.clone().expect("validated"),
                )
            };
            Ok(Box::new(HttpBackend::new(http)))
        }
    }
}

fn run(
    config: &RunConfig,
    records_path: &Path,
    out: &Path,
    annotations_path: Option<&Path>,
    fixture_path: Option<&Path>,
) -> Result<(), CliError> {
    let backend = build_backend(config, annotations_path, fixture_path)?;
    let expert = MockExpert::new(config.expert_failure_rate, config.seed)
        .map_err(|err| CliError::Config(err.to_string()))?;

    let records = read_records(records_path)?;
    let samples = records
        .iter()
        .map(|record| record.to_sample(&config.attribute_table))
        .collect::<occot::Result<Vec<_>>>()?;

    let results = run_batch(&*backend, &expert, &samples, &config.pipeline);
    let mut runs = Vec::new();
    let mut failures = 0usize;
    for result in results {
        match result {
            Ok(run) => runs.push(run),
            Err(err) => {
                failures += 1;
                eprintln!("run failure: {err}");
            }
        }
    }

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_jsonl(out, &runs)?;
    write_echo(
        &echo_path_for_file(out),
        &ConfigEcho {
            command: "run",
            params: json!({
                "records": records_path,
                "out": out,
                "annotations": annotations_path,
                "fixture": fixture_path,
            }),
            config,
        },
    )?;

    let invoked = runs.iter().filter(|r| r.expert_invoked).count();
    let rate = if runs.is_empty() {
        0.0
    } else {
        invoked as f64 / runs.len() as f64
    };
    println!(
        "run: {} runs -> {} ({} failures); expert invocation rate {:.3}",
        runs.len(),
        out.display(),
        failures,
        rate
    );
    if failures > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "{failures} of {} samples failed",
            samples.len()
        )));
    }
    Ok(())
}

fn eval(
    config: &RunConfig,
    runs_path: &Path,
    annotations_path: &Path,
    out: &Path,
    score_config: &ScoreConfig,
    baselines_path: Option<&Path>,
) -> Result<(), CliError> {
    let runs = read_runs(runs_path)?;
    let annotations = read_annotations(annotations_path)?;
    let report = score_runs(&runs, &annotations, score_config)?;
    let baselines: Vec<BaselineRow> = match baselines_path {
        Some(path) => read_json_array(path)?,
        None => Vec::new(),
    };
    let rendered = render_report(std::slice::from_ref(&report), &baselines);

    ensure_dir(out)?;
    write_text(&out.join("report.md"), &rendered.markdown)?;
    write_text(&out.join("report.csv"), &rendered.csv)?;
    let json_body = serde_json::to_string_pretty(&[&report]).expect("report serializes");
    write_text(&out.join("report.json"), &(json_body + "\n"))?;
    write_echo(
        &out.join("config-echo.json"),
        &ConfigEcho {
            command: "eval",
            params: json!({
                "runs": runs_path,
                "annotations": annotations_path,
                "out": out,
                "baselines": baselines_path,
            }),
            config,
        },
    )?;

    print!("{}", rendered.markdown);
    println!("eval: reports written to {}", out.display());
    Ok(())
}

fn report(
    config: &RunConfig,
    out: &Path,
    fixture: Option<&str>,
    report_paths: &[PathBuf],
    baselines_path: Option<&Path>,
) -> Result<(), CliError> {
    let (reports, baselines) = match fixture {
        Some(name) if name == fixtures::TABLE1 => fixtures::table1(),
        Some(other) => {
            return Err(CliError::Config(format!(
                "unknown fixture `{other}`; available: {}",
                fixtures::TABLE1
            )));
        }
        None => {
            if report_paths.is_empty() {
                return Err(CliError::Config(
                    "either --fixture or --reports is required".to_string(),
                ));
            }
            let mut reports: Vec<ScoreReport> = Vec::new();
            for path in report_paths {
                reports.extend(read_json_array::<ScoreReport>(path)?);
            }
            let baselines = match baselines_path {
                Some(path) => read_json_array(path)?,
                None => Vec::new(),
            };
            (reports, baselines)
        }
    };

    let rendered = render_report(&reports, &baselines);
    ensure_dir(out)?;
    write_text(&out.join("report.md"), &rendered.markdown)?;
    write_text(&out.join("report.csv"), &rendered.csv)?;
    write_echo(
        &out.join("config-echo.json"),
        &ConfigEcho {
            command: "report",
            params: json!({
                "out": out,
                "fixture": fixture,
                "reports": report_paths,
                "baselines": baselines_path,
            }),
            config,
        },
    )?;

    print!("{}", rendered.markdown);
    for (model, setting) in &rendered.missing_baselines {
        eprintln!("note: no baseline for {model} / {setting}; improvement omitted");
    }
    println!("report: tables written to {}", out.display());
    Ok(())
}

fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .with_context(|| format!("cannot write `{}`", path.display()))
        .map_err(CliError::Runtime)
}

mod selftest {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use occot::losses::{
        cross_entropy, finite_diff_check, freeze_schedule, generation_grad, generation_loss,
        generation_loss_from_logps, mpo_loss, mpo_loss_with, preference_grad,
        preference_grad_from_ratios, preference_loss, preference_loss_from_ratios,
        quality_grad_from_ratios, quality_loss, quality_loss_from_ratios, recon_objective,
        staged_supervised_objective, AttributeLosses, Grid2, LogProbTrace, MpoHyper, MpoWeights,
        ParamGroup, ReconLossInputs, TrainPhase,
    };

    use crate::config::RunConfig;
    use crate::CliError;

    const LN_2: f64 = std::f64::consts::LN_2;

    struct Check {
        name: &'static str,
        passed: bool,
        detail: String,
    }

    fn check(name: &'static str, passed: bool, detail: String) -> Check {
        Check {
            name,
            passed,
            detail,
        }
    }

    fn near(got: f64, want: f64, tolerance: f64) -> bool {
        (got - want).abs() <= tolerance
    }

    fn traces_for(lr_c: f64, lr_r: f64) -> (LogProbTrace, LogProbTrace) {
        let base = -1.0 - lr_c.abs() - lr_r.abs();
        (
            LogProbTrace::new(vec![base + lr_c], vec![base]).unwrap(),
            LogProbTrace::new(vec![base + lr_r], vec![base]).unwrap(),
        )
    }

    pub fn run(config: &RunConfig, points: usize, epsilon: f64) -> Result<(), CliError> {
        let unit = MpoHyper {
            beta: 1.0,
            delta: 0.0,
        };
        let mut checks = Vec::new();

        let t = LogProbTrace::identity(vec![-0.25, -0.75]).unwrap();
        let got = preference_loss(&t, &t, &unit).unwrap();
        checks.push(check(
            "preference identity = ln 2",
            near(got, LN_2, 1e-9),
            format!("{got:.9}"),
        ));

        let (c, r) = traces_for(3.0, -2.0);
        let got = preference_loss(
            &c,
            &r,
            &MpoHyper {
                beta: 0.0,
                delta: 0.0,
            },
        )
        .unwrap();
        checks.push(check(
            "preference at beta 0 = ln 2",
            near(got, LN_2, 1e-9),
            format!("{got:.9}"),
        ));

        let (c, r) = traces_for(2.0, 0.0);
        let got = preference_loss(&c, &r, &unit).unwrap();
        checks.push(check(
            "preference(lr 2 vs 0) = 0.126928",
            near(got, 0.126928, 1e-6),
            format!("{got:.9}"),
        ));
        let (gc, gr) = preference_grad(&c, &r, &unit).unwrap();
        checks.push(check(
            "preference gradient = -/+0.119203",
            near(gc, -0.119203, 1e-6) && near(gr, 0.119203, 1e-6),
            format!("({gc:.9}, {gr:.9})"),
        ));

        let (c, r) = traces_for(0.0, 0.0);
        let q = quality_loss(&c, &r, &unit).unwrap();
        checks.push(check(
            "quality identity total = 2 ln 2",
            near(q.total, 2.0 * LN_2, 1e-9),
            format!("{:.9}", q.total),
        ));
        let (c, r) = traces_for(3.0, -3.0);
        let q = quality_loss(&c, &r, &unit).unwrap();
        checks.push(check(
            "quality(3, -3) = 0.097174",
            near(q.total, 0.097174, 1e-6),
            format!("{:.9}", q.total),
        ));
        let (c, r) = traces_for(0.0, 0.0);
        let q = quality_loss(
            &c,
            &r,
            &MpoHyper {
                beta: 1.0,
                delta: 1.0,
            },
        )
        .unwrap();
        checks.push(check(
            "quality with shift 1 = 1.626524",
            near(q.total, 1.626524, 1e-6)
                && near(q.l_plus, 1.313262, 1e-6)
                && near(q.l_minus, 0.313262, 1e-6),
            format!("{:.9}", q.total),
        ));

        let ln4 = 4.0_f64.ln();
        let uniform4 = LogProbTrace::identity(vec![-ln4; 3]).unwrap();
        let mean = LogProbTrace::identity(vec![-0.5, -1.5]).unwrap();
        let certain = LogProbTrace::identity(vec![0.0, 0.0, 0.0]).unwrap();
        checks.push(check(
            "generation: uniform-4 = ln 4, mean = 1, certain = 0",
            near(generation_loss(&uniform4), ln4, 1e-9)
                && near(generation_loss(&mean), 1.0, 1e-9)
                && generation_loss(&certain) == 0.0,
            format!("{:.9}", generation_loss(&uniform4)),
        ));

        let chosen = LogProbTrace::identity(vec![-0.5, -0.5]).unwrap();
        let rejected = LogProbTrace::identity(vec![-2.0]).unwrap();
        let got = mpo_loss(&chosen, &rejected, &MpoWeights::default(), &unit).unwrap();
        checks.push(check(
            "combined objective reference case = 2.579441",
            near(got, 2.579441, 1e-6),
            format!("{got:.9}"),
        ));
        let zero = MpoWeights {
            w_p: 0.0,
            w_q: 0.0,
            w_g: 0.0,
        };
        checks.push(check(
            "combined objective with zero weights = 0",
            mpo_loss(&chosen, &rejected, &zero, &unit).unwrap() == 0.0,
            "0".to_string(),
        ));

        let ce = cross_entropy(&[0.9, 0.1], 1).unwrap();
        checks.push(check(
            "cross entropy: one-hot = 0, uniform = ln 2, (0.9,0.1|1) = ln 10",
            cross_entropy(&[0.0, 1.0], 1).unwrap() == 0.0
                && near(cross_entropy(&[0.5, 0.5], 0).unwrap(), LN_2, 1e-9)
                && near(ce, std::f64::consts::LN_10, 1e-9),
            format!("{ce:.9}"),
        ));

        let attr = AttributeLosses {
            roundness: 1.0,
            length: 1.0,
            thickness: 1.0,
        };
        let staged = occot::losses::StagedWeights {
            alpha_r: 0.5,
            alpha_l: 0.25,
            alpha_t: 0.25,
            lambda_sr: 1.0,
            lambda_fd: 2.0,
        };
        let got = staged_supervised_objective(&attr, 0.5, 0.25, &staged).unwrap();
        checks.push(check(
            "staged objective hand case = 2.0",
            near(got, 2.0, 1e-9),
            format!("{got:.9}"),
        ));

        let (masked, total) = recon_objective(&ReconLossInputs {
            image: Grid2::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            occlusion_mask: Grid2::from_rows(vec![vec![1.0, 0.0], vec![0.5, 1.0]]).unwrap(),
            l3d: 0.2,
            l2d: 0.4,
            lambda_2d: 0.5,
        })
        .unwrap();
        let expected = Grid2::from_rows(vec![vec![1.0, 0.0], vec![1.5, 4.0]]).unwrap();
        checks.push(check(
            "masked reconstruction composition",
            masked == expected && near(total, 0.4, 1e-9),
            format!("total {total:.9}"),
        ));

        let warm = freeze_schedule(TrainPhase::MlpWarmup);
        let incr = freeze_schedule(TrainPhase::VitIncremental);
        let full = freeze_schedule(TrainPhase::FullModel);
        checks.push(check(
            "freeze schedule strictly nested",
            warm.len() == 1
                && warm.contains(&ParamGroup::Mlp)
                && incr.len() == 2
                && full.len() == 3
                && warm.is_subset(&incr)
                && incr.is_subset(&full),
            format!(
                "{:?} < {:?} < {:?}",
                warm.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
                incr.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
                full.iter().map(|g| g.to_string()).collect::<Vec<_>>()
            ),
        ));

        // Configured-hyperparameter linearity check.
        let weights = config.mpo.weights();
        let hyper = config.mpo.hyper();
        let arg = config.mpo.quality_arg;
        let doubled = MpoWeights {
            w_p: 2.0 * weights.w_p,
            w_q: 2.0 * weights.w_q,
            w_g: 2.0 * weights.w_g,
        };
        let base = mpo_loss_with(&chosen, &rejected, &weights, &hyper, arg).unwrap();
        let scaled = mpo_loss_with(&chosen, &rejected, &doubled, &hyper, arg).unwrap();
        checks.push(check(
            "configured weights scale linearly",
            near(scaled, 2.0 * base, 1e-12 * base.abs().max(1.0)),
            format!(
                "beta {} delta {}: {base:.6} -> {scaled:.6}",
                hyper.beta, hyper.delta
            ),
        ));

        // Gradient sweep.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut max_rel = 0.0_f64;
        for _ in 0..points {
            let hyper = MpoHyper {
                beta: rng.gen_range(0.05..2.0),
                delta: rng.gen_range(-1.0..1.0),
            };
            let point = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let (gc, gr) = preference_grad_from_ratios(point[0], point[1], &hyper);
            let err = finite_diff_check(
                |p| preference_loss_from_ratios(p[0], p[1], &hyper),
                &[gc, gr],
                &point,
                epsilon,
            )
            .map_err(|e| CliError::Runtime(e.into()))?;
            max_rel = max_rel.max(err);

            let (gc, gr) = quality_grad_from_ratios(point[0], point[1], &hyper);
            let err = finite_diff_check(
                |p| quality_loss_from_ratios(p[0], p[1], &hyper).total,
                &[gc, gr],
                &point,
                epsilon,
            )
            .map_err(|e| CliError::Runtime(e.into()))?;
            max_rel = max_rel.max(err);

            let len = rng.gen_range(1..8);
            let logps: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..-0.01)).collect();
            let trace = LogProbTrace::identity(logps.clone()).unwrap();
            let err = finite_diff_check(
                generation_loss_from_logps,
                &generation_grad(&trace),
                &logps,
                epsilon,
            )
            .map_err(|e| CliError::Runtime(e.into()))?;
            max_rel = max_rel.max(err);
        }
        checks.push(check(
            "analytic gradients match finite differences",
            max_rel < 1e-6,
            format!("max relative error {max_rel:.3e} over {points} points"),
        ));

        let mut failed = 0usize;
        for c in &checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            println!("{mark} {:<48} {}", c.name, c.detail);
            if !c.passed {
                failed += 1;
            }
        }
        println!(
            "loss-selftest: {} checks, {failed} failures, max gradient relative error {max_rel:.3e}",
            checks.len()
        );
        if failed > 0 {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "{failed} self-test checks failed"
            )));
        }
        Ok(())
    }
}
