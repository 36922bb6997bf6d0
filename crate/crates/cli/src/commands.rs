use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use oodno_core::constraint::{apply_probconserv, build_constraint_all};
use oodno_core::fno::{count_flops, FnoModel};
use oodno_core::harness::{
    ablate_diversity, aggregate_csv, constraints_for, cost_sweep, diversity_report,
    generate_data_in, gnuplot_stub, load_trained, matched_width, predict, ratio_csv, rows_csv,
    run_experiment, save_trained, train_method, write_diversity_report, CostSweepSpec,
    ExperimentConfig, ExperimentData, Provenance, ResultRow, Stage,
};
use oodno_core::metrics::score;
use oodno_core::pde_suite::{build_dataset, Dataset, Split};
use oodno_core::trainer::Diversity;
use oodno_core::uq::{Method, PosteriorSummary};

use crate::{Command, Common};

pub fn run(common: &Common, command: Command) -> Result<()> {
    let cfg = common.config()?;
    let root = common.data_root();
    match command {
        Command::GenerateData {
            split,
            n,
            seed,
            out,
        } => {
            let dir = out.unwrap_or_else(|| cfg.data_dir(&root));
            match split {
                Some(split) => {
                    let n = n.unwrap_or(if split == Split::Train {
                        cfg.n_train
                    } else {
                        cfg.n_test
                    });
                    let ds =
                        build_dataset(&cfg.pde_task(), split, n, seed.unwrap_or(cfg.data_seed))?;
                    ds.save(&dir)?;
                    println!("{}", Dataset::paths(&dir, split).2.display());
                }
                None => {
                    if n.is_some() || seed.is_some() {
                        bail!("--n and --seed apply to a single --split; set n_train/n_test/data_seed otherwise");
                    }
                    for p in generate_data_in(&cfg, &dir)? {
                        println!("{}", p.display());
                    }
                }
            }
        }
        Command::Train { method, seed, out } => {
            let data = experiment_data(&cfg, &root)?;
            let tm = train_method(&cfg, method, seed, &data.train_data()?, None)?;
            let dir =
                out.unwrap_or_else(|| cfg.out_dir.join(method.name()).join(format!("seed{seed}")));
            save_trained(&dir, &tm, &cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": dir,
                    "method": method,
                    "seed": seed,
                    "val_mse": tm.val_mse,
                    "epochs": tm.logs.iter().map(Vec::len).collect::<Vec<_>>(),
                })
            );
        }
        Command::Predict {
            checkpoint,
            split,
            out,
        } => {
            let tm = load_trained(&checkpoint)?;
            let test = stored_split(&cfg, &root, split)?;
            let s = predict(&tm, &test.inputs)?;
            s.save(&out)?;
            eprintln!(
                "{} samples of {} written to {}",
                s.n_samples(),
                tm.method,
                out.display()
            );
        }
        Command::Probconserv {
            summary,
            param,
            split,
            out,
        } => {
            let s = PosteriorSummary::load(&summary)?;
            let task = cfg.pde_task();
            let cs = match (param, split) {
                (Some(c), _) => vec![build_constraint_all(&task, c)?; s.n_samples()],
                (None, Some(split)) => constraints_for(&task, &stored_split(&cfg, &root, split)?)?,
                (None, None) => {
                    bail!("give --param or --split to fix the constraint right-hand sides")
                }
            };
            apply_probconserv(&s, &cs)?.save(&out)?;
        }
        Command::Evaluate {
            summary,
            split,
            truth,
            constraint,
            stage,
            out,
        } => {
            let s = PosteriorSummary::load(&summary)?;
            let dir = truth.unwrap_or_else(|| cfg.data_dir(&root));
            let test = Dataset::load(&dir, split)?;
            let cs = if constraint {
                Some(constraints_for(&cfg.pde_task(), &test)?)
            } else {
                None
            };
            let seed = s.meta.seeds.first().copied().unwrap_or(0);
            let report = score(&s, &test.targets, cs.as_deref(), test.family, split, seed)?;
            let train_hash = Dataset::load(&dir, Split::Train)
                .map(|d| d.content_hash())
                .unwrap_or_default();
            let row = ResultRow {
                stage: if stage == "after" {
                    Stage::After
                } else {
                    Stage::Before
                },
                report,
                provenance: Provenance {
                    config_hash: cfg.hash(),
                    train_hash,
                    test_hash: test.content_hash(),
                },
            };
            let line = serde_json::to_string(&row)?;
            match out {
                Some(p) => {
                    let mut f = fs::OpenOptions::new().create(true).append(true).open(&p)?;
                    writeln!(f, "{line}")?;
                }
                None => println!("{line}"),
            }
        }
        Command::Ablate {
            kinds,
            lambdas,
            out,
        } => {
            let data = experiment_data(&cfg, &root)?;
            let kinds = kinds.unwrap_or_else(|| Diversity::ALL.to_vec());
            let rows = ablate_diversity(&cfg, &data, &kinds, &lambdas)?;
            let mut csv =
                String::from("diversity,lambda,seed,split,mse,nmerci,mean_head_distance\n");
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{:.6e},{:.6e},{:.6e}",
                    r.diversity, r.lambda, r.seed, r.split, r.mse, r.nmerci, r.mean_head_distance
                );
            }
            write_outputs(
                &out,
                &[
                    ("ablation.csv", csv),
                    ("ablation.json", serde_json::to_string_pretty(&rows)?),
                    ("ablation.gp", gnuplot_stub("ablation.csv", 2, 5, "MSE")),
                ],
            )?;
        }
        Command::CostSweep {
            ensemble_widths,
            diverse_widths,
            out,
        } => {
            let data = experiment_data(&cfg, &root)?;
            let diverse_widths = match diverse_widths {
                Some(w) => w,
                None => ensemble_widths
                    .iter()
                    .map(|&w| {
                        let mc = oodno_core::fno::FnoConfig {
                            width: w,
                            ..cfg.model_config(1, 0.0)
                        };
                        let target = cfg.ensemble_members as u64 * count_flops(&mc, cfg.nt, cfg.nx);
                        matched_width(&cfg, Method::Diverse, target)
                    })
                    .collect::<oodno_core::Result<_>>()?,
            };
            let spec = CostSweepSpec {
                ensemble_widths,
                diverse_widths,
            };
            let rows = cost_sweep(&cfg, &data, &spec)?;
            let mut csv = String::from("method,width,flops,params,seed,split,mse,nmerci\n");
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{:.6e},{:.6e}",
                    r.method.label(),
                    r.width,
                    r.flops,
                    r.params,
                    r.seed,
                    r.split,
                    r.mse,
                    r.nmerci
                );
            }
            write_outputs(
                &out,
                &[
                    ("cost.csv", csv),
                    ("cost.json", serde_json::to_string_pretty(&rows)?),
                    ("cost.gp", gnuplot_stub("cost.csv", 3, 7, "MSE")),
                ],
            )?;
        }
        Command::DiversityReport { checkpoint, out } => {
            let mut models: Vec<FnoModel> = Vec::new();
            for dir in &checkpoint {
                let tm = load_trained(dir)?;
                if checkpoint.len() == 1 {
                    models = tm.models;
                } else {
                    models.extend(tm.models.into_iter().take(1));
                }
            }
            let report = diversity_report(&models)?;
            for p in write_diversity_report(&out, &report)? {
                println!("{}", p.display());
            }
        }
        Command::Report {
            rows,
            stored_data,
            out,
        } => {
            if rows.is_empty() {
                let data = if stored_data {
                    ExperimentData::load(&cfg, &root)?
                } else {
                    ExperimentData::build(&cfg)?
                };
                let o = run_experiment(&cfg, &data, Some(&out.join("checkpoints")))?;
                write_outputs(
                    &out,
                    &[
                        ("rows.json", serde_json::to_string_pretty(&o.rows)?),
                        ("rows.csv", rows_csv(&o.rows)),
                        ("aggregate.csv", aggregate_csv(&o.rows)),
                        ("ratios.csv", ratio_csv(&o.ratios)),
                        ("config.json", serde_json::to_string_pretty(&cfg)?),
                    ],
                )?;
            } else {
                let mut all = Vec::new();
                for p in &rows {
                    let text = fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                        let row: ResultRow = serde_json::from_str(line)
                            .with_context(|| format!("{} line {}", p.display(), i + 1))?;
                        all.push(row);
                    }
                }
                write_outputs(
                    &out,
                    &[
                        ("rows.csv", rows_csv(&all)),
                        ("aggregate.csv", aggregate_csv(&all)),
                    ],
                )?;
            }
        }
    }
    Ok(())
}

fn experiment_data(cfg: &ExperimentConfig, root: &Path) -> Result<ExperimentData> {
    match ExperimentData::load(cfg, root) {
        Ok(d) => Ok(d),
        Err(oodno_core::Error::MissingArtifact(p)) => {
            eprintln!(
                "{} not found; generating the datasets in memory",
                p.display()
            );
            Ok(ExperimentData::build(cfg)?)
        }
        Err(e) => Err(e.into()),
    }
}

fn stored_split(cfg: &ExperimentConfig, root: &Path, split: Split) -> Result<Dataset> {
    let dir = cfg.data_dir(root);
    Dataset::load(&dir, split).with_context(|| {
        format!(
            "run `oodno generate-data` first (looked in {})",
            dir.display()
        )
    })
}

fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        println!("{}", p.display());
    }
    Ok(())
}
