//! The CLI verbs. Each returns the table it wrote so callers and tests can
//! inspect it without re-reading files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use coupled_core::coupling::{CouplingConfig, GuidanceSource, NfeReport, Strategy, Trace};
use coupled_core::ddpm::SamplerKind;
use coupled_core::rng::{derive_seed, stream, stream_rng};
use coupled_core::sde::{kernel_score, pc_sample, ScoreNet, ToySignals};
use coupled_core::world::Corruption;
use coupled_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ScoreMode};
use crate::error::{HarnessError, Result};
use crate::pipeline::{evaluate, sampling_streams, seed_role, BundleKind, BundleStore, Split, World};
use crate::results::{
    hex_hash, mean_se, write_csv, write_table, Provenance, ResultRow, ResultTable, RunRecord, StepRow, StepTable,
    TimingRow, VariantRow, VariantTable, CODE_VERSION,
};

/// `--out` wins over the config's `output_dir`.
pub fn resolve_out(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| HarnessError::Config {
            field: "output_dir".into(),
            msg: "no output directory; set output_dir or pass --out".into(),
        })
}

pub fn provenance(cfg: &ExperimentConfig, command: &str) -> Provenance {
    Provenance {
        command: command.into(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        code_version: CODE_VERSION.into(),
    }
}

/// Output of one (seed, corruption) job.
struct Job<T> {
    corruption: Corruption,
    value: T,
    timings: Vec<TimingRow>,
}

/// Runs `f` on every (seed, corruption) pair, concurrently, and returns the
/// results in (seed, corruption) config order.
fn for_each_split<T, F>(cfg: &ExperimentConfig, out: &Path, f: F) -> Result<Vec<Job<T>>>
where
    T: Send,
    F: Fn(&World, &Split, &mut BundleStore, &mut Vec<TimingRow>) -> Result<T> + Sync,
{
    let per_seed: Vec<Result<Vec<Job<T>>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let world = World::build(cfg, seed)?;
            cfg.corruptions
                .par_iter()
                .map(|&corruption| {
                    let split = Split::build(&world, corruption)?;
                    let mut store = BundleStore::new(cfg, &world, &split, out);
                    let mut timings = Vec::new();
                    let value = f(&world, &split, &mut store, &mut timings)?;
                    let label = corruption.label();
                    timings.extend(store.timings.iter().map(|t| TimingRow {
                        corruption: label.clone(),
                        seed,
                        stage: if t.loaded { "load" } else { "train" }.into(),
                        name: t.kind.clone(),
                        seconds: t.seconds,
                    }));
                    Ok(Job {
                        corruption,
                        value,
                        timings,
                    })
                })
                .collect()
        })
        .collect();
    let mut jobs = Vec::new();
    for r in per_seed {
        jobs.extend(r?);
    }
    Ok(jobs)
}

fn write_timings(out: &Path, jobs: &[Job<impl Send>]) -> Result<()> {
    let rows: Vec<&TimingRow> = jobs.iter().flat_map(|j| &j.timings).collect();
    write_csv(BufWriter::new(File::create(out.join("timings.csv"))?), &rows)
}

fn trace_path(out: &Path, corruption: &Corruption, method: &str, seed: u64) -> PathBuf {
    out.join("traces")
        .join(corruption.label())
        .join(method)
        .join(format!("seed-{seed}.jsonl"))
}

fn save_trace(path: &Path, trace: &Trace) -> Result<()> {
    std::fs::create_dir_all(path.parent().expect("trace path has a parent"))?;
    let mut w = BufWriter::new(File::create(path)?);
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

struct MethodRun {
    method: Strategy,
    accuracy: f64,
    nfe: NfeReport,
    record: RunRecord,
}

fn run_record(corruption: &Corruption, name: &str, seed: u64, accuracy: f64, trace: &Trace, y_hat: &Tensor) -> RunRecord {
    RunRecord {
        corruption: corruption.label(),
        method: name.into(),
        seed,
        accuracy,
        input_hash: hex_hash(trace.input_hash),
        init_seed: trace.init_seed,
        step_seed: trace.step_seed,
        output_hash: hex_hash(y_hat.fingerprint()),
    }
}

/// Trains or loads every bundle the configured methods need.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TimingRow>> {
    std::fs::create_dir_all(out)?;
    let jobs = for_each_split(cfg, out, |_, _, store, _| {
        for &m in &cfg.methods {
            store.get(BundleKind::for_method(m, cfg.coupling(m).guidance))?;
        }
        Ok(())
    })?;
    write_timings(out, &jobs)?;
    Ok(jobs.into_iter().flat_map(|j| j.timings).collect())
}

/// The method comparison: every method on every corruption, aggregated over
/// replicates.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<ResultTable> {
    std::fs::create_dir_all(out)?;
    let jobs = for_each_split(cfg, out, |world, split, store, timings| {
        let mut runs = Vec::new();
        for &m in &cfg.methods {
            let ccfg = cfg.coupling(m);
            let bundle = store.get(BundleKind::for_method(m, ccfg.guidance))?;
            let ev = evaluate(&bundle, split, &ccfg, &mut sampling_streams(world.seed, false))?;
            save_trace(&trace_path(out, &split.corruption, m.name(), world.seed), &ev.trace)?;
            timings.push(TimingRow {
                corruption: split.corruption.label(),
                seed: world.seed,
                stage: "evaluate".into(),
                name: m.name().into(),
                seconds: ev.seconds,
            });
            runs.push(MethodRun {
                method: m,
                accuracy: ev.accuracy,
                nfe: ev.nfe_total,
                record: run_record(&split.corruption, m.name(), world.seed, ev.accuracy, &ev.trace, &ev.y_hat),
            });
        }
        Ok((runs, split.labels.len()))
    })?;
    write_timings(out, &jobs)?;

    let mut rows = Vec::new();
    for c in &cfg.corruptions {
        for &m in &cfg.methods {
            let cell: Vec<(&MethodRun, usize)> = jobs
                .iter()
                .filter(|j| j.corruption == *c)
                .flat_map(|j| j.value.0.iter().filter(|r| r.method == m).map(move |r| (r, j.value.1)))
                .collect();
            let accs: Vec<f64> = cell.iter().map(|(r, _)| r.accuracy).collect();
            let (mean, se) = mean_se(&accs, cell[0].1);
            let nfe = cell[0].0.nfe;
            if cell.iter().any(|(r, _)| r.nfe != nfe) {
                return Err(HarnessError::InputMismatch(format!(
                    "{} call counts differ between replicates",
                    m.name()
                )));
            }
            rows.push(ResultRow {
                corruption: c.label(),
                method: m.name().into(),
                accuracy_mean: mean,
                accuracy_se: se,
                replicates: accs.len(),
                nfe_signal: nfe.denoiser_x_calls,
                nfe_logit: nfe.denoiser_y_calls,
                nfe_classifier: nfe.classifier_calls,
            });
        }
    }
    let runs: Vec<RunRecord> = jobs
        .iter()
        .flat_map(|j| j.value.0.iter().map(|r| r.record.clone()))
        .collect();
    let table = ResultTable {
        provenance: provenance(cfg, "run"),
        rows,
        runs,
    };
    write_table(out, "results", &table.provenance, &table.rows, &table)?;
    Ok(table)
}

/// Accuracy of every stepped method at each step count.
pub fn cmd_ablate_steps(cfg: &ExperimentConfig, out: &Path, steps: Option<&[usize]>) -> Result<StepTable> {
    let steps: Vec<usize> = steps.map_or_else(|| cfg.ablate_steps.clone(), <[usize]>::to_vec);
    if steps.is_empty() {
        return Err(HarnessError::Config {
            field: "ablate_steps".into(),
            msg: "the step list is empty".into(),
        });
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config {
            field: "ablate_steps".into(),
            msg: "the step list must ascend strictly".into(),
        });
    }
    let methods: Vec<Strategy> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| *m != Strategy::BaselineNoisy)
        .collect();
    let sweep: Vec<(Strategy, CouplingConfig)> = methods
        .iter()
        .flat_map(|&m| steps.iter().map(move |&s| (m, cfg.coupling(m).rescaled(s))))
        .collect();
    for (m, c) in &sweep {
        c.validate(cfg.model.diffusion_steps).map_err(|e| HarnessError::Config {
            field: format!("ablate_steps ({})", m.name()),
            msg: e.to_string(),
        })?;
    }
    std::fs::create_dir_all(out)?;
    let jobs = for_each_split(cfg, out, |world, split, store, _| {
        let mut res = Vec::new();
        for (m, c) in &sweep {
            let bundle = store.get(BundleKind::for_method(*m, c.guidance))?;
            let ev = evaluate(&bundle, split, c, &mut sampling_streams(world.seed, false))?;
            res.push((*m, c.steps, ev.accuracy, ev.nfe_total));
        }
        Ok((res, split.labels.len()))
    })?;
    let mut rows = Vec::new();
    for c in &cfg.corruptions {
        for (m, sc) in &sweep {
            let cell: Vec<(f64, NfeReport, usize)> = jobs
                .iter()
                .filter(|j| j.corruption == *c)
                .flat_map(|j| {
                    j.value
                        .0
                        .iter()
                        .filter(|r| r.0 == *m && r.1 == sc.steps)
                        .map(move |r| (r.2, r.3, j.value.1))
                })
                .collect();
            let accs: Vec<f64> = cell.iter().map(|r| r.0).collect();
            let (mean, se) = mean_se(&accs, cell[0].2);
            rows.push(StepRow {
                corruption: c.label(),
                strategy: m.name().into(),
                steps: sc.steps,
                accuracy_mean: mean,
                accuracy_se: se,
                nfe_signal: cell[0].1.denoiser_x_calls,
                nfe_logit: cell[0].1.denoiser_y_calls,
                nfe_classifier: cell[0].1.classifier_calls,
            });
        }
    }
    let table = StepTable {
        provenance: provenance(cfg, "ablate-steps"),
        rows,
    };
    write_table(out, "ablate_steps", &table.provenance, &table.rows, &table)?;
    Ok(table)
}

struct Variant {
    name: &'static str,
    kind: BundleKind,
    coupling: CouplingConfig,
}

/// Evaluates two variants per split with shared inputs and seeds, plus a
/// replay of each under a second posterior-noise stream.
fn compare_variants(cfg: &ExperimentConfig, out: &Path, command: &str, variants: [Variant; 2]) -> Result<VariantTable> {
    for v in &variants {
        v.coupling
            .validate(cfg.model.diffusion_steps)
            .map_err(|e| HarnessError::Config {
                field: format!("overrides.{}", crate::config::method_key(v.coupling.strategy)),
                msg: e.to_string(),
            })?;
    }
    std::fs::create_dir_all(out)?;
    let jobs = for_each_split(cfg, out, |world, split, store, _| {
        let mut res = Vec::new();
        for v in &variants {
            let bundle = store.get(v.kind)?;
            let ev = evaluate(&bundle, split, &v.coupling, &mut sampling_streams(world.seed, false))?;
            let replay = evaluate(&bundle, split, &v.coupling, &mut sampling_streams(world.seed, true))?;
            let same = ev.y_hat.data().iter().zip(replay.y_hat.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let record = run_record(&split.corruption, v.name, world.seed, ev.accuracy, &ev.trace, &ev.y_hat);
            res.push((record, same));
        }
        Ok((res, split.labels.len()))
    })?;
    let mut rows = Vec::new();
    for c in &cfg.corruptions {
        let mut stats = Vec::new();
        for (k, v) in variants.iter().enumerate() {
            let cell: Vec<(&RunRecord, bool, usize)> = jobs
                .iter()
                .filter(|j| j.corruption == *c)
                .map(|j| (&j.value.0[k].0, j.value.0[k].1, j.value.1))
                .collect();
            let accs: Vec<f64> = cell.iter().map(|r| r.0.accuracy).collect();
            let (mean, se) = mean_se(&accs, cell[0].2);
            stats.push((v.name, mean, se, cell.iter().all(|r| r.1)));
        }
        let diff = stats[0].1 - stats[1].1;
        for (name, mean, se, same) in stats {
            rows.push(VariantRow {
                corruption: c.label(),
                variant: name.into(),
                accuracy_mean: mean,
                accuracy_se: se,
                difference: diff,
                replay_identical: same,
            });
        }
    }
    let runs = jobs
        .iter()
        .flat_map(|j| j.value.0.iter().map(|r| r.0.clone()))
        .collect();
    let table = VariantTable {
        provenance: provenance(cfg, command),
        rows,
        runs,
    };
    let stem = command.replace('-', "_");
    write_table(out, &stem, &table.provenance, &table.rows, &table)?;
    Ok(table)
}

/// Per-step coupling guided by clean estimates versus noisy samples, each
/// with its own trained bundle.
pub fn cmd_ablate_guidance(cfg: &ExperimentConfig, out: &Path) -> Result<VariantTable> {
    let base = cfg.coupling(Strategy::Parallel);
    let variant = |name, g| Variant {
        name,
        kind: BundleKind::Parallel(g),
        coupling: CouplingConfig { guidance: g, ..base },
    };
    compare_variants(
        cfg,
        out,
        "ablate-guidance",
        [
            variant("clean_estimate", GuidanceSource::CleanEstimate),
            variant("noisy_sample", GuidanceSource::NoisySample),
        ],
    )
}

/// Per-step coupling under ancestral sampling versus deterministic DDIM.
pub fn cmd_ablate_sampler(cfg: &ExperimentConfig, out: &Path) -> Result<VariantTable> {
    let base = cfg.coupling(Strategy::Parallel);
    let variant = |name, sampler| Variant {
        name,
        kind: BundleKind::Parallel(base.guidance),
        coupling: CouplingConfig { sampler, ..base },
    };
    compare_variants(
        cfg,
        out,
        "ablate-sampler",
        [
            variant("ddpm", SamplerKind::Ddpm),
            variant("ddim_eta0", SamplerKind::Ddim { eta: 0.0 }),
        ],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeExampleRow {
    pub seed: u64,
    pub index: usize,
    pub mse_before: f64,
    pub mse_after: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeReport {
    pub provenance: Provenance,
    pub mode: ScoreMode,
    pub examples: usize,
    pub improved_fraction: f64,
    pub mean_mse_before: f64,
    pub mean_mse_after: f64,
    pub score_losses: Vec<f64>,
}

/// Predictor-corrector enhancement of corrupted toy signals.
pub fn cmd_sde_demo(cfg: &ExperimentConfig, out: &Path) -> Result<SdeReport> {
    let spec = cfg.sde.as_ref().ok_or_else(|| HarnessError::Config {
        field: "sde".into(),
        msg: "sde-demo needs an [sde] section".into(),
    })?;
    if spec.pc.steps == 0 {
        return Err(HarnessError::Config {
            field: "sde.pc.steps".into(),
            msg: "must be at least 1".into(),
        });
    }
    let data = ToySignals::generate(&spec.signals)?;
    let (net, losses) = match spec.mode {
        ScoreMode::Analytic => (None, Vec::new()),
        ScoreMode::Learned => {
            let (n, l) = ScoreNet::train(&data, spec.ouve, &spec.score_training)?;
            (Some(n), l)
        }
    };
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let base = derive_seed(seed, seed_role::SDE_SAMPLE);
        let per: Vec<Result<(SdeExampleRow, Option<Vec<(f64, Tensor)>>)>> = (0..data.clean.len())
            .into_par_iter()
            .map(|i| {
                let (x0, xc) = (&data.clean[i], &data.corrupted[i]);
                let mut rng = stream_rng(derive_seed(base, i as u64), stream::X_STEP);
                let res = match &net {
                    None => pc_sample(|x, t, c| kernel_score(x, x0, c, t, &spec.ouve), xc, spec.pc, &spec.ouve, &mut rng)?,
                    Some(n) => pc_sample(|x, t, c| n.score(x, t, c), xc, spec.pc, &spec.ouve, &mut rng)?,
                };
                let before = xc.mse(x0)?;
                let after = res.terminal.mse(x0)?;
                let row = SdeExampleRow {
                    seed,
                    index: i,
                    mse_before: before,
                    mse_after: after,
                    improved: after < before,
                };
                Ok((row, (i < spec.trajectories).then_some(res.trajectory)))
            })
            .collect();
        for r in per {
            let (row, traj) = r?;
            if let Some(traj) = traj {
                write_trajectory(&out.join("trajectories").join(format!("seed-{seed}")), row.index, &traj)?;
            }
            rows.push(row);
        }
    }
    let n = rows.len() as f64;
    let report = SdeReport {
        provenance: provenance(cfg, "sde-demo"),
        mode: spec.mode.clone(),
        examples: rows.len(),
        improved_fraction: rows.iter().filter(|r| r.improved).count() as f64 / n,
        mean_mse_before: rows.iter().map(|r| r.mse_before).sum::<f64>() / n,
        mean_mse_after: rows.iter().map(|r| r.mse_after).sum::<f64>() / n,
        score_losses: losses,
    };
    write_table(out, "sde_demo", &report.provenance, &rows, &report)?;
    Ok(report)
}

/// `t,v0,v1,…` with one line per discretisation point.
fn write_trajectory(dir: &Path, index: usize, traj: &[(f64, Tensor)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(format!("example-{index}.csv")))?));
    let len = traj.first().map_or(0, |(_, x)| x.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..len).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for (t, x) in traj {
        let mut rec = vec![format!("{t:?}")];
        rec.extend(x.data().iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub input_hash: String,
    pub init_seed: u64,
    pub step_seed: u64,
    pub events: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub final_nfe: NfeReport,
    /// Every counter is non-decreasing along the trace.
    pub nfe_monotone: bool,
}

pub fn cmd_inspect_trace(path: &Path) -> Result<TraceSummary> {
    let text = std::fs::read_to_string(path)?;
    let trace = Trace::read_jsonl(&text)?;
    let mut by_kind = BTreeMap::new();
    for e in &trace.events {
        let name = serde_json::to_value(e.kind)?
            .as_str()
            .map_or_else(|| format!("{:?}", e.kind), str::to_string);
        *by_kind.entry(name).or_insert(0) += 1;
    }
    let monotone = trace.events.windows(2).all(|w| {
        let (a, b) = (&w[0].nfe, &w[1].nfe);
        a.denoiser_x_calls <= b.denoiser_x_calls
            && a.denoiser_y_calls <= b.denoiser_y_calls
            && a.classifier_calls <= b.classifier_calls
    });
    Ok(TraceSummary {
        input_hash: hex_hash(trace.input_hash),
        init_seed: trace.init_seed,
        step_seed: trace.step_seed,
        events: trace.events.len(),
        by_kind,
        final_nfe: trace.events.last().map(|e| e.nfe).unwrap_or_default(),
        nfe_monotone: monotone,
    })
}
