//! Subcommand implementations. Each writes its artifacts under a directory
//! and returns what it wrote; `main` only parses flags and maps errors.

use std::path::{Path, PathBuf};

use bdl_core::bootstrap::{
    full_dataset, load_combined, rerun_from_manifest, run_algorithm1, train_baseline, view_dataset, ArtifactEntry,
    ExperimentRecord, PipelineOutput,
};
use bdl_core::bounds::{generalization_bound, sweep, sweep_csv, BoundParam, SweepRow};
use bdl_core::diffusion::{sample_reverse, DiffusionSchedule, PosteriorOracle, SamplerOptions};
use bdl_core::evalkit::{eval_losses, EvalConfig, EvalDraws, EvalReport};
use bdl_core::io::{self, sha256_hex};
use bdl_core::neural::{train_view_denoiser, TrainingCurve};
use bdl_core::rng::{streams, Substream};
use bdl_core::synthdata::{desk_spec, Dataset, DatasetKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BoundsConfig, CliError, CliResult, ExperimentConfig, SampleConfig};
use crate::plot::Chart;

/// Runs `f` on a pool of `threads` workers; `Some(1)` is the bit-exact
/// serial mode, `None` uses every core.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Content-hash manifest for commands other than `bootstrap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> CliResult<Self> {
        Ok(Self {
            command: command.into(),
            config_sha256: sha256_hex(cfg.to_toml()?.as_bytes()),
            artifacts: Vec::new(),
        })
    }

    fn put(&mut self, dir: &Path, name: &str, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = dir.join(rel);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(&path, bytes)?;
        self.artifacts.push(ArtifactEntry {
            name: name.into(),
            path: rel.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn put_dataset(&mut self, dir: &Path, name: &str, rel: &str, ds: &Dataset) -> CliResult<()> {
        io::write_dataset(&dir.join(rel), ds)?;
        self.artifacts.push(ArtifactEntry {
            name: name.into(),
            path: rel.into(),
            sha256: sha256_hex(&io::encode_dataset(ds)?),
        });
        Ok(())
    }

    fn write(&self, dir: &Path, file: &str) -> CliResult<PathBuf> {
        let path = dir.join(file);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

fn curve_chart(title: &str, curves: &[(String, TrainingCurve)]) -> String {
    let mut chart = Chart::new(title, "epoch", "training loss");
    chart.log_y = true;
    for (id, c) in curves {
        chart = chart.with_series(id, c.points.iter().map(|p| (p.epoch as f64, p.loss)).collect());
    }
    chart.to_svg()
}

/// Samples `S₀` and every view dataset.
pub fn cmd_gen(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Manifest> {
    cfg.write_resolved(dir)?;
    let p = &cfg.pipeline;
    let spec = desk_spec(&p.spec)?;
    let mut man = Manifest::new("gen", cfg)?;
    man.put(dir, "spec", "data/spec.json", serde_json::to_string(&spec)?.as_bytes())?;
    man.put_dataset(dir, "s0", "data/s0.bin", &full_dataset(&spec, p)?)?;
    let views: Vec<_> = (0..p.views.len())
        .into_par_iter()
        .map(|g| view_dataset(&spec, p, g))
        .collect::<bdl_core::Result<_>>()?;
    for (vc, (ops, ds)) in p.views.iter().zip(views) {
        man.put_dataset(dir, &format!("data:{}", vc.id), &format!("data/view-{}.bin", vc.id), &ds)?;
        for op in &ops {
            man.put(dir, &format!("op:{}", op.id), &format!("operators/{}.json", op.id), op.to_json()?.as_bytes())?;
        }
    }
    man.write(dir, "gen-manifest.json")?;
    Ok(man)
}

/// Trains one denoiser per view group on its stored dataset.
pub fn cmd_train_views(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Manifest> {
    cfg.write_resolved(dir)?;
    let p = &cfg.pipeline;
    let spec = desk_spec(&p.spec)?;
    let schedule = p.schedule_for(&spec)?;
    let trained: Vec<_> = p
        .views
        .par_iter()
        .map(|vc| {
            let path = dir.join(format!("data/view-{}.bin", vc.id));
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "missing view dataset {}; run `bdl gen` first",
                    path.display()
                )));
            }
            let ds = io::read_dataset(&path)?;
            let (net, curve) = train_view_denoiser(&ds, &schedule, &vc.net, &vc.train, spec.bound)
                .map_err(|e| e.in_stage(format!("view:{}", vc.id)))?;
            Ok((vc.id.clone(), net, curve))
        })
        .collect::<CliResult<_>>()?;
    let mut man = Manifest::new("train-views", cfg)?;
    let mut curves = Vec::new();
    for (id, net, curve) in trained {
        let extra = serde_json::json!({"role": "view", "view": id, "precond": net.precond, "bound": net.bound});
        man.put(dir, &format!("net:{id}"), &format!("nets/view-{id}.bdlp"), &io::encode_params(&net.params, extra)?)?;
        man.put(dir, &format!("curve:{id}"), &format!("curves/view-{id}.csv"), curve.to_csv().as_bytes())?;
        curves.push((id, curve));
    }
    std::fs::create_dir_all(dir.join("plots"))?;
    std::fs::write(dir.join("plots/view-losses.svg"), curve_chart("view training loss", &curves))?;
    man.write(dir, "views-manifest.json")?;
    Ok(man)
}

fn write_pipeline_plots(dir: &Path, out: &PipelineOutput) -> CliResult<()> {
    std::fs::create_dir_all(dir.join("plots"))?;
    let mut curves = out.view_curves.clone();
    if let Some(r) = &out.residual_report {
        curves.push(("residual".into(), r.curve.clone()));
    }
    std::fs::write(dir.join("plots/losses.svg"), curve_chart("training loss", &curves))?;
    Ok(())
}

/// The full pipeline; writes `manifest.json` with every artifact hash.
pub fn cmd_bootstrap(cfg: &ExperimentConfig, dir: &Path) -> CliResult<ExperimentRecord> {
    cfg.write_resolved(dir)?;
    let out = run_algorithm1(&cfg.pipeline, Some(dir))?;
    write_pipeline_plots(dir, &out)?;
    Ok(out.record)
}

/// Reruns the configuration stored in a manifest into `dir`.
pub fn cmd_bootstrap_rerun(manifest: &Path, dir: &Path) -> CliResult<ExperimentRecord> {
    if !manifest.exists() {
        return Err(CliError::Config(format!("missing manifest {}", manifest.display())));
    }
    std::fs::create_dir_all(dir)?;
    let out = rerun_from_manifest(manifest, Some(dir))?;
    write_pipeline_plots(dir, &out)?;
    Ok(out.record)
}

fn require_run(run: &Path) -> CliResult<()> {
    let m = run.join("manifest.json");
    if m.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "missing {}; run `bdl bootstrap run` first",
            m.display()
        )))
    }
}

/// Draws samples from a trained run with the configured sampler.
pub fn cmd_sample(run: &Path, cfg: &SampleConfig) -> CliResult<PathBuf> {
    require_run(run)?;
    let (combined, record) = load_combined(run)?;
    let opts = SamplerOptions {
        steps: cfg.steps,
        kind: cfg.kind,
        record_trajectory: false,
    };
    let stream = Substream::new(cfg.seed, streams::SAMPLER);
    let rows: Vec<Vec<f64>> = (0..cfg.count as u64)
        .into_par_iter()
        .map(|i| sample_reverse(&combined, &record.schedule, &opts, stream, i).map(|o| o.x))
        .collect::<bdl_core::Result<_>>()?;
    let ds = Dataset::from_flat(record.spec_id.clone(), DatasetKind::Full, combined.m, rows.concat(), stream)?;
    let path = run.join("samples/samples.bin");
    io::write_dataset(&path, &ds)?;
    let mut csv = String::from("sample,mean,rms,min,max\n");
    for (i, r) in rows.iter().enumerate() {
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let rms = (r.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        csv.push_str(&format!("{i},{mean},{rms},{lo},{hi}\n"));
    }
    std::fs::write(run.join("samples/summary.csv"), csv)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub reports: Vec<EvalReport>,
    /// `1 − R̂_combined / R̂_baseline` when a baseline was trained.
    pub relative_improvement: Option<f64>,
}

pub const EVAL_CSV_HELP: &str = "eval.csv columns: denoiser,t_lo,t_hi,sigma_lo,sigma_hi,r,r_se,l,l_se,v,v_se \
(one row per noise bin); comparison.csv: denoiser,r,r_se,l,l_se,v,v_se,gap,gap_se";

/// `R̂`, `L̂` and `V̂` of a trained run against the exact oracle, optionally
/// next to a baseline trained on `S₀` alone with the residual's budget.
pub fn cmd_eval(run: &Path, eval: &EvalConfig, baseline: bool) -> CliResult<EvalSummary> {
    require_run(run)?;
    let (combined, record) = load_combined(run)?;
    let spec = desk_spec(&record.config.spec)?;
    let schedule: DiffusionSchedule = record.schedule;
    let oracle = PosteriorOracle::new(spec.clone());
    let draws = EvalDraws::new(&spec, &schedule, eval.bins, eval.per_bin, Substream::new(eval.seed, streams::EVAL))?;
    let cfg_hash = sha256_hex(serde_json::to_string(&record.config)?.as_bytes())[..12].to_string();
    let mut reports = vec![EvalReport::from_terms(
        "combined",
        eval_losses(&combined, &oracle, &draws, &schedule)?,
        draws.len(),
        cfg_hash.clone(),
    )];
    if baseline {
        let rc = record
            .config
            .residual
            .as_ref()
            .ok_or_else(|| CliError::Config("the baseline reuses the residual's training budget; add a residual section".into()))?;
        let s0 = io::read_dataset(&run.join("data/s0.bin"))?;
        let (base, _) = train_baseline(&s0, &schedule, rc, spec.bound).map_err(|e| e.in_stage("baseline"))?;
        reports.push(EvalReport::from_terms(
            "baseline",
            eval_losses(&base, &oracle, &draws, &schedule)?,
            draws.len(),
            cfg_hash,
        ));
    }
    let relative_improvement = (reports.len() == 2).then(|| 1.0 - reports[0].r.total.mean / reports[1].r.total.mean);
    let summary = EvalSummary {
        reports,
        relative_improvement,
    };
    let dir = run.join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut csv = String::from("denoiser,t_lo,t_hi,sigma_lo,sigma_hi,r,r_se,l,l_se,v,v_se\n");
    let mut cmp = String::from("denoiser,r,r_se,l,l_se,v,v_se,gap,gap_se\n");
    let mut table = String::new();
    let mut chart = Chart::new("oracle-score MSE per noise bin", "sigma", "R");
    chart.log_x = true;
    chart.log_y = true;
    for r in &summary.reports {
        for line in r.to_csv().lines().skip(1) {
            csv.push_str(&format!("{},{line}\n", r.denoiser_id));
        }
        cmp.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.denoiser_id, r.r.total.mean, r.r.total.stderr, r.l.total.mean, r.l.total.stderr, r.v.total.mean, r.v.total.stderr, r.gap.mean, r.gap.stderr
        ));
        table.push_str(&r.to_table());
        chart = chart.with_series(
            &r.denoiser_id,
            r.r.per_bin.iter().map(|b| ((b.sigma_lo * b.sigma_hi).sqrt(), b.mean)).collect(),
        );
    }
    std::fs::write(dir.join("eval.csv"), csv)?;
    std::fs::write(dir.join("comparison.csv"), cmp)?;
    std::fs::write(dir.join("eval.txt"), table)?;
    std::fs::write(dir.join("r-per-bin.svg"), chart.to_svg())?;
    Ok(summary)
}

/// One bound row, or a sweep when configured. Returns the CSV text.
pub fn cmd_bounds(b: &BoundsConfig, dir: &Path) -> CliResult<String> {
    let log_cover = b.log_cover()?;
    let rows: Vec<SweepRow> = match &b.sweep {
        Some(s) => sweep(&b.inputs, log_cover, s.param, &s.values)?,
        None => vec![SweepRow {
            inputs: b.inputs,
            log_cover,
            output: generalization_bound(&b.inputs, log_cover)?,
        }],
    };
    let csv = sweep_csv(&rows);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("bounds.csv"), &csv)?;
    if let Some(s) = &b.sweep {
        let name = serde_json::to_value(s.param)?.as_str().unwrap_or("value").to_string();
        let pick = |p: BoundParam, r: &SweepRow| match p {
            BoundParam::N => r.inputs.n,
            BoundParam::K => r.inputs.k,
            BoundParam::M => r.inputs.m,
            BoundParam::U => r.inputs.u,
            BoundParam::DeltaB => r.inputs.delta_b,
            BoundParam::DeltaV => r.inputs.delta_v,
            BoundParam::Rho => r.inputs.rho,
            BoundParam::Gamma => r.inputs.gamma,
            BoundParam::Epsilon => r.inputs.epsilon,
            BoundParam::Ev => r.inputs.ev,
            BoundParam::Rademacher => r.inputs.rademacher,
        };
        let chart = Chart::new(&format!("bound vs {name}"), &name, "value")
            .with_series("R bound", rows.iter().map(|r| (pick(s.param, r), r.output.r_bound)).collect())
            .with_series("P(failure)", rows.iter().map(|r| (pick(s.param, r), r.output.failure_prob)).collect());
        std::fs::write(dir.join("bounds.svg"), chart.to_svg())?;
    }
    Ok(csv)
}

pub const BOUNDS_CSV_HELP: &str = "bounds.csv columns: n,k,m,u,delta_b,delta_v,rho,gamma,epsilon,ev,rademacher,\
log_cover,r_bound,p_e1,p_e2,p_e3,p_fail";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_bound_row_reports_the_e1_probability() {
        let dir = tempfile::tempdir().unwrap();
        let csv = cmd_bounds(&BoundsConfig::worked_row(), dir.path()).unwrap();
        assert!(csv.contains("0.08208"), "{csv}");
        assert!(dir.path().join("bounds.csv").exists());
    }

    #[test]
    fn sweep_writes_a_plot() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = BoundsConfig::worked_row();
        b.sweep = Some(crate::config::SweepConfig {
            param: BoundParam::N,
            values: vec![10.0, 100.0, 1000.0],
        });
        let csv = cmd_bounds(&b, dir.path()).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("bounds.svg").exists());
    }

    #[test]
    fn zero_threads_is_a_config_error() {
        assert_eq!(with_threads(Some(0), || ()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn eval_without_a_run_names_the_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_eval(dir.path(), &EvalConfig::default(), false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("manifest.json"));
    }
}
