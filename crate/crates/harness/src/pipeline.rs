//! The experiment commands. Each runs under the output-directory lock and
//! leaves a manifest behind, whether it succeeds or not.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use timeq_core::analysis::{
    mean_abs_delta, mismatch_index, mmd2, sensitivity_sweep, temporal_error, trajectory_report, InjectionTarget,
    SweepRow,
};
use timeq_core::diffusion::{
    capture_temporal_features, load_checkpoint, save_checkpoint, train, DenoiserGraph, FeatureTable, ToyDataset,
};
use timeq_core::maintenance::{
    generate_calibration, loss_table, quantize_model, select_maintenance, Choice, LossKind, QuantBundle,
    QuantizedDenoiser, Strategy,
};
use timeq_core::Tensor;

use crate::config::{seeds, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::manifest::{write_atomic, DirLock, RunManifest, Status};
use crate::output::{write_csv, write_dat};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const BUNDLE_DIR: &str = "bundles";
pub const METRICS_DIR: &str = "metrics";
pub const ANALYSIS_DIR: &str = "analysis";
pub const SAMPLES_DIR: &str = "samples";

/// Bit width reported for the unquantized model.
pub const FP_BITS: u32 = 64;

/// Column order of the evaluation table.
pub const EVAL_COLUMNS: [&str; 9] = [
    "strategy",
    "w_bits",
    "a_bits",
    "seed",
    "mmd2",
    "sqnr_db",
    "mean_E_t",
    "mean_L_temporal",
    "mean_abs_delta",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub strategy: String,
    pub w_bits: u32,
    pub a_bits: u32,
    pub seed: u64,
    pub mmd2: f64,
    #[serde(with = "extended_f64")]
    pub sqnr_db: f64,
    #[serde(rename = "mean_E_t")]
    pub mean_e_t: f64,
    #[serde(rename = "mean_L_temporal")]
    pub mean_l_temporal: f64,
    pub mean_abs_delta: f64,
}

/// `f64` that survives JSON: non-finite values travel as `"inf"`, `"-inf"`
/// or `"nan"`.
mod extended_f64 {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string().to_lowercase())
        }
    }

    struct V;

    impl Visitor<'_> for V {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str("a number, inf, -inf or nan")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            v.parse().map_err(|_| E::invalid_value(de::Unexpected::Str(v), &self))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(V)
    }
}

/// What to evaluate or sample: the checkpoint itself or a quantized bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Fp,
    Quantized(Strategy),
}

impl Target {
    pub fn label(&self) -> &'static str {
        match self {
            Target::Fp => "fp",
            Target::Quantized(s) => s.name(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Sensitivity,
    Mismatch,
    ErrorCurve,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Sensitivity => "sensitivity",
            Experiment::Mismatch => "mismatch",
            Experiment::ErrorCurve => "error-curve",
        }
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        [Experiment::Sensitivity, Experiment::Mismatch, Experiment::ErrorCurve]
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "unknown experiment `{s}` (expected sensitivity, mismatch, error-curve)"
                ))
            })
    }
}

/// Where a command reads and writes.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
    pub checkpoint: PathBuf,
}

impl Paths {
    pub fn new(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Self {
        let root = cfg.output_dir.clone();
        let checkpoint = checkpoint.map_or_else(|| root.join(CHECKPOINT_FILE), Path::to_path_buf);
        Self { root, checkpoint }
    }

    pub fn bundle(&self, s: Strategy) -> PathBuf {
        self.root.join(BUNDLE_DIR).join(s.name())
    }

    pub fn metrics(&self, file: &str) -> PathBuf {
        self.root.join(METRICS_DIR).join(file)
    }

    pub fn analysis(&self, file: &str) -> PathBuf {
        self.root.join(ANALYSIS_DIR).join(file)
    }
}

/// State threaded through one command.
pub struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub paths: Paths,
    pub manifest: RunManifest,
}

impl Run<'_> {
    fn artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.paths.root).unwrap_or(path);
        self.manifest.artifacts.push(rel.display().to_string());
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.manifest.timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
        out
    }

    fn model(&self) -> Result<DenoiserGraph> {
        let p = &self.paths.checkpoint;
        if !p.exists() {
            return Err(HarnessError::Missing(p.display().to_string()));
        }
        let m = load_checkpoint(p)?;
        if *m.config() != self.cfg.model {
            return Err(HarnessError::Config(format!(
                "checkpoint {} was trained with a different model configuration",
                p.display()
            )));
        }
        Ok(m)
    }

    fn bundle(&self, s: Strategy) -> Result<QuantBundle> {
        let dir = self.paths.bundle(s);
        if !dir.exists() {
            return Err(HarnessError::Missing(dir.display().to_string()));
        }
        let b = QuantBundle::load(&dir)?;
        if b.strategy != s {
            return Err(HarnessError::Config(format!(
                "bundle {} holds strategy {}, not {s}",
                dir.display(),
                b.strategy
            )));
        }
        Ok(b)
    }

    fn quantized(&self, model: &DenoiserGraph, target: Target) -> Result<QuantizedDenoiser> {
        Ok(match target {
            Target::Fp => QuantizedDenoiser::full_precision(model)?,
            Target::Quantized(s) => self.bundle(s)?.assemble(model)?,
        })
    }
}

/// Runs `body` holding the directory lock and writes the manifest for
/// `command` afterwards, marking failures.
pub fn run_command<T>(
    command: &str,
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    body: impl FnOnce(&mut Run<'_>) -> Result<T>,
) -> Result<(T, RunManifest)> {
    let paths = Paths::new(cfg, checkpoint);
    let _lock = DirLock::acquire(&paths.root)?;
    let mut run = Run {
        cfg,
        manifest: RunManifest::new(command, &cfg.hash()),
        paths,
    };
    let start = Instant::now();
    let out = body(&mut run);
    run.manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    match &out {
        Ok(_) => run.manifest.status = Status::Ok,
        Err(e) => run.manifest.error = Some(e.to_string()),
    }
    run.manifest.write(&run.paths.root)?;
    out.map(|v| (v, run.manifest))
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_atomic(path, text.as_bytes())
}

pub fn train_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunManifest> {
    let (_, m) = run_command("train", cfg, checkpoint, |run| {
        let data = ToyDataset::generate(cfg.dataset(), cfg.dataset_size, cfg.dataset_seed);
        let model = DenoiserGraph::new(cfg.model, cfg.seed)?;
        let (model, report) = run.timed("train", |_| Ok(train(model, &data, &cfg.train_config())?))?;
        let ck = run.paths.checkpoint.clone();
        if let Some(parent) = ck.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        save_checkpoint(&model, &ck)?;
        run.artifact(&ck);
        run.artifact(&ck.with_extension("bin"));
        let rp = run.paths.metrics("train.json");
        save_json(&rp, &report)?;
        run.artifact(&rp);
        run.manifest.metric("initial_heldout_mse", report.initial_heldout_mse);
        run.manifest.metric("final_heldout_mse", report.final_heldout_mse);
        Ok(())
    })?;
    Ok(m)
}

pub fn quantize_cmd(cfg: &ExperimentConfig, strategy: Strategy, checkpoint: Option<&Path>) -> Result<RunManifest> {
    let (_, m) = run_command(&format!("quantize-{strategy}"), cfg, checkpoint, |run| {
        let model = run.model()?;
        let calib = run.timed("calibration", |_| {
            Ok(generate_calibration(
                &model,
                cfg.calibration.trajectories,
                cfg.calibration.stride,
                seeds::calibration(cfg.seed),
            )?)
        })?;
        let bundle = run.timed("quantize", |_| Ok(quantize_model(&model, &calib, strategy, &cfg.quantize_config())?))?;
        // fail here rather than at evaluation
        bundle.assemble(&model)?;
        let dir = run.paths.bundle(strategy);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        }
        bundle.save(&dir)?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| HarnessError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for f in files {
            run.artifact(&f);
        }
        if let Some(r) = bundle.report.tiar {
            run.manifest.metric("tiar_initial", r.initial);
            run.manifest.metric("tiar_objective", r.objective);
        }
        for (i, r) in bundle.report.blocks.iter().enumerate() {
            run.manifest.metric(&format!("block{i}_initial"), r.initial);
            run.manifest.metric(&format!("block{i}_objective"), r.objective);
        }
        Ok(())
    })?;
    Ok(m)
}

/// Everything `eval` measures, kept for the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub row: EvalRow,
    /// `E_t` for `t = 1..=T`.
    pub e_t: Vec<f64>,
    /// Block-output similarity along the full-precision trajectory, `(t, E)`.
    pub e_nontemporal: Vec<(usize, f64)>,
    pub degenerate_cosines: usize,
    /// Blocks per timestep served from the cache.
    pub cache_share: Option<Vec<f64>>,
}

fn sorted_curve(ts: &[usize], vals: &[f64]) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = ts.iter().copied().zip(vals.iter().copied()).collect();
    c.sort_by_key(|p| p.0);
    c
}

fn as_points(c: &[(usize, f64)]) -> Vec<(f64, f64)> {
    c.iter().map(|&(t, v)| (t as f64, v)).collect()
}

pub fn eval_cmd(cfg: &ExperimentConfig, target: Target, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let (summary, _) = run_command(&format!("eval-{target}"), cfg, checkpoint, |run| {
        let model = run.model()?;
        let q = run.quantized(&model, target)?;
        let label = target.label();
        let (te, delta) = run.timed("temporal", |_| {
            let fp = capture_temporal_features(&model)?;
            let qt = q.temporal_features()?;
            Ok((temporal_error(&fp, &qt)?, mismatch_index(&fp, &qt)?))
        })?;
        let mmd = run.timed("samples", |_| {
            let samples = q.sample(cfg.eval.samples, cfg.eval.sampler, seeds::eval_samples(cfg.seed))?;
            let reference = ToyDataset::generate(
                cfg.dataset(),
                cfg.eval.samples,
                seeds::reference_data(cfg.dataset_seed),
            );
            Ok(mmd2(&samples, reference.points())?)
        })?;
        let traj = run.timed("trajectory", |_| {
            Ok(trajectory_report(
                &model,
                &q,
                cfg.eval.trajectory_samples,
                cfg.eval.sampler,
                seeds::trajectory(cfg.seed),
            )?)
        })?;
        let (w_bits, a_bits) = match target {
            Target::Fp => (FP_BITS, FP_BITS),
            Target::Quantized(_) => (cfg.w_bits, cfg.a_bits),
        };
        let row = EvalRow {
            strategy: label.to_string(),
            w_bits,
            a_bits,
            seed: cfg.seed,
            mmd2: mmd,
            sqnr_db: traj.sqnr_db,
            mean_e_t: te.mean_e_t(),
            mean_l_temporal: te.mean_mse(),
            mean_abs_delta: mean_abs_delta(&delta),
        };
        let summary = EvalSummary {
            row: row.clone(),
            e_t: te.e_t.clone(),
            e_nontemporal: sorted_curve(&traj.timesteps, &traj.e_nontemporal),
            degenerate_cosines: te.degenerate,
            cache_share: q.mask().map(|m| m.tib_share().iter().map(|s| 1.0 - s).collect()),
        };

        let csv = run.paths.metrics(&format!("eval_{label}.csv"));
        write_csv(&csv, std::slice::from_ref(&row))?;
        run.artifact(&csv);
        let js = run.paths.metrics(&format!("eval_{label}.json"));
        save_json(&js, &summary)?;
        run.artifact(&js);

        #[derive(Serialize)]
        struct Cell {
            t: usize,
            i: usize,
            mse: f64,
            delta: i64,
        }
        let cells: Vec<Cell> = te
            .mse
            .iter()
            .zip(&delta)
            .enumerate()
            .flat_map(|(k, (m, d))| {
                m.iter().zip(d).enumerate().map(move |(i, (&mse, &delta))| Cell {
                    t: k + 1,
                    i,
                    mse,
                    delta,
                })
            })
            .collect();
        let cp = run.paths.metrics(&format!("temporal_{label}.csv"));
        write_csv(&cp, &cells)?;
        run.artifact(&cp);

        let left: Vec<(f64, f64)> = te.e_t.iter().enumerate().map(|(k, &e)| ((k + 1) as f64, e)).collect();
        let lp = run.paths.metrics(&format!("fig9_left_{label}.dat"));
        write_dat(&lp, "t", "E_t", &left)?;
        run.artifact(&lp);
        let rp = run.paths.metrics(&format!("fig9_right_{label}.dat"));
        write_dat(&rp, "t", "block_cosine", &as_points(&summary.e_nontemporal))?;
        run.artifact(&rp);

        run.manifest.metric("mmd2", row.mmd2);
        run.manifest.metric("sqnr_db", row.sqnr_db);
        run.manifest.metric("mean_E_t", row.mean_e_t);
        run.manifest.metric("mean_L_temporal", row.mean_l_temporal);
        run.manifest.metric("mean_abs_delta", row.mean_abs_delta);
        Ok(summary)
    })?;
    Ok(summary)
}

/// Writes `count` generated points as CSV, to `out` or under `samples/`.
pub fn sample_cmd(
    cfg: &ExperimentConfig,
    target: Target,
    count: usize,
    out: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<PathBuf> {
    let (path, _) = run_command(&format!("sample-{target}"), cfg, checkpoint, |run| {
        let model = run.model()?;
        let q = run.quantized(&model, target)?;
        let x = run.timed("sample", |_| Ok(q.sample(count, cfg.eval.sampler, seeds::eval_samples(cfg.seed))?))?;
        let path = out.map_or_else(
            || run.paths.root.join(SAMPLES_DIR).join(format!("{target}.csv")),
            Path::to_path_buf,
        );
        write_atomic(&path, points_csv(&x).as_bytes())?;
        run.artifact(&path);
        Ok(path)
    })?;
    Ok(path)
}

fn points_csv(x: &Tensor) -> String {
    let header: Vec<String> = (0..x.cols()).map(|c| format!("x{c}")).collect();
    let mut text = header.join(",");
    text.push('\n');
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(f64::to_string).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub sites: Vec<String>,
    pub reference_mmd2: f64,
    pub spearman_temporal: f64,
    pub spearman_non_temporal: f64,
}

pub fn analyze_cmd(
    cfg: &ExperimentConfig,
    experiment: Experiment,
    strategy: Strategy,
    checkpoint: Option<&Path>,
) -> Result<RunManifest> {
    let command = match experiment {
        Experiment::Sensitivity => format!("analyze-{}", experiment.name()),
        _ => format!("analyze-{}-{strategy}", experiment.name()),
    };
    let (_, m) = run_command(&command, cfg, checkpoint, |run| {
        let model = run.model()?;
        match experiment {
            Experiment::Sensitivity => sensitivity(run, &model),
            Experiment::Mismatch => mismatch(run, &model, strategy),
            Experiment::ErrorCurve => error_curve(run, &model, strategy),
        }
    })?;
    Ok(m)
}

fn sensitivity(run: &mut Run<'_>, model: &DenoiserGraph) -> Result<()> {
    let sweep_cfg = run.cfg.sweep_config();
    let table = run.timed("sweep", |_| Ok(sensitivity_sweep(model, &sweep_cfg)?))?;
    let p = run.paths.analysis("sensitivity.csv");
    write_csv::<SweepRow>(&p, &table.rows)?;
    run.artifact(&p);
    for (target, name) in [
        (InjectionTarget::Temporal, "temporal"),
        (InjectionTarget::NonTemporal, "non_temporal"),
    ] {
        let dp = run.paths.analysis(&format!("fig2_{name}.dat"));
        write_dat(&dp, "lambda", "mmd2", &table.series(target))?;
        run.artifact(&dp);
    }
    let summary = SensitivitySummary {
        sites: table.sites.clone(),
        reference_mmd2: table.reference_mmd2,
        spearman_temporal: table.spearman(InjectionTarget::Temporal)?,
        spearman_non_temporal: table.spearman(InjectionTarget::NonTemporal)?,
    };
    let sp = run.paths.analysis("sensitivity.json");
    save_json(&sp, &summary)?;
    run.artifact(&sp);
    run.manifest.metric("spearman_temporal", summary.spearman_temporal);
    run.manifest.metric("spearman_non_temporal", summary.spearman_non_temporal);
    Ok(())
}

fn features(run: &Run<'_>, model: &DenoiserGraph, strategy: Strategy) -> Result<(FeatureTable, FeatureTable)> {
    let q = run.quantized(model, Target::Quantized(strategy))?;
    Ok((capture_temporal_features(model)?, q.temporal_features()?))
}

fn mismatch(run: &mut Run<'_>, model: &DenoiserGraph, strategy: Strategy) -> Result<()> {
    let (fp, q) = features(run, model, strategy)?;
    let delta = mismatch_index(&fp, &q)?;

    #[derive(Serialize)]
    struct Cell {
        t: usize,
        i: usize,
        delta: i64,
    }
    let cells: Vec<Cell> = delta
        .iter()
        .enumerate()
        .flat_map(|(k, d)| d.iter().enumerate().map(move |(i, &delta)| Cell { t: k + 1, i, delta }))
        .collect();
    let p = run.paths.analysis(&format!("mismatch_{strategy}.csv"));
    write_csv(&p, &cells)?;
    run.artifact(&p);
    for i in 0..fp.blocks() {
        let pts: Vec<(f64, f64)> = delta
            .iter()
            .enumerate()
            .map(|(k, d)| ((k + 1) as f64, (k as i64 + 1 + d[i]) as f64))
            .collect();
        let dp = run.paths.analysis(&format!("fig3_right_{strategy}_block{i}.dat"));
        write_dat(&dp, "t", "t_plus_delta", &pts)?;
        run.artifact(&dp);
    }
    run.manifest.metric("mean_abs_delta", mean_abs_delta(&delta));
    Ok(())
}

fn error_curve(run: &mut Run<'_>, model: &DenoiserGraph, strategy: Strategy) -> Result<()> {
    let (fp, qt) = features(run, model, strategy)?;
    let te = temporal_error(&fp, &qt)?;
    let q = run.quantized(model, Target::Quantized(strategy))?;
    let cfg = run.cfg;
    let traj = run.timed("trajectory", |_| {
        Ok(trajectory_report(
            model,
            &q,
            cfg.eval.trajectory_samples,
            cfg.eval.sampler,
            seeds::trajectory(cfg.seed),
        )?)
    })?;
    let nt = sorted_curve(&traj.timesteps, &traj.e_nontemporal);

    #[derive(Serialize)]
    struct Row {
        t: usize,
        e_temporal: f64,
        e_nontemporal: Option<f64>,
    }
    let rows: Vec<Row> = te
        .e_t
        .iter()
        .enumerate()
        .map(|(k, &e)| Row {
            t: k + 1,
            e_temporal: e,
            e_nontemporal: nt.iter().find(|p| p.0 == k + 1).map(|p| p.1),
        })
        .collect();
    let p = run.paths.analysis(&format!("error_curve_{strategy}.csv"));
    write_csv(&p, &rows)?;
    run.artifact(&p);
    let tp: Vec<(f64, f64)> = te.e_t.iter().enumerate().map(|(k, &e)| ((k + 1) as f64, e)).collect();
    let lp = run.paths.analysis(&format!("fig3_left_{strategy}_temporal.dat"));
    write_dat(&lp, "t", "E_t", &tp)?;
    run.artifact(&lp);
    let np = run.paths.analysis(&format!("fig3_left_{strategy}_nontemporal.dat"));
    write_dat(&np, "t", "E_t", &as_points(&nt))?;
    run.artifact(&np);
    run.manifest.metric("mean_E_t_temporal", te.mean_e_t());
    run.manifest
        .metric("mean_E_t_nontemporal", nt.iter().map(|p| p.1).sum::<f64>() / nt.len().max(1) as f64);
    Ok(())
}

/// Mean temporal MSE when the `k` cells with the smallest loss ratio go to
/// the time branch and the rest to the cache, for `k = 0..=cells` in
/// `steps` even strides.
pub fn proportion_curve(mse_tm: &[Vec<f64>], mse_cm: &[Vec<f64>], tau: &[Vec<f64>], steps: usize) -> Vec<(f64, f64)> {
    let mut cells: Vec<(f64, f64, f64)> = tau
        .iter()
        .zip(mse_tm.iter().zip(mse_cm))
        .flat_map(|(ta, (a, b))| ta.iter().zip(a.iter().zip(b)).map(|(&r, (&x, &y))| (r, x, y)))
        .collect();
    // stable, so ties keep table order
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = cells.len();
    let steps = steps.max(1);
    (0..=steps)
        .map(|j| {
            let k = (j * n + steps / 2) / steps;
            let total: f64 = cells
                .iter()
                .enumerate()
                .map(|(idx, c)| if idx < k { c.1 } else { c.2 })
                .sum();
            (k as f64 / n.max(1) as f64, total / n.max(1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub loss: LossKind,
    pub tib_cells: usize,
    pub cells: usize,
    pub mean_mse_tm: f64,
    pub mean_mse_cm: f64,
    pub mean_mse_selected: f64,
}

fn mean2(t: &[Vec<f64>]) -> f64 {
    let n: usize = t.iter().map(Vec::len).sum();
    t.iter().flatten().sum::<f64>() / n.max(1) as f64
}

/// Builds the per-`(t, i)` mask from the `tm` and `cm` bundles.
pub fn select_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<SelectionSummary> {
    let (s, _) = run_command("select", cfg, checkpoint, |run| {
        let model = run.model()?;
        let tm = run.bundle(Strategy::Tm)?;
        let cm = run.bundle(Strategy::Cm)?;
        let cache = cm.cache.as_ref().ok_or_else(|| {
            HarnessError::Missing(run.paths.bundle(Strategy::Cm).join(timeq_core::maintenance::pipeline::CACHE_FILE).display().to_string())
        })?;
        let fp = capture_temporal_features(&model)?;
        let q_tm = tm.assemble(&model)?.temporal_features()?;
        let q_cm = cache.table()?;
        let kind = cfg.optim.selection_loss;
        let loss_tm = loss_table(&fp, &q_tm, kind)?;
        let loss_cm = loss_table(&fp, &q_cm, kind)?;
        let mask = select_maintenance(&loss_tm, &loss_cm)?;
        let mp = run.paths.analysis("mask.json");
        write_atomic(&mp, mask.to_json()?.as_bytes())?;
        run.artifact(&mp);

        let mse_tm = loss_table(&fp, &q_tm, LossKind::Mse)?;
        let mse_cm = loss_table(&fp, &q_cm, LossKind::Mse)?;
        #[derive(Serialize)]
        struct Row {
            t: usize,
            i: usize,
            tau: f64,
            choice: Choice,
            loss_tm: f64,
            loss_cm: f64,
        }
        let mut rows = Vec::new();
        let mut selected = Vec::new();
        let mut tau = Vec::new();
        let mut tib_cells = 0;
        for (k, cells) in mask.cells.iter().enumerate() {
            let mut sel = Vec::new();
            let mut tr = Vec::new();
            for (i, c) in cells.iter().enumerate() {
                rows.push(Row {
                    t: k + 1,
                    i,
                    tau: c.tau,
                    choice: c.choice,
                    loss_tm: c.loss_tm,
                    loss_cm: c.loss_cm,
                });
                if c.choice == Choice::Tib {
                    tib_cells += 1;
                    sel.push(mse_tm[k][i]);
                } else {
                    sel.push(mse_cm[k][i]);
                }
                tr.push(c.tau);
            }
            selected.push(sel);
            tau.push(tr);
        }
        let rp = run.paths.analysis("selection.csv");
        write_csv(&rp, &rows)?;
        run.artifact(&rp);
        let curve = proportion_curve(&mse_tm, &mse_cm, &tau, 20);
        let fp11 = run.paths.analysis("fig11_proportion.dat");
        write_dat(&fp11, "tib_proportion", "mean_L_temporal", &curve)?;
        run.artifact(&fp11);
        let summary = SelectionSummary {
            loss: kind,
            tib_cells,
            cells: rows.len(),
            mean_mse_tm: mean2(&mse_tm),
            mean_mse_cm: mean2(&mse_cm),
            mean_mse_selected: mean2(&selected),
        };
        let sp = run.paths.analysis("selection.json");
        save_json(&sp, &summary)?;
        run.artifact(&sp);
        run.manifest.metric("tib_share", tib_cells as f64 / rows.len().max(1) as f64);
        run.manifest.metric("mean_mse_selected", summary.mean_mse_selected);
        Ok(summary)
    })?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportion_curve_ends() {
        let tm = vec![vec![1.0, 4.0], vec![3.0, 1.0]];
        let cm = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
        let tau: Vec<Vec<f64>> = tm
            .iter()
            .zip(&cm)
            .map(|(a, b): (&Vec<f64>, &Vec<f64>)| a.iter().zip(b).map(|(x, y)| x / y).collect())
            .collect();
        let c = proportion_curve(&tm, &cm, &tau, 4);
        assert_eq!(c.first().unwrap(), &(0.0, 2.0));
        assert_eq!(c.last().unwrap(), &(1.0, 9.0 / 4.0));
        // the two cells with tau < 1 give the minimum
        assert_eq!(c[2], (0.5, 1.5));
        assert!(c.iter().all(|p| p.1 >= 1.5));
    }

    #[test]
    fn experiment_names_parse() {
        for e in ["sensitivity", "mismatch", "error-curve"] {
            assert_eq!(e.parse::<Experiment>().unwrap().name(), e);
        }
        assert_eq!("x".parse::<Experiment>().unwrap_err().exit_code(), 2);
    }
}
