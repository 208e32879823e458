//! Implementations of the subcommands. Each writes its artifacts under
//! `<out>/<command>/` together with a `manifest.json` listing them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::json;

use scout_core::eval::{evaluate_per_iteration, token_heatmap, Dataset, EvalReport, Split};
use scout_core::model::{partition_model, Checkpoint, FlowModel, PartitionCase};
use scout_core::retrospective::MechanismKind;
use scout_core::seed::SeedStreams;
use scout_core::teachers::{measure_kl_ladder, soft_target_table, train_teacher, SoftTargetTable, Teacher, TeacherLadder};
use scout_core::training::{make_plan, pretrain_backbone, train, write_jsonl, LogRecord, PlanMode};
use scout_core::{Error, Result};

use crate::config::{Command, RunConfig};
use crate::manifest::{write_file, RunManifest};

/// A validated configuration bound to an output directory.
#[derive(Debug, Clone)]
pub struct Runner {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

/// One fine-tuning run of an ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: PlanMode,
    pub case: PartitionCase,
    pub mechanism: MechanismKind,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}_{}_{}_s{}", self.mode, self.case, self.mechanism, self.seed)
    }
}

/// Outcome of one ablation cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub report: std::result::Result<EvalReport, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.into(),
        source,
    }
}

fn or<T>(v: Vec<T>, fallback: T) -> Vec<T> {
    if v.is_empty() {
        vec![fallback]
    } else {
        v
    }
}

fn rel(out: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(out).unwrap_or(path).to_path_buf()
}

fn log_bytes(log: &[LogRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(log, &mut buf).expect("writing to memory");
    buf
}

fn save_checkpoint(ck: &Checkpoint<f64>, path: &Path) -> Result<String> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    ck.save(path)
}

/// Loads every `teacher_*.ckpt` of `dir`, ordered by capacity rank.
pub fn load_ladder(dir: &Path) -> Result<TeacherLadder<f64>> {
    let entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
    let mut teachers = Vec::new();
    for e in entries {
        let path = e.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("teacher_") && name.ends_with(".ckpt") {
            teachers.push(Teacher::from_checkpoint(Checkpoint::load(&path)?)?);
        }
    }
    if teachers.is_empty() {
        return Err(Error::InvalidInput(format!("no teacher checkpoints in {}", dir.display())));
    }
    teachers.sort_by_key(|t| t.spec.capacity_rank);
    TeacherLadder::new(teachers)
}

impl Runner {
    /// Validates `cfg` for `command`, applying a seed override first.
    pub fn new(mut cfg: RunConfig, command: Command, out: PathBuf, workers: usize, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            cfg.seed = Some(crate::config::SeedSection { root: s });
        }
        cfg.validate(command)?;
        Ok(Self {
            cfg,
            out,
            workers: workers.max(1),
        })
    }

    pub fn run(&self, command: Command) -> Result<RunManifest> {
        let mut manifest = RunManifest::new(command.name(), self.cfg.checksum(), self.cfg.seed()?);
        match command {
            Command::Pretrain => self.pretrain(&mut manifest)?,
            Command::Ladder => self.ladder(&mut manifest)?,
            Command::Train => self.train(&mut manifest)?,
            Command::Eval => self.eval(&mut manifest)?,
            Command::Ablate => self.ablate(&mut manifest)?,
            Command::Heatmap => self.heatmap(&mut manifest)?,
        }
        manifest.save(&self.dir(command).join("manifest.json"))?;
        Ok(manifest)
    }

    pub fn dir(&self, command: Command) -> PathBuf {
        self.out.join(command.name())
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.cfg
            .paths()
            .backbone
            .unwrap_or_else(|| self.dir(Command::Pretrain).join("backbone.ckpt"))
    }

    pub fn ladder_dir(&self) -> PathBuf {
        self.cfg.paths().ladder.unwrap_or_else(|| self.dir(Command::Ladder))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .paths()
            .checkpoint
            .unwrap_or_else(|| self.dir(Command::Train).join("model.ckpt"))
    }

    fn train_data(&self) -> Result<Dataset> {
        let d = self.cfg.data()?;
        d.task.dataset(Split::Train, d.train_limit)
    }

    fn eval_data(&self) -> Result<Dataset> {
        let d = self.cfg.data()?;
        d.task.dataset(d.eval_split, d.eval_limit)
    }

    fn pretrain(&self, m: &mut RunManifest) -> Result<()> {
        let seed = self.cfg.seed()?;
        let data = m.time("data", || self.train_data())?;
        let mut model = FlowModel::plain(self.cfg.backbone_config()?, seed)?;
        let outcome = m.time("train", || pretrain_backbone(&mut model, &data, self.cfg.optimizer()?, seed))?;
        let dir = self.dir(Command::Pretrain);
        let log_path = dir.join("log.jsonl");
        m.add("log", rel(&self.out, &log_path), write_file(&log_path, &log_bytes(&outcome.log))?);
        let mut ck = Checkpoint::new(model);
        ck.metadata.insert("task".into(), json!(data.task));
        ck.metadata.insert("seed".into(), json!(seed));
        let path = self.backbone_path();
        m.add("checkpoint", rel(&self.out, &path), save_checkpoint(&ck, &path)?);
        Ok(())
    }

    /// Key identifying everything a teacher's weights depend on.
    fn teacher_key(&self, index: usize) -> Result<String> {
        let spec = &self.cfg.ladder()?.teachers[index];
        let d = self.cfg.data()?;
        let text = serde_json::to_string(&json!({
            "spec": spec,
            "optimizer": self.cfg.optimizer()?,
            "task": d.task,
            "train_limit": d.train_limit,
            "seed": self.cfg.seed()?,
        }))?;
        Ok(scout_core::hash::sha256_hex(text.as_bytes()))
    }

    fn ladder(&self, m: &mut RunManifest) -> Result<()> {
        let seed = self.cfg.seed()?;
        let specs = &self.cfg.ladder()?.teachers;
        let task = &self.cfg.data()?.task;
        let dir = self.ladder_dir();
        let mut data = None;
        for (i, spec) in specs.iter().enumerate() {
            let path = dir.join(format!("teacher_{}.ckpt", spec.capacity_rank));
            let key = self.teacher_key(i)?;
            if let Ok(ck) = Checkpoint::<f64>::load(&path) {
                if ck.frozen && ck.metadata.get("run_key").and_then(|v| v.as_str()) == Some(key.as_str()) {
                    m.notice(format!("teacher {} up to date at {}; skipped", spec.capacity_rank, path.display()));
                    m.add("checkpoint", rel(&self.out, &path), ck.checksum()?);
                    continue;
                }
            }
            if data.is_none() {
                data = Some(m.time("data", || self.train_data())?);
            }
            let teacher_seed = SeedStreams::new(seed).derive(&format!("teacher/{}", spec.capacity_rank));
            let phase = format!("train_teacher_{}", spec.capacity_rank);
            let teacher: Teacher<f64> = m.time(&phase, || {
                train_teacher(spec, task, data.as_ref().unwrap(), self.cfg.optimizer()?, teacher_seed)
            })?;
            let mut ck = teacher.checkpoint();
            ck.metadata.insert("run_key".into(), json!(key));
            ck.metadata.insert("task".into(), json!(task));
            m.add("checkpoint", rel(&self.out, &path), save_checkpoint(&ck, &path)?);
        }
        Ok(())
    }

    fn load_backbone(&self) -> Result<FlowModel<f64>> {
        let ck = Checkpoint::<f64>::load(&self.backbone_path())?;
        if ck.model.num_iterations() != 1 {
            return Err(Error::InvalidInput("backbone checkpoint must be non-recursive".into()));
        }
        Ok(ck.model)
    }

    /// Soft targets of every ladder teacher over `data`.
    fn soft_targets(
        &self,
        ladder: &TeacherLadder<f64>,
        data: &Dataset,
        vocab: usize,
    ) -> Result<BTreeMap<usize, SoftTargetTable<f64>>> {
        (0..ladder.len())
            .map(|i| Ok((i, soft_target_table(&ladder.get(i).model, data, vocab)?)))
            .collect()
    }

    /// Fine-tunes `cell` from `backbone`, writing the checkpoint, log and
    /// report into `dir`.
    #[allow(clippy::too_many_arguments)]
    fn run_cell(
        &self,
        cell: &Cell,
        backbone: &FlowModel<f64>,
        ladder_len: usize,
        soft: &BTreeMap<usize, SoftTargetTable<f64>>,
        train_data: &Dataset,
        eval_data: &Dataset,
        dir: &Path,
        workers: usize,
    ) -> Result<(EvalReport, Vec<(String, PathBuf, String)>)> {
        let t = self.cfg.mechanism()?.iterations;
        let plan = make_plan(cell.mode, ladder_len, t, self.cfg.plan()?.alpha)?;
        let partition = partition_model(backbone.config(), cell.case)?;
        let mut model = FlowModel::from_backbone(backbone, partition, cell.mechanism, plan.iterations, cell.seed)?;
        let outcome = train(&mut model, &plan, train_data, soft, self.cfg.optimizer()?, cell.seed)?;
        let mut artifacts = Vec::new();
        let log_path = dir.join("log.jsonl");
        artifacts.push(("log".into(), log_path.clone(), write_file(&log_path, &log_bytes(&outcome.log))?));

        let mut report = evaluate_per_iteration(&model, eval_data, workers)?;
        for (k, v) in [
            ("mode", cell.mode.to_string()),
            ("partition", cell.case.to_string()),
            ("mechanism", cell.mechanism.to_string()),
            ("seed", cell.seed.to_string()),
        ] {
            report.metadata.insert(k.into(), v);
        }
        let mut ck = Checkpoint::new(model);
        ck.metadata.insert("task".into(), json!(train_data.task));
        ck.metadata.insert("plan".into(), json!(plan));
        ck.metadata.insert("seed".into(), json!(cell.seed));
        let ck_path = dir.join("model.ckpt");
        artifacts.push(("checkpoint".into(), ck_path.clone(), save_checkpoint(&ck, &ck_path)?));
        artifacts.extend(write_report(&report, dir)?);
        Ok((report, artifacts))
    }

    fn primary_cell(&self) -> Result<Cell> {
        Ok(Cell {
            mode: self.cfg.plan()?.plan_mode()?,
            case: self.cfg.partition()?.case,
            mechanism: self.cfg.mechanism()?.kind,
            seed: self.cfg.seed()?,
        })
    }

    fn teachers_for(&self, cells: &[Cell]) -> Result<Option<TeacherLadder<f64>>> {
        if cells.iter().any(|c| c.mode.uses_teachers()) {
            Ok(Some(load_ladder(&self.ladder_dir())?))
        } else {
            Ok(None)
        }
    }

    fn train(&self, m: &mut RunManifest) -> Result<()> {
        let cell = self.primary_cell()?;
        let backbone = self.load_backbone()?;
        let ladder = self.teachers_for(std::slice::from_ref(&cell))?;
        let train_data = m.time("data", || self.train_data())?;
        let eval_data = self.eval_data()?;
        let vocab = backbone.config().vocab_size;
        let soft = match &ladder {
            Some(l) => m.time("soft_targets", || self.soft_targets(l, &train_data, vocab))?,
            None => BTreeMap::new(),
        };
        let ladder_len = ladder.as_ref().map_or(0, |l| l.len());
        let dir = self.dir(Command::Train);
        let (_, artifacts) = m.time("train", || {
            self.run_cell(&cell, &backbone, ladder_len, &soft, &train_data, &eval_data, &dir, self.workers)
        })?;
        for (kind, path, sha) in artifacts {
            m.add(&kind, rel(&self.out, &path), sha);
        }
        Ok(())
    }

    fn eval(&self, m: &mut RunManifest) -> Result<()> {
        let ck = Checkpoint::<f64>::load(&self.checkpoint_path())?;
        let data = self.eval_data()?;
        let mut report = m.time("eval", || evaluate_per_iteration(&ck.model, &data, self.workers))?;
        for (k, v) in &ck.metadata {
            if let Some(s) = v.as_str() {
                report.metadata.insert(k.clone(), s.to_string());
            }
        }
        if let Some(path) = self.cfg.paths().baseline {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let baseline: EvalReport = serde_json::from_str(&text)?;
            let name = baseline
                .metadata
                .get("mode")
                .cloned()
                .unwrap_or_else(|| path.file_stem().map_or("baseline".into(), |s| s.to_string_lossy().into_owned()));
            report = report
                .with_baseline(&name, &baseline)
                .map_err(|e| Error::validation("paths.baseline", e.to_string()))?;
        }
        let dir = self.dir(Command::Eval);
        for (kind, path, sha) in write_report(&report, &dir)? {
            m.add(&kind, rel(&self.out, &path), sha);
        }
        if self.ladder_dir().is_dir() {
            let ladder = load_ladder(&self.ladder_dir())?;
            let kl = m.time("kl_ladder", || measure_kl_ladder(&ck.model, &ladder, &data.examples))?;
            let mut csv = String::from("capacity_rank,kl\n");
            for (rank, v) in kl {
                writeln!(csv, "{rank},{v}").unwrap();
            }
            let path = dir.join("kl_ladder.csv");
            m.add("report", rel(&self.out, &path), write_file(&path, csv.as_bytes())?);
        }
        Ok(())
    }

    fn heatmap(&self, m: &mut RunManifest) -> Result<()> {
        let ck = Checkpoint::<f64>::load(&self.checkpoint_path())?;
        let data = self.eval_data()?;
        let section = self.cfg.heatmap.clone().unwrap_or(crate::config::HeatmapSection {
            prompts: 4,
            candidates: Vec::new(),
        });
        let dir = self.dir(Command::Heatmap);
        let mut records = Vec::new();
        for (i, e) in data.examples.iter().take(section.prompts).enumerate() {
            let candidates = if section.candidates.is_empty() {
                vec![e.answer()[0]]
            } else {
                section.candidates.clone()
            };
            let rec = token_heatmap(&ck.model, e.prompt(), &candidates)?;
            let path = dir.join(format!("heatmap_{i}.csv"));
            m.add("heatmap", rel(&self.out, &path), write_file(&path, rec.to_csv().as_bytes())?);
            records.push(rec);
        }
        let path = dir.join("heatmap.json");
        let sha = write_file(&path, serde_json::to_string_pretty(&records)?.as_bytes())?;
        m.add("heatmap", rel(&self.out, &path), sha);
        Ok(())
    }

    /// Cells of the ablation matrix in deterministic order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let base = self.primary_cell()?;
        let axes = self.cfg.ablate.clone().unwrap_or_default();
        let modes = if axes.modes.is_empty() {
            vec![base.mode]
        } else {
            axes.modes.iter().map(|s| s.parse()).collect::<Result<_>>()?
        };
        let mut cells = Vec::new();
        for mode in modes {
            for &case in &or(axes.partitions.clone(), base.case) {
                for &mechanism in &or(axes.mechanisms.clone(), base.mechanism) {
                    for &seed in &or(axes.seeds.clone(), base.seed) {
                        cells.push(Cell {
                            mode,
                            case,
                            mechanism,
                            seed,
                        });
                    }
                }
            }
        }
        Ok(cells)
    }

    fn ablate(&self, m: &mut RunManifest) -> Result<()> {
        let cells = self.cells()?;
        let backbone = self.load_backbone()?;
        let ladder = self.teachers_for(&cells)?;
        let train_data = m.time("data", || self.train_data())?;
        let eval_data = self.eval_data()?;
        let vocab = backbone.config().vocab_size;
        let soft = match &ladder {
            Some(l) => m.time("soft_targets", || self.soft_targets(l, &train_data, vocab))?,
            None => BTreeMap::new(),
        };
        let ladder_len = ladder.as_ref().map_or(0, |l| l.len());
        let dir = self.dir(Command::Ablate);

        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<CellResult>>> = cells.iter().map(|_| Mutex::new(None)).collect();
        let artifacts = Mutex::new(Vec::new());
        let workers = self.workers.min(cells.len()).max(1);
        let start = std::time::Instant::now();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(cell) = cells.get(i) else { break };
                    let cell_dir = dir.join("cells").join(cell.id());
                    let outcome =
                        self.run_cell(cell, &backbone, ladder_len, &soft, &train_data, &eval_data, &cell_dir, 1);
                    let report = match outcome {
                        Ok((report, arts)) => {
                            artifacts.lock().unwrap().push((i, arts));
                            Ok(report)
                        }
                        Err(e) => {
                            log::warn!("cell {} failed: {e}", cell.id());
                            Err(e.to_string())
                        }
                    };
                    *slots[i].lock().unwrap() = Some(CellResult {
                        cell: cell.clone(),
                        report,
                    });
                });
            }
        });
        m.timings.insert("cells".into(), start.elapsed().as_secs_f64());
        let results: Vec<CellResult> = slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every cell ran"))
            .collect();
        let mut arts = artifacts.into_inner().unwrap();
        arts.sort_by_key(|(i, _)| *i);
        for (kind, path, sha) in arts.into_iter().flat_map(|(_, a)| a) {
            m.add(&kind, rel(&self.out, &path), sha);
        }
        for r in &results {
            if let Err(e) = &r.report {
                m.failures.push(format!("{}: {e}", r.cell.id()));
            }
        }
        let tables = [
            ("cells.csv", cells_csv(&results)),
            ("summary.csv", mechanism_table(&results)),
        ];
        for (name, text) in tables {
            let path = dir.join(name);
            m.add("report", rel(&self.out, &path), write_file(&path, text.as_bytes())?);
        }
        let cases: std::collections::BTreeSet<_> = cells.iter().map(|c| c.case.to_string()).collect();
        if cases.len() == 2 {
            let path = dir.join("partition.csv");
            let sha = write_file(&path, partition_table(&results).as_bytes())?;
            m.add("report", rel(&self.out, &path), sha);
        }
        Ok(())
    }
}

/// Writes the comma-separated and the full-precision JSON form of `report`.
fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<(String, PathBuf, String)>> {
    let csv = dir.join("report.csv");
    let json = dir.join("report.json");
    Ok(vec![
        ("report".into(), csv.clone(), write_file(&csv, report.to_csv().as_bytes())?),
        (
            "report".into(),
            json.clone(),
            write_file(&json, serde_json::to_string_pretty(report)?.as_bytes())?,
        ),
    ])
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Long form: one row per cell and iteration; failed cells keep one row
/// with the error in `status`.
pub fn cells_csv(results: &[CellResult]) -> String {
    let mut out = String::from("mode,partition,mechanism,seed,status,iteration,accuracy\n");
    for r in results {
        let c = &r.cell;
        let key = format!("{},{},{},{}", c.mode, c.case, c.mechanism, c.seed);
        match &r.report {
            Ok(rep) => {
                for (t, a) in rep.per_iteration_accuracy.iter().enumerate() {
                    let _ = writeln!(out, "{key},ok,{},{}", t + 1, pct(*a));
                }
            }
            Err(e) => {
                let _ = writeln!(out, "{key},\"failed: {}\",,", e.replace('"', "'"));
            }
        }
    }
    out
}

type Group = (PlanMode, PartitionCase);

/// Seed-averaged accuracy per (mode, partition, mechanism) and iteration.
fn averaged(results: &[CellResult]) -> BTreeMap<(String, String, MechanismKind), Vec<f64>> {
    let mut sums: BTreeMap<(String, String, MechanismKind), (Vec<f64>, usize)> = BTreeMap::new();
    for r in results {
        if let Ok(rep) = &r.report {
            let key = (r.cell.mode.to_string(), r.cell.case.to_string(), r.cell.mechanism);
            let e = sums
                .entry(key)
                .or_insert_with(|| (vec![0.0; rep.per_iteration_accuracy.len()], 0));
            for (s, a) in e.0.iter_mut().zip(&rep.per_iteration_accuracy) {
                *s += a;
            }
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s.iter().map(|v| v / n as f64).collect()))
        .collect()
}

fn groups(results: &[CellResult]) -> Vec<Group> {
    let mut g: Vec<Group> = Vec::new();
    for r in results {
        let k = (r.cell.mode, r.cell.case);
        if !g.contains(&k) {
            g.push(k);
        }
    }
    g
}

fn mechanisms(results: &[CellResult]) -> Vec<MechanismKind> {
    MechanismKind::ALL
        .into_iter()
        .filter(|m| results.iter().any(|r| r.cell.mechanism == *m))
        .collect()
}

/// Mechanism columns, iteration rows (plus `avg`), one block per
/// (mode, partition); seed-averaged percentages, empty where every seed
/// failed.
pub fn mechanism_table(results: &[CellResult]) -> String {
    let avg = averaged(results);
    let mechs = mechanisms(results);
    let mut out = String::from("mode,partition,iteration");
    for m in &mechs {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    for (mode, case) in groups(results) {
        let get = |m: MechanismKind| avg.get(&(mode.to_string(), case.to_string(), m));
        let t_max = mechs.iter().filter_map(|&m| get(m).map(|v| v.len())).max().unwrap_or(0);
        for t in 0..=t_max {
            let label = if t < t_max { (t + 1).to_string() } else { "avg".into() };
            let _ = write!(out, "{mode},{case},{label}");
            for &m in &mechs {
                let cell = get(m).and_then(|v| {
                    if t < t_max {
                        v.get(t).copied()
                    } else {
                        Some(v.iter().sum::<f64>() / v.len() as f64)
                    }
                });
                let _ = write!(out, ",{}", cell.map(pct).unwrap_or_default());
            }
            out.push('\n');
        }
    }
    out
}

/// Mechanism and partition rows with per-iteration accuracy; `delta` is the
/// gain of case 2 over case 1 for the same mode, mechanism and iteration.
pub fn partition_table(results: &[CellResult]) -> String {
    let avg = averaged(results);
    let mut out = String::from("mode,mechanism,partition,iteration,accuracy,delta\n");
    let modes: Vec<PlanMode> = groups(results).into_iter().map(|(m, _)| m).fold(Vec::new(), |mut v, m| {
        if !v.contains(&m) {
            v.push(m);
        }
        v
    });
    for mode in modes {
        for mech in mechanisms(results) {
            let c1 = avg.get(&(mode.to_string(), PartitionCase::Case1.to_string(), mech));
            for case in [PartitionCase::Case1, PartitionCase::Case2] {
                let Some(acc) = avg.get(&(mode.to_string(), case.to_string(), mech)) else {
                    continue;
                };
                for (t, a) in acc.iter().enumerate() {
                    let delta = match (case, c1.and_then(|v| v.get(t))) {
                        (PartitionCase::Case2, Some(b)) => format!("{:+.2}", 100.0 * (a - b)),
                        _ => String::new(),
                    };
                    let _ = writeln!(out, "{mode},{mech},{case},{},{},{delta}", t + 1, pct(*a));
                }
            }
        }
    }
    out
}
