use std::fs;
use std::path::Path;

use nibbler::harness::*;
use nibbler::metrics::{summarize, RunLog};
use nibbler::micrograd::read_tensors;

fn config(kind: &str, out: Option<&Path>) -> ExperimentConfig {
    let algorithm = match kind {
        "nibbler" => "kind = \"nibbler\"\nh = 4\nd = 8\ng = 20",
        "qv" => "kind = \"qv\"\nhidden_dim = 16",
        _ => "kind = \"q\"\nhidden_dim = 16",
    };
    let text = format!(
        "total_steps = 4000\nseeds = [1, 2]\n\n[env]\nnum_parallel = 2\n\n[algorithm]\n{algorithm}\n\n[log]\nwindow = 500\ninterval = 500\n"
    );
    let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
    cfg.log.output = out.map(Path::to_path_buf);
    cfg
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn identical_configs_write_identical_run_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for root in [a.path(), b.path()] {
        run_experiment(&config("nibbler", Some(root)), None).unwrap();
    }
    let dirs = find_run_dirs(a.path()).unwrap();
    assert_eq!(dirs.len(), 2);
    for dir in dirs {
        let name = dir.file_name().unwrap();
        let files = read_dir_bytes(&dir);
        let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["config.toml", "log.csv", "meta.json", "weights.bin"]);
        assert_eq!(files, read_dir_bytes(&b.path().join(name)));
        let tensors = read_tensors(&mut &fs::read(dir.join("weights.bin")).unwrap()[..]).unwrap();
        assert_eq!(tensors.iter().map(|t| t.data.len()).sum::<usize>(), {
            let cfg = config("nibbler", None);
            nibbler::harness::RunState::new(&cfg, 1).unwrap().agent.param_count()
        });
        let csv = fs::read_to_string(dir.join("log.csv")).unwrap();
        assert!(csv.starts_with("timestep,avg_reward\n"));
        assert_eq!(csv.lines().count(), 1 + 8);
    }
}

#[test]
fn resumed_state_continues_bit_identically() {
    for kind in ["nibbler", "qv", "q"] {
        let cfg = config(kind, None);
        let mut straight = RunState::new(&cfg, 7).unwrap();
        straight.run_to_end();

        let mut first = RunState::new(&cfg, 7).unwrap();
        first.advance(1234);
        let json = first.to_json();
        drop(first);
        let mut resumed = RunState::from_json(&json).unwrap();
        assert_eq!(resumed.to_json(), json);
        resumed.run_to_end();

        assert_eq!(resumed.to_json(), straight.to_json(), "{kind}");
        assert_eq!(resumed.log(&cfg).to_csv(), straight.log(&cfg).to_csv());
        assert_eq!(resumed.agent, straight.agent);
    }
}

#[test]
fn interrupted_run_resumes_from_partial_checkpoint() {
    let cfg = config("nibbler", None);
    let reference = tempfile::tempdir().unwrap();
    let uninterrupted = run_seed_to_dir(&cfg, 3, reference.path(), Some(1000)).unwrap();

    // Simulate a crash: a `.partial` dir holding a mid-run checkpoint.
    let root = tempfile::tempdir().unwrap();
    let partial = root.path().join(format!("{}.partial", cfg.run_dir_name(3)));
    fs::create_dir_all(&partial).unwrap();
    let mut state = RunState::new(&cfg, 3).unwrap();
    state.advance(2000);
    fs::write(partial.join("checkpoint.json"), state.to_json()).unwrap();

    let resumed = run_seed_to_dir(&cfg, 3, root.path(), Some(1000)).unwrap();
    assert_eq!(resumed, uninterrupted);
    assert!(!partial.exists());
    let name = cfg.run_dir_name(3);
    assert_eq!(read_dir_bytes(&root.path().join(&name)), read_dir_bytes(&reference.path().join(&name)));

    // A checkpoint from another config is refused.
    let other = config("qv", None);
    let partial = root.path().join(format!("{}.partial", other.run_dir_name(3)));
    fs::create_dir_all(&partial).unwrap();
    fs::write(partial.join("checkpoint.json"), state.to_json()).unwrap();
    assert!(matches!(run_seed_to_dir(&other, 3, root.path(), Some(1000)), Err(RunError::Checkpoint { .. })));
}

#[test]
fn sweep_summary_is_reconstructible_from_logs() {
    let root = tempfile::tempdir().unwrap();
    let mut base = config("nibbler", Some(root.path()));
    base.r_thresh = -0.05;
    let sweep = SweepConfig { base: base.clone(), grid: SweepGrid { h: vec![2, 4], ..Default::default() } };
    let rows = run_sweep(&sweep).unwrap();
    assert_eq!(rows.len(), 2);
    let csv = fs::read_to_string(root.path().join("summary.csv")).unwrap();
    assert_eq!(csv, summary_csv(&rows));
    let json: Vec<CellSummary> = serde_json::from_str(&fs::read_to_string(root.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json, rows);

    for row in &rows {
        let hash = row.config_hash.as_ref().unwrap();
        let logs: Vec<RunLog> = find_run_dirs(root.path())
            .unwrap()
            .iter()
            .filter(|d| d.file_name().unwrap().to_string_lossy().starts_with(hash.as_str()))
            .map(|d| read_run_dir(d).unwrap())
            .collect();
        assert_eq!(logs.len(), 2);
        assert_eq!(&summarize_cell(row.cell.clone(), &logs, base.r_thresh), row);
        let summary = summarize(&logs, base.r_thresh);
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].seeds, [1, 2]);
        assert_eq!(Some(&summary[0].t_threshold), row.t_threshold.as_ref());
    }
}
