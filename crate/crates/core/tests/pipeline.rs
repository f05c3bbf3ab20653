use std::path::Path;
use std::time::SystemTime;

use bbam_core::pipeline::{parse_config, Pipeline, RunConfig};

fn small_config(root: &Path) -> RunConfig {
    let text = "[data]\ntrain_scenes = 12\nval_scenes = 3\n[detector.train]\nmin_scenes = 10\n[pseudo]\nscenes = 5\n[analysis]\nscenes = 3\n";
    let mut c = parse_config(text).unwrap();
    c.run_root = root.to_path_buf();
    c
}

fn scene_mtime(run: &Path) -> SystemTime {
    let dir = run.join("data").join("train");
    let first = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .min()
        .unwrap();
    std::fs::metadata(first).unwrap().modified().unwrap()
}

#[test]
fn datasets_are_reused_until_forced() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let dir = cfg.run_dir();
    let first = {
        let p = Pipeline::open(cfg.clone(), false).unwrap();
        let (train, val) = p.datasets().unwrap();
        assert_eq!((train.len(), val.len()), (12, 3));
        scene_mtime(&dir)
    };
    std::thread::sleep(std::time::Duration::from_millis(20));
    {
        let p = Pipeline::open(cfg.clone(), false).unwrap();
        p.datasets().unwrap();
        assert_eq!(scene_mtime(&dir), first);
    }
    let p = Pipeline::open(cfg, true).unwrap();
    p.datasets().unwrap();
    assert!(scene_mtime(&dir) > first);
}

#[test]
fn a_locked_run_directory_cannot_be_opened_twice() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let held = Pipeline::open(cfg.clone(), false).unwrap();
    assert!(Pipeline::open(cfg.clone(), false).is_err());
    drop(held);
    assert!(Pipeline::open(cfg, false).is_ok());
}
