#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use stgi::config::{RunConfig, Setting};
use stgi::rng::XorShiftRng;
use stgi::scene_graph::{BevCalibration, Detection, ObjectClass};

/// A run small enough to finish in about a second.
pub fn tiny_config(setting: Setting, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.experiment.setting = setting;
    cfg.experiment.seed = seed;
    cfg.data.n_clips = 48;
    cfg.data.frames_per_clip = 8;
    cfg.sge.hidden = 8;
    cfg.sge.d_clip = 8;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 16;
    cfg.providers.synthetic.dim = 8;
    cfg.alignment.epochs = 2;
    cfg.alignment.batch_size = 8;
    cfg.head.epochs = 3;
    cfg.head.hidden = 8;
    cfg
}

/// Up to six boxes anywhere below the horizon, some of them invalid or
/// out of range.
pub fn random_frame(rng: &mut XorShiftRng, cal: &BevCalibration) -> Vec<Detection> {
    let n = rng.below(7);
    (0..n)
        .map(|_| {
            let u = rng.uniform(20.0, cal.image_size.0 - 20.0);
            let v = rng.uniform(cal.image_size.1 * 0.5 + 2.0, cal.image_size.1);
            let hw = rng.uniform(2.0, 19.0);
            Detection {
                label: ObjectClass::ALL[rng.below(5)],
                bbox: [u - hw, rng.uniform(0.0, v - 1.0), u + hw, v],
                confidence: rng.next_f64(),
            }
        })
        .collect()
}

/// Relative path to file bytes for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
