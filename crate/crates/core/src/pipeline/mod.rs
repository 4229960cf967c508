//! Configuration, checkpoints, training, evaluation and diagnostics.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod plot;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{leave_one_out_split, load_eth_ucy, synth_scenes, window_scenes, SceneWindow};
use crate::error::{Error, Result};

pub use check::{run_checks, CheckItem, CheckReport};
pub use checkpoint::{Checkpoint, RngState};
pub use config::{Config, DataConfig, DataFormat, EvalConfig, TrainConfig, SEED_ENV};
pub use evaluate::{evaluate, evaluate_scenes, ConstantVelocity, OraclePredictor, Predictor};
pub use plot::{find_scene, list_scenes, plot_scene, render_svg, samples_from_csv, samples_to_csv, SampleRow};
pub use train::{init_model, split_validation, train, EpochLog, TrainOptions, TrainOutcome};

/// Independent ChaCha8 stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named window sets described by the data config: one per ETH/UCY file
/// (named by file stem) or a single `synthetic` set.
pub fn load_datasets(config: &Config) -> Result<Vec<(String, Vec<SceneWindow>)>> {
    let (t_o, t_p) = (config.model.t_o, config.model.t_p);
    match config.data.format {
        DataFormat::Synthetic => Ok(vec![("synthetic".into(), synth_scenes(&config.data.synth_spec(t_o, t_p)?)?)]),
        DataFormat::EthUcy => config
            .data
            .paths
            .iter()
            .map(|path| {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Config(format!("cannot name dataset from {}", path.display())))?;
                let tracks = load_eth_ucy(path)?;
                Ok((name.to_string(), window_scenes(&tracks, t_o, t_p, config.data.stride)?))
            })
            .collect(),
    }
}

/// Training windows and held-out test sets. With `data.holdout` set, that
/// scene is the only test set; otherwise everything trains and the test
/// list is empty.
pub fn training_split(
    datasets: &[(String, Vec<SceneWindow>)],
    holdout: Option<&str>,
) -> Result<(Vec<SceneWindow>, Vec<(String, Vec<SceneWindow>)>)> {
    match holdout {
        Some(name) => {
            let (train, test) = leave_one_out_split(name, datasets)?;
            Ok((train, vec![(name.to_string(), test)]))
        }
        None => Ok((datasets.iter().flat_map(|(_, w)| w.iter().cloned()).collect(), Vec::new())),
    }
}

/// Datasets named on the command line: a synthetic spec
/// (`synth:straight=16;seed=3`), an ETH/UCY file, or a directory of them.
pub fn load_data_arg(arg: &str, t_o: usize, t_p: usize, stride: usize) -> Result<Vec<(String, Vec<SceneWindow>)>> {
    let path = std::path::Path::new(arg);
    if !path.exists() && (arg.starts_with("synth") || arg.contains('=')) {
        let mut spec = crate::data::parse_synth_list(arg)?;
        spec.t_o = t_o;
        spec.t_p = t_p;
        return Ok(vec![("synthetic".into(), synth_scenes(&spec)?)]);
    }
    let files = if path.is_dir() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(path)
            .map_err(crate::error::io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let config = Config {
        data: DataConfig {
            format: DataFormat::EthUcy,
            paths: files,
            stride,
            ..DataConfig::default()
        },
        model: crate::model::ModelConfig {
            t_o,
            t_p,
            ..Default::default()
        },
        ..Config::default()
    };
    load_datasets(&config)
}
