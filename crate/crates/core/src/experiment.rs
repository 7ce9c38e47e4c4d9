//! Running a configured experiment to an output directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, TrajectoryFormat};
use crate::descent::{run_experiment_with, with_workers, RunOutput};
use crate::error::{Error, Result};
use crate::geometry::write_cloud_csv;
use crate::svg::write_frame;

/// Files produced by [`run_to_dir`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub config: PathBuf,
    pub trajectory: PathBuf,
    pub final_cloud: PathBuf,
    pub frames: Vec<PathBuf>,
}

pub fn trajectory_file_name(format: TrajectoryFormat) -> &'static str {
    match format {
        TrajectoryFormat::Ndjson => "trajectory.ndjson",
        TrajectoryFormat::Csv => "trajectory.csv",
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Runs `cfg` on its configured worker count and writes the resolved
/// configuration, the trajectory, the final cloud and (if enabled) one SVG
/// frame per record into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<(RunFiles, RunOutput)> {
    cfg.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames_dir = dir.join("frames");
    if cfg.output.frames {
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    }

    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml_string()?).map_err(|e| Error::io(&config_path, e))?;

    let mut frames = Vec::new();
    let output = with_workers(cfg.workers, || {
        run_experiment_with(cfg, |rec, cloud, reference| {
            if cfg.output.frames {
                let path = frames_dir.join(format!("frame_{:06}.svg", rec.step));
                write_frame(&path, cloud, reference, rec.step)?;
                frames.push(path);
            }
            Ok(())
        })
    })??;

    let trajectory = dir.join(trajectory_file_name(cfg.output.format));
    let out = create(&trajectory)?;
    match cfg.output.format {
        TrajectoryFormat::Ndjson => output.trajectory.write_ndjson(out)?,
        TrajectoryFormat::Csv => output.trajectory.write_csv(out)?,
    }
    let final_cloud = dir.join("final_cloud.csv");
    write_cloud_csv(&output.final_cloud, &final_cloud, false)?;
    Ok((
        RunFiles {
            config: config_path,
            trajectory,
            final_cloud,
            frames,
        },
        output,
    ))
}
