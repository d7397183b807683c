//! On-disk dataset and prediction layouts.
//!
//! ```text
//! <root>/<seq>/frames/00000.ppm ...
//! <root>/<seq>/masks/00000.pgm ...
//! <root>/<seq>/scene.cfg          (only for generated sequences)
//! <pred>/<seq>/00000.pgm ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::datagen::{generate_sequence, SceneConfig, SceneSpec, VideoSequence};
use crate::error::{Error, Result};
use crate::raster::{read_pgm, read_ppm, write_pgm, write_ppm, LabelMask};
use crate::rng::SeededRng;

pub fn frame_file(index: usize, ext: &str) -> String {
    format!("{index:05}.{ext}")
}

pub fn sequence_name(index: usize) -> String {
    format!("seq{index:04}")
}

/// Scene and render seed of sequence `index` under a master seed.
pub fn scene_for(spec: &SceneSpec, seed: u64, index: usize) -> (SceneConfig, u64) {
    let mut rng = SeededRng::derive(seed, index as u64);
    let cfg = SceneConfig::random(spec, &mut rng);
    (cfg, rng.next_u64())
}

/// Generates `n` sequences in memory.
pub fn generate_sequences(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<VideoSequence>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (cfg, render) = scene_for(spec, seed, i);
            generate_sequence(&cfg, render, sequence_name(i))
        })
        .collect()
}

/// Generates `n` sequences and writes them under `root`; returns their names.
pub fn generate_dataset(root: &Path, spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<String>> {
    fs::create_dir_all(root)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (cfg, render) = scene_for(spec, seed, i);
            let seq = generate_sequence(&cfg, render, sequence_name(i))?;
            write_sequence(root, &seq)?;
            let mut text = format!("seed={render}\n");
            text.push_str(&cfg.to_kv());
            fs::write(root.join(&seq.name).join("scene.cfg"), text)?;
            Ok(seq.name)
        })
        .collect()
}

pub fn write_sequence(root: &Path, seq: &VideoSequence) -> Result<()> {
    let dir = root.join(&seq.name);
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_ppm(&dir.join("frames").join(frame_file(t, "ppm")), f)?;
    }
    for (t, m) in seq.masks.iter().enumerate() {
        write_pgm(&dir.join("masks").join(frame_file(t, "pgm")), m)?;
    }
    Ok(())
}

fn numbered_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    for (i, p) in files.iter().enumerate() {
        if p.file_name().and_then(|n| n.to_str()) != Some(frame_file(i, ext).as_str()) {
            return Err(Error::Argument(format!(
                "{}: expected {} next, found {}",
                dir.display(),
                frame_file(i, ext),
                p.display()
            )));
        }
    }
    Ok(files)
}

/// Sequence directories under `root` (those with a `frames/` subdirectory), sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::Argument(format!("{} is not a directory", root.display())));
    }
    let mut names: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("frames").is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Loads all frames and the leading run of masks present on disk.
pub fn read_sequence(root: &Path, name: &str) -> Result<VideoSequence> {
    let dir = root.join(name);
    let frames = numbered_files(&dir.join("frames"), "ppm")?
        .iter()
        .map(|p| read_ppm(p))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::Argument(format!("{}: no frames", dir.display())));
    }
    let masks = numbered_files(&dir.join("masks"), "pgm")?
        .iter()
        .map(|p| read_pgm(p))
        .collect::<Result<Vec<_>>>()?;
    if masks.len() > frames.len() {
        return Err(Error::Argument(format!("{}: more masks than frames", dir.display())));
    }
    let seq = VideoSequence { name: name.to_string(), frames, masks };
    check_consistent(&seq)?;
    Ok(seq)
}

/// Ground-truth masks of one sequence.
pub fn read_masks(root: &Path, name: &str) -> Result<Vec<LabelMask>> {
    let masks = numbered_files(&root.join(name).join("masks"), "pgm")?
        .iter()
        .map(|p| read_pgm(p))
        .collect::<Result<Vec<_>>>()?;
    if masks.is_empty() {
        return Err(Error::Argument(format!("{name}: no masks")));
    }
    Ok(masks)
}

fn check_consistent(seq: &VideoSequence) -> Result<()> {
    let (h, w) = seq.size();
    for (t, f) in seq.frames.iter().enumerate() {
        if f.shape() != [h, w, 3] {
            return Err(Error::Argument(format!("{}: frame {t} has shape {:?}", seq.name, f.shape())));
        }
    }
    for (t, m) in seq.masks.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Argument(format!("{}: mask {t} is {}×{}", seq.name, m.height(), m.width())));
        }
    }
    Ok(())
}

/// Checks that every sequence under `root` is a complete ground-truth
/// sequence: contiguous frames, one mask per frame, one size throughout,
/// a non-empty first mask and, when `scene.cfg` exists, labels within its
/// object count and a frame count matching it.
pub fn validate_dataset(root: &Path) -> Result<Vec<String>> {
    let names = list_sequences(root)?;
    if names.is_empty() {
        return Err(Error::Argument(format!("{}: no sequences", root.display())));
    }
    for name in &names {
        let seq = read_sequence(root, name)?;
        if seq.masks.len() != seq.frames.len() {
            return Err(Error::Argument(format!(
                "{name}: {} masks for {} frames",
                seq.masks.len(),
                seq.frames.len()
            )));
        }
        if seq.masks[0].num_objects() == 0 {
            return Err(Error::Argument(format!("{name}: first mask is empty")));
        }
        let cfg_path = root.join(name).join("scene.cfg");
        if cfg_path.exists() {
            let cfg = SceneConfig::from_kv(&fs::read_to_string(&cfg_path)?)?;
            cfg.validate()?;
            if cfg.frames != seq.len() || (cfg.height, cfg.width) != seq.size() {
                return Err(Error::Argument(format!("{name}: scene.cfg disagrees with the rasters")));
            }
            let m = seq.masks.iter().map(|k| k.num_objects()).max().unwrap_or(0) as usize;
            if m > cfg.objects.len() {
                return Err(Error::Argument(format!("{name}: label {m} exceeds object count")));
            }
        }
    }
    Ok(names)
}

pub fn write_predictions(out: &Path, name: &str, masks: &[LabelMask]) -> Result<()> {
    let dir = out.join(name);
    fs::create_dir_all(&dir)?;
    for (t, m) in masks.iter().enumerate() {
        write_pgm(&dir.join(frame_file(t, "pgm")), m)?;
    }
    Ok(())
}

/// Reads `expected` predicted masks; the error lists every missing frame.
pub fn read_predictions(out: &Path, name: &str, expected: usize) -> Result<Vec<LabelMask>> {
    let dir = out.join(name);
    let missing: Vec<String> = (0..expected)
        .map(|t| frame_file(t, "pgm"))
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Argument(format!("{name}: missing predictions {}", missing.join(", "))));
    }
    (0..expected).map(|t| read_pgm(&dir.join(frame_file(t, "pgm")))).collect()
}
