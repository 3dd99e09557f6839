//! Dataset directories: `<root>/<split>/<id>.{image.ppm, sparse.pfm,
//! sparse_mask.pgm, gt.pfm, gt_mask.pgm}` plus a `meta` file naming the task.

use std::path::{Path, PathBuf};

use super::formats::{read_map, read_pgm_mask, read_ppm, write_map, write_pgm_mask, write_ppm};
use super::{Sample, Task};
use crate::config;
use crate::error::{Error, Result};
use crate::sparse::MaskedFeature;

const IMAGE: &str = ".image.ppm";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub task: Task,
}

impl Dataset {
    /// Create `root` and its `meta` file.
    pub fn create(root: &Path, task: Task) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let meta = root.join("meta");
        std::fs::write(&meta, config::render(&[("task", task.to_string())])).map_err(|e| Error::io(&meta, e))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            task,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let meta = root.join("meta");
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let mut task = None;
        for (k, v) in config::parse(&text)? {
            match k.as_str() {
                "task" => task = Some(config::value::<Task>(&k, &v)?),
                _ => return Err(Error::Config(format!("{}: unknown key `{k}`", meta.display()))),
            }
        }
        let task = task.ok_or_else(|| Error::Config(format!("{}: missing `task`", meta.display())))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            task,
        })
    }

    fn split_dir(&self, split: &str) -> PathBuf {
        self.root.join(split)
    }

    /// Sample ids of a split in sorted order.
    pub fn ids(&self, split: &str) -> Result<Vec<String>> {
        let dir = self.split_dir(split);
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(IMAGE) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn save(&self, split: &str, id: &str, sample: &Sample) -> Result<()> {
        if sample.task != self.task {
            return Err(Error::Config(format!("{} sample in a {} dataset", sample.task, self.task)));
        }
        sample.validate()?;
        let dir = self.split_dir(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let p = |suffix: &str| dir.join(format!("{id}{suffix}"));
        write_ppm(&p(IMAGE), &sample.image)?;
        write_map(&p(".sparse.pfm"), &sample.sparse.features)?;
        write_pgm_mask(&p(".sparse_mask.pgm"), &sample.sparse.mask)?;
        write_map(&p(".gt.pfm"), &sample.gt)?;
        write_pgm_mask(&p(".gt_mask.pgm"), &sample.gt_mask)
    }

    pub fn load(&self, split: &str, id: &str) -> Result<Sample> {
        let dir = self.split_dir(split);
        let p = |suffix: &str| dir.join(format!("{id}{suffix}"));
        let c = self.task.channels();
        let sample = Sample {
            image: read_ppm(&p(IMAGE))?,
            sparse: MaskedFeature::new(read_map(&p(".sparse.pfm"), c)?, read_pgm_mask(&p(".sparse_mask.pgm"))?)?,
            gt: read_map(&p(".gt.pfm"), c)?,
            gt_mask: read_pgm_mask(&p(".gt_mask.pgm"))?,
            task: self.task,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        self.ids(split)?.iter().map(|id| self.load(split, id)).collect()
    }
}

/// Zero-padded sample id.
pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sparsify, synth_scene, Pattern, SceneParams};

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::create(dir.path(), Task::SceneFlow).unwrap();
        let mut s = synth_scene(2, &SceneParams::new(32, 36, Task::SceneFlow)).unwrap();
        s.sparse = sparsify(&s.gt, &s.gt_mask, Pattern::Uniform, 0.2, 1).unwrap();
        ds.save("train", &sample_id(3), &s).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.ids("train").unwrap(), vec!["000003".to_string()]);
        let back = ds.load("train", "000003").unwrap();
        assert_eq!(back.gt, s.gt);
        assert_eq!(back.sparse, s.sparse);
        // the image is stored with 8 bits
        for (a, b) in back.image.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
