//! On-disk layout: `<root>/<split>/<category>/<episode_id>/` holding
//! `support_<k>.png`, `support_<k>_mask.png`, `query.png`, `query_mask.png`.
//! Category directories use `_` for spaces.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::encoders::{BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::training::{Episode, SupportPool};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    SourceHeldout,
    TargetFinetune,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::SourceHeldout, Split::TargetFinetune, Split::TargetTest];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source-train",
            Split::SourceHeldout => "source-heldout",
            Split::TargetFinetune => "target-finetune",
            Split::TargetTest => "target-test",
        }
    }

    pub fn domain(self) -> &'static str {
        match self {
            Split::SourceTrain | Split::SourceHeldout => "source",
            Split::TargetFinetune | Split::TargetTest => "target",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|sp| sp.dir_name() == s).ok_or_else(|| Error::config("split", format!("unknown split `{s}`")))
    }
}

const POOL_DIR: &str = "pool";

fn category_dir(category: &str) -> String {
    category.replace(' ', "_")
}

fn category_name(dir: &str) -> String {
    dir.replace('_', " ")
}

fn save_image(path: &Path, img: &ImageSample) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| (img.at(c, y, x) * 255.0).round() as u8))
    });
    out.save(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let out = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    out.save(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path, category: &str, domain: &str) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            px[(c * h + y as usize) * w + x as usize] = f64::from(p[c]) / 255.0;
        }
    }
    ImageSample::new(h, w, px, category, domain)
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.pixels().map(|p| u8::from(p[0] > 127)).collect();
    BinaryMask::new(h, w, values)
}

fn write_supports(dir: &Path, pairs: &[(ImageSample, BinaryMask)]) -> Result<()> {
    for (k, (img, mask)) in pairs.iter().enumerate() {
        save_image(&dir.join(format!("support_{k}.png")), img)?;
        save_mask(&dir.join(format!("support_{k}_mask.png")), mask)?;
    }
    Ok(())
}

pub fn save_episodes(root: &Path, split: Split, episodes: &[Episode]) -> Result<()> {
    for ep in episodes {
        let dir = root.join(split.dir_name()).join(category_dir(&ep.category)).join(&ep.id);
        fs::create_dir_all(&dir)?;
        write_supports(&dir, &ep.support)?;
        save_image(&dir.join("query.png"), &ep.query)?;
        if let Some(m) = &ep.query_mask {
            save_mask(&dir.join("query_mask.png"), m)?;
        }
    }
    Ok(())
}

pub fn save_support_pools(root: &Path, pools: &[SupportPool]) -> Result<()> {
    for pool in pools {
        let dir = root.join(Split::TargetFinetune.dir_name()).join(category_dir(&pool.category)).join(POOL_DIR);
        fs::create_dir_all(&dir)?;
        write_supports(&dir, &pool.pairs)?;
    }
    Ok(())
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    Ok(dirs)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_supports(dir: &Path, category: &str, domain: &str) -> Result<Vec<(ImageSample, BinaryMask)>> {
    let mut pairs = Vec::new();
    loop {
        let k = pairs.len();
        let img = dir.join(format!("support_{k}.png"));
        if !img.exists() {
            break;
        }
        let mask = load_mask(&dir.join(format!("support_{k}_mask.png")))?;
        pairs.push((load_image(&img, category, domain)?, mask));
    }
    Ok(pairs)
}

/// Episodes of a split, ordered by category then episode directory.
pub fn load_episodes(root: &Path, split: Split) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for cat_dir in sorted_dirs(&root.join(split.dir_name()))? {
        let category = category_name(&file_name(&cat_dir));
        for ep_dir in sorted_dirs(&cat_dir)? {
            let id = file_name(&ep_dir);
            let support = read_supports(&ep_dir, &category, split.domain())?;
            let query = load_image(&ep_dir.join("query.png"), &category, split.domain())?;
            let qm = ep_dir.join("query_mask.png");
            let query_mask = if qm.exists() { Some(load_mask(&qm)?) } else { None };
            out.push(Episode::new(&id, &category, support, query, query_mask)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no episodes under {}", root.join(split.dir_name()).display())));
    }
    Ok(out)
}

/// Support-only data, one pool per category.
pub fn load_support_pools(root: &Path) -> Result<Vec<SupportPool>> {
    let mut out = Vec::new();
    for cat_dir in sorted_dirs(&root.join(Split::TargetFinetune.dir_name()))? {
        let category = category_name(&file_name(&cat_dir));
        let mut pairs = Vec::new();
        for ep_dir in sorted_dirs(&cat_dir)? {
            pairs.extend(read_supports(&ep_dir, &category, "target")?);
        }
        out.push(SupportPool { category, pairs });
    }
    Ok(out)
}

pub fn prediction_path(dir: &Path, ep: &Episode) -> PathBuf {
    dir.join(category_dir(&ep.category)).join(&ep.id).join("pred.png")
}

/// Reads `<dir>/<category>/<episode_id>/pred.png` for each episode.
pub fn load_predictions(dir: &Path, episodes: &[Episode]) -> Result<Vec<BinaryMask>> {
    episodes.iter().map(|ep| load_mask(&prediction_path(dir, ep))).collect()
}
