//! Ingestion from an image tree (`root/<alphabet>/<character>/<a>_<b>.png`)
//! and the packed layout written by [`save_packed`].
//!
//! Packed layout:
//!
//! ```text
//! out/meta.txt            side=<S>
//! out/manifest.tsv        index \t group \t alphabet \t character \t drawer,drawer,...
//! out/chars/<index>.arct  one [drawings, S, S] tensor per character
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndcore::Tensor;
use rayon::prelude::*;

use super::{Alphabet, Character, Dataset, Drawing, Group};
use crate::error::{ArcError, Result};
use crate::model::parse_key_values;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const META_FILE: &str = "meta.txt";
const CHARS_DIR: &str = "chars";
const GROUP_DIRS: [(&str, Group); 2] = [
    ("images_background", Group::Background),
    ("images_evaluation", Group::Evaluation),
];
/// Drawings per character in a complete Omniglot tree.
pub const EXPECTED_DRAWINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// PNG tree, resized to `side` on load.
    ImageTree { side: usize },
    Packed,
}

/// Non-fatal oddity found while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuralWarning {
    pub path: PathBuf,
    pub message: String,
}

/// Box-filter resize of a `width x height` greyscale buffer to `side x side`.
/// Each output pixel is the area-weighted mean of the input pixels it covers.
pub fn area_resize(src: &[f64], width: usize, height: usize, side: usize) -> Tensor {
    fn weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut w = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        w.push((i, overlap / scale));
                    }
                    i += 1;
                }
                w
            })
            .collect()
    }
    let wx = weights(width, side);
    let wy = weights(height, side);
    let mut out = vec![0.0; side * side];
    for (r, row_w) in wy.iter().enumerate() {
        for (c, col_w) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, fy) in row_w {
                for &(x, fx) in col_w {
                    acc += fy * fx * src[y * width + x];
                }
            }
            out[r * side + c] = acc;
        }
    }
    Tensor::new(&[side, side], out).expect("square output")
}

/// Loads a greyscale image as ink = 1 on background = 0, resized to `side`.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| ArcError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let mean = px.iter().sum::<f64>() / px.len().max(1) as f64;
    if mean > 0.5 {
        px.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    Ok(if w == side && h == side {
        Tensor::new(&[side, side], px)?
    } else {
        area_resize(&px, w, h, side)
    })
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            if want_dirs {
                p.is_dir()
            } else {
                p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
            }
        })
        .collect();
    out.sort();
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Drawer ids for the files of one character directory.
///
/// Names are `<drawer>_<idx>`. Omniglot itself names files
/// `<character>_<drawer>`; when the first field is shared by every file and
/// the second differs, the second field is taken as the drawer.
fn drawer_ids(files: &[PathBuf]) -> std::result::Result<Vec<u32>, Vec<(PathBuf, String)>> {
    let mut fields = Vec::with_capacity(files.len());
    let mut bad = Vec::new();
    for f in files {
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parsed = stem
            .split_once('_')
            .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)));
        match parsed {
            Some(p) => fields.push(p),
            None => bad.push((f.clone(), "file name is not <number>_<number>.png".to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(bad);
    }
    let first_shared = fields.windows(2).all(|w| w[0].0 == w[1].0);
    let mut seconds: Vec<u32> = fields.iter().map(|f| f.1).collect();
    seconds.sort_unstable();
    seconds.dedup();
    if fields.len() > 1 && first_shared && seconds.len() == fields.len() {
        Ok(fields.iter().map(|f| f.1).collect())
    } else {
        Ok(fields.iter().map(|f| f.0).collect())
    }
}

fn load_tree(root: &Path, side: usize) -> Result<(Dataset, Vec<StructuralWarning>)> {
    let groups: Vec<(PathBuf, Group)> = {
        let found: Vec<(PathBuf, Group)> = GROUP_DIRS
            .iter()
            .map(|(d, g)| (root.join(d), *g))
            .filter(|(p, _)| p.is_dir())
            .collect();
        if found.is_empty() {
            vec![(root.to_path_buf(), Group::Unspecified)]
        } else {
            found
        }
    };

    // (group, alphabet dir, character dir, files, drawers)
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut plan: Vec<(Group, PathBuf, Vec<(PathBuf, Vec<PathBuf>, Vec<u32>)>)> = Vec::new();
    for (dir, group) in groups {
        let alphabets = sorted_entries(&dir, true).map_err(ArcError::io(&dir))?;
        for alpha in alphabets {
            let mut chars = Vec::new();
            for ch in sorted_entries(&alpha, true).map_err(ArcError::io(&alpha))? {
                let files = sorted_entries(&ch, false).map_err(ArcError::io(&ch))?;
                if files.is_empty() {
                    errors.push((ch.clone(), "character directory has no png files".to_string()));
                    continue;
                }
                if files.len() != EXPECTED_DRAWINGS {
                    warnings.push(StructuralWarning {
                        path: ch.clone(),
                        message: format!("{} drawings, expected {EXPECTED_DRAWINGS}", files.len()),
                    });
                }
                match drawer_ids(&files) {
                    Ok(drawers) => chars.push((ch, files, drawers)),
                    Err(mut bad) => errors.append(&mut bad),
                }
            }
            if chars.is_empty() {
                errors.push((alpha.clone(), "alphabet has no character directories".to_string()));
            } else {
                plan.push((group, alpha, chars));
            }
        }
    }
    if plan.is_empty() && errors.is_empty() {
        errors.push((root.to_path_buf(), "no alphabet directories found".to_string()));
    }

    let all_files: Vec<&PathBuf> = plan.iter().flat_map(|(_, _, cs)| cs.iter().flat_map(|c| &c.1)).collect();
    let images: Vec<std::result::Result<Tensor, (PathBuf, String)>> = all_files
        .par_iter()
        .map(|p| load_image(p, side).map_err(|e| ((*p).clone(), e.to_string())))
        .collect();
    let mut images = images.into_iter();
    let mut alphabets = Vec::with_capacity(plan.len());
    for (group, alpha, chars) in plan {
        let mut characters = Vec::with_capacity(chars.len());
        for (ch, files, drawers) in chars {
            let mut drawings = Vec::with_capacity(files.len());
            for drawer in drawers {
                match images.next().expect("one image per file") {
                    Ok(image) => drawings.push(Drawing { image, drawer }),
                    Err(e) => errors.push(e),
                }
            }
            characters.push(Character {
                name: name_of(&ch),
                drawings,
            });
        }
        alphabets.push(Alphabet {
            name: name_of(&alpha),
            group,
            characters,
        });
    }
    if !errors.is_empty() {
        return Err(ArcError::Ingest(errors));
    }
    Ok((Dataset { side, alphabets }, warnings))
}

fn load_packed(root: &Path) -> Result<(Dataset, Vec<StructuralWarning>)> {
    let meta_path = root.join(META_FILE);
    let meta = fs::read_to_string(&meta_path)
        .map_err(|e| ArcError::Ingest(vec![(meta_path.clone(), e.to_string())]))?;
    let side: usize = parse_key_values(&meta)?
        .get("side")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ArcError::Ingest(vec![(meta_path.clone(), "missing side=<S>".into())]))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| ArcError::Ingest(vec![(manifest_path.clone(), e.to_string())]))?;

    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut alphabets: Vec<Alphabet> = Vec::new();
    for (n, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad_line = |why: &str| (manifest_path.clone(), format!("line {}: {why}", n + 1));
        if fields.len() != 5 {
            errors.push(bad_line("expected 5 tab-separated fields"));
            continue;
        }
        let Some(group) = Group::parse(fields[1]) else {
            errors.push(bad_line("unknown group"));
            continue;
        };
        let drawers: std::result::Result<Vec<u32>, _> = fields[4].split(',').map(str::parse).collect();
        let Ok(drawers) = drawers else {
            errors.push(bad_line("drawer list is not comma-separated integers"));
            continue;
        };
        let path = root.join(CHARS_DIR).join(format!("{}.arct", fields[0]));
        let tensor = match ndcore::io::load(&path) {
            Ok(mut ts) if ts.len() == 1 => ts.remove(0),
            Ok(_) => {
                errors.push((path, "expected exactly one tensor".into()));
                continue;
            }
            Err(e) => {
                errors.push((path, e.to_string()));
                continue;
            }
        };
        if tensor.shape() != [drawers.len(), side, side] {
            errors.push((path, format!("shape {:?} does not match manifest", tensor.shape())));
            continue;
        }
        if drawers.len() != EXPECTED_DRAWINGS {
            warnings.push(StructuralWarning {
                path: path.clone(),
                message: format!("{} drawings, expected {EXPECTED_DRAWINGS}", drawers.len()),
            });
        }
        let per = side * side;
        let drawings = drawers
            .iter()
            .enumerate()
            .map(|(i, &drawer)| Drawing {
                image: Tensor::new(&[side, side], tensor.data()[i * per..(i + 1) * per].to_vec()).expect("slice"),
                drawer,
            })
            .collect();
        if alphabets.last().is_none_or(|a| a.name != fields[2]) {
            alphabets.push(Alphabet {
                name: fields[2].to_string(),
                group,
                characters: Vec::new(),
            });
        }
        alphabets.last_mut().expect("just pushed").characters.push(Character {
            name: fields[3].to_string(),
            drawings,
        });
    }
    if alphabets.is_empty() && errors.is_empty() {
        errors.push((manifest_path, "manifest lists no characters".into()));
    }
    if !errors.is_empty() {
        return Err(ArcError::Ingest(errors));
    }
    Ok((Dataset { side, alphabets }, warnings))
}

/// Loads and fully indexes a dataset.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<(Dataset, Vec<StructuralWarning>)> {
    if !root.is_dir() {
        return Err(ArcError::Ingest(vec![(root.to_path_buf(), "not a directory".into())]));
    }
    match layout {
        Layout::ImageTree { side } => {
            if side == 0 {
                return Err(ArcError::Config("image side must be positive".into()));
            }
            load_tree(root, side)
        }
        Layout::Packed => load_packed(root),
    }
}

/// Writes `ds` in the packed layout. Output is byte-identical for identical input.
pub fn save_packed(ds: &Dataset, out: &Path) -> Result<()> {
    let chars = out.join(CHARS_DIR);
    fs::create_dir_all(&chars).map_err(ArcError::io(&chars))?;
    fs::write(out.join(META_FILE), format!("side={}\n", ds.side)).map_err(ArcError::io(out.join(META_FILE)))?;
    let mut manifest = String::new();
    let mut index = 0usize;
    for alpha in &ds.alphabets {
        for ch in &alpha.characters {
            let s = ds.side;
            let mut data = Vec::with_capacity(ch.drawings.len() * s * s);
            for d in &ch.drawings {
                data.extend_from_slice(d.image.data());
            }
            let tensor = Tensor::new(&[ch.drawings.len(), s, s], data)?;
            ndcore::io::save(chars.join(format!("{index:05}.arct")), &[tensor])?;
            let drawers: Vec<String> = ch.drawings.iter().map(|d| d.drawer.to_string()).collect();
            let _ = writeln!(
                manifest,
                "{index:05}\t{}\t{}\t{}\t{}",
                alpha.group.as_str(),
                alpha.name,
                ch.name,
                drawers.join(",")
            );
            index += 1;
        }
    }
    fs::write(out.join(MANIFEST_FILE), manifest).map_err(ArcError::io(out.join(MANIFEST_FILE)))?;
    Ok(())
}
