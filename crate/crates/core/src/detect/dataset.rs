//! On-disk dataset split: `NNNN_rgb.ppm`, `NNNN_ir.ppm`, `NNNN.txt` per
//! scene plus a `meta.txt` of `key=value` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::detect::synth::{Scene, SceneObject, SynthConfig, Visibility};
use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::tensor::{FeatureMap, Shape};

pub const META_FILE: &str = "meta.txt";

/// Binary 8-bit PPM of a `1 x 3 x H x W` map with values in `[0, 1]`.
pub fn encode_ppm(img: &FeatureMap) -> Vec<u8> {
    let s = img.shape();
    assert_eq!((s.n, s.c), (1, 3), "PPM needs a 1x3xHxW map, got {s}");
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(3 * s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((img.get(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Binary 8-bit PGM (`P5`) of a row-major `w x h` grid.
pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), w * h);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses the header of a binary PNM file. Returns `(magic, width, height,
/// maxval, offset of pixel data)`.
pub fn parse_pnm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, usize)> {
    let bad = |m: &str| Error::Dataset(format!("bad PNM header: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric field"));
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, num(&fields[3])?, pos))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<FeatureMap> {
    let (magic, w, h, maxval, off) = parse_pnm_header(bytes)?;
    if magic != "P6" || maxval != 255 {
        return Err(Error::Dataset(format!("expected 8-bit P6, got {magic} maxval {maxval}")));
    }
    if w == 0 || h == 0 || bytes.len() < off + 3 * w * h {
        return Err(Error::Dataset("truncated PPM raster".into()));
    }
    let raster = &bytes[off..off + 3 * w * h];
    Ok(FeatureMap::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        raster[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

pub fn read_ppm(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `class_id cx cy w h` per line.
pub fn encode_labels(objects: &[SceneObject]) -> String {
    let mut out = String::new();
    for o in objects {
        let b = &o.bbox;
        writeln!(
            out,
            "{} {} {} {} {}",
            o.class_id,
            (b.x1 + b.x2) / 2.0,
            (b.y1 + b.y2) / 2.0,
            b.width(),
            b.height()
        )
        .unwrap();
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<SceneObject>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split_ascii_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::Dataset(format!("label line `{line}` needs 5 fields")));
            }
            let class_id = f[0]
                .parse::<usize>()
                .map_err(|_| Error::Dataset(format!("bad class id in `{line}`")))?;
            let v: Vec<f64> = f[1..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Dataset(format!("bad number in `{line}`")))?;
            let bbox = BBox::from_center(v[0], v[1], v[2], v[3]);
            if !bbox.is_valid() {
                return Err(Error::Dataset(format!("degenerate box in `{line}`")));
            }
            Ok(SceneObject {
                class_id,
                bbox,
                visibility: Visibility::Both,
            })
        })
        .collect()
}

pub fn synth_meta(cfg: &SynthConfig, scenes: &[Scene]) -> KeyValues {
    let mut kv = cfg.to_key_values();
    kv.set("count", scenes.len());
    kv.set("dropped_objects", scenes.iter().map(|s| s.dropped).sum::<usize>());
    kv
}

/// Writes one split. The directory is created if needed.
pub fn write_split(dir: &Path, meta: &KeyValues, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        write(&dir.join(format!("{i:04}_rgb.ppm")), encode_ppm(&s.rgb))?;
        write(&dir.join(format!("{i:04}_ir.ppm")), encode_ppm(&s.ir))?;
        write(&dir.join(format!("{i:04}.txt")), encode_labels(&s.objects))?;
    }
    write(&dir.join(META_FILE), meta.to_text())
}

/// A split loaded from disk.
#[derive(Debug, Clone)]
pub struct Split {
    pub meta: KeyValues,
    pub scenes: Vec<Scene>,
}

impl Split {
    pub fn num_classes(&self) -> Result<usize> {
        self.meta
            .get_parsed::<usize>("num_classes")?
            .ok_or_else(|| Error::Dataset("meta.txt lacks num_classes".into()))
    }
}

pub fn read_split(dir: &Path) -> Result<Split> {
    let meta_path = dir.join(META_FILE);
    let meta = KeyValues::parse(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let mut ids: Vec<usize> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".txt") {
            if let Ok(id) = stem.parse::<usize>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    let mut scenes = Vec::with_capacity(ids.len());
    for id in ids {
        let rgb = read_ppm(&dir.join(format!("{id:04}_rgb.ppm")))?;
        let ir = read_ppm(&dir.join(format!("{id:04}_ir.ppm")))?;
        if rgb.shape() != ir.shape() {
            return Err(Error::Dataset(format!("scene {id:04}: RGB and IR sizes differ")));
        }
        let label_path = dir.join(format!("{id:04}.txt"));
        let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
        scenes.push(Scene {
            rgb,
            ir,
            objects: parse_labels(&text)?,
            dropped: 0,
        });
    }
    Ok(Split { meta, scenes })
}
