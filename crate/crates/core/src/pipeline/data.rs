//! Synthetic scenes where two classes can only be told apart by context.
//!
//! Classes 1 and 2 draw the same disc glyph inside their box. Class 1 is
//! flanked by vertical rails, class 2 by horizontal rails, both lying
//! between 2.1x and 2.5x the box about its center. A crop of the box padded
//! by 0.2 (1.2x) therefore sees identical pixels for the two classes. Further
//! classes have distinct glyphs and no rails.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Rail band in half-box units from the center.
pub const RAIL_INNER: f64 = 2.1;
pub const RAIL_OUTER: f64 = 2.5;
/// Half extent, in box sizes, that must stay inside the image and clear of
/// other objects.
pub const CONTEXT_HALF_EXTENT: f64 = 1.35;
pub const MAX_CLASSES: usize = 6;

const BACKGROUND: f64 = 0.12;
const RAIL_COLOR: [f64; 3] = [0.85, 0.85, 0.85];
const GLYPH_COLORS: [[f64; 3]; MAX_CLASSES] = [
    [0.95, 0.55, 0.15],
    [0.95, 0.55, 0.15],
    [0.2, 0.8, 0.3],
    [0.3, 0.45, 0.95],
    [0.9, 0.2, 0.7],
    [0.9, 0.9, 0.2],
];
const PLACEMENT_TRIES: usize = 200;
/// Box centers and sizes lie on this dyadic grid so corner files round-trip
/// exactly.
const GRID: f64 = 1.0 / 32.0;

fn snap(v: f64) -> f64 {
    (v / GRID).ceil() * GRID
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box side range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Uniform per-pixel noise amplitude on the background.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_classes: 4,
            min_objects: 1,
            max_objects: 3,
            min_size: 8.0,
            max_size: 11.0,
            noise: 0.04,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return fail(format!("num_classes {} outside 2..={MAX_CLASSES}", self.num_classes));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return fail("object count range is empty".into());
        }
        if !(self.min_size >= 1.0 && self.max_size >= self.min_size) {
            return fail(format!("size range [{}, {}]", self.min_size, self.max_size));
        }
        let need = 2.0 * CONTEXT_HALF_EXTENT * self.max_size;
        if (self.width.min(self.height) as f64) < need {
            return fail(format!(
                "{}x{} image cannot hold an object of size {} with its context",
                self.width, self.height, self.max_size
            ));
        }
        if !(0.0..=BACKGROUND).contains(&self.noise) {
            return fail(format!("noise {} outside [0, {BACKGROUND}]", self.noise));
        }
        Ok(())
    }

    /// Classes whose glyphs coincide.
    pub fn ambiguous_pair(&self) -> [usize; 2] {
        [1, 2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnn {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: usize,
    /// `(1, 3, H, W)` in `[0, 1]`, quantised to multiples of 1/255.
    pub image: Tensor,
    pub objects: Vec<ObjectAnn>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<crate::eval::GroundTruth> {
        self.scenes
            .iter()
            .flat_map(|s| {
                s.objects.iter().map(move |o| crate::eval::GroundTruth {
                    image_id: s.id,
                    class_id: o.class_id,
                    bbox: o.bbox,
                })
            })
            .collect()
    }

    /// First `n` scenes and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.scenes.len());
        let part = |scenes: &[SyntheticScene]| Dataset {
            spec: self.spec,
            seed: self.seed,
            scenes: scenes.to_vec(),
        };
        (part(&self.scenes[..n]), part(&self.scenes[n..]))
    }
}

fn scene_rng(seed: u64, id: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((id as u64) << 1) | stream);
    rng
}

/// Object placement for one scene. Boxes keep their context inside the image
/// and away from each other.
pub fn sample_layout(spec: &DatasetSpec, rng: &mut impl Rng) -> Result<Vec<ObjectAnn>> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    for _ in 0..PLACEMENT_TRIES {
        let count = rng.gen_range(spec.min_objects..=spec.max_objects);
        let mut objects: Vec<ObjectAnn> = Vec::with_capacity(count);
        for _ in 0..count {
            let bw = snap(rng.gen_range(spec.min_size..=spec.max_size));
            let bh = snap(rng.gen_range(spec.min_size..=spec.max_size));
            let class_id = rng.gen_range(1..=spec.num_classes);
            let reach = CONTEXT_HALF_EXTENT * bw.max(bh);
            for _ in 0..PLACEMENT_TRIES {
                let x = snap(rng.gen_range(reach..=w - reach - GRID));
                let y = snap(rng.gen_range(reach..=h - reach - GRID));
                let clear = objects.iter().all(|o| {
                    let other = CONTEXT_HALF_EXTENT * o.bbox.w.max(o.bbox.h);
                    (o.bbox.x - x).hypot(o.bbox.y - y) >= reach + other
                });
                if clear {
                    objects.push(ObjectAnn {
                        class_id,
                        bbox: BBox::new(x, y, bw, bh)?,
                    });
                    break;
                }
            }
        }
        if objects.len() == count {
            return Ok(objects);
        }
    }
    Err(Error::Generation(format!(
        "could not place {}..={} objects in {}x{}",
        spec.min_objects, spec.max_objects, spec.width, spec.height
    )))
}

fn glyph_covers(class_id: usize, u: f64, v: f64) -> bool {
    match class_id {
        1 | 2 => u * u + v * v <= 1.0,
        3 => u.abs().max(v.abs()) <= 0.8,
        4 => u.abs() + v.abs() <= 1.0,
        5 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        _ => {
            let r = u.abs().max(v.abs());
            (0.55..=1.0).contains(&r)
        }
    }
}

fn rail_covers(class_id: usize, u: f64, v: f64) -> bool {
    let band = |a: f64| (RAIL_INNER..=RAIL_OUTER).contains(&a.abs());
    match class_id {
        1 => band(u) && v.abs() <= RAIL_OUTER,
        2 => band(v) && u.abs() <= RAIL_OUTER,
        _ => false,
    }
}

/// Paints objects onto a noisy background. Pixel `(i, j)` covers
/// `[i, i + 1) x [j, j + 1)`; coverage is tested at its center.
pub fn render_scene(spec: &DatasetSpec, objects: &[ObjectAnn], noise_rng: &mut impl Rng) -> Tensor {
    let (w, h) = (spec.width, spec.height);
    let mut img = Tensor::zeros(Shape::new(1, 3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let n = if spec.noise > 0.0 {
                    noise_rng.gen_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                img.set(0, c, y, x, BACKGROUND + n);
            }
        }
    }
    let paint = |img: &mut Tensor, covers: &dyn Fn(&ObjectAnn, f64, f64) -> Option<[f64; 3]>| {
        for o in objects {
            let (hw, hh) = (0.5 * o.bbox.w, 0.5 * o.bbox.h);
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 + 0.5 - o.bbox.x) / hw;
                    let v = (y as f64 + 0.5 - o.bbox.y) / hh;
                    if let Some(color) = covers(o, u, v) {
                        for (c, val) in color.iter().enumerate() {
                            img.set(0, c, y, x, *val);
                        }
                    }
                }
            }
        }
    };
    paint(&mut img, &|o, u, v| rail_covers(o.class_id, u, v).then_some(RAIL_COLOR));
    paint(&mut img, &|o, u, v| {
        glyph_covers(o.class_id, u, v).then_some(GLYPH_COLORS[o.class_id - 1])
    });
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// One scene; depends only on `(spec, seed, id)`.
pub fn gen_scene(spec: &DatasetSpec, seed: u64, id: usize) -> Result<SyntheticScene> {
    let objects = sample_layout(spec, &mut scene_rng(seed, id, 0))?;
    let image = render_scene(spec, &objects, &mut scene_rng(seed, id, 1));
    Ok(SyntheticScene { id, image, objects })
}

pub fn gen_synthetic_dataset(spec: &DatasetSpec, num: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let scenes = (0..num).map(|id| gen_scene(spec, seed, id)).collect::<Result<_>>()?;
    Ok(Dataset {
        spec: *spec,
        seed,
        scenes,
    })
}

const DATASET_FILE: &str = "dataset.json";
const ANNOTATION_FILE: &str = "annotations.jsonl";
const IMAGE_DIR: &str = "images";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    spec: DatasetSpec,
    seed: u64,
    num_scenes: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: usize,
    file: String,
    width: usize,
    height: usize,
    objects: Vec<ObjectRecord>,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    class_id: usize,
    #[serde(rename = "box")]
    corners: [f64; 4],
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, f64::from(p.0[c]) / 255.0);
        }
    }
    t
}

pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Shape(format!("expected one RGB image, got {s}")));
    }
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| (t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Writes a binary PPM.
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_image(t)?
        .save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

fn image_path(dir: &Path, id: usize) -> (String, PathBuf) {
    let file = format!("{IMAGE_DIR}/{id:05}.ppm");
    let path = dir.join(&file);
    (file, path)
}

/// `dataset.json`, `annotations.jsonl` and `images/NNNNN.ppm` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let header = DatasetHeader {
        spec: ds.spec,
        seed: ds.seed,
        num_scenes: ds.scenes.len(),
    };
    std::fs::write(dir.join(DATASET_FILE), serde_json::to_string_pretty(&header)? + "\n")?;
    let mut ann = BufWriter::new(File::create(dir.join(ANNOTATION_FILE))?);
    for s in &ds.scenes {
        let (file, path) = image_path(dir, s.id);
        write_ppm(&path, &s.image)?;
        let record = AnnotationRecord {
            image_id: s.id,
            file,
            width: ds.spec.width,
            height: ds.spec.height,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    class_id: o.class_id,
                    corners: o.bbox.corners(),
                })
                .collect(),
        };
        writeln!(ann, "{}", serde_json::to_string(&record)?)?;
    }
    ann.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(DATASET_FILE))?)?;
    let reader = BufReader::new(File::open(dir.join(ANNOTATION_FILE))?);
    let mut scenes = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: AnnotationRecord = serde_json::from_str(&line)?;
        let image = read_ppm(&dir.join(&r.file))?;
        let objects = r
            .objects
            .iter()
            .map(|o| {
                if o.class_id == 0 || o.class_id > header.spec.num_classes {
                    return Err(Error::Config(format!("class {} in image {}", o.class_id, r.image_id)));
                }
                Ok(ObjectAnn {
                    class_id: o.class_id,
                    bbox: BBox::from_corners(o.corners)?,
                })
            })
            .collect::<Result<_>>()?;
        scenes.push(SyntheticScene {
            id: r.image_id,
            image,
            objects,
        });
    }
    Ok(Dataset {
        spec: header.spec,
        seed: header.seed,
        scenes,
    })
}
