//! On-disk synthetic datasets.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scene_00000/cube.bin     radar cube (see `radar::CUBE_MAGIC`)
//! <root>/scene_00000/image.png    8-bit RGB camera frame
//! <root>/scene_00000/boxes.json   ground truth plus condition/daytime tags
//! <root>/scene_00000/rig.json     sensor rig
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::radar::RadarCube;
use crate::synthetic::{generate_scene, render_camera, render_radar, Condition, Daytime, SceneConfig, SensorRig};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
    pub condition: Condition,
    pub daytime: Daytime,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub class_names: Vec<String>,
    /// Scenes per condition name.
    pub conditions: BTreeMap<String, usize>,
    pub rig: SensorRig,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
    pub class: usize,
    pub class_name: String,
    pub radial_velocity: f64,
}

/// Contents of `boxes.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxesFile {
    pub seed: u64,
    pub condition_tag: Condition,
    pub daytime_tag: Daytime,
    pub objects: Vec<LabeledBox>,
}

impl BoxesFile {
    pub fn boxes(&self) -> Vec<Box3D<f64>> {
        self.objects
            .iter()
            .map(|o| Box3D::new(o.center, o.size, o.heading, o.class))
            .collect()
    }
}

/// One loaded scene.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub name: String,
    pub cube: RadarCube<f32>,
    pub image: CameraFrame<f32>,
    pub boxes: Vec<Box3D<f64>>,
    pub condition: Condition,
    pub daytime: Daytime,
    pub rig: SensorRig,
}

/// Split `count` into per-bucket quotas proportional to `weights`
/// (largest remainder, ties to the earlier bucket).
fn quotas(count: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let mut q = vec![0; weights.len()];
        q[0] = count;
        return q;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * count as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = count - q.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        q[i] += 1;
        rest -= 1;
    }
    q
}

fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:05}")
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_png(frame: &CameraFrame<f32>, path: &Path) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let bytes: Vec<u8> = frame
        .pixels
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("pixel buffer size");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path, rig: &SensorRig) -> Result<CameraFrame<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) != (rig.camera.width, rig.camera.height) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "image is {w}x{h}, rig expects {}x{}",
                rig.camera.width, rig.camera.height
            ),
        });
    }
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    CameraFrame::new(
        Tensor::from_vec(&[h, w, 3], data)?,
        rig.camera.intrinsics.cast(),
        rig.camera.extrinsics.cast(),
    )
}

/// Generate `count` scenes under `root`.
///
/// Per-scene seeds come from one ChaCha stream seeded with `seed`.
/// Conditions and daytimes are allotted by quota from the configured weights
/// and shuffled, so the realised mix matches the weights to within one
/// scene per bucket. Refuses a non-empty `root` unless `force` is set.
pub fn generate_dataset(
    root: &Path,
    count: usize,
    seed: u64,
    config: &SceneConfig,
    rig: &SensorRig,
    force: bool,
) -> Result<Manifest> {
    rig.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Invalid(format!(
                "{} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        if non_empty {
            for entry in fs::read_dir(root)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if path.is_dir() && name.starts_with("scene_") {
                    fs::remove_dir_all(&path)?;
                } else if name == MANIFEST_FILE {
                    fs::remove_file(&path)?;
                }
            }
        }
    }
    fs::create_dir_all(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let mut conditions: Vec<Condition> = quotas(count, &config.condition_weights)
        .into_iter()
        .zip(Condition::ALL)
        .flat_map(|(n, c)| std::iter::repeat_n(c, n))
        .collect();
    conditions.shuffle(&mut rng);
    let nights = quotas(count, &[1.0 - config.night_fraction, config.night_fraction])[1];
    let mut daytimes: Vec<Daytime> = (0..count)
        .map(|i| if i < nights { Daytime::Night } else { Daytime::Day })
        .collect();
    daytimes.shuffle(&mut rng);

    let entries: Vec<ManifestEntry> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut scene = generate_scene(seeds[i], config, rig)?;
            scene.condition = conditions[i];
            scene.daytime = daytimes[i];
            let dir_name = scene_dir_name(i);
            let dir = root.join(&dir_name);
            fs::create_dir_all(&dir)?;
            render_radar::<f32>(&scene, rig).write(&dir.join("cube.bin"))?;
            write_png(&render_camera::<f32>(&scene, rig, &config.classes), &dir.join("image.png"))?;
            let boxes = BoxesFile {
                seed: scene.seed,
                condition_tag: scene.condition,
                daytime_tag: scene.daytime,
                objects: scene
                    .objects
                    .iter()
                    .map(|o| LabeledBox {
                        center: o.bbox.center,
                        size: o.bbox.size,
                        heading: o.bbox.heading,
                        class: o.bbox.class_id,
                        class_name: config.classes[o.bbox.class_id].name.clone(),
                        radial_velocity: o.radial_velocity,
                    })
                    .collect(),
            };
            write_json(&dir.join("boxes.json"), &boxes)?;
            write_json(&dir.join("rig.json"), rig)?;
            Ok(ManifestEntry {
                dir: dir_name,
                seed: scene.seed,
                condition: scene.condition,
                daytime: scene.daytime,
                objects: scene.objects.len(),
            })
        })
        .collect::<Result<_>>()?;

    let mut cond_counts = BTreeMap::new();
    for c in Condition::ALL {
        cond_counts.insert(c.name().to_string(), 0);
    }
    for e in &entries {
        *cond_counts.get_mut(e.condition.name()).unwrap() += 1;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        count,
        class_names: config.classes.iter().map(|c| c.name.clone()).collect(),
        conditions: cond_counts,
        rig: rig.clone(),
        scenes: entries,
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Format {
                path,
                reason: "missing dataset manifest".into(),
            });
        }
        let manifest: Manifest = read_json(&path)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path,
                reason: format!("unsupported manifest version {}", manifest.version),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    pub fn rig(&self) -> &SensorRig {
        &self.manifest.rig
    }

    pub fn load(&self, index: usize) -> Result<SceneRecord> {
        let entry = &self.manifest.scenes[index];
        let dir = self.root.join(&entry.dir);
        let rig: SensorRig = read_json(&dir.join("rig.json"))?;
        let boxes: BoxesFile = read_json(&dir.join("boxes.json"))?;
        let cube = RadarCube::<f32>::read(&dir.join("cube.bin"))?;
        let image = read_png(&dir.join("image.png"), &rig)?;
        Ok(SceneRecord {
            name: entry.dir.clone(),
            cube,
            image,
            boxes: boxes.boxes(),
            condition: boxes.condition_tag,
            daytime: boxes.daytime_tag,
            rig,
        })
    }

    /// Load every scene (in parallel, returned in manifest order).
    pub fn load_all(&self) -> Result<Vec<SceneRecord>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}
