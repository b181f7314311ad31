//! Synthetic source/target segmentation data: scene generation, the target
//! domain gap, PNG files and the manifests that list them.

mod png_io;
mod scene;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use png_io::{encode_label, encode_rgb, encode_rgb8, quantize, read_image, read_label, write_bytes, write_image, write_label};
pub use scene::{sample_scene, DomainGap, Scene, SceneSpec, Shape, ShapeKind, CLASS_NAMES, PALETTE};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};

const MANIFEST_HEADER: &str = "pixmatch-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Scene `index` of a domain, drawn from its own derived seed so any image
/// can be regenerated alone.
pub fn scene_rng(spec: &SceneSpec, domain: Domain, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((domain.stream() << 40) | index as u64);
    rng
}

/// Regenerates one sample. Returns the scene, its rendered image and its label.
pub fn render_sample(spec: &SceneSpec, gap: &DomainGap, domain: Domain, index: usize) -> Result<(Scene, ImageTensor, LabelMap)> {
    let mut rng = scene_rng(spec, domain, index);
    let scene = sample_scene(spec, &mut rng)?;
    let image = match domain {
        Domain::Source => scene.render(&[]),
        Domain::Target => gap.render(&scene, &mut rng)?,
    };
    let label = scene.rasterize_labels();
    Ok((scene, image, label))
}

/// List of (image, label) PNG pairs plus the metadata that produced them.
/// Paths are relative to `root`, the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub domain: String,
    pub seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    pub scene_digest: String,
    pub gap_digest: String,
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        writeln!(out, "domain = {}", self.domain).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "num_classes = {}", self.num_classes).unwrap();
        writeln!(out, "image_size = {}", self.image_size).unwrap();
        writeln!(out, "scene_digest = {}", self.scene_digest).unwrap();
        writeln!(out, "gap_digest = {}", self.gap_digest).unwrap();
        out.push_str("---\n");
        for (img, lbl) in &self.entries {
            writeln!(out, "{} {}", slash_path(img), slash_path(lbl)).unwrap();
        }
        out
    }

    pub fn parse(text: &str, root: &Path, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::decode(origin, msg);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(bad(format!("missing `{MANIFEST_HEADER}` header")));
        }
        let mut m = Manifest {
            domain: String::new(),
            seed: 0,
            num_classes: 0,
            image_size: 0,
            scene_digest: String::new(),
            gap_digest: String::new(),
            root: root.to_path_buf(),
            entries: Vec::new(),
        };
        let mut in_body = false;
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !in_body {
                if line == "---" {
                    in_body = true;
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: expected `key = value`", n + 2)))?;
                let value = value.trim();
                let num = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
                match key.trim() {
                    "domain" => m.domain = value.to_string(),
                    "seed" => m.seed = num(value)?,
                    "num_classes" => m.num_classes = num(value)? as usize,
                    "image_size" => m.image_size = num(value)? as usize,
                    "scene_digest" => m.scene_digest = value.to_string(),
                    "gap_digest" => m.gap_digest = value.to_string(),
                    other => return Err(bad(format!("line {}: unknown key `{other}`", n + 2))),
                }
            } else {
                let mut parts = line.split_whitespace();
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) => m.entries.push((PathBuf::from(a), PathBuf::from(b))),
                    _ => return Err(bad(format!("line {}: expected `image label`", n + 2))),
                }
            }
        }
        if !in_body {
            return Err(bad("missing `---` separator".into()));
        }
        if m.num_classes < 2 {
            return Err(bad("num_classes must be at least 2".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &root, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable digest input");
    Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Decodes and validates sample `index`: label values must be class indices
/// or IGNORE, and the image and label extents must agree.
pub fn load_sample(manifest: &Manifest, index: usize) -> Result<(ImageTensor, LabelMap)> {
    let (img_rel, lbl_rel) = manifest.entries.get(index).ok_or(Error::Index {
        index,
        len: manifest.len(),
    })?;
    let img_path = manifest.root.join(img_rel);
    let lbl_path = manifest.root.join(lbl_rel);
    let image = read_image(&img_path)?;
    let label = read_label(&lbl_path)?;
    label
        .validate(manifest.num_classes)
        .map_err(|e| Error::decode(&lbl_path, e.to_string()))?;
    if image.dims() != label.dims() {
        return Err(Error::decode(
            &lbl_path,
            format!("label {:?} does not match image {:?}", label.dims(), image.dims()),
        ));
    }
    Ok((image, label))
}

/// Every sample of a manifest, decoded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<LabelMap>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Config(format!("manifest for `{}` lists no samples", manifest.domain)));
        }
        let samples = (0..manifest.len())
            .into_par_iter()
            .map(|i| load_sample(manifest, i))
            .collect::<Result<Vec<_>>>()?;
        let (images, labels) = samples.into_iter().unzip();
        Ok(Dataset {
            images,
            labels,
            num_classes: manifest.num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn write_domain(spec: &SceneSpec, gap: &DomainGap, domain: Domain, n: usize, out_dir: &Path) -> Result<Manifest> {
    let name = domain.name();
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let (_, image, label) = render_sample(spec, gap, domain, i)?;
            let img_rel = PathBuf::from(name).join(format!("image_{i:05}.png"));
            let lbl_rel = PathBuf::from(name).join(format!("label_{i:05}.png"));
            write_image(&out_dir.join(&img_rel), &image)?;
            write_label(&out_dir.join(&lbl_rel), &label)?;
            Ok((img_rel, lbl_rel))
        })
        .collect::<Result<Vec<_>>>()?;
    let gap_digest = match domain {
        Domain::Source => digest(&DomainGap::identity()),
        Domain::Target => digest(gap),
    };
    let manifest = Manifest {
        domain: name.to_string(),
        seed: spec.seed,
        num_classes: spec.num_classes,
        image_size: spec.image_size,
        scene_digest: digest(spec),
        gap_digest,
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(format!("{name}.manifest")))?;
    Ok(manifest)
}

/// Writes `n_source` source and `n_target` target samples under `out_dir`
/// together with `source.manifest` and `target.manifest`.
pub fn generate_pair_dataset(
    spec: &SceneSpec,
    gap: &DomainGap,
    n_source: usize,
    n_target: usize,
    out_dir: &Path,
) -> Result<(Manifest, Manifest)> {
    spec.validate()?;
    gap.validate()?;
    if n_source == 0 {
        return Err(Error::Config("the source domain needs at least one sample".into()));
    }
    if n_target == 0 {
        return Err(Error::Config("the target domain needs at least one sample".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let source = write_domain(spec, gap, Domain::Source, n_source, out_dir)?;
    let target = write_domain(spec, gap, Domain::Target, n_target, out_dir)?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            domain: "target".into(),
            seed: 9,
            num_classes: 5,
            image_size: 64,
            scene_digest: "ab".into(),
            gap_digest: "cd".into(),
            root: PathBuf::from("/data"),
            entries: vec![("t/image_00000.png".into(), "t/label_00000.png".into())],
        };
        let back = Manifest::parse(&m.to_text(), Path::new("/data"), Path::new("x")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_rejects_garbage() {
        for text in ["nope\n", "pixmatch-manifest v1\nseed = x\n---\n", "pixmatch-manifest v1\nnum_classes = 5\n"] {
            assert!(Manifest::parse(text, Path::new("."), Path::new("m")).is_err());
        }
    }

    #[test]
    fn derived_streams_differ_by_domain_and_index() {
        use rand::Rng;
        let spec = SceneSpec::default();
        let a: u64 = scene_rng(&spec, Domain::Source, 3).gen();
        let b: u64 = scene_rng(&spec, Domain::Target, 3).gen();
        let c: u64 = scene_rng(&spec, Domain::Source, 4).gen();
        assert!(a != b && a != c);
        assert_eq!(a, scene_rng(&spec, Domain::Source, 3).gen::<u64>());
    }
}
