//! File formats: raw little-endian f32 tensors with JSON sidecars, binary PGM
//! masks, PNG frames, layout manifests and denoiser weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserDims, ToyDenoiser, Trajectory};
use crate::error::{Error, Result};
use crate::layout::{resample_mask, tokenize, LayoutSet, Mask, RegionLevel, RegionSpec};
use crate::scalar::Scalar;

pub const MASK_PATTERN: &str = "masks/mask_f{frame:03}_r{region}.pgm";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p).map_err(io_err(p))?;
        }
    }
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: Vec<usize>,
    pub order: String,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl RawSidecar {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            order: "row-major".into(),
            dtype: "f32-le".into(),
            steps: Vec::new(),
            meta: BTreeMap::new(),
        }
    }
}

/// `<stem>.f32` and `<stem>.json`.
pub fn raw_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("json"))
}

pub fn f32_bytes<T: Scalar>(values: impl IntoIterator<Item = T>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.as_f32().to_le_bytes()).collect()
}

/// Writes a tensor in logical row-major order.
pub fn write_raw<T: Scalar, D: ndarray::Dimension>(
    stem: &Path,
    a: &ndarray::ArrayRef<T, D>,
    sidecar: RawSidecar,
) -> Result<()> {
    let (bin, json) = raw_paths(stem);
    ensure_parent(&bin)?;
    fs::write(&bin, f32_bytes(a.iter().copied())).map_err(io_err(&bin))?;
    write_json(&json, &sidecar)
}

pub fn read_raw<T: Scalar>(stem: &Path) -> Result<(ArrayD<T>, RawSidecar)> {
    let (bin, json) = raw_paths(stem);
    let side: RawSidecar = read_json(&json)?;
    if side.order != "row-major" || side.dtype != "f32-le" {
        return Err(format_err(&json, "only row-major f32-le tensors are supported"));
    }
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(format_err(&bin, format!("expected {} bytes, found {}", 4 * n, bytes.len())));
    }
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let a = ArrayD::from_shape_vec(IxDyn(&side.shape), data).map_err(|e| format_err(&bin, e.to_string()))?;
    Ok((a, side))
}

pub fn read_raw4<T: Scalar>(stem: &Path) -> Result<Array4<T>> {
    let (a, _) = read_raw(stem)?;
    a.into_dimensionality()
        .map_err(|_| format_err(&stem.with_extension("json"), "expected a 4-d tensor"))
}

pub fn write_pgm(path: &Path, img: ArrayView2<u8>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = img.dim();
    let data: Vec<u8> = img.iter().copied().collect();
    let file = fs::File::create(path).map_err(io_err(path))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&data, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img: GrayImage = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm(path, mask.mapv(|b| if b { 255 } else { 0 }).view())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_gray(path)?.mapv(|v| v >= 128))
}

/// Signed `[-1, 1]` pixel to 8 bits.
pub fn to_u8<T: Scalar>(v: T) -> u8 {
    (((v.as_f64() + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn from_u8<T: Scalar>(v: u8) -> T {
    T::of(v as f64 / 255.0 * 2.0 - 1.0)
}

pub fn write_png<T: Scalar>(path: &Path, frame: ArrayView3<T>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::mismatch("png channels", 3, c));
    }
    let data: Vec<u8> = frame.iter().map(|v| to_u8(*v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, data).expect("buffer sized from frame");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(from_u8).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| format_err(path, e.to_string()))
}

/// Per-map normalized 8-bit heatmap; a constant map is mid-gray.
pub fn heatmap<T: Scalar>(map: ArrayView2<T>) -> Array2<u8> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    if !(hi > lo) {
        return map.mapv(|_| 128);
    }
    map.mapv(|v| (((v.as_f64() - lo) / (hi - lo)) * 255.0).round() as u8)
}

/// Video directory: `frames.f32` (+ sidecar) is authoritative; PNGs are for
/// viewing and are read only when the raw tensor is absent.
pub fn write_video<T: Scalar>(dir: &Path, frames: &Array4<T>) -> Result<()> {
    write_raw(&dir.join("frames"), frames, RawSidecar::new(frames.shape()))?;
    for (i, f) in frames.outer_iter().enumerate() {
        write_png(&dir.join(format!("frame_{i:03}.png")), f)?;
    }
    Ok(())
}

pub fn read_video<T: Scalar>(dir: &Path) -> Result<Array4<T>> {
    if dir.join("frames.f32").exists() {
        return read_raw4(&dir.join("frames"));
    }
    let mut frames = Vec::new();
    while let Some(p) = Some(dir.join(format!("frame_{:03}.png", frames.len()))).filter(|p| p.exists()) {
        frames.push(read_png::<T>(&p)?);
    }
    let Some(first) = frames.first() else {
        return Err(format_err(dir, "no frames.f32 or frame_000.png"));
    };
    let (h, w, c) = first.dim();
    let mut out = Array4::zeros((frames.len(), h, w, c));
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (h, w, c) {
            return Err(format_err(dir, format!("frame {i} has a different size")));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(f);
    }
    Ok(out)
}

/// Flow of `n - 1` consecutive pairs as one `(n - 1, h, w, 2)` tensor.
pub fn write_flow<T: Scalar>(stem: &Path, flow: &[Array3<T>]) -> Result<()> {
    let (h, w, _) = flow.first().map(|f| f.dim()).unwrap_or((0, 0, 2));
    let mut all = Array4::zeros((flow.len(), h, w, 2));
    for (i, f) in flow.iter().enumerate() {
        all.index_axis_mut(ndarray::Axis(0), i).assign(f);
    }
    write_raw(stem, &all, RawSidecar::new(all.shape()))
}

pub fn read_flow<T: Scalar>(stem: &Path) -> Result<Vec<Array3<T>>> {
    let all = read_raw4::<T>(stem)?;
    Ok(all.outer_iter().map(|f| f.to_owned()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRegion {
    pub id: u32,
    pub level: RegionLevel,
    pub priority: i32,
    pub prompt: String,
    #[serde(default = "default_pattern")]
    pub mask_pattern: String,
}

fn default_pattern() -> String {
    MASK_PATTERN.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutManifest {
    pub global_prompt: String,
    pub frames: usize,
    /// `(height, width)` of the stored masks.
    pub resolution: (usize, usize),
    pub regions: Vec<ManifestRegion>,
}

pub fn mask_file(pattern: &str, frame: usize, region: u32) -> String {
    pattern
        .replace("{frame:03}", &format!("{frame:03}"))
        .replace("{frame}", &frame.to_string())
        .replace("{region}", &region.to_string())
}

/// Writes `layout.json` and one mask per (frame, region) under `dir`.
pub fn write_layout(dir: &Path, layout: &LayoutSet) -> Result<()> {
    let manifest = LayoutManifest {
        global_prompt: layout.global_prompt_tokens.join(" "),
        frames: layout.frames(),
        resolution: layout.resolution(),
        regions: layout
            .regions()
            .iter()
            .map(|r| ManifestRegion {
                id: r.id,
                level: r.level,
                priority: r.priority,
                prompt: r.prompt_tokens.join(" "),
                mask_pattern: MASK_PATTERN.into(),
            })
            .collect(),
    };
    for f in 0..layout.frames() {
        for r in layout.regions() {
            write_mask(&dir.join(mask_file(MASK_PATTERN, f, r.id)), &layout.mask(f, r.id))?;
        }
    }
    write_json(&dir.join("layout.json"), &manifest)
}

/// Reads a manifest and its masks, resampling them to `resolution` when given.
pub fn read_layout(manifest_path: &Path, resolution: Option<(usize, usize)>) -> Result<LayoutSet> {
    let manifest: LayoutManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let res = resolution.unwrap_or(manifest.resolution);
    let mut layout = LayoutSet::new(manifest.frames, res)?;
    layout.global_prompt_tokens = tokenize(&manifest.global_prompt);
    for r in &manifest.regions {
        layout.add_region(RegionSpec {
            id: r.id,
            prompt_tokens: tokenize(&r.prompt),
            level: r.level,
            priority: r.priority,
            preserve: false,
        })?;
        for f in 0..manifest.frames {
            let path = dir.join(mask_file(&r.mask_pattern, f, r.id));
            let m = read_mask(&path)?;
            let m = if m.dim() == res { m } else { resample_mask(&m, res)? };
            layout.set_mask(f, r.id, m)?;
        }
    }
    Ok(layout)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub seed: u64,
    pub dims: DenoiserDims,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn weights_blob<T: Scalar>(net: &ToyDenoiser<T>) -> (Vec<u8>, WeightsManifest) {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in net.tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += data.len();
        bytes.extend(f32_bytes(data.iter().copied()));
    }
    let manifest = WeightsManifest {
        seed: net.seed,
        dims: net.dims,
        param_count: offset,
        tensors,
        meta: BTreeMap::new(),
    };
    (bytes, manifest)
}

pub fn weights_from_blob<T: Scalar>(bytes: &[u8], manifest: &WeightsManifest) -> Result<ToyDenoiser<T>> {
    let bad = |m: String| Error::Format {
        path: "<weights>".into(),
        message: m,
    };
    if bytes.len() != 4 * manifest.param_count {
        return Err(bad(format!(
            "blob has {} bytes, manifest expects {}",
            bytes.len(),
            4 * manifest.param_count
        )));
    }
    let mut net = ToyDenoiser::<T>::zeros(manifest.dims)?;
    net.seed = manifest.seed;
    let names: Vec<(String, Vec<usize>)> = net.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if names.len() != manifest.tensors.len() {
        return Err(bad("tensor count differs from dims".into()));
    }
    for ((dst, (name, shape)), entry) in net.tensors_mut().into_iter().zip(names).zip(&manifest.tensors) {
        if entry.name != name || entry.shape != shape {
            return Err(bad(format!("tensor {} does not match {name} {shape:?}", entry.name)));
        }
        for (i, d) in dst.iter_mut().enumerate() {
            let o = 4 * (entry.offset + i);
            *d = T::of(f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64);
        }
    }
    Ok(net)
}

const SHIPPED_BLOB: &[u8] = include_bytes!("../assets/checkpoint/weights.f32");
const SHIPPED_MANIFEST: &str = include_str!("../assets/checkpoint/weights.json");

pub fn shipped_manifest() -> Result<WeightsManifest> {
    serde_json::from_str(SHIPPED_MANIFEST).map_err(|source| Error::Json {
        path: "<shipped checkpoint>".into(),
        source,
    })
}

/// The bundled checkpoint trained on random synthetic scenes.
pub fn shipped_weights<T: Scalar>() -> Result<ToyDenoiser<T>> {
    weights_from_blob(SHIPPED_BLOB, &shipped_manifest()?)
}

/// `weights.f32` and `weights.json` under `dir`.
pub fn save_weights<T: Scalar>(dir: &Path, net: &ToyDenoiser<T>, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
    let (bytes, mut manifest) = weights_blob(net);
    manifest.meta = meta;
    let bin = dir.join("weights.f32");
    ensure_parent(&bin)?;
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    write_json(&dir.join("weights.json"), &manifest)
}

pub fn read_weights_manifest(dir: &Path) -> Result<WeightsManifest> {
    read_json(&dir.join("weights.json"))
}

pub fn load_weights<T: Scalar>(dir: &Path) -> Result<ToyDenoiser<T>> {
    let manifest = read_weights_manifest(dir)?;
    let bin = dir.join("weights.f32");
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    weights_from_blob(&bytes, &manifest).map_err(|e| match e {
        Error::Format { message, .. } => format_err(&bin, message),
        other => other,
    })
}

/// Latents, eps and recorded features of an inversion.
pub fn write_trajectory<T: Scalar>(dir: &Path, traj: &Trajectory<T>) -> Result<()> {
    let views: Vec<_> = traj.latents.iter().map(|l| l.view()).collect();
    let latents = ndarray::stack(ndarray::Axis(0), &views).map_err(|e| format_err(dir, e.to_string()))?;
    let mut side = RawSidecar::new(latents.shape());
    side.steps = traj.timesteps.iter().map(|t| t.map_or(0, |v| v + 1)).collect();
    side.meta.insert("steps_note".into(), "training step + 1 per position; 0 = clean latent".into());
    write_raw(&dir.join("latents"), &latents, side)?;
    if !traj.eps.is_empty() {
        let views: Vec<_> = traj.eps.iter().map(|l| l.view()).collect();
        let eps = ndarray::stack(ndarray::Axis(0), &views).map_err(|e| format_err(dir, e.to_string()))?;
        write_raw(&dir.join("eps"), &eps, RawSidecar::new(eps.shape()))?;
    }
    for ((block, step), f) in &traj.features {
        write_raw(
            &dir.join(format!("features_b{block}_s{step:02}")),
            f,
            RawSidecar::new(f.shape()),
        )?;
    }
    Ok(())
}

pub fn read_trajectory<T: Scalar>(dir: &Path) -> Result<Trajectory<T>> {
    let (latents, side) = read_raw::<T>(&dir.join("latents"))?;
    let latents: ndarray::Array5<T> = latents
        .into_dimensionality()
        .map_err(|_| format_err(dir, "latents must be 5-d"))?;
    let eps: Vec<Array4<T>> = if dir.join("eps.f32").exists() {
        let (e, _) = read_raw::<T>(&dir.join("eps"))?;
        let e: ndarray::Array5<T> = e.into_dimensionality().map_err(|_| format_err(dir, "eps must be 5-d"))?;
        e.outer_iter().map(|v| v.to_owned()).collect()
    } else {
        Vec::new()
    };
    let mut features = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        let Some(rest) = name.strip_prefix("features_b").and_then(|r| r.strip_suffix(".f32")) else {
            continue;
        };
        let Some((b, s)) = rest.split_once("_s") else { continue };
        let (Ok(b), Ok(s)) = (b.parse::<usize>(), s.parse::<usize>()) else {
            continue;
        };
        let (f, _) = read_raw::<T>(&dir.join(format!("features_b{b}_s{s:02}")))?;
        let f: Array2<T> = f.into_dimensionality().map_err(|_| format_err(dir, "features must be 2-d"))?;
        features.insert((b, s), f);
    }
    Ok(Trajectory {
        timesteps: side.steps.iter().map(|s| s.checked_sub(1)).collect(),
        latents: latents.outer_iter().map(|v| v.to_owned()).collect(),
        eps,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, SeedStream};

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeedStream::new(1).substream("raw");
        let a = Array4::from_shape_simple_fn((2, 3, 4, 3), || normal::<f32>(&mut rng));
        write_raw(&dir.path().join("x"), &a, RawSidecar::new(a.shape())).unwrap();
        assert_eq!(read_raw4::<f32>(&dir.path().join("x")).unwrap(), a);
    }

    #[test]
    fn mask_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_shape_fn((5, 7), |(y, x)| (x + y) % 3 == 0);
        let p = dir.path().join(mask_file(MASK_PATTERN, 2, 4));
        write_mask(&p, &m).unwrap();
        assert!(p.ends_with("masks/mask_f002_r4.pgm"));
        assert_eq!(&fs::read(&p).unwrap()[..2], b"P5");
        assert_eq!(read_mask(&p).unwrap(), m);
        let f = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| from_u8::<f32>(((y * 50 + x * 7 + c * 3) % 256) as u8));
        write_png(&dir.path().join("f.png"), f.view()).unwrap();
        assert_eq!(read_png::<f32>(&dir.path().join("f.png")).unwrap(), f);
    }

    #[test]
    fn heatmap_normalization() {
        assert!(heatmap(Array2::from_elem((3, 3), 0.1f32).view()).iter().all(|v| *v == 128));
        let mut hot = Array2::zeros((3, 3));
        hot[[1, 2]] = 1.0f32;
        let h = heatmap(hot.view());
        assert_eq!(h[[1, 2]], 255);
        assert_eq!(h.iter().filter(|v| **v == 0).count(), 8);
    }

    #[test]
    fn weights_round_trip() {
        let net = ToyDenoiser::<f32>::seeded(DenoiserDims::default(), 4, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_weights(dir.path(), &net, BTreeMap::new()).unwrap();
        assert_eq!(load_weights::<f32>(dir.path()).unwrap(), net);
    }

    #[test]
    fn layout_round_trip() {
        let mut l = LayoutSet::new(2, (4, 4)).unwrap();
        l.global_prompt_tokens = tokenize("a scene");
        l.add_region(RegionSpec::new(1, "red square", RegionLevel::Instance, 1)).unwrap();
        l.set_mask(1, 1, Mask::from_shape_fn((4, 4), |(y, _)| y < 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_layout(dir.path(), &l).unwrap();
        let back = read_layout(&dir.path().join("layout.json"), None).unwrap();
        assert_eq!(back.mask(1, 1), l.mask(1, 1));
        assert_eq!(back.mask(0, 1), l.mask(0, 1));
        assert_eq!(back.global_prompt_tokens, l.global_prompt_tokens);
        let coarse = read_layout(&dir.path().join("layout.json"), Some((2, 2))).unwrap();
        assert_eq!(coarse.mask(1, 1).iter().filter(|v| **v).count(), 2);
    }
}
