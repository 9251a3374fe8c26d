//! Volume ingestion, normalization, tumor-slice extraction, the synthetic
//! blob corpus and the slice-dataset archive.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_seed, rng_from, sha256_prefix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MRI-FLAIR")]
    MriFlair,
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

macro_rules! text_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($ty::$var),)+
                    other => Err(format!("unknown {} tag {other:?}", stringify!($ty))),
                }
            }
        }
    };
}

text_enum!(Modality { MriFlair => "MRI-FLAIR", Pet => "PET", Synthetic => "SYNTHETIC" });
text_enum!(Provenance { Real => "real", Synthetic => "synthetic" });
text_enum!(Split { Train => "train", Test => "test" });

/// A 3D scalar field indexed `[x, y, z]`; axial slices run along `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    values: Array3<f64>,
    spacing: [f64; 3],
    modality: Modality,
    subject_id: String,
}

impl Volume3D {
    pub fn new(values: Array3<f64>, spacing: [f64; 3], modality: Modality, subject_id: impl Into<String>) -> Result<Self> {
        let subject_id = subject_id.into();
        if values.shape().iter().any(|&d| d == 0) {
            return Err(Error::Ingestion(format!("{subject_id}: empty dimension in shape {:?}", values.shape())));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Ingestion(format!("{subject_id}: spacing {spacing:?} must be positive")));
        }
        let bad = values.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Ingestion(format!("{subject_id}: {bad} non-finite voxels")));
        }
        Ok(Volume3D { values, spacing, modality, subject_id })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume3D {
    values: Array3<u8>,
    spacing: [f64; 3],
}

impl MaskVolume3D {
    pub fn new(values: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("mask value {v} is not binary")));
        }
        Ok(MaskVolume3D { values, spacing })
    }

    /// Any nonzero label becomes foreground.
    pub fn from_labels(labels: &Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        let bad = labels.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::Ingestion(format!("{bad} non-finite mask voxels")));
        }
        Self::new(labels.mapv(|v| u8::from(v != 0.0)), spacing)
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        MaskVolume3D { values: Array3::zeros(shape), spacing }
    }

    pub fn values(&self) -> &Array3<u8> {
        &self.values
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn check_paired(&self, vol: &Volume3D) -> Result<()> {
        if self.shape() != vol.shape() {
            return Err(Error::Pairing(format!(
                "{}: mask shape {:?} differs from image shape {:?}",
                vol.subject_id(),
                self.shape(),
                vol.shape()
            )));
        }
        Ok(())
    }
}

/// One 2D training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    image: Array2<f64>,
    mask: Array2<u8>,
    subject_id: String,
    slice_index: usize,
    provenance: Provenance,
}

impl SlicePair {
    pub fn new(
        image: Array2<f64>,
        mask: Array2<u8>,
        subject_id: impl Into<String>,
        slice_index: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::Shape(format!("image {:?} vs mask {:?}", image.shape(), mask.shape())));
        }
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("image value {v} outside [0,1]")));
        }
        if let Some(v) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("mask value {v} is not binary")));
        }
        Ok(SlicePair { image, mask, subject_id: subject_id.into(), slice_index, provenance })
    }

    pub fn image(&self) -> &Array2<f64> {
        &self.image
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn slice_index(&self) -> usize {
        self.slice_index
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    pairs: Vec<SlicePair>,
    slice_shape: (usize, usize),
    split: Split,
}

impl SliceDataset {
    pub fn new(pairs: Vec<SlicePair>, slice_shape: (usize, usize), split: Split) -> Result<Self> {
        if let Some(p) = pairs.iter().find(|p| p.shape() != slice_shape) {
            return Err(Error::Shape(format!(
                "pair {}:{} has shape {:?}, dataset expects {slice_shape:?}",
                p.subject_id,
                p.slice_index,
                p.shape()
            )));
        }
        Ok(SliceDataset { pairs, slice_shape, split })
    }

    /// Builds a dataset whose slice shape is taken from the first pair.
    pub fn from_pairs(pairs: Vec<SlicePair>, split: Split) -> Result<Self> {
        let shape = pairs
            .first()
            .map(SlicePair::shape)
            .ok_or_else(|| Error::Config("cannot infer slice shape of an empty dataset".into()))?;
        Self::new(pairs, shape, split)
    }

    pub fn pairs(&self) -> &[SlicePair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<SlicePair> {
        self.pairs
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        self.slice_shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.pairs.iter().map(|p| p.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = encode_dataset(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_dataset(&bytes)
    }
}

/// Saves `ds` to `path` and reads it back.
pub fn dataset_roundtrip(ds: &SliceDataset, path: impl AsRef<Path>) -> Result<SliceDataset> {
    ds.save(&path)?;
    SliceDataset::load(&path)
}

// Archive layout:
//   magic (8 bytes) | u64 manifest length | manifest text
//   | f64 image block | u8 mask block | u64 checksum of all preceding bytes
const DATASET_MAGIC: &[u8; 8] = b"DHVDS\x00\x01\n";
const DATASET_VERSION: &str = "dhvae-dataset-1";

fn encode_dataset(ds: &SliceDataset) -> Result<Vec<u8>> {
    let (h, w) = ds.slice_shape;
    let mut manifest = format!("{DATASET_VERSION}\nshape {h} {w}\nsplit {}\ncount {}\n", ds.split, ds.len());
    for p in &ds.pairs {
        if p.subject_id.is_empty() || p.subject_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Domain(format!("subject id {:?} cannot be archived", p.subject_id)));
        }
        manifest.push_str(&format!("{}\t{}\t{}\n", p.subject_id, p.slice_index, p.provenance));
    }
    let n = ds.len() * h * w;
    let mut out = Vec::with_capacity(32 + manifest.len() + 9 * n);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for p in &ds.pairs {
        for v in p.image.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in &ds.pairs {
        out.extend(p.mask.iter().copied());
    }
    let sum = sha256_prefix(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode_dataset(bytes: &[u8]) -> Result<SliceDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "not a slice-dataset archive"));
    }
    let mlen = cur.u64("manifest length")? as usize;
    let mstart = cur.pos;
    let manifest = std::str::from_utf8(cur.take(mlen, "manifest")?)
        .map_err(|e| Error::format((mstart + e.valid_up_to()) as u64, "manifest is not UTF-8"))?;

    // Offsets of each manifest line for error reporting.
    let mut lines = Vec::new();
    let mut off = mstart;
    for line in manifest.split_terminator('\n') {
        lines.push((off as u64, line));
        off += line.len() + 1;
    }
    let mut it = lines.into_iter();
    let mut next = |what: &str| it.next().ok_or_else(|| Error::format(off as u64, format!("manifest missing {what}")));
    let bad = |o: u64, msg: String| Error::format(o, msg);

    let (o, l) = next("version")?;
    if l != DATASET_VERSION {
        return Err(bad(o, format!("unsupported version {l:?}")));
    }
    let (o, l) = next("shape")?;
    let dims: Vec<usize> = l
        .strip_prefix("shape ")
        .map(|r| r.split(' ').filter_map(|t| t.parse().ok()).collect())
        .unwrap_or_default();
    let [h, w] = dims[..] else {
        return Err(bad(o, format!("bad shape line {l:?}")));
    };
    let (o, l) = next("split")?;
    let split: Split = l
        .strip_prefix("split ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(o, format!("bad split line {l:?}")))?;
    let (o, l) = next("count")?;
    let count: usize = l
        .strip_prefix("count ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(o, format!("bad count line {l:?}")))?;
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let (o, l) = next("row")?;
        let f: Vec<&str> = l.split('\t').collect();
        let parsed = match f[..] {
            [id, idx, prov] if !id.is_empty() => idx.parse::<usize>().ok().zip(prov.parse::<Provenance>().ok()).map(|(i, p)| (id, i, p)),
            _ => None,
        };
        rows.push(parsed.ok_or_else(|| bad(o, format!("bad manifest row {i}: {l:?}")))?);
    }
    if let Some((o, l)) = it.next() {
        return Err(bad(o, format!("unexpected manifest line {l:?}")));
    }

    let px = h * w;
    let img_start = cur.pos;
    let img = cur.take(count * px * 8, "image block")?;
    let mask_start = cur.pos;
    let msk = cur.take(count * px, "mask block")?;
    let sum_start = cur.pos;
    let sum = cur.u64("checksum")?;
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after checksum"));
    }
    if sum != sha256_prefix(&bytes[..sum_start]) {
        return Err(Error::format(sum_start as u64, "checksum mismatch"));
    }

    let mut pairs = Vec::with_capacity(count);
    for (k, (id, idx, prov)) in rows.into_iter().enumerate() {
        let mut image = Vec::with_capacity(px);
        for j in 0..px {
            let at = k * px + j;
            let v = f64::from_le_bytes(img[at * 8..at * 8 + 8].try_into().unwrap());
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::format((img_start + at * 8) as u64, format!("image value {v} outside [0,1]")));
            }
            image.push(v);
        }
        let mask = msk[k * px..(k + 1) * px].to_vec();
        if let Some(j) = mask.iter().position(|&v| v > 1) {
            return Err(Error::format((mask_start + k * px + j) as u64, "non-binary mask value"));
        }
        pairs.push(SlicePair {
            image: Array2::from_shape_vec((h, w), image).unwrap(),
            mask: Array2::from_shape_vec((h, w), mask).unwrap(),
            subject_id: id.to_string(),
            slice_index: idx,
            provenance: prov,
        });
    }
    Ok(SliceDataset { pairs, slice_shape: (h, w), split })
}

// ---------------------------------------------------------------- volumes

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Container {
    Nifti,
    NiftiGz,
    Raw,
}

const RAW_EXT: &str = "rawvol";

fn split_container(path: &Path) -> Result<(String, Container)> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Ingestion(format!("{}: not a file name", path.display())))?;
    for (ext, c) in [(".nii.gz", Container::NiftiGz), (".nii", Container::Nifti), (".rawvol", Container::Raw)] {
        if let Some(stem) = name.strip_suffix(ext) {
            return Ok((stem.to_string(), c));
        }
    }
    Err(Error::Ingestion(format!("{}: unsupported container (expected .nii, .nii.gz or .{RAW_EXT})", path.display())))
}

fn sibling(path: &Path, stem: &str, c: Container) -> PathBuf {
    let ext = match c {
        Container::Nifti => "nii",
        Container::NiftiGz => "nii.gz",
        Container::Raw => RAW_EXT,
    };
    path.with_file_name(format!("{stem}.{ext}"))
}

/// Path of the mask that pairs with `path` by the `<stem>_mask` convention.
pub fn mask_path_for(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let (stem, c) = split_container(path)?;
    Ok(sibling(path, &format!("{stem}_mask"), c))
}

fn modality_from_name(stem: &str) -> Modality {
    let lower = stem.to_ascii_lowercase();
    if lower.contains("flair") {
        Modality::MriFlair
    } else if lower.contains("pet") {
        Modality::Pet
    } else {
        Modality::Synthetic
    }
}

fn read_array(path: &Path, c: Container) -> Result<(Array3<f64>, [f64; 3])> {
    if !path.is_file() {
        return Err(Error::Ingestion(format!("{}: no such file", path.display())));
    }
    match c {
        Container::Raw => read_raw(path),
        Container::Nifti | Container::NiftiGz => read_nifti(path),
    }
}

fn read_nifti(path: &Path) -> Result<(Array3<f64>, [f64; 3])> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let pixdim = obj.header().pixdim;
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let shape = arr.shape().to_vec();
    let dims = match shape[..] {
        [x, y, z] => [x, y, z],
        [x, y, z, 1] => [x, y, z],
        _ => return Err(Error::Ingestion(format!("{}: expected a 3D volume, got shape {shape:?}", path.display()))),
    };
    let values = arr.into_shape_clone(dims).map_err(|e| Error::Ingestion(e.to_string()))?;
    let spacing = [1, 2, 3].map(|i| if pixdim[i] > 0.0 { pixdim[i] as f64 } else { 1.0 });
    Ok((values.as_standard_layout().into_owned(), spacing))
}

fn read_raw(path: &Path) -> Result<(Array3<f64>, [f64; 3])> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Ingestion(format!("{}: missing header line", path.display())))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Ingestion(format!("{}: header is not text", path.display())))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    let parsed = (toks.len() == 6)
        .then(|| {
            let dims: Option<Vec<usize>> = toks[..3].iter().map(|t| t.parse().ok()).collect();
            let sp: Option<Vec<f64>> = toks[3..].iter().map(|t| t.parse().ok()).collect();
            dims.zip(sp)
        })
        .flatten();
    let Some((dims, sp)) = parsed else {
        return Err(Error::Ingestion(format!("{}: bad header {header:?}, expected \"H W D sx sy sz\"", path.display())));
    };
    let n = dims.iter().product::<usize>();
    let data = &bytes[nl + 1..];
    if data.len() != n * 4 {
        return Err(Error::Ingestion(format!(
            "{}: header declares {n} voxels ({} bytes) but {} data bytes follow",
            path.display(),
            n * 4,
            data.len()
        )));
    }
    let vals: Vec<f64> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    // x varies fastest on disk, as in NIfTI.
    let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]).f(), vals).unwrap();
    Ok((arr.as_standard_layout().into_owned(), [sp[0], sp[1], sp[2]]))
}

/// Loads a volume and, when a `<stem>_mask` sibling exists, its mask.
pub fn load_volume(path: impl AsRef<Path>) -> Result<(Volume3D, Option<MaskVolume3D>)> {
    let path = path.as_ref();
    let (stem, _) = split_container(path)?;
    load_volume_as(path, modality_from_name(&stem))
}

pub fn load_volume_as(path: impl AsRef<Path>, modality: Modality) -> Result<(Volume3D, Option<MaskVolume3D>)> {
    let path = path.as_ref();
    let (stem, c) = split_container(path)?;
    let (values, spacing) = read_array(path, c)?;
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Ingestion(format!("{}: {bad} NaN/non-finite voxels", path.display())));
    }
    let vol = Volume3D::new(values, spacing, modality, stem.clone())?;
    let mpath = sibling(path, &format!("{stem}_mask"), c);
    let mask = if mpath.is_file() {
        let (labels, _) = read_array(&mpath, c)?;
        if labels.shape() != vol.values.shape() {
            return Err(Error::Pairing(format!(
                "{}: mask shape {:?} differs from image shape {:?}",
                mpath.display(),
                labels.shape(),
                vol.values.shape()
            )));
        }
        Some(MaskVolume3D::from_labels(&labels, spacing)?)
    } else {
        None
    };
    Ok((vol, mask))
}

fn write_raw(path: &Path, values: impl Iterator<Item = f32>, shape: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    let mut out = format!("{} {} {} {} {} {}\n", shape[0], shape[1], shape[2], spacing[0], spacing[1], spacing[2]).into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_nifti(path: &Path, arr: &Array3<f32>, spacing: [f64; 3], gz: bool) -> Result<()> {
    use nifti::writer::WriterOptions;
    use nifti::NiftiHeader;
    let header = NiftiHeader {
        pixdim: [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0],
        ..NiftiHeader::default()
    };
    WriterOptions::new(path)
        .reference_header(&header)
        .compress(gz)
        .write_nifti(arr)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

fn write_any(path: &Path, arr: Array3<f32>, spacing: [f64; 3]) -> Result<()> {
    let (_, c) = split_container(path)?;
    match c {
        // Fortran-order iteration puts x fastest.
        Container::Raw => write_raw(path, arr.t().iter().copied(), [arr.dim().0, arr.dim().1, arr.dim().2], spacing),
        Container::Nifti => write_nifti(path, &arr, spacing, false),
        Container::NiftiGz => write_nifti(path, &arr, spacing, true),
    }
}

/// Writes a volume in the container named by the extension of `path`.
pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_any(path.as_ref(), vol.values.mapv(|v| v as f32), vol.spacing)
}

pub fn save_mask(mask: &MaskVolume3D, path: impl AsRef<Path>) -> Result<()> {
    write_any(path.as_ref(), mask.values.mapv(f32::from), mask.spacing)
}

/// Lists volume files (not masks) in `dir`, sorted by name.
pub fn list_volumes(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Ok((stem, _)) = split_container(&p) {
            if !stem.ends_with("_mask") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------- preprocessing

/// Per-volume min-max scaling to `[0, 1]`; constant volumes become zeros.
pub fn minmax_normalize(v: &Volume3D) -> Volume3D {
    let (lo, hi) = v.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let values = if range > 0.0 {
        v.values.mapv(|x| ((x - lo) / range).clamp(0.0, 1.0))
    } else {
        Array3::zeros(v.values.raw_dim())
    };
    Volume3D { values, ..v.clone() }
}

pub const DEFAULT_MIN_FG_PIXELS: usize = 10;
pub const AXIAL: usize = 2;

/// Axial slices whose mask has at least `min_fg_pixels` foreground pixels.
pub fn extract_tumor_slices(img: &Volume3D, mask: &MaskVolume3D, min_fg_pixels: usize) -> Result<Vec<SlicePair>> {
    extract_tumor_slices_along(img, mask, min_fg_pixels, AXIAL)
}

pub fn extract_tumor_slices_along(img: &Volume3D, mask: &MaskVolume3D, min_fg_pixels: usize, axis: usize) -> Result<Vec<SlicePair>> {
    mask.check_paired(img)?;
    if min_fg_pixels == 0 {
        return Err(Error::Config("min_fg_pixels must be at least 1".into()));
    }
    if axis > 2 {
        return Err(Error::Config(format!("slice axis {axis} out of range")));
    }
    let mut out = Vec::new();
    for k in 0..img.values.len_of(Axis(axis)) {
        let m = mask.values.index_axis(Axis(axis), k);
        let fg: usize = m.iter().map(|&v| v as usize).sum();
        if fg >= min_fg_pixels {
            let image = img.values.index_axis(Axis(axis), k).mapv(|v| v.clamp(0.0, 1.0));
            out.push(SlicePair::new(image, m.to_owned(), img.subject_id.clone(), k, Provenance::Real)?);
        }
    }
    Ok(out)
}

/// Normalizes each subject and pools its tumor slices into one dataset.
pub fn build_slice_dataset(subjects: &[(Volume3D, MaskVolume3D)], min_fg_pixels: usize, split: Split) -> Result<SliceDataset> {
    let mut pairs = Vec::new();
    for (vol, mask) in subjects {
        pairs.extend(extract_tumor_slices(&minmax_normalize(vol), mask, min_fg_pixels)?);
    }
    let first = subjects.first().ok_or_else(|| Error::Config("no subjects".into()))?;
    let [h, w, _] = first.0.shape();
    SliceDataset::new(pairs, (h, w), split)
}

// ------------------------------------------------------------ blob corpus

const BLOB_BACKGROUND: f64 = 0.3;
const BLOB_NOISE_SCALE: f64 = 0.25;

/// One synthetic subject, including the noise-free intensity field.
#[derive(Debug, Clone)]
pub struct BlobSubject {
    pub volume: Volume3D,
    pub mask: MaskVolume3D,
    pub clean: Array3<f64>,
    pub background: f64,
}

fn box_blur_axis(a: &Array3<f64>, axis: usize) -> Array3<f64> {
    let n = a.len_of(Axis(axis));
    let mut out = a.clone();
    for k in 0..n {
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(n - 1);
        let mut acc = a.index_axis(Axis(axis), lo).to_owned();
        for j in lo + 1..=hi {
            acc += &a.index_axis(Axis(axis), j);
        }
        acc /= (hi - lo + 1) as f64;
        out.index_axis_mut(Axis(axis), k).assign(&acc);
    }
    out
}

/// Subject `index` of the blob corpus generated with `seed`.
pub fn make_blob_subject(index: usize, shape: (usize, usize, usize), seed: u64) -> BlobSubject {
    let (h, w, d) = shape;
    let mut rng = rng_from(derive_seed(seed, &[0xb10b, index as u64]));
    let mut clean = Array3::from_elem(shape, BLOB_BACKGROUND);
    let mut mask = Array3::<u8>::zeros(shape);
    let n_blobs = rng.random_range(1..=3);
    for _ in 0..n_blobs {
        let semi = [
            rng.random_range(0.1..0.2) * h as f64,
            rng.random_range(0.1..0.2) * w as f64,
            rng.random_range(0.2..0.35) * d as f64,
        ];
        // Integer centers far enough from the border that the whole
        // ellipsoid fits and the center voxel is always inside it.
        let dims = [h, w, d];
        let center: Vec<f64> = (0..3)
            .map(|a| {
                let lo = semi[a].ceil() as usize;
                let hi = (dims[a] - 1).saturating_sub(semi[a].ceil() as usize).max(lo);
                rng.random_range(lo..=hi) as f64
            })
            .collect();
        let amp = rng.random_range(0.3..0.5);
        for ((x, y, z), v) in clean.indexed_iter_mut() {
            let r = ((x as f64 - center[0]) / semi[0]).powi(2)
                + ((y as f64 - center[1]) / semi[1]).powi(2)
                + ((z as f64 - center[2]) / semi[2]).powi(2);
            if r <= 1.0 {
                *v = v.max(BLOB_BACKGROUND + amp);
                mask[(x, y, z)] = 1;
            }
        }
    }
    let raw = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
    let smooth = box_blur_axis(&box_blur_axis(&box_blur_axis(&raw, 0), 1), 2);
    let values = &clean + &(smooth * BLOB_NOISE_SCALE);
    let id = format!("blob-{seed}-{index:04}");
    BlobSubject {
        volume: Volume3D::new(values, [1.0; 3], Modality::Synthetic, id).expect("blob volume is valid"),
        mask: MaskVolume3D::new(mask, [1.0; 3]).expect("blob mask is binary"),
        clean,
        background: BLOB_BACKGROUND,
    }
}

/// Smoothed noise plus one to three bright ellipsoids per subject.
pub fn make_blob_corpus(n_subjects: usize, shape: (usize, usize, usize), seed: u64) -> Result<Vec<(Volume3D, MaskVolume3D)>> {
    if n_subjects == 0 {
        return Err(Error::Config("n_subjects must be at least 1".into()));
    }
    if shape.0 < 8 || shape.1 < 8 || shape.2 < 8 {
        return Err(Error::Config(format!("blob shape {shape:?} must be at least 8 in every axis")));
    }
    Ok((0..n_subjects)
        .map(|i| {
            let s = make_blob_subject(i, shape, seed);
            (s.volume, s.mask)
        })
        .collect())
}

pub fn slice_view(vol: &Array3<f64>, k: usize) -> ArrayView2<'_, f64> {
    vol.index_axis(Axis(AXIAL), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn vol(values: Array3<f64>) -> Volume3D {
        Volume3D::new(values, [1.0; 3], Modality::Synthetic, "s").unwrap()
    }

    #[test]
    fn minmax_examples() {
        let v = vol(Array::from_shape_vec((3, 1, 1), vec![0.0, 100.0, 200.0]).unwrap());
        assert_eq!(minmax_normalize(&v).values().as_slice().unwrap(), &[0.0, 0.5, 1.0]);
        let c = vol(Array3::from_elem((2, 2, 2), 7.3));
        assert!(minmax_normalize(&c).values().iter().all(|&x| x == 0.0));
        let s = vol(Array::from_shape_vec((3, 1, 1), vec![-10.0, 0.0, 10.0]).unwrap());
        assert_eq!(minmax_normalize(&s).values().as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn volume_rejects_nan_and_bad_spacing() {
        let mut a = Array3::zeros((2, 2, 2));
        a[(0, 1, 0)] = f64::NAN;
        a[(1, 1, 0)] = f64::NAN;
        let e = Volume3D::new(a, [1.0; 3], Modality::Pet, "x").unwrap_err();
        assert!(e.to_string().contains("2 non-finite"), "{e}");
        assert!(Volume3D::new(Array3::zeros((1, 1, 1)), [1.0, 0.0, 1.0], Modality::Pet, "x").is_err());
    }

    fn mask_with_counts(counts: &[usize]) -> (Volume3D, MaskVolume3D) {
        let mut m = Array3::<u8>::zeros((4, 4, counts.len()));
        for (k, &c) in counts.iter().enumerate() {
            for i in 0..c {
                m[(i / 4, i % 4, k)] = 1;
            }
        }
        (vol(Array3::zeros((4, 4, counts.len()))), MaskVolume3D::new(m, [1.0; 3]).unwrap())
    }

    #[test]
    fn tumor_slice_threshold_is_inclusive() {
        let (v, m) = mask_with_counts(&[0, 10, 9, 16]);
        let s = extract_tumor_slices(&v, &m, 10).unwrap();
        assert_eq!(s.iter().map(SlicePair::slice_index).collect::<Vec<_>>(), vec![1, 3]);
        let (v, m) = mask_with_counts(&[0, 0]);
        assert!(extract_tumor_slices(&v, &m, 1).unwrap().is_empty());
    }

    #[test]
    fn unpaired_mask_is_pairing_error() {
        let v = vol(Array3::zeros((4, 4, 4)));
        let m = MaskVolume3D::zeros([4, 4, 5], [1.0; 3]);
        assert!(matches!(extract_tumor_slices(&v, &m, 1), Err(Error::Pairing(_))));
    }

    #[test]
    fn slice_pair_validation() {
        let img = Array2::from_elem((2, 2), 0.5);
        assert!(SlicePair::new(img.clone(), Array2::zeros((2, 2)), "a", 0, Provenance::Real).is_ok());
        assert!(SlicePair::new(img.clone(), Array2::from_elem((2, 2), 2), "a", 0, Provenance::Real).is_err());
        assert!(SlicePair::new(img.clone(), Array2::zeros((2, 3)), "a", 0, Provenance::Real).is_err());
        assert!(SlicePair::new(img * 3.0, Array2::zeros((2, 2)), "a", 0, Provenance::Real).is_err());
    }

    #[test]
    fn blob_corpus_is_deterministic() {
        let a = make_blob_corpus(1, (32, 32, 8), 0).unwrap();
        let b = make_blob_corpus(1, (32, 32, 8), 0).unwrap();
        assert_eq!(a, b);
        let c = make_blob_corpus(1, (32, 32, 8), 1).unwrap();
        assert_ne!(a, c);
        assert!(make_blob_corpus(1, (7, 32, 8), 0).is_err());
    }

    #[test]
    fn blob_mask_is_bright_support() {
        for i in 0..5 {
            let s = make_blob_subject(i, (32, 32, 16), 3);
            for (m, c) in s.mask.values().iter().zip(s.clean.iter()) {
                assert_eq!(*m == 1, *c > s.background);
            }
        }
    }

    #[test]
    fn blob_foreground_fraction_over_100_seeds() {
        for shape in [(32, 32, 8), (32, 32, 16), (64, 64, 16)] {
            for seed in 0..100 {
                let s = make_blob_subject(0, shape, seed);
                let frac = s.mask.foreground() as f64 / s.mask.values().len() as f64;
                assert!((0.005..=0.2).contains(&frac), "shape {shape:?} seed {seed}: fraction {frac}");
            }
        }
    }

    #[test]
    fn dataset_archive_roundtrip_and_corruption() {
        let corpus = make_blob_corpus(2, (16, 16, 8), 5).unwrap();
        let mut ds = build_slice_dataset(&corpus, 5, Split::Train).unwrap();
        assert!(!ds.is_empty());
        let mut pairs = ds.clone().into_pairs();
        let last = pairs.pop().unwrap();
        pairs.push(SlicePair { provenance: Provenance::Synthetic, ..last });
        ds = SliceDataset::new(pairs, ds.slice_shape(), Split::Train).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 20];
        assert!(matches!(decode_dataset(cut), Err(Error::Format { .. })));
        let mut flip = bytes.clone();
        let mid = bytes.len() - 100;
        flip[mid] ^= 1;
        match decode_dataset(&flip) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 8),
            other => panic!("expected checksum failure, got {other:?}"),
        }

        let empty = SliceDataset::new(vec![], (16, 16), Split::Test).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&empty).unwrap()).unwrap(), empty);
    }

    #[test]
    fn raw_volume_roundtrip_with_mask() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_blob_subject(0, (8, 10, 12), 1);
        let p = dir.path().join("subj.rawvol");
        save_volume(&s.volume, &p).unwrap();
        save_mask(&s.mask, mask_path_for(&p).unwrap()).unwrap();
        let (v, m) = load_volume(&p).unwrap();
        assert_eq!(v.shape(), [8, 10, 12]);
        assert_eq!(m.unwrap().values(), s.mask.values());
        for (a, b) in v.values().iter().zip(s.volume.values().iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(list_volumes(dir.path()).unwrap(), vec![p]);
    }

    #[test]
    fn nifti_roundtrip_and_mask_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Array3::zeros((6, 5, 4));
        a[(1, 2, 3)] = 2.5;
        a[(5, 0, 0)] = -1.0;
        let v = Volume3D::new(a, [1.0, 2.0, 3.0], Modality::MriFlair, "case_flair").unwrap();
        let p = dir.path().join("case_flair.nii.gz");
        save_volume(&v, &p).unwrap();
        let (back, mask) = load_volume(&p).unwrap();
        assert!(mask.is_none());
        assert_eq!(back.values(), v.values());
        assert_eq!(back.spacing(), [1.0, 2.0, 3.0]);
        assert_eq!(back.modality(), Modality::MriFlair);

        let bad = MaskVolume3D::zeros([6, 5, 3], [1.0; 3]);
        save_mask(&bad, mask_path_for(&p).unwrap()).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Pairing(_))));
    }

    #[test]
    fn missing_and_nan_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_volume(dir.path().join("nope.nii")), Err(Error::Ingestion(_))));
        let p = dir.path().join("n.rawvol");
        let vals = [1.0f32, f32::NAN, 0.0, f32::NAN, 2.0, 3.0, 4.0, 5.0];
        write_raw(&p, vals.into_iter(), [2, 2, 2], [1.0; 3]).unwrap();
        let e = load_volume(&p).unwrap_err();
        assert!(e.to_string().contains("2 NaN"), "{e}");
    }
}
