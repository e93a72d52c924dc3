//! Sample containers and the on-disk dataset: label maps, a small binary
//! tensor container (32-bit arrays, bit-exact round trip), PNG previews and
//! label images, and the `root/manifest + root/<id>/…` dataset layout.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::synth::StereoSample;
use crate::tensor::{Scalar, Tensor};

/// Per-pixel semantic class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Shape(format!(
                "label map of {}x{} needs {} ids, got {}",
                height,
                width,
                height * width,
                ids.len()
            )));
        }
        Ok(LabelMap { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    /// The ids as a shared vector, the form the cross-entropy op consumes.
    pub fn shared_ids(&self) -> Rc<Vec<u8>> {
        Rc::new(self.ids.clone())
    }

    /// Largest class id present plus one (0 for an empty map).
    pub fn max_class_plus_one(&self) -> usize {
        self.ids.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    /// One-hot probability volume `[K, H, W]` for this map.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Result<Tensor<T>> {
        let mut t = Tensor::zeros(&[classes, self.height, self.width]);
        let plane = self.height * self.width;
        for (pix, &id) in self.ids.iter().enumerate() {
            if id as usize >= classes {
                return Err(Error::Data(format!(
                    "label id {} out of range for {} classes",
                    id, classes
                )));
            }
            t.data_mut()[id as usize * plane + pix] = T::one();
        }
        Ok(t)
    }

    /// Spatial crop matching [`Tensor::crop`].
    pub fn crop(&self, y0: usize, x0: usize, crop_h: usize, crop_w: usize) -> Result<LabelMap> {
        if y0 + crop_h > self.height || x0 + crop_w > self.width {
            return Err(Error::Shape(format!(
                "crop {crop_h}x{crop_w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut ids = Vec::with_capacity(crop_h * crop_w);
        for y in 0..crop_h {
            let start = (y0 + y) * self.width + x0;
            ids.extend_from_slice(&self.ids[start..start + crop_w]);
        }
        Ok(LabelMap {
            height: crop_h,
            width: crop_w,
            ids,
        })
    }

    /// Argmax over the channel axis of a `[K, H, W]` probability volume.
    pub fn from_argmax<T: Scalar>(probs: &Tensor<T>) -> LabelMap {
        let (k, h, w) = (probs.channels(), probs.height(), probs.width());
        debug_assert!(k <= u8::MAX as usize + 1);
        let plane = h * w;
        let pd = probs.data();
        let mut ids = vec![0u8; plane];
        for (pix, id) in ids.iter_mut().enumerate() {
            let mut best = 0usize;
            for c in 1..k {
                if pd[c * plane + pix] > pd[best * plane + pix] {
                    best = c;
                }
            }
            *id = best as u8;
        }
        LabelMap {
            height: h,
            width: w,
            ids,
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor container (.ten)
// ---------------------------------------------------------------------------

const TEN_MAGIC: &[u8; 4] = b"TEN0";
const TEN_DTYPE_F32: u8 = 1;

/// Writes a 32-bit float tensor to the binary container: magic, dtype, rank,
/// little-endian u64 dims, then raw little-endian values.
pub fn write_tensor_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(TEN_MAGIC).map_err(io)?;
    w.write_all(&[TEN_DTYPE_F32, t.rank() as u8]).map_err(io)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a tensor written by [`write_tensor_f32`].
pub fn read_tensor_f32(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TEN_MAGIC {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(io)?;
    if head[0] != TEN_DTYPE_F32 {
        return Err(bad("unsupported dtype"));
    }
    let rank = head[1] as usize;
    if rank > 8 {
        return Err(bad("implausible rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(io)?;
        let dim = u64::from_le_bytes(d) as usize;
        if dim == 0 || dim > (1 << 32) {
            return Err(bad("implausible dimension"));
        }
        shape.push(dim);
    }
    let n: usize = shape.iter().product();
    if n > (1 << 31) {
        return Err(bad("implausible element count"));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(bad("trailing bytes after tensor data"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data)
}

// ---------------------------------------------------------------------------
// PNG images
// ---------------------------------------------------------------------------

fn png_encode_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

fn png_decode_error(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

/// Writes a `[3, H, W]` image in [0,1] as an 8-bit RGB PNG (preview; the
/// exact values live in the tensor container).
pub fn write_image_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    if img.rank() != 3 || img.channels() != 3 {
        return Err(Error::Shape(format!(
            "PNG preview expects [3, H, W], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let mut bytes = Vec::with_capacity(plane * 3);
    for pix in 0..plane {
        for c in 0..3 {
            let v = img.data()[c * plane + pix].clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_encode_error(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| png_encode_error(path, e))
}

/// Reads an 8-bit RGB or grayscale PNG into a `[3, H, W]` image in [0,1].
pub fn read_image_png(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| png_decode_error(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_decode_error(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = h * w;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: expected 8-bit PNG",
            path.display()
        )));
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    let od = out.data_mut();
    match info.color_type {
        png::ColorType::Rgb => {
            for pix in 0..plane {
                for c in 0..3 {
                    od[c * plane + pix] = buf[pix * 3 + c] as f32 / 255.0;
                }
            }
        }
        png::ColorType::Rgba => {
            for pix in 0..plane {
                for c in 0..3 {
                    od[c * plane + pix] = buf[pix * 4 + c] as f32 / 255.0;
                }
            }
        }
        png::ColorType::Grayscale => {
            for pix in 0..plane {
                let v = buf[pix] as f32 / 255.0;
                for c in 0..3 {
                    od[c * plane + pix] = v;
                }
            }
        }
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported PNG color type {other:?}",
                path.display()
            )))
        }
    }
    Ok(out)
}

/// Writes a label map as a single-channel 8-bit PNG; ids are stored exactly.
pub fn write_labels_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        labels.width() as u32,
        labels.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_encode_error(path, e))?;
    writer
        .write_image_data(labels.ids())
        .map_err(|e| png_encode_error(path, e))
}

/// Reads a label map written by [`write_labels_png`].
pub fn read_labels_png(path: &Path) -> Result<LabelMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| png_decode_error(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_decode_error(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: label maps must be 8-bit grayscale PNG",
            path.display()
        )));
    }
    buf.truncate(info.width as usize * info.height as usize);
    LabelMap::new(info.height as usize, info.width as usize, buf)
}

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

/// Dataset-level parameters stored in `root/manifest`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: usize,
    pub focal_length_px: f64,
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
    pub count: usize,
}

impl DatasetManifest {
    fn render(&self) -> String {
        format!(
            "classes = {}\nfocal_length_px = {}\nbaseline = {}\nwidth = {}\nheight = {}\ncount = {}\n",
            self.classes, self.focal_length_px, self.baseline, self.width, self.height, self.count
        )
    }

    fn parse(text: &str, path: &Path) -> Result<DatasetManifest> {
        let mut classes = None;
        let mut focal = None;
        let mut baseline = None;
        let mut width = None;
        let mut height = None;
        let mut count = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad_num = |k: &str| {
                Error::Data(format!(
                    "{}:{}: invalid number for {k}",
                    path.display(),
                    lineno + 1
                ))
            };
            match key {
                "classes" => classes = Some(value.parse().map_err(|_| bad_num(key))?),
                "focal_length_px" => focal = Some(value.parse().map_err(|_| bad_num(key))?),
                "baseline" => baseline = Some(value.parse().map_err(|_| bad_num(key))?),
                "width" => width = Some(value.parse().map_err(|_| bad_num(key))?),
                "height" => height = Some(value.parse().map_err(|_| bad_num(key))?),
                "count" => count = Some(value.parse().map_err(|_| bad_num(key))?),
                other => {
                    return Err(Error::Data(format!(
                        "{}:{}: unknown manifest key '{other}'",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        let need = |name: &str| Error::Data(format!("{}: missing key '{name}'", path.display()));
        Ok(DatasetManifest {
            classes: classes.ok_or_else(|| need("classes"))?,
            focal_length_px: focal.ok_or_else(|| need("focal_length_px"))?,
            baseline: baseline.ok_or_else(|| need("baseline"))?,
            width: width.ok_or_else(|| need("width"))?,
            height: height.ok_or_else(|| need("height"))?,
            count: count.ok_or_else(|| need("count"))?,
        })
    }
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest")
}

fn sample_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

/// Writes one sample's files under `root/<id>/`.
pub fn write_sample(root: &Path, sample: &StereoSample, classes: usize) -> Result<()> {
    sample.validate(classes)?;
    let dir = sample_dir(root, &sample.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let arrays = [
        ("rainy_L", &sample.rainy_left),
        ("rainy_R", &sample.rainy_right),
        ("clean_L", &sample.clean_left),
        ("clean_R", &sample.clean_right),
        ("rain_L", &sample.rain_left),
        ("rain_R", &sample.rain_right),
        ("disparity", &sample.disparity),
    ];
    for (name, t) in arrays {
        write_tensor_f32(&dir.join(format!("{name}.ten")), t)?;
    }
    // Human-viewable previews for the four image arrays.
    for (name, t) in &arrays[..4] {
        write_image_png(&dir.join(format!("{name}.png")), t)?;
    }
    write_labels_png(&dir.join("labels_L.png"), &sample.labels_left)?;
    write_labels_png(&dir.join("labels_R.png"), &sample.labels_right)?;
    Ok(())
}

/// Writes a dataset: every sample from the iterator, then the manifest.
/// The iterator may synthesize lazily; the first error aborts the write.
pub fn write_dataset<I>(root: &Path, manifest: &DatasetManifest, samples: I) -> Result<()>
where
    I: IntoIterator<Item = Result<StereoSample>>,
{
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut written = 0usize;
    for sample in samples {
        let sample = sample?;
        write_sample(root, &sample, manifest.classes)?;
        written += 1;
    }
    if written != manifest.count {
        return Err(Error::Data(format!(
            "manifest says {} samples but {} were written",
            manifest.count, written
        )));
    }
    let path = manifest_path(root);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))
}

/// Reads `root/manifest`.
pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(root);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    DatasetManifest::parse(&text, &path)
}

/// Reads one sample directory and validates it against the manifest.
pub fn read_sample(root: &Path, manifest: &DatasetManifest, id: &str) -> Result<StereoSample> {
    let dir = sample_dir(root, id);
    let tensor = |name: &str| read_tensor_f32(&dir.join(format!("{name}.ten")));
    let sample = StereoSample {
        id: id.to_string(),
        rainy_left: tensor("rainy_L")?,
        rainy_right: tensor("rainy_R")?,
        clean_left: tensor("clean_L")?,
        clean_right: tensor("clean_R")?,
        rain_left: tensor("rain_L")?,
        rain_right: tensor("rain_R")?,
        labels_left: read_labels_png(&dir.join("labels_L.png"))?,
        labels_right: read_labels_png(&dir.join("labels_R.png"))?,
        disparity: tensor("disparity")?,
    };
    sample.validate(manifest.classes)?;
    if sample.height() != manifest.height || sample.width() != manifest.width {
        return Err(Error::Data(format!(
            "sample {id}: size {}x{} does not match manifest {}x{}",
            sample.height(),
            sample.width(),
            manifest.height,
            manifest.width
        )));
    }
    Ok(sample)
}

/// Reads the whole dataset eagerly. Sample ids are the zero-padded indices
/// `000000..count`.
pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Vec<StereoSample>)> {
    let manifest = read_manifest(root)?;
    let samples = (0..manifest.count)
        .map(|i| read_sample(root, &manifest, &crate::synth::sample_id(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
