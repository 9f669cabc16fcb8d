//! Image datasets: the seeded synthetic shapes set, portable pixmaps and
//! raw tensor files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repre_tensor::Tensor;

use crate::error::{io_err, Error, Result};

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const RAW_MAGIC: &[u8; 4] = b"RTNS";

/// Labelled `[H, W, 3]` images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Writes `dir/<class>/<id>.ppm` for every image.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for name in &self.class_names {
            let sub = dir.join(name);
            fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        }
        for ((img, &label), id) in self.images.iter().zip(&self.labels).zip(&self.ids) {
            write_ppm(&dir.join(&self.class_names[label]).join(format!("{id}.ppm")), img)?;
        }
        Ok(())
    }
}

/// Seeded colored shapes on a two-color gradient background; the label is
/// the shape type. Image `i` depends only on `(seed, i)`.
pub fn synthetic(seed: u64, size: usize, classes: usize, image_size: usize) -> Result<Dataset> {
    if !(1..=SHAPE_NAMES.len()).contains(&classes) || image_size < 8 {
        return Err(Error::Data(format!(
            "synthetic set needs 1..=4 classes and images of at least 8 pixels (got {classes}, {image_size})"
        )));
    }
    let mut images = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    let mut ids = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let label = rng.gen_range(0..classes);
        images.push(draw_shape(label, image_size, &mut rng));
        labels.push(label);
        ids.push(format!("img{i:05}"));
    }
    Ok(Dataset {
        images,
        labels,
        ids,
        class_names: SHAPE_NAMES[..classes].iter().map(|s| s.to_string()).collect(),
    })
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // Upward triangle with apex at -r and base at +r.
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.55,
        _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

fn draw_shape<R: Rng>(shape: usize, size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let bg0 = random_color(rng, 0.0, 0.45);
    let bg1 = random_color(rng, 0.0, 0.45);
    let fg = random_color(rng, 0.55, 1.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let r = rng.gen_range(0.18..0.32) * s;
    let cx = rng.gen_range(r..s - r);
    let cy = rng.gen_range(r..s - r);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((px / s - 0.5) * ca + (py / s - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            let color = if inside(shape, px - cx, py - cy, r) {
                fg
            } else {
                [0, 1, 2].map(|c| bg0[c] * (1.0 - t) + bg1[c] * t)
            };
            data.extend_from_slice(&color);
        }
    }
    Tensor::new(&[size, size, 3], data).expect("image shape")
}

/// Parses a binary (P6) portable pixmap into `[H, W, 3]` values in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Data(format!("ppm: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 pixmaps are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || max == 0 || max > 255 {
        return Err(bad("dimensions must be positive and maxval at most 255"));
    }
    pos += 1;
    let payload = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
    let data = payload.iter().map(|&b| f64::from(b) / max as f64).collect();
    Ok(Tensor::new(&[h, w, 3], data)?)
}

/// Encodes `[H, W, 3]` values (clamped to `[0, 1]`) as a P6 pixmap.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(Error::Data(format!("ppm needs [H, W, 3], got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    parse_ppm(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(io_err(path))
}

/// Raw tensor file: `RTNS`, rank (u32 LE), dims (u64 LE), f64 LE payload.
pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    out.extend((t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn parse_raw(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Data(format!("raw tensor: {m}"));
    if bytes.get(..4) != Some(RAW_MAGIC) {
        return Err(bad("bad magic"));
    }
    let rank = u32::from_le_bytes(bytes.get(4..8).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated"))?;
        shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let payload = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated"))?;
    if pos + 8 * n != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => parse_ppm(&bytes),
        Some("rawt") => parse_raw(&bytes),
        _ => Err(Error::Data(format!("{}: unsupported image type", path.display()))),
    }
}

fn image_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "rawt")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `dir/<class>/*.{ppm,rawt}` with classes in sorted name order, or
/// a flat directory of images as a single unnamed class. Every image must
/// be `[image_size, image_size, 3]`.
pub fn load_dir(dir: &Path, image_size: usize) -> Result<Dataset> {
    let mut classes: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let groups: Vec<(String, Vec<std::path::PathBuf>)> = if classes.is_empty() {
        vec![("all".to_string(), image_files(dir)?)]
    } else {
        classes
            .iter()
            .map(|c| Ok((c.file_name().unwrap_or_default().to_string_lossy().into_owned(), image_files(c)?)))
            .collect::<Result<_>>()?
    };
    let mut ds = Dataset { images: Vec::new(), labels: Vec::new(), ids: Vec::new(), class_names: Vec::new() };
    for (label, (name, files)) in groups.into_iter().enumerate() {
        ds.class_names.push(name);
        for f in files {
            let img = read_image(&f)?;
            if img.shape() != [image_size, image_size, 3] {
                return Err(Error::Data(format!(
                    "{}: expected {image_size}x{image_size}x3, got {:?}",
                    f.display(),
                    img.shape()
                )));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("{}: values outside [0, 1]", f.display())));
            }
            ds.images.push(img);
            ds.labels.push(label);
            ds.ids.push(f.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: no images found", dir.display())));
    }
    Ok(ds)
}

/// Writes a small CSV with a header row.
pub(crate) fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "{header}").map_err(io_err(path))?;
    for row in rows {
        writeln!(f, "{row}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seeded_and_in_range() {
        let a = synthetic(7, 12, 4, 32).unwrap();
        let b = synthetic(7, 12, 4, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images[0], synthetic(8, 1, 4, 32).unwrap().images[0]);
        assert!(a.images.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(a.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn synthetic_classes_are_balanced_enough() {
        let ds = synthetic(0, 400, 4, 32).unwrap();
        for c in 0..4 {
            let n = ds.labels.iter().filter(|&&l| l == c).count();
            assert!((70..=130).contains(&n), "class {c}: {n}");
        }
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let img = Tensor::new(&[1, 2, 3], vec![0.0, 1.0, 0.2, 1.0, 0.0, 0.6]).unwrap();
        let back = parse_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        assert!(img.max_abs_diff(&back).unwrap() <= 0.5 / 255.0 + 1e-12);
        let mut bytes = encode_ppm(&img).unwrap();
        bytes.pop();
        assert!(parse_ppm(&bytes).is_err());
        assert!(parse_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(parse_ppm(b"P6\n# comment\n1 1\n255\n\x00\x80\xff").is_ok());
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let t = Tensor::new(&[2, 2, 3], (0..12).map(|i| f64::from(i) / 7.0).collect()).unwrap();
        assert_eq!(parse_raw(&encode_raw(&t)).unwrap(), t);
        let bytes = encode_raw(&t);
        assert!(parse_raw(&bytes[..bytes.len() - 1]).is_err());
    }
}
